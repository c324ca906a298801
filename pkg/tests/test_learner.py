import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from ctmle import metrics
from ctmle.envs import make_environment
from ctmle.learner import (
    AugmentedSchedule,
    ConfidenceSet,
    Dataset,
    EmptyIntersectionWarning,
    LearnerConfig,
    LearnerState,
    MeasurementSchedule,
    TransitionSample,
    _loglik_rows,
    _stack_samples,
    build_schedule,
    confidence_set,
    estimate_return,
    estimate_value,
    kernel_for,
    log_likelihood,
    optimistic_select,
    randomize_schedule,
    run_episode,
    run_experiment,
)
from ctmle.density import transition
from ctmle.sde_core import RewardSpec, RngStream, linear_model, linear_policy, simulate_trajectory

ZERO = linear_policy([[0.0]], id=0)


def quiet_run(env, cfg, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyIntersectionWarning)
        return run_experiment(env, cfg, seed)


class TestSchedule:
    def test_quarter(self):
        s = build_schedule("equidistant", 1.0, delta=0.25)
        np.testing.assert_allclose(s.times, [0, 0.25, 0.5, 0.75, 1.0], atol=0)
        assert s.m == 4

    def test_single_gap(self):
        s = build_schedule("equidistant", 1.0, delta=1.0)
        np.testing.assert_array_equal(s.times, [0.0, 1.0])
        assert s.m == 1

    def test_truncated(self):
        s = build_schedule("equidistant", 1.0, delta=0.4)
        np.testing.assert_allclose(s.gaps, [0.4, 0.4, 0.2], atol=1e-15)

    def test_explicit_and_geometric(self):
        s = build_schedule("explicit", 2.0, times=[0.5, 1.5])
        np.testing.assert_array_equal(s.times, [0.0, 0.5, 1.5, 2.0])
        g = build_schedule("geometric", 1.0, ratio=2.0, m=3)
        np.testing.assert_allclose(g.gaps, [1 / 7, 2 / 7, 4 / 7], rtol=1e-12)

    @pytest.mark.parametrize("kw", [dict(kind="equidistant", delta=0.0), dict(kind="equidistant", delta=1.5),
                                    dict(kind="explicit", times=[]), dict(kind="explicit", times=[0.5, 0.2]),
                                    dict(kind="geometric", ratio=1.0, m=0), dict(kind="weekly")])
    def test_errors(self, kw):
        kind = kw.pop("kind")
        with pytest.raises(ValueError):
            build_schedule(kind, 1.0, **kw)

    @given(st.floats(0.01, 1.0), st.floats(0.5, 5.0))
    @settings(max_examples=60, deadline=None)
    def test_partition(self, delta, T):
        s = build_schedule("equidistant", T, delta=min(delta, T))
        assert s.times[0] == 0.0 and s.times[-1] == T
        assert np.all(s.gaps > 0)
        assert abs(s.gaps.sum() - T) < 1e-12 * T
        assert s.rms_gap == pytest.approx(math.sqrt(float(np.sum(s.gaps**2))))

    def test_invalid_direct(self):
        with pytest.raises(ValueError):
            MeasurementSchedule([0.1, 1.0])
        with pytest.raises(ValueError):
            AugmentedSchedule(build_schedule("equidistant", 1.0, delta=0.5), [0.25, 0.5])


class TestRandomize:
    def test_single_gap_bounds(self):
        s = build_schedule("equidistant", 1.0, delta=1.0)
        a = randomize_schedule(s, RngStream(0))
        assert 0 < a.offsets[0] < 1 and a.n_measurements == 2

    def test_reproducible(self):
        s = build_schedule("equidistant", 1.0, delta=0.25)
        a = randomize_schedule(s, RngStream(4, (1, "schedule")))
        b = randomize_schedule(s, RngStream(4, (1, "schedule")))
        np.testing.assert_array_equal(a.offsets, b.offsets)
        assert a.n_measurements == 2 * s.m

    def test_mean_offset(self):
        s = build_schedule("equidistant", 1.0, delta=0.4)
        off = np.array([randomize_schedule(s, RngStream(1, (i,))).offsets for i in range(10_000)])
        se = off.std(axis=0, ddof=1) / math.sqrt(off.shape[0])
        assert np.all(np.abs(off.mean(axis=0) - s.gaps / 2) <= 3 * se)

    @pytest.mark.parametrize("h", [lambda t: t, lambda t: t * t])
    def test_probe_unbiased(self, h):
        gap = 0.5
        s = build_schedule("equidistant", gap * 100_000, delta=gap)
        a = randomize_schedule(s, RngStream(7))
        vals = gap * h(a.offsets)
        ref = quad(h, 0, gap)[0]
        assert abs(vals.mean() - ref) <= 3 * vals.std(ddof=1) / math.sqrt(vals.size)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_offsets_inside(self, seed):
        s = build_schedule("equidistant", 1.0, delta=0.3)
        a = randomize_schedule(s, RngStream(seed))
        assert np.all(a.offsets > 0) and np.all(a.offsets < s.gaps)


class TestLikelihood:
    def test_empty(self):
        env = make_environment("ou_control")
        assert log_likelihood(env.true_model, env.policy_class, []) == 0.0

    def test_mode_value(self):
        m = linear_model([[-1.0]], [[0.0]], [[1.0]])
        gt = transition(kernel_for(m, ZERO), [1.0], 0.5)
        s = TransitionSample(0, np.array([1.0]), gt.mean.copy(), 0.5)
        v = gt.covariance[0, 0]
        assert abs(log_likelihood(m, [ZERO], [s]) + 0.5 * math.log(2 * math.pi * v)) < 1e-12

    def test_mixed_tags(self):
        a = TransitionSample(0, np.zeros(1), np.zeros(1), 0.1, "grid")
        b = TransitionSample(0, np.zeros(1), np.zeros(1), 0.1, "augmented")
        with pytest.raises(ValueError):
            log_likelihood(linear_model([[0.0]], [[0.0]], [[1.0]]), [ZERO], [a, b])

    def test_bad_gap(self):
        with pytest.raises(ValueError):
            TransitionSample(0, np.zeros(1), np.zeros(1), 0.0)

    def test_kernel_choice(self):
        env = make_environment("bounded_nonlinear")
        assert kernel_for(env.true_model, env.policy_class[0]).mode == "euler_gaussian"
        ou = make_environment("ou_control")
        assert kernel_for(ou.true_model, ou.policy_class[1]).mode == "closed_form_linear"

    def test_true_model_wins(self):
        env = make_environment("ou_control", 1.0)
        pol = env.policy_class[1]
        rng = RngStream(2)
        samples = []
        for i in range(250):
            tr = simulate_trajectory(env.true_model, pol, env.x_ini, 1.0, 1 / 400, rng.child(i))
            idx = [0, 100, 200, 300, 400]
            for a, b in zip(idx[:-1], idx[1:]):
                samples.append(TransitionSample(pol.id, tr.states[a], tr.states[b], tr.times[b] - tr.times[a]))
        assert len(samples) == 1000
        stacked = _stack_samples(samples)
        rows_true = _loglik_rows(env.true_model, env.policy_class, *stacked, "auto")
        for m in env.model_class:
            rows = _loglik_rows(m, env.policy_class, *stacked, "auto")
            d = rows_true - rows
            assert d.sum() >= -2 * d.std(ddof=1) * math.sqrt(d.size)


class TestConfidenceSet:
    def test_no_history(self):
        assert confidence_set(np.zeros(25), 3.0).member_ids == tuple(range(25))

    def test_zero_radius(self):
        c = confidence_set([1.0, 3.0, 3.0, 2.0], 0.0, [10, 11, 12, 13])
        assert c.member_ids == (11, 12) and c.best_loglik == 3.0

    def test_errors(self):
        with pytest.raises(ValueError):
            confidence_set([1.0], -1.0)
        with pytest.raises(ValueError):
            confidence_set([], 1.0)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), st.floats(0, 50), st.floats(0, 50))
    @settings(max_examples=100, deadline=None)
    def test_beta_monotone_and_argmax(self, L, b1, extra):
        small = confidence_set(L, b1)
        big = confidence_set(L, b1 + extra)
        assert set(small.member_ids) <= set(big.member_ids)
        assert int(np.argmax(L)) in small
        assert isinstance(small, ConfidenceSet) and len(small) >= 1


class TestDataset:
    def test_partitions(self):
        d = Dataset()
        d.extend([TransitionSample(0, np.zeros(1), np.ones(1), 0.1, t) for t in ("grid", "augmented", "grid")])
        assert len(d) == 3
        assert len(d.partition("grid")) == 2 and len(d.partition("augmented")) == 1
        assert all(s.tag == "grid" for s in d.partition("grid"))


def ou_exp_reference(x0=1.0):
    # E exp(-X^2) for X ~ N(m, v) equals exp(-m^2 / (1 + 2v)) / sqrt(1 + 2v)
    def f(t):
        m, v = x0 * math.exp(-t), 0.5 * (1 - math.exp(-2 * t))
        return math.exp(-m * m / (1 + 2 * v)) / math.sqrt(1 + 2 * v)
    return quad(f, 0, 1, epsabs=1e-13)[0]


class TestValues:
    def test_deterministic_constant_rate(self):
        m = linear_model([[-1.0]], [[0.0]], [[0.0]])
        reward = RewardSpec(lambda x, u: np.ones(x.shape[:-1]), 1.0)
        mean, se = estimate_return(m, ZERO, reward, 16, 0.01, RngStream(0), 0.3)
        assert abs(mean - 1.0) < 1e-12 and se == 0.0

    def test_ou_reference(self):
        m = linear_model([[-1.0]], [[0.0]], [[1.0]])
        reward = RewardSpec(lambda x, u: np.exp(-x[..., 0] ** 2), 1.0)
        mean, se = estimate_return(m, ZERO, reward, 40_000, 1 / 512, RngStream(3), 1.0)
        assert abs(mean - ou_exp_reference()) <= 3 * se + 2e-4

    def test_std_err_scaling(self):
        env = make_environment("ou_control")
        pol = env.policy_class[1]
        _, s1 = estimate_return(env.true_model, pol, env.reward, 1000, 1 / 128, RngStream(1), env.x_ini)
        _, s4 = estimate_return(env.true_model, pol, env.reward, 4000, 1 / 128, RngStream(2), env.x_ini)
        assert 0.4 <= s4 / s1 <= 0.6

    def test_terminal_value(self):
        env = make_environment("ou_control")
        assert estimate_value(env.true_model, ZERO, env.reward, [0.0], 1.0, 8, 0.01, RngStream(0)) == (0.0, 0.0)


class TestOptimistic:
    def test_singleton(self):
        env = make_environment("ou_control")
        pid, mid, v, se = optimistic_select([env.policy_class[2]], [env.true_model], env.reward, 64, 1 / 64,
                                            RngStream(0), env.x_ini)
        ref, ref_se = estimate_return(env.true_model, env.policy_class[2], env.reward, 64, 1 / 64,
                                      RngStream(0), env.x_ini)
        assert (pid, mid) == (2, env.true_model.id)
        assert abs(v - ref) < 1e-12 and abs(se - ref_se) < 1e-12

    def test_ties(self):
        env = make_environment("ou_control")
        table = {(p.id, m): (0.5, 0.0) for p in env.policy_class for m in (0, 1)}
        got = optimistic_select(env.policy_class, [env.model(1), env.model(0)], env.reward, 1, 0.1, None,
                                table=table)
        assert got[:2] == (0, 0)

    def test_errors(self):
        env = make_environment("ou_control")
        with pytest.raises(ValueError):
            optimistic_select([], [env.true_model], env.reward, 4, 0.1, RngStream(0))
        with pytest.raises(ValueError):
            optimistic_select(env.policy_class, [], env.reward, 4, 0.1, RngStream(0))

    def test_matches_high_budget_scan(self):
        # reward depends on the mean state only through a linear rate, so diffusion does not matter
        env = make_environment("ou_control")
        reward = RewardSpec(lambda x, u: 0.5 + 0.25 * np.tanh(x[..., 0]) - 0.02 * u[..., 0] ** 2, 1.0)
        models = [linear_model([[0.5]], [[1.0]], [[0.3]], id=0), linear_model([[0.5]], [[1.0]], [[0.9]], id=1)]
        pols = env.policy_class
        agree = 0
        for i in range(100):
            a = optimistic_select(pols, models, reward, 256, 1 / 64, RngStream(i, ("lo",)), 1.0)
            b = optimistic_select(pols, models, reward, 2560, 1 / 64, RngStream(i, ("hi",)), 1.0)
            agree += a[0] == b[0]
        assert agree >= 95

    def test_optimism(self):
        env = make_environment("ou_control", 1.0)
        oracle = metrics.brute_force_optimal(env.policy_class, env.true_model, env.reward, 2560,
                                             RngStream(0, ("oracle",)), env.x_ini)
        pid, mid, v, se = optimistic_select(env.policy_class, env.model_class, env.reward, 256, 1 / 256,
                                            RngStream(1), env.x_ini)
        assert v >= oracle[1] - 2 * math.hypot(se, oracle[2])


class TestEpisodes:
    def test_first_episode_global_argmax(self):
        env = make_environment("ou_control", 1.0)
        st_ = LearnerState(env, LearnerConfig(n_episodes=5), 0)
        rec = run_episode(st_, 0)
        assert rec.set_sizes == (25, 25, 25)
        tab = st_.table(0)
        best = max(tab, key=lambda k: (tab[k][0], -k[0], -k[1]))
        assert (rec.policy_id, rec.model_id) == best
        assert len(st_.dataset.partition("grid")) == len(st_.dataset.partition("augmented")) == rec.schedule.m

    def test_single_episode(self):
        env = make_environment("ou_control", 1.0)
        res = run_experiment(env, LearnerConfig(n_episodes=1), 3)
        assert res.n_episodes == 1
        assert res.output_policy_id == res.records[0].policy_id and res.output_episode == 0

    def test_bit_identical(self):
        env = make_environment("ou_control", 1.0)
        a = run_experiment(env, LearnerConfig(n_episodes=10), 5)
        b = run_experiment(env, LearnerConfig(n_episodes=10), 5)
        assert [r.realized_return for r in a.records] == [r.realized_return for r in b.records]
        assert [r.intersection for r in a.records] == [r.intersection for r in b.records]
        assert a.output_episode == b.output_episode

    def test_shrinkage_and_range(self):
        # a single run is too short to judge; pool adjacent pairs over 20 runs
        env = make_environment("ou_control", 1.0)
        ok = total = 0
        for seed in range(20):
            res = run_experiment(env, LearnerConfig(n_episodes=50), seed)
            sizes = [len(r.intersection) for r in res.records]
            ok += sum(b <= a for a, b in zip(sizes, sizes[1:]))
            total += len(sizes) - 1
            assert all(0.0 <= r.realized_return <= 1.0 for r in res.records)
        assert ok >= 0.9 * total

    def test_nonlinear_preset_runs(self):
        env = make_environment("bounded_nonlinear", 0.5)
        res = quiet_run(env, LearnerConfig(n_episodes=3, schedule_delta=0.5, value_rollouts=32), 0)
        assert res.n_episodes == 3

    def test_fallback_below_floor(self):
        env = make_environment("ou_control", 0.0)
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            res = run_experiment(env, LearnerConfig(n_episodes=5), 0)
        fell = [r for r in res.records if r.fallback]
        assert len(fell) == sum(issubclass(x.category, EmptyIntersectionWarning) for x in w)
        for r in fell:
            assert r.intersection == r.grid_set.member_ids

    def test_learning_progress(self):
        env = make_environment("ou_control", 1.0)
        oracle = metrics.brute_force_optimal(env.policy_class, env.true_model, env.reward, 2560,
                                             RngStream(0, ("oracle",)), env.x_ini)
        res = run_experiment(env, LearnerConfig(n_episodes=200), 0)
        curve = metrics.regret_curve(res.records, oracle[0], oracle[4])
        assert curve.instantaneous[150:].mean() < curve.instantaneous[:50].mean()

    def test_config_errors(self):
        for kw in (dict(n_episodes=0), dict(delta=1.0), dict(beta_mode="x"), dict(value_refresh="x")):
            with pytest.raises(ValueError):
                LearnerConfig(**kw)

    def test_beta(self):
        assert abs(LearnerConfig(n_episodes=100, delta=0.1).beta(50) - math.log(50000)) < 1e-12
        assert abs(LearnerConfig(n_episodes=100, delta=0.1, beta_mode="doubled").beta(50)
                   - math.log(100000)) < 1e-12
