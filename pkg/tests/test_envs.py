import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctmle import metrics
from ctmle.density import hellinger_sq_quadratic
from ctmle.envs import G_MIN, PRESETS, make_environment
from ctmle.learner import value_table
from ctmle.sde_core import RngStream

SIMULATED = ["ou_control", "linear_2d", "bounded_nonlinear"]


@pytest.mark.parametrize("name", SIMULATED)
def test_true_model_in_class(name):
    env = make_environment(name, 0.7)
    assert env.true_in_class
    assert env.model(env.true_index) is env.true_model
    assert len(env.model_class) == env.n_drift * env.n_diffusion == 25
    assert [m.id for m in env.model_class] == list(range(25))
    assert [p.id for p in env.policy_class] == list(range(len(env.policy_class)))


@pytest.mark.parametrize("name", SIMULATED)
def test_below_floor_is_flagged(name):
    env = make_environment(name, 0.0)
    assert not env.true_in_class and not env.likelihood_exact
    assert env.true_model not in env.model_class
    assert min(float(np.min(np.abs(np.asarray(m.params["sigma"])))) for m in env.model_class) >= G_MIN


def test_model_id_layout():
    env = make_environment("ou_control", 1.0)
    a = env.params["a_grid"]
    for i, m in enumerate(env.model_class):
        assert m.params["a"] == a[i // env.n_diffusion]
    sig = sorted({m.params["sigma"] for m in env.model_class})
    assert len(sig) == 5 and 1.0 in sig
    assert env.model(env.true_index).params == {"a": 0.0, "c": 1.0, "sigma": 1.0}


@pytest.mark.parametrize("name", list(PRESETS))
def test_pure(name):
    a, b = make_environment(name, 0.3), make_environment(name, 0.3)
    assert a.true_index == b.true_index
    np.testing.assert_array_equal(a.x_ini, b.x_ini)
    if a.true_model is not None:
        x = np.linspace(-1, 1, 6)[:, None] * np.ones((1, a.true_model.state_dim))
        u = np.zeros((6, a.true_model.control_dim))
        np.testing.assert_array_equal(a.true_model.drift(x, u), b.true_model.drift(x, u))


def test_errors():
    with pytest.raises(ValueError):
        make_environment("pendulum")
    with pytest.raises(ValueError):
        make_environment("ou_control", -1.0)
    with pytest.raises(ValueError):
        make_environment("ou_control", 1.0, {"nope": 1})
    with pytest.raises(ValueError):
        make_environment("ou_control", 1.0, {"a_true": 0.5})


def test_overrides():
    env = make_environment("ou_control", 1.0, {"gains": [0.0, 3.0], "clip": 1.0})
    assert len(env.policy_class) == 2
    assert env.policy_class[1].clip == 1.0


def test_zero_volatility_variance():
    env = make_environment("ou_control", 0.0)
    for p in env.policy_class:
        v, _ = metrics.total_variance(env.true_model, p, env.reward, 256, 1 / 256, RngStream(0), env.x_ini)
        assert v < 1e-10


def test_variance_grows_with_sigma():
    pol = make_environment("ou_control").policy_class[0]
    lo_env, hi_env = make_environment("ou_control", 0.4), make_environment("ou_control", 2.0)
    lo, slo = metrics.total_variance(lo_env.true_model, pol, lo_env.reward, 4000, 1 / 256, RngStream(1), 1.0)
    hi, shi = metrics.total_variance(hi_env.true_model, pol, hi_env.reward, 4000, 1 / 256, RngStream(2), 1.0)
    assert hi - lo > 3 * math.hypot(slo, shi)


@pytest.mark.parametrize("name", SIMULATED)
def test_returns_in_unit_interval(name):
    env = make_environment(name, 2.0)
    pairs = [(p, env.true_model) for p in env.policy_class]
    _, _, smp = value_table(pairs, env.reward, env.x_ini, env.reward.horizon, 1000, 1 / 128, RngStream(0))
    assert smp.min() >= 0.0 and smp.max() <= 1.0


@pytest.mark.parametrize("sigma", [0.1, 0.5, 1.0])
def test_known_constants_bound_variance(sigma):
    env = make_environment("ou_control", sigma)
    kc = env.known_constants
    for p in env.policy_class:
        v, se = metrics.total_variance(env.true_model, p, env.reward, 2000, 1 / 256, RngStream(3, (p.id,)),
                                       env.x_ini)
        bound = metrics.gronwall_variance_bound(kc["L_b"], kc["L_f"], p.lipschitz_hint, kc["G_frob"], 1.0)
        assert v <= min(1.0, bound) + 3 * se


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=50, deadline=None)
def test_reward_rate_bounds(x, u):
    env = make_environment("ou_control")
    r = float(env.reward.rate(np.array([x]), np.array([u])))
    assert 0.0 <= r <= 1.0 / env.reward.horizon
    h = 1e-6
    slope = abs(float(env.reward.rate(np.array([x + h]), np.array([u]))) - r) / h
    assert slope <= env.reward.lipschitz_hint * (1 + 1e-3)


def test_quadratic_fixture():
    env = make_environment("quadratic_fixture")
    assert env.true_model is None and env.family is not None
    assert len(env.family) == 5
    assert hellinger_sq_quadratic(env.family, 0, 0, None, None, 1.0) < 1e-12
