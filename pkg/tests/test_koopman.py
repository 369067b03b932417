import numpy as np
import pytest

from rodspring import ident, koopman
from rodspring.core import SystemState
from rodspring.errors import RankDeficient
from rodspring.evaluation import compare_rollouts
from rodspring.sim import rollout, sample_dataset

# accumulated position MSE below this is rounding noise for a 2000-step rollout
ROUNDING_FLOOR = 1e-18


@pytest.fixture(scope="module")
def simple_model(simple_data, simple_config):
    return koopman.fit_koopman(simple_data, simple_config)


@pytest.fixture(scope="module")
def nonuniform_pool(nonuniform_config):
    return sample_dataset(nonuniform_config, None, n_traj=100, n_steps=500, seed=0)


def test_feature_count_and_names():
    spec = koopman.KoopmanBasisSpec()
    assert spec.n_features == 136
    names = spec.feature_names()
    assert len(names) == len(set(names)) == 136
    assert koopman.KoopmanBasisSpec(max_degree=1).n_features == 16


def test_zero_base_lifts_to_unit_vector():
    f = koopman.lift_base(np.zeros(15))
    assert f[0] == 1.0 and not f[1:].any()


def test_lift_contains_axis_times_offset_products():
    names = koopman.KoopmanBasisSpec().feature_names()
    for i in "xyz":
        for j in "xyz":
            for ch in ("dp1", "dp2", "dv1", "dv2"):
                assert f"r{i}*{ch}{j}" in names
    x = np.arange(1.0, 16.0)
    f = koopman.lift_base(x)
    assert f[names.index("rx*dv2z")] == x[0] * x[14]
    assert f[names.index("dp1y*dp1y")] == x[4] ** 2


def test_lift_is_deterministic(simple_config, simple_data):
    tr = simple_data.transitions("train").subset(np.arange(10))
    a = koopman.lift(simple_config, tr.p0, tr.v0, tr.q0, tr.w0)
    b = koopman.lift(simple_config, tr.p0.copy(), tr.v0.copy(), tr.q0.copy(), tr.w0.copy())
    assert a.shape == (10, 1, 136)
    assert np.array_equal(a, b)


def test_synthetic_span_is_fit_exactly():
    rng = np.random.default_rng(0)
    F = koopman.lift_base(rng.standard_normal((400, 15)))
    W = rng.standard_normal((136, 6))
    W_hat, rank = koopman.fit_operator(F, F @ W)
    assert rank == 136
    assert np.abs(F @ W_hat - F @ W).max() < 1e-8


def test_simple_dynamics_lie_in_span(simple_model, simple_data, simple_config):
    assert simple_model.weights.shape == (1, 136, 6)
    assert simple_model.residual_rms < 1e-6
    assert koopman.residual_rms(simple_model, simple_data, simple_config) < 1e-6


def test_rollout_matches_simulator(simple_model, simple_data, simple_config):
    init = simple_data.initial_state(simple_data.splits["test"][0])
    ref = rollout(init, simple_config, None, 100)
    pred = koopman.koopman_rollout(simple_model, init, simple_config, 100)
    assert pred.n_steps == 100
    for a, b in ((pred.p, ref.p), (pred.v, ref.v), (pred.w, ref.w)):
        assert np.abs(a[-1] - b[-1]).max() < 1e-6


def test_near_parity_with_ident(simple_model, simple_data, simple_config):
    init = simple_data.initial_state(simple_data.splits["test"][0])
    ref = rollout(init, simple_config, None, 2000)
    k_err = compare_rollouts(koopman.koopman_rollout(simple_model, init, simple_config, 2000), ref).pos_acc[-1]
    fit = ident.fit_closed_form(ident.build_features(simple_data, simple_config))
    i_err = compare_rollouts(ident.predict_rollout(fit, init, simple_config, 2000), ref).pos_acc[-1]
    # both sit at rounding level here; the floor keeps "2x" meaningful
    assert k_err <= 2 * max(i_err, ROUNDING_FLOOR), (k_err, i_err)


def test_zero_model_is_ballistic(icosa_config):
    model = koopman.KoopmanModel(koopman.KoopmanBasisSpec(), True, np.zeros((6, 136, 6)))
    cfg = icosa_config.replace(gravity=(0.0, 0.0, -9.81))
    p, q = cfg.rest_pose
    v = np.tile([1.0, 0.0, 0.0], (6, 1))
    init = SystemState(p, v, q, np.zeros((6, 3)))
    traj = koopman.koopman_rollout(model, init, cfg, 50)
    t = 50 * cfg.dt
    np.testing.assert_allclose(traj.v[-1], v + np.array([0, 0, -9.81]) * t, atol=1e-12)
    # semi-implicit Euler: p_n = p_0 + n dt v_0 + g dt^2 n(n+1)/2
    expected = p + t * v + np.array([0, 0, -9.81]) * cfg.dt**2 * 50 * 51 / 2
    np.testing.assert_allclose(traj.p[-1], expected, atol=1e-12)
    np.testing.assert_array_equal(traj.q[-1], q)


def test_tiny_data_is_rank_deficient(nonuniform_pool, nonuniform_config):
    tr = nonuniform_pool.transitions("train", count=73, seed=0)
    with pytest.raises(RankDeficient):
        koopman.fit_koopman(tr, nonuniform_config)
    # the engine fits the same 73 transitions
    fit = ident.fit_closed_form(ident.build_features(tr, nonuniform_config, ident.MULTIPLE))
    assert np.isfinite(ident.acceleration_residual_rms(fit, nonuniform_pool.transitions("test"), nonuniform_config))


def test_ridge_flag_rescues_tiny_data(nonuniform_pool, nonuniform_config):
    tr = nonuniform_pool.transitions("train", count=73, seed=0)
    model = koopman.fit_koopman(tr, nonuniform_config, ridge=1e-8)
    assert np.isfinite(koopman.residual_rms(model, nonuniform_pool, nonuniform_config))


def test_held_out_residual_falls_with_data(nonuniform_pool, nonuniform_config):
    curve = []
    for frac in (0.0001, 0.001, 0.01, 0.1, 1.0):
        tr = nonuniform_pool.transitions("train", fraction=frac, seed=0)
        try:
            model = koopman.fit_koopman(tr, nonuniform_config)
            curve.append(koopman.residual_rms(model, nonuniform_pool, nonuniform_config))
        except RankDeficient:
            curve.append(np.inf)
    assert all(b <= a for a, b in zip(curve, curve[1:])), curve
    assert np.isfinite(curve[-1])


def test_shared_map(icosa_data, icosa_config):
    model = koopman.fit_koopman(icosa_data, icosa_config, per_rod=False)
    assert model.weights.shape == (1, 136, 6)
    assert koopman.residual_rms(model, icosa_data, icosa_config) < 1e-6


def test_save_load_roundtrip(tmp_path, simple_model, simple_data, simple_config):
    path = tmp_path / "koopman.json"
    simple_model.save(path)
    back = koopman.KoopmanModel.load(path)
    assert np.array_equal(back.weights, simple_model.weights)
    assert back.per_rod == simple_model.per_rod and back.spec == simple_model.spec
