import csv

import numpy as np
import pytest

from rodspring import blackbox as bb
from rodspring.sim import rollout, sample_dataset

TRUTH = np.array([100.0, 10.0])


@pytest.fixture(scope="module")
def reference(simple_config):
    ds = sample_dataset(simple_config, None, 3, 10, seed=5)
    return rollout(ds.initial_state(0), simple_config, None, 300)


@pytest.fixture(scope="module")
def known_loss(reference, simple_config):
    space, to_params = bb.known_mass_map(simple_config, mass=10.0)
    return space, bb.make_loss(reference, simple_config, to_params)


def _sphere(target):
    return lambda X: np.sum((np.atleast_2d(X) - target) ** 2, axis=1)


def test_search_space_defaults():
    s = bb.SearchSpace(["K", "c"])
    assert list(s.lo) == [0.1, 0.1] and list(s.hi) == [1000.0, 1000.0]
    assert list(s.init) == [1.0, 1.0]
    with pytest.raises(ValueError):
        bb.SearchSpace(["K"], lo=0.0)
    with pytest.raises(ValueError):
        bb.SearchSpace(["K"], init=2000.0)


def test_self_match_has_no_loss(known_loss):
    _, loss = known_loss
    assert loss(TRUTH) < 1e-12


def test_doubled_stiffness_costs(known_loss):
    _, loss = known_loss
    assert loss(TRUTH * [2.0, 1.0]) > 0


def test_batched_loss_matches_single(known_loss):
    _, loss = known_loss
    X = np.array([[100.0, 10.0], [120.0, 9.0], [50.0, 30.0]])
    batch = loss(X)
    assert batch.shape == (3,)
    for x, f in zip(X, batch):
        assert loss(x) == pytest.approx(f, rel=1e-12)


def test_blow_up_scores_penalty(simple_config, reference):
    cfg = simple_config.replace(dt=0.01)
    ref = rollout(reference.state(0), cfg, None, 300)
    _, to_params = bb.known_mass_map(cfg, mass=0.01)
    assert bb.trajectory_loss(np.array([1000.0, 0.1]), ref, cfg, to_params) == bb.PENALTY
    # one exploding candidate does not spoil its batch mates
    out = bb.trajectory_loss(np.array([[1000.0, 0.1], [0.2, 0.1]]), ref, cfg, to_params)
    assert out[0] == bb.PENALTY and out[1] < bb.PENALTY


def test_cma_sphere_benchmark():
    target = np.array([3.0, 7.0])
    res = bb.cma_es(_sphere(target), bb.SearchSpace(["a", "b"]), bb.CmaConfig(tol=1e-8, max_iter=200))
    assert res.loss < 1e-6
    assert len(res.history) <= 200


def test_population_floor():
    assert bb.CmaConfig().lam(2) == 6
    with pytest.raises(ValueError):
        bb.CmaConfig(popsize=3).lam(2)


def test_cma_is_deterministic():
    space = bb.SearchSpace(["a", "b"])
    a = bb.cma_es(_sphere(np.array([3.0, 7.0])), space, bb.CmaConfig(seed=4, tol=1e-3, max_iter=50))
    b = bb.cma_es(_sphere(np.array([3.0, 7.0])), space, bb.CmaConfig(seed=4, tol=1e-3, max_iter=50))
    assert np.array_equal(a.x, b.x)
    assert [(h[0], h[1], tuple(h[2])) for h in a.history] == [(h[0], h[1], tuple(h[2])) for h in b.history]


def test_cma_samples_stay_in_bounds():
    space = bb.SearchSpace(["a", "b"], lo=[0.1, 0.1], hi=[5.0, 5.0])
    seen = []

    def loss(X):
        seen.append(np.array(X))
        return _sphere(np.array([4.9, 0.2]))(X)

    bb.cma_es(loss, space, bb.CmaConfig(sigma0=10.0, max_iter=20, tol=1e-6))
    assert all(space.contains(X).all() for X in seen)


def test_incumbents_never_get_worse(known_loss):
    space, loss = known_loss
    for res in (bb.cma_es(loss, space, bb.CmaConfig(max_iter=10)), bb.local_search(loss, space, max_iter=10)):
        best = [h[1] for h in res.history]
        assert best and all(b <= a for a, b in zip(best, best[1:]))
        assert res.loss == best[-1]


def test_local_search_convex_quadratic():
    target = np.array([12.5, 0.75, 300.0])
    res = bb.local_search(_sphere(target), bb.SearchSpace(["a", "b", "c"]), max_iter=100)
    np.testing.assert_allclose(res.x, target, atol=1e-6)


def test_local_search_stays_at_truth(known_loss):
    space, loss = known_loss
    res = bb.local_search(loss, space, init=TRUTH)
    np.testing.assert_allclose(res.x, TRUTH, rtol=1e-9)
    assert res.loss < 1e-12


def test_free_mass_degeneracy_witness(reference, simple_config):
    # (K, c, M) scaled together leaves the trajectory unchanged
    space, to_params = bb.free_mass_map(simple_config)
    loss = bb.make_loss(rollout(reference.state(0), simple_config, None, 150), simple_config, to_params)
    runs = [bb.cma_es(loss, space, bb.CmaConfig(tol=1e-3, max_iter=300, seed=s)) for s in (0, 3)]
    (a, b) = [r.x for r in runs]
    assert all(r.loss < 1e-6 for r in runs)
    assert abs(a[2] - b[2]) > 1.0
    np.testing.assert_allclose(a[:2] / a[2], b[:2] / b[2], rtol=0.01)


def test_history_csv(tmp_path):
    res = bb.cma_es(_sphere(np.array([3.0, 7.0])), bb.SearchSpace(["K", "c"]), bb.CmaConfig(max_iter=3))
    path = tmp_path / "history.csv"
    bb.write_history_csv(res, ["K", "c"], path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iter", "best_loss", "K", "c", "wall_seconds"]
    assert len(rows) == 1 + len(res.history)
    assert float(rows[-1][1]) == res.loss
