import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rodspring import presets
from rodspring.core import (
    MINUS,
    PLUS,
    Anchor,
    RodEnd,
    RodSpec,
    RodState,
    SpringSpec,
    SystemConfig,
    TopologyGraph,
    Trajectory,
    axis_world,
    cylinder_inertia,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
    rod_axis_world,
    rotate,
    rotation_matrix,
)
from rodspring.errors import TopologyError

quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda x: np.linalg.norm(x) > 1e-3
).map(quat_normalize)
vec3 = st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.array)


def test_identity_quaternion_gives_identity_matrix():
    assert np.array_equal(rotation_matrix([1.0, 0, 0, 0]), np.eye(3))


def test_half_turn_about_z():
    R = rotation_matrix(quat_from_axis_angle([0, 0, 1], np.pi))
    np.testing.assert_allclose(R, np.diag([-1.0, -1.0, 1.0]), atol=1e-12)


@given(quats)
def test_rotation_matrix_is_proper_orthogonal(q):
    R = rotation_matrix(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_rotation_matrix_batches():
    qs = quat_normalize(np.random.default_rng(0).standard_normal((4, 5, 4)))
    R = rotation_matrix(qs)
    assert R.shape == (4, 5, 3, 3)
    np.testing.assert_allclose(R[2, 3], rotation_matrix(qs[2, 3]))


def test_axis_identity_orientation():
    state = RodState(np.zeros(3), np.zeros(3), [1, 0, 0, 0], np.zeros(3))
    np.testing.assert_array_equal(rod_axis_world(state, RodSpec(1.0, 0.05, 1.0)), [0, 0, 1])


def test_axis_quarter_turn_about_x():
    q = quat_from_axis_angle([1, 0, 0], np.pi / 2)
    np.testing.assert_allclose(axis_world(q, 0.52), [0, -0.52, 0], atol=1e-15)


@given(quats, st.floats(0.01, 5))
def test_axis_norm_is_half_length(q, r):
    assert abs(np.linalg.norm(axis_world(q, r)) - r) < 1e-12


@given(quats, vec3)
def test_rotate_preserves_norm(q, v):
    assert abs(np.linalg.norm(rotate(q, v)) - np.linalg.norm(v)) < 1e-9 * (1 + np.linalg.norm(v))


@settings(max_examples=50)
@given(st.lists(quats, min_size=1, max_size=20))
def test_products_stay_unit_after_renormalization(qs):
    q = np.array([1.0, 0, 0, 0])
    for other in qs:
        q = quat_normalize(quat_multiply(other, q))
    assert abs(np.linalg.norm(q) - 1) < 1e-9


def test_rod_state_normalizes_quaternion():
    s = RodState(np.zeros(3), np.zeros(3), [2.0, 0, 0, 0], np.zeros(3))
    assert abs(np.linalg.norm(s.q) - 1) < 1e-12


def test_rod_state_rejects_nan():
    with pytest.raises(ValueError):
        RodState([np.nan, 0, 0], np.zeros(3), [1, 0, 0, 0], np.zeros(3))


def test_cylinder_inertia_formula():
    i11, i33 = cylinder_inertia(10.0, 1.0, 0.05)
    assert i11 == pytest.approx(10.0 * (2.0**2 / 12 + 0.05**2 / 4), rel=1e-15)
    assert i33 == pytest.approx(10.0 * 0.05**2 / 2, rel=1e-15)
    assert RodSpec(1.0, 0.05, 10.0).i11 == pytest.approx(i11)


@pytest.mark.parametrize("kw", [dict(mass=0.0), dict(half_length=-1.0), dict(inertia=(1.0, 0.0))])
def test_rod_spec_rejects_non_positive(kw):
    base = dict(half_length=1.0, radius=0.05, mass=1.0)
    base.update(kw)
    with pytest.raises(TopologyError):
        RodSpec(**base)


def test_spring_spec_validation():
    with pytest.raises(TopologyError):
        SpringSpec(0.0, 1.0, 1.0, Anchor(0), RodEnd(0))
    with pytest.raises(TopologyError):
        SpringSpec(1.0, -1.0, 1.0, Anchor(0), RodEnd(0))
    with pytest.raises(TopologyError):
        SpringSpec(1.0, 1.0, 1.0, RodEnd(0, PLUS), RodEnd(0, PLUS))
    with pytest.raises(TopologyError):
        RodEnd(0, "middle")


def test_topology_rejects_dangling_references():
    rod = RodSpec(1.0, 0.05, 1.0)
    with pytest.raises(TopologyError, match="missing rod 3"):
        TopologyGraph([rod], [SpringSpec(1, 0, 1, RodEnd(0), RodEnd(3))])
    with pytest.raises(TopologyError, match="missing anchor 1"):
        TopologyGraph([rod], [SpringSpec(1, 0, 1, Anchor(1), RodEnd(0))], [(0, 0, 0)])
    with pytest.raises(TopologyError, match="two anchors"):
        TopologyGraph([rod], [SpringSpec(1, 0, 1, Anchor(0), Anchor(1))], [(0, 0, 0), (1, 0, 0)])


def test_rod_end_may_carry_no_springs():
    topo = TopologyGraph([RodSpec(1.0, 0.05, 1.0)] * 2, [SpringSpec(1, 0, 1, RodEnd(0), RodEnd(1))])
    assert topo.springs_at(0, MINUS) == []
    assert topo.springs_at(1, PLUS) == [0]


def test_dt_guard():
    topo = presets.simple().topology
    with pytest.raises(TopologyError):
        SystemConfig(topo, dt=0.02)
    with pytest.raises(TopologyError):
        SystemConfig(topo, dt=0.0)


def test_icosahedron_incidence():
    topo = presets.icosa_uniform().topology
    assert topo.n_rods == 6
    assert topo.n_springs == 24
    for r in range(6):
        assert len(topo.springs_at(r, PLUS)) == 4
        assert len(topo.springs_at(r, MINUS)) == 4
        assert len(topo.springs_at(r)) == 8


def test_icosahedron_rest_cables_equal():
    centers, quats_, cables = presets.icosahedron_geometry(1.04)
    tips = {}
    for r in range(6):
        rw = axis_world(quats_[r], 0.52)
        tips[(r, PLUS)], tips[(r, MINUS)] = centers[r] + rw, centers[r] - rw
    lengths = [np.linalg.norm(tips[a] - tips[b]) for a, b in cables]
    np.testing.assert_allclose(lengths, 1.04 * np.sqrt(6) / 4, rtol=1e-12)
    # struts never touch: parallel struts sit half a strut length apart
    assert min(np.linalg.norm(centers[2 * i] - centers[2 * i + 1]) for i in range(3)) == pytest.approx(0.52)


@pytest.mark.parametrize("name", ["simple", "icosa_uniform"])
def test_config_json_roundtrip(name, tmp_path):
    config = presets.load_preset(name)
    path = tmp_path / "c.json"
    config.to_json(path)
    back = SystemConfig.from_json(path)
    assert back.to_dict() == config.to_dict()
    assert back.config_hash() == config.config_hash()


def test_shipped_presets_match_builders():
    assert presets.simple().to_dict() == presets.build_simple().to_dict()
    assert presets.icosa_uniform().to_dict() == presets.build_icosahedron().to_dict()


def test_nonuniform_preset_has_54_positive_parameters():
    config = presets.icosa_nonuniform(seed=1, sigma_frac=0.2)
    topo = config.topology
    values = [s.stiffness for s in topo.springs] + [s.damping for s in topo.springs] + [r.mass for r in topo.rods]
    assert len(values) == 54
    assert min(values) > 0
    assert config.config_hash() != presets.icosa_uniform().config_hash()
    assert config.to_dict() == presets.icosa_nonuniform(seed=1, sigma_frac=0.2).to_dict()


def test_unknown_preset():
    with pytest.raises(KeyError):
        presets.load_preset("dodecahedron")


def test_trajectory_shape_rules():
    z = np.zeros((1, 1, 3))
    with pytest.raises(ValueError):
        Trajectory(z, z, np.zeros((1, 1, 4)), z, np.zeros((0, 1, 3)), np.zeros((0, 1, 3)), 0.002)
    two = np.zeros((2, 1, 3))
    with pytest.raises(ValueError):
        Trajectory(two, two, np.zeros((2, 1, 4)), two, np.zeros((2, 1, 3)), np.zeros((2, 1, 3)), 0.002)
    tr = Trajectory(two, two, np.zeros((2, 1, 4)), two, np.zeros((1, 1, 3)), np.zeros((1, 1, 3)), 0.002)
    np.testing.assert_allclose(np.diff(tr.times), 0.002)
