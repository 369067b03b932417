"""Scenario presets: the anchored single rod and the icosahedron tensegrity.

``simple`` and ``icosa_uniform`` ship as JSON next to this module;
``icosa_nonuniform`` derives from ``icosa_uniform`` by Gaussian scaling of
every stiffness, damping and mass.
"""
from __future__ import annotations

import itertools
from importlib import resources

import numpy as np

from ..core import (
    MINUS,
    PLUS,
    Anchor,
    RodEnd,
    RodSpec,
    SpringSpec,
    SystemConfig,
    TopologyGraph,
    axis_world,
    cylinder_inertia,
    quat_from_axis_angle,
)

PRESETS = ("simple", "icosa_uniform", "icosa_nonuniform")

# z (the rod's local axis) onto each world axis
_Z_TO = {
    "x": quat_from_axis_angle([0, 1, 0], np.pi / 2),
    "y": quat_from_axis_angle([1, 0, 0], -np.pi / 2),
    "z": np.array([1.0, 0.0, 0.0, 0.0]),
}


def build_simple(stiffness=100.0, damping=10.0, mass=10.0, rod_length=2.0, radius=0.05,
                 anchors=((-2.0, 0.0, 0.0), (2.0, 0.0, 1.0)), rest_lengths=(1.0, 1.414)):
    """One rod along x centered at the origin, each end tied to a fixed nail."""
    rod = RodSpec(rod_length / 2, radius, mass)
    springs = [
        SpringSpec(stiffness, damping, rest_lengths[0], Anchor(0), RodEnd(0, MINUS)),
        SpringSpec(stiffness, damping, rest_lengths[1], Anchor(1), RodEnd(0, PLUS)),
    ]
    pose = (np.zeros((1, 3)), _Z_TO["x"][None])
    return SystemConfig(TopologyGraph([rod], springs, anchors), (0.0, 0.0, 0.0), 0.002, "simple", pose)


def icosahedron_geometry(rod_length=1.04):
    """Rest pose and cable list of the six-strut expanded octahedron.

    Three pairs of parallel struts along x, y and z, each pair offset by a
    quarter strut length from the origin. With all 24 cables equal this is the
    self-equilibrated form, and its cable length is ``rod_length * sqrt(6) / 4``.
    Returns (centers, quats, cables) where cables are ((rod, end), (rod, end)).
    """
    b = rod_length / 2
    a = rod_length / 4
    centers, quats = [], []
    for axis, offset_axis in (("z", 0), ("x", 1), ("y", 2)):
        for s in (1.0, -1.0):
            c = np.zeros(3)
            c[offset_axis] = s * a
            centers.append(c)
            quats.append(_Z_TO[axis])
    centers, quats = np.array(centers), np.array(quats)
    tips = {}
    for r in range(6):
        rw = axis_world(quats[r], b)
        tips[(r, PLUS)] = centers[r] + rw
        tips[(r, MINUS)] = centers[r] - rw
    cable = rod_length * np.sqrt(6) / 4
    cables = []
    for (k1, p1), (k2, p2) in itertools.combinations(tips.items(), 2):
        if k1[0] // 2 != k2[0] // 2 and abs(np.linalg.norm(p1 - p2) - cable) < 1e-9:
            cables.append((k1, k2))
    return centers, quats, cables


def build_icosahedron(stiffness=100.0, damping=10.0, mass=10.0, rod_length=1.04, radius=0.02,
                      rest_length=0.637, gravity=(0.0, 0.0, -9.81), name="icosa_uniform"):
    centers, quats, cables = icosahedron_geometry(rod_length)
    rods = [RodSpec(rod_length / 2, radius, mass) for _ in range(6)]
    springs = [
        SpringSpec(stiffness, damping, rest_length, RodEnd(*ka), RodEnd(*kb)) for ka, kb in cables
    ]
    return SystemConfig(TopologyGraph(rods, springs), gravity, 0.002, name, (centers, quats))


def perturb_parameters(config: SystemConfig, seed=0, sigma_frac=0.2, floor=0.2, name=None):
    """Scale every K, c and M by ``1 + sigma_frac * N(0, 1)`` (redrawn below ``floor``).

    Inertias follow the perturbed masses through the cylinder formula.
    """
    rng = np.random.default_rng(seed)
    topo = config.topology

    def factor():
        while True:
            f = 1.0 + sigma_frac * rng.standard_normal()
            if f >= floor:
                return f

    springs = [
        SpringSpec(s.stiffness * factor(), s.damping * factor(), s.rest_length, s.a, s.b)
        for s in topo.springs
    ]
    rods = []
    for r in topo.rods:
        m = r.mass * factor()
        rods.append(RodSpec(r.half_length, r.radius, m, cylinder_inertia(m, r.half_length, r.radius)))
    return config.replace(
        topology=TopologyGraph(rods, springs, topo.anchors),
        name=name or f"{config.name}_perturbed",
    )


def _load(name):
    text = resources.files(__package__).joinpath(f"{name}.json").read_text()
    return SystemConfig.from_json(text)


def simple():
    return _load("simple")


def icosa_uniform():
    return _load("icosa_uniform")


def icosa_nonuniform(seed=0, sigma_frac=0.2):
    return perturb_parameters(icosa_uniform(), seed, sigma_frac, name="icosa_nonuniform")


def load_preset(name, seed=0, sigma_frac=0.2):
    if name == "simple":
        return simple()
    if name == "icosa_uniform":
        return icosa_uniform()
    if name == "icosa_nonuniform":
        return icosa_nonuniform(seed, sigma_frac)
    raise KeyError(f"unknown preset {name!r}; choose from {PRESETS}")


def write_shipped_presets(directory=None):
    """Regenerate the JSON files shipped with the package."""
    from pathlib import Path

    directory = Path(directory or Path(__file__).parent)
    build_simple().to_json(directory / "simple.json")
    build_icosahedron().to_json(directory / "icosa_uniform.json")
