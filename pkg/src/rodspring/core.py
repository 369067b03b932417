"""Domain types, topology graph and quaternion kinematics.

Vectors are plain ``numpy`` arrays with a trailing axis of length 3, and
quaternions are arrays with a trailing axis of length 4 in ``(w, x, y, z)``
order. Every kinematic helper accepts arbitrary leading batch axes so the
same code drives a single rod or a whole population of trajectories.

A rod's local axis is +z: its endpoints sit at ``p ± R @ (0, 0, r)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from .errors import TopologyError

PLUS, MINUS = "plus", "minus"
_END_SIGN = {PLUS: 1.0, MINUS: -1.0}


# ---------------------------------------------------------------------------
# quaternion / vector kinematics
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _split(x):
    x = np.asarray(x, dtype=float)
    return [x[..., i] for i in range(x.shape[-1])]


def cross(a, b):
    """``np.cross`` for trailing-axis 3-vectors, without its dispatch overhead."""
    ax, ay, az = _split(a)
    bx, by, bz = _split(b)
    return np.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def quat_multiply(a, b):
    """Hamilton product ``a ⊗ b`` (broadcasts over leading axes)."""
    aw, ax, ay, az = _split(a)
    bw, bx, by, bz = _split(b)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_angle_between(q1, q2):
    """Rotation angle (rad) taking orientation ``q1`` to ``q2``."""
    d = np.abs(np.sum(quat_normalize(q1) * quat_normalize(q2), axis=-1))
    return 2.0 * np.arccos(np.clip(d, -1.0, 1.0))


def rotation_matrix(q):
    """3x3 rotation matrix of a unit quaternion, batched over leading axes."""
    w, x, y, z = _split(q)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def rotate(q, v):
    """Rotate vectors ``v`` by unit quaternions ``q``."""
    return np.einsum("...ij,...j->...i", rotation_matrix(q), v)


def axis_world(q, half_length):
    """Half-length rod vector ``R @ (0, 0, r)`` (third column of R times r)."""
    w, x, y, z = _split(q)
    col = np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return col * np.asarray(half_length, dtype=float)[..., None]


def omega_matrix_product(w, q):
    """Quaternion derivative term ``(0, w) ⊗ q`` for a world-frame angular velocity."""
    w = np.asarray(w, dtype=float)
    wq = np.concatenate([np.zeros(w.shape[:-1] + (1,)), w], axis=-1)
    return quat_multiply(wq, q)


# ---------------------------------------------------------------------------
# physical description
# ---------------------------------------------------------------------------

def cylinder_inertia(mass, half_length, radius):
    """(I11, I33) of a solid cylinder of height ``2 * half_length`` about its center."""
    mass = np.asarray(mass, dtype=float)
    i11 = mass * ((2.0 * half_length) ** 2 / 12.0 + radius**2 / 4.0)
    i33 = mass * radius**2 / 2.0
    return i11, i33


@dataclass(frozen=True)
class RodSpec:
    half_length: float
    radius: float
    mass: float
    inertia: tuple = None  # (I11, I33); cylinder formula when omitted

    def __post_init__(self):
        if self.inertia is None:
            i11, i33 = cylinder_inertia(self.mass, self.half_length, self.radius)
            object.__setattr__(self, "inertia", (float(i11), float(i33)))
        else:
            object.__setattr__(self, "inertia", tuple(float(x) for x in self.inertia))
        vals = (self.half_length, self.radius, self.mass) + self.inertia
        if not all(np.isfinite(vals)) or min(vals) <= 0:
            raise TopologyError(f"rod parameters must be positive and finite, got {self}")

    @property
    def i11(self):
        return self.inertia[0]

    @property
    def i33(self):
        return self.inertia[1]


@dataclass(frozen=True)
class RodEnd:
    rod: int
    end: str = PLUS

    def __post_init__(self):
        if self.end not in _END_SIGN:
            raise TopologyError(f"rod end must be 'plus' or 'minus', got {self.end!r}")

    @property
    def sign(self):
        return _END_SIGN[self.end]


@dataclass(frozen=True)
class Anchor:
    anchor: int


Attachment = Union[RodEnd, Anchor]


@dataclass(frozen=True)
class SpringSpec:
    stiffness: float
    damping: float
    rest_length: float
    a: Attachment
    b: Attachment

    def __post_init__(self):
        if not (self.stiffness > 0 and self.damping >= 0 and self.rest_length > 0):
            raise TopologyError(
                f"spring needs K > 0, c >= 0, rest length > 0; got "
                f"K={self.stiffness}, c={self.damping}, rest={self.rest_length}"
            )
        if self.a == self.b:
            raise TopologyError(f"spring endpoints must differ, both are {self.a}")


@dataclass(frozen=True)
class Incidence:
    """Compiled spring-to-rod-end incidence, one row per (spring, side) pair.

    ``side`` is 0 for attachment ``a`` and 1 for ``b``; the force on side a is
    ``+s * u`` and on side b ``-s * u`` where ``u`` points from a to b.
    """

    rod: np.ndarray     # (P,) rod index of each rod-attached spring side
    spring: np.ndarray  # (P,)
    side: np.ndarray    # (P,)
    end: np.ndarray     # (P,) +1 for the plus end, -1 for minus
    n_rods: int

    @property
    def direction(self):
        """+1 where the pair is side a (force along +u), -1 for side b."""
        return np.where(self.side == 0, 1.0, -1.0)

    def pairs_of_rod(self, r):
        return np.flatnonzero(self.rod == r)


@dataclass(frozen=True)
class TopologyGraph:
    """Bipartite graph between spring vertices and rod/anchor vertices."""

    rods: tuple
    springs: tuple
    anchors: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "rods", tuple(self.rods))
        object.__setattr__(self, "springs", tuple(self.springs))
        object.__setattr__(self, "anchors", tuple(tuple(float(x) for x in a) for a in self.anchors))
        self.validate()

    def validate(self):
        if not self.rods:
            raise TopologyError("topology needs at least one rod")
        for a in self.anchors:
            if len(a) != 3 or not np.all(np.isfinite(a)):
                raise TopologyError(f"anchor must be a finite 3-vector, got {a}")
        for i, s in enumerate(self.springs):
            for att in (s.a, s.b):
                if isinstance(att, RodEnd):
                    if not 0 <= att.rod < len(self.rods):
                        raise TopologyError(f"spring {i} references missing rod {att.rod}")
                elif isinstance(att, Anchor):
                    if not 0 <= att.anchor < len(self.anchors):
                        raise TopologyError(f"spring {i} references missing anchor {att.anchor}")
                else:
                    raise TopologyError(f"spring {i} has unknown attachment {att!r}")
            if isinstance(s.a, Anchor) and isinstance(s.b, Anchor):
                raise TopologyError(f"spring {i} connects two anchors")

    @property
    def n_rods(self):
        return len(self.rods)

    @property
    def n_springs(self):
        return len(self.springs)

    @cached_property
    def incidence(self) -> Incidence:
        rod, spring, side, end = [], [], [], []
        for i, s in enumerate(self.springs):
            for k, att in enumerate((s.a, s.b)):
                if isinstance(att, RodEnd):
                    rod.append(att.rod)
                    spring.append(i)
                    side.append(k)
                    end.append(att.sign)
        return Incidence(
            np.array(rod, dtype=int),
            np.array(spring, dtype=int),
            np.array(side, dtype=int),
            np.array(end, dtype=float),
            self.n_rods,
        )

    @cached_property
    def endpoint_table(self):
        """Per spring side: (is_anchor, rod, end sign, anchor) arrays of shape (S, 2)."""
        S = self.n_springs
        is_anchor = np.zeros((S, 2), dtype=bool)
        rod = np.zeros((S, 2), dtype=int)
        sign = np.zeros((S, 2))
        anchor = np.zeros((S, 2), dtype=int)
        for i, s in enumerate(self.springs):
            for k, att in enumerate((s.a, s.b)):
                if isinstance(att, Anchor):
                    is_anchor[i, k] = True
                    anchor[i, k] = att.anchor
                else:
                    rod[i, k] = att.rod
                    sign[i, k] = att.sign
        return is_anchor, rod, sign, anchor

    @cached_property
    def end_matrices(self):
        """(plus, minus) matrices of shape (R, S) mapping forces-on-side-a to rod ends."""
        inc = self.incidence
        out = np.zeros((2, self.n_rods, self.n_springs))
        for r, s, d, e in zip(inc.rod, inc.spring, inc.direction, inc.end):
            out[0 if e > 0 else 1, r, s] += d
        return out[0], out[1]

    @cached_property
    def pair_matrix(self):
        """(R, P) one-hot matrix summing per-incidence quantities into rods."""
        inc = self.incidence
        m = np.zeros((self.n_rods, len(inc.rod)))
        m[inc.rod, np.arange(len(inc.rod))] = 1.0
        return m

    def springs_at(self, rod, end=None):
        """Indices of springs touching ``rod`` (optionally only one end)."""
        out = []
        for i, s in enumerate(self.springs):
            for att in (s.a, s.b):
                if isinstance(att, RodEnd) and att.rod == rod and (end is None or att.end == end):
                    out.append(i)
        return out

    # arrays used by the vectorized simulator
    @property
    def half_lengths(self):
        return np.array([r.half_length for r in self.rods])

    @property
    def radii(self):
        return np.array([r.radius for r in self.rods])

    @property
    def anchor_array(self):
        return np.array(self.anchors, dtype=float).reshape(-1, 3)

    @property
    def rest_lengths(self):
        return np.array([s.rest_length for s in self.springs])


@dataclass(frozen=True)
class SystemConfig:
    topology: TopologyGraph
    gravity: tuple = (0.0, 0.0, 0.0)
    dt: float = 0.002
    name: str = "system"
    # equilibrium pose used as the mean of sampled initial conditions
    rest_pose: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        if not (0 < self.dt <= 0.01):
            raise TopologyError(f"dt must lie in (0, 0.01], got {self.dt}")
        if self.rest_pose is not None:
            p, q = (np.asarray(x, dtype=float) for x in self.rest_pose)
            if p.shape != (self.topology.n_rods, 3) or q.shape != (self.topology.n_rods, 4):
                raise TopologyError("rest_pose shape does not match rod count")
            object.__setattr__(self, "rest_pose", (p, quat_normalize(q)))

    @property
    def g(self):
        return np.array(self.gravity)

    def to_dict(self):
        def att(a):
            return {"anchor": a.anchor} if isinstance(a, Anchor) else {"rod": a.rod, "end": a.end}

        topo = self.topology
        d = {
            "name": self.name,
            "gravity": list(self.gravity),
            "dt": self.dt,
            "rods": [
                {
                    "half_length": r.half_length,
                    "radius": r.radius,
                    "mass": r.mass,
                    "inertia": [r.i11, r.i11, r.i33],
                }
                for r in topo.rods
            ],
            "springs": [
                {
                    "stiffness": s.stiffness,
                    "damping": s.damping,
                    "rest_length": s.rest_length,
                    "a": att(s.a),
                    "b": att(s.b),
                }
                for s in topo.springs
            ],
            "anchors": [list(a) for a in topo.anchors],
        }
        if self.rest_pose is not None:
            d["rest_pose"] = {"p": self.rest_pose[0].tolist(), "q": self.rest_pose[1].tolist()}
        return d

    @classmethod
    def from_dict(cls, d):
        def att(a):
            if "anchor" in a:
                return Anchor(int(a["anchor"]))
            if "rod" in a:
                return RodEnd(int(a["rod"]), a.get("end", PLUS))
            raise TopologyError(f"attachment needs 'rod' or 'anchor': {a}")

        try:
            rods = [
                RodSpec(
                    r["half_length"],
                    r["radius"],
                    r["mass"],
                    (r["inertia"][0], r["inertia"][2]) if "inertia" in r else None,
                )
                for r in d["rods"]
            ]
            springs = [
                SpringSpec(s["stiffness"], s["damping"], s["rest_length"], att(s["a"]), att(s["b"]))
                for s in d["springs"]
            ]
        except (KeyError, TypeError, IndexError) as exc:
            raise TopologyError(f"malformed system config: {exc!r}") from exc
        pose = d.get("rest_pose")
        return cls(
            TopologyGraph(rods, springs, d.get("anchors", [])),
            d.get("gravity", (0.0, 0.0, 0.0)),
            d.get("dt", 0.002),
            d.get("name", "system"),
            (pose["p"], pose["q"]) if pose else None,
        )

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, path_or_text):
        text = str(path_or_text)
        if not text.lstrip().startswith("{"):
            with open(path_or_text) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw):
        d = dict(topology=self.topology, gravity=self.gravity, dt=self.dt, name=self.name,
                 rest_pose=self.rest_pose)
        d.update(kw)
        return SystemConfig(**d)


# ---------------------------------------------------------------------------
# states
# ---------------------------------------------------------------------------

@dataclass
class RodState:
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.p, self.v, self.w = (np.asarray(x, dtype=float) for x in (self.p, self.v, self.w))
        self.q = quat_normalize(self.q)
        if not all(np.all(np.isfinite(x)) for x in (self.p, self.v, self.q, self.w)):
            raise ValueError("rod state has non-finite components")


def rod_axis_world(state: RodState, spec: RodSpec):
    return axis_world(state.q, spec.half_length)


@dataclass
class SystemState:
    """State of every rod; arrays are (n_rods, 3) / (n_rods, 4), optionally batched."""

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.p, self.v, self.w = (np.asarray(x, dtype=float) for x in (self.p, self.v, self.w))
        self.q = np.asarray(self.q, dtype=float)

    @classmethod
    def from_rods(cls, rods: Sequence[RodState], t=0.0):
        return cls(
            np.stack([r.p for r in rods]),
            np.stack([r.v for r in rods]),
            np.stack([r.q for r in rods]),
            np.stack([r.w for r in rods]),
            t,
        )

    @classmethod
    def at_rest(cls, config: SystemConfig):
        if config.rest_pose is None:
            raise ValueError(f"config {config.name!r} has no rest pose")
        p, q = config.rest_pose
        return cls(p.copy(), np.zeros_like(p), q.copy(), np.zeros_like(p))

    @property
    def n_rods(self):
        return self.p.shape[-2]

    def rods(self):
        return [RodState(self.p[i], self.v[i], self.q[i], self.w[i]) for i in range(self.n_rods)]

    def copy(self):
        return SystemState(self.p.copy(), self.v.copy(), self.q.copy(), self.w.copy(), self.t)

    def as_vector(self):
        """Flat (p, v, q, w) per rod; 13 numbers per rod."""
        return np.concatenate([self.p, self.v, self.q, self.w], axis=-1)


@dataclass
class ControlInput:
    """Per-rod control force and world-frame lever arm for one step."""

    force: np.ndarray
    arm: np.ndarray

    @classmethod
    def zeros(cls, n_rods):
        return cls(np.zeros((n_rods, 3)), np.zeros((n_rods, 3)))


@dataclass
class Trajectory:
    """Time-ordered rod states plus the controls applied between them.

    State arrays have shape (T + 1, n_rods, ...); ``force`` and ``arm`` have
    shape (T, n_rods, 3) with row ``k`` acting during step ``k -> k + 1``.
    """

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray
    force: np.ndarray
    arm: np.ndarray
    dt: float
    config_ref: str = ""
    t0: float = 0.0
    events: list = field(default_factory=list)

    def __post_init__(self):
        if self.p.shape[0] < 2:
            raise ValueError("a trajectory needs at least two states")
        if self.force.shape[0] != self.p.shape[0] - 1:
            raise ValueError("controls must have exactly one entry per step")

    @property
    def n_steps(self):
        return self.p.shape[0] - 1

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def state(self, k) -> SystemState:
        return SystemState(self.p[k], self.v[k], self.q[k], self.w[k], self.t0 + k * self.dt)

    @property
    def states(self):
        return [self.state(k) for k in range(self.n_steps + 1)]

    def control(self, k) -> ControlInput:
        return ControlInput(self.force[k], self.arm[k])
