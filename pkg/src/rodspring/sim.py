"""Forward dynamics: force generation, rod accelerations and semi-implicit Euler.

The same machinery runs the ground-truth simulator (absolute ``EngineParams``)
and the learned engine (``RatioParams``). All batched helpers take state
arrays shaped ``(..., n_rods, 3|4)`` so a population of trajectories, or a
population of parameter candidates, steps in one vectorized call.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    ControlInput,
    RodSpec,
    RodState,
    SystemConfig,
    SystemState,
    Trajectory,
    axis_world,
    cross,
    omega_matrix_product,
    quat_normalize,
    rotation_matrix,
)
from .errors import DegenerateSpring, SimulationBlowUp
from .params import EngineParams, RatioParams

MIN_SPRING_LENGTH = 1e-9
BLOWUP_THRESHOLD = 1e6


# ---------------------------------------------------------------------------
# force generation
# ---------------------------------------------------------------------------

@dataclass
class SpringObservation:
    """Relative endpoint position/velocity ``b - a`` of one or many springs."""

    dp: np.ndarray
    dv: np.ndarray

    @property
    def length(self):
        return np.linalg.norm(self.dp, axis=-1)

    @property
    def direction(self):
        return self.dp / self.length[..., None]

    @property
    def rate(self):
        """Elongation rate: relative velocity projected on the spring axis."""
        return np.sum(self.dv * self.direction, axis=-1)


def endpoint_kinematics(state: RodState, spec: RodSpec):
    """Positions and velocities of the plus and minus rod ends."""
    rw = axis_world(state.q, spec.half_length)
    wxr = cross(state.w, rw)
    return state.p + rw, state.v + wxr, state.p - rw, state.v - wxr


def _check_lengths(dp, spring_ids=None):
    length = np.linalg.norm(dp, axis=-1)
    if np.any(length < MIN_SPRING_LENGTH):
        idx = np.unravel_index(np.argmin(length), length.shape)
        sid = idx[-1] if spring_ids is None else spring_ids
        raise DegenerateSpring(int(sid) if np.ndim(sid) == 0 else sid, float(length[idx]))


def spring_observation(pa, va, pb, vb, spring_id=0) -> SpringObservation:
    """Observation of one spring from its endpoint states (anchors: zero velocity)."""
    dp = np.asarray(pb, dtype=float) - np.asarray(pa, dtype=float)
    dv = np.asarray(vb, dtype=float) - np.asarray(va, dtype=float)
    length = np.linalg.norm(dp, axis=-1)
    if np.any(length < MIN_SPRING_LENGTH):
        raise DegenerateSpring(spring_id, float(np.min(length)))
    return SpringObservation(dp, dv)


def observe_springs(config: SystemConfig, p, v, q, w) -> SpringObservation:
    """Observations of every spring, shape (..., S, 3)."""
    topo = config.topology
    is_anchor, rod, sign, anchor = topo.endpoint_table
    rw = axis_world(q, topo.half_lengths)
    wxr = cross(w, rw)
    anchors = topo.anchor_array
    pos, vel = [], []
    for k in (0, 1):
        tip_p = p[..., rod[:, k], :] + sign[:, k, None] * rw[..., rod[:, k], :]
        tip_v = v[..., rod[:, k], :] + sign[:, k, None] * wxr[..., rod[:, k], :]
        if is_anchor[:, k].any():
            mask = is_anchor[:, k, None]
            tip_p = np.where(mask, anchors[anchor[:, k]] if len(anchors) else 0.0, tip_p)
            tip_v = np.where(mask, 0.0, tip_v)
        pos.append(tip_p)
        vel.append(tip_v)
    dp = pos[1] - pos[0]
    _check_lengths(dp)
    return SpringObservation(dp, vel[1] - vel[0])


def spring_force(obs: SpringObservation, stiffness, damping, rest_length):
    """Force on endpoint a (endpoint b receives the negation).

    Signed 1D form: ``s = K (l - l_rest) + c * dl/dt`` along the unit axis
    from a to b, so a stretched or separating spring pulls a toward b.
    """
    u = obs.direction
    s = np.asarray(stiffness) * (obs.length - rest_length) + np.asarray(damping) * np.sum(
        obs.dv * u, axis=-1
    )
    return s[..., None] * u


def reduced_vectors(obs: SpringObservation, rest_length):
    """Vector forms of the 1D reduction: (dp - rest * u, (dv . u) u)."""
    u = obs.direction
    dp_hat = obs.dp - np.asarray(rest_length)[..., None] * u
    dv_hat = np.sum(obs.dv * u, axis=-1)[..., None] * u
    return dp_hat, dv_hat


def aggregate_endpoint_forces(config: SystemConfig, forces_on_a):
    """Sum spring forces (given on side a, shape (..., S, 3)) into (F_plus, F_minus) per rod."""
    plus, minus = config.topology.end_matrices
    f_plus = np.einsum("rs,...sk->...rk", plus, forces_on_a)
    f_minus = np.einsum("rs,...sk->...rk", minus, forces_on_a)
    return f_plus, f_minus


# ---------------------------------------------------------------------------
# acceleration generation
# ---------------------------------------------------------------------------

def world_inverse_inertia(q, i11, i33):
    """``R diag(1/I11, 1/I11, 1/I33) R^T`` per rod."""
    R = rotation_matrix(q)
    inv = np.stack(np.broadcast_arrays(1.0 / i11, 1.0 / i11, 1.0 / i33), axis=-1)
    return np.einsum("...ij,...j,...kj->...ik", R, inv, R)


def rod_accelerations(f_plus, f_minus, f_u, r_u, q, half_length, mass, i11, i33, gravity):
    """Linear and angular acceleration of rods (batched form of ``rod_acceleration``)."""
    half_length = np.asarray(half_length, dtype=float)
    rw = axis_world(q, half_length)
    f = f_plus + f_minus
    tau = cross(rw, f_plus - f_minus)
    if f_u is not None:
        f = f + f_u
        tau = tau + cross(r_u, f_u)
    a = f / np.asarray(mass)[..., None] + gravity
    # R diag(1/I11, 1/I11, 1/I33) R^T tau, written with the unit rod axis e
    e = rw / half_length[..., None]
    inv11, inv33 = 1.0 / np.asarray(i11), 1.0 / np.asarray(i33)
    axial = np.sum(e * tau, axis=-1) * (inv33 - inv11)
    alpha = tau * inv11[..., None] + axial[..., None] * e
    return a, alpha


def rod_acceleration(f_plus, f_minus, f_u, r_u, state: RodState, spec: RodSpec, g):
    return rod_accelerations(
        np.asarray(f_plus, float), np.asarray(f_minus, float), np.asarray(f_u, float),
        np.asarray(r_u, float), state.q, spec.half_length, spec.mass, spec.i11, spec.i33,
        np.asarray(g, float),
    )


def pair_features(config: SystemConfig, p, v, q, w, obs: SpringObservation | None = None):
    """Per-incidence regressors of the linear engine.

    Returns ``(x_k, x_c, t_k, t_c)``, each (..., P, 3): the spring force
    direction scaled by elongation and by elongation rate, and the torques
    those unit-parameter forces exert about the rod center.
    """
    topo = config.topology
    inc = topo.incidence
    if obs is None:
        obs = observe_springs(config, p, v, q, w)
    u = obs.direction[..., inc.spring, :] * inc.direction[:, None]
    stretch = (obs.length - topo.rest_lengths)[..., inc.spring]
    rate = np.sum(obs.dv * obs.direction, axis=-1)[..., inc.spring]
    x_k = stretch[..., None] * u
    x_c = rate[..., None] * u
    lever = inc.end[:, None] * axis_world(q, topo.half_lengths)[..., inc.rod, :]
    return x_k, x_c, cross(lever, x_k), cross(lever, x_c)


def accelerations(config: SystemConfig, params, p, v, q, w, force=None, arm=None):
    """(a, alpha) of every rod under absolute or ratio-form parameters."""
    g = config.g
    if isinstance(params, RatioParams):
        if force is None:
            force = arm = np.zeros_like(p)
        x_k, x_c, t_k, t_c = pair_features(config, p, v, q, w)
        m = config.topology.pair_matrix
        a = g + np.einsum(
            "rp,...pk->...rk", m, params.lin_k[..., None] * x_k + params.lin_c[..., None] * x_c
        ) + params.lin_h[..., None] * force
        alpha = np.einsum(
            "rp,...pk->...rk", m, params.ang_k[..., None] * t_k + params.ang_c[..., None] * t_c
        ) + params.ang_h[..., None] * cross(arm, force)
        return a, alpha
    topo = config.topology
    obs = observe_springs(config, p, v, q, w)
    f = spring_force(obs, params.stiffness, params.damping, topo.rest_lengths)
    f_plus, f_minus = aggregate_endpoint_forces(config, f)
    f_u = None if force is None else np.asarray(params.h)[..., None, None] * force
    return rod_accelerations(
        f_plus, f_minus, f_u, arm, q, topo.half_lengths, params.mass, params.i11, params.i33, g
    )


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def integrate_arrays(p, v, q, w, a, alpha, dt):
    v1 = v + a * dt
    p1 = p + v1 * dt
    w1 = w + alpha * dt
    q1 = quat_normalize(q + 0.5 * dt * omega_matrix_product(w1, q))
    return p1, v1, q1, w1


def integrate_semi_implicit(state: RodState, a, alpha, dt) -> RodState:
    """Velocity first, then position with the new velocity; quaternion renormalized."""
    a, alpha = np.asarray(a, dtype=float), np.asarray(alpha, dtype=float)
    return RodState(*integrate_arrays(state.p, state.v, state.q, state.w, a, alpha, dt))


def step(state: SystemState, config: SystemConfig, params=None, control: ControlInput | None = None):
    if params is None:
        params = EngineParams.from_config(config)
    force = arm = None
    if control is not None:
        force, arm = control.force, control.arm
    a, alpha = accelerations(config, params, state.p, state.v, state.q, state.w, force, arm)
    return SystemState(
        *integrate_arrays(state.p, state.v, state.q, state.w, a, alpha, config.dt),
        t=state.t + config.dt,
    )


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

@dataclass
class PerturbationSchedule:
    """Random pushes: every ``period`` steps a random rod gets a random-direction force.

    The force acts at a randomly chosen rod end (arm ``±r_world``) for
    ``duration`` steps. Streams are derived from ``(rng_seed, traj_index)``.
    """

    period: int = 100
    magnitude: float = 10.0
    rng_seed: int = 0
    duration: int = 1

    def __post_init__(self):
        if self.period < 1 or self.duration < 1 or self.magnitude <= 0:
            raise ValueError("perturbation needs period >= 1, duration >= 1, magnitude > 0")

    def events(self, n_steps, n_rods, traj_index=0):
        rng = np.random.default_rng([self.rng_seed, traj_index])
        out = []
        for k in range(0, n_steps, self.period):
            rod = int(rng.integers(n_rods))
            end = 1.0 if rng.random() < 0.5 else -1.0
            d = rng.standard_normal(3)
            out.append((k, rod, end, self.magnitude * d / np.linalg.norm(d)))
        return out


def _guard(step_index, *arrays, threshold=BLOWUP_THRESHOLD):
    for x in arrays:
        m = np.max(np.abs(x))
        if not np.isfinite(m) or m > threshold:
            worst = max(float(np.nanmax(np.abs(np.nan_to_num(y, nan=np.inf)))) for y in arrays)
            raise SimulationBlowUp(step_index, worst)


def simulate_batch(initial: SystemState, config: SystemConfig, params=None, n_steps=1,
                   controls=None, perturbation: PerturbationSchedule | None = None,
                   traj_offset=0, guard=BLOWUP_THRESHOLD):
    """Roll out a batch of initial states (leading axis B) for ``n_steps``.

    ``controls`` is an optional ``(force, arm)`` pair shaped (B, n_steps, R, 3).
    Returns a dict of arrays p, v, q, w (B, T+1, ...), force, arm (B, T, R, 3)
    and ``events``, a per-trajectory list of perturbation events.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if params is None:
        params = EngineParams.from_config(config)
    p, v, q, w = (np.array(x, dtype=float) for x in (initial.p, initial.v, initial.q, initial.w))
    B, R = p.shape[0], p.shape[1]
    out = {k: np.empty((B, n_steps + 1) + x.shape[1:]) for k, x in zip("pvqw", (p, v, q, w))}
    for k, x in zip("pvqw", (p, v, q, w)):
        out[k][:, 0] = x
    if controls is not None:
        force_all = np.broadcast_to(np.asarray(controls[0], float), (B, n_steps, R, 3))
        arm_all = np.broadcast_to(np.asarray(controls[1], float), (B, n_steps, R, 3))
        force_rec, arm_rec = np.array(force_all), np.array(arm_all)
    else:
        force_rec = np.zeros((B, n_steps, R, 3))
        arm_rec = np.zeros((B, n_steps, R, 3))
    events = [[] for _ in range(B)]
    active = {}
    if perturbation is not None:
        for b in range(B):
            events[b] = perturbation.events(n_steps, R, traj_offset + b)
            for ev in events[b]:
                for k in range(ev[0], min(ev[0] + perturbation.duration, n_steps)):
                    active.setdefault(k, []).append((b,) + ev[1:])
    half = config.topology.half_lengths
    dt = config.dt
    any_control = controls is not None or perturbation is not None
    for k in range(n_steps):
        if k in active:
            rw = axis_world(q, half)
            for b, rod, end, f in active[k]:
                force_rec[b, k, rod] += f
                arm_rec[b, k, rod] = end * rw[b, rod]
        if any_control:
            a, alpha = accelerations(config, params, p, v, q, w, force_rec[:, k], arm_rec[:, k])
        else:
            a, alpha = accelerations(config, params, p, v, q, w)
        p, v, q, w = integrate_arrays(p, v, q, w, a, alpha, dt)
        if guard is not None:
            _guard(k + 1, p, v, w, threshold=guard)
        out["p"][:, k + 1] = p
        out["v"][:, k + 1] = v
        out["q"][:, k + 1] = q
        out["w"][:, k + 1] = w
    out["force"] = force_rec
    out["arm"] = arm_rec
    out["events"] = events
    return out


def _as_batch(state: SystemState):
    return SystemState(state.p[None], state.v[None], state.q[None], state.w[None], state.t)


def rollout(initial: SystemState, config: SystemConfig, params=None, n_steps=1,
            controls=None, perturbation: PerturbationSchedule | None = None,
            traj_index=0) -> Trajectory:
    """Single-trajectory rollout; ``controls`` is a list of ``ControlInput`` or (force, arm) arrays."""
    if controls is not None and not isinstance(controls, tuple):
        controls = (
            np.stack([c.force for c in controls]),
            np.stack([c.arm for c in controls]),
        )
    if controls is not None:
        controls = (np.asarray(controls[0])[None], np.asarray(controls[1])[None])
    res = simulate_batch(_as_batch(initial), config, params, n_steps, controls, perturbation,
                         traj_offset=traj_index)
    return Trajectory(
        res["p"][0], res["v"][0], res["q"][0], res["w"][0], res["force"][0], res["arm"][0],
        config.dt, config.name, initial.t, res["events"][0],
    )


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class InitDistribution:
    """Rest pose plus independent uniform jitter per rod."""

    pos_jitter: float = 0.1     # m
    vel_jitter: float = 0.5     # m/s
    omega_jitter: float = 0.0   # rad/s
    orient_jitter: float = 0.0  # rad, random-axis tilt

    def sample(self, config: SystemConfig, rng) -> SystemState:
        base = SystemState.at_rest(config)
        R = base.n_rods
        p = base.p + rng.uniform(-self.pos_jitter, self.pos_jitter, (R, 3))
        v = rng.uniform(-self.vel_jitter, self.vel_jitter, (R, 3))
        w = rng.uniform(-self.omega_jitter, self.omega_jitter, (R, 3))
        q = base.q
        if self.orient_jitter > 0:
            from .core import quat_from_axis_angle, quat_multiply

            axes = rng.standard_normal((R, 3))
            angles = rng.uniform(-self.orient_jitter, self.orient_jitter, R)
            q = quat_multiply(quat_from_axis_angle(axes, angles), q)
        return SystemState(p, v, q, w)


@dataclass
class Transitions:
    """Flattened ``(S_t, S_{t+1}, u_t)`` pairs, arrays shaped (n, R, ...)."""

    p0: np.ndarray
    v0: np.ndarray
    q0: np.ndarray
    w0: np.ndarray
    p1: np.ndarray
    v1: np.ndarray
    q1: np.ndarray
    w1: np.ndarray
    force: np.ndarray
    arm: np.ndarray
    dt: float

    def __len__(self):
        return self.p0.shape[0]

    @property
    def has_control(self):
        return bool(np.any(self.force != 0))

    def subset(self, idx):
        return Transitions(*(getattr(self, k)[idx] for k in
                             ("p0", "v0", "q0", "w0", "p1", "v1", "q1", "w1", "force", "arm")),
                           self.dt)

    @classmethod
    def concat(cls, parts):
        keys = ("p0", "v0", "q0", "w0", "p1", "v1", "q1", "w1", "force", "arm")
        return cls(*(np.concatenate([getattr(t, k) for t in parts]) for k in keys), parts[0].dt)


@dataclass
class Dataset:
    config: SystemConfig
    params: EngineParams
    p: np.ndarray      # (N, T+1, R, 3)
    v: np.ndarray
    q: np.ndarray      # (N, T+1, R, 4)
    w: np.ndarray
    force: np.ndarray  # (N, T, R, 3)
    arm: np.ndarray
    splits: dict
    seed: int = 0
    events: list = field(default_factory=list)

    @property
    def n_traj(self):
        return self.p.shape[0]

    @property
    def n_steps(self):
        return self.p.shape[1] - 1

    def trajectory(self, i) -> Trajectory:
        return Trajectory(self.p[i], self.v[i], self.q[i], self.w[i], self.force[i], self.arm[i],
                          self.config.dt, self.config.name, 0.0,
                          self.events[i] if self.events else [])

    def initial_state(self, i) -> SystemState:
        return SystemState(self.p[i, 0], self.v[i, 0], self.q[i, 0], self.w[i, 0])

    def pool_size(self, split="train"):
        return len(self.splits[split]) * self.n_steps

    def transitions(self, split="train", fraction=None, count=None, seed=0) -> Transitions:
        """All transitions of a split, or a random subset of ``floor(fraction * pool)``."""
        trajs = np.asarray(self.splits[split], dtype=int)
        T = self.n_steps
        pool = len(trajs) * T
        if fraction is not None:
            if not 0 < fraction <= 1:
                raise ValueError("fraction must lie in (0, 1]")
            count = max(1, int(fraction * pool))
        if count is None or count >= pool:
            ti = np.repeat(trajs, T)
            si = np.tile(np.arange(T), len(trajs))
        else:
            flat = np.sort(np.random.default_rng(seed).choice(pool, size=count, replace=False))
            ti, si = trajs[flat // T], flat % T
        return Transitions(
            self.p[ti, si], self.v[ti, si], self.q[ti, si], self.w[ti, si],
            self.p[ti, si + 1], self.v[ti, si + 1], self.q[ti, si + 1], self.w[ti, si + 1],
            self.force[ti, si], self.arm[ti, si], self.config.dt,
        )


def split_counts(n_traj, split):
    weights = np.asarray(split, dtype=float)
    if np.any(weights <= 0):
        raise ValueError("split fractions must be positive")
    raw = weights / weights.sum() * n_traj
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts))[: n_traj - counts.sum()]:
        counts[i] += 1
    return counts


def sample_dataset(config: SystemConfig, params=None, n_traj=1, n_steps=2000,
                   init_distribution: InitDistribution | None = None, seed=0,
                   split=(1000, 200, 100), perturbation: PerturbationSchedule | None = None,
                   chunk=256) -> Dataset:
    """Simulate ``n_traj`` trajectories from jittered rest poses and split them.

    Trajectory ``i`` draws its initial condition from the stream ``(seed, i)``.
    """
    if params is None:
        params = EngineParams.from_config(config)
    init_distribution = init_distribution or InitDistribution()
    inits = [init_distribution.sample(config, np.random.default_rng([seed, i])) for i in range(n_traj)]
    parts, events = [], []
    for lo in range(0, n_traj, chunk):
        block = inits[lo:lo + chunk]
        batch = SystemState(*(np.stack([getattr(s, k) for s in block]) for k in "pvqw"))
        res = simulate_batch(batch, config, params, n_steps, perturbation=perturbation, traj_offset=lo)
        parts.append(res)
        events.extend(res["events"])
    arrays = {k: np.concatenate([r[k] for r in parts]) for k in ("p", "v", "q", "w")}
    if perturbation is None:
        # force-free data: zero-strided views instead of two full-size zero arrays
        shape = arrays["p"].shape[:1] + (n_steps,) + arrays["p"].shape[2:]
        arrays["force"] = arrays["arm"] = np.broadcast_to(np.zeros(()), shape)
    else:
        arrays.update({k: np.concatenate([r[k] for r in parts]) for k in ("force", "arm")})
    counts = split_counts(n_traj, split)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    names = ("train", "val", "test")[: len(counts)]
    splits = {n: list(range(bounds[i], bounds[i + 1])) for i, n in enumerate(names)}
    return Dataset(config, params, **arrays, splits=splits, seed=seed, events=events)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def linear_momentum(state: SystemState, params: EngineParams):
    return np.sum(params.mass[..., None] * state.v, axis=-2)


def total_energy(state: SystemState, config: SystemConfig, params: EngineParams | None = None):
    """Kinetic + elastic + gravitational energy (damping and control ignored)."""
    params = params or EngineParams.from_config(config)
    obs = observe_springs(config, state.p, state.v, state.q, state.w)
    elastic = 0.5 * np.sum(params.stiffness * (obs.length - config.topology.rest_lengths) ** 2, axis=-1)
    trans = 0.5 * np.sum(params.mass * np.sum(state.v**2, axis=-1), axis=-1)
    R = rotation_matrix(state.q)
    w_local = np.einsum("...ji,...j->...i", R, state.w)
    inertia = np.stack(np.broadcast_arrays(params.i11, params.i11, params.i33), axis=-1)
    rot = 0.5 * np.sum(inertia * w_local**2, axis=(-1, -2))
    grav = -np.sum(params.mass * (state.p @ config.g), axis=-1)
    return elastic + trans + rot + grav
