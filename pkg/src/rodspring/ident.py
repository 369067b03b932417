"""Parameter identification by linear regression on observed transitions.

Rod accelerations are linear in the ratio weights of the engine (``K/M``,
``c/M``, ``K/I11``, ``c/I11`` and ``h/M``, ``h/I11``), because each spring
force is a scalar along its axis and every torque is perpendicular to the rod,
so ``R I^-1 R^T tau = tau / I11``. Targets are recovered by inverting the
semi-implicit Euler update, ``a_t = (v_{t+1} - v_t) / dt``.

Two fitters share one design: ``fit_closed_form`` (pivoted-QR least squares)
and ``fit_iterative`` (Adam on next-state MSE with analytic gradients).
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .core import SystemConfig, cross
from .errors import (
    InsufficientData,
    NoControlData,
    NonFiniteLoss,
    NonPositiveEstimate,
    RankDeficient,
)
from .params import EngineParams, RatioParams
from .sim import Dataset, Transitions, pair_features, rollout

SINGLE, MULTIPLE = "single", "multiple"
_N_STATE = 13  # p, v, q, w components per rod


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

@dataclass
class RegressionGroup:
    """One independent least-squares problem (all rods when tied, one rod otherwise).

    Designs are shaped (n_transitions, n_group_rods, 3, n_params); the targets
    are the observed accelerations minus gravity.
    """

    name: str
    rods: np.ndarray
    lin_design: np.ndarray
    lin_target: np.ndarray
    ang_design: np.ndarray
    ang_target: np.ndarray
    lin_names: list
    ang_names: list
    # per incidence pair p of these rods: column indices into the designs
    pairs: np.ndarray
    col_k: np.ndarray
    col_c: np.ndarray
    col_h: int | None = None

    @property
    def n_params(self):
        return self.lin_design.shape[-1] + self.ang_design.shape[-1]


@dataclass
class TransitionBatch:
    config: SystemConfig
    tying: str
    groups: list
    transitions: Transitions
    include_control: bool

    @property
    def n_transitions(self):
        return len(self.transitions)

    @property
    def n_unknowns(self):
        return sum(g.n_params for g in self.groups)


def _as_transitions(data, split="train"):
    if isinstance(data, Dataset):
        return data.transitions(split)
    return data


def build_features(data, config: SystemConfig, tying=SINGLE, include_control=None) -> TransitionBatch:
    """Regression designs for every rod and transition.

    ``include_control`` adds ``h/M`` and ``h/I11`` unknowns; by default they
    are included exactly when the data carries a nonzero control force.
    """
    if tying not in (SINGLE, MULTIPLE):
        raise ValueError(f"tying must be 'single' or 'multiple', got {tying!r}")
    tr = _as_transitions(data)
    if include_control is None:
        include_control = tr.has_control
    topo = config.topology
    inc = topo.incidence
    x_k, x_c, t_k, t_c = pair_features(config, tr.p0, tr.v0, tr.q0, tr.w0)
    y_lin = (tr.v1 - tr.v0) / tr.dt - config.g
    y_ang = (tr.w1 - tr.w0) / tr.dt
    torque_u = cross(tr.arm, tr.force)

    if tying == SINGLE:
        layout = [("all", np.arange(topo.n_rods))]
    else:
        layout = [(f"rod{r}", np.array([r])) for r in range(topo.n_rods)]

    groups = []
    for name, rods in layout:
        pairs = np.flatnonzero(np.isin(inc.rod, rods))
        if tying == SINGLE:
            col_k = np.zeros(len(pairs), dtype=int)
            col_c = np.ones(len(pairs), dtype=int)
            lin_names, ang_names = ["K/M", "c/M"], ["K/I11", "c/I11"]
        else:
            springs = list(dict.fromkeys(inc.spring[pairs]))
            col_k = np.array([2 * springs.index(s) for s in inc.spring[pairs]], dtype=int)
            col_c = col_k + 1
            r = rods[0]
            lin_names, ang_names = [], []
            for s in springs:
                lin_names += [f"K[{s}]/M[{r}]", f"c[{s}]/M[{r}]"]
                ang_names += [f"K[{s}]/I11[{r}]", f"c[{s}]/I11[{r}]"]
        n = len(lin_names)
        col_h = None
        if include_control:
            col_h = n
            suffix = "" if tying == SINGLE else f"[{rods[0]}]"
            lin_names.append(f"h/M{suffix}")
            ang_names.append(f"h/I11{suffix}")
        P = len(lin_names)
        T = len(tr)
        local = {r: i for i, r in enumerate(rods)}
        A = np.zeros((T, len(rods), 3, P))
        B = np.zeros((T, len(rods), 3, P))
        for j, p in enumerate(pairs):
            li = local[inc.rod[p]]
            A[:, li, :, col_k[j]] += x_k[:, p]
            A[:, li, :, col_c[j]] += x_c[:, p]
            B[:, li, :, col_k[j]] += t_k[:, p]
            B[:, li, :, col_c[j]] += t_c[:, p]
        if include_control:
            A[..., col_h] = tr.force[:, rods]
            B[..., col_h] = torque_u[:, rods]
        groups.append(
            RegressionGroup(name, rods, A, y_lin[:, rods], B, y_ang[:, rods],
                            lin_names, ang_names, pairs, col_k, col_c, col_h)
        )
    return TransitionBatch(config, tying, groups, tr, include_control)


# ---------------------------------------------------------------------------
# least squares
# ---------------------------------------------------------------------------

@dataclass
class LstsqResult:
    coef: np.ndarray
    residual_rms: float
    rank: int
    n_rows: int


def lstsq_qr(A, y, names=None, group="", ridge=0.0):
    """Least squares via column-pivoted Householder QR, with rank checking.

    Raises ``RankDeficient`` naming the unidentifiable parameter combinations.
    With ``ridge > 0`` the system is Tikhonov-damped instead of failing.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    n, P = A.shape
    names = names or [f"x{i}" for i in range(P)]
    if ridge > 0:
        A_aug = np.vstack([A, np.sqrt(ridge) * np.eye(P)])
        y_aug = np.concatenate([y, np.zeros(P)])
        coef = lstsq_qr(A_aug, y_aug, names, group).coef
        res = y - A @ coef
        return LstsqResult(coef, float(np.sqrt(np.mean(res**2))) if n else 0.0, P, n)
    if n < P:
        raise InsufficientData(n, P, group)
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(n, P) * np.finfo(float).eps if diag.size and diag[0] > 0 else np.inf
    rank = int(np.sum(diag > tol))
    if rank < P:
        _, s, vt = np.linalg.svd(A[: min(n, 20 * P)] if n > 20 * P else A, full_matrices=True)
        s_full = np.zeros(P)
        s_full[: len(s)] = s
        null = vt[s_full <= (s_full[0] * max(n, P) * np.finfo(float).eps if s_full[0] > 0 else np.inf)]
        if len(null) == 0:
            null = vt[-(P - rank):]
        desc = [
            {names[i]: float(c) for i, c in enumerate(vec) if abs(c) > 1e-6} for vec in null
        ]
        raise RankDeficient(rank, P, desc, group)
    z = Q.T @ y
    sol = scipy.linalg.solve_triangular(R, z)
    coef = np.empty(P)
    coef[piv] = sol
    res = y - A @ coef
    return LstsqResult(coef, float(np.sqrt(np.mean(res**2))), rank, n)


def _flatten(design, target):
    A = design.reshape(-1, design.shape[-1])
    y = target.reshape(-1)
    keep = np.any(A != 0, axis=1)
    return A[keep], y[keep]


# ---------------------------------------------------------------------------
# fit results
# ---------------------------------------------------------------------------

@dataclass
class FitConfig:
    method: str = "closed_form"  # or "iterative"
    epochs: int = 30
    initial_lr: float = 0.1
    lr_halving_period: int = 3
    batch_size: int = 1024
    init_value: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-12
    shuffle_seed: int = 0

    def lr_at(self, epoch):
        return self.initial_lr * 0.5 ** (epoch // self.lr_halving_period)


@dataclass
class FitResult:
    method: str
    tying: str
    ratios: RatioParams
    coefficients: dict              # group name -> {"lin": [...], "ang": [...]}
    names: dict                     # group name -> {"lin": [...], "ang": [...]}
    residual_rms: dict              # {"lin": float, "ang": float}
    loss_curve: list = field(default_factory=list)
    sec_per_iter: list = field(default_factory=list)
    n_transitions: int = 0
    n_unknowns: int = 0
    underdetermined: bool = False

    def named_estimates(self):
        out = {}
        for g, d in self.coefficients.items():
            for part in ("lin", "ang"):
                out.update(zip(self.names[g][part], map(float, d[part])))
        return out

    def to_dict(self, timing=False):
        d = {
            "method": self.method,
            "tying": self.tying,
            "estimates": self.named_estimates(),
            "ratios": self.ratios.to_dict(),
            "residual_rms": self.residual_rms,
            "loss_curve": [float(x) for x in self.loss_curve],
            "n_transitions": self.n_transitions,
            "n_unknowns": self.n_unknowns,
            "underdetermined": self.underdetermined,
        }
        if timing:
            d["sec_per_iter"] = [float(x) for x in self.sec_per_iter]
        return d


def _expand_ratios(batch: TransitionBatch, coefs) -> RatioParams:
    """Scatter group coefficients onto per-incidence / per-rod ratio arrays."""
    topo = batch.config.topology
    P, R = len(topo.incidence.rod), topo.n_rods
    lin_k, lin_c, ang_k, ang_c = (np.full(P, np.nan) for _ in range(4))
    lin_h, ang_h = np.zeros(R), np.zeros(R)
    for g in batch.groups:
        lin, ang = coefs[g.name]
        lin_k[g.pairs], lin_c[g.pairs] = lin[g.col_k], lin[g.col_c]
        ang_k[g.pairs], ang_c[g.pairs] = ang[g.col_k], ang[g.col_c]
        if g.col_h is not None:
            lin_h[g.rods], ang_h[g.rods] = lin[g.col_h], ang[g.col_h]
    return RatioParams(lin_k, lin_c, ang_k, ang_c, lin_h, ang_h)


def _result(method, batch, coefs, rms, **kw):
    return FitResult(
        method,
        batch.tying,
        _expand_ratios(batch, coefs),
        {g.name: {"lin": coefs[g.name][0].tolist(), "ang": coefs[g.name][1].tolist()} for g in batch.groups},
        {g.name: {"lin": g.lin_names, "ang": g.ang_names} for g in batch.groups},
        rms,
        n_transitions=batch.n_transitions,
        n_unknowns=batch.n_unknowns,
        underdetermined=batch.n_transitions < max(g.n_params // 2 for g in batch.groups),
        **kw,
    )


def fit_closed_form(batch: TransitionBatch, ridge=0.0) -> FitResult:
    """Ordinary least squares per regression group (deterministic reference fit)."""
    t0 = time.perf_counter()
    coefs = {}
    sq = {"lin": [0.0, 0], "ang": [0.0, 0]}
    for g in batch.groups:
        sol = []
        for part, design, target, names in (
            ("lin", g.lin_design, g.lin_target, g.lin_names),
            ("ang", g.ang_design, g.ang_target, g.ang_names),
        ):
            A, y = _flatten(design, target)
            res = lstsq_qr(A, y, names, f"{g.name}/{part}", ridge=ridge)
            sol.append(res.coef)
            sq[part][0] += res.residual_rms**2 * res.n_rows
            sq[part][1] += res.n_rows
        coefs[g.name] = tuple(sol)
    rms = {k: float(np.sqrt(v[0] / v[1])) if v[1] else 0.0 for k, v in sq.items()}
    return _result("closed_form", batch, coefs, rms, sec_per_iter=[time.perf_counter() - t0])


# ---------------------------------------------------------------------------
# iterative fit: Adam on next-state MSE
# ---------------------------------------------------------------------------

def _split_theta(batch, theta):
    out, i = {}, 0
    for g in batch.groups:
        nl, na = g.lin_design.shape[-1], g.ang_design.shape[-1]
        out[g.name] = (theta[i:i + nl], theta[i + nl:i + nl + na])
        i += nl + na
    return out


# packed per-rod columns: v0, q0, w0, then observed increments
# r_p = p1 - p0 - dt v0, dv = v1 - v0, dw = w1 - w0, dq = q0 - q1, and q1
_STATE_SPLITS = np.cumsum([3, 4, 3, 3, 3, 3, 4])


def _pack_groups(batch: TransitionBatch):
    """Per group: (lin design, ang design, packed states (n, nr, 27)).

    Residuals are formed against observed increments rather than raw states so
    their rounding scales with the per-step change, not with |p| or |q|.
    """
    tr = batch.transitions
    dt = tr.dt
    out = []
    for g in batch.groups:
        p0, v0, q0, w0 = (getattr(tr, k)[:, g.rods] for k in ("p0", "v0", "q0", "w0"))
        p1, v1, q1, w1 = (getattr(tr, k)[:, g.rods] for k in ("p1", "v1", "q1", "w1"))
        states = np.concatenate(
            [v0, q0, w0, (p1 - p0) - dt * v0, v1 - v0, w1 - w0, q0 - q1, q1], axis=-1)
        out.append((g.lin_design, g.ang_design, states))
    return out


def _take(packed, idx):
    if idx is None:
        return packed
    return [tuple(np.take(x, idx, axis=0) for x in arrays) for arrays in packed]


def _group_residuals(dt, g_vec, th_lin, th_ang, A, Bd, states):
    v0, q0, w0, r_p, dv, dw, dq0, q1 = np.split(states, _STATE_SPLITS, axis=-1)
    acc = A @ th_lin + g_vec
    e_v = dt * acc - dv
    e_p = dt * dt * acc - r_p
    w_inc = dt * (Bd @ th_ang)
    w_hat = w0 + w_inc
    e_w = w_inc - dw
    qw, qv = q0[..., 0], q0[..., 1:]
    dq = np.concatenate(
        [-np.sum(w_hat * qv, axis=-1, keepdims=True),
         qw[..., None] * w_hat + cross(w_hat, qv)], axis=-1)
    m = q0 + 0.5 * dt * dq
    # |m|^2 - 1 without cancelling against 1
    s2 = (np.sum(q0 * q0, axis=-1, keepdims=True) - 1.0) + dt * np.sum(q0 * dq, axis=-1, keepdims=True) \
        + 0.25 * dt * dt * np.sum(dq * dq, axis=-1, keepdims=True)
    norm = np.sqrt(1.0 + s2)
    e_q = (dq0 + 0.5 * dt * dq - (s2 / (norm + 1.0)) * q1) / norm
    return e_v, e_p, e_w, e_q, m / norm, norm, qw, qv


def _loss_and_grad(batch, theta, arrays, lo=0, hi=None, grad=True):
    dt = batch.transitions.dt
    g_vec = batch.config.g
    parts = _split_theta(batch, theta)
    window = slice(lo, hi)
    total, count = 0.0, 0
    saved = []
    for g, (A, Bd, states) in zip(batch.groups, arrays):
        th_lin, th_ang = parts[g.name]
        A, Bd = A[window], Bd[window]
        e_v, e_p, e_w, e_q, q_hat, norm, qw, qv = _group_residuals(
            dt, g_vec, th_lin, th_ang, A, Bd, states[window])
        total += np.sum(e_p**2) + np.sum(e_v**2) + np.sum(e_w**2) + np.sum(e_q**2)
        count += e_p.shape[0] * e_p.shape[1]
        if grad:
            saved.append((e_v, e_p, e_w, e_q, q_hat, norm, qw, qv, A, Bd))
    scale = 1.0 / (count * _N_STATE)
    loss = total * scale
    if not grad:
        return loss
    out = []
    for e_v, e_p, e_w, e_q, q_hat, norm, qw, qv, A, Bd in saved:
        dv = 2 * scale * (e_v + dt * e_p)
        d_lin = dt * np.einsum("trkj,trk->j", A, dv)
        gq = 2 * scale * e_q
        gm = (gq - q_hat * np.sum(q_hat * gq, axis=-1, keepdims=True)) / norm
        dw = 2 * scale * e_w + 0.5 * dt * (
            -gm[..., :1] * qv + qw[..., None] * gm[..., 1:] + cross(qv, gm[..., 1:])
        )
        d_ang = dt * np.einsum("trkj,trk->j", Bd, dw)
        out.extend([d_lin, d_ang])
    return loss, np.concatenate(out)


def next_state_loss(batch: TransitionBatch, theta, idx=None, grad=True):
    """MSE between predicted and observed next states, and its gradient in ``theta``.

    Prediction per rod: ``v' = v + dt (A theta + g)``, ``p' = p + dt v'``,
    ``w' = w + dt B theta``, ``q' = normalize(q + dt/2 (0, w') q)``.
    """
    return _loss_and_grad(batch, theta, _take(_pack_groups(batch), idx), grad=grad)


def next_state_residuals(batch: TransitionBatch, theta):
    """Flat residual vector ``r`` with ``next_state_loss == scale * sum(r**2)``; returns ``(r, scale)``."""
    parts = _split_theta(batch, theta)
    blocks = []
    for g, (A, Bd, states) in zip(batch.groups, _pack_groups(batch)):
        res = _group_residuals(batch.transitions.dt, batch.config.g, *parts[g.name], A, Bd, states)
        blocks.extend(e.ravel() for e in res[:4])
    r = np.concatenate(blocks)
    return r, 1.0 / r.size


class Adam:
    def __init__(self, theta, betas=(0.9, 0.999), eps=1e-12):
        self.theta = np.array(theta, dtype=float)
        self.m = np.zeros_like(self.theta)
        self.v = np.zeros_like(self.theta)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0

    def step(self, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        self.theta = self.theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return self.theta


def fit_iterative(batch: TransitionBatch, config: FitConfig | None = None) -> FitResult:
    """Minibatch Adam with a step-halving learning-rate schedule; parameters start at 1."""
    config = config or FitConfig(method="iterative")
    n = batch.n_transitions
    theta = np.full(batch.n_unknowns, float(config.init_value))
    opt = Adam(theta, config.adam_betas, config.adam_eps)
    rng = np.random.default_rng(config.shuffle_seed)
    packed = _pack_groups(batch)
    losses, timings = [], []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        # one shuffled gather per epoch; minibatches are contiguous views
        arrays = _take(packed, rng.permutation(n))
        ep_loss, seen = 0.0, 0
        for lo in range(0, n, config.batch_size):
            hi = min(lo + config.batch_size, n)
            loss, grad = _loss_and_grad(batch, opt.theta, arrays, lo, hi)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NonFiniteLoss(epoch)
            if lr > 0:
                opt.step(grad, lr)
            ep_loss += loss * (hi - lo)
            seen += hi - lo
        losses.append(ep_loss / seen)
        timings.append(time.perf_counter() - t0)
    coefs = {k: (v[0].copy(), v[1].copy()) for k, v in _split_theta(batch, opt.theta).items()}
    rms = _residual_rms(batch, coefs)
    return _result("iterative", batch, coefs, rms, loss_curve=losses, sec_per_iter=timings)


def _residual_rms(batch, coefs):
    sq = {"lin": [0.0, 0], "ang": [0.0, 0]}
    for g in batch.groups:
        for part, design, target, c in (
            ("lin", g.lin_design, g.lin_target, coefs[g.name][0]),
            ("ang", g.ang_design, g.ang_target, coefs[g.name][1]),
        ):
            A, y = _flatten(design, target)
            sq[part][0] += float(np.sum((y - A @ c) ** 2))
            sq[part][1] += len(y)
    return {k: float(np.sqrt(v[0] / v[1])) if v[1] else 0.0 for k, v in sq.items()}


def fit(batch: TransitionBatch, config: FitConfig | None = None) -> FitResult:
    config = config or FitConfig()
    if config.method == "closed_form":
        return fit_closed_form(batch)
    if config.method == "iterative":
        return fit_iterative(batch, config)
    raise ValueError(f"unknown fit method {config.method!r}")


# ---------------------------------------------------------------------------
# absolute parameters
# ---------------------------------------------------------------------------

@dataclass
class AbsoluteEstimate:
    params: EngineParams | None
    ratios: RatioParams
    scale_identified: bool
    anchor: str = ""


def resolve_absolute_params(ratios: RatioParams | FitResult, config: SystemConfig, known_mass=None,
                            total_mass=None, known_h=None, known_i11=None) -> AbsoluteEstimate:
    """Turn ratio weights into absolute K, c, M, I11 given one scale anchor.

    Relative masses follow from springs shared between rods (solved in log
    space); the common scale needs a known mass (scalar for every rod, or a
    ``{rod: mass}`` mapping), the total mass, the control scalar ``h`` (when
    the data carried control forces) or a known ``{rod: I11}``. Without an
    anchor the ratios are passed through and ``scale_identified`` is False.
    I33 is not identifiable from torques and is taken from rod geometry.
    """
    if isinstance(ratios, FitResult):
        ratios = ratios.ratios
    topo = config.topology
    inc = topo.incidence
    S, R = topo.n_springs, topo.n_rods
    P = len(inc.rod)
    for name in ("lin_k", "ang_k"):
        vals = getattr(ratios, name)
        if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
            raise NonPositiveEstimate(f"{name} has non-positive or missing entries: {vals}")
    use_h = known_h is not None or np.any(ratios.lin_h != 0)
    if use_h and (np.any(ratios.lin_h <= 0) or np.any(ratios.ang_h <= 0)):
        raise NonPositiveEstimate(f"control ratios must be positive: {ratios.lin_h}, {ratios.ang_h}")

    # unknowns: log K (S), log M (R), log I (R), log h (1)
    n_unk = S + 2 * R + 1
    rows, rhs = [], []

    def eq(cols, val):
        r = np.zeros(n_unk)
        for c, s in cols:
            r[c] += s
        rows.append(r)
        rhs.append(val)

    for j in range(P):
        s, r = inc.spring[j], inc.rod[j]
        eq([(s, 1), (S + r, -1)], np.log(ratios.lin_k[j]))
        eq([(s, 1), (S + R + r, -1)], np.log(ratios.ang_k[j]))
    if use_h:
        for r in range(R):
            eq([(n_unk - 1, 1), (S + r, -1)], np.log(ratios.lin_h[r]))
            eq([(n_unk - 1, 1), (S + R + r, -1)], np.log(ratios.ang_h[r]))
    else:
        eq([(n_unk - 1, 1)], 0.0)
    eq([(S, 1)], 0.0)  # gauge: log M[0] = 0
    sol, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    K, M, I = np.exp(sol[:S]), np.exp(sol[S:S + R]), np.exp(sol[S + R:S + 2 * R])
    h = float(np.exp(sol[-1]))

    c = np.zeros(S)
    cnt = np.zeros(S)
    for j in range(P):
        s, r = inc.spring[j], inc.rod[j]
        c[s] += ratios.lin_c[j] * M[r] + ratios.ang_c[j] * I[r]
        cnt[s] += 2
    c /= np.maximum(cnt, 1)
    if np.any(c < 0):
        raise NonPositiveEstimate(f"negative damping estimates: {c}")

    scale, anchor = None, ""
    if known_mass is not None:
        km = known_mass if isinstance(known_mass, dict) else {r: known_mass for r in range(R)}
        scale = float(np.exp(np.mean([np.log(m / M[r]) for r, m in km.items()])))
        anchor = "known_mass"
    elif total_mass is not None:
        scale, anchor = float(total_mass / np.sum(M)), "total_mass"
    elif known_h is not None:
        scale, anchor = float(known_h / h), "known_h"
    elif known_i11 is not None:
        scale = float(np.exp(np.mean([np.log(v / I[r]) for r, v in known_i11.items()])))
        anchor = "known_i11"
    if scale is None:
        return AbsoluteEstimate(None, ratios, False)
    M, K, c, I = M * scale, K * scale, c * scale, I * scale
    h = h * scale if use_h else (known_h if known_h is not None else 1.0)
    i33 = M * topo.radii**2 / 2.0
    return AbsoluteEstimate(EngineParams(K, c, M, I, i33, h), ratios, True, anchor)


# ---------------------------------------------------------------------------
# control scalar
# ---------------------------------------------------------------------------

@dataclass
class ControlFit:
    h: float
    h_closed_form: float
    trace: list
    n_rows: int

    @property
    def tail_variance(self):
        return float(np.var(self.trace[-5:]))


def tune_control_scalar(data, config: SystemConfig, frozen: EngineParams,
                        fit_config: FitConfig | None = None) -> ControlFit:
    """Fit the control-force scalar ``h`` with every other parameter frozen.

    Residual accelerations (observed minus frozen spring terms) are regressed
    on ``f_u / M`` and ``(r_u x f_u) / I11`` over the transitions that carry a
    control force. ``h`` starts at 1 and follows the Adam schedule of
    ``fit_iterative``; the one-parameter least-squares solution is reported too.
    """
    fit_config = fit_config or FitConfig(method="iterative", batch_size=4)
    tr = _as_transitions(data)
    rows = np.flatnonzero(np.any(tr.force != 0, axis=(1, 2)))
    if rows.size == 0:
        raise NoControlData("no transition carries a control force")
    tr = tr.subset(rows)
    ratios = frozen.replace(h=0.0).ratios(config.topology)
    a_springs, alpha_springs = _ratio_accelerations(config, ratios, tr)
    r_lin = (tr.v1 - tr.v0) / tr.dt - a_springs
    r_ang = (tr.w1 - tr.w0) / tr.dt - alpha_springs
    d_lin = tr.force / frozen.mass[:, None]
    d_ang = cross(tr.arm, tr.force) / frozen.i11[:, None]
    # one row block per transition: (R*3 linear + R*3 angular)
    D = np.concatenate([d_lin.reshape(len(tr), -1), d_ang.reshape(len(tr), -1)], axis=1)
    Y = np.concatenate([r_lin.reshape(len(tr), -1), r_ang.reshape(len(tr), -1)], axis=1)
    h_cf = float(np.sum(D * Y) / np.sum(D * D))

    opt = Adam([fit_config.init_value], fit_config.adam_betas, fit_config.adam_eps)
    rng = np.random.default_rng(fit_config.shuffle_seed)
    trace = []
    n = len(tr)
    for epoch in range(fit_config.epochs):
        lr = fit_config.lr_at(epoch)
        order = rng.permutation(n)
        for lo in range(0, n, fit_config.batch_size):
            idx = order[lo:lo + fit_config.batch_size]
            d, y = D[idx], Y[idx]
            grad = 2 * np.sum(d * (opt.theta[0] * d - y)) / d.size
            if not np.isfinite(grad):
                raise NonFiniteLoss(epoch)
            if lr > 0:
                opt.step(np.array([grad]), lr)
        trace.append(float(opt.theta[0]))
    return ControlFit(trace[-1], h_cf, trace, int(n))


def _ratio_accelerations(config, ratios: RatioParams, tr: Transitions):
    from .sim import accelerations

    a, alpha = accelerations(config, ratios, tr.p0, tr.v0, tr.q0, tr.w0, tr.force, tr.arm)
    return a, alpha


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def predict_rollout(params, initial, config: SystemConfig, n_steps, controls=None, perturbation=None):
    """Roll out the learned engine (absolute or ratio-form parameters)."""
    if isinstance(params, FitResult):
        params = params.ratios
    if isinstance(params, AbsoluteEstimate):
        params = params.params
    return rollout(initial, config, params, n_steps, controls, perturbation)


def one_step_error(params, data, config: SystemConfig):
    """Max abs difference between predicted and observed next-state velocities."""
    from .sim import accelerations, integrate_arrays

    tr = _as_transitions(data)
    if isinstance(params, FitResult):
        params = params.ratios
    a, alpha = accelerations(config, params, tr.p0, tr.v0, tr.q0, tr.w0, tr.force, tr.arm)
    p1, v1, q1, w1 = integrate_arrays(tr.p0, tr.v0, tr.q0, tr.w0, a, alpha, tr.dt)
    return float(max(np.max(np.abs(x - y)) for x, y in
                     ((p1, tr.p1), (v1, tr.v1), (q1, tr.q1), (w1, tr.w1))))


def acceleration_residual_rms(params, data, config: SystemConfig):
    """RMS of observed minus predicted linear accelerations."""
    tr = _as_transitions(data)
    if isinstance(params, FitResult):
        params = params.ratios
    a, _ = _ratio_accelerations(config, params if isinstance(params, RatioParams)
                                else params.ratios(config.topology), tr)
    return float(np.sqrt(np.mean(((tr.v1 - tr.v0) / tr.dt - a) ** 2)))


def save_fit_report(result: FitResult, path, truth: dict | None = None, extra: dict | None = None):
    d = result.to_dict(timing=True)
    if truth is not None:
        d["ground_truth"] = truth
    if extra:
        d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
    return d
