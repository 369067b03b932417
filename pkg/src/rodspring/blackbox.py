"""Black-box baselines: trajectory matching by CMA-ES and by bounded L-BFGS-B.

The loss re-simulates the reference trajectory from its initial state with
candidate parameters and averages the squared state difference. Candidates
are evaluated as one batched simulation, so a CMA-ES generation or a
finite-difference stencil costs a single rollout.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .core import SystemConfig, SystemState, Trajectory, cylinder_inertia
from .errors import DegenerateSpring
from .params import EngineParams
from .sim import simulate_batch

PENALTY = 1e12
DEFAULT_BOUNDS = (0.1, 1000.0)


@dataclass
class SearchSpace:
    names: list
    lo: np.ndarray = None
    hi: np.ndarray = None
    init: np.ndarray = None

    def __post_init__(self):
        n = len(self.names)
        self.lo = np.broadcast_to(np.asarray(DEFAULT_BOUNDS[0] if self.lo is None else self.lo, float), (n,)).copy()
        self.hi = np.broadcast_to(np.asarray(DEFAULT_BOUNDS[1] if self.hi is None else self.hi, float), (n,)).copy()
        self.init = np.broadcast_to(np.asarray(1.0 if self.init is None else self.init, float), (n,)).copy()
        if np.any(self.lo <= 0) or np.any(self.hi <= self.lo):
            raise ValueError("bounds must satisfy 0 < lo < hi")
        if not self.contains(self.init):
            raise ValueError("initial guess lies outside the bounds")

    @property
    def dim(self):
        return len(self.names)

    def contains(self, x):
        x = np.asarray(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)


# ---------------------------------------------------------------------------
# parameter maps and loss
# ---------------------------------------------------------------------------

def known_mass_map(config: SystemConfig, mass=None):
    """Candidates (K, c) shared by every spring; rod masses fixed at ``mass``."""
    topo = config.topology
    masses = np.array([r.mass for r in topo.rods]) if mass is None else np.full(topo.n_rods, float(mass))
    i11, i33 = cylinder_inertia(masses, topo.half_lengths, topo.radii)

    def to_params(x):
        x = np.atleast_2d(x)
        B, S = x.shape[0], topo.n_springs
        return EngineParams(np.repeat(x[:, :1], S, 1), np.repeat(x[:, 1:2], S, 1),
                            np.broadcast_to(masses, (B, topo.n_rods)), np.broadcast_to(i11, (B, topo.n_rods)),
                            np.broadcast_to(i33, (B, topo.n_rods)))

    return SearchSpace(["K", "c"]), to_params


def free_mass_map(config: SystemConfig):
    """Candidates (K, c, M); inertia follows M through the rod geometry."""
    topo = config.topology

    def to_params(x):
        x = np.atleast_2d(x)
        S, R = topo.n_springs, topo.n_rods
        M = np.repeat(x[:, 2:3], R, 1)
        i11, i33 = cylinder_inertia(M, topo.half_lengths, topo.radii)
        return EngineParams(np.repeat(x[:, :1], S, 1), np.repeat(x[:, 1:2], S, 1), M, i11, i33)

    return SearchSpace(["K", "c", "M"]), to_params


def _align_sign(q, q_ref):
    s = np.sign(np.sum(q * q_ref, axis=-1, keepdims=True))
    s[s == 0] = 1.0
    return q * s


def trajectory_loss(candidates, reference: Trajectory, config: SystemConfig, to_params):
    """Mean squared (p, v, q, w) difference over the reference horizon.

    ``candidates`` is (n,) or (B, n); returns a float or a (B,) array.
    Candidates whose rollout leaves the finite range score ``PENALTY``.
    """
    x = np.asarray(candidates, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    B = x.shape[0]
    T = reference.n_steps
    init = SystemState(*(np.repeat(getattr(reference, k)[:1], B, 0) for k in "pvqw"))
    controls = None
    if np.any(reference.force != 0):
        controls = (np.broadcast_to(reference.force, (B,) + reference.force.shape),
                    np.broadcast_to(reference.arm, (B,) + reference.arm.shape))
    try:
        with np.errstate(all="ignore"):
            res = simulate_batch(init, config, to_params(x), T, controls, guard=None)
    except DegenerateSpring:
        if B == 1:
            return PENALTY
        out = np.array([trajectory_loss(xi, reference, config, to_params) for xi in x])
        return float(out[0]) if single else out
    with np.errstate(all="ignore"):
        sq = (np.sum((res["p"] - reference.p) ** 2, axis=(1, 2, 3))
              + np.sum((res["v"] - reference.v) ** 2, axis=(1, 2, 3))
              + np.sum((_align_sign(res["q"], reference.q) - reference.q) ** 2, axis=(1, 2, 3))
              + np.sum((res["w"] - reference.w) ** 2, axis=(1, 2, 3)))
        n = (T + 1) * reference.p.shape[1] * 13
        loss = sq / n
    loss = np.where(np.isfinite(loss) & (loss < PENALTY), loss, PENALTY)
    return float(loss[0]) if single else loss


def make_loss(reference: Trajectory, config: SystemConfig, to_params):
    return lambda x: trajectory_loss(x, reference, config, to_params)


# ---------------------------------------------------------------------------
# CMA-ES
# ---------------------------------------------------------------------------

@dataclass
class CmaConfig:
    popsize: int | None = None
    sigma0: float | None = None
    tol: float = 1.0
    max_iter: int = 30
    seed: int = 0
    max_resample: int = 100

    def lam(self, n):
        lam = self.popsize or 4 + int(3 * np.log(n))
        if lam < 4:
            raise ValueError("population size must be >= 4")
        return lam


@dataclass
class OptimResult:
    x: np.ndarray
    loss: float
    history: list = field(default_factory=list)   # (iter, best_loss, params, wall_seconds)
    n_evals: int = 0
    stop_reason: str = ""
    converged: bool = False

    @property
    def sec_per_iter(self):
        w = [h[3] for h in self.history]
        return float(np.mean(np.diff([0.0] + w))) if w else 0.0


def cma_es(loss, space: SearchSpace, config: CmaConfig | None = None) -> OptimResult:
    """(mu/mu_w, lambda) CMA-ES with rank-one and rank-mu covariance updates.

    ``loss`` maps a (lambda, n) array to (lambda,) losses. Out-of-box samples
    are redrawn (clipped after ``max_resample`` tries). Stops when the search
    distribution's widest standard deviation drops below ``tol`` (in parameter
    units) or after ``max_iter`` generations.
    """
    config = config or CmaConfig()
    rng = np.random.default_rng(config.seed)
    n = space.dim
    lam = config.lam(n)
    mu = lam // 2
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / np.sum(w**2)
    cs = (mueff + 2) / (n + mueff + 5)
    ds = 1 + 2 * max(0.0, np.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    chi_n = np.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    mean = space.init.copy()
    sigma = config.sigma0 if config.sigma0 is not None else 0.3 * float(np.max(space.hi - space.lo))
    C = np.eye(n)
    B, D = np.eye(n), np.ones(n)
    ps, pc = np.zeros(n), np.zeros(n)
    best_x, best_f = mean.copy(), float(loss(mean[None])[0])
    history, n_evals = [], 1
    t0 = time.perf_counter()
    stop = "max_iter"
    for it in range(1, config.max_iter + 1):
        ys = np.empty((lam, n))
        xs = np.empty((lam, n))
        for k in range(lam):
            for _ in range(config.max_resample):
                y = B @ (D * rng.standard_normal(n))
                x = mean + sigma * y
                if space.contains(x):
                    break
            else:
                x = np.clip(x, space.lo, space.hi)
                y = (x - mean) / sigma
            ys[k], xs[k] = y, x
        f = np.asarray(loss(xs), dtype=float)
        n_evals += lam
        order = np.argsort(f, kind="stable")
        if f[order[0]] < best_f:
            best_f, best_x = float(f[order[0]]), xs[order[0]].copy()
        y_w = w @ ys[order[:mu]]
        mean = mean + sigma * y_w
        inv_sqrt_c = B @ np.diag(1 / D) @ B.T
        ps = (1 - cs) * ps + np.sqrt(cs * (2 - cs) * mueff) * inv_sqrt_c @ y_w
        hsig = np.linalg.norm(ps) / np.sqrt(1 - (1 - cs) ** (2 * it)) / chi_n < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + hsig * np.sqrt(cc * (2 - cc) * mueff) * y_w
        sel = ys[order[:mu]]
        C = ((1 - c1 - cmu) * C
             + c1 * (np.outer(pc, pc) + (1 - hsig) * cc * (2 - cc) * C)
             + cmu * (sel.T * w) @ sel)
        sigma *= np.exp(cs / ds * (np.linalg.norm(ps) / chi_n - 1))
        C = (C + C.T) / 2
        evals, B = np.linalg.eigh(C)
        D = np.sqrt(np.maximum(evals, 1e-30))
        history.append((it, best_f, best_x.copy(), time.perf_counter() - t0))
        if sigma * D.max() < config.tol:
            stop = "tol"
            break
    return OptimResult(best_x, best_f, history, n_evals, stop, stop == "tol")


# ---------------------------------------------------------------------------
# local search
# ---------------------------------------------------------------------------

def local_search(loss, space: SearchSpace, init=None, max_iter=30, rel_step=1e-6) -> OptimResult:
    """Bounded L-BFGS-B; gradients by central differences evaluated as one batch."""
    x0 = space.init if init is None else np.asarray(init, dtype=float)
    n = space.dim
    counter = {"evals": 0}
    cache = {}

    def fun(x):
        h = rel_step * np.maximum(1.0, np.abs(x))
        lo_ok = x - h >= space.lo
        hi_ok = x + h <= space.hi
        pts = [x]
        for i in range(n):
            e = np.zeros(n)
            e[i] = h[i]
            pts += [x + e if hi_ok[i] else x, x - e if lo_ok[i] else x]
        f = np.asarray(loss(np.array(pts)), dtype=float)
        counter["evals"] += len(pts)
        g = np.empty(n)
        for i in range(n):
            fp, fm = f[1 + 2 * i], f[2 + 2 * i]
            span = (h[i] if hi_ok[i] else 0.0) + (h[i] if lo_ok[i] else 0.0)
            g[i] = (fp - fm) / span if span > 0 else 0.0
        cache["best"] = min(cache.get("best", (np.inf, x)), (float(f[0]), x.copy()), key=lambda t: t[0])
        return float(f[0]), g

    history = []
    t0 = time.perf_counter()
    f0, _ = fun(x0)
    state = {"it": 0}

    def callback(xk):
        state["it"] += 1
        bf, bx = cache["best"]
        history.append((state["it"], bf, bx.copy(), time.perf_counter() - t0))

    res = scipy.optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                                  bounds=list(zip(space.lo, space.hi)),
                                  options={"maxiter": max_iter}, callback=callback)
    bf, bx = cache["best"]
    return OptimResult(bx, bf, history, counter["evals"], str(res.message), bool(res.success))


def write_history_csv(result: OptimResult, names, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter", "best_loss", *names, "wall_seconds"])
        for it, f, x, t in result.history:
            wr.writerow([it, repr(float(f)), *(repr(float(v)) for v in x), f"{t:.6f}"])
