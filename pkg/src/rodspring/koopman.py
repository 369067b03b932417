"""Koopman-style baseline: polynomial lift of rod-local observables, linear map to accelerations.

Each rod contributes 15 base variables: its world half-axis ``r`` and, for
each end, the summed reduced spring offsets and projected relative velocities
of the springs attached there. The lift is the constant, the 15 linear terms
and all 120 degree-2 monomials (136 features). A least-squares map takes the
features to ``(a, alpha)``; rollouts reuse the semi-implicit integrator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .core import SystemConfig, SystemState, Trajectory, axis_world
from .errors import RankDeficient, SimulationBlowUp
from .sim import (
    BLOWUP_THRESHOLD,
    Dataset,
    integrate_arrays,
    observe_springs,
    reduced_vectors,
)

BASE_NAMES = (
    [f"r{c}" for c in "xyz"]
    + [f"dp1{c}" for c in "xyz"] + [f"dp2{c}" for c in "xyz"]
    + [f"dv1{c}" for c in "xyz"] + [f"dv2{c}" for c in "xyz"]
)
OUTPUT_NAMES = ("ax", "ay", "az", "alx", "aly", "alz")


@dataclass(frozen=True)
class KoopmanBasisSpec:
    max_degree: int = 2
    n_base: int = 15

    def __post_init__(self):
        if self.max_degree not in (1, 2):
            raise ValueError("only degrees 1 and 2 are supported")

    @property
    def n_features(self):
        n = 1 + self.n_base
        if self.max_degree == 2:
            n += self.n_base * (self.n_base + 1) // 2
        return n

    def feature_names(self):
        names = ["1"] + list(BASE_NAMES)
        if self.max_degree == 2:
            i, j = np.triu_indices(self.n_base)
            names += [f"{BASE_NAMES[a]}*{BASE_NAMES[b]}" for a, b in zip(i, j)]
        return names


def base_variables(config: SystemConfig, p, v, q, w):
    """Rod-local observables, shape (..., R, 15), ordered as ``BASE_NAMES``."""
    topo = config.topology
    obs = observe_springs(config, p, v, q, w)
    dp_hat, dv_hat = reduced_vectors(obs, topo.rest_lengths)
    plus, minus = topo.end_matrices
    agg = lambda m, x: np.einsum("rs,...sk->...rk", m, x)
    r = axis_world(q, topo.half_lengths)
    return np.concatenate(
        [r, agg(plus, dp_hat), agg(minus, dp_hat), agg(plus, dv_hat), agg(minus, dv_hat)], axis=-1
    )


def lift_base(x, spec: KoopmanBasisSpec = KoopmanBasisSpec()):
    """Monomial features of base variables ``x`` (..., 15) -> (..., n_features)."""
    x = np.asarray(x, dtype=float)
    parts = [np.ones(x.shape[:-1] + (1,)), x]
    if spec.max_degree == 2:
        i, j = np.triu_indices(spec.n_base)
        parts.append(x[..., i] * x[..., j])
    return np.concatenate(parts, axis=-1)


def lift(config: SystemConfig, p, v, q, w, spec: KoopmanBasisSpec = KoopmanBasisSpec()):
    return lift_base(base_variables(config, p, v, q, w), spec)


@dataclass
class KoopmanModel:
    spec: KoopmanBasisSpec
    per_rod: bool
    weights: np.ndarray          # (n_models, n_features, 6)
    residual_rms: float = 0.0
    rank: list = field(default_factory=list)

    def predict(self, features):
        """Map features (..., R, F) to (a, alpha), each (..., R, 3)."""
        if self.per_rod:
            out = np.einsum("...rf,rfk->...rk", features, self.weights)
        else:
            out = features @ self.weights[0]
        return out[..., :3], out[..., 3:]

    def to_dict(self):
        return {
            "basis": {"max_degree": self.spec.max_degree, "n_base": self.spec.n_base,
                      "features": self.spec.feature_names()},
            "per_rod": self.per_rod,
            "outputs": list(OUTPUT_NAMES),
            "layout": "weights[model][feature][output]",
            "weights": self.weights.tolist(),
            "residual_rms": self.residual_rms,
            "rank": self.rank,
        }

    @classmethod
    def from_dict(cls, d):
        b = d["basis"]
        return cls(KoopmanBasisSpec(b["max_degree"], b["n_base"]), d["per_rod"],
                   np.asarray(d["weights"], dtype=float), d.get("residual_rms", 0.0), d.get("rank", []))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_operator(F, Y, ridge=0.0, rcond=1e-12, group="features"):
    """Minimum-norm least squares with column equilibration.

    Identities among features (``|r|`` is constant) make the design rank
    deficient even with plenty of data; those directions are truncated.
    ``RankDeficient`` is raised only when there are fewer rows than features.
    """
    n, P = F.shape
    if n < P and ridge <= 0:
        rank = int(np.linalg.matrix_rank(F)) if n else 0
        raise RankDeficient(rank, P, [], f"{group}: {n} transitions for {P} features")
    scale = np.linalg.norm(F, axis=0)
    scale[scale == 0] = 1.0
    Fs = F / scale
    if ridge > 0:
        Fs = np.vstack([Fs, np.sqrt(ridge) * np.eye(P)])
        Y = np.vstack([Y, np.zeros((P, Y.shape[1]))])
    W, _, rank, _ = scipy.linalg.lstsq(Fs, Y, cond=rcond, lapack_driver="gelsd")
    return W / scale[:, None], int(rank)


def _targets(tr, config):
    # gravity is added by the integrator, as in ident; the lift models springs only
    return np.concatenate([(tr.v1 - tr.v0) / tr.dt - config.g, (tr.w1 - tr.w0) / tr.dt], axis=-1)


def fit_koopman(data, config: SystemConfig, per_rod=True, spec: KoopmanBasisSpec = KoopmanBasisSpec(),
                ridge=0.0, rcond=1e-12) -> KoopmanModel:
    """Fit the feature-to-acceleration map on the same targets as ident.

    ``per_rod`` fits one map per rod; otherwise all rods share one map.
    ``ridge`` enables Tikhonov damping (off by default).
    """
    tr = data.transitions("train") if isinstance(data, Dataset) else data
    F = lift(config, tr.p0, tr.v0, tr.q0, tr.w0, spec)              # (n, R, F)
    Y = _targets(tr, config)                                          # (n, R, 6)
    R = F.shape[1]
    if per_rod:
        blocks = [(f"rod{r}", F[:, r], Y[:, r]) for r in range(R)]
    else:
        blocks = [("shared", F.reshape(-1, F.shape[-1]), Y.reshape(-1, 6))]
    weights, ranks, sq, cnt = [], [], 0.0, 0
    for name, Fi, Yi in blocks:
        W, rank = fit_operator(Fi, Yi, ridge, rcond, name)
        weights.append(W)
        ranks.append(rank)
        sq += float(np.sum((Fi @ W - Yi) ** 2))
        cnt += Yi.size
    return KoopmanModel(spec, per_rod, np.stack(weights), float(np.sqrt(sq / max(cnt, 1))), ranks)


def residual_rms(model: KoopmanModel, data, config: SystemConfig):
    tr = data.transitions("test") if isinstance(data, Dataset) else data
    a, alpha = model.predict(lift(config, tr.p0, tr.v0, tr.q0, tr.w0, model.spec))
    err = np.concatenate([a, alpha], axis=-1) - _targets(tr, config)
    return float(np.sqrt(np.mean(err**2)))


def koopman_rollout(model: KoopmanModel, initial: SystemState, config: SystemConfig, n_steps,
                    guard=BLOWUP_THRESHOLD) -> Trajectory:
    """Lift, predict accelerations, integrate; repeated for ``n_steps``."""
    p, v, q, w = (np.array(x, dtype=float) for x in (initial.p, initial.v, initial.q, initial.w))
    out = {k: [x] for k, x in zip("pvqw", (p, v, q, w))}
    for k in range(n_steps):
        a, alpha = model.predict(lift(config, p, v, q, w, model.spec))
        p, v, q, w = integrate_arrays(p, v, q, w, a + config.g, alpha, config.dt)
        if guard is not None:
            m = max(np.max(np.abs(x)) for x in (p, v, w))
            if not np.isfinite(m) or m > guard:
                raise SimulationBlowUp(k + 1, float(m))
        for key, x in zip("pvqw", (p, v, q, w)):
            out[key].append(x)
    R = p.shape[0]
    zeros = np.zeros((n_steps, R, 3))
    return Trajectory(*(np.stack(out[k]) for k in "pvqw"), zeros, zeros.copy(), config.dt,
                      config.name, initial.t)


__all__ = [
    "KoopmanBasisSpec", "KoopmanModel", "base_variables", "lift_base", "lift",
    "fit_koopman", "fit_operator", "koopman_rollout", "residual_rms",
]
