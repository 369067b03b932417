"""Physical parameter containers used by the simulator and the fitters.

``EngineParams`` holds absolute quantities (K, c per spring; M, I per rod;
control scalar h). ``RatioParams`` holds the quantities that are actually
identifiable from force-free state data, one entry per rod-side spring
incidence: ``K_s/M_r``, ``c_s/M_r``, ``K_s/I11_r``, ``c_s/I11_r``, plus
``h/M_r`` and ``h/I11_r`` per rod. Both may carry leading batch axes, which
the simulator broadcasts against batched states.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .core import SystemConfig, TopologyGraph


@dataclass
class EngineParams:
    stiffness: np.ndarray  # (..., S)
    damping: np.ndarray    # (..., S)
    mass: np.ndarray       # (..., R)
    i11: np.ndarray        # (..., R)
    i33: np.ndarray        # (..., R)
    h: float = 1.0

    def __post_init__(self):
        for f in ("stiffness", "damping", "mass", "i11", "i33"):
            setattr(self, f, np.asarray(getattr(self, f), dtype=float))
        self.h = np.asarray(self.h, dtype=float)

    @classmethod
    def from_config(cls, config: SystemConfig | TopologyGraph, h=1.0):
        topo = config.topology if isinstance(config, SystemConfig) else config
        return cls(
            np.array([s.stiffness for s in topo.springs]),
            np.array([s.damping for s in topo.springs]),
            np.array([r.mass for r in topo.rods]),
            np.array([r.i11 for r in topo.rods]),
            np.array([r.i33 for r in topo.rods]),
            h,
        )

    def replace(self, **kw):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return EngineParams(**d)

    def ratios(self, topology: TopologyGraph) -> "RatioParams":
        inc = topology.incidence
        K = self.stiffness[..., inc.spring]
        c = self.damping[..., inc.spring]
        M = self.mass[..., inc.rod]
        I = self.i11[..., inc.rod]
        h = self.h[..., None]
        return RatioParams(K / M, c / M, K / I, c / I, h / self.mass, h / self.i11)

    def physical_vector(self):
        """The identified set: stiffness, damping, then rod masses."""
        return np.concatenate([self.stiffness, self.damping, self.mass], axis=-1)

    def physical_names(self):
        S, R = self.stiffness.shape[-1], self.mass.shape[-1]
        return [f"K[{i}]" for i in range(S)] + [f"c[{i}]" for i in range(S)] + [f"M[{i}]" for i in range(R)]

    def to_dict(self):
        return {
            "stiffness": self.stiffness.tolist(),
            "damping": self.damping.tolist(),
            "mass": self.mass.tolist(),
            "i11": self.i11.tolist(),
            "i33": self.i33.tolist(),
            "h": float(self.h),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["stiffness"], d["damping"], d["mass"], d["i11"], d["i33"], d.get("h", 1.0))


@dataclass
class RatioParams:
    """Per-incidence ratio weights of the linear engine (see module docstring)."""

    lin_k: np.ndarray  # (..., P)  K_s / M_r
    lin_c: np.ndarray  # (..., P)  c_s / M_r
    ang_k: np.ndarray  # (..., P)  K_s / I11_r
    ang_c: np.ndarray  # (..., P)  c_s / I11_r
    lin_h: np.ndarray  # (..., R)  h / M_r
    ang_h: np.ndarray  # (..., R)  h / I11_r

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=float))

    def to_dict(self):
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: d[f.name] for f in fields(cls)})

    def max_relative_error(self, truth: "RatioParams", include_control=False):
        names = ["lin_k", "lin_c", "ang_k", "ang_c"] + (["lin_h", "ang_h"] if include_control else [])
        errs = []
        for n in names:
            t = getattr(truth, n)
            if t.size:
                errs.append(np.max(np.abs(getattr(self, n) - t) / np.abs(t)))
        return float(max(errs))
