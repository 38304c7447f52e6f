"""Synaptic update rules (Hebb, DHL, DEP), threshold dynamics and normalization.

The update functions are pure: they take the unnormalized synaptic
accumulator and return a new one. Normalization is applied separately to
produce the weights the controller actually uses, so the accumulator keeps
the plain exponential decay of the rule while the controller sees a matrix of
norm (just under) ``kappa``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

import numpy as np

RHO_DEFAULT = 1e-12
DT_DEFAULT = 0.02


class Rule(str, Enum):
    HEBB = "hebb"
    DHL = "dhl"
    DEP = "dep"


class Normalization(str, Enum):
    GLOBAL = "global"
    INDIVIDUAL = "individual"


def as_enum(cls, value):
    return value if isinstance(value, cls) else cls(str(value).lower())


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PlasticityParams:
    rule: Rule = Rule.DEP
    tau: float = 0.4
    tau_h: float | None = None  # None: threshold dynamics off, h stays pinned
    kappa: float = 1.0
    rho: float = RHO_DEFAULT
    normalization: Normalization = Normalization.GLOBAL
    dt: float = DT_DEFAULT

    def __post_init__(self):
        object.__setattr__(self, "rule", as_enum(Rule, self.rule))
        object.__setattr__(self, "normalization", as_enum(Normalization, self.normalization))
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.tau >= self.dt:
            raise ValueError(f"tau={self.tau} must be >= dt={self.dt}")
        if self.tau_h is not None and not self.tau_h > 0:
            raise ValueError(f"tau_h must be positive or null, got {self.tau_h}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")

    @classmethod
    def from_dict(cls, d: dict) -> "PlasticityParams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown plasticity fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["rule"] = self.rule.value
        d["normalization"] = self.normalization.value
        return d


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("non-finite input to plasticity update")


def _euler(C, post, pre, params: PlasticityParams) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    post = np.asarray(post, dtype=np.float64)
    pre = np.asarray(pre, dtype=np.float64)
    if C.shape != (post.shape[0], pre.shape[0]):
        raise ValueError(f"shapes C{C.shape}, post{post.shape}, pre{pre.shape} do not compose")
    _check_finite(C, post, pre)
    return C + (params.dt / params.tau) * (np.outer(post, pre) - C)


def dep_update(C, y_tilde_dot, x_dot, params: PlasticityParams) -> np.ndarray:
    """One Euler step of ``tau dC = ydot_tilde xdot^T - C`` (pre-normalization)."""
    return _euler(C, y_tilde_dot, x_dot, params)


def dhl_update(C, y_dot, x_dot, params: PlasticityParams) -> np.ndarray:
    return _euler(C, y_dot, x_dot, params)


def hebb_update(C, y, x, params: PlasticityParams) -> np.ndarray:
    return _euler(C, y, x, params)


def threshold_update(h, y, params: PlasticityParams) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if params.tau_h is None:
        return h
    y = np.asarray(y, dtype=np.float64)
    _check_finite(h, y)
    return h - (params.dt / params.tau_h) * y


def normalize_global(C, kappa: float, rho: float = RHO_DEFAULT) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    return kappa * C / (np.linalg.norm(C) + rho)


def normalize_individual(C, kappa: float, rho: float = RHO_DEFAULT) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    rows = np.linalg.norm(C, axis=1, keepdims=True)
    return kappa * C / (rows + rho)


def normalize(C, params: PlasticityParams) -> np.ndarray:
    if params.normalization is Normalization.INDIVIDUAL:
        return normalize_individual(C, params.kappa, params.rho)
    return normalize_global(C, params.kappa, params.rho)


class DerivativeBuffer:
    """Backward-difference derivative of a sampled vector signal.

    The first sample has no history and yields a zero derivative, so a system
    started at rest stays exactly at rest until something moves it.
    """

    def __init__(self, size: int):
        self.size = int(size)
        self.previous: np.ndarray | None = None
        self.time: float | None = None

    def reset(self):
        self.previous = None
        self.time = None


def estimate_derivative(buffer: DerivativeBuffer, sample, dt: float, t: float | None = None) -> np.ndarray:
    sample = np.array(sample, dtype=np.float64).reshape(-1)
    if sample.shape != (buffer.size,):
        raise ValueError(f"sample length {sample.shape[0]} != buffer size {buffer.size}")
    if buffer.previous is None:
        d = np.zeros(buffer.size)
    else:
        d = (sample - buffer.previous) / dt
    buffer.previous = sample
    buffer.time = t
    return d
