"""One-layer tanh controller network and weight snapshots."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DimensionError(ValueError):
    pass


@dataclass
class ControllerState:
    """Weights ``C`` (m motors x n sensors), thresholds ``h`` and the frozen flag.

    When ``frozen`` is set the simulation loop skips plasticity and threshold
    dynamics, so ``C`` and ``h`` stay bit-identical across steps.
    """

    C: np.ndarray
    h: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        self.C = np.array(self.C, dtype=np.float64, ndmin=2)
        self.h = np.array(self.h, dtype=np.float64).reshape(-1)
        if self.C.ndim != 2 or self.h.shape[0] != self.C.shape[0]:
            raise DimensionError(f"C {self.C.shape} and h {self.h.shape} disagree on motor count")

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[1]

    def copy(self) -> "ControllerState":
        return ControllerState(self.C.copy(), self.h.copy(), self.frozen)


def init_least_biased(n: int, m: int) -> ControllerState:
    if int(n) < 1 or int(m) < 1:
        raise DimensionError(f"sensor and motor counts must be positive, got n={n}, m={m}")
    return ControllerState(np.zeros((m, n)), np.zeros(m), frozen=False)


def step_controller(state: ControllerState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (state.n,):
        raise DimensionError(f"expected {state.n} sensor values, got shape {x.shape}")
    return np.tanh(state.C @ x + state.h)


def load_weights(state: ControllerState, C_fixed, h_fixed=None, frozen: bool = True) -> ControllerState:
    """Install fixed weights into ``state`` (in place) and return it."""
    C_fixed = np.array(C_fixed, dtype=np.float64, ndmin=2)
    if C_fixed.shape != state.C.shape:
        raise DimensionError(f"weight shape {C_fixed.shape} does not match controller {state.C.shape}")
    h_fixed = np.zeros(state.m) if h_fixed is None else np.array(h_fixed, dtype=np.float64).reshape(-1)
    if h_fixed.shape != (state.m,):
        raise DimensionError(f"threshold length {h_fixed.shape[0]} does not match m={state.m}")
    if not (np.all(np.isfinite(C_fixed)) and np.all(np.isfinite(h_fixed))):
        raise ValueError("weights contain non-finite entries")
    state.C = C_fixed.copy()
    state.h = h_fixed.copy()
    state.frozen = bool(frozen)
    return state


@dataclass
class WeightSnapshot:
    C: np.ndarray
    h: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        m, n = self.C.shape
        d = {"m": m, "n": n, "C": [float(v) for v in self.C.ravel()], "h": [float(v) for v in self.h]}
        d.update(self.meta)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WeightSnapshot":
        m, n = int(d["m"]), int(d["n"])
        C = np.asarray(d["C"], dtype=np.float64)
        if C.size != m * n:
            raise DimensionError(f"snapshot declares {m}x{n} but carries {C.size} weights")
        h = np.asarray(d.get("h", [0.0] * m), dtype=np.float64)
        if h.size != m:
            raise DimensionError(f"snapshot declares m={m} but carries {h.size} thresholds")
        meta = {k: v for k, v in d.items() if k not in ("m", "n", "C", "h")}
        return cls(C.reshape(m, n), h, meta)

    @classmethod
    def of(cls, state: ControllerState, **meta) -> "WeightSnapshot":
        return cls(state.C.copy(), state.h.copy(), dict(meta))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "WeightSnapshot":
        return cls.from_dict(json.loads(Path(path).read_text()))
