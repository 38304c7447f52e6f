"""Linear inverse models, the extrinsic signal and delayed sensor channels."""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

RIDGE_LAMBDA = 1e-6

# Hexapod stand-in layout: legs front-to-hind, left side first. Each leg has a
# coxa forward/backward joint (alpha), a coxa up/down joint (beta) and a
# femur-tibia joint (gamma); joint index = 3 * leg + {0, 1, 2}.
HEXAPOD_LEGS = ("L1", "L2", "L3", "R1", "R2", "R3")
ALPHA, BETA, GAMMA = 0, 1, 2
HEXAPOD_JOINTS = 18
HEXAPOD_DELAYED = tuple(3 * leg + j for leg in range(6) for j in (ALPHA, BETA))
HEXAPOD_SENSORS = HEXAPOD_JOINTS + len(HEXAPOD_DELAYED)


def joint(leg: str | int, part: int) -> int:
    leg = HEXAPOD_LEGS.index(leg) if isinstance(leg, str) else leg
    return 3 * leg + part


def delayed_channel(leg: str | int, part: int) -> int:
    """Sensor column of the delayed copy of a coxa joint."""
    return HEXAPOD_JOINTS + HEXAPOD_DELAYED.index(joint(leg, part))


def apply_model(M, x_prime_dot) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    v = np.asarray(x_prime_dot, dtype=np.float64)
    if M.ndim != 2 or v.shape != (M.shape[1],):
        raise ValueError(f"model {M.shape} cannot act on vector of shape {v.shape}")
    return M @ v


def extrinsic_signal(y_tilde_dot, y_dot) -> np.ndarray:
    """Model mismatch ``delta ydot = ydot_tilde - ydot``."""
    a = np.asarray(y_tilde_dot, dtype=np.float64)
    b = np.asarray(y_dot, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a - b


@dataclass
class ModelFit:
    M: np.ndarray
    residual: float
    rank_deficient: bool


def learn_model_offline(samples) -> ModelFit:
    """Least-squares fit of ``ydot ~ M xdot'`` from (xdot', ydot) pairs.

    Falls back to ridge regression with ``RIDGE_LAMBDA`` when the sensor
    derivatives do not span the sensor space.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    X = np.array([np.asarray(s[0], dtype=np.float64) for s in samples])
    Y = np.array([np.asarray(s[1], dtype=np.float64) for s in samples])
    n = X.shape[1]
    rank = np.linalg.matrix_rank(X)
    deficient = rank < n
    if deficient:
        warnings.warn(f"sample set has rank {rank} < {n}; using ridge fallback", RuntimeWarning)
        Mt = np.linalg.solve(X.T @ X + RIDGE_LAMBDA * np.eye(n), X.T @ Y)
    else:
        Mt = np.linalg.lstsq(X, Y, rcond=None)[0]
    residual = float(np.linalg.norm(X @ Mt - Y))
    return ModelFit(Mt.T.copy(), residual, deficient)


def build_guided_model(entries, m: int, n: int) -> np.ndarray:
    """Zero matrix with signed unit entries given as (row, col, sign) triples."""
    M = np.zeros((m, n))
    seen: dict[tuple[int, int], float] = {}
    for entry in entries:
        if isinstance(entry, dict):
            row, col, sign = entry["row"], entry["col"], entry["sign"]
        else:
            row, col, sign = entry
        row, col = int(row), int(col)
        if not (0 <= row < m and 0 <= col < n):
            raise IndexError(f"entry ({row}, {col}) outside {m}x{n} model")
        s = float(np.sign(sign))
        if s == 0:
            raise ValueError(f"entry ({row}, {col}) has zero sign")
        if seen.get((row, col), s) != s:
            raise ValueError(f"contradictory signs for entry ({row}, {col})")
        seen[(row, col)] = s
        M[row, col] = s
    return M


def _hexapod_common():
    entries = [(i, i, 1) for i in range(HEXAPOD_JOINTS)]
    # delayed forward/backward sensor drives the up/down motor of the same leg
    entries += [(joint(leg, BETA), delayed_channel(leg, ALPHA), 1) for leg in HEXAPOD_LEGS]
    return entries


def hexapod_m1_entries():
    entries = _hexapod_common()
    # anti-phase forward/backward motion of subsequent legs, no left-right links
    for side in ("L", "R"):
        for a, b in ((1, 2), (2, 3)):
            entries.append((joint(f"{side}{b}", ALPHA), joint(f"{side}{a}", ALPHA), -1))
    return entries


def hexapod_m2_entries():
    entries = _hexapod_common()
    for side in ("L", "R"):
        # fixed phase shift between subsequent legs: delayed hind sensor -> front motor
        for hind, front in ((3, 2), (2, 1)):
            entries.append((joint(f"{side}{front}", ALPHA), delayed_channel(f"{side}{hind}", ALPHA), 1))
    for k in (1, 2, 3):
        entries.append((joint(f"R{k}", ALPHA), joint(f"L{k}", ALPHA), -1))
        entries.append((joint(f"L{k}", ALPHA), joint(f"R{k}", ALPHA), -1))
    return entries


PRESETS = {
    "hexapod-m1": hexapod_m1_entries,
    "hexapod-m2": hexapod_m2_entries,
}


def preset_model(name: str, m: int | None = None, n: int | None = None) -> np.ndarray:
    if name == "identity":
        if m is None or n is None:
            raise ValueError("identity model needs m and n")
        return np.eye(m, n)
    try:
        entries = PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; known: identity, {', '.join(PRESETS)}") from None
    m = HEXAPOD_JOINTS if m is None else m
    n = HEXAPOD_SENSORS if n is None else n
    return build_guided_model(entries, m, n)


@dataclass(frozen=True)
class DelayedSensorConfig:
    indices: tuple[int, ...]
    delay: float

    def steps(self, dt: float) -> int:
        k = self.delay / dt
        steps = int(round(k))
        if self.delay < 0 or abs(k - steps) > 1e-9 * max(1.0, k):
            raise ValueError(f"delay {self.delay} s is not a non-negative multiple of dt={dt}")
        return steps


class DelayLine:
    """Appends delayed copies of selected base channels after the base channels.

    Before enough history exists the delayed channels repeat the first sample.
    """

    def __init__(self, config: DelayedSensorConfig | None, n_base: int, dt: float):
        self.n_base = n_base
        self.indices = np.array(config.indices if config else (), dtype=int)
        if np.any(self.indices < 0) or np.any(self.indices >= n_base):
            raise IndexError("delayed sensor index out of range")
        self.steps = config.steps(dt) if config else 0
        self._ring: deque[np.ndarray] = deque(maxlen=self.steps + 1)

    @property
    def n(self) -> int:
        return self.n_base + len(self.indices)

    def push(self, x_base) -> np.ndarray:
        x_base = np.asarray(x_base, dtype=np.float64)
        if not self._ring:
            self._ring.extend([x_base.copy()] * (self.steps + 1))
        else:
            self._ring.append(x_base.copy())
        if not len(self.indices):
            return x_base.copy()
        return np.concatenate([x_base, self._ring[0][self.indices]])
