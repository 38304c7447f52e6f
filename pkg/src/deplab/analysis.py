"""Post-hoc analyses: loop spectra, Hebb-state residuals, rotation checks,
phase relations, step patterns and weight clustering."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import subspace_angles
from scipy.signal import detrend

NONZERO_REL = 1e-6  # eigenvalue counts as nonzero above this fraction of the largest modulus
N_LEADING = 3
PERIOD_MIN_CORR = 0.5  # autocorrelation a repeat must reach to count as periodic
PEAK_TO_MEDIAN = 50.0  # spectral peak over median power below which a signal is not oscillating
GROUP_TOL = 0.08  # gait template tolerance, fraction of a cycle


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return w if w.ndim else float(w)


# ---------------------------------------------------------------- spectrum

@dataclass
class SpectrumSample:
    time: float
    eigenvalues: np.ndarray
    vectors: np.ndarray  # columns: eigenvectors of the leading eigenvalues

    def nonzero_count(self, rel: float = NONZERO_REL) -> int:
        mod = np.abs(self.eigenvalues)
        top = mod.max() if mod.size else 0.0
        if top == 0.0:
            return 0
        return int(np.count_nonzero(mod > rel * top))

    def leading_subspace(self) -> np.ndarray:
        """Real basis of the leading eigen-direction (a plane for a complex pair)."""
        v = self.vectors[:, 0]
        if self.eigenvalues[0].imag != 0.0:
            return np.stack([v.real, v.imag], axis=1)
        return v.real[:, None]


def loop_matrix(M, C) -> np.ndarray:
    """Square loop matrix ``R = M C``.

    With delayed channels the sensor space is larger than the motor space; the
    model's base columns compose with ``C`` and the rows of the delayed channels
    are zero, so ``R`` is n x n.
    """
    M = np.asarray(M, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if M.shape != C.shape:
        raise ValueError(f"model {M.shape} and weights {C.shape} must have the same shape")
    m, n = C.shape
    if n < m:
        raise ValueError(f"cannot form a square loop matrix with fewer sensors ({n}) than motors ({m})")
    R = np.zeros((n, n))
    R[:m] = M[:, :m] @ C
    return R


def _sorted_eig(R: np.ndarray):
    w, V = np.linalg.eig(R)
    w = w.astype(np.complex128)
    order = np.lexsort((-w.imag, -w.real, -np.abs(w)))
    return w[order], V[:, order].astype(np.complex128)


def spectrum(M, C, time: float = 0.0, leading: int = N_LEADING) -> SpectrumSample:
    R = loop_matrix(M, C)
    if not np.all(np.isfinite(R)):
        raise ValueError("non-finite entries in loop matrix")
    w, V = _sorted_eig(R)
    return SpectrumSample(float(time), w, V[:, :leading].copy())


def principal_angle(A, B) -> float:
    """Largest principal angle between the column spans of A and B."""
    return float(np.max(subspace_angles(np.asarray(A), np.asarray(B))))


def eigenvector_rotation(before: SpectrumSample, after: SpectrumSample) -> float:
    return principal_angle(before.leading_subspace(), after.leading_subspace())


# ---------------------------------------------------------------- Hebb state

def hebb_residual(C, x, alpha: float) -> float:
    """Stationarity defect ``|x - alpha C x| + | |x|^2 - 1/alpha |``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    C = np.asarray(C, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return float(np.linalg.norm(x - alpha * (C @ x)) + abs(x @ x - 1.0 / alpha))


# ---------------------------------------------------------------- rotation self-consistency

@dataclass
class RotationCheck:
    identity_defect: float
    rotation_defect: float
    period: float  # seconds, nan when no repeat was found
    periodic: bool


def detect_period(signal, dt: float) -> int | None:
    """Period in samples from the first strong autocorrelation repeat, or None."""
    s = np.asarray(signal, dtype=np.float64)
    s = s - s.mean()
    n = s.size
    if n < 8 or not np.any(s):
        return None
    full = np.correlate(s, s, mode="full")[n - 1:]
    r = full / (np.arange(n, 0, -1) * (full[0] / n))
    half = n // 2
    neg = np.flatnonzero(r[1:half] < 0)
    if not neg.size:
        return None
    start = neg[0] + 1
    seg = r[start:half]
    if seg.size < 3:
        return None
    peaks = np.flatnonzero((seg[1:-1] >= seg[:-2]) & (seg[1:-1] >= seg[2:])) + 1
    for p in peaks:
        if seg[p] > PERIOD_MIN_CORR:
            return int(start + p)
    return None


def identity_defect(xdot) -> float:
    """Relative distance of the second moment of ``xdot`` from a scaled identity."""
    D = np.asarray(xdot, dtype=np.float64)
    S = D.T @ D / len(D)
    norm = np.linalg.norm(S)
    if norm == 0.0:
        return math.nan
    d = S.shape[0]
    return float(np.linalg.norm(S - np.trace(S) / d * np.eye(d)) / norm)


def rotation_defect(C, M=None) -> float:
    """Relative residual of the best fit ``C ~ M (p I + q J)`` in the first two dimensions."""
    C = np.asarray(C, dtype=np.float64)[:2, :2]
    M = np.eye(2) if M is None else np.asarray(M, dtype=np.float64)[:2, :2]
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    A = np.stack([M.ravel(), (M @ J).ravel()], axis=1)
    coef = np.linalg.lstsq(A, C.ravel(), rcond=None)[0]
    norm = np.linalg.norm(C)
    if norm == 0.0:
        return math.nan
    return float(np.linalg.norm(A @ coef - C.ravel()) / norm)


def rotation_consistency(x, dt: float, C=None, M=None) -> RotationCheck:
    """Rotation self-consistency of a 2-D sensor trajectory ``x`` (samples x channels).

    The second moment of the sensor derivative is taken over the whole periods
    that fit at the end of the window; with ``C`` given its distance from a
    scaled rotation composed with ``M`` is reported too.
    """
    x = np.asarray(x, dtype=np.float64)
    P = detect_period(x[:, 0], dt)
    if P is None:
        return RotationCheck(math.nan, math.nan, math.nan, False)
    xdot = np.diff(x, axis=0) / dt
    k = (len(xdot) // P) * P
    idef = identity_defect(xdot[len(xdot) - k:])
    rdef = rotation_defect(C, M) if C is not None else math.nan
    return RotationCheck(idef, rdef, P * dt, True)


# ---------------------------------------------------------------- phase relations

@dataclass
class PhaseMatrix:
    phases: np.ndarray  # phases[i, j] = phase of i minus phase of j, in (-pi, pi]
    frequency: float  # Hz
    defined: np.ndarray  # False where either signal is not oscillating
    labels: list = field(default_factory=list)

    def deviation(self, other: "PhaseMatrix") -> float:
        """Largest wrapped entry difference over entries defined in both."""
        both = self.defined & other.defined
        if not both.any():
            return math.nan
        return float(np.max(np.abs(wrap_angle(self.phases - other.phases))[both]))

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "frequency": self.frequency,
                "phases": [[float(v) if d else None for v, d in zip(row, drow)]
                           for row, drow in zip(self.phases, self.defined)]}


def _peak_frequency(power: np.ndarray, freqs: np.ndarray) -> float:
    k = int(np.argmax(power[1:])) + 1
    if 1 <= k < len(power) - 1 and np.all(power[k - 1:k + 2] > 0):
        a, b, c = np.log(power[k - 1:k + 2])
        denom = a - 2 * b + c
        delta = 0.5 * (a - c) / denom if denom != 0 else 0.0
        return float(freqs[k] + delta * (freqs[1] - freqs[0]))
    return float(freqs[k])


def _lag(a: np.ndarray, b: np.ndarray, max_lag: int) -> float:
    """Lag (samples, sub-sample refined) maximizing sum_t a_t b_{t+L}."""
    n = a.size
    full = np.correlate(b, a, mode="full")  # index n-1+L holds sum_t a_t b_{t+L}
    lo, hi = max(0, n - 1 - max_lag), min(full.size, n + max_lag)
    seg = full[lo:hi]
    i = int(np.argmax(seg))
    shift = 0.0
    if 0 < i < seg.size - 1:
        denom = seg[i - 1] - 2 * seg[i] + seg[i + 1]
        if denom != 0:
            shift = 0.5 * (seg[i - 1] - seg[i + 1]) / denom
    return lo + i + shift - (n - 1)


def phase_matrix(signals, dt: float, labels=None) -> PhaseMatrix:
    """Pairwise phase differences at the common dominant frequency.

    The frequency is the interpolated peak of the summed (Hann-windowed)
    power spectra; each pairwise phase comes from the cross-correlation lag
    nearest zero, ``2 pi f lag``.
    """
    X = np.asarray(signals, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("signals must be samples x channels")
    T, k = X.shape
    X = detrend(X, axis=0, type="linear")  # a drift is not an oscillation
    win = np.hanning(T)
    power = np.abs(np.fft.rfft(X * win[:, None], axis=0)) ** 2
    freqs = np.fft.rfftfreq(T, dt)
    ok = np.zeros(k, dtype=bool)
    for j in range(k):
        p = power[1:, j]
        if p.size and np.std(X[:, j]) > 1e-9 and p.max() > PEAK_TO_MEDIAN * np.median(p):
            ok[j] = True
    phases = np.zeros((k, k))
    defined = np.outer(ok, ok)
    np.fill_diagonal(defined, True)
    if not ok.any():
        return PhaseMatrix(phases, math.nan, defined, list(labels or range(k)))
    total = (power[:, ok] / power[1:, ok].max(axis=0)).sum(axis=1)
    f = _peak_frequency(total, freqs)
    max_lag = int(math.ceil(0.5 / (f * dt))) + 2
    for i in range(k):
        for j in range(i + 1, k):
            if defined[i, j]:
                phases[i, j] = wrap_angle(2 * np.pi * f * _lag(X[:, i], X[:, j], max_lag) * dt)
                phases[j, i] = wrap_angle(-phases[i, j])
    return PhaseMatrix(phases, f, defined, list(labels or range(k)))


# ---------------------------------------------------------------- step patterns

@dataclass
class StepPattern:
    intervals: list  # per leg: list of (down_start, down_end) in seconds
    duration: float
    label: str | None = None

    def to_rows(self):
        for leg, ivs in enumerate(self.intervals):
            for a, b in ivs:
                yield leg, a, b


def contact_intervals(contacts, dt: float) -> list:
    C = np.asarray(contacts, dtype=bool)
    out = []
    for j in range(C.shape[1]):
        c = np.concatenate([[False], C[:, j], [False]]).astype(np.int8)
        d = np.diff(c)
        starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
        out.append([(float(a * dt), float(b * dt)) for a, b in zip(starts, ends)])
    return out


def _circular_groups(phases: np.ndarray, tol: float):
    """Split cycle fractions into groups separated by gaps wider than ``2 tol``."""
    order = np.argsort(phases)
    p = phases[order]
    gaps = np.diff(np.concatenate([p, [p[0] + 1.0]]))
    if np.all(gaps <= 2 * tol):
        return [list(order)]
    start = (int(np.argmax(gaps)) + 1) % len(p)
    groups, cur = [], [order[start]]
    for s in range(1, len(p)):
        i = (start + s) % len(p)
        if gaps[(i - 1) % len(p)] > 2 * tol:
            groups.append(cur)
            cur = []
        cur.append(order[i])
    groups.append(cur)
    return groups


def _group_phase(phases, group):
    return float(np.angle(np.mean(np.exp(2j * np.pi * phases[group]))) / (2 * np.pi)) % 1.0


def classify_gait(intervals, tol: float = GROUP_TOL) -> str | None:
    """Label a step pattern ``tripod`` (two groups of 3, half a cycle apart) or
    ``wave`` (three groups of 2, a third of a cycle apart)."""
    onsets = [np.array([a for a, _ in ivs if a > 0.0]) for ivs in intervals]
    if len(onsets) < 2 or any(o.size < 2 for o in onsets):
        return None
    period = float(np.median(np.concatenate([np.diff(o) for o in onsets])))
    if not period > 0:
        return None
    phases = np.array([_group_phase(o / period, np.arange(o.size)) for o in onsets])
    groups = _circular_groups(phases, tol)
    sizes = sorted(len(g) for g in groups)
    centers = sorted(_group_phase(phases, g) for g in groups)
    spacing = np.diff(centers + [centers[0] + 1.0])
    if sizes == [3, 3] and np.all(np.abs(spacing - 0.5) < tol):
        return "tripod"
    if sizes == [2, 2, 2] and np.all(np.abs(spacing - 1.0 / 3.0) < tol):
        return "wave"
    return None


def extract_step_pattern(contacts, dt: float) -> StepPattern:
    C = np.asarray(contacts, dtype=bool)
    if C.ndim != 2:
        raise ValueError("contacts must be samples x legs")
    intervals = contact_intervals(C, dt)
    return StepPattern(intervals, C.shape[0] * dt, classify_gait(intervals))


# ---------------------------------------------------------------- clustering

@dataclass
class ClusterResult:
    centers: list  # weight matrices, same shape as the snapshots
    labels: np.ndarray
    inertia: float


def cluster_weights(snapshots, k: int, seed: int = 0) -> ClusterResult:
    """k-means (k-means++ seeding, fixed seed) over flattened weight matrices.

    Clusters are numbered in order of their first member in ``snapshots``.
    """
    from sklearn.cluster import KMeans

    mats = [np.asarray(s, dtype=np.float64) for s in snapshots]
    if not mats:
        raise ValueError("no snapshots to cluster")
    if not 1 <= k <= len(mats):
        raise ValueError(f"k={k} must be between 1 and the number of snapshots ({len(mats)})")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise ValueError("snapshots differ in shape")
    X = np.stack([m.ravel() for m in mats])
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, random_state=seed).fit(X)
    first = {}
    for lab in km.labels_:
        first.setdefault(int(lab), len(first))
    relabel = np.array([first[int(lab)] for lab in km.labels_])
    order = sorted(first, key=first.get)
    centers = [km.cluster_centers_[c].reshape(shape).copy() for c in order]
    return ClusterResult(centers, relabel, float(km.inertia_))
