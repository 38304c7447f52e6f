"""Deterministic fixed-timestep plants closing the sensorimotor loop.

Every plant exposes the same surface to the simulation loop:

* ``sensors()`` returns the current sensor vector (clamped to [-1, 1]);
* ``step(y)`` applies a motor command for one timestep; its effect is first
  visible in the next ``sensors()`` call;
* ``apply_perturbation(p)`` starts a perturbation at the current step.

Multi-agent plants split their sensor and motor vectors into contiguous
per-agent blocks described by ``agent_sensors`` and ``agent_motors``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .plasticity import as_enum

# semi-implicit Euler on  a*x'' = -k x - c x'  is stable iff k/a dt^2 + 2 c/a dt < 4
STABILITY_LIMIT = 4.0


class PerturbationKind(str, Enum):
    KICK = "kick"
    TORQUE = "torque"
    CLAMP = "clamp"


@dataclass(frozen=True)
class Perturbation:
    kind: PerturbationKind
    time: float
    index: int = 0
    magnitude: float = 0.0
    duration: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", as_enum(PerturbationKind, self.kind))
        if not math.isfinite(self.magnitude):
            raise ValueError("perturbation magnitude must be finite")
        if self.time < 0 or self.duration < 0:
            raise ValueError("perturbation time and duration must be non-negative")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "time": self.time, "index": self.index,
                "magnitude": self.magnitude, "duration": self.duration}


class UnstableIntegrationError(ValueError):
    pass


def _check_stable(stiffness_over_inertia: float, damping_over_inertia: float, dt: float, what: str):
    bound = stiffness_over_inertia * dt * dt + 2.0 * damping_over_inertia * dt
    if not bound < STABILITY_LIMIT:
        raise UnstableIntegrationError(
            f"{what}: k*dt^2/J + 2*c*dt/J = {bound:.3g} >= {STABILITY_LIMIT}, explicit integration would diverge")


@dataclass
class _Active:
    p: Perturbation
    steps_left: int
    hold: float = 0.0


class Plant:
    dt: float
    n_sensors: int
    n_motors: int
    agent_sensors: list[slice]
    agent_motors: list[slice]

    def __init__(self, dt: float):
        self.dt = dt
        self._active: list[_Active] = []

    def _start(self, p: Perturbation, hold: float = 0.0):
        steps = max(1, int(round(p.duration / self.dt)))
        self._active.append(_Active(p, steps, hold))

    def _tick(self):
        for a in self._active:
            a.steps_left -= 1
        self._active = [a for a in self._active if a.steps_left > 0]

    def _torques(self, size: int) -> np.ndarray:
        tau = np.zeros(size)
        for a in self._active:
            if a.p.kind is PerturbationKind.TORQUE:
                tau[a.p.index] += a.p.magnitude
        return tau

    def _clamps(self):
        return [a for a in self._active if a.p.kind is PerturbationKind.CLAMP]

    def contacts(self) -> np.ndarray | None:
        return None

    def observables(self) -> dict:
        """Plant quantities worth logging beside the sensors."""
        return {}

    def energy(self) -> float:
        raise NotImplementedError


class LinearDelayPlant(Plant):
    """Idealized loop ``x_{t+1} = U(theta) y_t``; ``theta=0`` is a pure one-step lag.

    ``theta`` rotates the first two channels. Kicks displace one sensor for the
    current step, torques add a constant offset for their duration, clamps hold
    a channel at its current value.
    """

    def __init__(self, n: int, dt: float = 0.02, theta: float = 0.0, x0=None):
        super().__init__(dt)
        self.n_sensors = self.n_motors = int(n)
        self.agent_sensors = [slice(0, self.n_sensors)]
        self.agent_motors = [slice(0, self.n_motors)]
        self.theta = float(theta)
        if self.theta and self.n_sensors < 2:
            raise ValueError("rotation variant needs at least two channels")
        self.U = np.eye(self.n_sensors)
        if self.theta:
            c, s = math.cos(self.theta), math.sin(self.theta)
            self.U[:2, :2] = [[c, -s], [s, c]]
        self.x = np.zeros(self.n_sensors) if x0 is None else np.clip(np.asarray(x0, dtype=np.float64), -1, 1)

    def sensors(self) -> np.ndarray:
        return self.x.copy()

    def step(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        x = self.U @ y if self.theta else y.copy()
        x = x + self._torques(self.n_sensors)
        for a in self._clamps():
            x[a.p.index] = a.hold
        self.x = np.clip(x, -1.0, 1.0)
        self._tick()
        return self.sensors()

    def apply_perturbation(self, p: Perturbation):
        if p.kind is PerturbationKind.KICK:
            self.x[p.index] = np.clip(self.x[p.index] + p.magnitude, -1.0, 1.0)
        else:
            self._start(p, hold=self.x[p.index])

    def energy(self) -> float:
        return float(0.5 * self.x @ self.x)


def coupling_matrix(n: int, topology: str = "chain", strength: float = 0.0) -> np.ndarray:
    """Symmetric coupling ``K`` with torque ``sum_j K_ij (theta_j - theta_i)``.

    ``chain`` links index neighbours; ``hexapod`` links the forward/backward
    joints of subsequent legs on each side and of opposite legs.
    """
    K = np.zeros((n, n))
    if strength == 0.0 or topology == "none":
        return K
    if topology == "chain":
        for i in range(n - 1):
            K[i, i + 1] = K[i + 1, i] = strength
    elif topology == "hexapod":
        if n != 18:
            raise ValueError("hexapod coupling needs 18 joints")
        alpha = [3 * leg for leg in range(6)]
        pairs = [(0, 1), (1, 2), (3, 4), (4, 5), (0, 3), (1, 4), (2, 5)]
        for a, b in pairs:
            K[alpha[a], alpha[b]] = K[alpha[b], alpha[a]] = strength
    else:
        raise ValueError(f"unknown coupling topology {topology!r}")
    return K


class JointChain(Plant):
    """Compliant position-controlled joints integrated with semi-implicit Euler.

    ``J theta'' = k (y - theta) - c theta' + sum_j K_ij (theta_j - theta_i) + tau_ext``
    """

    def __init__(self, n: int = 18, dt: float = 0.02, stiffness: float = 20.0, damping: float = 1.0,
                 inertia: float = 1.0, coupling=None, coupling_topology: str = "chain",
                 coupling_strength: float = 0.0, contact_joints=None, contact_level: float = 0.0,
                 theta0=None):
        super().__init__(dt)
        self.n_sensors = self.n_motors = int(n)
        self.agent_sensors = [slice(0, self.n_sensors)]
        self.agent_motors = [slice(0, self.n_motors)]
        self.k = float(stiffness)
        self.c = float(damping)
        self.J = float(inertia)
        if coupling is None:
            coupling = coupling_matrix(self.n_sensors, coupling_topology, coupling_strength)
        self.K = np.asarray(coupling, dtype=np.float64)
        if self.K.shape != (self.n_sensors, self.n_sensors):
            raise ValueError("coupling matrix shape mismatch")
        if not (self.k > 0 and self.c >= 0 and self.J > 0):
            raise ValueError("stiffness and inertia must be positive, damping non-negative")
        # Gershgorin bound on the stiffness matrix k I + L(K)
        worst = self.k + 2.0 * np.max(np.sum(np.abs(self.K), axis=1))
        _check_stable(worst / self.J, self.c / self.J, dt, "joint chain")
        self.K_rowsum = self.K.sum(axis=1)
        self.theta = np.zeros(self.n_sensors) if theta0 is None else np.asarray(theta0, dtype=np.float64).copy()
        self.omega = np.zeros(self.n_sensors)
        self.contact_joints = np.array([] if contact_joints is None else contact_joints, dtype=int)
        self.contact_level = float(contact_level)

    def sensors(self) -> np.ndarray:
        return np.clip(self.theta, -1.0, 1.0)

    def contacts(self) -> np.ndarray | None:
        if not len(self.contact_joints):
            return None
        return self.theta[self.contact_joints] < self.contact_level

    def step(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        th, om = self.theta, self.omega
        torque = self.k * (y - th) - self.c * om + (self.K @ th - self.K_rowsum * th)
        torque = torque + self._torques(self.n_sensors)
        om = om + (self.dt / self.J) * torque
        th = th + self.dt * om
        for a in self._clamps():
            th[a.p.index] = a.hold
            om[a.p.index] = 0.0
        self.theta, self.omega = th, om
        self._tick()
        return self.sensors()

    def apply_perturbation(self, p: Perturbation):
        if p.kind is PerturbationKind.KICK:
            self.omega[p.index] += p.magnitude
        else:
            self._start(p, hold=self.theta[p.index])

    def energy(self) -> float:
        th = self.theta
        spring = 0.5 * self.k * th @ th + 0.25 * np.sum(self.K * (th[:, None] - th[None, :]) ** 2)
        return float(0.5 * self.J * self.omega @ self.omega + spring)


class CrankWheel(Plant):
    """A massive wheel turned through cranks by one or more agents.

    Each agent has two compliant joints whose readings are the crank-handle
    position relative to its rest position,
    ``x = r (cos(phi + a) - cos a, sin(phi + a) - sin a)`` with ``a`` the
    agent's crank offset. A motor command is a set-point offset from the
    current handle position, so the compliant joints push the handle with
    force ``k y`` (optionally capped at ``max_force``) and a zero command
    exerts no force. The wheel integrates
    ``J_w omega' = sum_agents k y . dx/dphi - b omega + tau_ext``.
    """

    def __init__(self, agents: int = 1, dt: float = 0.02, inertia: float = 1.0, friction: float = 0.1,
                 stiffness: float = 5.0, radius: float = 0.5, max_force: float | None = None,
                 phi0: float = 0.0, omega0: float = 0.0, offsets=None):
        super().__init__(dt)
        self.agents = int(agents)
        if self.agents < 1:
            raise ValueError("need at least one agent")
        self.n_sensors = self.n_motors = 2 * self.agents
        self.agent_sensors = [slice(2 * a, 2 * a + 2) for a in range(self.agents)]
        self.agent_motors = list(self.agent_sensors)
        self.J = float(inertia)
        self.b = float(friction)
        self.k = float(stiffness)
        self.r = float(radius)
        self.max_force = max_force
        if not (self.J > 0 and self.b >= 0 and self.k > 0 and 0 < self.r <= 0.5):
            raise ValueError("invalid crank wheel parameters (need J>0, b>=0, k>0, 0<r<=0.5)")
        if offsets is None:
            offsets = [2 * math.pi * a / self.agents for a in range(self.agents)]
        self.offsets = np.asarray(offsets, dtype=np.float64)
        # |d torque / d phi| <= k r |y| with |y| <= sqrt 2 per agent
        _check_stable(self.agents * self.k * self.r * math.sqrt(2) / self.J,
                      self.b / self.J, dt, "crank wheel")
        self.phi = float(phi0)
        self.omega = float(omega0)

    def _handles(self, phi: float):
        ang = phi + self.offsets
        pos = self.r * np.stack([np.cos(ang) - np.cos(self.offsets), np.sin(ang) - np.sin(self.offsets)], axis=1)
        tangent = self.r * np.stack([-np.sin(ang), np.cos(ang)], axis=1)
        return pos, tangent

    def sensors(self) -> np.ndarray:
        pos, _ = self._handles(self.phi)
        return np.clip(pos.ravel(), -1.0, 1.0)

    def step(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(self.agents, 2)
        _, tangent = self._handles(self.phi)
        force = self.k * y
        if self.max_force is not None:
            mag = np.linalg.norm(force, axis=1, keepdims=True)
            force = force * np.minimum(1.0, self.max_force / np.maximum(mag, 1e-300))
        torque = float(np.sum(force * tangent)) - self.b * self.omega + float(self._torques(1)[0])
        omega = self.omega + (self.dt / self.J) * torque
        if self._clamps():
            omega = 0.0
        self.omega = omega
        self.phi = self.phi + self.dt * omega
        self._tick()
        return self.sensors()

    def apply_perturbation(self, p: Perturbation):
        if p.kind is PerturbationKind.KICK:
            self.omega += p.magnitude
        else:
            self._start(p.__class__(p.kind, p.time, 0, p.magnitude, p.duration))

    def observables(self) -> dict:
        return {"phi": self.phi, "omega": self.omega}

    def energy(self) -> float:
        return float(0.5 * self.J * self.omega ** 2)


def step_linear_delay_plant(plant: LinearDelayPlant, y) -> np.ndarray:
    return plant.step(y)


def step_joint_chain(plant: JointChain, y) -> np.ndarray:
    return plant.step(y)


def step_crank_wheel(plant: CrankWheel, y_per_agent) -> list[np.ndarray]:
    x = plant.step(np.concatenate([np.asarray(y, dtype=np.float64) for y in y_per_agent]))
    return [x[s] for s in plant.agent_sensors]


def apply_perturbation(plant: Plant, p: Perturbation):
    plant.apply_perturbation(p)


PLANTS = {
    "linear": LinearDelayPlant,
    "chain": JointChain,
    "wheel": CrankWheel,
}


def make_plant(spec: dict, dt: float) -> Plant:
    spec = dict(spec)
    kind = spec.pop("type")
    try:
        cls = PLANTS[kind]
    except KeyError:
        raise ValueError(f"unknown plant type {kind!r}; known: {', '.join(PLANTS)}") from None
    return cls(dt=dt, **spec)
