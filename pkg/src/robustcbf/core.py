"""Agent states, control-affine dynamics and disturbance bookkeeping.

States are stored as ``[p, v, z]`` with ``p`` and ``v`` two-dimensional.
The robot evolves as ``x' = f(x) + g(x) u + d`` and every other agent as
``x' = f_i(x) + d_i``; ``d`` only acts on the position and velocity blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

POS = slice(0, 2)
VEL = slice(2, 4)


class NonFiniteInput(ValueError):
    """Raised when a state, control or disturbance contains inf/nan."""


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name} has non-finite entries: {arr!r}")


@dataclass(frozen=True)
class AgentState:
    """Position, velocity and extra states of one agent at one step."""

    p: np.ndarray
    v: np.ndarray
    z: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(-1)
        v = np.asarray(self.v, dtype=float).reshape(-1)
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if p.shape != (2,) or v.shape != (2,):
            raise ValueError(f"p and v must be 2-vectors, got {p.shape}, {v.shape}")
        for name, arr in (("p", p), ("v", v), ("z", z)):
            _check_finite(name, arr)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "z", z)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.z])

    @property
    def dim(self) -> int:
        return 4 + self.z.size

    @classmethod
    def from_vector(cls, x) -> "AgentState":
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size < 4:
            raise ValueError(f"state vector needs at least 4 entries, got {x.size}")
        return cls(x[POS], x[VEL], x[4:])


@dataclass(frozen=True)
class Disturbance:
    """Additive disturbance on the position and velocity blocks."""

    d_p: np.ndarray
    d_v: np.ndarray

    def __post_init__(self):
        d_p = np.asarray(self.d_p, dtype=float).reshape(2)
        d_v = np.asarray(self.d_v, dtype=float).reshape(2)
        _check_finite("d_p", d_p)
        _check_finite("d_v", d_v)
        object.__setattr__(self, "d_p", d_p)
        object.__setattr__(self, "d_v", d_v)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.d_p, self.d_v])

    @classmethod
    def from_vector(cls, d) -> "Disturbance":
        d = np.asarray(d, dtype=float).reshape(4)
        return cls(d[POS], d[VEL])

    @classmethod
    def zero(cls) -> "Disturbance":
        return cls(np.zeros(2), np.zeros(2))

    def padded(self, dim: int) -> np.ndarray:
        """Disturbance as a full state-dimension vector (zero on ``z``)."""
        out = np.zeros(dim)
        out[:4] = self.vector
        return out


StateMap = Callable[[np.ndarray], np.ndarray]
GainMap = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RobotDynamics:
    """Known part of the robot model ``x' = f(x) + g(x) u``.

    ``f`` maps a state vector to the drift part of the next state and ``g``
    maps it to an ``(n, m)`` input gain whose position rows must vanish.
    """

    f: StateMap
    g: GainMap
    u_max: float
    dt: float

    def g_v(self, x: np.ndarray) -> np.ndarray:
        return self.g(x)[VEL]


@dataclass(frozen=True)
class AgentModel:
    """The robot's nominal model ``x' = f_i(x)`` of another agent."""

    f: StateMap
    dt: float = 0.1


DynamicsLike = Union[RobotDynamics, AgentModel]


def drag_double_integrator(
    dt: float = 0.1, c_drag: float = 0.1, u_max: float = 10.0, gain_bump: float = 0.2
) -> RobotDynamics:
    """Double integrator with linear drag and a speed-dependent input gain.

    ``f_p = p + dt v``, ``f_v = v - c_drag dt v`` and
    ``g_v = dt (1 + gain_bump / (1 + |v|^2)) I``, so ``g_v`` is invertible
    everywhere with singular values in ``dt * [1, 1 + gain_bump]``.
    """

    def f(x):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        out[POS] = x[POS] + dt * x[VEL]
        out[VEL] = x[VEL] * (1.0 - c_drag * dt)
        return out

    def g(x):
        x = np.asarray(x, dtype=float)
        v = x[VEL]
        s = 1.0 + gain_bump / (1.0 + v @ v)
        out = np.zeros((x.size, 2))
        out[VEL] = dt * s * np.eye(2)
        return out

    return RobotDynamics(f=f, g=g, u_max=float(u_max), dt=float(dt))


def constant_velocity(dt: float = 0.1) -> AgentModel:
    """Nominal agent model: keeps its velocity and integrates position."""

    def f(x):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        out[POS] = x[POS] + dt * x[VEL]
        return out

    return AgentModel(f=f, dt=float(dt))


def _as_vector(x) -> np.ndarray:
    if isinstance(x, AgentState):
        return x.vector
    x = np.asarray(x, dtype=float).reshape(-1)
    _check_finite("state", x)
    return x


def _as_disturbance(d, dim: int) -> np.ndarray:
    if isinstance(d, Disturbance):
        return d.padded(dim)
    d = np.asarray(d, dtype=float).reshape(-1)
    _check_finite("disturbance", d)
    if d.size == dim:
        return d
    if d.size == 4:
        out = np.zeros(dim)
        out[:4] = d
        return out
    raise ValueError(f"disturbance must have 4 or {dim} entries, got {d.size}")


def step_robot(dyn: RobotDynamics, x, u, d=None) -> AgentState:
    """Advance the robot one step: ``f(x) + g(x) u + d``."""
    xv = _as_vector(x)
    u = np.asarray(u, dtype=float).reshape(-1)
    _check_finite("u", u)
    if np.linalg.norm(u) > dyn.u_max + 1e-9:
        raise ValueError(f"|u| = {np.linalg.norm(u):.6g} exceeds u_max = {dyn.u_max}")
    dd = np.zeros(xv.size) if d is None else _as_disturbance(d, xv.size)
    return AgentState.from_vector(dyn.f(xv) + dyn.g(xv) @ u + dd)


def step_agent(model: AgentModel, x, d=None) -> AgentState:
    """Advance another agent one step: ``f_i(x) + d_i``."""
    xv = _as_vector(x)
    dd = np.zeros(xv.size) if d is None else _as_disturbance(d, xv.size)
    return AgentState.from_vector(model.f(xv) + dd)


def extract_disturbance(
    model: DynamicsLike, x_t, x_next, u: Optional[np.ndarray] = None
) -> Disturbance:
    """Residual of an observed transition against the known model.

    For the robot ``d = x' - f(x) - g(x) u``; for an agent ``d = x' - f_i(x)``.
    Only the position and velocity blocks are returned.
    """
    xv = _as_vector(x_t)
    xn = _as_vector(x_next)
    pred = model.f(xv)
    if isinstance(model, RobotDynamics):
        uu = np.zeros(2) if u is None else np.asarray(u, dtype=float).reshape(-1)
        _check_finite("u", uu)
        pred = pred + model.g(xv) @ uu
    resid = xn - pred
    return Disturbance(resid[POS], resid[VEL])
