"""Multi-agent barrier function, its discrete-time condition and the
linearised robust lower bound used by the quadratic program.

The barrier for one robot/agent pair is

    h = dp.dv / |dp| + sqrt(a_max (|dp| - D_s))

and one step is safe when ``h(x') + (eta - 1) h(x) >= 0``. Stacked
disturbances are ordered ``[d_p, d_v, d_p^h, d_v^h]`` (robot first).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bounds import ZetaBounds
from .core import POS, VEL, AgentModel, RobotDynamics

P_DIM = 8
M_DIM = 2


class CoincidentAgents(ValueError):
    """Relative position is exactly zero; the barrier is undefined."""


class InfeasibleGeometry(ValueError):
    """Separation too small for the robust bound to be built."""


class AssumptionViolated(ValueError):
    """Actuation cannot dominate drift plus disturbance (non-positive a_max)."""

    def __init__(self, msg: str, value: float):
        super().__init__(msg)
        self.value = value


@dataclass(frozen=True)
class BarrierParams:
    d_s: float = 1.0
    eta: float = 0.5
    a_max_floor: float = 0.0

    def __post_init__(self):
        if not self.d_s > 0:
            raise ValueError("d_s must be positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


@dataclass(frozen=True)
class CbcCoefficients:
    """Data of ``CBC >= k_c - h1.d - u^T h2 d - h3.u``."""

    k_c: float
    h1: np.ndarray  # (P,)
    h2: np.ndarray  # (M, P)
    h3: np.ndarray  # (M,)

    def lower_bound(self, u, d) -> float:
        u = np.asarray(u, float)
        d = np.asarray(d, float)
        return float(self.k_c - self.h1 @ d - u @ self.h2 @ d - self.h3 @ u)


def h_value(dp, dv, a_max: float, d_s: float) -> float:
    """Barrier value for relative position ``dp`` and velocity ``dv``.

    Inside the margin (``|dp| < d_s``) the root term changes sign, giving a
    finite negative value for logging near misses.
    """
    dp = np.asarray(dp, float)
    dv = np.asarray(dv, float)
    r = math.hypot(dp[0], dp[1])
    if r == 0.0:
        raise CoincidentAgents("relative position is zero")
    closing = float(dp @ dv) / r
    gap = r - d_s
    if gap >= 0:
        return closing + math.sqrt(a_max * gap)
    return closing - math.sqrt(a_max * -gap)


def relative(x, x_h):
    x = np.asarray(x, float)
    x_h = np.asarray(x_h, float)
    return x[POS] - x_h[POS], x[VEL] - x_h[VEL]


def h_pair(x, x_h, a_max: float, params: BarrierParams) -> float:
    dp, dv = relative(x, x_h)
    return h_value(dp, dv, a_max, params.d_s)


def next_states(dyn: RobotDynamics, model_h: AgentModel, x, x_h, u, d):
    x = np.asarray(x, float)
    x_h = np.asarray(x_h, float)
    d = np.asarray(d, float)
    xn = dyn.f(x) + dyn.g(x) @ np.asarray(u, float)
    xn[:4] += d[:4]
    xhn = model_h.f(x_h).copy()
    xhn[:4] += d[4:8]
    return xn, xhn


def cbc_exact(dyn, model_h, x, x_h, u, d, a_max: float, params: BarrierParams) -> float:
    """Control barrier condition evaluated on the true one-step successor."""
    xn, xhn = next_states(dyn, model_h, x, x_h, u, d)
    dpn, dvn = relative(xn, xhn)
    if not np.any(dpn):
        raise CoincidentAgents("agents coincide at the next step")
    h_next = h_value(dpn, dvn, a_max, params.d_s)
    return h_next + (params.eta - 1.0) * h_pair(x, x_h, a_max, params)


def a_max_compute(
    dyn: RobotDynamics,
    model_h: AgentModel,
    x,
    x_h,
    zeta_v: float,
    zeta_v_h: float,
    u_max: float | None = None,
) -> float:
    """Guaranteed relative velocity change per step in any direction.

    ``sigma_min(g_v) u_max`` minus the worst drift of the relative velocity
    over the disturbance caps. Raises :class:`AssumptionViolated` when the
    result is not positive.
    """
    x = np.asarray(x, float)
    x_h = np.asarray(x_h, float)
    u_max = dyn.u_max if u_max is None else u_max
    s_min = float(np.linalg.svd(dyn.g_v(x), compute_uv=False)[-1])
    drift = dyn.f(x)[VEL] - model_h.f(x_h)[VEL] - (x[VEL] - x_h[VEL])
    a = s_min * u_max - (float(np.linalg.norm(drift)) + zeta_v + zeta_v_h)
    if not a > 0:
        raise AssumptionViolated(f"a_max = {a:.4g} is not positive", a)
    return a


def a_max_floor(dyn, model_h, states_robot, states_agent, u_max=None) -> float:
    """Smallest zero-disturbance ``a_max`` over sampled operating states."""
    vals = []
    for x, xh in zip(states_robot, states_agent):
        try:
            vals.append(a_max_compute(dyn, model_h, x, xh, 0.0, 0.0, u_max))
        except AssumptionViolated as exc:
            vals.append(exc.value)
    return float(min(vals))


def cbc_coefficients(
    dyn: RobotDynamics,
    model_h: AgentModel,
    x,
    x_h,
    zeta_r: ZetaBounds,
    zeta_h: ZetaBounds,
    a_max: float,
    params: BarrierParams,
    u_max: float | None = None,
    sign_safe: bool = True,
) -> CbcCoefficients:
    """Linear-in-``d`` lower bound of the barrier condition for one agent.

    ``h1``, ``h2`` and ``h3`` are the first-order terms of the expansion
    around the disturbance-free successor. The plain ``k_c`` divides
    sign-indefinite terms by a fixed end of the interval ``[r - zeta,
    r + zeta]`` that ``|dp_next|`` can take, which is not a lower bound
    when those terms have the other sign. With ``sign_safe`` (default)
    ``k_c`` is reduced by
    ``(1/(r - zeta) - 1/(r + zeta)) * (max|c_u| + max|c_d| + max|c_ud|)``,
    the largest possible error of that choice over ``|u| <= u_max`` and the
    caps. The term vanishes when there is no positional uncertainty.
    """
    x = np.asarray(x, float)
    x_h = np.asarray(x_h, float)
    u_max = dyn.u_max if u_max is None else u_max
    fx, fh = dyn.f(x), model_h.f(x_h)
    F = fx[POS] - fh[POS]
    B = fx[VEL] - fh[VEL]
    gv = dyn.g_v(x)
    r = float(np.linalg.norm(F))
    zs = zeta_r.zeta_p + zeta_h.zeta_p
    den_lo, den_hi = r - zs, r + zs
    dp_t, dv_t = relative(x, x_h)
    r_t = float(np.linalg.norm(dp_t))
    if not den_lo > 0:
        raise InfeasibleGeometry(f"predicted separation {r:.4g} within position caps {zs:.4g}")
    if den_lo - params.d_s < 0:
        raise InfeasibleGeometry(f"predicted separation {r:.4g} - caps inside margin")
    if r_t < params.d_s:
        raise InfeasibleGeometry(f"current separation {r_t:.4g} inside margin")

    h1 = np.concatenate([-B, -F, B, F]) / den_lo
    h2 = np.zeros((M_DIM, P_DIM))
    h2[:, 0:2] = -gv.T / den_lo
    h2[:, 4:6] = gv.T / den_lo
    h3 = -(gv.T @ F) / den_hi

    fb = float(F @ B)
    cross = (zeta_r.zeta_p * zeta_r.zeta_v + zeta_r.zeta_p * zeta_h.zeta_v
             + zeta_h.zeta_v * zeta_h.zeta_p + zeta_r.zeta_v * zeta_h.zeta_p)
    eta1 = params.eta - 1.0
    k_c = (
        min(fb / den_lo, fb / den_hi)
        + math.sqrt(a_max * (den_lo - params.d_s))
        + eta1 * math.sqrt(a_max * (r_t - params.d_s))
        + eta1 * float(dp_t @ dv_t) / r_t
        - cross / den_lo
    )
    if sign_safe and zs > 0:
        c_u = u_max * float(np.linalg.norm(gv.T @ F))
        c_d = float(np.linalg.norm(B)) * zs + r * (zeta_r.zeta_v + zeta_h.zeta_v)
        c_ud = u_max * float(np.linalg.norm(gv, 2)) * zs
        k_c -= (1.0 / den_lo - 1.0 / den_hi) * (c_u + c_d + c_ud)
    return CbcCoefficients(float(k_c), h1, h2, h3)


def braking_control(x, u_max: float) -> np.ndarray:
    """Full deceleration along the current velocity."""
    v = np.asarray(x, float)[VEL]
    speed = float(np.linalg.norm(v))
    if speed == 0.0:
        return np.zeros(2)
    return -u_max * v / speed
