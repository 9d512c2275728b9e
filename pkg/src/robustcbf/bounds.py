"""High-confidence sets for Gaussian disturbances.

A Gaussian posterior ``N(mu, Sigma)`` over a P-dimensional disturbance gives
the ellipsoid ``(d - mu)^T Sigma^-1 (d - mu) <= k`` holding with probability
``1 - delta`` when ``k`` is the chi-square quantile. The ellipsoid is
outer-bounded by the box aligned with the eigenvectors of ``Sigma``, written
as ``G d <= g`` with rows in ``+/-`` pairs.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)


def chi2_cdf(x: float, dof: int) -> float:
    if x <= 0:
        return 0.0
    return float(special.gammainc(0.5 * dof, 0.5 * x))


def _chi2_pdf(x: float, dof: int) -> float:
    if x <= 0:
        return 0.0
    a = 0.5 * dof
    return math.exp((a - 1.0) * math.log(x) - 0.5 * x - a * math.log(2.0) - math.lgamma(a))


@lru_cache(maxsize=256)
def chi2_quantile(prob: float, dof: int) -> float:
    """Inverse chi-square CDF by safeguarded Newton iteration.

    Newton steps on ``CDF(k) - prob`` start from the Wilson-Hilferty guess
    and fall back to bisection whenever a step leaves the current bracket.
    """
    if not (0.0 < prob < 1.0):
        raise ValueError(f"prob must lie in (0, 1), got {prob}")
    if dof < 1 or int(dof) != dof:
        raise ValueError(f"dof must be a positive integer, got {dof}")
    dof = int(dof)

    lo, hi = 0.0, max(1.0, float(dof))
    while chi2_cdf(hi, dof) < prob:
        lo, hi = hi, 2.0 * hi

    z = math.sqrt(2.0) * special.erfinv(2.0 * prob - 1.0)
    c = 2.0 / (9.0 * dof)
    x = dof * max(1.0 - c + z * math.sqrt(c), 1e-3) ** 3
    if not (lo < x < hi):
        x = 0.5 * (lo + hi)

    for _ in range(200):
        err = chi2_cdf(x, dof) - prob
        if err > 0:
            hi = x
        else:
            lo = x
        if abs(err) < 1e-15 or hi - lo < 1e-14 * max(1.0, x):
            break
        pdf = _chi2_pdf(x, dof)
        step = x - err / pdf if pdf > 0 else lo - 1.0
        x = step if lo < step < hi else 0.5 * (lo + hi)
    return x


def sigma_level_quantile(n_sigma: float, dof: int) -> float:
    """Quantile whose ellipsoid carries the same mass as a 1-D ``n_sigma`` interval."""
    return chi2_quantile(math.erf(n_sigma / math.sqrt(2.0)), dof)


def _psd(cov: np.ndarray, what: str = "covariance") -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    sym = 0.5 * (cov + cov.T)
    lam, vec = np.linalg.eigh(sym)
    if lam[0] < -1e-12 * max(1.0, abs(lam[-1])):
        logger.warning("%s not PSD (min eig %.3g); clamping at 0", what, lam[0])
    if lam[0] < 0:
        sym = (vec * np.maximum(lam, 0.0)) @ vec.T
        sym = 0.5 * (sym + sym.T)
    return sym


@dataclass(frozen=True)
class ConfidenceEllipsoid:
    mean: np.ndarray
    cov: np.ndarray
    k_delta: float
    delta: float

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_gaussian(cls, mean, cov, delta: float) -> "ConfidenceEllipsoid":
        if not (0.0 < delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {delta}")
        mean = np.asarray(mean, dtype=float).reshape(-1)
        cov = _psd(cov)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("mean and covariance dimensions disagree")
        return cls(mean, cov, chi2_quantile(1.0 - delta, mean.size), float(delta))

    def mahalanobis_sq(self, d) -> float:
        return mahalanobis_sq(d, self.mean, self.cov)

    def contains(self, d, tol: float = 0.0) -> bool:
        return self.mahalanobis_sq(d) <= self.k_delta + tol


def mahalanobis_sq(d, mean, cov, floor: float = 1e-300) -> float:
    """``(d - mu)^T Sigma^-1 (d - mu)`` through the eigenbasis of ``Sigma``."""
    lam, vec = np.linalg.eigh(0.5 * (cov + np.transpose(cov)))
    r = vec.T @ (np.asarray(d, dtype=float) - mean)
    return float(np.sum(r * r / np.maximum(lam, floor)))


def build_ellipsoid(post_robot, post_agent, delta: float) -> ConfidenceEllipsoid:
    """Joint ellipsoid of the stacked ``[d_robot, d_agent]`` disturbance.

    The two posteriors are independent, so the joint covariance is block
    diagonal.
    """
    mr, ma = np.asarray(post_robot.mean, float), np.asarray(post_agent.mean, float)
    if mr.size != 4 or ma.size != 4:
        raise ValueError("posteriors must be 4-dimensional")
    cov = np.zeros((8, 8))
    cov[:4, :4] = _psd(post_robot.cov, "robot covariance")
    cov[4:, 4:] = _psd(post_agent.cov, "agent covariance")
    return ConfidenceEllipsoid.from_gaussian(np.concatenate([mr, ma]), cov, delta)


@dataclass(frozen=True)
class UncertaintyPolytope:
    """``{d : G d <= g}``; rows ``2i`` and ``2i+1`` are ``+v_i`` and ``-v_i``."""

    G: np.ndarray
    g: np.ndarray
    ellipsoid: Optional[ConfidenceEllipsoid] = None

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    def contains(self, d, tol: float = 1e-9) -> bool:
        return bool(np.all(self.G @ np.asarray(d, float) <= self.g + tol))

    def max_violation(self, d) -> float:
        return float(np.max(self.G @ np.asarray(d, float) - self.g))

    def vertices(self) -> np.ndarray:
        """All ``2^P`` corners of the box (one per row)."""
        V = self.G[0::2]
        upper, lower = self.g[0::2], -self.g[1::2]
        signs = _sign_table(self.dim)
        t = np.where(signs > 0, upper, lower)
        return t @ V

    def dumps(self) -> str:
        rows = [" ".join(repr(float(v)) for v in row) + " | " + repr(float(b))
                for row, b in zip(self.G, self.g)]
        return "\n".join(rows)


@lru_cache(maxsize=16)
def _sign_table(p: int) -> np.ndarray:
    return np.array(list(itertools.product((1.0, -1.0), repeat=p)))


def to_polytope(e: ConfidenceEllipsoid) -> UncertaintyPolytope:
    """Box around the ellipsoid in the eigenbasis of its covariance.

    For each eigenpair ``(lam_i, v_i)`` the box keeps
    ``-sqrt(k lam_i) <= v_i^T (d - mu) <= sqrt(k lam_i)``. Zero eigenvalues
    give a degenerate slab rather than a dropped row, so ``G`` is always
    ``2P x P``.
    """
    lam, vec = np.linalg.eigh(0.5 * (e.cov + e.cov.T))
    half = np.sqrt(e.k_delta * np.maximum(lam, 0.0))
    P = e.dim
    G = np.empty((2 * P, P))
    g = np.empty(2 * P)
    centre = vec.T @ e.mean
    G[0::2] = vec.T
    G[1::2] = -vec.T
    g[0::2] = half + centre
    g[1::2] = half - centre
    return UncertaintyPolytope(G, g, e)


def point_polytope(point) -> UncertaintyPolytope:
    """Polytope collapsed onto a single point (used for certainty equivalence)."""
    point = np.asarray(point, dtype=float).reshape(-1)
    P = point.size
    G = np.empty((2 * P, P))
    G[0::2] = np.eye(P)
    G[1::2] = -np.eye(P)
    g = np.empty(2 * P)
    g[0::2] = point
    g[1::2] = -point
    return UncertaintyPolytope(G, g, None)


@dataclass(frozen=True)
class ZetaBounds:
    zeta_p: float
    zeta_v: float

    def __post_init__(self):
        if not (self.zeta_p >= 0 and self.zeta_v >= 0
                and math.isfinite(self.zeta_p) and math.isfinite(self.zeta_v)):
            raise ValueError(f"zeta bounds must be finite and non-negative: {self}")


ZERO_ZETA = ZetaBounds(0.0, 0.0)


def zeta_from_ellipsoid(e: ConfidenceEllipsoid, offset: int = 0) -> ZetaBounds:
    """Norm caps on the position/velocity blocks of one source.

    ``offset`` selects the source inside a stacked ellipsoid (0 for the
    robot, 4 for the agent). ``|d_p| <= |mu_p| + sqrt(k lam_max(Sigma_pp))``
    for every ``d`` in the ellipsoid, likewise for ``d_v``.
    """
    out = []
    for blk in (slice(offset, offset + 2), slice(offset + 2, offset + 4)):
        lam_max = max(float(np.linalg.eigvalsh(e.cov[blk, blk])[-1]), 0.0)
        out.append(float(np.linalg.norm(e.mean[blk])) + math.sqrt(e.k_delta * lam_max))
    return ZetaBounds(*out)


def zeta_from_polytope(poly: UncertaintyPolytope, offsets: Sequence[int] = (0, 4)):
    """Exact norm caps of each source block over the whole box.

    A norm is convex, so its maximum over the box sits on a corner.
    Returns one :class:`ZetaBounds` per offset.
    """
    verts = poly.vertices()
    out = []
    for off in offsets:
        zp = float(np.max(np.linalg.norm(verts[:, off : off + 2], axis=1)))
        zv = float(np.max(np.linalg.norm(verts[:, off + 2 : off + 4], axis=1)))
        out.append(ZetaBounds(zp, zv))
    return tuple(out)
