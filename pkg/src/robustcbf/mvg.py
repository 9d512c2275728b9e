"""Matrix-variate Gaussian process model of dynamics disturbances.

Disturbances observed at states ``X`` (N x D) are stacked into ``Y`` (N x n)
and modelled as ``vec(Y) ~ N(0, K(X, X) (x) Omega)`` with a squared
exponential kernel ``K``. Rows are coupled through the kernel, output
components through the column covariance ``Omega``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .core import Disturbance

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
OMEGA_EIG_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


class MvgNumericalError(RuntimeError):
    """Kernel or column covariance is not usable as a covariance matrix."""


@dataclass(frozen=True)
class KernelParams:
    """Squared exponential kernel; ``noise`` is an optional white observation
    noise standard deviation (0 keeps the model noise-free)."""

    sigma: float
    length: float
    noise: float = 0.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.length > 0):
            raise ValueError(f"kernel needs sigma > 0 and length > 0, got {self}")
        if not self.noise >= 0:
            raise ValueError(f"noise must be non-negative, got {self.noise}")


@dataclass(frozen=True)
class WindowEntry:
    index: int
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class MvgModel:
    """Hyperparameters plus the sliding window of recent observations.

    The model is a value: :func:`observe` and :func:`train` return new
    instances. ``jitter`` is relative, the diagonal of ``K`` carries
    ``jitter * sigma**2``.
    """

    kernel: KernelParams
    omega: np.ndarray
    capacity: int = 50
    jitter: float = 1e-8
    window: Tuple[WindowEntry, ...] = ()
    count: int = 0

    def __post_init__(self):
        om = np.array(self.omega, dtype=float)
        if om.ndim != 2 or om.shape[0] != om.shape[1]:
            raise ValueError(f"omega must be square, got shape {om.shape}")
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        object.__setattr__(self, "omega", om)

    @property
    def n_out(self) -> int:
        return self.omega.shape[0]

    @property
    def X(self) -> np.ndarray:
        return np.array([e.x for e in self.window])

    @property
    def Y(self) -> np.ndarray:
        return np.array([e.y for e in self.window])

    def with_window(self, entries: Sequence[WindowEntry]) -> "MvgModel":
        return replace(self, window=tuple(entries))


@dataclass(frozen=True)
class DisturbancePosterior:
    """Predictive mean and covariance ``(var + noise_var) * Omega`` at one query state.

    ``var`` is the latent posterior variance; ``noise_var`` is added so that
    ``cov`` describes the next observed disturbance.
    """

    mean: np.ndarray
    var: float
    omega: np.ndarray
    noise_var: float = 0.0

    @property
    def cov(self) -> np.ndarray:
        return (self.var + self.noise_var) * self.omega


def default_model(n_out: int = 4, sigma: float = 1.0, length: float = 1.0, **kw) -> MvgModel:
    return MvgModel(KernelParams(sigma, length), np.eye(n_out), **kw)


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def kernel_eval(k: KernelParams, xi, xj) -> float:
    """Squared exponential kernel ``sigma^2 exp(-|xi - xj|^2 / (2 l^2))``."""
    diff = np.asarray(xi, dtype=float) - np.asarray(xj, dtype=float)
    return k.sigma**2 * math.exp(-float(diff @ diff) / (2.0 * k.length**2))


def gram(k: KernelParams, X: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Covariance of the observations at the rows of ``X``.

    The diagonal carries ``jitter * sigma^2`` plus the noise variance.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    K = k.sigma**2 * np.exp(-_sqdist(X, X) / (2.0 * k.length**2))
    if jitter or k.noise:
        K[np.diag_indices_from(K)] += jitter * k.sigma**2 + k.noise**2
    return K


def _cholesky(K: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(K, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise MvgNumericalError("kernel matrix is not positive definite") from exc


def posterior(m: MvgModel, x_star) -> DisturbancePosterior:
    """Predictive distribution of the disturbance at ``x_star``.

    With an empty window the prior ``N(0, kappa(x*, x*) Omega)`` is returned.
    If the jittered kernel matrix is still not factorisable, the jitter is
    raised tenfold up to ``1e-4`` before giving up.
    """
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    prior_var = m.kernel.sigma**2
    if not m.window:
        return DisturbancePosterior(np.zeros(m.n_out), prior_var, m.omega, m.kernel.noise**2)
    X, Y = m.X, m.Y
    jit = m.jitter
    while True:
        try:
            L = _cholesky(gram(m.kernel, X, jit))
            break
        except MvgNumericalError:
            if jit >= 1e-4:
                raise
            jit = max(jit * 10.0, 1e-12)
            logger.debug("raising posterior jitter to %g", jit)
    k_star = m.kernel.sigma**2 * np.exp(
        -np.sum((X - x_star) ** 2, axis=1) / (2.0 * m.kernel.length**2)
    )
    w = linalg.solve_triangular(L, k_star, lower=True, check_finite=False)
    beta = linalg.solve_triangular(L, Y, lower=True, check_finite=False)
    mean = w @ beta
    var = max(prior_var - float(w @ w), 0.0)
    return DisturbancePosterior(mean, var, m.omega, m.kernel.noise**2)


def observe(m: MvgModel, x, d) -> MvgModel:
    """Append one ``(state, disturbance)`` pair, evicting the oldest when full."""
    x = np.array(x.vector if hasattr(x, "vector") else x, dtype=float).reshape(-1)
    y = np.array(d.vector if isinstance(d, Disturbance) else d, dtype=float).reshape(-1)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("observation must be finite")
    if y.size != m.n_out:
        raise ValueError(f"disturbance has {y.size} entries, model expects {m.n_out}")
    entries = m.window + (WindowEntry(m.count, x, y),)
    if len(entries) > m.capacity:
        entries = entries[-m.capacity :]
    return replace(m, window=entries, count=m.count + 1)


# --------------------------------------------------------------------------
# likelihood and gradients


def _nll_parts(kernel: KernelParams, omega: np.ndarray, X, Y, jitter: float):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    N, n = Y.shape
    if X.shape[0] != N:
        raise ValueError(f"X has {X.shape[0]} rows but Y has {N}")
    if omega.shape != (n, n):
        raise ValueError(f"omega shape {omega.shape} does not match output dim {n}")
    sym = 0.5 * (omega + omega.T)
    if np.linalg.eigvalsh(sym)[0] <= 0:
        raise MvgNumericalError("omega is not positive definite")
    K = gram(kernel, X, jitter)
    L = _cholesky(K)
    sign, logdet_om = np.linalg.slogdet(omega)
    if sign <= 0:
        raise MvgNumericalError("omega has non-positive determinant")
    Kinv_Y = linalg.cho_solve((L, True), Y, check_finite=False)
    Om_inv = np.linalg.inv(omega)
    return X, Y, N, n, K, L, logdet_om, Kinv_Y, Om_inv


def nll(m: MvgModel, X, Y) -> float:
    """Negative log-likelihood of ``Y`` at states ``X`` under the model's
    hyperparameters (the window is not used)."""
    _, Y, N, n, _, L, logdet_om, Kinv_Y, Om_inv = _nll_parts(
        m.kernel, m.omega, X, Y, m.jitter
    )
    logdet_K = 2.0 * float(np.sum(np.log(np.diag(L))))
    quad = float(np.sum(Kinv_Y * (Y @ Om_inv.T)))
    return 0.5 * N * n * _LOG_2PI + 0.5 * n * logdet_K + 0.5 * N * logdet_om + 0.5 * quad


def nll_gradients(m: MvgModel, X, Y) -> Tuple[float, float, np.ndarray]:
    """Gradients of :func:`nll` with respect to ``length``, ``sigma`` and ``Omega``.

    The ``sigma`` gradient uses ``dK/dsigma`` in both trace terms; the jitter
    scales with ``sigma**2`` so it is part of that derivative. The
    ``Omega`` gradient treats every entry as free, matching finite
    differences taken one entry at a time. See :func:`noise_gradient` for
    the noise level.
    """
    X, Y, N, n, K, L, _, Kinv_Y, Om_inv = _nll_parts(m.kernel, m.omega, X, Y, m.jitter)
    sig, ell = m.kernel.sigma, m.kernel.length
    Kinv = linalg.cho_solve((L, True), np.eye(N), check_finite=False)
    # K^-1 Y Omega^-1 Y^T K^-1, the data part of both trace gradients
    B = Kinv_Y @ Om_inv @ Kinv_Y.T
    inner = 0.5 * n * Kinv - 0.5 * B

    K_sig = K.copy()
    K_sig[np.diag_indices_from(K_sig)] -= m.kernel.noise**2
    K_se = K_sig.copy()
    K_se[np.diag_indices_from(K_se)] -= m.jitter * sig**2
    dK_dl = K_se * _sqdist(X, X) / ell**3
    dK_ds = 2.0 * K_sig / sig

    d_l = float(np.sum(inner * dK_dl))
    d_s = float(np.sum(inner * dK_ds))
    OmT = Om_inv.T
    M = Y.T @ Kinv_Y
    d_om = 0.5 * N * OmT - 0.5 * OmT @ M.T @ OmT
    return d_l, d_s, d_om


def noise_gradient(m: MvgModel, X, Y) -> float:
    """``dL/d noise``; the noise only enters the diagonal of ``K``."""
    _, Y, N, n, _, L, _, Kinv_Y, Om_inv = _nll_parts(m.kernel, m.omega, X, Y, m.jitter)
    Kinv = linalg.cho_solve((L, True), np.eye(N), check_finite=False)
    B = Kinv_Y @ Om_inv @ Kinv_Y.T
    return float(m.kernel.noise * (n * np.trace(Kinv) - np.trace(B)))


def project_pd(omega: np.ndarray, floor: float = OMEGA_EIG_FLOOR) -> np.ndarray:
    """Symmetrise and clamp eigenvalues from below."""
    sym = 0.5 * (omega + omega.T)
    lam, vec = np.linalg.eigh(sym)
    out = (vec * np.maximum(lam, floor)) @ vec.T
    return 0.5 * (out + out.T)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 1e-2
    steps: int = 2000
    restarts: int = 5
    holdout: float = 0.2
    seed: int = 0
    log_every: int = 100
    sigma_range: Tuple[float, float] = (0.3, 3.0)
    length_range: Tuple[float, float] = (0.3, 10.0)
    # None keeps the noise of the input model fixed; a range learns it
    noise_range: Optional[Tuple[float, float]] = None
    # trust region: largest change of a log-hyperparameter, and of Omega
    # relative to its own norm, in a single step
    max_step: float = 0.5


@dataclass
class TrainReport:
    """Per-restart curves and the index of the restart that was kept."""

    restarts: List[dict] = field(default_factory=list)
    best: int = -1
    initial_nll: float = float("nan")
    final_nll: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "restarts": self.restarts,
            "best": self.best,
            "initial_nll": self.initial_nll,
            "final_nll": self.final_nll,
        }


Batch = Tuple[np.ndarray, np.ndarray]


def total_nll(m: MvgModel, batches: Sequence[Batch]) -> float:
    return float(sum(nll(m, X, Y) for X, Y in batches))


def _split(n_batches: int, frac: float, rng: np.random.Generator):
    order = rng.permutation(n_batches)
    n_hold = int(round(frac * n_batches))
    if n_batches < 2 or n_hold == 0:
        return list(order), list(order)
    n_hold = min(n_hold, n_batches - 1)
    return sorted(order[n_hold:]), sorted(order[:n_hold])


def train(
    m: MvgModel,
    dataset: Sequence[Batch],
    cfg: Optional[TrainConfig] = None,
    report: Optional[TrainReport] = None,
) -> MvgModel:
    """Fit ``sigma``, ``length`` and ``Omega`` by stochastic gradient descent.

    Each step draws one batch and descends its per-datum NLL. ``sigma`` and
    ``length`` (and the noise level when ``cfg.noise_range`` is set) move in
    log space. ``Omega`` takes the gradient step preconditioned by
    ``Omega (.) Omega`` and is then projected back onto the positive
    definite cone. Steps are clipped to ``cfg.max_step``. The restart with
    the lowest held-out NLL is returned; the window of ``m`` is carried
    over unchanged.
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise ValueError("empty training dataset")
    batches = [(np.atleast_2d(np.asarray(X, float)), np.atleast_2d(np.asarray(Y, float)))
               for X, Y in dataset]
    rng = np.random.default_rng(cfg.seed)
    train_idx, hold_idx = _split(len(batches), cfg.holdout, rng)
    train_b = [batches[i] for i in train_idx]
    hold_b = [batches[i] for i in hold_idx]

    Y_all = np.vstack([Y for _, Y in train_b])
    n = Y_all.shape[1]
    emp = Y_all.T @ Y_all / max(Y_all.shape[0], 1)
    emp = project_pd(emp + 1e-6 * np.trace(emp) / n * np.eye(n) if np.trace(emp) > 0 else np.eye(n))

    report = report if report is not None else TrainReport()
    report.initial_nll = _safe_total(m, train_b)
    best_model, best_score = None, math.inf

    for r in range(cfg.restarts):
        sig0 = math.exp(rng.uniform(*np.log(cfg.sigma_range)))
        ell0 = math.exp(rng.uniform(*np.log(cfg.length_range)))
        learn_noise = cfg.noise_range is not None
        noise0 = math.exp(rng.uniform(*np.log(cfg.noise_range))) if learn_noise else m.kernel.noise
        cand = replace(m, kernel=KernelParams(sig0, ell0, noise0), omega=project_pd(emp / sig0**2))
        log_s, log_l, om = math.log(sig0), math.log(ell0), cand.omega
        log_n = math.log(noise0) if learn_noise else None
        clip = cfg.max_step

        def params():
            noise = math.exp(log_n) if learn_noise else noise0
            return KernelParams(math.exp(log_s), math.exp(log_l), noise)

        curve = []
        diverged = False
        for step in range(cfg.steps):
            X, Y = train_b[rng.integers(len(train_b))]
            scale = 1.0 / (Y.shape[0] * n)
            cur = replace(cand, kernel=params(), omega=om)
            try:
                g_l, g_s, g_om = nll_gradients(cur, X, Y)
                g_n = noise_gradient(cur, X, Y) if learn_noise else 0.0
            except MvgNumericalError:
                diverged = True
                break
            log_l -= float(np.clip(cfg.lr * scale * g_l * cur.kernel.length, -clip, clip))
            log_s -= float(np.clip(cfg.lr * scale * g_s * cur.kernel.sigma, -clip, clip))
            if learn_noise:
                log_n -= float(np.clip(cfg.lr * scale * g_n * cur.kernel.noise, -clip, clip))
            step_om = cfg.lr / Y.shape[0] * (om @ g_om @ om)
            ratio = np.linalg.norm(step_om, 2) / np.linalg.norm(om, 2)
            if ratio > clip:
                step_om *= clip / ratio
            om = project_pd(om - step_om)
            if not (np.isfinite(log_l) and np.isfinite(log_s) and np.all(np.isfinite(om))):
                diverged = True
                break
            if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                curve.append((step, _safe_total(cur, train_b)))
        cand = replace(cand, kernel=params(), omega=om)
        score = math.inf if diverged else _safe_total(cand, hold_b)
        report.restarts.append(
            {
                "restart": r,
                "sigma0": sig0,
                "length0": ell0,
                "sigma": cand.kernel.sigma,
                "length": cand.kernel.length,
                "noise": cand.kernel.noise,
                "heldout_nll": score,
                "train_nll": math.inf if diverged else _safe_total(cand, train_b),
                "curve": curve,
                "diverged": diverged,
            }
        )
        logger.info("restart %d: sigma=%.4g length=%.4g heldout nll=%.6g",
                    r, cand.kernel.sigma, cand.kernel.length, score)
        if np.isfinite(score) and score < best_score:
            best_model, best_score, report.best = cand, score, r

    if best_model is None:
        raise MvgNumericalError("all training restarts diverged")
    report.final_nll = _safe_total(best_model, train_b)
    return best_model


def _safe_total(m: MvgModel, batches) -> float:
    try:
        val = total_nll(m, batches)
    except (MvgNumericalError, np.linalg.LinAlgError):
        return math.inf
    return val if np.isfinite(val) else math.inf


# --------------------------------------------------------------------------
# serialisation


def to_dict(m: MvgModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "mvg_model",
        "sigma": m.kernel.sigma,
        "length": m.kernel.length,
        "noise": m.kernel.noise,
        "omega": [float(v) for v in m.omega.reshape(-1)],
        "n_out": m.n_out,
        "capacity": m.capacity,
        "jitter": m.jitter,
        "count": m.count,
        "window": [
            {"index": e.index, "x": [float(v) for v in e.x], "y": [float(v) for v in e.y]}
            for e in m.window
        ],
    }


def from_dict(doc: dict) -> MvgModel:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version!r}")
    n = int(doc["n_out"])
    window = tuple(
        WindowEntry(int(e["index"]), np.array(e["x"], float), np.array(e["y"], float))
        for e in doc.get("window", [])
    )
    return MvgModel(
        KernelParams(float(doc["sigma"]), float(doc["length"]), float(doc.get("noise", 0.0))),
        np.array(doc["omega"], float).reshape(n, n),
        capacity=int(doc["capacity"]),
        jitter=float(doc["jitter"]),
        window=window,
        count=int(doc.get("count", len(window))),
    )


def dumps(m: MvgModel) -> str:
    # repr-based float encoding round-trips exactly
    return json.dumps(to_dict(m), indent=1)


def loads(text: str) -> MvgModel:
    return from_dict(json.loads(text))
