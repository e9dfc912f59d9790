"""Terminal (prior) distributions for the bridge.

Unconditional generation draws ``x_T`` from a data-fitted Gaussian, either
cell-independent or with an RBF temporal covariance. Conditional tasks use a
deterministic endpoint: a trend curve, or a linear spline through the
observed cells of a partially masked window.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import signal

logger = logging.getLogger(__name__)

PRIOR_KINDS = ("standard", "data", "gp", "trend", "spline")
TREND_KINDS = ("linear", "poly3", "butterworth")


@dataclass(frozen=True)
class DataStats:
    mu: np.ndarray  # (tau, d)
    sigma2: np.ndarray  # (tau, d), population variance

    @property
    def shape(self):
        return self.mu.shape


@dataclass(frozen=True)
class GPPrior:
    mu: np.ndarray  # (tau, d)
    cov: np.ndarray  # (d, tau, tau)
    cov_chol: np.ndarray  # (d, tau, tau), lower triangular
    eta: float
    length_scale: np.ndarray  # (d,)


@dataclass(frozen=True)
class SplineEndpoint:
    values: np.ndarray  # (tau, d)
    mask: np.ndarray  # (tau, d), 1 = observed


def fit_data_stats(train) -> DataStats:
    """Per-cell mean and population variance over the sample axis."""
    x = np.asarray(getattr(train, "values", train), dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (n, tau, d) windows, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 windows to fit data statistics")
    return DataStats(mu=x.mean(axis=0), sigma2=x.var(axis=0))


def sample_standard_prior(shape, rng: np.random.Generator, n: int | None = None):
    size = tuple(shape) if n is None else (n, *shape)
    return rng.standard_normal(size)


def sample_data_prior(stats: DataStats, rng: np.random.Generator, n: int | None = None):
    size = stats.shape if n is None else (n, *stats.shape)
    z = rng.standard_normal(size)
    return stats.mu + np.sqrt(stats.sigma2) * z


def rbf_kernel(tau: int, eta: float, length_scale: float) -> np.ndarray:
    lag = np.arange(tau)[:, None] - np.arange(tau)[None, :]
    return eta * np.exp(-(lag**2) / (2.0 * length_scale**2))


def _jittered_cholesky(c: np.ndarray, jitters=(1e-6, 1e-5, 1e-4)):
    eye = np.eye(c.shape[0])
    for jit in jitters:
        try:
            return c + jit * eye, np.linalg.cholesky(c + jit * eye)
        except np.linalg.LinAlgError:
            logger.debug("cholesky failed with jitter %g", jit)
    raise np.linalg.LinAlgError(f"covariance not positive definite after jitter {jitters[-1]}")


def build_gp_prior(stats: DataStats, eta: float, length_scale=None) -> GPPrior:
    """Data Gaussian plus an RBF kernel over timestamps, one covariance per feature.

    ``length_scale`` defaults to the per-feature data standard deviation
    (pooled over timestamps).
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    tau, d = stats.shape
    if length_scale is None:
        ls = np.sqrt(stats.sigma2.mean(axis=0))
    else:
        ls = np.broadcast_to(np.asarray(length_scale, dtype=np.float64), (d,)).copy()
    if np.any(ls <= 0):
        raise ValueError("length_scale must be positive for every feature")
    covs, chols = [], []
    for j in range(d):
        c = rbf_kernel(tau, eta, ls[j]) + np.diag(stats.sigma2[:, j])
        c = 0.5 * (c + c.T)
        c, l = _jittered_cholesky(c)
        covs.append(c)
        chols.append(l)
    return GPPrior(stats.mu.copy(), np.stack(covs), np.stack(chols), float(eta), ls)


def sample_gp_prior(gp: GPPrior, rng: np.random.Generator, n: int | None = None, z=None):
    """``mu + L z`` per feature; ``z`` has the prior's (tau, d) window shape."""
    tau, d = gp.mu.shape
    if z is None:
        size = (tau, d) if n is None else (n, tau, d)
        z = rng.standard_normal(size)
    # (d, tau, tau) @ (..., d, tau, 1)
    zt = np.swapaxes(z, -1, -2)[..., None]
    out = (gp.cov_chol @ zt)[..., 0]
    return gp.mu + np.swapaxes(out, -1, -2)


def spline_interpolate(values, mask, fill_value: float = 0.0) -> SplineEndpoint:
    """Linear interpolation between observed cells, held constant past the ends.

    Works column by column on a (tau, d) window, or on a (n, tau, d) batch.
    Columns with no observation are filled with ``fill_value``.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if values.shape != mask.shape:
        raise ValueError(f"values shape {values.shape} != mask shape {mask.shape}")
    if values.ndim == 3:
        ends = [spline_interpolate(v, m, fill_value) for v, m in zip(values, mask)]
        return SplineEndpoint(np.stack([e.values for e in ends]), mask.astype(np.float64))
    tau, d = values.shape
    out = np.full_like(values, fill_value)
    k = np.arange(tau)
    for j in range(d):
        obs = np.flatnonzero(mask[:, j])
        if obs.size == 0:
            continue
        # np.interp clamps to the end values, which is the boundary rule we want
        out[:, j] = np.interp(k, obs, values[obs, j])
        out[obs, j] = values[obs, j]
    return SplineEndpoint(out, mask.astype(np.float64))


def trend_endpoint(trend, shape=None):
    trend = np.asarray(trend, dtype=np.float64)
    if shape is not None and trend.shape != tuple(shape):
        raise ValueError(f"trend shape {trend.shape} != window shape {tuple(shape)}")
    return trend.copy()


def poly_trend(x, degree: int):
    """Least-squares polynomial in the timestamp index, fitted per feature."""
    x = np.asarray(x, dtype=np.float64)
    tau = x.shape[-2]
    c = np.linspace(0.0, 1.0, tau) if tau > 1 else np.zeros(1)
    basis = np.vander(c, degree + 1, increasing=True)
    flat = np.moveaxis(x, -2, 0).reshape(tau, -1)
    coef, *_ = np.linalg.lstsq(basis, flat, rcond=None)
    fit = (basis @ coef).reshape(np.moveaxis(x, -2, 0).shape)
    return np.moveaxis(fit, 0, -2)


def butterworth_trend(x, cutoff: float = 0.1, order: int = 2):
    """Zero-phase low-pass along time; ``cutoff`` is a fraction of Nyquist."""
    x = np.asarray(x, dtype=np.float64)
    b, a = signal.butter(order, cutoff)
    padlen = min(3 * max(len(a), len(b)), x.shape[-2] - 1)
    return signal.filtfilt(b, a, x, axis=-2, padlen=padlen)


def extract_trend(x, kind: str = "linear", cutoff: float = 0.1):
    if kind == "linear":
        return poly_trend(x, 1)
    if kind == "poly3":
        return poly_trend(x, 3)
    if kind == "butterworth":
        return butterworth_trend(x, cutoff)
    raise ValueError(f"unknown trend kind {kind!r}; expected one of {TREND_KINDS}")


class Prior:
    """Uniform ``sample(n, rng)`` front over the stochastic prior kinds."""

    def __init__(self, kind: str, stats: DataStats | None = None, eta: float = 1.0,
                 length_scale=None, shape=None):
        if kind not in ("standard", "data", "gp"):
            raise ValueError(f"{kind!r} is not a stochastic prior")
        if kind != "standard" and stats is None:
            raise ValueError(f"prior {kind!r} needs data statistics")
        self.kind = kind
        self.stats = stats
        self.shape = tuple(shape) if shape is not None else stats.shape
        self.gp = build_gp_prior(stats, eta, length_scale) if kind == "gp" else None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "standard":
            return sample_standard_prior(self.shape, rng, n)
        if self.kind == "data":
            return sample_data_prior(self.stats, rng, n)
        return sample_gp_prior(self.gp, rng, n)
