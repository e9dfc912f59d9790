"""Closed-form VP/VE bridge schedules.

Everything here is an exact expression in ``t``; there is no quadrature and
no ODE integration. Array arguments broadcast elementwise, scalar ``t``
returns a Python-float-compatible numpy scalar.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

VP = "vp"
VE = "ve"


class ScheduleDomainError(ValueError):
    """Raised when a time lies outside the admissible range."""


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = VP
    beta_min: float = 0.2
    beta_d: float = 10.0
    sigma_max: float = 1.0
    t_max: float = 1.0
    # endpoint guards, as fractions of t_max
    t_min_frac: float = 1e-4
    guard_frac: float = 1e-4

    def __post_init__(self):
        if self.kind not in (VP, VE):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.kind == VP:
            if self.beta_min < 0 or self.beta_d < 0 or self.beta_min + self.beta_d == 0:
                raise ValueError("VP schedule needs beta_min, beta_d >= 0, not both zero")
        elif self.sigma_max <= 0:
            raise ValueError("sigma_max must be positive")

    @property
    def t_min(self) -> float:
        return self.t_min_frac * self.t_max

    @property
    def t_guard(self) -> float:
        """Largest time at which the h-function and score may be evaluated."""
        return self.t_max - self.guard_frac * self.t_max

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        keys = {"kind", "beta_min", "beta_d", "sigma_max", "t_max"}
        kw = {k: cfg[f"schedule.{k}"] for k in keys if f"schedule.{k}" in cfg}
        return cls(**kw)

    def to_config(self) -> dict:
        return {
            "schedule.kind": self.kind,
            "schedule.beta_min": self.beta_min,
            "schedule.beta_d": self.beta_d,
            "schedule.sigma_max": self.sigma_max,
            "schedule.t_max": self.t_max,
        }


class BridgeMarginal(NamedTuple):
    mean: np.ndarray
    std: float


def _check_t(sched: NoiseSchedule, t, lo=0.0, hi=None):
    t = np.asarray(t, dtype=np.float64)
    hi = sched.t_max if hi is None else hi
    # small slack so grids computed in floating point are not rejected
    eps = 1e-12 * sched.t_max
    if np.any(t < lo - eps) or np.any(t > hi + eps) or np.any(~np.isfinite(t)):
        raise ScheduleDomainError(f"t={t} outside [{lo}, {hi}]")
    return t


def _vp_exponent(sched, t):
    # log(1 / alpha_t^2) = 0.5 beta_d t^2 + beta_min t
    return 0.5 * sched.beta_d * t**2 + sched.beta_min * t


def alpha(sched: NoiseSchedule, t):
    t = _check_t(sched, t)
    if sched.kind == VE:
        return np.ones_like(t)
    return np.exp(-0.25 * sched.beta_d * t**2 - 0.5 * sched.beta_min * t)


def sigma(sched: NoiseSchedule, t):
    return np.sqrt(sigma2(sched, t))


def sigma2(sched: NoiseSchedule, t):
    t = _check_t(sched, t)
    if sched.kind == VE:
        return (sched.sigma_max * t / sched.t_max) ** 2
    # 1 - exp(-x) without cancellation for small x
    return -np.expm1(-_vp_exponent(sched, t))


def snr(sched: NoiseSchedule, t):
    """alpha_t^2 / sigma_t^2; ``inf`` at t = 0."""
    t = _check_t(sched, t)
    if sched.kind == VE:
        with np.errstate(divide="ignore"):
            return 1.0 / sigma2(sched, t)
    with np.errstate(divide="ignore"):
        return 1.0 / np.expm1(_vp_exponent(sched, t))


def snr_ratio(sched: NoiseSchedule, t):
    """SNR_T / SNR_t, which runs from 0 at t=0 to 1 at t=T."""
    t = _check_t(sched, t)
    T = sched.t_max
    if sched.kind == VE:
        return sigma2(sched, t) / sigma2(sched, T)
    return np.expm1(_vp_exponent(sched, t)) / np.expm1(_vp_exponent(sched, T))


def dlog_alpha(sched: NoiseSchedule, t):
    t = _check_t(sched, t)
    if sched.kind == VE:
        return np.zeros_like(t)
    return -0.5 * sched.beta_d * t - 0.5 * sched.beta_min


def dsigma2(sched: NoiseSchedule, t):
    t = _check_t(sched, t)
    if sched.kind == VE:
        return 2.0 * sched.sigma_max**2 * t / sched.t_max**2
    # d/dt (1 - alpha^2) = -2 alpha^2 dlog(alpha)/dt
    a2 = np.exp(-_vp_exponent(sched, t))
    return -2.0 * a2 * dlog_alpha(sched, t)


def g2(sched: NoiseSchedule, t):
    return dsigma2(sched, t) - 2.0 * dlog_alpha(sched, t) * sigma2(sched, t)


def drift_diffusion(sched: NoiseSchedule, x_t, t):
    """Forward SDE coefficients ``(f(x_t, t), g(t)^2)``."""
    t = _check_t(sched, t)
    x_t = np.asarray(x_t, dtype=np.float64)
    return dlog_alpha(sched, t) * x_t, g2(sched, t)


def bridge_coefficients(sched: NoiseSchedule, t):
    """Return ``(c_T, c_0, var)`` with mean = c_T x_T + c_0 x_0."""
    t = _check_t(sched, t)
    T = sched.t_max
    r = snr_ratio(sched, t)
    a_t = alpha(sched, t)
    c_T = r * a_t / alpha(sched, T)
    c_0 = a_t * (1.0 - r)
    var = sigma2(sched, t) * (1.0 - r)
    return c_T, c_0, np.maximum(var, 0.0)


def bridge_marginal(sched: NoiseSchedule, x0, xT, t) -> BridgeMarginal:
    x0 = np.asarray(x0, dtype=np.float64)
    xT = np.asarray(xT, dtype=np.float64)
    if x0.shape != xT.shape:
        raise ValueError(f"x0 shape {x0.shape} != xT shape {xT.shape}")
    t = float(t)
    if t == 0.0:
        _check_t(sched, t)
        return BridgeMarginal(x0.copy(), 0.0)
    if t == sched.t_max:
        return BridgeMarginal(xT.copy(), 0.0)
    c_T, c_0, var = bridge_coefficients(sched, t)
    return BridgeMarginal(c_T * xT + c_0 * x0, float(np.sqrt(var)))


def sample_bridge_marginal(sched: NoiseSchedule, x0, xT, t, noise):
    m = bridge_marginal(sched, x0, xT, t)
    return m.mean + m.std * np.asarray(noise, dtype=np.float64)


def _check_interior(sched, t):
    return _check_t(sched, t, lo=sched.t_min, hi=sched.t_guard)


def h_function(sched: NoiseSchedule, x_t, t, xT):
    """Doob h-transform drift: grad_{x_t} log p(x_T | x_t)."""
    t = _check_interior(sched, t)
    x_t = np.asarray(x_t, dtype=np.float64)
    xT = np.asarray(xT, dtype=np.float64)
    T = sched.t_max
    if sched.kind == VE:
        return (xT - x_t) / (sigma2(sched, T) - sigma2(sched, t))
    a_t, a_T = alpha(sched, t), alpha(sched, T)
    # sigma_t^2 (SNR_t/SNR_T - 1), written to avoid inf - 1 style cancellation
    denom = sigma2(sched, t) * (1.0 / snr_ratio(sched, t) - 1.0)
    return ((a_t / a_T) * xT - x_t) / denom


def score_from_denoiser(sched: NoiseSchedule, x_t, t, xT, d_out):
    """Score of q(x_t | x_T) given a prediction ``d_out`` of x_0.

    The sign is ``(mean - x_t) / var``, i.e. the gradient of a Gaussian log
    density, so that the posterior mean denoiser yields the exact score.
    """
    t = _check_interior(sched, t)
    x_t = np.asarray(x_t, dtype=np.float64)
    c_T, c_0, var = bridge_coefficients(sched, t)
    mean = c_T * np.asarray(xT, dtype=np.float64) + c_0 * np.asarray(d_out, dtype=np.float64)
    return (mean - x_t) / var
