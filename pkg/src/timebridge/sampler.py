"""Reverse-time bridge samplers with a stochastic Euler sub-step and Heun correction.

``denoise`` is any callable ``(x_t, t, x_T) -> x0_hat`` on numpy arrays of
shape (n, tau, d); a trained :class:`~timebridge.denoiser.Denoiser` provides
one through its ``denoise`` method.

Each of the Γ iterations spends up to three denoiser calls: the SDE drift at
``t_i``, the probability-flow drift at the churned time, and the Heun
correction at ``t_{i-1}`` (skipped on the last step), so NFE = 3Γ - 1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import schedule as sch


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    n_steps: int = 40
    churn: float = 0.33
    grid: str = "uniform"
    t_lo: float | None = None
    t_hi: float | None = None
    rho: float = 7.0
    final_denoise: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0.0 <= self.churn <= 1.0:
            raise ValueError("churn must lie in [0, 1]")
        if self.grid not in ("uniform", "power"):
            raise ValueError(f"unknown grid {self.grid!r}")


def time_grid(cfg: SamplerConfig, sched: sch.NoiseSchedule | None = None) -> np.ndarray:
    """Descending times ``[t_Γ = t_hi, ..., t_0 = t_lo]``."""
    sched = sched or sch.NoiseSchedule()
    lo = sched.t_min if cfg.t_lo is None else cfg.t_lo
    hi = sched.t_guard if cfg.t_hi is None else cfg.t_hi
    if lo < sched.t_min * (1 - 1e-12) or hi > sched.t_guard * (1 + 1e-12) or not lo < hi:
        raise ValueError(f"grid [{lo}, {hi}] outside guarded range [{sched.t_min}, {sched.t_guard}]")
    i = np.arange(cfg.n_steps + 1) / cfg.n_steps
    if cfg.grid == "uniform":
        ts = lo + i * (hi - lo)
    else:
        r = cfg.rho
        ts = (lo ** (1 / r) + i * (hi ** (1 / r) - lo ** (1 / r))) ** r
    ts[0], ts[-1] = lo, hi
    return ts[::-1].copy()


def nfe_count(cfg: SamplerConfig) -> int:
    return 3 * cfg.n_steps - 1 + int(cfg.final_denoise)


class _Counted:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, *args):
        self.calls += 1
        return self.fn(*args)


def _drift(sched, denoise, x, t, xT, score_weight):
    # reverse-time drift per unit of backward time: -f + g^2 (w * score - h)
    f, g2 = sch.drift_diffusion(sched, x, t)
    d0 = denoise(x, t, xT)
    score = sch.score_from_denoiser(sched, x, t, xT, d0)
    return -f + g2 * (score_weight * score - sch.h_function(sched, x, t, xT))


def _churn_noise(rng: np.random.Generator, shape, n_steps: int) -> np.ndarray:
    # one child stream per sample, so a sample's noise does not depend on batch size
    streams = rng.spawn(shape[0])
    return np.stack([g.standard_normal((n_steps,) + tuple(shape[1:])) for g in streams])


@dataclass
class SampleResult:
    x0: np.ndarray
    x_T: np.ndarray
    nfe: int
    wall_ms: float
    times: np.ndarray


def bridge_sample(denoise: Callable, sched: sch.NoiseSchedule, x_T, cfg: SamplerConfig,
                  rng: np.random.Generator, mask=None, trace: Callable | None = None) -> SampleResult:
    """Run the hybrid sampler from endpoint ``x_T``.

    With ``mask`` given, only cells where ``mask == 1`` are ever updated;
    cells with ``mask == 0`` keep their endpoint value bit for bit.
    ``trace(step, t, x)`` is called after every step if given.
    """
    x_T = np.asarray(x_T, dtype=np.float64)
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask), x_T.shape) if np.ndim(mask) < x_T.ndim else np.asarray(mask)
        if keep.shape != x_T.shape:
            raise ValueError(f"mask shape {keep.shape} != endpoint shape {x_T.shape}")
        upd = keep.astype(bool)

        def apply(x, new):
            return np.where(upd, new, x)
    else:
        def apply(x, new):
            return new

    counted = _Counted(denoise)
    ts = time_grid(cfg, sched)
    s = cfg.churn
    x = x_T.copy()
    start = time.perf_counter()
    G = cfg.n_steps
    noise = _churn_noise(rng, x.shape, G) if s > 0 else None
    for step in range(G):
        t_cur, t_next = ts[step], ts[step + 1]
        t_hat = t_cur + s * (t_next - t_cur)
        eps = noise[:, step] if noise is not None else 0.0
        # stochastic Euler sub-step from t_cur back to t_hat
        d = _drift(sched, counted, x, t_cur, x_T, 1.0)
        h1 = t_cur - t_hat
        g = np.sqrt(sch.g2(sched, t_cur))
        x_hat = apply(x, x + d * h1 + g * np.sqrt(h1) * eps)
        # probability-flow Euler from t_hat to t_next
        d_hat = _drift(sched, counted, x_hat, t_hat, x_T, 0.5)
        h2 = t_hat - t_next
        x_new = apply(x_hat, x_hat + d_hat * h2)
        if step != G - 1:
            d_prime = _drift(sched, counted, x_new, t_next, x_T, 0.5)
            x_new = apply(x_hat, x_hat + 0.5 * (d_prime + d_hat) * h2)
        if not np.all(np.isfinite(x_new)):
            raise SamplerError(f"non-finite state at step {G - step} (t={t_next:.6g})")
        x = x_new
        if trace is not None:
            trace(step, t_next, x)
    if cfg.final_denoise:
        x = apply(x, counted(x, ts[-1], x_T))
    wall_ms = 1e3 * (time.perf_counter() - start)
    return SampleResult(x, x_T, counted.calls, wall_ms, ts)


def sample_unconditional(denoise, sched, prior, cfg: SamplerConfig, rng: np.random.Generator,
                         n: int | None = None, x_T=None) -> SampleResult:
    """Draw ``x_T`` from ``prior`` (anything with ``sample(n, rng)``) and run the sampler.

    Passing ``x_T`` directly skips the prior draw; the sampler rng then only
    drives the churn noise.
    """
    if x_T is None:
        if n is None:
            raise ValueError("give either n or x_T")
        x_T = prior.sample(n, rng)
    return bridge_sample(denoise, sched, x_T, cfg, rng)


def sample_point_preserving(denoise, sched, endpoint, mask, cfg: SamplerConfig,
                            rng: np.random.Generator, trace: Callable | None = None) -> SampleResult:
    """Sampler that never moves cells with ``mask == 0``.

    ``endpoint`` is either a spline endpoint (anything with ``.values``) or
    a raw trend/condition array. ``mask`` is 1 on cells to generate.
    """
    x_T = getattr(endpoint, "values", endpoint)
    return bridge_sample(denoise, sched, x_T, cfg, rng, mask=mask, trace=trace)
