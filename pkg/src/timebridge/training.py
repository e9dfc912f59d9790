"""Bridge training: D-matching with a weighted time + Fourier loss."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import priors as pr
from . import schedule as sch
from .denoiser import Denoiser, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    n_steps: int = 12000
    lr_warmup_peak: float = 8e-3
    warmup_steps: int = 500
    lambda_fourier: float = 1.0
    sigma_data: float = 0.5
    t_min: float = 1e-4
    t_max_train: float = 1.0 - 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 1
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max_train:
            raise ValueError("need 0 < t_min < t_max_train")
        if self.lambda_fourier < 0 or self.sigma_data <= 0:
            raise ValueError("lambda_fourier must be >= 0 and sigma_data > 0")


def loss_weight(sched: sch.NoiseSchedule, t, sigma_data: float):
    """(sigma_t^2 + sigma_data^2) / (sigma_t sigma_data)^2."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < sched.t_min):
        raise sch.ScheduleDomainError(f"loss weight diverges as t -> 0; got t={t.min()}")
    s2 = sch.sigma2(sched, t)
    return (s2 + sigma_data**2) / (s2 * sigma_data**2)


def loss_terms(x0: torch.Tensor, d_out: torch.Tensor):
    """Per-example mean squared error in time and in orthonormal Fourier space."""
    diff = x0 - d_out
    time_term = diff.pow(2).mean(dim=(1, 2))
    spec = torch.fft.fft(diff, dim=1, norm="ortho")
    freq_term = spec.abs().pow(2).mean(dim=(1, 2))
    return time_term, freq_term


def unconditional_endpoints(prior) -> Callable:
    def fn(x0, rng):
        return prior.sample(x0.shape[0], rng)
    return fn


def trend_endpoints(kind: str = "linear", cutoff: float = 0.1) -> Callable:
    def fn(x0, rng):
        return pr.extract_trend(x0, kind, cutoff)
    return fn


def spline_endpoints(mask_spec) -> Callable:
    from .data import make_mask

    def fn(x0, rng):
        m = make_mask(x0.shape, mask_spec, rng)
        return pr.spline_interpolate(x0, 1.0 - m).values
    return fn


@dataclass
class LossStats:
    loss: float
    time_term: float
    freq_term: float
    t: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)


def training_loss(model: Denoiser, x0, endpoint_fn: Callable, sched: sch.NoiseSchedule,
                  cfg: TrainConfig, rng: np.random.Generator, cond=None):
    """One Monte-Carlo estimate of the bridge loss on batch ``x0`` (n, tau, d)."""
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    x_T = np.asarray(endpoint_fn(x0, rng), dtype=np.float64)
    t = rng.uniform(cfg.t_min, cfg.t_max_train, size=n)
    noise = rng.standard_normal(x0.shape)
    c_T, c_0, var = sch.bridge_coefficients(sched, t)
    tb = (slice(None), None, None)
    x_t = c_T[tb] * x_T + c_0[tb] * x0 + np.sqrt(var)[tb] * noise
    w = loss_weight(sched, t, cfg.sigma_data)

    dtype = next(model.parameters()).dtype
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    out = model(as_t(x_t), as_t(t), as_t(x_T), None if cond is None else as_t(cond))
    x0_t = as_t(x0)
    time_term, freq_term = loss_terms(x0_t, out.total)
    per_example = as_t(w) * (time_term + cfg.lambda_fourier * freq_term)
    bad = ~torch.isfinite(per_example)
    if bad.any():
        raise TrainingError(f"non-finite loss at batch example {int(torch.nonzero(bad)[0])}")
    loss = per_example.mean()
    stats = LossStats(loss.item(), time_term.mean().item(), freq_term.mean().item(), t, w)
    return loss, stats


def lr_lambda(cfg: TrainConfig):
    """Multiplier on the peak rate: linear warmup, then inverse square-root decay."""
    warm = max(1, cfg.warmup_steps)

    def f(step):
        s = step + 1
        return s / warm if s < warm else (warm / s) ** 0.5
    return f


def _rng_state(rng: np.random.Generator):
    return rng.bit_generator.state


@dataclass
class TrainResult:
    model: Denoiser
    history: list
    step: int
    rng: np.random.Generator
    optimizer: torch.optim.Optimizer
    seconds: float


def make_optimizer(model, cfg: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_warmup_peak)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(cfg))
    return opt, sched


def train(model: Denoiser, dataset, cfg: TrainConfig, endpoint_fn: Callable,
          sched: sch.NoiseSchedule, out_dir=None, resume: dict | None = None,
          n_steps: int | None = None, cond=None) -> TrainResult:
    """Optimize ``model`` on windows ``dataset`` (n, tau, d).

    ``resume`` is a checkpoint payload; training continues from its step with
    its optimizer and rng state. ``n_steps`` overrides the number of steps
    run in this call (default: up to ``cfg.n_steps``).
    """
    data = np.asarray(getattr(dataset, "values", dataset), dtype=np.float64)
    cond_arr = None if cond is None else np.asarray(cond, dtype=np.float64)
    opt, lr_sched = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    if resume is not None:
        step = int(resume["step"])
        if resume.get("optimizer"):
            opt.load_state_dict(resume["optimizer"])
        if resume.get("rng_state"):
            rng.bit_generator.state = resume["rng_state"]
        lr_sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(cfg), last_epoch=step - 1)
    end = cfg.n_steps if n_steps is None else step + n_steps

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss.csv"
        fresh = resume is None or not log_path.exists()
        log_fh = log_path.open("w" if fresh else "a", newline="")
        writer = csv.writer(log_fh)
        if fresh:
            writer.writerow(["step", "loss", "time_term", "freq_term"])

    history = []
    baseline = None
    over = 0
    model.train()
    t0 = time.perf_counter()
    try:
        while step < end:
            idx = rng.integers(0, len(data), size=min(cfg.batch_size, len(data)))
            c = None if cond_arr is None else cond_arr[idx]
            loss, stats = training_loss(model, data[idx], endpoint_fn, sched, cfg, rng, cond=c)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            lr_sched.step()
            step += 1
            history.append((step, stats.loss, stats.time_term, stats.freq_term))
            if writer is not None and step % cfg.log_every == 0:
                writer.writerow([step, repr(stats.loss), repr(stats.time_term), repr(stats.freq_term)])

            if len(history) == 10:
                baseline = float(np.mean([h[1] for h in history]))
            if baseline is not None:
                over = over + 1 if stats.loss > cfg.divergence_factor * baseline else 0
                if over >= cfg.divergence_patience:
                    raise TrainingError(
                        f"training diverged: loss above {cfg.divergence_factor}x the initial "
                        f"{baseline:.4g} for {over} steps (step {step}, last loss {stats.loss:.4g})")

            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / "checkpoint.tbrg", model, step, opt, _rng_state(rng))
            if step % 500 == 0:
                logger.info("step %d loss %.5g", step, stats.loss)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.tbrg", model, step, opt, _rng_state(rng))
    return TrainResult(model, history, step, rng, opt, time.perf_counter() - t0)
