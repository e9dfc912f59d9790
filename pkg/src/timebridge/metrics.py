"""Quality metrics for generated windows (n, tau, d)."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import nn

logger = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def _windows(x):
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if x.ndim != 3:
        raise MetricError(f"expected (n, tau, d) windows, got shape {x.shape}")
    return x


# -- correlational ---------------------------------------------------------

def window_correlations(x) -> np.ndarray:
    """Mean over windows of the within-window feature correlation matrix.

    Covariances use the population time average ``E[x_i x_j] - E[x_i] E[x_j]``.
    A feature with zero variance in a window gets correlation 0 there.
    """
    x = _windows(x)
    mean = x.mean(axis=1)
    cov = np.einsum("nti,ntj->nij", x, x) / x.shape[1] - mean[:, :, None] * mean[:, None, :]
    var = np.clip(np.diagonal(cov, axis1=1, axis2=2), 0.0, None)
    scale = np.sqrt(var[:, :, None] * var[:, None, :])
    # relative test: cancellation in E[x^2] - E[x]^2 leaves ~1e-16 noise on constants
    flat = var <= 1e-24 + 1e-12 * np.einsum("nti,nti->ni", x, x) / x.shape[1]
    degenerate = flat[:, :, None] | flat[:, None, :]
    if degenerate.any():
        warnings.warn(f"{int(flat.sum())} zero-variance window features; their correlations are set to 0",
                      RuntimeWarning, stacklevel=3)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(degenerate, 0.0, cov / np.where(degenerate, 1.0, scale))
    return corr.mean(axis=0)


def correlational_score(real, synth) -> float:
    real, synth = _windows(real), _windows(synth)
    if real.shape[2] != synth.shape[2]:
        raise MetricError("real and synthetic feature counts differ")
    if real.shape[0] < 2 or synth.shape[0] < 2:
        raise MetricError("need at least 2 windows on each side")
    diff = np.abs(window_correlations(real) - window_correlations(synth))
    return float(diff.sum() / 10.0)


# -- classifier-based scores -----------------------------------------------

@dataclass
class ModelEvalConfig:
    hidden: int = 32
    n_layers: int = 2
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    train_frac: float = 0.8
    seed: int = 0


class _GRUHead(nn.Module):
    def __init__(self, d_in, hidden, n_layers, d_out):
        super().__init__()
        self.rnn = nn.GRU(d_in, hidden, num_layers=n_layers, batch_first=True)
        self.out = nn.Linear(hidden, d_out)

    def forward(self, x):
        h, _ = self.rnn(x)
        return self.out(h[:, -1])


class _Forecaster(_GRUHead):
    """Persistence forecast plus a learned GRU correction (zero at init)."""

    def __init__(self, d, hidden, n_layers):
        super().__init__(d, hidden, n_layers, d)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return x[:, -1] + super().forward(x)


def _split(n, frac, rng):
    idx = rng.permutation(n)
    cut = int(round(frac * n))
    return idx[:cut], idx[cut:]


def _fit(model, x, y, loss_fn, cfg: ModelEvalConfig, gen: torch.Generator):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n = len(x)
    for _ in range(cfg.steps):
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
        opt.zero_grad(set_to_none=True)
        loss = loss_fn(model(x[idx]), y[idx])
        loss.backward()
        opt.step()
    return model


def discriminative_score(real, synth, cfg: ModelEvalConfig | None = None) -> float:
    """|test accuracy - 0.5| of a GRU classifier separating real from synthetic."""
    cfg = cfg or ModelEvalConfig()
    real, synth = _windows(real), _windows(synth)
    if real.shape[1:] != synth.shape[1:]:
        raise MetricError(f"window shapes differ: {real.shape[1:]} vs {synth.shape[1:]}")
    rng = np.random.default_rng(cfg.seed)
    r_tr, r_te = _split(len(real), cfg.train_frac, rng)
    s_tr, s_te = _split(len(synth), cfg.train_frac, rng)
    if len(r_te) == 0 or len(s_te) == 0:
        raise MetricError("test split contains a single class; provide more windows")
    x_tr = np.concatenate([real[r_tr], synth[s_tr]])
    y_tr = np.concatenate([np.ones(len(r_tr)), np.zeros(len(s_tr))])
    x_te = np.concatenate([real[r_te], synth[s_te]])
    y_te = np.concatenate([np.ones(len(r_te)), np.zeros(len(s_te))])

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = _GRUHead(real.shape[2], cfg.hidden, cfg.n_layers, 1)
    xt = torch.as_tensor(x_tr, dtype=torch.float32)
    yt = torch.as_tensor(y_tr, dtype=torch.float32)[:, None]
    _fit(model, xt, yt, nn.functional.binary_cross_entropy_with_logits, cfg, gen)
    with torch.no_grad():
        logits = model(torch.as_tensor(x_te, dtype=torch.float32))[:, 0].numpy()
    acc = float(np.mean((logits > 0) == (y_te > 0.5)))
    return abs(acc - 0.5)


def predictive_score(real, synth, cfg: ModelEvalConfig | None = None) -> float:
    """Train on synthetic, test on real: MAE of a one-step-ahead GRU forecaster.

    The forecaster reads the first tau-1 steps and predicts every feature at
    the last step, as the last observed value plus a learned correction.
    """
    cfg = cfg or ModelEvalConfig()
    real, synth = _windows(real), _windows(synth)
    if real.shape[1:] != synth.shape[1:]:
        raise MetricError(f"window shapes differ: {real.shape[1:]} vs {synth.shape[1:]}")
    if real.shape[1] < 2:
        raise MetricError("windows need at least 2 timestamps")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    d = real.shape[2]
    model = _Forecaster(d, cfg.hidden, cfg.n_layers)
    xs = torch.as_tensor(synth[:, :-1], dtype=torch.float32)
    ys = torch.as_tensor(synth[:, -1], dtype=torch.float32)
    _fit(model, xs, ys, nn.functional.l1_loss, cfg, gen)
    with torch.no_grad():
        pred = model(torch.as_tensor(real[:, :-1], dtype=torch.float32)).numpy()
    return float(np.mean(np.abs(pred - real[:, -1])))


# -- imputation --------------------------------------------------------------

def imputation_error(truth, imputed, mask):
    """(MSE, MAE) over cells with ``mask == 1`` only."""
    truth = np.asarray(truth, dtype=np.float64)
    imputed = np.asarray(imputed, dtype=np.float64)
    sel = np.asarray(mask).astype(bool)
    if truth.shape != imputed.shape or sel.shape != truth.shape:
        raise MetricError("truth, imputed and mask must share a shape")
    if not sel.any():
        raise MetricError("mask selects no cells; imputation error is undefined")
    err = imputed[sel] - truth[sel]
    return float(np.mean(err**2)), float(np.mean(np.abs(err)))


# -- distribution distances -------------------------------------------------

@dataclass
class WassersteinResult:
    distance: float
    method: str
    n: int


def prior_data_wasserstein(prior_samples, data_samples, rng=None, exact_max_n: int = 256,
                           n_projections: int = 100, method: str | None = None) -> WassersteinResult:
    """Empirical 2-Wasserstein distance between flattened windows.

    Exact (optimal assignment on squared Euclidean cost) up to
    ``exact_max_n`` points, sliced otherwise. The sliced value is rescaled by
    sqrt(dim) so that a pure translation gives the same answer as the exact
    route.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    a = np.asarray(prior_samples, dtype=np.float64)
    b = np.asarray(data_samples, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise MetricError("sample dimensions differ")
    n = min(len(a), len(b))
    if n < 2:
        raise MetricError("need at least 2 samples on each side")
    if len(a) > n:
        a = a[rng.choice(len(a), n, replace=False)]
    if len(b) > n:
        b = b[rng.choice(len(b), n, replace=False)]
    method = method or ("exact" if n <= exact_max_n else "sliced")
    if method == "exact":
        cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        rows, cols = linear_sum_assignment(cost)
        return WassersteinResult(float(np.sqrt(cost[rows, cols].mean())), "exact", n)
    if method != "sliced":
        raise ValueError(f"unknown method {method!r}")
    dim = a.shape[1]
    theta = rng.standard_normal((dim, n_projections))
    theta /= np.linalg.norm(theta, axis=0, keepdims=True)
    pa = np.sort(a @ theta, axis=0)
    pb = np.sort(b @ theta, axis=0)
    sw2 = np.mean((pa - pb) ** 2)
    return WassersteinResult(float(np.sqrt(dim * sw2)), "sliced", n)


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    r = sqrtm_psd(cov1)
    cross = sqrtm_psd(r @ cov2 @ r)
    val = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def window_features(x) -> np.ndarray:
    """Per window and feature: mean, std, lag-1 and lag-2 autocorrelation,
    dominant non-DC frequency index and normalized spectral entropy."""
    x = _windows(x)
    n, tau, d = x.shape
    mean = x.mean(axis=1)
    xc = x - mean[:, None, :]
    var = (xc**2).mean(axis=1)
    std = np.sqrt(var)
    safe = np.where(var > 0, var, 1.0)

    def acf(lag):
        if lag >= tau:
            return np.zeros((n, d))
        c = (xc[:, lag:] * xc[:, :-lag]).sum(axis=1) / tau
        return np.where(var > 0, c / safe, 0.0)

    power = np.abs(np.fft.rfft(xc, axis=1)) ** 2
    ac = power[:, 1:] if power.shape[1] > 1 else power
    dom = np.argmax(ac, axis=1) + (1 if power.shape[1] > 1 else 0)
    tot = ac.sum(axis=1, keepdims=True)
    p = np.where(tot > 0, ac / np.where(tot > 0, tot, 1.0), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    ent = ent / np.log(ac.shape[1]) if ac.shape[1] > 1 else ent
    feats = np.stack([mean, std, acf(1), acf(2), dom.astype(np.float64), ent], axis=-1)
    return feats.reshape(n, d * 6)


def _gaussian_fit(f):
    mu = f.mean(axis=0)
    cov = np.cov(f, rowvar=False) if len(f) > 1 else np.zeros((f.shape[1], f.shape[1]))
    cov = np.atleast_2d(cov)
    if np.linalg.eigvalsh(cov).min() <= 1e-12:
        for jit in (1e-6, 1e-5, 1e-4):
            if np.linalg.eigvalsh(cov + jit * np.eye(len(cov))).min() > 0:
                cov = cov + jit * np.eye(len(cov))
                break
    return mu, cov


def feature_frechet(real, synth) -> float:
    """Fréchet distance between Gaussian fits of hand-crafted window features."""
    real, synth = _windows(real), _windows(synth)
    if len(real) == 0 or len(synth) == 0:
        raise MetricError("empty batch")
    if real.shape[2] != synth.shape[2]:
        raise MetricError("feature counts differ")
    mr, cr = _gaussian_fit(window_features(real))
    ms, cs = _gaussian_fit(window_features(synth))
    return frechet_distance(mr, cr, ms, cs)


# -- report ------------------------------------------------------------------

REPORT_FIELDS = ("correlational", "discriminative", "predictive", "feature_frechet")


@dataclass
class EvalReport:
    correlational: float
    discriminative: float
    predictive: float
    feature_frechet: float
    n_real: int
    n_synth: int
    seed: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'metric':<18}{'value':>12}"]
        for name in REPORT_FIELDS:
            lines.append(f"{name:<18}{getattr(self, name):>12.4f}")
        return "\n".join(lines)


def evaluate(real, synth, seed: int = 0, model_cfg: ModelEvalConfig | None = None) -> EvalReport:
    real, synth = _windows(real), _windows(synth)
    if real.shape[2] != synth.shape[2]:
        raise MetricError(f"feature counts differ: {real.shape[2]} vs {synth.shape[2]}")
    model_cfg = model_cfg or ModelEvalConfig(seed=seed)
    rep = EvalReport(
        correlational=correlational_score(real, synth),
        discriminative=discriminative_score(real, synth, model_cfg),
        predictive=predictive_score(real, synth, model_cfg),
        feature_frechet=feature_frechet(real, synth),
        n_real=len(real),
        n_synth=len(synth),
        seed=seed,
    )
    for name in REPORT_FIELDS:
        if not np.isfinite(getattr(rep, name)):
            raise MetricError(f"{name} is not finite")
    return rep
