"""Decomposition denoiser ``D(x_t, t, x_T)``.

An encoder-decoder transformer over timestamps. Every decoder block feeds a
polynomial trend head and a Fourier seasonal head; the final decoder state
feeds a residual head. The data estimate is their sum.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

CHECKPOINT_MAGIC = b"TBRG1"


class ModelError(RuntimeError):
    pass


@dataclass
class DenoiserConfig:
    window_len: int = 24
    n_features: int = 1
    n_enc_layers: int = 1
    n_dec_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    n_topk_freqs: int = 3
    poly_degree: int = 3
    cond_features: int = 0
    mlp_ratio: int = 4
    time_scale: float = 1000.0

    def __post_init__(self):
        for name in ("window_len", "n_features", "n_enc_layers", "n_dec_layers",
                     "n_heads", "head_dim", "n_topk_freqs", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.poly_degree < 0 or self.cond_features < 0:
            raise ValueError("poly_degree and cond_features must be non-negative")
        if self.n_topk_freqs > self.window_len // 2 + 1:
            raise ValueError(f"n_topk_freqs={self.n_topk_freqs} exceeds {self.window_len // 2 + 1} bins")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim


# per-dataset backbone sizes for unconditional generation
PRESETS = {
    "sines": dict(n_heads=4, head_dim=16, n_enc_layers=1, n_dec_layers=2),
    "mujoco": dict(n_heads=4, head_dim=16, n_enc_layers=3, n_dec_layers=2),
    "etth": dict(n_heads=4, head_dim=16, n_enc_layers=3, n_dec_layers=2),
    "stocks": dict(n_heads=4, head_dim=16, n_enc_layers=2, n_dec_layers=2),
    "energy": dict(n_heads=4, head_dim=24, n_enc_layers=4, n_dec_layers=3),
    "fmri": dict(n_heads=4, head_dim=24, n_enc_layers=4, n_dec_layers=4),
}


class DecomposedOutput(NamedTuple):
    trend: torch.Tensor
    seasonal: torch.Tensor
    residual: torch.Tensor
    total: torch.Tensor


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def poly_basis(tau: int, degree: int, dtype=torch.float64) -> torch.Tensor:
    """(tau, degree+1) Vandermonde matrix in c_k = k / tau."""
    c = torch.arange(tau, dtype=dtype) / tau
    return torch.stack([c**p for p in range(degree + 1)], dim=1)


def fourier_extrapolate(signal: torch.Tensor, k: int) -> torch.Tensor:
    """Rebuild ``signal`` (batch, tau, d) from its ``k`` strongest rfft bins.

    Each kept bin contributes ``A [cos(2 pi f n + phi) + cos(2 pi f' n + phi')]``
    where the primed terms belong to the conjugate bin; DC and Nyquist are
    their own conjugates and are counted once. Scaling by 1/tau gives unit
    gain, so keeping every bin reproduces the input.
    """
    tau = signal.shape[1]
    spec = torch.fft.rfft(signal, dim=1)
    amp = spec.abs()
    phase = torch.angle(spec)
    # stable descending sort: ties go to the lower frequency
    order = torch.sort(amp, dim=1, descending=True, stable=True).indices[:, :k]
    a = torch.gather(amp, 1, order)
    ph = torch.gather(phase, 1, order)
    f = order.to(signal.dtype) / tau
    self_conj = (order == 0) | ((tau % 2 == 0) & (order == tau // 2))
    n = torch.arange(tau, dtype=signal.dtype, device=signal.device)
    # (batch, k, d, 1) x (tau,) -> (batch, k, d, tau)
    arg = 2 * math.pi * f[..., None] * n + ph[..., None]
    pair = torch.cos(arg) + torch.where(self_conj[..., None], torch.zeros_like(arg), torch.cos(-arg))
    out = (a[..., None] * pair).sum(dim=1) / tau
    return out.transpose(1, 2)


class TrendHead(nn.Module):
    def __init__(self, tau: int, d_model: int, n_features: int, degree: int):
        super().__init__()
        self.time_proj = nn.Linear(tau, degree + 1)
        self.feat_proj = nn.Linear(d_model, n_features)
        self.basis64 = poly_basis(tau, degree)

    def coefficients(self, w: torch.Tensor) -> torch.Tensor:
        # (batch, tau, d_model) -> (batch, degree+1, n_features)
        c = self.time_proj(w.transpose(1, 2)).transpose(1, 2)
        return self.feat_proj(c)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        return self.basis64.to(w.dtype) @ self.coefficients(w)


class SeasonalHead(nn.Module):
    def __init__(self, d_model: int, n_features: int, k: int):
        super().__init__()
        self.proj = nn.Linear(d_model, n_features)
        self.k = k

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        return fourier_extrapolate(self.proj(w), self.k)


class MLP(nn.Sequential):
    def __init__(self, d_model: int, ratio: int):
        super().__init__(nn.Linear(d_model, ratio * d_model), nn.GELU(), nn.Linear(ratio * d_model, d_model))


class EncoderBlock(nn.Module):
    def __init__(self, d_model, n_heads, mlp_ratio):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = MLP(d_model, mlp_ratio)

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        dm = cfg.d_model
        self.ln1 = nn.LayerNorm(dm)
        self.self_attn = nn.MultiheadAttention(dm, cfg.n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dm)
        self.cross_attn = nn.MultiheadAttention(dm, cfg.n_heads, batch_first=True)
        self.ln3 = nn.LayerNorm(dm)
        self.mlp = MLP(dm, cfg.mlp_ratio)
        self.trend = TrendHead(cfg.window_len, dm, cfg.n_features, cfg.poly_degree)
        self.seasonal = SeasonalHead(dm, cfg.n_features, cfg.n_topk_freqs)
        self.mean_proj = nn.Linear(dm, cfg.n_features)

    def forward(self, x, memory):
        h = self.ln1(x)
        x = x + self.self_attn(h, h, h, need_weights=False)[0]
        h = self.ln2(x)
        x = x + self.cross_attn(h, memory, memory, need_weights=False)[0]
        x = x + self.mlp(self.ln3(x))
        # per-block level term: time-mean of the block output, broadcast over timestamps
        level = self.mean_proj(x.mean(dim=1, keepdim=True)).expand(-1, x.shape[1], -1)
        trend = self.trend(x) + level
        season = self.seasonal(x)
        # the next block sees the stream with the explained level removed
        return x - x.mean(dim=1, keepdim=True), trend, season


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d, dm = cfg.n_features, cfg.d_model
        self.prior_proj = nn.Linear(d, d)
        self.in_proj = nn.Linear(2 * d + cfg.cond_features, dm)
        self.pos = nn.Parameter(torch.zeros(1, cfg.window_len, dm))
        nn.init.normal_(self.pos, std=0.02)
        self.time_mlp = nn.Sequential(nn.Linear(dm, dm), nn.SiLU(), nn.Linear(dm, dm))
        self.encoder = nn.ModuleList(EncoderBlock(dm, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_enc_layers))
        self.dec_in = nn.Linear(2 * d + cfg.cond_features, dm)
        self.decoder = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_dec_layers))
        self.ln_out = nn.LayerNorm(dm)
        self.residual = nn.Linear(dm, d)

    def _tokens(self, x_t, x_T, cond):
        parts = [x_t, self.prior_proj(x_T)]
        if self.cfg.cond_features:
            if cond is None:
                raise ModelError("model was built with a conditioning input but none was given")
            parts.append(cond)
        return torch.cat(parts, dim=-1)

    def embed_inputs(self, x_t, t, x_T, cond=None):
        """(batch, tau, d) inputs -> (batch, tau, d_model) encoder tokens."""
        self._check_shapes(x_t, x_T)
        t = self._time_vector(t, x_t)
        temb = self.time_mlp(sinusoidal_embedding(t * self.cfg.time_scale, self.cfg.d_model))
        tok = self._tokens(x_t, x_T, cond)
        return self.in_proj(tok) + self.pos + temb[:, None, :], temb

    def _time_vector(self, t, ref):
        t = torch.as_tensor(t, dtype=ref.dtype, device=ref.device)
        if t.ndim == 0:
            t = t.expand(ref.shape[0])
        return t

    def _check_shapes(self, x_t, x_T):
        want = (self.cfg.window_len, self.cfg.n_features)
        if tuple(x_t.shape[1:]) != want or x_t.shape != x_T.shape:
            raise ModelError(f"expected x_t and x_T of shape (batch, {want[0]}, {want[1]}), "
                             f"got {tuple(x_t.shape)} and {tuple(x_T.shape)}")

    def forward(self, x_t, t, x_T, cond=None) -> DecomposedOutput:
        h, temb = self.embed_inputs(x_t, t, x_T, cond)
        for blk in self.encoder:
            h = blk(h)
        memory = h
        y = self.dec_in(self._tokens(x_t, x_T, cond)) + self.pos + temb[:, None, :]
        trend = torch.zeros_like(x_t)
        season = torch.zeros_like(x_t)
        for blk in self.decoder:
            y, tr, se = blk(y, memory)
            trend = trend + tr
            season = season + se
        residual = self.residual(self.ln_out(y))
        for name, v in (("trend", trend), ("seasonal", season), ("residual", residual)):
            if not torch.isfinite(v).all():
                raise ModelError(f"non-finite values in the {name} head")
        total = (trend + season) + residual
        return DecomposedOutput(trend, season, residual, total)

    @torch.no_grad()
    def denoise(self, x_t, t, x_T, cond=None):
        """numpy-in, numpy-out convenience used by the samplers."""
        import numpy as np

        p = next(self.parameters())
        xt = torch.as_tensor(np.asarray(x_t), dtype=p.dtype)
        xT = torch.as_tensor(np.asarray(x_T), dtype=p.dtype)
        c = None if cond is None else torch.as_tensor(np.asarray(cond), dtype=p.dtype)
        squeeze = xt.ndim == 2
        if squeeze:
            xt, xT = xt[None], xT[None]
            c = None if c is None else c[None]
        was_training = self.training
        self.eval()
        out = self.forward(xt, float(t), xT, c).total
        self.train(was_training)
        out = out.double().numpy()
        return out[0] if squeeze else out


def save_checkpoint(path, model: Denoiser, step: int = 0, optimizer=None, rng_state=None, extra=None):
    payload = {
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "step": step,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, payload)``; the payload keeps step, optimizer and rng state."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ModelError(f"{path}: not a checkpoint (magic {magic!r})")
        payload = torch.load(io.BytesIO(fh.read()), weights_only=False)
    model = Denoiser(DenoiserConfig(**payload["config"]))
    sd = payload["state_dict"]
    model.to(next(iter(sd.values())).dtype)
    model.load_state_dict(sd)
    return model, payload
