import math

import numpy as np
import pytest
import torch

from timebridge.denoiser import (
    Denoiser,
    DenoiserConfig,
    ModelError,
    TrendHead,
    fourier_extrapolate,
    load_checkpoint,
    poly_basis,
    save_checkpoint,
)


def small_cfg(**kw):
    base = dict(window_len=24, n_features=3, n_enc_layers=1, n_dec_layers=2, n_heads=2, head_dim=8, n_topk_freqs=3)
    base.update(kw)
    return DenoiserConfig(**base)


@pytest.fixture
def model64():
    torch.manual_seed(0)
    return Denoiser(small_cfg()).double()


class TestConfig:
    def test_topk_bound(self):
        with pytest.raises(ValueError):
            DenoiserConfig(window_len=24, n_topk_freqs=14)
        DenoiserConfig(window_len=24, n_topk_freqs=13)

    def test_d_model(self):
        assert DenoiserConfig(n_heads=4, head_dim=16).d_model == 64


class TestSeasonal:
    @pytest.mark.parametrize("tau", [24, 64])
    @pytest.mark.parametrize("bin_", [0, 1, 3, 5])
    def test_pure_sinusoid_single_bin(self, tau, bin_):
        k = torch.arange(tau, dtype=torch.float64)
        x = 1.7 * torch.cos(2 * math.pi * bin_ * k / tau + 0.4)
        out = fourier_extrapolate(x.reshape(1, tau, 1), 1)[0, :, 0]
        assert torch.max(torch.abs(out - x)) < 1e-5

    @pytest.mark.parametrize("tau", [24, 25, 64])
    def test_full_spectrum_round_trip(self, tau):
        x = torch.randn(4, tau, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        out = fourier_extrapolate(x, tau // 2 + 1)
        assert torch.max(torch.abs(out - x)) < 1e-5

    def test_nyquist_bin(self):
        tau = 24
        x = torch.cos(math.pi * torch.arange(tau, dtype=torch.float64)).reshape(1, tau, 1)
        assert torch.max(torch.abs(fourier_extrapolate(x, 1) - x)) < 1e-10

    def test_zero(self):
        assert torch.all(fourier_extrapolate(torch.zeros(2, 24, 2), 3) == 0)

    def test_idempotent_on_band_limited(self):
        tau = 32
        k = torch.arange(tau, dtype=torch.float64)
        x = (torch.sin(2 * math.pi * 2 * k / tau) + 0.5 * torch.cos(2 * math.pi * 7 * k / tau)).reshape(1, tau, 1)
        once = fourier_extrapolate(x, 2)
        assert torch.max(torch.abs(once - x)) < 1e-10
        assert torch.max(torch.abs(fourier_extrapolate(once, 2) - once)) < 1e-10

    def test_keeps_strongest_bin(self):
        tau = 24
        k = torch.arange(tau, dtype=torch.float64)
        x = (0.3 * torch.cos(2 * math.pi * 2 * k / tau) + torch.cos(2 * math.pi * 5 * k / tau)).reshape(1, tau, 1)
        out = fourier_extrapolate(x, 1)[0, :, 0]
        np.testing.assert_allclose(out.numpy(), torch.cos(2 * math.pi * 5 * k / tau).numpy(), atol=1e-10)


class TestTrend:
    def test_basis(self):
        c = poly_basis(4, 3, torch.float64)
        assert c.shape == (4, 4)
        assert torch.all(c[:, 0] == 1)
        np.testing.assert_allclose(c[:, 1].numpy(), [0, 0.25, 0.5, 0.75])

    def test_zero_hidden_zero_bias(self):
        head = TrendHead(24, 16, 2, 3).double()
        for p in head.parameters():
            torch.nn.init.zeros_(p)
        assert torch.all(head(torch.zeros(3, 24, 16, dtype=torch.float64)) == 0)

    def test_linear_coefficients(self):
        c = poly_basis(10, 3, torch.float64)
        coef = torch.tensor([[0.0], [1.0], [0.0], [0.0]], dtype=torch.float64)
        out = (c @ coef)[:, 0]
        np.testing.assert_allclose(out.numpy(), np.arange(10) / 10, atol=1e-15)
        coef = torch.tensor([[2.0], [0.0], [0.0], [0.0]], dtype=torch.float64)
        assert torch.all((c @ coef) == 2.0)

    def test_output_in_polynomial_span(self):
        torch.manual_seed(3)
        head = TrendHead(24, 16, 2, 3).double()
        out = head(torch.randn(2, 24, 16, dtype=torch.float64))
        c = poly_basis(24, 3, torch.float64).numpy()
        for b in range(2):
            coef, *_ = np.linalg.lstsq(c, out[b].detach().numpy(), rcond=None)
            assert np.max(np.abs(c @ coef - out[b].detach().numpy())) < 1e-8


class TestForward:
    def test_shapes_and_decomposition(self, model64):
        x = torch.randn(5, 24, 3, dtype=torch.float64)
        out = model64(x, torch.rand(5, dtype=torch.float64), torch.randn_like(x))
        assert out.total.shape == (5, 24, 3)
        assert torch.equal(out.total, (out.trend + out.seasonal) + out.residual)

    def test_embedding_length_and_sensitivity(self, model64):
        x = torch.randn(2, 24, 3, dtype=torch.float64)
        xT = torch.randn_like(x)
        h, _ = model64.embed_inputs(x, 0.5, xT)
        assert h.shape == (2, 24, model64.cfg.d_model)
        h2, _ = model64.embed_inputs(x, 0.5, xT + 0.1)
        assert not torch.allclose(h, h2)
        h0, _ = model64.embed_inputs(x, 0.0, xT)
        h1, _ = model64.embed_inputs(x, 1.0, xT)
        assert not torch.allclose(h0, h1)

    def test_shape_mismatch(self, model64):
        with pytest.raises(ModelError):
            model64(torch.zeros(1, 20, 3, dtype=torch.float64), 0.5, torch.zeros(1, 20, 3, dtype=torch.float64))

    def test_nan_head_identified(self, model64):
        with torch.no_grad():
            model64.residual.bias.fill_(float("nan"))
        x = torch.zeros(1, 24, 3, dtype=torch.float64)
        with pytest.raises(ModelError, match="residual"):
            model64(x, 0.5, x)

    def test_deterministic(self, model64):
        x = torch.randn(2, 24, 3, dtype=torch.float64)
        model64.eval()
        a = model64(x, 0.3, x).total
        b = model64(x, 0.3, x).total
        assert torch.equal(a, b)

    def test_conditioning(self):
        torch.manual_seed(0)
        m = Denoiser(small_cfg(cond_features=2)).double()
        x = torch.randn(2, 24, 3, dtype=torch.float64)
        c = torch.randn(2, 24, 2, dtype=torch.float64)
        assert m(x, 0.5, x, c).total.shape == x.shape
        with pytest.raises(ModelError):
            m(x, 0.5, x)

    def test_gradient_check(self, model64):
        gen = torch.Generator().manual_seed(5)
        x = torch.randn(2, 24, 3, dtype=torch.float64, generator=gen)
        xT = torch.randn(2, 24, 3, dtype=torch.float64, generator=gen)
        target = torch.randn(2, 24, 3, dtype=torch.float64, generator=gen)
        t = torch.tensor([0.3, 0.7], dtype=torch.float64)

        def loss():
            return ((model64(x, t, xT).total - target) ** 2).mean()

        model64.zero_grad()
        loss().backward()
        params = [(n, p) for n, p in model64.named_parameters() if p.grad is not None]
        rng = np.random.default_rng(0)
        checked = 0
        heads = {"trend", "seasonal", "residual", "mean_proj"}
        picks = [params[i] for i in rng.choice(len(params), 10, replace=False)]
        # make sure every head has at least one probed weight
        picks += [(n, p) for n, p in params if any(h in n for h in heads) and n.endswith("weight")][:4]
        for name, p in picks:
            flat = p.data.view(-1)
            i = int(rng.integers(flat.numel()))
            g = p.grad.view(-1)[i].item()
            eps = 1e-6
            with torch.no_grad():
                orig = flat[i].item()
                flat[i] = orig + eps
                lp = loss().item()
                flat[i] = orig - eps
                lm = loss().item()
                flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g), 1e-6), name
            checked += 1
        assert checked >= 10

    def test_numpy_denoise_wrapper(self, model64):
        x = np.random.default_rng(0).normal(size=(3, 24, 3))
        out = model64.denoise(x, 0.5, x)
        assert out.shape == x.shape and out.dtype == np.float64
        assert model64.denoise(x[0], 0.5, x[0]).shape == (24, 3)


def test_checkpoint_round_trip(tmp_path, model64):
    path = tmp_path / "m.tbrg"
    save_checkpoint(path, model64, step=7, rng_state={"a": 1})
    assert path.read_bytes()[:5] == b"TBRG1"
    m2, payload = load_checkpoint(path)
    assert payload["step"] == 7 and payload["rng_state"] == {"a": 1}
    x = torch.randn(2, 24, 3, dtype=torch.float64)
    model64.eval()
    m2.eval()
    assert torch.equal(model64(x, 0.5, x).total, m2(x, 0.5, x).total)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"xxxxxxxx")
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "bad")
