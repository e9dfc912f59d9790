import csv
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from timebridge import data as D
from timebridge import priors as P
from timebridge import schedule as S
from timebridge import training as T
from timebridge.denoiser import Denoiser, DenoiserConfig, load_checkpoint

SCHED = S.NoiseSchedule()


def tiny_model(d=1, tau=16, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    cfg = DenoiserConfig(window_len=tau, n_features=d, n_enc_layers=1, n_dec_layers=1, n_heads=2, head_dim=8,
                         n_topk_freqs=2)
    return Denoiser(cfg).to(dtype)


class Oracle(torch.nn.Module):
    """Returns a fixed target regardless of input."""

    def __init__(self, target):
        super().__init__()
        self.p = torch.nn.Parameter(torch.zeros((), dtype=torch.float64))
        self.target = torch.as_tensor(target)

    def forward(self, x, t, xT, cond=None):
        return SimpleNamespace(total=self.target + 0 * self.p)


class TestWeight:
    def test_identity(self):
        t = np.random.default_rng(0).uniform(1e-4, 1.0, 1000)
        sd = 0.5
        w = T.loss_weight(SCHED, t, sd)
        s2 = S.sigma2(SCHED, t)
        np.testing.assert_allclose(w * s2 * sd**2, s2 + sd**2, rtol=4e-16, atol=0)

    def test_guard(self):
        with pytest.raises(S.ScheduleDomainError):
            T.loss_weight(SCHED, 0.0, 0.5)


class TestLossTerms:
    def test_parseval(self):
        rng = np.random.default_rng(1)
        for shape in [(4, 24, 3), (2, 25, 1), (3, 64, 2)]:
            a = torch.as_tensor(rng.normal(size=shape))
            b = torch.as_tensor(rng.normal(size=shape))
            tt, ff = T.loss_terms(a, b)
            assert torch.max(torch.abs(tt - ff)) < 1e-10

    def test_zero_for_perfect_prediction(self):
        x = torch.randn(3, 10, 2, dtype=torch.float64)
        tt, ff = T.loss_terms(x, x.clone())
        assert torch.all(tt == 0) and torch.all(ff == 0)


class TestTrainingLoss:
    def setup_method(self):
        self.x0 = np.random.default_rng(0).normal(size=(8, 16, 1))
        self.prior = P.Prior("standard", shape=(16, 1))

    def test_perfect_oracle(self):
        loss, stats = T.training_loss(Oracle(self.x0), self.x0, T.unconditional_endpoints(self.prior), SCHED,
                                      T.TrainConfig(), np.random.default_rng(0))
        assert loss.item() == 0.0 and stats.time_term == 0.0

    def test_lambda_zero_is_weighted_time_term(self):
        model = tiny_model()
        cfg0 = T.TrainConfig(lambda_fourier=0.0)
        cfg1 = T.TrainConfig(lambda_fourier=1.0)
        ep = T.unconditional_endpoints(self.prior)
        l0, s0 = T.training_loss(model, self.x0, ep, SCHED, cfg0, np.random.default_rng(3))
        l1, s1 = T.training_loss(model, self.x0, ep, SCHED, cfg1, np.random.default_rng(3))
        # same draws; the Fourier term equals the time term by Parseval, so l1 = 2 l0
        assert l1.item() == pytest.approx(2 * l0.item(), rel=1e-10)
        assert s0.time_term == pytest.approx(s0.freq_term, rel=1e-10)

    def test_non_finite_reports_example(self):
        bad = self.x0.copy()
        bad[3, 0, 0] = np.nan
        with pytest.raises(T.TrainingError, match="example 3"):
            T.training_loss(Oracle(self.x0), bad, T.unconditional_endpoints(self.prior), SCHED,
                            T.TrainConfig(), np.random.default_rng(0))

    def test_endpoint_factories(self):
        rng = np.random.default_rng(0)
        x = np.random.default_rng(1).normal(size=(3, 16, 2))
        assert T.trend_endpoints("linear")(x, rng).shape == x.shape
        sp = T.spline_endpoints(D.MaskSpec("random", 0.5, seed=2))(x, rng)
        assert sp.shape == x.shape


class TestSchedule:
    def test_warmup_then_decay(self):
        f = T.lr_lambda(T.TrainConfig(warmup_steps=10))
        assert f(0) == pytest.approx(0.1)
        assert f(9) == 1.0
        assert f(39) == pytest.approx(0.5)


class TestTrain:
    def test_loss_decreases(self):
        data = D.toy_sines(256, 16, 1, np.random.default_rng(0)).values
        prior = P.Prior("data", P.fit_data_stats(data))
        model = tiny_model(dtype=torch.float32)
        cfg = T.TrainConfig(batch_size=32, n_steps=500, lr_warmup_peak=2e-3, warmup_steps=50, seed=0)
        res = T.train(model, data, cfg, T.unconditional_endpoints(prior), SCHED)
        losses = np.array([h[1] for h in res.history])
        assert losses[-50:].mean() <= 0.5 * losses[:10].mean()

    def test_resume_reproduces_next_loss(self, tmp_path):
        data = D.toy_sines(64, 16, 1, np.random.default_rng(0)).values
        prior = P.Prior("standard", shape=(16, 1))
        cfg = T.TrainConfig(batch_size=8, n_steps=6, warmup_steps=3, lr_warmup_peak=1e-3, checkpoint_every=0)
        ep = T.unconditional_endpoints(prior)

        full = T.train(tiny_model(), data, cfg, ep, SCHED)
        T.train(tiny_model(), data, cfg, ep, SCHED, out_dir=tmp_path, n_steps=4)
        model, payload = load_checkpoint(tmp_path / "checkpoint.tbrg")
        assert payload["step"] == 4
        resumed = T.train(model, data, cfg, ep, SCHED, out_dir=tmp_path, resume=payload)
        assert resumed.step == 6
        for a, b in zip(full.history[4:], resumed.history):
            assert a[0] == b[0]
            assert abs(a[1] - b[1]) < 1e-6

        with open(tmp_path / "loss.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "loss", "time_term", "freq_term"]
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 5, 6]

    def test_divergence_detected(self):
        data = D.toy_sines(32, 16, 1, np.random.default_rng(0)).values
        prior = P.Prior("standard", shape=(16, 1))
        cfg = T.TrainConfig(batch_size=8, n_steps=200, lr_warmup_peak=1e-4, divergence_factor=2.0,
                            divergence_patience=5)
        calls = []

        def exploding(x0, rng):
            # finite but much larger endpoints once the baseline is set
            calls.append(1)
            scale = 1.0 if len(calls) <= 10 else 1e3
            return scale * prior.sample(len(x0), rng)

        with pytest.raises(T.TrainingError, match="diverged") as err:
            T.train(tiny_model(dtype=torch.float32), data, cfg, exploding, SCHED)
        assert "step 15" in str(err.value)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            T.TrainConfig(t_min=0.0)
        with pytest.raises(ValueError):
            T.TrainConfig(sigma_data=0.0)
