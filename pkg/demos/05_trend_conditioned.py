"""Generate series that follow a given trend.

The endpoint is a least-squares polynomial fitted to each real window, so
every generated window keeps the coarse shape of its source.

    python3 demos/05_trend_conditioned.py [steps]
"""

import sys

import numpy as np
import torch

from timebridge import data as D
from timebridge import priors as P
from timebridge import schedule as S
from timebridge import training as T
from timebridge.denoiser import Denoiser, DenoiserConfig
from timebridge.sampler import SamplerConfig, bridge_sample

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
rng = np.random.default_rng(0)
k = np.arange(24) / 24
slope = rng.uniform(-0.5, 0.5, size=(600, 1, 2))
x = 0.5 + slope * (k[None, :, None] - 0.5) + 0.1 * D.toy_sines(600, 24, 2, rng).values

torch.manual_seed(0)
sched = S.NoiseSchedule()
model = Denoiser(DenoiserConfig(window_len=24, n_features=2))
cfg = T.TrainConfig(batch_size=64, n_steps=steps, lr_warmup_peak=1e-3, warmup_steps=min(200, steps))
T.train(model, x[:500], cfg, T.trend_endpoints("linear"), sched)
model.eval()

test = x[500:]
trend = P.extract_trend(test, "linear")
res = bridge_sample(model.denoise, sched, trend, SamplerConfig(), np.random.default_rng(1))
gen_trend = P.extract_trend(res.x0, "linear")
gen_slope = gen_trend[:, -1] - gen_trend[:, 0]
src_slope = trend[:, -1] - trend[:, 0]
print("correlation of generated vs source trend slopes:", f"{np.corrcoef(gen_slope.ravel(), src_slope.ravel())[0, 1]:.3f}")
print("mean abs trend deviation:", f"{np.mean(np.abs(gen_trend - trend)):.4f}")
