"""Train a small bridge denoiser on toy sines and sample from the data-Gaussian prior.

    python3 demos/02_unconditional.py [steps]
"""

import sys

import numpy as np
import torch

from timebridge import data as D
from timebridge import metrics as M
from timebridge import priors as P
from timebridge import schedule as S
from timebridge import training as T
from timebridge.denoiser import Denoiser, DenoiserConfig
from timebridge.sampler import SamplerConfig, sample_unconditional

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
torch.manual_seed(0)
x = D.toy_sines(500, 24, 2, np.random.default_rng(0)).values
prior = P.Prior("data", P.fit_data_stats(x))
sched = S.NoiseSchedule()

model = Denoiser(DenoiserConfig(window_len=24, n_features=2))
cfg = T.TrainConfig(batch_size=64, n_steps=steps, lr_warmup_peak=1e-3, warmup_steps=min(200, steps))
res = T.train(model, x, cfg, T.unconditional_endpoints(prior), sched)
print(f"trained {res.step} steps in {res.seconds:.0f}s, last loss {res.history[-1][1]:.4f}")

model.eval()
out = sample_unconditional(model.denoise, sched, prior, SamplerConfig(), np.random.default_rng(1), n=200)
print(f"200 samples, NFE {out.nfe}, {out.wall_ms / 200:.1f} ms/sample")
print(f"correlational score {M.correlational_score(x, out.x0):.4f}")
print(f"feature Frechet     {M.feature_frechet(x, out.x0):.4f}")
