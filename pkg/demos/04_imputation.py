"""Impute masked cells with the point-preserving sampler.

Observed cells are never touched. Missing cells start from the linear
spline through the observations and are refined by the bridge.

    python3 demos/04_imputation.py [steps]
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
from timebridge.sampler import SamplerConfig, sample_point_preserving

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
torch.manual_seed(0)
x = D.toy_sines(600, 24, 2, np.random.default_rng(0)).values
train, test = x[:500], x[500:]
spec = D.MaskSpec("random", 0.5, seed=1)
sched = S.NoiseSchedule()

model = Denoiser(DenoiserConfig(window_len=24, n_features=2))
cfg = T.TrainConfig(batch_size=64, n_steps=steps, lr_warmup_peak=1e-3, warmup_steps=min(200, steps))
T.train(model, train, cfg, T.spline_endpoints(spec), sched)
model.eval()

mask = D.make_mask(test.shape, spec)
endpoint = P.spline_interpolate(test, 1.0 - mask)
res = sample_point_preserving(model.denoise, sched, endpoint, mask, SamplerConfig(), np.random.default_rng(2))

keep = mask == 0
print("observed cells untouched:", np.array_equal(res.x0[keep], test[keep]))
print("spline only   MSE %.5f  MAE %.5f" % M.imputation_error(test, endpoint.values, mask))
print("bridge        MSE %.5f  MAE %.5f" % M.imputation_error(test, res.x0, mask))
