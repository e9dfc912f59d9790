"""Score perturbed copies of a dataset with every metric.

Each case changes one property of the toy sines. The table shows which
metric notices what.

    python3 demos/06_metrics.py
"""

import warnings

import numpy as np

from timebridge import data as D
from timebridge import metrics as M

rng = np.random.default_rng(0)
real = D.toy_sines(600, 24, 2, rng).values
other = D.toy_sines(600, 24, 2, rng).values
k = np.arange(24)[None, :, None]
fast_freq = 0.5 * (np.sin(2 * np.pi * rng.uniform(4, 9, (600, 1, 2)) * k / 24 + rng.uniform(0, 7, (600, 1, 2))) + 1)

cases = {
    "independent draw": other,
    "amplitude shrunk 20%": 0.5 + 0.8 * (other - 0.5),
    "faster frequencies": fast_freq,
    "timestamps shuffled": other[:, rng.permutation(24)],
    "second feature = first": np.repeat(other[:, :, :1], 2, axis=2),
}
fast = M.ModelEvalConfig(steps=500)
print(f"{'case':<26}{'corr':>8}{'disc':>8}{'pred':>8}{'frechet':>10}")
for name, synth in cases.items():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = M.evaluate(real, synth, seed=0, model_cfg=fast)
    print(f"{name:<26}{rep.correlational:>8.3f}{rep.discriminative:>8.3f}{rep.predictive:>8.3f}"
          f"{rep.feature_frechet:>10.2f}")
