"""Closed-form helpers shared by several test files."""

from timebridge import schedule as S


def gaussian_denoiser(sched, mean, var):
    """Posterior mean E[x0 | x_t, x_T] for x0 ~ N(mean, var) independent of x_T."""

    def den(x, t, xT):
        c_T, c_0, v = S.bridge_coefficients(sched, t)
        return mean + var * c_0 * (x - c_T * xT - c_0 * mean) / (c_0**2 * var + v)

    return den


class StdNormal:
    def __init__(self, shape=(1, 1)):
        self.shape = shape

    def sample(self, n, rng):
        return rng.standard_normal((n,) + self.shape)
