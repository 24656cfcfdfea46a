import numpy as np


def toy_counts(L=3, T=30, V=3, per_day=50, seed=0):
    """Small count cube with drifting prevalences and a few empty days."""
    rng = np.random.default_rng(seed)
    t = np.linspace(-1, 1, T)
    slopes = rng.normal(size=(L, V - 1))
    eta = rng.normal(scale=0.5, size=(L, 1, V - 1)) + slopes[:, None, :] * t[None, :, None]
    theta = np.concatenate([np.exp(eta), np.ones((L, T, 1))], axis=-1)
    pi = theta / theta.sum(axis=-1, keepdims=True)
    n = rng.poisson(per_day, size=(L, T))
    n[0, :3] = 0
    return rng.multinomial(n, pi)


def fd_gradient(f, u, h=1e-5):
    g = np.empty_like(u)
    for i in range(len(u)):
        e = np.zeros_like(u)
        e[i] = h
        g[i] = (f(u + e) - f(u - e)) / (2 * h)
    return g
