"""Irradiance and composition scenarios shared by the unit and acceptance tests."""
import numpy as np

from drape.appearance import EnvironmentLight, compute_irradiance_table, irradiance_direct


def random_normals(n=100, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def bright_texel_env(h=16, w=32, row=5, col=9, base=1.0, peak=20.0):
    r = np.full((h, w, 3), base)
    r[row, col] = (peak, 0.5 * peak, 0.25 * peak)
    return EnvironmentLight(r)


def monte_carlo_irradiance(env, normals, n=1_000_000, seed=1, chunk=100_000):
    """Uniform-sphere estimate E(n) = 4 pi mean(L(d) max(n.d, 0)), shared samples."""
    rad = np.asarray(env.radiance)
    h, w = rad.shape[:2]
    rng = np.random.default_rng(seed)
    acc = np.zeros((len(normals), 3))
    done = 0
    while done < n:
        m = min(chunk, n - done)
        z = rng.uniform(-1, 1, m)
        phi = rng.uniform(0, 2 * np.pi, m)
        s = np.sqrt(1 - z * z)
        d = np.stack([s * np.cos(phi), s * np.sin(phi), z], 1)
        i = np.minimum((np.arccos(z) / np.pi * h).astype(int), h - 1)
        j = np.minimum((phi / (2 * np.pi) * w).astype(int), w - 1)
        cos = np.maximum(normals @ d.T, 0.0)
        acc += cos @ rad[i, j]
        done += m
    return 4 * np.pi * acc / n


def constant_env_error(c=0.7, mode="grid"):
    n = random_normals(100, 3)
    e = compute_irradiance_table(EnvironmentLight.uniform(c), mode).evaluate(n)
    return float(np.abs(e / (np.pi * c) - 1).max())


def bright_env_error(mode="grid"):
    env = bright_texel_env()
    n = random_normals(100, 4)
    ref = monte_carlo_irradiance(env, n)
    got = irradiance_direct(env, n) if mode == "direct" else \
        compute_irradiance_table(env, mode).evaluate(n)
    return float(np.abs(got / ref - 1).max())
