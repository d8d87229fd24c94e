"""Deterministic hashing and random variates.

``uniform_stream`` is counter-based: value ``i`` depends only on
``(seed, name, i)``, never on how many values were drawn before it.
Gamma variates use the Marsaglia-Tsang squeeze/rejection method and Beta
variates are built from two of them.
"""
from __future__ import annotations

import math

import numpy as np

U64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & U64
    return h


def mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, elementwise over a uint64 array."""
    z = np.array(z, dtype=np.uint64)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def uniform_stream(seed: int, name: str, size: int) -> np.ndarray:
    """``size`` uniforms in [0, 1) keyed by (seed, name, flat index)."""
    key = mix64(np.array([(int(seed) & U64) ^ fnv1a_64(name.encode("utf-8"))], dtype=np.uint64))
    with np.errstate(over="ignore"):
        counters = key + np.arange(1, size + 1, dtype=np.uint64) * _GOLDEN
    return (mix64(counters) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def gamma_variates(rng: np.random.Generator, shape: float, size: int) -> np.ndarray:
    """Gamma(shape, 1) variates by Marsaglia and Tsang (2000).

    For ``shape < 1`` the shape+1 variate is boosted by ``U ** (1/shape)``.
    """
    if not shape > 0:
        raise ValueError(f"gamma shape must be positive, got {shape}")
    if shape < 1:
        g = gamma_variates(rng, shape + 1.0, size)
        return g * rng.random(size) ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(size, dtype=np.float64)
    pending = np.arange(size)
    while pending.size:
        n = pending.size
        x = rng.standard_normal(n)
        v = (1.0 + c * x) ** 3
        u = rng.random(n)
        positive = v > 0
        with np.errstate(divide="ignore"):
            log_v = np.log(np.where(positive, v, 1.0))
            log_u = np.log(u)
        x2 = x * x
        accept = positive & ((u < 1.0 - 0.0331 * x2 * x2) | (log_u < 0.5 * x2 + d * (1.0 - v + log_v)))
        out[pending[accept]] = d * v[accept]
        pending = pending[~accept]
    return out


def beta_variates(rng: np.random.Generator, alpha: float, beta: float, size: int) -> np.ndarray:
    """Beta(alpha, beta) as G_a / (G_a + G_b), resampling exact 0 or 1."""
    out = np.empty(size, dtype=np.float64)
    pending = np.arange(size)
    while pending.size:
        ga = gamma_variates(rng, alpha, pending.size)
        gb = gamma_variates(rng, beta, pending.size)
        with np.errstate(invalid="ignore"):
            x = ga / (ga + gb)
        ok = (x > 0.0) & (x < 1.0)
        out[pending[ok]] = x[ok]
        pending = pending[~ok]
    return out
