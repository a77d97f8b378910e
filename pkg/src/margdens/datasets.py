"""Synthetic datasets for demos, smoke training, and calibration runs."""

from __future__ import annotations

import numpy as np


def eight_gaussians_3d(n, rng, noise=0.3):
    """Ring of 8 Gaussian modes at radius 2, third axis alternating +-1."""
    angles = np.arange(8) * (np.pi / 4.0)
    centers = np.column_stack([2.0 * np.cos(angles), 2.0 * np.sin(angles),
                               np.where(np.arange(8) % 2 == 0, 1.0, -1.0)])
    comp = rng.integers(0, 8, size=n)
    return centers[comp] + noise * rng.normal(size=(n, 3))


def two_spirals_3d(n, rng, noise=0.15):
    """Two interleaved planar spirals; third axis tracks the radius."""
    theta = np.sqrt(rng.random(n)) * 3.0 * np.pi
    arm = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    radius = theta / (3.0 * np.pi) * 3.0
    x1 = arm * radius * np.cos(theta) + noise * rng.normal(size=n)
    x2 = arm * radius * np.sin(theta) + noise * rng.normal(size=n)
    x3 = (radius - 1.5) + 0.3 * rng.normal(size=n)
    return np.column_stack([x1, x2, x3])


def correlated_gaussian(n, cov, rng, mean=None):
    cov = np.asarray(cov, dtype=np.float64)
    d = cov.shape[0]
    if mean is None:
        mean = np.zeros(d)
    return rng.multivariate_normal(mean, cov, size=n, method="cholesky")


def linear_ramp_covariance(d):
    """Identity plus off-diagonal entries (i + j - 2) / (5 d), 1-based."""
    i = np.arange(1, d + 1)
    cov = (i[:, None] + i[None, :] - 2) / (5.0 * d)
    np.fill_diagonal(cov, 1.0)
    return cov


def ar1_covariance(d, rho):
    idx = np.arange(d)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def gaussian_mixture_1d(n, rng, weights, means, stds):
    weights = np.asarray(weights, dtype=np.float64)
    comp = rng.choice(len(weights), size=n, p=weights / weights.sum())
    return np.asarray(means)[comp] + np.asarray(stds)[comp] * rng.normal(size=n)


def gaussian_mixture_1d_logpdf(x, weights, means, stds):
    """Exact log density of the generating 1-D mixture."""
    x = np.asarray(x, dtype=np.float64)[:, None]
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    means = np.asarray(means, dtype=np.float64)[None, :]
    stds = np.asarray(stds, dtype=np.float64)[None, :]
    log_comp = (-0.5 * ((x - means) / stds) ** 2
                - np.log(stds) - 0.5 * np.log(2.0 * np.pi))
    peak = log_comp.max(axis=1, keepdims=True)
    return (peak[:, 0]
            + np.log((weights[None, :] * np.exp(log_comp - peak)).sum(axis=1)))


def power_like(n, rng):
    """50k-scale stand-in with the shape of a household power log: six
    correlated, multimodal, dither-smoothed columns, standardized."""
    hour = np.where(rng.random(n) < 0.45,
                    rng.normal(-1.2, 0.35, n), rng.normal(0.9, 0.55, n))
    base = np.abs(rng.normal(0.0, 1.0, n)) + 0.4 * hour
    kitchen = 0.6 * base + np.where(rng.random(n) < 0.3,
                                    rng.normal(2.0, 0.4, n),
                                    rng.normal(0.0, 0.3, n))
    laundry = 0.5 * base + rng.exponential(0.7, n)
    heater = -0.4 * hour + rng.normal(0.0, 0.8, n) ** 2
    voltage = 0.3 * base + rng.normal(0.0, 0.5, n)
    cols = np.column_stack([base, kitchen, laundry, heater, voltage, hour])
    cols += rng.uniform(-0.01, 0.01, size=cols.shape)
    cols -= cols.mean(axis=0)
    cols /= cols.std(axis=0)
    return cols


def mcar_mask(n, d, rate, rng, ensure_observed=True):
    """Independent Bernoulli(rate) missingness; optionally re-reveal one
    coordinate in rows that came out fully missing."""
    mask = rng.random((n, d)) < rate
    if ensure_observed:
        dead = np.flatnonzero(mask.all(axis=1))
        if dead.size:
            keep = rng.integers(0, d, size=dead.size)
            mask[dead, keep] = False
    return mask
