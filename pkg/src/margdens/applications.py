"""Inference procedures built on exact marginals and conditionals.

* Mutual information between arbitrary disjoint variable subsets,
  estimated by Monte Carlo over evaluation points using one fitted
  joint model (the three log-density terms share a single network
  forward pass per chunk).
* Conditional independence testing: transform each observation through
  the conditional CDFs U1 = F(x_i | x_cond), U2 = F(x_j | x_cond) and
  test U1, U2 for independence with Kendall's tau (normal
  approximation for the null).
* Anomaly scoring as negative log (marginal) likelihood, which copes
  with missing coordinates for free.
* A non-marginalizable variant that sharpens fits by passing the input
  through v = x + T sigma(x) with T strictly upper triangular and
  nonnegative, whose Jacobian determinant is exactly one, before an
  independent product density.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import erfc, sqrt

import numpy as np
from scipy.stats import kendalltau

from .errors import NumericalError
from .ht import (LOG_DENOMINATOR_FLOOR, MdmaModel, _KIND_CDF, _KIND_DENSITY,
                 _KIND_ONE, _contract_rescaled, leaf_log_factors,
                 log_density, log_density_batch)
from .univariate import (PhiBank, bank_logpdf_and_xgrad, layer_sizes,
                         softplus, softplus_grad)


# ---------------------------------------------------------------------------
# Mutual information.
# ---------------------------------------------------------------------------


def _check_subset(name, subset, d):
    idx = sorted(int(v) for v in subset)
    if not idx:
        raise ValueError("%s subset must be nonempty" % name)
    if len(set(idx)) != len(idx):
        raise ValueError("%s subset has repeated indices" % name)
    if idx[0] < 0 or idx[-1] >= d:
        raise ValueError("%s subset indices out of range" % name)
    return idx


def estimate_mi(model: MdmaModel, data, subset_y, subset_z,
                use_model_samples: bool = False, n_samples: int | None = None,
                rng=None, chunk: int = 2048) -> float:
    """Monte Carlo mutual information between two variable subsets.

    Averages log f(x_{Y u Z}) - log f(x_Y) - log f(x_Z) over the rows of
    ``data`` (by default the training points; with use_model_samples the
    evaluation points are drawn from the model itself).  Each term is a
    marginal log density of the same fitted joint, so no extra models
    are needed, and one bank forward per chunk serves all three terms.
    """
    y = _check_subset("Y", subset_y, model.d)
    z = _check_subset("Z", subset_z, model.d)
    if set(y) & set(z):
        raise ValueError("subsets must be disjoint")

    if use_model_samples:
        from .sampling import sample
        if n_samples is None or rng is None:
            raise ValueError("model sampling requires n_samples and rng")
        data = sample(model, n_samples, rng)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d:
        raise ValueError("data must have shape (n, %d)" % model.d)
    if not np.isfinite(x).all():
        raise ValueError("non-finite input")

    union = sorted(set(y) | set(z))
    order = model.ht.leaf_order
    total = 0.0
    for start in range(0, x.shape[0], chunk):
        block = x[start:start + chunk]
        logpdf = model.phi_bank.logpdf(block)
        for subset, sign in ((union, 1.0), (y, -1.0), (z, -1.0)):
            factors = np.zeros_like(logpdf)
            factors[:, subset, :] = logpdf[:, subset, :]
            term = _contract_rescaled(model.ht, factors[:, order, :])
            total += sign * term.sum()
    return total / x.shape[0]


# ---------------------------------------------------------------------------
# Conditional independence testing.
# ---------------------------------------------------------------------------


@dataclass
class CiTestResult:
    statistic: float        # Kendall's tau on (U1, U2)
    p_value: float
    u1_u2: np.ndarray       # (n_kept, 2) conditional CDF values
    alpha: float

    @property
    def reject(self) -> bool:
        return self.p_value < self.alpha


def conditional_cdf_values(model: MdmaModel, data, target: int, cond):
    """Per-row conditional CDF F(x_target | x_cond), marginalizing the rest.

    Returns (u, valid): u in [0, 1] where valid, NaN where the
    conditioning density underflowed.
    """
    x = np.asarray(data, dtype=np.float64)
    kinds_num = np.full(model.d, _KIND_ONE)
    kinds_num[list(cond)] = _KIND_DENSITY
    kinds_den = kinds_num.copy()
    kinds_num[target] = _KIND_CDF

    log_num = _contract_rescaled(model.ht, leaf_log_factors(model, x, kinds_num))
    log_den = _contract_rescaled(model.ht, leaf_log_factors(model, x, kinds_den))
    valid = np.isfinite(log_den) & (log_den >= LOG_DENOMINATOR_FLOOR)
    u = np.full(x.shape[0], np.nan)
    u[valid] = np.clip(np.exp(log_num[valid] - log_den[valid]), 0.0, 1.0)
    return u, valid


def ci_test(model: MdmaModel, data, i: int, j: int, cond,
            alpha: float) -> CiTestResult:
    """Test X_i independent of X_j given X_cond through a fitted joint.

    Conditional independence implies independence of the conditional
    CDF transforms, which is tested by Kendall's tau with the standard
    normal approximation tau ~ N(0, 2(2n+5) / 9n(n-1)) under the null.
    Rows whose conditioning density underflows are dropped; more than
    10% dropped is an error.
    """
    cond = sorted(int(c) for c in cond)
    if i == j:
        raise ValueError("i and j must differ")
    if i in cond or j in cond:
        raise ValueError("i and j must not appear in the conditioning set")
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    x = np.asarray(data, dtype=np.float64)

    u1, valid1 = conditional_cdf_values(model, x, i, cond)
    u2, valid2 = conditional_cdf_values(model, x, j, cond)
    valid = valid1 & valid2
    n_total = x.shape[0]
    n_kept = int(valid.sum())
    if n_kept < n_total * 0.9:
        raise NumericalError("unstable conditioning")
    if n_kept < 2:
        raise ValueError("too few rows for a rank test")

    u1, u2 = u1[valid], u2[valid]
    tau = float(kendalltau(u1, u2).statistic)
    z = 3.0 * tau * sqrt(n_kept * (n_kept - 1)) / sqrt(2.0 * (2 * n_kept + 5))
    p_value = erfc(abs(z) / sqrt(2.0))
    return CiTestResult(statistic=tau, p_value=p_value,
                        u1_u2=np.column_stack([u1, u2]), alpha=alpha)


# ---------------------------------------------------------------------------
# Anomaly scoring.
# ---------------------------------------------------------------------------


def anomaly_score(model: MdmaModel, x, missing_mask=None) -> float:
    """Negative log (marginal) likelihood; higher is more anomalous."""
    return -log_density(model, x, missing_mask)


def anomaly_scores(model: MdmaModel, x, missing_mask=None) -> np.ndarray:
    """Vectorized anomaly scores for a batch."""
    return -log_density_batch(model, x, missing_mask)


# ---------------------------------------------------------------------------
# Non-marginalizable variant.
# ---------------------------------------------------------------------------


@dataclass
class NmdmaModel:
    """Product density preceded by a unit-Jacobian triangular transform.

    v = x + T sigma(x) with sigma(x) = x + a tanh(x); T is strictly
    upper triangular with softplus-constrained nonnegative entries, so
    dv/dx is unit upper triangular and |det| = 1 by construction.  The
    base density is a bank of d single-component networks.
    """

    d: int
    raw_t: np.ndarray
    raw_gate: np.ndarray
    base: PhiBank

    def __post_init__(self):
        if self.raw_t.shape != (self.d, self.d):
            raise ValueError("raw_t must be (d, d)")
        if self.raw_gate.shape != (self.d,):
            raise ValueError("raw_gate must have length d")
        if self.base.shape != (1, self.d):
            raise ValueError("base bank must hold one net per variable")

    def transform_matrix(self) -> np.ndarray:
        """Effective T: softplus on the strict upper triangle, zeros
        elsewhere (diagonal included)."""
        mask = np.triu(np.ones((self.d, self.d)), k=1)
        return softplus(self.raw_t, 1.0) * mask

    def gate_gain(self) -> np.ndarray:
        return np.tanh(self.raw_gate)


def init_nmdma(d: int, l: int, r: int, seed: int) -> NmdmaModel:
    """Fresh triangular-transform model with the standard base init."""
    rng = np.random.default_rng(seed)
    sizes = layer_sizes(l, r)
    weights_raw = [rng.normal(0.0, 1.0 / sqrt(sizes[t]),
                              size=(d, 1, sizes[t + 1], sizes[t]))
                   for t in range(l + 1)]
    gates_raw = [rng.normal(0.0, 1.0, size=(d, 1, sizes[t + 1]))
                 for t in range(l)]
    biases = [np.zeros((d, 1, sizes[t + 1])) for t in range(l + 1)]
    base = PhiBank(d, 1, l, r, weights_raw, gates_raw, biases)
    raw_t = rng.normal(0.0, 1.0, size=(d, d))
    raw_gate = rng.normal(0.0, 1.0, size=d)
    return NmdmaModel(d=d, raw_t=raw_t, raw_gate=raw_gate, base=base)


def _nmdma_transform(nm: NmdmaModel, x: np.ndarray) -> np.ndarray:
    a = nm.gate_gain()
    sig = x + a * np.tanh(x)
    return x + sig @ nm.transform_matrix().T, sig


def nmdma_log_density_batch(nm: NmdmaModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != nm.d:
        raise ValueError("x must have shape (n, %d)" % nm.d)
    if not np.isfinite(x).all():
        raise ValueError("non-finite input")
    v, _ = _nmdma_transform(nm, x)
    return nm.base.logpdf(v).sum(axis=(1, 2))


def nmdma_log_density(nm: NmdmaModel, x) -> float:
    """log f(x) = sum_j log phi_dot_j(v_j); the transform's Jacobian
    determinant is one, so no volume correction appears."""
    return float(nmdma_log_density_batch(
        nm, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


@dataclass
class NmdmaGrads:
    raw_t: np.ndarray
    raw_gate: np.ndarray
    weights: list[np.ndarray]
    gates: list[np.ndarray]
    biases: list[np.ndarray]


def nmdma_loss_and_grad(nm: NmdmaModel, x):
    """Mean NLL of a batch and exact gradients for every raw parameter."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")
    a = nm.gate_gain()
    t_mat = nm.transform_matrix()
    mask = np.triu(np.ones((nm.d, nm.d)), k=1)

    v, sig = _nmdma_transform(nm, x)
    logd, tape = nm.base.logpdf(v, want_state=True)
    nll = float(-logd.sum() / n)

    g_logd = np.full((n, nm.d, 1), -1.0 / n)
    g_weights, g_gates, g_biases = nm.base.logpdf_backward(tape, g_logd)

    _, dlogd_dv = bank_logpdf_and_xgrad(nm.base.weights_raw,
                                        nm.base.gates_raw, nm.base.biases, v)
    gv = (-1.0 / n) * dlogd_dv[:, :, 0]
    g_t = (gv.T @ sig) * mask
    g_raw_t = g_t * softplus_grad(nm.raw_t, 1.0) * mask
    g_a = ((gv @ t_mat) * np.tanh(x)).sum(axis=0)
    g_raw_gate = g_a * (1.0 - a * a)
    return nll, NmdmaGrads(raw_t=g_raw_t, raw_gate=g_raw_gate,
                           weights=g_weights, gates=g_gates, biases=g_biases)
