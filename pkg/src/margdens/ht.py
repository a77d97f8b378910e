"""Hierarchical mixture tensor and the unified query engine.

A model combines an m x d bank of univariate CDF networks through a
tree of nonnegative, row-normalized mixing matrices.  The implicit
mixture-weight tensor is never materialized: one bottom-up contraction
evaluates the joint CDF, and swapping each variable's length-m factor
vector between phi values, phi-derivative values, and all-ones yields
densities, marginals, and conditionals from the same pass.

Per-variable query tags:

* :class:`CdfAt` -- CDF factor phi_{i,j}(x)
* :class:`DensityAt` -- density factor dphi_{i,j}/dx
* :class:`Marginalize` -- all-ones factor (integrates the variable out)
* :class:`ConditionDensityAt` -- density factor on a conditioning
  variable; triggers a second, denominator contraction.

``evaluate`` works in the linear domain and is exact wherever factors
stay inside float64 range.  ``log_density`` re-normalizes per tree level
and accumulates the log scale, so products of many small densities do
not underflow; the backward pass in :mod:`margdens.training` runs over
the same rescaled graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Union

import numpy as np

from .errors import NumericalError
from .univariate import PhiBank, softplus, softplus_grad

# Sharpness of the softplus keeping mixing weights positive.
BETA_LAMBDA = 20.0

# Conditional contractions with a denominator below this are rejected.
DENOMINATOR_FLOOR = 1e-300
LOG_DENOMINATOR_FLOOR = np.log(DENOMINATOR_FLOOR)


# ---------------------------------------------------------------------------
# Tree shape.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeShape:
    """Bottom-up grouping of d leaves into levels of merge nodes.

    ``levels[k]`` lists the half-open spans each node at level k+1 takes
    from the units of the level below (level 0 units are the leaves).
    The last level always has a single node, the root.  Undersized final
    groups simply merge fewer children; a single-child node passes its
    child through its mixing matrix unchanged in structure.
    """

    d: int
    pool_size: int
    levels: tuple[tuple[tuple[int, int], ...], ...]

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def level_counts(self) -> list[int]:
        return [len(spans) for spans in self.levels]

    @property
    def internal_node_count(self) -> int:
        return sum(self.level_counts)

    @property
    def matrix_level_counts(self) -> list[int]:
        """Node counts of the levels holding m x m matrices (all but root)."""
        return [len(spans) for spans in self.levels[:-1]]

    def leaf_owner(self) -> np.ndarray:
        """For each leaf position, the index of its level-1 node."""
        owner = np.empty(self.d, dtype=np.int64)
        for node, (lo, hi) in enumerate(self.levels[0]):
            owner[lo:hi] = node
        return owner


def build_tree(d: int, pool_size: int) -> TreeShape:
    """Group ceil(count / pool_size) nodes per level until one remains.

    d = 1 degenerates to a root directly over the single leaf, which
    realizes a plain m-component mixture.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    if pool_size < 2:
        raise ValueError("pool_size must be at least 2")
    if d == 1:
        return TreeShape(d=1, pool_size=pool_size, levels=(((0, 1),),))
    levels = []
    count = d
    while count > 1:
        n_nodes = ceil(count / pool_size)
        spans = tuple((i * pool_size, min((i + 1) * pool_size, count))
                      for i in range(n_nodes))
        levels.append(spans)
        count = n_nodes
    return TreeShape(d=d, pool_size=pool_size, levels=tuple(levels))


# ---------------------------------------------------------------------------
# Model containers.
# ---------------------------------------------------------------------------


@dataclass
class HtTensor:
    """Layered mixing weights realizing the implicit tensor.

    raw_levels[k] has shape (m, m, count_k) for the matrix levels; the
    top level is the raw vector raw_top of length m.  Effective weights
    are softplus(raw, beta=20), divided by their row sums at every
    evaluation so the implicit tensor always has nonnegative entries
    summing to one.  Entry [i, k, node]: i is selected by the parent,
    k indexes the children components being merged.
    """

    m: int
    pool_size: int
    tree: TreeShape
    raw_levels: list[np.ndarray]
    raw_top: np.ndarray
    leaf_order: np.ndarray

    def __post_init__(self):
        counts = self.tree.matrix_level_counts
        if len(self.raw_levels) != len(counts):
            raise ValueError("expected %d matrix levels, got %d"
                             % (len(counts), len(self.raw_levels)))
        for k, (arr, cnt) in enumerate(zip(self.raw_levels, counts)):
            if arr.shape != (self.m, self.m, cnt):
                raise ValueError("level %d has shape %s, expected %s"
                                 % (k, arr.shape, (self.m, self.m, cnt)))
        if self.raw_top.shape != (self.m,):
            raise ValueError("top level must be a vector of length m")
        order = np.asarray(self.leaf_order)
        if sorted(order.tolist()) != list(range(self.tree.d)):
            raise ValueError("leaf_order must be a permutation of range(d)")

    def normalized_levels(self) -> list[np.ndarray]:
        out = []
        for raw in self.raw_levels:
            s = softplus(raw, BETA_LAMBDA)
            out.append(s / s.sum(axis=1, keepdims=True))
        return out

    def normalized_top(self) -> np.ndarray:
        s = softplus(self.raw_top, BETA_LAMBDA)
        return s / s.sum()


@dataclass
class MdmaModel:
    """A d-variate density model: phi bank + hierarchical mixing tensor."""

    d: int
    m: int
    phi_bank: PhiBank
    ht: HtTensor

    def __post_init__(self):
        if self.phi_bank.shape != (self.m, self.d):
            raise ValueError("phi bank shape %s does not match (m, d) = %s"
                             % (self.phi_bank.shape, (self.m, self.d)))
        if self.ht.m != self.m or self.ht.tree.d != self.d:
            raise ValueError("mixing tensor dimensions do not match model")


# ---------------------------------------------------------------------------
# Query specification.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CdfAt:
    x: float


@dataclass(frozen=True)
class DensityAt:
    x: float


@dataclass(frozen=True)
class Marginalize:
    pass


@dataclass(frozen=True)
class ConditionDensityAt:
    x: float


VarTag = Union[CdfAt, DensityAt, Marginalize, ConditionDensityAt]


@dataclass(frozen=True)
class QuerySpec:
    """One tag per variable, in natural variable order."""

    tags: tuple[VarTag, ...]

    def __post_init__(self):
        has_query = any(isinstance(t, (CdfAt, DensityAt)) for t in self.tags)
        has_cond = any(isinstance(t, ConditionDensityAt) for t in self.tags)
        if has_cond and not has_query:
            raise ValueError(
                "conditional query requires at least one CdfAt or DensityAt tag")
        for t in self.tags:
            if isinstance(t, (CdfAt, DensityAt, ConditionDensityAt)) \
                    and not np.isfinite(t.x):
                raise ValueError("non-finite input")

    @property
    def is_conditional(self) -> bool:
        return any(isinstance(t, ConditionDensityAt) for t in self.tags)


# ---------------------------------------------------------------------------
# Contraction, linear domain.
# ---------------------------------------------------------------------------


def _transposed_levels(lams):
    """Per level, node-major copies: lam_kt[c] = lam[:, :, c].T (for the
    forward matmul) and lam_ik[c] = lam[:, :, c] (for the backward)."""
    lam_kt = [np.ascontiguousarray(lam.transpose(2, 1, 0)) for lam in lams]
    lam_ik = [np.ascontiguousarray(lam.transpose(2, 0, 1)) for lam in lams]
    return lam_kt, lam_ik


def _contract_plain(ht: HtTensor, leaf_factors: np.ndarray) -> np.ndarray:
    """Contract (n, d, m) leaf factor vectors (leaf order) to (n,)."""
    units = leaf_factors
    n = units.shape[0]
    m = ht.m
    lam_kt, _ = _transposed_levels(ht.normalized_levels())
    for lev, spans in enumerate(ht.tree.levels[:-1]):
        out = np.empty((n, len(spans), m))
        for c, (lo, hi) in enumerate(spans):
            prod = units[:, lo:hi, :].prod(axis=1)
            out[:, c, :] = prod @ lam_kt[lev][c]
        units = out
    (lo, hi), = ht.tree.levels[-1]
    prod = units[:, lo:hi, :].prod(axis=1)
    return prod @ ht.normalized_top()


def ht_contract(model: MdmaModel, factors) -> float:
    """Full tree contraction of one length-m factor vector per variable.

    ``factors`` has shape (d, m), ordered by the model's leaf order.
    Cost is O(d * m^2).
    """
    arr = np.asarray(factors, dtype=np.float64)
    if arr.shape != (model.d, model.m):
        raise ValueError("factor array has shape %s, expected %s"
                         % (arr.shape, (model.d, model.m)))
    if (arr < 0).any():
        raise ValueError("factor vectors must be nonnegative")
    return float(_contract_plain(model.ht, arr[None])[0])


# ---------------------------------------------------------------------------
# Contraction, rescaled log domain.
# ---------------------------------------------------------------------------


@dataclass
class TreeTape:
    """Saved per-node state of a rescaled contraction for the backward pass."""

    unit_levels: list[np.ndarray]      # units entering each level
    prods: list[list[np.ndarray]]      # children products per matrix level
    divisors: list[np.ndarray]         # (n, count) row-max rescalers
    lam_ik: list[np.ndarray]           # normalized weights, node-major (c, i, k)
    lam_top: np.ndarray
    root_prod: np.ndarray
    root_val: np.ndarray               # rescaled-domain root value, (n,)


def _contract_rescaled(ht: HtTensor, leaf_log_factors: np.ndarray,
                       want_tape: bool = False):
    """Contract log-domain leaf factors, returning log of the result.

    Every unit vector is divided by its per-row maximum and the log of
    the scale is accumulated, so long products of small factors do not
    underflow.  Rows whose value is exactly zero come back as -inf.
    """
    n = leaf_log_factors.shape[0]
    m = ht.m
    shift = leaf_log_factors.max(axis=2)
    safe_shift = np.where(np.isfinite(shift), shift, 0.0)
    units = np.exp(leaf_log_factors - safe_shift[:, :, None])
    log_scale = safe_shift.sum(axis=1)

    lam_kt, lam_ik = _transposed_levels(ht.normalized_levels())
    lam_top = ht.normalized_top()
    tape = TreeTape([], [], [], lam_ik, lam_top, None, None) if want_tape else None

    for lev, spans in enumerate(ht.tree.levels[:-1]):
        out = np.empty((n, len(spans), m))
        div_level = np.empty((n, len(spans)))
        prods_level = []
        if want_tape:
            tape.unit_levels.append(units)
        for c, (lo, hi) in enumerate(spans):
            prod = units[:, lo:hi, :].prod(axis=1)
            raw_out = prod @ lam_kt[lev][c]
            peak = raw_out.max(axis=1)
            div = np.where(peak > 0.0, peak, 1.0)
            out[:, c, :] = raw_out / div[:, None]
            div_level[:, c] = div
            log_scale = log_scale + np.where(peak > 0.0, np.log(div), 0.0)
            if want_tape:
                prods_level.append(prod)
        if want_tape:
            tape.prods.append(prods_level)
            tape.divisors.append(div_level)
        units = out

    if want_tape:
        tape.unit_levels.append(units)
    (lo, hi), = ht.tree.levels[-1]
    prod = units[:, lo:hi, :].prod(axis=1)
    val = prod @ lam_top
    with np.errstate(divide='ignore'):
        log_val = np.where(val > 0.0, np.log(np.where(val > 0.0, val, 1.0)),
                           -np.inf)
    result = log_val + log_scale
    if want_tape:
        tape.root_prod = prod
        tape.root_val = val
        return result, tape
    return result


def _leave_one_out(block: np.ndarray) -> np.ndarray:
    """Products of all siblings except self along axis 1 (zero-safe)."""
    w = block.shape[1]
    pref = np.ones_like(block)
    suf = np.ones_like(block)
    for i in range(1, w):
        pref[:, i] = pref[:, i - 1] * block[:, i - 1]
    for i in range(w - 2, -1, -1):
        suf[:, i] = suf[:, i + 1] * block[:, i + 1]
    return pref * suf


def _contract_rescaled_backward(ht: HtTensor, tape: TreeTape,
                                g_logf: np.ndarray):
    """Gradients of sum(g_logf * log f) through a rescaled contraction.

    The per-node rescale divisors are constants of the forward pass, so
    backpropagating through the rescaled graph reproduces the exact
    gradient of the log contraction.  Returns gradients with respect to
    the *normalized* mixing weights, the normalized top vector, and the
    rescaled leaf units.
    """
    spans_all = ht.tree.levels
    depth = len(spans_all)

    g_val = g_logf / tape.root_val
    g_lam_top = tape.root_prod.T @ g_val
    g_prod = g_val[:, None] * tape.lam_top[None, :]

    g_units = np.zeros_like(tape.unit_levels[depth - 1])
    (lo, hi), = spans_all[-1]
    block = tape.unit_levels[depth - 1][:, lo:hi, :]
    g_units[:, lo:hi, :] = g_prod[:, None, :] * _leave_one_out(block)

    g_lam_levels = [np.zeros((ht.m, ht.m, len(s))) for s in spans_all[:-1]]
    for lev in reversed(range(depth - 1)):
        spans = spans_all[lev]
        g_units_in = np.zeros_like(tape.unit_levels[lev])
        for c, (lo, hi) in enumerate(spans):
            g_out = g_units[:, c, :] / tape.divisors[lev][:, c, None]
            prod = tape.prods[lev][c]
            g_lam_levels[lev][:, :, c] = g_out.T @ prod
            g_prod = g_out @ tape.lam_ik[lev][c]
            block = tape.unit_levels[lev][:, lo:hi, :]
            g_units_in[:, lo:hi, :] = g_prod[:, None, :] * _leave_one_out(block)
        g_units = g_units_in
    return g_lam_levels, g_lam_top, g_units


def lam_normalization_backward(raw: np.ndarray, g_norm: np.ndarray) -> np.ndarray:
    """Chain gradients on normalized weights back to the raw parameters."""
    s = softplus(raw, BETA_LAMBDA)
    if raw.ndim == 1:
        total = s.sum()
        lam = s / total
        g_s = (g_norm - (g_norm * lam).sum()) / total
    else:
        total = s.sum(axis=1, keepdims=True)
        lam = s / total
        g_s = (g_norm - (g_norm * lam).sum(axis=1, keepdims=True)) / total
    return g_s * softplus_grad(raw, BETA_LAMBDA)


# ---------------------------------------------------------------------------
# Query evaluation.
# ---------------------------------------------------------------------------

_KIND_ONE = 0
_KIND_CDF = 1
_KIND_DENSITY = 2


def leaf_log_factors(model: MdmaModel, x: np.ndarray, kinds) -> np.ndarray:
    """Log-domain leaf factors for a batch, already in leaf order.

    ``kinds`` gives one of _KIND_ONE / _KIND_CDF / _KIND_DENSITY per
    variable (natural order); x is (n, d) with arbitrary placeholders in
    _KIND_ONE columns.
    """
    kinds = np.asarray(kinds)
    need_cdf = (kinds == _KIND_CDF).any()
    need_pdf = (kinds == _KIND_DENSITY).any()
    n, d = x.shape
    out = np.zeros((n, d, model.m))
    if need_cdf and need_pdf:
        log_cdf = model.phi_bank.log_cdf(x)
        logpdf = model.phi_bank.logpdf(x)
    elif need_cdf:
        log_cdf = model.phi_bank.log_cdf(x)
    elif need_pdf:
        logpdf = model.phi_bank.logpdf(x)
    for j in range(d):
        if kinds[j] == _KIND_CDF:
            out[:, j, :] = log_cdf[:, j, :]
        elif kinds[j] == _KIND_DENSITY:
            out[:, j, :] = logpdf[:, j, :]
    return out[:, model.ht.leaf_order, :]


def evaluate(model: MdmaModel, query: QuerySpec) -> float:
    """Evaluate a joint / marginal / conditional CDF-density contraction.

    Builds one factor vector per variable from the query tags and
    contracts once; conditional queries contract a second time with the
    query variables marginalized out and return the ratio.
    """
    tags = query.tags
    if len(tags) != model.d:
        raise ValueError("query has %d tags, model has %d variables"
                         % (len(tags), model.d))
    xs = np.zeros((1, model.d))
    for j, tag in enumerate(tags):
        if isinstance(tag, (CdfAt, DensityAt, ConditionDensityAt)):
            xs[0, j] = tag.x

    cdf, logpdf = model.phi_bank.cdf_and_logpdf(xs)
    pdf = np.exp(logpdf)
    factors = np.ones((1, model.d, model.m))
    for j, tag in enumerate(tags):
        if isinstance(tag, CdfAt):
            factors[0, j, :] = cdf[0, j, :]
        elif isinstance(tag, (DensityAt, ConditionDensityAt)):
            factors[0, j, :] = pdf[0, j, :]

    numerator = float(_contract_plain(model.ht, factors[:, model.ht.leaf_order, :])[0])
    if not query.is_conditional:
        return numerator

    den_factors = np.ones_like(factors)
    for j, tag in enumerate(tags):
        if isinstance(tag, ConditionDensityAt):
            den_factors[0, j, :] = pdf[0, j, :]
    denominator = float(
        _contract_plain(model.ht, den_factors[:, model.ht.leaf_order, :])[0])
    if denominator < DENOMINATOR_FLOOR:
        raise NumericalError("conditioning on zero-density event")
    return numerator / denominator


def log_density_batch(model: MdmaModel, x, missing_mask=None) -> np.ndarray:
    """Log joint density of observed coordinates, missing ones integrated out.

    x: (n, d); missing_mask: (n, d) booleans, True where the coordinate
    is missing (None means fully observed).  Underflow is avoided by
    per-level renormalization; a genuinely zero density returns -inf.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d:
        raise ValueError("x must have shape (n, %d)" % model.d)
    if missing_mask is None:
        mask = np.zeros(x.shape, dtype=bool)
    else:
        mask = np.asarray(missing_mask, dtype=bool)
        if mask.shape != x.shape:
            raise ValueError("missing mask shape must match x")
    if mask.all(axis=1).any():
        raise ValueError("empty observation")
    if not np.isfinite(np.where(mask, 0.0, x)).all():
        raise ValueError("non-finite input")

    filled = np.where(mask, 0.0, x)
    logpdf = model.phi_bank.logpdf(filled)
    log_factors = np.where(mask[:, :, None], 0.0, logpdf)
    return _contract_rescaled(model.ht, log_factors[:, model.ht.leaf_order, :])


def log_density(model: MdmaModel, x, missing_mask=None) -> float:
    """Scalar log (marginal) density of one observation."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    mask = None if missing_mask is None else \
        np.asarray(missing_mask, dtype=bool).reshape(1, -1)
    return float(log_density_batch(model, x, mask)[0])
