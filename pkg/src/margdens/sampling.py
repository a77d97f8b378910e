"""Sampling from a fitted model.

The joint CDF is a mixture over products of univariate CDFs, with
mixture weights given implicitly by the tree of mixing matrices.
:func:`sample` draws a mixture component by walking the tree top-down
(one categorical draw per internal node, so the sequential depth is the
tree depth) and then inverts one univariate CDF per variable; the
inversions are mutually independent, so they run as one vectorized
batch.  :func:`sample_autoregressive` instead inverts the conditional
CDF of each coordinate given the previous ones; it is distributionally
identical and serves as an oracle, but its sequential cost grows
linearly with the dimension.

All randomness is consumed from the supplied generator in a fixed
order (tree levels top-down, then one uniform per coordinate), so the
output is reproducible for a given seed regardless of how the leaf
inversions might later be parallelized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy.special import expit

from .errors import NumericalError
from .ht import DENOMINATOR_FLOOR, HtTensor, MdmaModel, _contract_plain
from .univariate import invert_monotone, pack_stack, packed_z, packed_z_logd


@dataclass
class ComponentPath:
    """Categorical choices identifying one mixture component.

    node_choices[k] holds the chosen index for every node of tree level
    k+1 (node_choices[-1] is the root); leaf_components[t] is the
    component index resolved for leaf position t.  Storage is O(d)
    integers.
    """

    node_choices: list[np.ndarray]
    leaf_components: np.ndarray


def _parent_map(tree, level: int) -> np.ndarray:
    """For each node of `level`, its covering node index one level up."""
    spans_up = tree.levels[level + 1]
    count = len(tree.levels[level])
    parent = np.empty(count, dtype=np.int64)
    for c_up, (lo, hi) in enumerate(spans_up):
        parent[lo:hi] = c_up
    return parent


def _categorical_rows(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row: rows (n, m) of probabilities, u (n,)."""
    cum = np.cumsum(rows, axis=1)
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, rows.shape[1] - 1)


def _sample_paths(ht: HtTensor, n: int, rng):
    """Draw n component paths; one categorical draw per internal node."""
    tree = ht.tree
    depth = tree.depth
    m = ht.m
    lam_levels = ht.normalized_levels()
    lam_top = ht.normalized_top()

    choices: list[np.ndarray] = [None] * depth
    u = rng.random(n)
    cum_top = np.cumsum(lam_top)
    root = np.minimum(np.searchsorted(cum_top, u, side="right"), m - 1)
    choices[depth - 1] = root[:, None]

    for lev in reversed(range(depth - 1)):
        count = len(tree.levels[lev])
        u = rng.random((n, count))
        parent = _parent_map(tree, lev)
        ks = np.empty((n, count), dtype=np.int64)
        lam = lam_levels[lev]
        for c in range(count):
            parent_k = choices[lev + 1][:, parent[c]]
            ks[:, c] = _categorical_rows(lam[parent_k, :, c], u[:, c])
        choices[lev] = ks

    owner = tree.leaf_owner()
    leaf_components = choices[0][:, owner]
    return choices, leaf_components


def sample_component(ht: HtTensor, rng) -> ComponentPath:
    """One top-down descent: root draw, then each node conditioned on
    its parent's choice."""
    choices, leaf_components = _sample_paths(ht, 1, rng)
    return ComponentPath(node_choices=[c[0] for c in choices],
                         leaf_components=leaf_components[0])


def sample(model: MdmaModel, n: int, rng, inv_tol: float = 1e-9) -> np.ndarray:
    """Draw n rows: a component path per row, then one independent
    inverse-CDF per variable.  Returns an (n, d) matrix in natural
    variable order."""
    if n < 1:
        raise ValueError("n must be at least 1")
    d = model.d
    _, leaf_components = _sample_paths(model.ht, n, rng)
    u = rng.random((n, d))

    leaf_vars = np.broadcast_to(model.ht.leaf_order, (n, d))
    packed = model.phi_bank.gathered(leaf_vars.ravel(),
                                     leaf_components.ravel())

    def ev(xs):
        return expit(packed_z(packed, xs[None, :])[0, :, 0])

    x_flat = invert_monotone(ev, u.ravel(), inv_tol)
    out = np.empty((n, d))
    out[:, model.ht.leaf_order] = x_flat.reshape(n, d)
    return out


def sample_autoregressive(model: MdmaModel, n: int, rng,
                          inv_tol: float = 1e-9) -> np.ndarray:
    """Sequential conditional-CDF inversion, coordinate by coordinate.

    Coordinate j is drawn by bisecting u = F(x_j | x_1..x_{j-1}), each
    bisection step re-contracting the tree; cost per sample is linear
    in d.  Used as a distributional oracle for :func:`sample`.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    d, m = model.d, model.m
    bank, ht = model.phi_bank, model.ht
    pos_of_var = np.empty(d, dtype=np.int64)
    pos_of_var[ht.leaf_order] = np.arange(d)

    factors_leaf = np.ones((n, d, m))
    denominator = np.ones(n)
    out = np.empty((n, d))

    for j in range(d):
        u = rng.random(n)
        packed_j = pack_stack([w[j:j + 1] for w in bank.weights_raw],
                              [a[j:j + 1] for a in bank.gates_raw],
                              [b[j:j + 1] for b in bank.biases])
        pos = pos_of_var[j]

        def ev(xs):
            factors_leaf[:, pos, :] = expit(packed_z(packed_j, xs[:, None])[:, 0, :])
            return _contract_plain(ht, factors_leaf) / denominator

        out[:, j] = invert_monotone(ev, u, inv_tol)
        _, logd = packed_z_logd(packed_j, out[:, j][:, None])
        factors_leaf[:, pos, :] = np.exp(logd[:, 0, :])
        denominator = _contract_plain(ht, factors_leaf)
        if (denominator < DENOMINATOR_FLOOR).any():
            raise NumericalError("conditioning on zero-density event")
    return out
