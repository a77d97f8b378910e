"""Maximum (marginal) likelihood training.

Gradients are exact reverse-mode derivatives assembled over the model's
fixed computation structure: the bank backward pass in
:mod:`margdens.univariate` plus the tree backward pass in
:mod:`margdens.ht`.  :class:`GradientTape` is the container of
activations recorded by one forward pass; the backward pass visits each
primitive exactly once, in reverse topological order (tree root to
leaves, then network output layers to input layers).

Also here: parameter initialization, the Adam optimizer, the greedy
correlation-based variable coupling, and the minibatch training loop.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import sqrt

import numpy as np

from .errors import NumericalError, TrainingDiverged
from .ht import (HtTensor, MdmaModel, TreeTape, _contract_rescaled,
                 _contract_rescaled_backward, build_tree,
                 lam_normalization_backward, log_density_batch)
from .univariate import BankTape, PhiBank, layer_sizes


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 500
    epochs: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class GradientTape:
    """Recorded activations of one loss evaluation (bank + tree)."""

    bank: BankTape
    tree: TreeTape
    missing_mask: np.ndarray


@dataclass
class ModelGrads:
    """Gradients mirroring the raw parameter arrays of a model."""

    weights: list[np.ndarray]
    gates: list[np.ndarray]
    biases: list[np.ndarray]
    lam_levels: list[np.ndarray]
    lam_top: np.ndarray


@dataclass
class EpochStats:
    epoch: int
    train_nll: float
    val_nll: float


# ---------------------------------------------------------------------------
# Flat parameter vector helpers (optimizer / finite differences).
# ---------------------------------------------------------------------------


def _param_arrays(model: MdmaModel) -> list[np.ndarray]:
    bank, ht = model.phi_bank, model.ht
    return (list(bank.weights_raw) + list(bank.gates_raw) + list(bank.biases)
            + list(ht.raw_levels) + [ht.raw_top])


def _grad_arrays(grads: ModelGrads) -> list[np.ndarray]:
    return (list(grads.weights) + list(grads.gates) + list(grads.biases)
            + list(grads.lam_levels) + [grads.lam_top])


def pack_params(model: MdmaModel) -> np.ndarray:
    """All raw parameters as one flat vector (copy)."""
    return np.concatenate([a.ravel() for a in _param_arrays(model)])


def pack_grads(grads: ModelGrads) -> np.ndarray:
    return np.concatenate([a.ravel() for a in _grad_arrays(grads)])


def set_params(model: MdmaModel, flat: np.ndarray) -> None:
    """Write a flat vector back into the model's arrays, in place."""
    pos = 0
    for arr in _param_arrays(model):
        nxt = pos + arr.size
        arr[...] = flat[pos:nxt].reshape(arr.shape)
        pos = nxt
    if pos != flat.size:
        raise ValueError("flat vector length %d does not match parameter "
                         "count %d" % (flat.size, pos))


def param_count(model: MdmaModel) -> int:
    return sum(a.size for a in _param_arrays(model))


# ---------------------------------------------------------------------------
# Loss and gradient.
# ---------------------------------------------------------------------------


def negative_log_likelihood(model: MdmaModel, x, missing_mask=None) -> float:
    """Mean negative log (marginal) likelihood of a batch."""
    return float(-log_density_batch(model, x, missing_mask).mean())


def loss_and_grad(model: MdmaModel, x, missing_mask=None):
    """NLL of a batch plus exact gradients for every raw parameter.

    Missing coordinates are marginalized out: their factor is the
    constant ones vector, so no gradient reaches their networks while
    the mixing weights still learn from the observed pattern.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a nonempty (n, d) array")
    if missing_mask is None:
        mask = np.zeros(x.shape, dtype=bool)
    else:
        mask = np.asarray(missing_mask, dtype=bool)
    if mask.all(axis=1).any():
        raise ValueError("empty observation")
    if not np.isfinite(np.where(mask, 0.0, x)).all():
        raise ValueError("non-finite input")
    n = x.shape[0]
    order = model.ht.leaf_order

    filled = np.where(mask, 0.0, x)
    logpdf, bank_tape = model.phi_bank.logpdf(filled, want_state=True)
    log_factors = np.where(mask[:, :, None], 0.0, logpdf)
    logf, tree_tape = _contract_rescaled(model.ht, log_factors[:, order, :],
                                         want_tape=True)
    tape = GradientTape(bank=bank_tape, tree=tree_tape, missing_mask=mask)

    bad = ~np.isfinite(logf)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        err = NumericalError("non-finite loss at row %d" % row)
        err.row = row
        raise err
    nll = float(-logf.mean())

    g_logf = np.full(n, -1.0 / n)
    g_lam_norm, g_top_norm, g_units = _contract_rescaled_backward(
        model.ht, tape.tree, g_logf)

    # Leaf gradients: chain through the per-leaf exp shift, reorder from
    # leaf positions back to variable order, silence masked coordinates.
    g_leaf_log = g_units * tape.tree.unit_levels[0]
    g_logd = np.empty_like(g_leaf_log)
    g_logd[:, order, :] = g_leaf_log
    g_logd[tape.missing_mask] = 0.0

    g_weights, g_gates, g_biases = model.phi_bank.logpdf_backward(
        tape.bank, g_logd)
    g_lam_raw = [lam_normalization_backward(raw, g)
                 for raw, g in zip(model.ht.raw_levels, g_lam_norm)]
    g_top_raw = lam_normalization_backward(model.ht.raw_top, g_top_norm)

    grads = ModelGrads(weights=g_weights, gates=g_gates, biases=g_biases,
                       lam_levels=g_lam_raw, lam_top=g_top_raw)
    return nll, grads


# ---------------------------------------------------------------------------
# Initialization.
# ---------------------------------------------------------------------------


def init_model(d: int, m: int, l: int, r: int, pool_size: int, seed: int,
               leaf_order=None) -> MdmaModel:
    """Fresh model with the standard initialization.

    Network weights draw from N(0, 1/fan_in) with fan_in the weight
    matrix column count, gates from N(0, 1), biases start at zero.
    Internal mixing matrices start at m on the diagonal and 0 elsewhere
    (raw scale), which lands close to an identity after the softplus and
    normalization; the top vector draws from N(0, 0.3/m).  Deterministic
    for a given seed.
    """
    if min(d, m, l, r, pool_size - 1) < 1:
        raise ValueError("all sizes must be at least 1 (pool_size >= 2)")
    rng = np.random.default_rng(seed)
    sizes = layer_sizes(l, r)

    weights_raw = [rng.normal(0.0, 1.0 / sqrt(sizes[t]),
                              size=(d, m, sizes[t + 1], sizes[t]))
                   for t in range(l + 1)]
    gates_raw = [rng.normal(0.0, 1.0, size=(d, m, sizes[t + 1]))
                 for t in range(l)]
    biases = [np.zeros((d, m, sizes[t + 1])) for t in range(l + 1)]
    bank = PhiBank(d, m, l, r, weights_raw, gates_raw, biases)

    tree = build_tree(d, pool_size)
    raw_levels = [np.tile((m * np.eye(m))[:, :, None], (1, 1, cnt))
                  for cnt in tree.matrix_level_counts]
    raw_top = rng.normal(0.0, sqrt(0.3 / m), size=m)
    if leaf_order is None:
        leaf_order = np.arange(d)
    ht = HtTensor(m=m, pool_size=pool_size, tree=tree, raw_levels=raw_levels,
                  raw_top=raw_top, leaf_order=np.asarray(leaf_order))
    return MdmaModel(d=d, m=m, phi_bank=bank, ht=ht)


# ---------------------------------------------------------------------------
# Adaptive variable coupling.
# ---------------------------------------------------------------------------


def adaptive_coupling(sample_batch, missing_mask=None) -> np.ndarray:
    """Leaf permutation placing strongly correlated variables adjacently.

    Greedily pairs the two not-yet-paired groups with the highest mean
    absolute correlation, then coarse-grains and repeats until a single
    group remains; its flattening is the leaf order.  Rows with missing
    entries are dropped first.  Ties break toward the lowest variable
    index.
    """
    x = np.asarray(sample_batch, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("sample batch must be 2-D")
    if missing_mask is not None:
        keep = ~np.asarray(missing_mask, dtype=bool).any(axis=1)
        x = x[keep]
    if x.shape[0] < 2:
        raise ValueError("insufficient data for coupling")
    d = x.shape[1]
    if d == 1:
        return np.array([0])

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        corr = np.corrcoef(x, rowvar=False)
    corr = np.abs(np.nan_to_num(corr, nan=0.0))
    np.fill_diagonal(corr, 0.0)

    groups = [[j] for j in range(d)]
    while len(groups) > 1:
        n_groups = len(groups)
        score = np.zeros((n_groups, n_groups))
        for a in range(n_groups):
            for b in range(a + 1, n_groups):
                block = corr[np.ix_(groups[a], groups[b])]
                score[a, b] = block.mean()
        available = list(range(n_groups))
        merged = []
        while len(available) >= 2:
            best_pair = None
            best_score = -1.0
            for ai in range(len(available)):
                for bi in range(ai + 1, len(available)):
                    a, b = available[ai], available[bi]
                    if score[a, b] > best_score:
                        best_score = score[a, b]
                        best_pair = (a, b)
            a, b = best_pair
            merged.append(groups[a] + groups[b])
            available.remove(a)
            available.remove(b)
        merged.extend(groups[i] for i in available)
        groups = merged
    return np.array(groups[0])


# ---------------------------------------------------------------------------
# Optimizer and training loop.
# ---------------------------------------------------------------------------


class Adam:
    """Adam over a flat parameter vector."""

    def __init__(self, size: int, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m1 = np.zeros(size)
        self.m2 = np.zeros(size)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m1 = self.beta1 * self.m1 + (1.0 - self.beta1) * grad
        self.m2 = self.beta2 * self.m2 + (1.0 - self.beta2) * grad * grad
        m_hat = self.m1 / (1.0 - self.beta1 ** self.t)
        v_hat = self.m2 / (1.0 - self.beta2 ** self.t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def _clip_by_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm > 0:
        return grad * (max_norm / norm)
    return grad


def fit(model: MdmaModel, dataset, config: TrainConfig):
    """Adam on the (marginal) log likelihood over shuffled minibatches.

    ``dataset`` is a :class:`margdens.data.Dataset` or a plain (n, d)
    array (treated as fully observed).  The validation split is the
    trailing fraction of the seed-shuffled row order; the parameters of
    the best validation epoch are restored at the end.  Returns the
    model and the per-epoch trace.
    """
    values, mask = _dataset_arrays(dataset)
    n = values.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = int(round(n * config.validation_fraction))
    if n_val >= n:
        raise ValueError("validation fraction leaves no training rows")
    train_idx = perm[:n - n_val]
    val_idx = perm[n - n_val:]

    adam = Adam(param_count(model), config.learning_rate,
                config.adam_beta1, config.adam_beta2, config.adam_eps)
    trace: list[EpochStats] = []
    best_val = np.inf
    best_params = None

    for epoch in range(config.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        loss_sum = 0.0
        seen = 0
        for start in range(0, order.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                nll, grads = loss_and_grad(model, values[idx], mask[idx])
            except NumericalError as exc:
                raise TrainingDiverged(str(exc), trace) from exc
            flat_grad = pack_grads(grads)
            if config.clip_norm is not None:
                flat_grad = _clip_by_norm(flat_grad, config.clip_norm)
            set_params(model, adam.step(pack_params(model), flat_grad))
            loss_sum += nll * idx.size
            seen += idx.size
        train_nll = loss_sum / seen
        if not np.isfinite(train_nll):
            raise TrainingDiverged("non-finite training loss", trace)
        val_nll = np.nan
        if n_val:
            val_nll = _mean_nll(model, values[val_idx], mask[val_idx])
            if not np.isfinite(val_nll):
                raise TrainingDiverged("non-finite validation loss", trace)
            if val_nll < best_val:
                best_val = val_nll
                best_params = pack_params(model)
        trace.append(EpochStats(epoch, float(train_nll), float(val_nll)))

    if best_params is not None:
        set_params(model, best_params)
    return model, trace


def _mean_nll(model, values, mask, chunk=8192) -> float:
    total = 0.0
    for start in range(0, values.shape[0], chunk):
        sl = slice(start, start + chunk)
        total += -log_density_batch(model, values[sl], mask[sl]).sum()
    return total / values.shape[0]


def _dataset_arrays(dataset):
    if hasattr(dataset, "values") and hasattr(dataset, "mask"):
        return (np.asarray(dataset.values, dtype=np.float64),
                np.asarray(dataset.mask, dtype=bool))
    values = np.asarray(dataset, dtype=np.float64)
    return values, np.zeros(values.shape, dtype=bool)
