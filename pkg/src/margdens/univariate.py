"""Monotone scalar networks mapping the real line onto (0, 1).

Each network is a stack of affine layers with strictly positive weights,
interleaved with invertible gated-tanh nonlinearities and capped by a
sigmoid.  Positivity of the weights plus monotonicity of the gates makes
the map strictly increasing, so it is a valid univariate CDF; its
derivative (the density) is computed exactly alongside the forward pass
by propagating d/dx through the stack.

The module exposes a single-network object (:class:`UnivariateCdfNet`)
and a stacked bank (:class:`PhiBank`) holding ``m`` networks for each of
``d`` variables, evaluated batch-at-a-time through the fused kernels in
:mod:`margdens._kernels`.  Gradients with respect to every raw parameter
are implemented by hand; the computation graph is fixed, so a structural
backward pass (with per-row forward recomputation) is both simpler and
faster than a generic tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from ._kernels import bank_grad, bank_values
from .errors import NumericalError

# Sharpness of the softplus that keeps effective weights positive.
BETA_WEIGHTS = 10.0

# Bracket expansion limit for CDF inversion.
_BRACKET_LIMIT = 2.0**60
_MAX_BISECT = 300


def softplus(x, beta):
    """Overflow-safe softplus(x, beta) = log(1 + exp(beta*x)) / beta."""
    return np.logaddexp(0.0, beta * np.asarray(x, dtype=np.float64)) / beta


def softplus_grad(x, beta):
    """d softplus(x, beta) / dx = sigmoid(beta*x)."""
    return expit(beta * np.asarray(x, dtype=np.float64))


def inverse_softplus(y, beta):
    """Raw value whose softplus is y (y > 0)."""
    y = np.asarray(y, dtype=np.float64)
    return np.log(np.expm1(beta * y)) / beta


def layer_sizes(depth_l: int, width_r: int) -> list[int]:
    """Unit counts [1, r, ..., r, 1] for a net with l hidden layers."""
    return [1] + [width_r] * depth_l + [1]


# ---------------------------------------------------------------------------
# Packed parameter stacks feeding the fused kernels.
#
# Raw parameters are lists over affine layers t = 0..l:
#   weights_raw[t] : (D, M, n_{t+1}, n_t)   unconstrained
#   biases[t]      : (D, M, n_{t+1})
# and gate layers t = 0..l-1:
#   gates_raw[t]   : (D, M, n_{t+1})        unconstrained
#
# The (D, M) axes are generic: a PhiBank uses (d, m); a single net uses
# (1, 1); the sampler gathers per-sample nets into (n*d, 1).
# ---------------------------------------------------------------------------


@dataclass
class PackedStack:
    """Effective (constrained) parameters padded into dense arrays."""

    wp: np.ndarray      # (L, D, M, R, R) softplus'd weights
    bp: np.ndarray      # (L, D, M, R) biases
    ap: np.ndarray      # (max(L-1, 1), D, M, R) tanh'd gate gains
    sizes: np.ndarray   # (L + 1,) interface unit counts

    @property
    def d(self):
        return self.wp.shape[1]

    @property
    def m(self):
        return self.wp.shape[2]


def pack_stack(weights_raw, gates_raw, biases) -> PackedStack:
    n_layers = len(weights_raw)
    d, m = weights_raw[0].shape[:2]
    sizes = [weights_raw[t].shape[3] for t in range(n_layers)]
    sizes.append(weights_raw[-1].shape[2])
    r_max = max(sizes)
    wp = np.zeros((n_layers, d, m, r_max, r_max))
    bp = np.zeros((n_layers, d, m, r_max))
    ap = np.zeros((max(n_layers - 1, 1), d, m, r_max))
    for t in range(n_layers):
        o, i = weights_raw[t].shape[2:]
        wp[t, :, :, :o, :i] = softplus(weights_raw[t], BETA_WEIGHTS)
        bp[t, :, :, :o] = biases[t]
    for t in range(n_layers - 1):
        ap[t, :, :, :sizes[t + 1]] = np.tanh(gates_raw[t])
    return PackedStack(wp=wp, bp=bp, ap=ap,
                       sizes=np.asarray(sizes, dtype=np.int64))


_EMPTY = np.empty((0, 0, 0))


def packed_z(packed: PackedStack, x) -> np.ndarray:
    """Final pre-sigmoid activation z, (N, D, M); phi = sigmoid(z)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    z = np.empty((x.shape[0], packed.d, packed.m))
    bank_values(packed.wp, packed.bp, packed.ap, packed.sizes, x, False,
                z, _EMPTY)
    return z


def packed_z_logd(packed: PackedStack, x) -> tuple[np.ndarray, np.ndarray]:
    """z plus the log density log dphi/dx, each (N, D, M)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    z = np.empty((n, packed.d, packed.m))
    logd = np.empty((n, packed.d, packed.m))
    bank_values(packed.wp, packed.bp, packed.ap, packed.sizes, x, True,
                z, logd)
    return z, logd


def _logpdf_from(z, q):
    # log phi' = log sigmoid(z) + log sigmoid(-z) + log dz/dx
    return log_expit(z) + log_expit(-z) + np.log(q)


@dataclass
class BankTape:
    """State needed to resume a forward pass in the backward kernel."""

    packed: PackedStack
    x: np.ndarray


def bank_cdf(weights_raw, gates_raw, biases, x):
    """CDF values phi(x) for every net, (N, D, M)."""
    return expit(packed_z(pack_stack(weights_raw, gates_raw, biases), x))


def bank_log_cdf(weights_raw, gates_raw, biases, x):
    """log phi(x), computed without underflow in the lower tail."""
    return log_expit(packed_z(pack_stack(weights_raw, gates_raw, biases), x))


def bank_logpdf(weights_raw, gates_raw, biases, x, *, want_state=False):
    """log of the density d phi / dx, (N, D, M).

    Computed in log space, so extreme tails give large negative values
    instead of underflowing to zero.
    """
    packed = pack_stack(weights_raw, gates_raw, biases)
    x = np.ascontiguousarray(x, dtype=np.float64)
    _, logd = packed_z_logd(packed, x)
    if want_state:
        return logd, BankTape(packed=packed, x=x)
    return logd


def bank_cdf_and_logpdf(weights_raw, gates_raw, biases, x):
    """Both phi(x) and log d phi/dx from a single forward pass."""
    z, logd = packed_z_logd(pack_stack(weights_raw, gates_raw, biases), x)
    return expit(z), logd


def bank_logpdf_backward(weights_raw, gates_raw, tape: BankTape, g_logd):
    """Accumulate raw-parameter gradients of sum(g_logd * logpdf).

    g_logd: (N, D, M).  Returns (g_weights_raw, g_gates_raw, g_biases)
    with the same shapes as the parameter lists.
    """
    packed = tape.packed
    n_layers = packed.wp.shape[0]
    gw = np.empty_like(packed.wp)
    gb = np.empty_like(packed.bp)
    ga = np.empty_like(packed.ap)
    bank_grad(packed.wp, packed.bp, packed.ap, packed.sizes, tape.x,
              np.ascontiguousarray(g_logd), gw, gb, ga)

    g_weights, g_gates, g_biases = [], [], []
    sizes = packed.sizes
    for t in range(n_layers):
        o, i = int(sizes[t + 1]), int(sizes[t])
        g_weights.append(gw[t, :, :, :o, :i]
                         * softplus_grad(weights_raw[t], BETA_WEIGHTS))
        g_biases.append(gb[t, :, :, :o].copy())
    for t in range(n_layers - 1):
        gain = np.tanh(gates_raw[t])
        g_gates.append(ga[t, :, :, :int(sizes[t + 1])] * (1.0 - gain * gain))
    return g_weights, g_gates, g_biases


def bank_logpdf_and_xgrad(weights_raw, gates_raw, biases, x):
    """log density and its derivative in x (the score of each phi).

    Forward-mode propagation of (value, dx, d2x) through the stack;
    used by the triangular-transform variant, whose loss needs the
    sensitivity of each log density to its transformed input.
    """
    weights = [softplus(w, BETA_WEIGHTS) for w in weights_raw]
    gains = [np.tanh(a) for a in gates_raw]
    n_layers = len(weights)
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    m = weights[0].shape[1]
    h = np.broadcast_to(x[:, :, None, None], (n, d, m, 1))
    g = np.broadcast_to(np.ones(()), (n, d, m, 1))
    e = np.zeros((n, d, m, 1))
    for t in range(n_layers):
        z = np.einsum('dmoi,ndmi->ndmo', weights[t], h) + biases[t]
        q = np.einsum('dmoi,ndmi->ndmo', weights[t], g)
        w2 = np.einsum('dmoi,ndmi->ndmo', weights[t], e)
        if t < n_layers - 1:
            c = np.tanh(z)
            s = 1.0 + gains[t] * (1.0 - c * c)
            h = z + gains[t] * c
            e = (-2.0 * gains[t]) * c * (1.0 - c * c) * q * q + s * w2
            g = s * q
        else:
            z_last = z[..., 0]
            q_last = q[..., 0]
            e_last = w2[..., 0]
    logd = _logpdf_from(z_last, q_last)
    dlogd_dx = (1.0 - 2.0 * expit(z_last)) * q_last + e_last / q_last
    return logd, dlogd_dx


# ---------------------------------------------------------------------------
# Single-network surface.
# ---------------------------------------------------------------------------


@dataclass
class UnivariateCdfNet:
    """One monotone scalar network phi: R -> (0, 1).

    raw_weights[t] has shape (n_{t+1}, n_t) with n_0 = n_{l+1} = 1 and
    n_t = width_r in between; raw_gates[t] and biases[t] are vectors of
    length n_{t+1}.  Effective weights are softplus(raw, beta=10) > 0
    and effective gates tanh(raw) in (-1, 1), which together make phi
    strictly increasing.  Instances are immutable during evaluation;
    only the trainer mutates parameters.
    """

    depth_l: int
    width_r: int
    raw_weights: list[np.ndarray]
    raw_gates: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        sizes = layer_sizes(self.depth_l, self.width_r)
        if len(self.raw_weights) != self.depth_l + 1:
            raise ValueError("expected %d weight matrices, got %d"
                             % (self.depth_l + 1, len(self.raw_weights)))
        if len(self.raw_gates) != self.depth_l:
            raise ValueError("expected %d gate vectors, got %d"
                             % (self.depth_l, len(self.raw_gates)))
        if len(self.biases) != self.depth_l + 1:
            raise ValueError("expected %d bias vectors, got %d"
                             % (self.depth_l + 1, len(self.biases)))
        for t, w in enumerate(self.raw_weights):
            if w.shape != (sizes[t + 1], sizes[t]):
                raise ValueError("weight %d has shape %s, expected %s"
                                 % (t, w.shape, (sizes[t + 1], sizes[t])))
        for t, a in enumerate(self.raw_gates):
            if a.shape != (sizes[t + 1],):
                raise ValueError("gate %d has shape %s, expected (%d,)"
                                 % (t, a.shape, sizes[t + 1]))
        for t, b in enumerate(self.biases):
            if b.shape != (sizes[t + 1],):
                raise ValueError("bias %d has shape %s, expected (%d,)"
                                 % (t, b.shape, sizes[t + 1]))

    def _packed(self) -> PackedStack:
        return pack_stack([w[None, None] for w in self.raw_weights],
                          [a[None, None] for a in self.raw_gates],
                          [b[None, None] for b in self.biases])


def _as_input_column(x):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite input")
    return arr, arr.reshape(-1, 1)


def phi_forward(net: UnivariateCdfNet, x):
    """Evaluate phi(x).  Accepts a scalar or an array (vectorized)."""
    arr, col = _as_input_column(x)
    out = expit(packed_z(net._packed(), col)[:, 0, 0])
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def phi_density(net: UnivariateCdfNet, x):
    """Evaluate the density d phi / dx at x (scalar or array)."""
    arr, col = _as_input_column(x)
    _, logd = packed_z_logd(net._packed(), col)
    out = np.exp(logd[:, 0, 0])
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def phi_inverse(net: UnivariateCdfNet, u: float, tol: float) -> float:
    """Solve phi(x) = u to |phi(x) - u| <= tol by bracketed bisection.

    The bracket starts at [-1, 1] and is doubled geometrically until it
    straddles u; expansion past 2**60 raises NumericalError.
    """
    if not (0.0 < u < 1.0):
        raise ValueError("u must lie strictly inside (0, 1)")
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    packed = net._packed()

    def ev(xs):
        return expit(packed_z(packed, xs.reshape(-1, 1))[:, 0, 0])

    out = invert_monotone(ev, np.array([u]), tol)
    return float(out[0])


def invert_monotone(ev, u, tol):
    """Vectorized bisection for a batch of monotone-CDF inversions.

    ev maps an array of points x (S,) to CDF values (S,); each entry is
    solved independently for its own target u[i].
    """
    u = np.asarray(u, dtype=np.float64)
    lo = np.full(u.shape, -1.0)
    hi = np.full(u.shape, 1.0)

    while True:
        need_lo = ev(lo) >= u
        need_hi = ev(hi) <= u
        if not (need_lo.any() or need_hi.any()):
            break
        lo = np.where(need_lo, lo * 2.0, lo)
        hi = np.where(need_hi, hi * 2.0, hi)
        if (np.abs(lo) > _BRACKET_LIMIT).any() or (hi > _BRACKET_LIMIT).any():
            raise NumericalError("inversion bracket overflow")

    mid = 0.5 * (lo + hi)
    for _ in range(_MAX_BISECT):
        val = ev(mid)
        if (np.abs(val - u) <= tol).all():
            break
        too_low = val < u
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
        mid = 0.5 * (lo + hi)
    return mid


# ---------------------------------------------------------------------------
# Bank of m x d networks.
# ---------------------------------------------------------------------------


class PhiBank:
    """All m x d univariate networks of a model, stored as stacked arrays.

    Layer t of net (i, j) lives at weights_raw[t][j, i], so a whole data
    batch is evaluated against every network in one fused kernel call.
    """

    def __init__(self, d, m, depth_l, width_r, weights_raw, gates_raw, biases):
        self.d = d
        self.m = m
        self.depth_l = depth_l
        self.width_r = width_r
        sizes = layer_sizes(depth_l, width_r)
        for t, w in enumerate(weights_raw):
            expected = (d, m, sizes[t + 1], sizes[t])
            if w.shape != expected:
                raise ValueError("bank weight %d has shape %s, expected %s"
                                 % (t, w.shape, expected))
        self.weights_raw = weights_raw
        self.gates_raw = gates_raw
        self.biases = biases

    @property
    def shape(self):
        return (self.m, self.d)

    def net(self, i: int, j: int) -> UnivariateCdfNet:
        """View of component net i for variable j (shares storage)."""
        return UnivariateCdfNet(
            depth_l=self.depth_l,
            width_r=self.width_r,
            raw_weights=[w[j, i] for w in self.weights_raw],
            raw_gates=[a[j, i] for a in self.gates_raw],
            biases=[b[j, i] for b in self.biases],
        )

    def cdf(self, x):
        """phi_{i,j}(x[:, j]) for all nets, (N, d, m)."""
        return bank_cdf(self.weights_raw, self.gates_raw, self.biases, x)

    def log_cdf(self, x):
        return bank_log_cdf(self.weights_raw, self.gates_raw, self.biases, x)

    def logpdf(self, x, *, want_state=False):
        return bank_logpdf(self.weights_raw, self.gates_raw, self.biases, x,
                           want_state=want_state)

    def cdf_and_logpdf(self, x):
        return bank_cdf_and_logpdf(self.weights_raw, self.gates_raw,
                                   self.biases, x)

    def logpdf_backward(self, tape, g_logd):
        return bank_logpdf_backward(self.weights_raw, self.gates_raw,
                                    tape, g_logd)

    def gathered(self, var_idx, comp_idx) -> PackedStack:
        """Packed per-element parameter stack for (variable, component)
        pairs, usable with packed_values (the pair axis plays D, M = 1)."""
        w = [np.ascontiguousarray(wt[var_idx, comp_idx][:, None])
             for wt in self.weights_raw]
        a = [np.ascontiguousarray(at[var_idx, comp_idx][:, None])
             for at in self.gates_raw]
        b = [np.ascontiguousarray(bt[var_idx, comp_idx][:, None])
             for bt in self.biases]
        return pack_stack(w, a, b)
