"""Recurrent cells whose per-step parameter Jacobian factors exactly.

All three architectures (tanh-rnn, rhn, lstm) share one structure: the
augmented previous state hhat = [h_prev, x, 1] is pushed through r weight
matrices to pre-activations z^1..z^r, and each state unit is a pointwise
function of its own z entries. That makes the immediate parameter Jacobian
an exact Kronecker product

    d state_t / d theta = kron(hhat, D),

where D = (D^1 | ... | D^r) concatenates diagonal matrices holding the
per-unit partials d(state_j)/d(z^k_j). The state-to-state Jacobian H is
also available in closed form. Parameters are ordered lexicographically by
(input index i, map index k, unit index j), which is exactly the C-order
ravel of the (n+m+1, r, n) weight tensor.

Nonlinearity: g(x) = 2*sigmoid(x) - 1 wherever tanh would appear, for all
architectures, so there is a single derivative implementation.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from .linalg import kron

ARCH_NUM_MAPS = {"tanh-rnn": 1, "rhn": 2, "lstm": 4}

# lstm pre-activation block order
LSTM_FORGET, LSTM_INPUT, LSTM_OUTPUT, LSTM_CANDIDATE = 0, 1, 2, 3


def unit_tanh(x):
    """g(x) = 2*sigmoid(x) - 1, a rescaled sigmoid with range (-1, 1)."""
    return 2.0 * sigmoid(x) - 1.0


def unit_tanh_prime(x):
    s = sigmoid(x)
    return 2.0 * s * (1.0 - s)


def sigmoid_prime(x):
    s = sigmoid(x)
    return s * (1.0 - s)


@dataclass
class CellParams:
    """Weights of one cell: recurrent maps plus the output projection.

    w has shape (n+m+1, r, n); row n+m is the bias row (driven by the
    constant-one unit appended to hhat). w_out has shape (n, vocab) and maps
    the hidden state to output logits. The flat recurrent parameter vector
    is w.ravel() (C order), matching the Kronecker column layout.
    """

    arch: str
    n: int
    m: int
    w: np.ndarray
    w_out: np.ndarray

    @property
    def r(self):
        return ARCH_NUM_MAPS[self.arch]

    @property
    def vocab(self):
        return self.w_out.shape[1]

    @property
    def state_size(self):
        return 2 * self.n if self.arch == "lstm" else self.n

    @property
    def num_recurrent_params(self):
        return self.w.size

    def zero_state(self):
        return np.zeros(self.state_size)

    def hidden_of(self, state):
        """The h part of a state vector (drops the lstm cell part)."""
        return state[self.n:] if self.arch == "lstm" else state

    def embed_state_grad(self, dldh):
        """Lifts dL/dh to a full state gradient (zeros on the lstm cell part)."""
        if self.arch != "lstm":
            return dldh
        out = np.zeros(2 * self.n)
        out[self.n:] = dldh
        return out


@dataclass
class StepTrace:
    """Forward record of one step, enough to rebuild both Jacobians.

    z stacks the r pre-activations as an (r, n) array and satisfies
    z[k] == hhat_prev @ W^k exactly as stored. carry_prev/carry_next are
    only set for lstm (the cell-state line).
    """

    hhat_prev: np.ndarray
    z: np.ndarray
    h_next: np.ndarray
    carry_prev: np.ndarray = None
    carry_next: np.ndarray = None

    @property
    def state_next(self):
        if self.carry_next is None:
            return self.h_next
        return np.concatenate([self.carry_next, self.h_next])


@dataclass
class StructuredJacobians:
    """H = d state_t / d state_{t-1} (s x s) and the concatenated diagonal
    blocks D = (D^1 | ... | D^r) of shape s x (r*n)."""

    H: np.ndarray
    D: np.ndarray


def init_params(arch, n, m, vocab, scale=1.0, rng=None, gate_bias=-2.0):
    """Draws fresh cell parameters.

    Recurrent weights are i.i.d. uniform in +-scale/sqrt(n+m+1) and the
    output projection in +-scale/sqrt(n). Bias rows start at zero except
    the rhn gate bias, which starts at gate_bias so the gates open slowly
    (carry-dominant start).
    """
    if arch not in ARCH_NUM_MAPS:
        raise ValueError(f"unknown arch {arch!r}")
    if min(n, m, vocab) < 1 or scale < 0:
        raise ValueError("n, m, vocab must be >= 1 and scale >= 0")
    r = ARCH_NUM_MAPS[arch]
    q = n + m + 1
    bound = scale / np.sqrt(q)
    w = rng.uniform(-bound, bound, size=(q, r, n))
    w[q - 1, :, :] = 0.0
    if arch == "rhn":
        w[q - 1, 1, :] = gate_bias
    w_out = rng.uniform(-scale / np.sqrt(n), scale / np.sqrt(n), size=(n, vocab))
    return CellParams(arch=arch, n=n, m=m, w=w, w_out=w_out)


def forward(params, state_prev, x):
    """Runs one cell step and records the trace.

    tanh-rnn: h = g(z^1)
    rhn:      h = g(z^1) * sig(z^2) + h_prev * (1 - sig(z^2))
    lstm:     c = sig(z^f) * c_prev + sig(z^i) * g(z^g),
              h = sig(z^o) * g(c)
    """
    state_prev = np.asarray(state_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = params.n
    if state_prev.shape != (params.state_size,):
        raise ValueError(
            f"state has shape {state_prev.shape}, expected ({params.state_size},)")
    if x.shape != (params.m,):
        raise ValueError(f"input has shape {x.shape}, expected ({params.m},)")
    if params.arch == "lstm":
        carry_prev, h_prev = state_prev[:n], state_prev[n:]
    else:
        carry_prev, h_prev = None, state_prev
    hhat = np.concatenate([h_prev, x, [1.0]])
    z = np.tensordot(hhat, params.w, axes=1)  # (r, n)

    if params.arch == "tanh-rnn":
        h_next = unit_tanh(z[0])
        return StepTrace(hhat_prev=hhat, z=z, h_next=h_next)
    if params.arch == "rhn":
        gate = sigmoid(z[1])
        h_next = unit_tanh(z[0]) * gate + h_prev * (1.0 - gate)
        return StepTrace(hhat_prev=hhat, z=z, h_next=h_next)
    # lstm
    carry_next = (sigmoid(z[LSTM_FORGET]) * carry_prev
                  + sigmoid(z[LSTM_INPUT]) * unit_tanh(z[LSTM_CANDIDATE]))
    h_next = sigmoid(z[LSTM_OUTPUT]) * unit_tanh(carry_next)
    return StepTrace(hhat_prev=hhat, z=z, h_next=h_next,
                     carry_prev=carry_prev.copy(), carry_next=carry_next)


def _diag_block_matrix(n, s, columns):
    """Builds D from per-block diagonals: columns[k][rows] -> D[row, k*n + j]."""
    r = len(columns)
    d = np.zeros((s, r * n))
    j = np.arange(n)
    for k, diag_rows in enumerate(columns):
        for row_offset, diag in diag_rows:
            d[row_offset + j, k * n + j] = diag
    return d


def jacobians(params, trace):
    """Closed-form H and D for the step recorded in trace.

    H sums the chain through each z^k (the h_prev rows of W^k) with any
    direct pointwise carry dependence (rhn: 1 - gate; lstm: forget gate).
    The lstm h-row partials differentiate through c_t, keeping every block
    diagonal.
    """
    n = params.n
    z = trace.z
    w_h = params.w[:n]  # (n, r, n): rows of each W^k that read h_prev

    if params.arch == "tanh-rnn":
        d1 = unit_tanh_prime(z[0])
        h_jac = d1[:, None] * w_h[:, 0, :].T
        d = _diag_block_matrix(n, n, [[(0, d1)]])
        return StructuredJacobians(H=h_jac, D=d)

    if params.arch == "rhn":
        h_prev = trace.hhat_prev[:n]
        gate = sigmoid(z[1])
        cand = unit_tanh(z[0])
        dz1 = unit_tanh_prime(z[0]) * gate
        dz2 = sigmoid_prime(z[1]) * (cand - h_prev)
        h_jac = (np.diag(1.0 - gate)
                 + dz1[:, None] * w_h[:, 0, :].T
                 + dz2[:, None] * w_h[:, 1, :].T)
        d = _diag_block_matrix(n, n, [[(0, dz1)], [(0, dz2)]])
        return StructuredJacobians(H=h_jac, D=d)

    # lstm: state is (c, h), s = 2n
    sf = sigmoid(z[LSTM_FORGET])
    si = sigmoid(z[LSTM_INPUT])
    so = sigmoid(z[LSTM_OUTPUT])
    gg = unit_tanh(z[LSTM_CANDIDATE])
    gc = unit_tanh(trace.carry_next)
    psi = so * unit_tanh_prime(trace.carry_next)  # dh/dc at fixed z^o

    dc_dz = np.zeros((4, n))
    dc_dz[LSTM_FORGET] = sigmoid_prime(z[LSTM_FORGET]) * trace.carry_prev
    dc_dz[LSTM_INPUT] = sigmoid_prime(z[LSTM_INPUT]) * gg
    dc_dz[LSTM_CANDIDATE] = si * unit_tanh_prime(z[LSTM_CANDIDATE])
    dh_dz = psi * dc_dz
    dh_dz[LSTM_OUTPUT] = sigmoid_prime(z[LSTM_OUTPUT]) * gc

    h_jac = np.zeros((2 * n, 2 * n))
    h_jac[:n, :n] = np.diag(sf)
    h_jac[n:, :n] = np.diag(psi * sf)
    for k in range(4):
        h_jac[:n, n:] += dc_dz[k][:, None] * w_h[:, k, :].T
        h_jac[n:, n:] += dh_dz[k][:, None] * w_h[:, k, :].T
    d = _diag_block_matrix(
        n, 2 * n, [[(0, dc_dz[k]), (n, dh_dz[k])] for k in range(4)])
    return StructuredJacobians(H=h_jac, D=d)


def immediate_factor(trace, jac):
    """The two Kronecker factors of the immediate parameter Jacobian:
    kron(hhat, D) equals d state_t / d theta with state_{t-1} held fixed."""
    return trace.hhat_prev, jac.D


def materialized_immediate(trace, jac):
    """Dense immediate Jacobian, shape s x P. Test/diagnostic use only."""
    return kron(trace.hhat_prev, jac.D)


def output_logits(params, h):
    """Readout logits h @ w_out (no bias)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (params.n,):
        raise ValueError(f"hidden state has shape {h.shape}, expected ({params.n},)")
    return h @ params.w_out
