"""Independent numerical oracles shared by the test modules.

Everything here recomputes quantities from first principles (central finite
differences, explicit reverse-mode unrolls, brute-force enumeration) so the
closed-form implementations are checked against a separate path.
"""

import numpy as np

from kfrtrl.cells import forward, jacobians, output_logits
from kfrtrl.linalg import kron
from kfrtrl.training import xent_loss_and_grad


def assert_close(actual, expected, rtol, atol=0.0, label=""):
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    err = np.abs(actual - expected)
    bound = rtol * np.abs(expected) + atol
    if not np.all(err <= bound):
        worst = np.unravel_index(np.argmax(err - bound), err.shape)
        raise AssertionError(
            f"{label} mismatch at {worst}: actual={actual[worst]} "
            f"expected={expected[worst]} err={err[worst]} bound={bound[worst]}")


def fd_param_jacobian(params, state_prev, x, eps=1e-5):
    """Central differences of state_next w.r.t. every recurrent weight,
    columns ordered like the C-order ravel of the (n+m+1, r, n) tensor."""
    s = params.state_size
    out = np.zeros((s, params.w.size))
    for idx in np.ndindex(params.w.shape):
        col = np.ravel_multi_index(idx, params.w.shape)
        orig = params.w[idx]
        params.w[idx] = orig + eps
        plus = forward(params, state_prev, x).state_next
        params.w[idx] = orig - eps
        minus = forward(params, state_prev, x).state_next
        params.w[idx] = orig
        out[:, col] = (plus - minus) / (2.0 * eps)
    return out


def fd_state_jacobian(params, state_prev, x, eps=1e-5):
    """Central differences of state_next w.r.t. the previous state."""
    s = params.state_size
    out = np.zeros((s, s))
    state_prev = np.asarray(state_prev, dtype=np.float64)
    for i in range(s):
        bumped = state_prev.copy()
        bumped[i] += eps
        plus = forward(params, bumped, x).state_next
        bumped[i] -= 2.0 * eps
        minus = forward(params, bumped, x).state_next
        out[:, i] = (plus - minus) / (2.0 * eps)
    return out


def unroll_bptt_grad(params, state0, inputs, targets):
    """Full-unroll reverse-mode gradient of the summed loss, frozen params.

    Returns (rec_grad flat P, out_grad (n, vocab), total_loss_bits). Written
    directly from the chain rule over stored traces; does not use the
    estimator module.
    """
    state = np.asarray(state0, dtype=np.float64)
    traces, jacs, dldh_list, dlogits_list = [], [], [], []
    total = 0.0
    for x, y in zip(inputs, targets):
        tr = forward(params, state, x)
        traces.append(tr)
        jacs.append(jacobians(params, tr))
        loss, dlogits = xent_loss_and_grad(output_logits(params, tr.h_next), y)
        total += loss
        dlogits_list.append(dlogits)
        dldh_list.append(dlogits @ params.w_out.T)
        state = tr.state_next
    rec = np.zeros(params.w.size)
    out = np.zeros_like(params.w_out)
    delta = np.zeros(params.state_size)
    for t in reversed(range(len(traces))):
        delta = delta + params.embed_state_grad(dldh_list[t])
        out += np.outer(traces[t].h_next, dlogits_list[t])
        rec += kron(traces[t].hhat_prev, (delta @ jacs[t].D)[None, :]).ravel()
        delta = delta @ jacs[t].H
    return rec, out, total
