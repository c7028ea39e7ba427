"""Gradient estimators for online recurrent learning, behind one interface.

Every estimator tracks (an approximation of) the influence matrix
G_t = d state_t / d theta, which obeys the forward recursion

    G_t = H_t G_{t-1} + F_t,        F_t = kron(hhat_{t-1}, D_t).    (1)

rtrl       maintains G_t exactly (dense, the oracle).
kf-rtrl    maintains a pair (u, A) with E[kron(u, A)] = G_t. Each step both
           summands of (1) are Kronecker products,

               G_t = kron(u_{t-1}, H A_{t-1}) + kron(hhat, D),

           and the two-term sum collapses to one product with random signs:

               u_t = c1 p1 u_{t-1} + c2 p2 hhat                     (2)
               A_t = (c1/p1) (H A_{t-1}) + (c2/p2) D                (3)
               p1 = sqrt(||H A_{t-1}|| / ||u_{t-1}||)
               p2 = sqrt(||D|| / ||hhat||)                          (4)

uoro       maintains a rank-one pair (s_tilde, theta_tilde) with
           E[outer(s_tilde, theta_tilde)] = G_t, refreshed by a random sign
           vector nu that both probes F_t and mixes the two summands:

               s_tilde     <- rho0 (H s_tilde) + rho1 nu            (5)
               theta_tilde <- theta_tilde/rho0 + (nu F_t)/rho1      (6)

           where nu F_t = kron(hhat, nu D) is formed without ever
           materializing F_t.
uoro-avg   averages k independent uoro estimates.
tbptt      stores the last `horizon` steps and backpropagates the window's
           summed loss exactly; gradients never cross the window edge.

Weight fallbacks: whenever a norm ratio in (4)-(6) would divide by zero the
weight is set to 1, which keeps zero terms harmless (and exact at t = 0).

Loss gradients are materialized without forming the full s-by-P estimate:
dL/dtheta = kron(u, (dL/dstate) A) for Kronecker pairs and
((dL/dstate) . s_tilde) * theta_tilde for rank-one pairs.
"""

from collections import deque

import numpy as np

from kfrtrl.cells import jacobians, output_logits
from kfrtrl.linalg import kron, kron_vec, rademacher
from kfrtrl.losses import xent_loss_and_grad


def _weight(norm_top, norm_bottom):
    if norm_top == 0.0 or norm_bottom == 0.0:
        return 1.0
    return float(np.sqrt(norm_top / norm_bottom))


def rtrl_step(g, jac, hhat):
    """Exact influence-matrix update G <- H G + kron(hhat, D)."""
    s, cols = jac.H.shape[0], jac.D.shape[1]
    if g.shape != (s, hhat.shape[0] * cols):
        raise ValueError(f"influence matrix has shape {g.shape}, "
                         f"expected ({s}, {hhat.shape[0] * cols})")
    return jac.H @ g + kron(hhat, jac.D)


def kf_step(u, a, jac, hhat, rng, signs=None):
    """One Kronecker-factor update, Eqs. (2)-(4).

    Args:
        u, a: current factors, shapes (q,) and (s, r*n).
        jac: StructuredJacobians for this step.
        hhat: augmented previous state, shape (q,).
        rng: sign source; unused when signs is given.
        signs: optional (c1, c2) override, used by exhaustive tests and the
            bias-injected control.

    Returns:
        (u_next, a_next).
    """
    if u.shape != hhat.shape or a.shape != jac.D.shape:
        raise ValueError("factor shapes do not match this cell")
    h_fwd = jac.H @ a
    p1 = _weight(np.linalg.norm(h_fwd), np.linalg.norm(u))
    p2 = _weight(np.linalg.norm(jac.D), np.linalg.norm(hhat))
    if signs is None:
        c1, c2 = rademacher(rng, 2)
    else:
        c1, c2 = signs
    u_next = c1 * p1 * u + c2 * p2 * hhat
    a_next = (c1 / p1) * h_fwd + (c2 / p2) * jac.D
    return u_next, a_next


def uoro_step(s_tilde, theta_tilde, jac, hhat, rng, nu=None):
    """One rank-one update, Eqs. (5)-(6)."""
    s = jac.H.shape[0]
    if s_tilde.shape != (s,):
        raise ValueError("state factor has the wrong length")
    h_fwd = jac.H @ s_tilde
    if nu is None:
        nu = rademacher(rng, s)
    nu_f = kron_vec(hhat, nu @ jac.D)  # row vector nu F_t, length P
    if theta_tilde.shape != nu_f.shape:
        raise ValueError("parameter factor has the wrong length")
    rho0 = _weight(np.linalg.norm(theta_tilde), np.linalg.norm(h_fwd))
    rho1 = _weight(np.linalg.norm(nu_f), np.linalg.norm(nu))
    s_next = rho0 * h_fwd + rho1 * nu
    theta_next = theta_tilde / rho0 + nu_f / rho1
    return s_next, theta_next


def materialize_kron_grad(u, a, dldstate):
    """dL/dtheta = kron(u, dldstate A), flat length P, O(P) memory."""
    if a.shape[0] != dldstate.shape[0]:
        raise ValueError("loss gradient length does not match the factor")
    return kron_vec(u, dldstate @ a)


def tbptt_grad(window, params):
    """Exact reverse-mode gradient of the window's summed loss.

    window is a sequence of (trace, target) pairs, oldest first; target may
    be None for positions that carry no loss. No gradient flows past the
    oldest stored state.

    Returns:
        (recurrent gradient flat P, readout gradient (n, vocab)).
    """
    if len(window) == 0:
        raise RuntimeError("tbptt window is empty")
    rec = np.zeros(params.num_recurrent_params)
    out = np.zeros_like(params.w_out)
    delta = np.zeros(params.state_size)
    for trace, target in reversed(window):
        if target is not None:
            _, dlogits = xent_loss_and_grad(
                output_logits(params, trace.h_next), target)
            delta = delta + params.embed_state_grad(dlogits @ params.w_out.T)
            out += np.outer(trace.h_next, dlogits)
        jac = jacobians(params, trace)
        rec += kron_vec(trace.hhat_prev, delta @ jac.D)
        delta = delta @ jac.H
    return rec, out


class RtrlEstimator:
    """Exact RTRL: dense influence matrix, the oracle the others approximate."""

    name = "rtrl"
    windowed = False

    def __init__(self, params):
        self.shape = (params.state_size, params.num_recurrent_params)
        self.reset()

    def reset(self):
        self.g = np.zeros(self.shape)

    def observe(self, trace, jac, rng):
        self.g = rtrl_step(self.g, jac, trace.hhat_prev)

    def rec_gradient(self, dldstate):
        return dldstate @ self.g

    def materialized(self):
        return self.g


class KfRtrlEstimator:
    """Kronecker-factored RTRL.

    With biased=True both random signs are pinned to +1, so the sign
    product c1 c2 is never -1 and the reduction's cross term stops
    cancelling; this deliberately broken variant is the negative control
    the statistical tests must reject. (Pinning only one sign is not
    enough: the factors stay odd in the remaining sign and the estimate
    stays unbiased.)
    """

    windowed = False

    def __init__(self, params, biased=False):
        self.q = params.n + params.m + 1
        self.a_shape = (params.state_size, params.r * params.n)
        self.biased = biased
        self.name = "kf-rtrl-biased" if biased else "kf-rtrl"
        self.reset()

    def reset(self):
        self.u = np.zeros(self.q)
        self.a = np.zeros(self.a_shape)

    def observe(self, trace, jac, rng):
        signs = (1.0, 1.0) if self.biased else None
        self.u, self.a = kf_step(self.u, self.a, jac, trace.hhat_prev,
                                 rng, signs=signs)

    def rec_gradient(self, dldstate):
        return materialize_kron_grad(self.u, self.a, dldstate)

    def materialized(self):
        return kron(self.u, self.a)


class UoroEstimator:
    """Rank-one unbiased RTRL approximation."""

    name = "uoro"
    windowed = False

    def __init__(self, params):
        self.s = params.state_size
        self.p = params.num_recurrent_params
        self.reset()

    def reset(self):
        self.s_tilde = np.zeros(self.s)
        self.theta_tilde = np.zeros(self.p)

    def observe(self, trace, jac, rng):
        self.s_tilde, self.theta_tilde = uoro_step(
            self.s_tilde, self.theta_tilde, jac, trace.hhat_prev, rng)

    def rec_gradient(self, dldstate):
        return float(dldstate @ self.s_tilde) * self.theta_tilde

    def materialized(self):
        return np.outer(self.s_tilde, self.theta_tilde)


class UoroAvgEstimator:
    """k independent uoro members; gradients are the member average."""

    windowed = False

    def __init__(self, params, k):
        if k < 1:
            raise ValueError("avg count must be >= 1")
        self.members = [UoroEstimator(params) for _ in range(k)]
        self.name = f"uoro-avg{k}"

    def reset(self):
        for m in self.members:
            m.reset()

    def observe(self, trace, jac, rng):
        for m in self.members:
            m.observe(trace, jac, rng)

    def rec_gradient(self, dldstate):
        acc = self.members[0].rec_gradient(dldstate)
        for m in self.members[1:]:
            acc = acc + m.rec_gradient(dldstate)
        return acc / len(self.members)

    def materialized(self):
        acc = self.members[0].materialized()
        for m in self.members[1:]:
            acc = acc + m.materialized()
        return acc / len(self.members)


class TbpttEstimator:
    """Truncated BPTT over a ring buffer of the last `horizon` steps.

    observe() pushes (trace, target); flush() backpropagates the window's
    summed loss, clears the window and returns both gradient pieces. The
    training loop flushes every `horizon` steps and at resets.
    """

    windowed = True

    def __init__(self, params, horizon):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.horizon = horizon
        self.name = f"tbptt{horizon}"
        self.window = deque(maxlen=horizon)

    def reset(self):
        self.window.clear()

    def observe(self, trace, target):
        self.window.append((trace, target))

    def flush(self, params):
        rec, out = tbptt_grad(self.window, params)
        self.window.clear()
        return rec, out


def make_estimator(name, params, horizon=25, avg_count=1):
    """Builds an estimator by name: rtrl | kf-rtrl | kf-rtrl-biased | uoro |
    uoro-avg | tbptt."""
    if name == "rtrl":
        return RtrlEstimator(params)
    if name == "kf-rtrl":
        return KfRtrlEstimator(params)
    if name == "kf-rtrl-biased":
        return KfRtrlEstimator(params, biased=True)
    if name == "uoro":
        return UoroEstimator(params)
    if name == "uoro-avg":
        return UoroAvgEstimator(params, avg_count)
    if name == "tbptt":
        return TbpttEstimator(params, horizon)
    raise ValueError(f"unknown estimator {name!r}")
