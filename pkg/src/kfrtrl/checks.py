"""The built-in verification suite behind the `check` subcommand.

Each check returns (name, passed, detail). Tolerances and sizes come from
the [check] config section, so a config with zero tolerances reports
failures instead of silently passing.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from kfrtrl.analysis import unbiasedness_report
from kfrtrl.cells import forward, init_params, jacobians, output_logits
from kfrtrl.estimators import rtrl_step, tbptt_grad, uoro_step
from kfrtrl.linalg import frob_norm, kron, make_rng, reduce_kron_sum
from kfrtrl.losses import xent_loss_and_grad
from kfrtrl.tasks import Corpus, corpus_stream
from kfrtrl.training import TrainConfig, one_hot, train_stream

ARCH_CYCLE = ("tanh-rnn", "rhn", "lstm")
_CHECK_TEXT = Corpus("a man, a plan, a canal: panama. " * 6)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _fd_param_jacobian(params, state_prev, x, eps=1e-5):
    out = np.zeros((params.state_size, params.w.size))
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


def _fd_state_jacobian(params, state_prev, x, eps=1e-5):
    s = params.state_size
    out = np.zeros((s, s))
    for i in range(s):
        bumped = np.array(state_prev, dtype=np.float64)
        bumped[i] += eps
        plus = forward(params, bumped, x).state_next
        bumped[i] -= 2.0 * eps
        minus = forward(params, bumped, x).state_next
        out[:, i] = (plus - minus) / (2.0 * eps)
    return out


def _max_rel_err(actual, expected, abs_floor=0.0):
    err = np.abs(actual - expected)
    scale = np.abs(expected) + abs_floor
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > 0, err / scale, np.where(err > 0, np.inf, 0.0))
    return float(np.max(rel)) if rel.size else 0.0


def check_oracle_equivalence(cfg, seed):
    """Forward-mode RTRL totals vs a full-unroll reverse pass."""
    tol = cfg["rel_tol"]
    worst = 0.0
    rng = make_rng(seed)
    for i in range(cfg["oracle_configs"]):
        arch = ARCH_CYCLE[i % 3]
        n = int(rng.integers(3, 9))
        m = int(rng.integers(2, 5))
        p = init_params(arch, n, m, 3, rng=rng, gate_bias=0.0)
        length = int(rng.integers(5, 13))
        window = []
        state = p.zero_state()
        g = np.zeros((p.state_size, p.num_recurrent_params))
        total = np.zeros(p.num_recurrent_params)
        for _ in range(length):
            x = one_hot(int(rng.integers(m)), m)
            y = int(rng.integers(3))
            tr = forward(p, state, x)
            jac = jacobians(p, tr)
            g = rtrl_step(g, jac, tr.hhat_prev)
            _, dlogits = xent_loss_and_grad(output_logits(p, tr.h_next), y)
            total += p.embed_state_grad(dlogits @ p.w_out.T) @ g
            window.append((tr, y))
            state = tr.state_next
        rec, _ = tbptt_grad(window, p)
        worst = max(worst, frob_norm(total - rec) / frob_norm(rec))
    return CheckResult("oracle-equivalence (rtrl vs full backprop)",
                       worst <= tol,
                       f"max norm-rel err {worst:.3e} vs tol {tol:g}")


def check_immediate_factorization(cfg, seed):
    """kron(hhat, D) and H against central finite differences."""
    tol = cfg["fd_tol"]
    worst = 0.0
    rng = make_rng(seed + 1)
    for i in range(cfg["fd_configs"]):
        arch = ARCH_CYCLE[i % 3]
        n = int(rng.integers(3, 9))
        m = int(rng.integers(2, 5))
        p = init_params(arch, n, m, 3, rng=rng, gate_bias=0.5)
        state = rng.uniform(-0.8, 0.8, p.state_size)
        x = rng.uniform(-1, 1, m)
        tr = forward(p, state, x)
        jac = jacobians(p, tr)
        worst = max(worst, _max_rel_err(kron(tr.hhat_prev, jac.D),
                                        _fd_param_jacobian(p, state, x),
                                        abs_floor=1e-3))
        worst = max(worst, _max_rel_err(jac.H,
                                        _fd_state_jacobian(p, state, x),
                                        abs_floor=1e-3))
    return CheckResult("immediate factorization (finite differences)",
                       worst <= tol, f"max rel err {worst:.3e} vs tol {tol:g}")


def check_kron_reduction(cfg, seed):
    """Exhaustive unbiasedness up to four terms plus weight optimality."""
    tol = cfg["exact_tol"]
    rng = make_rng(seed + 2)
    worst = 0.0
    for m_terms in (1, 2, 3, 4):
        terms = [(rng.standard_normal(3), rng.standard_normal((2, 2)))
                 for _ in range(m_terms)]
        target = sum(kron(a, b) for a, b in terms)
        acc = np.zeros_like(target)
        for signs in itertools.product([-1.0, 1.0], repeat=m_terms):
            a, b = reduce_kron_sum(terms, None, signs=np.array(signs))
            acc += kron(a, b)
        worst = max(worst, _max_rel_err(acc / 2 ** m_terms, target,
                                        abs_floor=1e-12))

    def exhaustive_var(terms, ps):
        outs = []
        for signs in itertools.product([-1.0, 1.0], repeat=len(terms)):
            a = sum(c * p * ai for c, p, (ai, _) in zip(signs, ps, terms))
            b = sum((c / p) * bi for c, p, (_, bi) in zip(signs, ps, terms))
            outs.append(kron(a, b))
        outs = np.array(outs)
        return float(np.sum((outs - outs.mean(axis=0)) ** 2)) / len(outs)

    terms = [(rng.standard_normal(3), rng.standard_normal((2, 2)))
             for _ in range(2)]
    ps_opt = [np.sqrt(frob_norm(b) / frob_norm(a)) for a, b in terms]
    var_opt = exhaustive_var(terms, ps_opt)
    optimal = True
    for _ in range(20):
        ps = [p * np.exp(d) for p, d in zip(ps_opt, rng.uniform(-0.5, 0.5, 2))]
        if var_opt > exhaustive_var(terms, ps) + 1e-12:
            optimal = False
    ok = worst <= tol and optimal
    return CheckResult("kronecker-sum reduction (exhaustive)", ok,
                       f"max rel err {worst:.3e} vs tol {tol:g}, "
                       f"weights optimal: {optimal}")


def check_kf_unbiasedness(cfg, seed):
    samples = cfg["unbiased_samples"]
    good = unbiasedness_report("kf-rtrl", n=4, t=5, samples=samples,
                               corpus=_CHECK_TEXT, seed=seed + 3)
    bad = unbiasedness_report("kf-rtrl-biased", n=4, t=5, samples=samples,
                              corpus=_CHECK_TEXT, seed=seed + 3)
    ok = good.fraction_within >= 0.99 and bad.fraction_within < 0.99
    return CheckResult(
        "kf unbiasedness (monte carlo z-test + negative control)", ok,
        f"kf fraction {good.fraction_within:.4f}, "
        f"biased control {bad.fraction_within:.4f}")


def check_uoro_first_step_variance(cfg, seed):
    rng = make_rng(seed + 4)
    p = init_params("rhn", 6, 2, 2, rng=rng, gate_bias=0.0)
    tr = forward(p, rng.uniform(-0.5, 0.5, 6), one_hot(0, 2))
    jac = jacobians(p, tr)
    f = kron(tr.hhat_prev, jac.D)
    f_sq = frob_norm(f) ** 2
    expected = 5.0 * f_sq
    n = cfg["uoro_variance_samples"]
    ys = np.empty(n)
    for i in range(n):
        s, th = uoro_step(np.zeros(6), np.zeros(p.num_recurrent_params),
                          jac, tr.hhat_prev, rng)
        ys[i] = np.dot(s, s) * np.dot(th, th) - 2.0 * float(s @ (f @ th)) + f_sq
    se = ys.std(ddof=1) / np.sqrt(n)
    ok = abs(ys.mean() - expected) <= 4.0 * se + 1e-9 * expected
    return CheckResult("uoro first-step variance identity", ok,
                       f"mean {ys.mean():.6g} vs (n-1)||F||^2 {expected:.6g}")


def check_determinism(cfg, seed):
    def run():
        cell = init_params("rhn", 6, _CHECK_TEXT.vocab, _CHECK_TEXT.vocab,
                           rng=make_rng(seed + 5))
        tc = TrainConfig(estimator="kf-rtrl", batch_size=2, seed=seed + 6,
                         max_steps=25, reset_prob=0.05)
        streams = corpus_stream(_CHECK_TEXT, 2, make_rng(seed + 7))
        return train_stream(tc, cell, streams)

    ok = run() == run()
    return CheckResult("bit-exact determinism (repeated run)", ok,
                       "records identical" if ok else "records differ")


ALL_CHECKS = (
    check_oracle_equivalence,
    check_immediate_factorization,
    check_kron_reduction,
    check_kf_unbiasedness,
    check_uoro_first_step_variance,
    check_determinism,
)


def run_all(check_cfg, seed):
    return [fn(check_cfg, seed) for fn in ALL_CHECKS]
