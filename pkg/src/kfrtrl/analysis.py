"""Statistical verification harness for the gradient estimators.

Four experiment families, all desk-scale (exact RTRL is the oracle, so the
hidden size stays small enough for its dense influence matrix):

  * cosine alignment between estimated and exact loss gradients, tracked
    over time and across network sizes,
  * per-entry z-score unbiasedness reports against exact RTRL,
  * per-entry variance as a function of network size (log-log slopes),
  * spectral diagnostics: per-step transition spectral norm, the running
    norm bounds, and the tracked product ||u|| ||A|| against its 4 C1 C2 /
    eps^2 bound.

Untrained cells driven by a character stream define the trajectories; the
per-step loss is next-character cross-entropy.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from kfrtrl.cells import forward, init_params, jacobians, output_logits
from kfrtrl.estimators import make_estimator, rtrl_step
from kfrtrl.linalg import frob_norm, make_rng, spectral_norm
from kfrtrl.losses import xent_loss_and_grad
from kfrtrl.tasks import bundled_corpus, corpus_stream
from kfrtrl.training import one_hot


@dataclass
class AlignmentSample:
    step: int
    estimator: str
    cosine: float
    seed: int
    units: int


@dataclass
class SpectralDiagnostics:
    step: int
    sigma_h: float
    eps_slack: float
    c1: float
    c2: float
    variance_bound: float
    product_norm: float
    product_bound: float
    bound_applicable: bool


@dataclass
class UnbiasednessReport:
    estimator: str
    t: int
    samples: int
    z_scores: np.ndarray
    fraction_within: float


@dataclass
class VarianceRow:
    units: int
    estimator: str
    per_entry_variance: float
    standard_error: float
    samples: int


@dataclass
class VarianceScalingReport:
    rows: list
    slopes: dict
    ratio_slope: float


def cosine(g_est, g_exact):
    """Cosine of the angle between two flat gradients.

    A zero estimate maps to 0 (worst-case alignment); a zero exact gradient
    leaves the angle undefined and raises.
    """
    g_est = np.asarray(g_est, dtype=np.float64)
    g_exact = np.asarray(g_exact, dtype=np.float64)
    if g_est.shape != g_exact.shape:
        raise ValueError("gradient lengths differ")
    n_exact = np.linalg.norm(g_exact)
    if n_exact == 0.0:
        raise ValueError("exact gradient is zero; cosine undefined")
    n_est = np.linalg.norm(g_est)
    if n_est == 0.0:
        return 0.0
    return float(np.dot(g_est, g_exact) / (n_est * n_exact))


def ls_slope(x, y):
    """Least-squares slope of y on x with its standard error."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    res = stats.linregress(x, y)
    return float(res.slope), float(res.stderr)


def one_sided_greater_pvalue(a, b):
    """Welch test p-value for mean(a) > mean(b)."""
    return float(stats.ttest_ind(a, b, equal_var=False,
                                 alternative="greater").pvalue)


def _resolve_corpus(corpus):
    return bundled_corpus() if corpus is None else corpus


def _make_cell(arch, n, vocab, rng, gate_bias):
    # inputs are one-hot characters, so the input width equals the vocab
    return init_params(arch, n, vocab, vocab, rng=rng, gate_bias=gate_bias)


def _estimator_set(names, cell, avg_count):
    return [make_estimator(name, cell,
                           avg_count=(avg_count if name == "uoro-avg" else 1))
            for name in names]


def _alignment_repeat(arch, n, steps, record_steps, names, corpus, seed,
                      gate_bias, avg_count):
    """One independent repeat: returns AlignmentSample rows."""
    rng = make_rng(seed)
    cell = _make_cell(arch, n, corpus.vocab, rng, gate_bias)
    (lane,) = corpus_stream(corpus, 1, rng)
    ests = _estimator_set(names, cell, avg_count)
    g = np.zeros((cell.state_size, cell.num_recurrent_params))
    state = cell.zero_state()
    out = []
    for t in range(1, steps + 1):
        x_sym, y = next(lane)
        tr = forward(cell, state, one_hot(x_sym, cell.m))
        jac = jacobians(cell, tr)
        g = rtrl_step(g, jac, tr.hhat_prev)
        _, dlogits = xent_loss_and_grad(output_logits(cell, tr.h_next), y)
        dldstate = cell.embed_state_grad(dlogits @ cell.w_out.T)
        exact = dldstate @ g
        record = t in record_steps
        for est in ests:
            est.observe(tr, jac, rng)
            if record:
                out.append(AlignmentSample(
                    step=t, estimator=est.name,
                    cosine=cosine(est.rec_gradient(dldstate), exact),
                    seed=seed, units=n))
        state = tr.state_next
    return out


def _run_repeats(fn, repeats, seed, threads):
    seeds = [seed + 1000 * r for r in range(repeats)]
    if threads <= 1:
        chunks = [fn(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(fn, seeds))
    return [row for chunk in chunks for row in chunk]


def run_alignment_over_time(arch="rhn", n=32, steps=2000, repeats=100,
                            estimators=("kf-rtrl", "uoro"), corpus=None,
                            seed=0, record_every=20, gate_bias=0.0,
                            avg_count=1, threads=1):
    """Cosine alignment per step on untrained cells, repeated with
    independent seeds. Records every record_every-th step."""
    corpus = _resolve_corpus(corpus)
    record_steps = set(range(record_every, steps + 1, record_every))
    record_steps.add(1)

    def repeat(s):
        return _alignment_repeat(arch, n, steps, record_steps, estimators,
                                 corpus, s, gate_bias, avg_count)

    return _run_repeats(repeat, repeats, seed, threads)


def run_alignment_over_units(ns=(8, 16, 32, 64), steps=100, repeats=100,
                             estimators=("kf-rtrl", "uoro", "uoro-avg"),
                             arch="rhn", corpus=None, seed=0, gate_bias=0.0,
                             threads=1):
    """Cosine alignment after a fixed number of steps for several network
    sizes; uoro-avg uses as many members as there are units."""
    corpus = _resolve_corpus(corpus)
    out = []
    for n in ns:
        def repeat(s, n=n):
            return _alignment_repeat(arch, n, steps, {steps}, estimators,
                                     corpus, s, gate_bias, avg_count=n)

        out.extend(_run_repeats(repeat, repeats, seed + 17 * n, threads))
    return out


def _exact_trajectory(arch, n, t, corpus, seed, gate_bias):
    """Fixed cell + stream prefix, exact G_t and the per-step traces."""
    rng = make_rng(seed)
    cell = _make_cell(arch, n, corpus.vocab, rng, gate_bias)
    (lane,) = corpus_stream(corpus, 1, rng)
    g = np.zeros((cell.state_size, cell.num_recurrent_params))
    state = cell.zero_state()
    steps = []
    for _ in range(t):
        x_sym, _ = next(lane)
        tr = forward(cell, state, one_hot(x_sym, cell.m))
        jac = jacobians(cell, tr)
        g = rtrl_step(g, jac, tr.hhat_prev)
        steps.append((tr, jac))
        state = tr.state_next
    return cell, steps, g


def unbiasedness_report(estimator="kf-rtrl", arch="rhn", n=4, t=5,
                        samples=50000, corpus=None, seed=0, gate_bias=0.0,
                        avg_count=1):
    """Per-entry z-scores of the Monte-Carlo mean estimate against exact
    RTRL on one fixed trajectory; summary is the fraction with |z| <= 4."""
    if samples < 100:
        raise ValueError("need at least 100 samples for a z-test")
    corpus = _resolve_corpus(corpus)
    cell, steps, g_exact = _exact_trajectory(arch, n, t, corpus, seed,
                                             gate_bias)
    est_rng = make_rng(seed + 1)
    acc = np.zeros_like(g_exact)
    acc2 = np.zeros_like(g_exact)
    for _ in range(samples):
        est = make_estimator(estimator, cell, avg_count=avg_count)
        for tr, jac in steps:
            est.observe(tr, jac, est_rng)
        g = est.materialized()
        acc += g
        acc2 += g * g
    mean = acc / samples
    var = np.maximum(acc2 / samples - mean ** 2, 0.0)
    se = np.sqrt(var / samples)
    diff = np.abs(mean - g_exact)
    # entries that agree to float precision are exact, not lucky draws
    dust = diff <= 1e-9 * np.maximum(np.abs(g_exact), 1.0)
    z = np.where(dust, 0.0,
                 np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.inf))
    return UnbiasednessReport(estimator=estimator, t=t, samples=samples,
                              z_scores=z,
                              fraction_within=float(np.mean(z <= 4.0)))


def _squared_error_to(g_exact):
    """Returns fn(estimator) -> ||G_est - G_exact||^2 computed from the
    factored state, never materializing the full estimate."""
    s, p = g_exact.shape
    g_sq = float(np.sum(g_exact * g_exact))

    def sq_err(est):
        if est.name.startswith("kf"):
            q = est.u.shape[0]
            blocks = g_exact.reshape(s, q, p // q)
            cross = float(np.sum(est.a * np.tensordot(est.u, blocks,
                                                      axes=(0, 1))))
            est_sq = float(np.dot(est.u, est.u) * np.sum(est.a * est.a))
        else:
            cross = float(est.s_tilde @ (g_exact @ est.theta_tilde))
            est_sq = float(np.dot(est.s_tilde, est.s_tilde)
                           * np.dot(est.theta_tilde, est.theta_tilde))
        return est_sq - 2.0 * cross + g_sq

    return sq_err


def variance_scaling_report(ns=(8, 16, 32, 64), t=10, samples=1500,
                            estimators=("kf-rtrl", "uoro"), arch="rhn",
                            corpus=None, seed=0, gate_bias=0.0):
    """Per-entry variance of the estimate at step t versus network size.

    Fits log(variance) against log(n) per estimator and reports the slopes
    plus the slope of the UORO/KF variance ratio.
    """
    corpus = _resolve_corpus(corpus)
    rows = []
    per_entry = {name: [] for name in estimators}
    for n in ns:
        cell, steps, g_exact = _exact_trajectory(arch, n, t, corpus,
                                                 seed + n, gate_bias)
        entries = g_exact.size
        sq_err = _squared_error_to(g_exact)
        for name_index, name in enumerate(estimators):
            est_rng = make_rng(seed + 31 * n + 7919 * (name_index + 1))
            ys = np.empty(samples)
            for i in range(samples):
                est = make_estimator(name, cell)
                for tr, jac in steps:
                    est.observe(tr, jac, est_rng)
                ys[i] = sq_err(est)
            mean = float(ys.mean()) / entries
            se = float(ys.std(ddof=1) / np.sqrt(samples)) / entries
            rows.append(VarianceRow(units=n, estimator=name,
                                    per_entry_variance=mean,
                                    standard_error=se, samples=samples))
            per_entry[name].append(mean)
    if len(ns) >= 2:
        log_ns = np.log(np.asarray(ns, dtype=np.float64))
        slopes = {name: ls_slope(log_ns, np.log(per_entry[name]))
                  for name in estimators}
    else:
        slopes = {name: (float("nan"), float("nan")) for name in estimators}
    ratio_slope = float("nan")
    if len(ns) >= 2 and "kf-rtrl" in per_entry and "uoro" in per_entry:
        ratio = np.asarray(per_entry["uoro"]) / np.asarray(per_entry["kf-rtrl"])
        ratio_slope, _ = ls_slope(np.asarray(ns, dtype=np.float64), ratio)
    return VarianceScalingReport(rows=rows, slopes=slopes,
                                 ratio_slope=ratio_slope)


def spectral_trace(cell, steps=200, corpus=None, seed=0):
    """Runs a KF estimator over a stream while tracking the stability
    diagnostics: per-step sigma(H_t), the running norm bounds C1/C2, the
    slack eps = 1 - max sigma, the variance and factor-product bounds they
    imply, and the realized product ||u|| ||A||."""
    corpus = _resolve_corpus(corpus)
    rng = make_rng(seed)
    (lane,) = corpus_stream(corpus, 1, rng)
    est = make_estimator("kf-rtrl", cell)
    state = cell.zero_state()
    c1 = c2 = 0.0
    max_sigma = 0.0
    out = []
    for t in range(1, steps + 1):
        x_sym, _ = next(lane)
        tr = forward(cell, state, one_hot(x_sym, cell.m))
        jac = jacobians(cell, tr)
        sigma, _ = spectral_norm(jac.H, rng=rng)
        max_sigma = max(max_sigma, sigma)
        c1 = max(c1, frob_norm(tr.hhat_prev))
        c2 = max(c2, frob_norm(jac.D))
        est.observe(tr, jac, rng)
        eps = 1.0 - max_sigma
        applicable = eps > 0.0
        if applicable:
            var_bound = 16.0 * c1 ** 2 * c2 ** 2 / (eps ** 3 * (2.0 - eps))
            prod_bound = 4.0 * c1 * c2 / eps ** 2
        else:
            var_bound = float("nan")
            prod_bound = float("nan")
        out.append(SpectralDiagnostics(
            step=t, sigma_h=sigma, eps_slack=eps, c1=c1, c2=c2,
            variance_bound=var_bound,
            product_norm=frob_norm(est.u) * frob_norm(est.a),
            product_bound=prod_bound, bound_applicable=applicable))
        state = tr.state_next
    return out
