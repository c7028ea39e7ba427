"""Dense matrix/vector primitives shared by all gradient estimators.

Everything operates on float64 numpy arrays. Matrices are 2-D row-major
arrays, row vectors are 1-D arrays. The Kronecker product used throughout
takes a row vector u of length q and an n-by-m matrix A to the n-by-(q*m)
matrix whose i-th column block of width m is u[i] * A; flattened gradients
inherit their parameter ordering from this layout.
"""

import numpy as np

RngHandle = np.random.Generator


def make_rng(seed):
    """Creates a reproducible random stream from a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed, k):
    """Creates k independent child streams from one seed (deterministic)."""
    return [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(seed).spawn(k)]


def as_vector(u, name="vector"):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D array, got shape {u.shape}")
    return u


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    return a


def kron(u, a):
    """Kronecker product of a row vector u (len q) and a matrix A (n x m).

    Returns the n x (q*m) matrix whose column block i (width m) equals
    u[i] * A, i.e. result[j, i*m + c] == u[i] * A[j, c].
    """
    u = as_vector(u, "u")
    a = as_matrix(a, "A")
    return np.kron(u, a)


def kron_vec(u, v):
    """Kronecker product of two row vectors: blocks u[i] * v, length q*m."""
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    return np.kron(u, v)


def frob_norm(a):
    """Frobenius norm sqrt(sum of squared entries); works for 1-D and 2-D."""
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def frob_inner(a, b):
    """Frobenius inner product sum_ij a_ij * b_ij of two same-shape arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def spectral_norm(a, tol=1e-6, max_iters=1000, rng=None):
    """Largest singular value via power iteration on A^T A.

    Returns (estimate, converged). The start vector is a random unit vector
    from rng (a fixed internal seed if rng is None); convergence is declared
    when the estimate's relative change drops below tol.
    """
    a = as_matrix(a, "A")
    n, m = a.shape
    if n != m:
        raise ValueError(f"spectral_norm expects a square matrix, got {a.shape}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if rng is None:
        rng = make_rng(0)
    v = rng.standard_normal(n)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        v = np.ones(n)
        nv = np.sqrt(n)
    v /= nv
    sigma = 0.0
    for _ in range(max_iters):
        w = a.T @ (a @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        sigma_new = np.sqrt(nw)  # ||A^T A v|| -> sigma^2 at the fixed point
        v = w / nw
        if sigma > 0 and abs(sigma_new - sigma) <= tol * sigma_new:
            return float(sigma_new), True
        sigma = sigma_new
    return float(sigma), False


def rademacher(rng, k):
    """k i.i.d. uniform random signs in {-1.0, +1.0}."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return rng.integers(0, 2, size=k).astype(np.float64) * 2.0 - 1.0


def reduce_kron_sum(terms, rng, signs=None):
    """Collapses sum_i kron(A_i, B_i) to a single random Kronecker pair.

    Draws independent signs c_i and returns

        A' = sum_i c_i p_i A_i,    B' = sum_i c_i B_i / p_i,

    with p_i = sqrt(||B_i|| / ||A_i||) (Frobenius norms; p_i = 1 when either
    norm is zero, which keeps degenerate terms harmless). kron(A', B') is an
    unbiased estimate of the sum over the sign distribution, and this choice
    of p_i minimizes its variance.

    Args:
        terms: list of (A_i, B_i) with A_i row vectors of one length and
            B_i matrices of one shape.
        rng: sign source; ignored when signs is given.
        signs: optional explicit sign vector (tests enumerate all 2^m).

    Returns:
        (A', B') as a row vector and a matrix.
    """
    if not terms:
        raise ValueError("terms must be non-empty")
    vecs = [as_vector(a, "A_i") for a, _ in terms]
    mats = [as_matrix(b, "B_i") for _, b in terms]
    q = vecs[0].shape[0]
    shape = mats[0].shape
    for v in vecs:
        if v.shape[0] != q:
            raise ValueError("all A_i must have the same length")
    for m in mats:
        if m.shape != shape:
            raise ValueError("all B_i must have the same shape")
    m_terms = len(terms)
    if signs is None:
        signs = rademacher(rng, m_terms)
    else:
        signs = np.asarray(signs, dtype=np.float64)
        if signs.shape != (m_terms,):
            raise ValueError("signs must have one entry per term")
    a_out = np.zeros(q)
    b_out = np.zeros(shape)
    for c, v, b in zip(signs, vecs, mats):
        na = np.linalg.norm(v)
        nb = np.linalg.norm(b)
        p = 1.0 if (na == 0.0 or nb == 0.0) else np.sqrt(nb / na)
        a_out += c * p * v
        b_out += (c / p) * b
    return a_out, b_out
