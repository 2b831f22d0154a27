"""Probability transforms, cosine similarity, symmetric eigensolver and the
seeded random generator used by every stage.

Matrices and vectors are plain ``numpy.ndarray`` objects in float64.
"""

import numpy as np

from . import _backend
from .errors import DegenerateInputError, InvalidInputError, NumericalFailureError

LOG_EPS = 1e-12
JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100


class Rng:
    """Single-owner seeded generator (PCG64).

    All randomness in a pipeline stage flows through one instance. ``spawn``
    derives independent child generators deterministically.
    """

    def __init__(self, seed):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidInputError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._seq = np.random.SeedSequence(seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    @classmethod
    def from_sequence(cls, seq):
        obj = cls.__new__(cls)
        obj.seed = None
        obj._seq = seq
        obj.gen = np.random.Generator(np.random.PCG64(seq))
        return obj

    def spawn(self, n):
        return [Rng.from_sequence(s) for s in self._seq.spawn(n)]

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def gaussian(self, size):
        """Standard normal draws by the Box-Muller transform of uniforms."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        if n < 1:
            raise InvalidInputError("need at least one draw")
        m = (n + 1) // 2
        u1 = 1.0 - self.gen.random(m)  # (0, 1], keeps log finite
        u2 = self.gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n].reshape(shape)


def rng_gaussian(rng, n):
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    return rng.gaussian(n)


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{what} contains non-finite values")


def softmax(logits, temperature=1.0, axis=-1):
    """Temperature softmax along ``axis`` with max subtraction."""
    x = np.asarray(logits, dtype=np.float64)
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    _check_finite(x, "logits")
    z = x / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, temperature=1.0, axis=-1):
    x = np.asarray(logits, dtype=np.float64)
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    _check_finite(x, "logits")
    z = x / temperature
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(p, q):
    """-sum p log q, with q clamped below at ``LOG_EPS``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(-np.sum(p * np.log(np.maximum(q, LOG_EPS))))


def l2_normalize(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInputError("cannot normalize a zero vector")
    return x / n


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_matrix(a, b):
    """Pairwise cosines between the rows of ``a`` and ``b``."""
    return np.clip(l2_normalize(a) @ l2_normalize(b).T, -1.0, 1.0)


def sym_eigen(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order and eigenvectors as columns. Each eigenvector's largest-magnitude
    component is made positive.

    The stopping test is the off-diagonal Frobenius norm against
    ``tol * max(1, ||A||_F)``.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {a.shape}")
    _check_finite(a, "matrix")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-9):
        raise InvalidInputError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    scale = max(1.0, float(np.linalg.norm(a)))
    w, v, sweeps, off = _backend.jacobi_eigh(a, tol * scale, max_sweeps)
    if off >= tol * scale:
        raise NumericalFailureError(
            f"Jacobi did not converge in {sweeps} sweeps", residual=off
        )
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(n)])
    signs[signs == 0] = 1.0
    return w, v * signs
