"""Dense float64 arithmetic, deterministic RNG streams, and a gradient oracle.

All tensors are plain numpy float64 arrays in row-major order. The few
reductions whose result depends on summation order (matrix products) use an
explicit fixed order so that repeated runs are bit-identical and small cases
match a naive reference exactly.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import DegenerateFeatureError, DimensionError, OracleError

FD_STEP_DEFAULT = 1e-5


def _stream_key(seed: int, stream_id: int) -> int:
    digest = hashlib.blake2b(
        f"{seed}|{stream_id}".encode(), digest_size=16
    ).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Counter-based random stream keyed by (seed, stream_id).

    Philox underneath, so equal (seed, stream_id, call sequence) gives an
    identical draw sequence on every platform. `child` derives a new,
    statistically independent stream from string/int labels without consuming
    any state from the parent, which makes per-sample and per-augmentation
    streams order-independent.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen: np.random.Generator | None = None

    @property
    def _generator(self) -> np.random.Generator:
        # Constructed on first draw; streams that only derive children never
        # pay for a bit generator.
        if self._gen is None:
            self._gen = np.random.Generator(
                np.random.Philox(key=_stream_key(self.seed, self.stream_id))
            )
        return self._gen

    def child(self, *labels: object) -> "Rng":
        """Derive an independent stream keyed by this stream and `labels`."""
        tag = "|".join(str(x) for x in labels)
        digest = hashlib.blake2b(
            f"{self.stream_id}|{tag}".encode(), digest_size=8
        ).digest()
        return Rng(self.seed, int.from_bytes(digest, "little"))

    def random(self, size=None):
        return self._generator.random(size)

    def uniform(self, low: float, high: float, size=None):
        return self._generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._generator.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self._generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"


def as_tensor(x) -> np.ndarray:
    """Coerce to a float64 array (copying only when needed)."""
    return np.asarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation over the inner axis.

    Bit-identical to the naive triple loop, unlike BLAS kernels which are free
    to reorder partial sums.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul needs 2-d operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.shape} vs {b.shape}"
        )
    m, inner = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    tmp = np.empty((m, n))
    for k in range(inner):
        np.multiply(a[:, k, None], b[k, None, :], out=tmp)
        out += tmp
    return out


def row_norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row of a 2-d array, shape (n, 1)."""
    x = as_tensor(x)
    return np.sqrt(np.sum(x * x, axis=1, keepdims=True))


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale each row of (n, d) input to unit Euclidean norm.

    Raises DegenerateFeatureError naming the first offending row if any row
    norm is below 1e-12.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"expected (n, d) input, got shape {x.shape}")
    norms = row_norms(x)
    bad = np.where(norms[:, 0] < 1e-12)[0]
    if bad.size:
        raise DegenerateFeatureError(
            f"row {bad[0]} has norm {norms[bad[0], 0]:.3e} < 1e-12; "
            "cannot normalize a (near-)zero feature"
        )
    return x / norms


def l2_normalize_rows_backward(
    y: np.ndarray, norms: np.ndarray, grad_y: np.ndarray
) -> np.ndarray:
    """Backward of row normalization.

    `y` are the normalized rows, `norms` the pre-normalization row norms
    (n, 1). For each row, dx = (g - (g.y) y) / ||x||.
    """
    dot = np.sum(grad_y * y, axis=1, keepdims=True)
    return (grad_y - dot * y) / norms


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = FD_STEP_DEFAULT,
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a tensor.

    Perturbs one coordinate at a time: (f(x + h e_i) - f(x - h e_i)) / (2h).
    Exact (up to roundoff) for polynomials of degree <= 2. Works on a private
    copy of `x`; the perturbed copy is what `f` receives.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = float(f(x))
        flat_x[i] = orig - h
        f_minus = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise OracleError(
                f"non-finite value at coordinate {i}: "
                f"f(x+h)={f_plus!r}, f(x-h)={f_minus!r}"
            )
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), with 0/0 defined as 0."""
    a = as_tensor(a)
    b = as_tensor(b)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b)) / denom
