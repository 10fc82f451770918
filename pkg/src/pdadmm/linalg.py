"""Dense float64 kernels shared by every solver stage.

All matrices are 2-D, row-major numpy arrays of float64. Samples live in
columns throughout the package: a batch of N inputs with d features is a
d x N matrix.
"""

import numpy as np

# Below this operation count the product accumulates one inner index at a
# time, bit-identical to a naive triple loop. Larger products go to BLAS,
# which is deterministic within a process but may fuse multiply-adds.
SMALL_MATMUL_OPS = 32768


def matmul(a, b):
    """Matrix product with a fixed, reproducible summation order.

    Parameters
    ----------
    a, b : ndarray
        2-D operands with ``a.shape[1] == b.shape[0]``.

    Returns
    -------
    ndarray
        ``a @ b`` with inner-index-ascending accumulation for small
        operands (see ``SMALL_MATMUL_OPS``).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} times "
            f"{b.shape[0]}x{b.shape[1]}"
        )
    m, k = a.shape
    n = b.shape[1]
    if m * k * n <= SMALL_MATMUL_OPS:
        out = np.zeros((m, n))
        for t in range(k):
            out += a[:, t, None] * b[None, t, :]
        return out
    return a @ b


def relu(z):
    """Elementwise max(z, 0)."""
    return np.maximum(np.asarray(z, dtype=np.float64), 0.0)


def frob_sq(a):
    """Sum of squared entries (squared Frobenius norm)."""
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


def softmax_columns(z):
    """Columnwise softmax with per-column max subtraction."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def check_one_hot(y):
    """Raise ValueError unless every column of ``y`` is one-hot."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError(f"label matrix must be 2-D, got shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("label matrix has entries outside {0, 1}")
    col_sums = y.sum(axis=0)
    if not np.all(col_sums == 1.0):
        bad = int(np.argmax(col_sums != 1.0))
        raise ValueError(f"label column {bad} is not one-hot (sum {col_sums[bad]})")
    return y


def softmax_cross_entropy(z, y):
    """Summed cross-entropy of columnwise softmax, and its gradient.

    The loss is summed over samples, not averaged, so penalty weights are
    comparable across batch sizes without rescaling.

    Parameters
    ----------
    z : ndarray
        Score matrix, classes x samples.
    y : ndarray
        One-hot label matrix of the same shape.

    Returns
    -------
    loss : float
        ``sum_n -log softmax(z[:, n])[label_n]``.
    grad : ndarray
        ``softmax(z) - y``, columnwise.
    """
    z = np.asarray(z, dtype=np.float64)
    y = check_one_hot(y)
    if z.shape != y.shape:
        raise ValueError(f"score/label shape mismatch: {z.shape} vs {y.shape}")
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=0, keepdims=True)
    log_denom = np.log(denom)
    loss = float(np.sum(log_denom) - np.sum(shifted * y))
    grad = e / denom - y
    return loss, grad
