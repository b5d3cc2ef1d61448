"""Vectorised numpy/scipy fern kernels, used when the compiled extension is absent."""
import numpy as np
from scipy import sparse

LITERAL_L2, NORMALIZED_PROXIMITY, MEAN_L1_PROXIMITY = 0, 1, 2


def encode_bits(c: np.ndarray) -> np.ndarray:
    """Cell index within each fern, MSB-first, bit set iff c > 0.  Shape (..., m) -> (...)."""
    m = c.shape[-1]
    pow2 = (1 << np.arange(m - 1, -1, -1)).astype(np.int64)
    return (c > 0).astype(np.int64) @ pow2


def weight_from_c(c: np.ndarray, mode: int) -> np.ndarray:
    m = c.shape[-1]
    a = np.abs(c)
    if mode == MEAN_L1_PROXIMITY:
        return 1 - (1 - a).sum(axis=-1) / m
    dist = np.sqrt(((a - 1) ** 2).sum(axis=-1))
    if mode == LITERAL_L2:
        return dist
    return 1 - dist / np.sqrt(m)


def weight_grad_from_c(c: np.ndarray, mode: int) -> np.ndarray:
    """d(weight)/dc, same shape as ``c``; |.| has subgradient 0 at 0."""
    m = c.shape[-1]
    sg = np.sign(c)
    if mode == MEAN_L1_PROXIMITY:
        return sg / m
    a1 = np.abs(c) - 1
    dist = np.sqrt((a1 ** 2).sum(axis=-1, keepdims=True))
    safe = np.where(dist > 0, dist, 1)
    g = np.where(dist > 0, a1 * sg / safe, 0)
    if mode == LITERAL_L2:
        return g.astype(c.dtype)
    return (-g / np.sqrt(m)).astype(c.dtype)


def _selection(w: np.ndarray, idx: np.ndarray, n_cells: int) -> sparse.csr_matrix:
    r, k = idx.shape
    indptr = np.arange(0, r * k + 1, k, dtype=np.int64)
    return sparse.csr_matrix((w.ravel(), idx.ravel(), indptr), shape=(r, n_cells))


def fern_forward(rows, dims, thr, lut, mode):
    r = rows.shape[0]
    k_ferns, m = dims.shape
    c = np.tanh(rows[:, dims.ravel()].reshape(r, k_ferns, m) - thr)
    idx = encode_bits(c) + (np.arange(k_ferns, dtype=np.int64) << m)
    w = weight_from_c(c, mode).astype(rows.dtype)
    out = np.asarray(_selection(w, idx, lut.shape[0]) @ lut, dtype=rows.dtype)
    return out, c, idx, w


def fern_backward(c, idx, w, lut, grad_out, dims, mode, in_dim):
    r, k_ferns, m = c.shape
    grad_lut = np.asarray(_selection(w, idx, lut.shape[0]).T @ grad_out, dtype=lut.dtype)
    dw = np.empty((r, k_ferns), dtype=lut.dtype)
    for k in range(k_ferns):
        dw[:, k] = np.einsum("rc,rc->r", lut[idx[:, k]], grad_out)
    gpre = dw[..., None] * weight_grad_from_c(c, mode) * (1 - c * c)
    grad_thr = -gpre.sum(axis=0)
    grad_rows = np.zeros((r, in_dim), dtype=lut.dtype)
    flat = gpre.reshape(r, k_ferns * m)
    for j, col in enumerate(dims.ravel()):
        grad_rows[:, col] += flat[:, j]
    return grad_lut, grad_thr.astype(lut.dtype), grad_rows
