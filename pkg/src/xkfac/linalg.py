"""Dense float64 matrix helpers shared by the curvature and penalty code.

Everything here is a thin, checked wrapper over numpy so that shape and
finiteness errors surface at the call site instead of deep inside an
assembly routine.
"""

from __future__ import annotations

import numpy as np


def as_matrix(a) -> np.ndarray:
    """Coerce to a 2-D float64 array and reject non-finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit dimension check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def kron(a, b) -> np.ndarray:
    """Kronecker product; block (i, j) of the result is a[i, j] * b."""
    return np.kron(as_matrix(a), as_matrix(b))


def khatri_rao_block(a_blocks, h_blocks) -> np.ndarray:
    """Blockwise Kronecker (Khatri-Rao) product of two block matrices.

    Both arguments are mappings (l, l') -> block over the same key set.
    Used only for oracle-scale full assembly; the penalty engine never
    materializes this.
    """
    if set(a_blocks.keys()) != set(h_blocks.keys()):
        raise ValueError("block partitions differ")
    keys = sorted(a_blocks.keys())
    rows = sorted({k[0] for k in keys})
    cols = sorted({k[1] for k in keys})
    if set(keys) != {(r, c) for r in rows for c in cols}:
        raise ValueError("block partition is not a full grid")
    return np.block(
        [[kron(a_blocks[(r, c)], h_blocks[(r, c)]) for c in cols] for r in rows]
    )


def min_eigenvalue_sym(a) -> float:
    """Smallest eigenvalue of a (nearly) symmetric matrix.

    The input is symmetrized as (A + A^T)/2 first; asymmetry beyond 1e-10
    relative is rejected.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    sym = (a + a.T) / 2.0
    return float(np.linalg.eigvalsh(sym)[0])
