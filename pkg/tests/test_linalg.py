import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xkfac import linalg


def random_psd(rng, n):
    m = rng.standard_normal((n, n))
    return m @ m.T


def test_kron_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((2, 5))
    assert np.array_equal(linalg.kron(a, b), np.kron(a, b))


def test_khatri_rao_block_assembly():
    rng = np.random.default_rng(1)
    sizes_a = [2, 3]
    sizes_h = [4, 2]
    a_blocks, h_blocks = {}, {}
    for i in range(2):
        for j in range(2):
            a_blocks[(i, j)] = rng.standard_normal((sizes_a[i], sizes_a[j]))
            h_blocks[(i, j)] = rng.standard_normal((sizes_h[i], sizes_h[j]))
    full = linalg.khatri_rao_block(a_blocks, h_blocks)
    # block (i, j) of the result is kron of the (i, j) factor blocks
    offs = np.cumsum([0] + [sizes_a[i] * sizes_h[i] for i in range(2)])
    for i in range(2):
        for j in range(2):
            got = full[offs[i]:offs[i + 1], offs[j]:offs[j + 1]]
            assert np.allclose(got, np.kron(a_blocks[(i, j)], h_blocks[(i, j)]))


def test_khatri_rao_block_requires_full_grid():
    a = {(0, 0): np.eye(2)}
    h = {(0, 0): np.eye(2), (0, 1): np.eye(2)}
    with pytest.raises(ValueError):
        linalg.khatri_rao_block(a, h)


def test_min_eigenvalue_sym_rejects_asymmetric():
    m = np.array([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        linalg.min_eigenvalue_sym(m)


def test_min_eigenvalue_psd():
    rng = np.random.default_rng(2)
    for n in (1, 3, 6):
        m = random_psd(rng, n)
        assert linalg.min_eigenvalue_sym(m) >= -1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_kron_psd_of_psd(n, m, seed):
    rng = np.random.default_rng(seed)
    a = random_psd(rng, n)
    b = random_psd(rng, m)
    assert linalg.min_eigenvalue_sym(linalg.kron(a, b)) >= -1e-8
