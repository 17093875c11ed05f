import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pflow.errors import DefectiveMatrix, ValidationError
from pflow.numlin import Spectrum, complex_eig, descending_order, lanczos_topk, orient_spectrum, sym_eigh


def random_sym(n, seed):
    A = np.random.default_rng(seed).standard_normal((n, n))
    return (A + A.T) / 2


def test_sym_eigh_diagonal():
    s = sym_eigh(np.diag([2.0, 0.02]))
    np.testing.assert_allclose(s.eigenvalues, [2, 0.02])
    np.testing.assert_allclose(np.abs(s.eigenvectors), np.eye(2), atol=1e-15)


def test_sym_eigh_swap_matrix():
    s = sym_eigh(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(s.eigenvalues.real, [1, -1])
    r = 1 / np.sqrt(2)
    np.testing.assert_allclose(np.abs(s.eigenvectors.real), np.full((2, 2), r))
    u0, u1 = s.eigenvectors.real.T
    assert u0[0] * u0[1] > 0 and u1[0] * u1[1] < 0


def test_sym_eigh_reconstruction_seed7():
    H = random_sym(5, 7)
    s = sym_eigh(H)
    assert np.linalg.norm(H - s.reconstruct()) <= 1e-8
    assert np.all(np.diff(s.eigenvalues.real) <= 0)


def test_sym_eigh_rejects_nonsymmetric():
    with pytest.raises(ValidationError):
        sym_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_sym_eigh_rejects_nonfinite():
    with pytest.raises(ValidationError):
        sym_eigh(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_complex_eig_diagonal():
    s = complex_eig(np.diag([1 + 1j, 2]))
    np.testing.assert_allclose(s.eigenvalues, [2, 1 + 1j])
    np.testing.assert_allclose(np.linalg.norm(s.eigenvectors, axis=0), [1, 1])


def test_complex_eig_real_input_matches_sym_eigh():
    H = random_sym(6, 3)
    a, b = complex_eig(H.astype(complex)), sym_eigh(H)
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, atol=1e-8)


def test_complex_eig_two_by_two():
    H = np.array([[1j, 1], [1, 1j]])
    s = complex_eig(H)
    np.testing.assert_allclose(s.eigenvalues, [1 + 1j, -1 + 1j], atol=1e-12)
    for i in range(2):
        u = s.eigenvectors[:, i]
        np.testing.assert_allclose(H @ u, s.eigenvalues[i] * u, atol=1e-12)


def test_complex_eig_defective():
    # complex symmetric Jordan block: [[1, i], [i, -1]] is nilpotent
    H = np.array([[1, 1j], [1j, -1]])
    s = complex_eig(H)
    assert s.near_defective
    with pytest.raises(DefectiveMatrix):
        complex_eig(H, strict=True)


def test_lanczos_diagonal():
    d = np.array([3.0, 1.0, 0.5])
    s = lanczos_topk(lambda v: d * v, 3, 2)
    np.testing.assert_allclose(s.eigenvalues.real, [3, 1], rtol=1e-10)
    assert s.is_partial and s.k == 2


def test_lanczos_figure_quadratic():
    d = np.array([2.0, 0.02])
    s = lanczos_topk(lambda v: d * v, 2, 1)
    assert s.top == pytest.approx(2.0, rel=1e-12)


def test_lanczos_random_50():
    H = random_sym(50, 11)
    s = lanczos_topk(lambda v: H @ v, 50, 3, seed=2)
    dense = sym_eigh(H).eigenvalues.real[:3]
    np.testing.assert_allclose(s.eigenvalues.real, dense, rtol=1e-6)
    for i in range(3):
        u = s.eigenvectors[:, i].real
        assert np.linalg.norm(H @ u - s.eigenvalues[i].real * u) <= 1e-6 * np.linalg.norm(H, 2)


def test_lanczos_deterministic():
    H = random_sym(30, 5)
    a = lanczos_topk(lambda v: H @ v, 30, 2, seed=9)
    b = lanczos_topk(lambda v: H @ v, 30, 2, seed=9)
    assert np.array_equal(a.eigenvalues, b.eigenvalues) and np.array_equal(a.eigenvectors, b.eigenvectors)


def test_lanczos_low_rank_breakdown_recovers():
    # rank-1 operator: Krylov space exhausts after one step
    u = np.ones(8) / np.sqrt(8)
    s = lanczos_topk(lambda v: 5 * u * (u @ v), 8, 1)
    assert s.top == pytest.approx(5.0)


def test_lanczos_breakdown_below_k_raises():
    from pflow.errors import LanczosBreakdown

    with pytest.raises(LanczosBreakdown):
        lanczos_topk(lambda v: np.zeros_like(v), 8, 6, iters=6)


def test_lanczos_validates_k():
    with pytest.raises(ValidationError):
        lanczos_topk(lambda v: v, 3, 4)


def test_orient_flip():
    s = Spectrum(np.array([1.0, 0.5]), np.array([[-1.0, 0.0], [0.0, 1.0]]))
    o = orient_spectrum(s, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(o.eigenvectors[:, 0], [1, 0])
    np.testing.assert_array_equal(o.eigenvalues, s.eigenvalues)


def test_orient_tie_break_first_nonzero_positive():
    s = Spectrum(np.array([1.0, 0.5]), np.array([[0.0, 1.0], [-1.0, 0.0]]))
    o = orient_spectrum(s, np.array([1.0, 0.0]))
    # g^T u_0 = 0, so u_0 is oriented by its first nonzero component
    np.testing.assert_array_equal(o.eigenvectors[:, 0], [0, 1])


def test_descending_order_ties_by_imag():
    w = np.array([1 + 0j, 1 + 2j, 3, 1 - 1j])
    assert list(descending_order(w)) == [2, 1, 0, 3]


sym_matrices = st.integers(1, 8).flatmap(
    lambda n: arrays(np.float64, (n, n), elements=st.floats(-10, 10, allow_nan=False, allow_subnormal=False))
).map(lambda A: (A + A.T) / 2)


@given(sym_matrices)
def test_reconstruction_property(H):
    s = sym_eigh(H)
    assert np.linalg.norm(H - s.reconstruct()) <= 1e-8 * max(np.linalg.norm(H), 1e-300) + 1e-300
    assert s.eigenvalues.imag.max(initial=0) == 0 and not np.any(s.eigenvectors.imag)


@given(sym_matrices, st.integers(0, 2**31))
def test_orientation_idempotent(H, seed):
    g = np.random.default_rng(seed).standard_normal(H.shape[0])
    o1 = orient_spectrum(sym_eigh(H), g)
    o2 = orient_spectrum(o1, g)
    np.testing.assert_array_equal(o1.eigenvectors, o2.eigenvectors)
    assert np.all((g @ o1.eigenvectors).real >= -1e-12 * np.linalg.norm(g))


@given(st.integers(5, 40), st.integers(0, 10_000), st.integers(1, 4))
def test_lanczos_dense_agreement(n, seed, k):
    H = random_sym(n, seed)
    s = lanczos_topk(lambda v: H @ v, n, min(k, n), seed=seed)
    dense = sym_eigh(H).eigenvalues.real[: s.k]
    np.testing.assert_allclose(s.eigenvalues.real, dense, rtol=1e-6, atol=1e-9 * np.abs(dense).max())
