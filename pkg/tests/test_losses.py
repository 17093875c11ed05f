import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import FIXTURES, fd_grad
from pflow.errors import DenseCapExceeded, UnsupportedComplexDomain, ValidationError, ZeroGradient
from pflow.losses import (
    MLP,
    CosBranch,
    Linear,
    MLPSpec,
    ParameterState,
    Quadratic,
    Quartic,
    Rosenbrock,
    ScalarSquare,
    build_model,
    dataset_checksum,
    load_dataset_csv,
    make_mlp_dataset,
)

FIG_M = np.diag([2.0, 0.02])


def reference_mlp_loss(params, x, y, widths):
    """Loop-based forward pass used as an independent oracle."""
    acts = [list(row) for row in x]
    pos = 0
    layers = []
    for a, b in zip(widths[:-1], widths[1:]):
        W = params[pos : pos + a * b].reshape(b, a)
        pos += a * b
        layers.append((W, params[pos : pos + b]))
        pos += b
    total = 0.0
    for row, target in zip(acts, y):
        h = np.array(row, dtype=complex)
        for li, (W, bias) in enumerate(layers):
            z = W @ h + bias
            if li < len(layers) - 1:
                z = np.array([v if v.real > 0 else np.exp(v) - 1 for v in z])
            h = z
        total += np.sum((h - target) ** 2)
    return total / (len(y) * widths[-1])


def test_parameter_state_realness():
    s = ParameterState(np.array([1.0, 2.0 + 1e-13j]))
    assert s.is_real and s.dim == 2
    np.testing.assert_array_equal(s.real, [1, 2])
    assert not ParameterState(np.array([1 + 1e-6j])).is_real
    with pytest.raises(ValidationError):
        ParameterState(np.array([np.inf]))
    with pytest.raises(ValueError):
        s.values[0] = 3


def test_quadratic_examples():
    q = Quadratic(FIG_M)
    assert q.eval([1, 1]) == pytest.approx(1.01)
    np.testing.assert_allclose(q.grad([1, 1]), [2, 0.02])
    np.testing.assert_array_equal(q.hessian([0.3, -5]), FIG_M)
    np.testing.assert_array_equal(q.hvp([1, 1], [1, 0]), FIG_M[:, 0])
    np.testing.assert_array_equal(q.hvp([1, 1], [0, 0]), [0, 0])


def test_scalar_square_examples():
    s = ScalarSquare()
    assert s.eval([0]) == 0
    np.testing.assert_array_equal(s.hessian([3]), [[1]])
    assert ScalarSquare(0.6).grad([0.6])[0] == 0


def test_rosenbrock_examples():
    r = Rosenbrock()
    assert r.eval([1, 1]) == 0
    np.testing.assert_array_equal(r.hessian([1, 1]), [[802, -400], [-400, 200]])


def test_hgp_fd_examples():
    assert ScalarSquare().hgp_fd([2.0])[0] == pytest.approx(2.0, rel=1e-12)
    q = Quadratic(FIG_M)
    # forward differences are exact on quadratics: H g = (4, 0.0004)
    np.testing.assert_allclose(q.hgp_fd([1, 1]), [4, 0.0004], rtol=1e-9)
    g = q.grad([1, 1])
    np.testing.assert_allclose(q.hvp([1, 1], g / np.linalg.norm(g)), [2, 0.0002], rtol=1e-3)
    with pytest.raises(ZeroGradient):
        q.hgp_fd([0, 0])


def test_hgp_fd_mlp():
    m = MLP()
    th = m.init_params()
    g = m.grad(th)
    exact = m.hvp(th, g)
    rel = lambda a: np.linalg.norm(a - exact) / np.linalg.norm(exact)
    # default step eps = 0.01/||g|| moves theta by a fixed length 0.01
    assert rel(m.hgp_fd(th)) < 1e-2
    # first-order convergence in the step
    e1, e2 = rel(m.hgp_fd(th, lambda n: 1e-3 / n)), rel(m.hgp_fd(th, lambda n: 5e-4 / n))
    assert e1 < 1e-3 and 1.7 < e1 / e2 < 2.3


def test_directional_third_examples():
    assert np.all(Quadratic(FIG_M).directional_third([1, 2], [3, 4]) == 0)
    assert Quartic(1).directional_third([1.0], [1.0])[0] == pytest.approx(6.0, rel=1e-6)
    assert np.all(Rosenbrock().directional_third([0.3, 0.2], [0, 0]) == 0)


def test_directional_third_mlp_scalar_oracle():
    m = MLP()
    th = m.init_params()
    g = m.grad(th)
    d = m.directional_third(th, g)
    f = lambda x: g @ m.hvp(x, g)
    oracle = fd_grad(f, th, eps=1e-4)
    assert np.linalg.norm(d - oracle) <= 1e-3 * np.linalg.norm(oracle)


class _RealOnly(Linear):
    supports_complex = False


def test_complex_domain():
    with pytest.raises(UnsupportedComplexDomain):
        _RealOnly([1.0, 2.0]).eval([1j, 0])
    assert Linear([1.0, 2.0]).eval([1j, 0]) == 1j
    q = Quadratic(FIG_M)
    assert q.eval([1j, 0]) == pytest.approx(-1.0)
    with pytest.raises(ValidationError):
        q.eval([1, 2, 3])


def test_dense_cap():
    m = MLP()
    m.dense_cap = 10
    with pytest.raises(DenseCapExceeded):
        m.hessian(m.init_params())


def test_mlp_parameter_count_and_forward():
    spec = MLPSpec((2, 10, 1))
    assert spec.n_params == 41
    m = MLP(spec)
    th = m.init_params()
    ds = m.dataset
    ref = reference_mlp_loss(th, ds.x, ds.y, spec.widths)
    assert m.eval(th) == pytest.approx(ref.real, rel=1e-13)
    assert MLP(MLPSpec((2, 5, 3, 1))).dim == 15 + 18 + 4


def test_mlp_complex_forward_matches_reference():
    m = MLP(MLPSpec((2, 4, 1)))
    th = m.init_params() + 0.1j * np.random.default_rng(0).standard_normal(m.dim)
    ref = reference_mlp_loss(th, m.dataset.x, m.dataset.y, m.spec.widths)
    assert abs(m.eval(th) - ref) < 1e-12


def test_mlp_gradient_complex_step():
    # complex-step differentiation: an oracle independent of the backward pass;
    # the public API would project a 1e-30 imaginary part back to real
    m = MLP()
    th = np.random.default_rng(3).standard_normal(m.dim)
    cs = np.array([m._value(th + 1e-30j * e).imag / 1e-30 for e in np.eye(m.dim)])
    np.testing.assert_allclose(m.grad(th), cs, rtol=1e-10, atol=1e-13)


def test_mlp_hessian_fd_and_hvp():
    m = MLP()
    th = np.random.default_rng(4).standard_normal(m.dim) * 0.5
    H = m.hessian(th)
    assert np.max(np.abs(H - H.T)) <= 1e-10 * np.linalg.norm(H)
    Hfd = np.stack([fd_grad(lambda x: m.grad(x)[i], th, 1e-5) for i in range(m.dim)])
    assert np.linalg.norm(H - Hfd) <= 1e-5 * np.linalg.norm(H)
    v = np.random.default_rng(5).standard_normal(m.dim)
    v /= np.linalg.norm(v)
    np.testing.assert_allclose(m.hvp(th, v), H @ v, rtol=1e-8, atol=1e-12)


def test_dataset_determinism_and_fixture():
    a, b = make_mlp_dataset(0), make_mlp_dataset(0)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert dataset_checksum(make_mlp_dataset(1)) != dataset_checksum(a)
    with open(os.path.join(FIXTURES, "mlp_dataset_seed0.sha256")) as f:
        assert dataset_checksum(a) == f.read().strip()
    stored = load_dataset_csv(os.path.join(FIXTURES, "mlp_dataset_seed0.csv"))
    assert dataset_checksum(stored) == dataset_checksum(a)
    assert a.x.shape == (5, 2) and a.y.shape == (5, 1)


def test_build_model_registry():
    assert isinstance(build_model("rosenbrock"), Rosenbrock)
    assert build_model("mlp", seed=2).spec.seed == 2
    assert build_model("quartic").dim == 1
    with pytest.raises(ValidationError):
        build_model("nope")
    with pytest.raises(ValidationError):
        build_model("rosenbrock", c=1)


MODELS = [
    ("quadratic", lambda: Quadratic(np.array([[3.0, 1.0], [1.0, 2.0]]), b=[0.5, -1.0], c=2.0)),
    ("scalar_square", lambda: ScalarSquare(0.6)),
    ("rosenbrock", lambda: Rosenbrock()),
    ("cos_branch", lambda: CosBranch()),
    ("quartic", lambda: Quartic(3)),
    ("mlp", lambda: MLP()),
]


@pytest.mark.parametrize("name,make", MODELS)
def test_gradient_check_20_points(name, make):
    m = make()
    rng = np.random.default_rng(20)
    for _ in range(20):
        th = rng.uniform(-1.5, 1.5, m.dim)
        if name == "cos_branch" and abs(th[0]) < 1e-3:
            continue
        g = m.grad(th)
        fd = fd_grad(lambda x: float(np.real(m.eval(x))), th, 1e-6)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1.0)


@pytest.mark.parametrize("name,make", MODELS)
def test_hessian_symmetry_and_hvp(name, make):
    m = make()
    rng = np.random.default_rng(21)
    for _ in range(5):
        th = rng.uniform(-1.5, 1.5, m.dim)
        H = m.hessian(th)
        assert np.max(np.abs(H - H.T)) <= 1e-10 * max(np.linalg.norm(H), 1e-300)
        v = rng.standard_normal(m.dim)
        np.testing.assert_allclose(m.hvp(th, v), H @ v, rtol=1e-8, atol=1e-10 * np.linalg.norm(H))


@given(
    st.floats(-3, 3, allow_subnormal=False),
    st.floats(-3, 3, allow_subnormal=False),
    st.floats(-3, 3, allow_subnormal=False),
    st.floats(-3, 3, allow_subnormal=False),
)
def test_quadratic_cauchy_riemann(a, b, c, d):
    q = Quadratic(np.array([[2.0, 0.5], [0.5, 1.0]]), b=[0.3, -0.7])
    z = np.array([a + 1j * b, c + 1j * d])
    eps = 1e-6
    for j in range(2):
        e = np.eye(2)[j]
        du = (q.eval(z + eps * e) - q.eval(z - eps * e)) / (2 * eps)
        dv = (q.eval(z + 1j * eps * e) - q.eval(z - 1j * eps * e)) / (2 * eps)
        # analytic: d/dy = i d/dx, and both equal the complex gradient
        assert abs(dv - 1j * du) <= 1e-6 * max(1, abs(du))
        assert abs(du - q.grad(z)[j]) <= 1e-6 * max(1, abs(du))
