"""Differentiable loss models with derivatives up to a third-order contraction.

Every model accepts a :class:`ParameterState` (or anything array-like).
Inputs whose imaginary parts are all below ``REAL_TOL`` are evaluated in
real arithmetic, so real input always produces real output.  Complex
input is accepted only by models with ``supports_complex = True``.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import kernels
from .errors import DenseCapExceeded, UnsupportedComplexDomain, ValidationError, ZeroGradient
from .numlin import check_symmetric

REAL_TOL = 1e-12
DENSE_CAP = 5000


@dataclass(frozen=True)
class ParameterState:
    """A complex-capable parameter vector with a real-projection view."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=complex).ravel()
        if v.size == 0:
            raise ValidationError("parameter vector must have at least one entry")
        if not np.all(np.isfinite(v)):
            raise ValidationError("parameter vector has non-finite entries")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.size

    @property
    def real(self) -> np.ndarray:
        return self.values.real.copy()

    @property
    def is_real(self) -> bool:
        return bool(np.max(np.abs(self.values.imag)) <= REAL_TOL)

    def array(self) -> np.ndarray:
        """Real float array when ``is_real``, complex array otherwise."""
        return self.real if self.is_real else self.values.copy()


StateLike = Union[ParameterState, np.ndarray, Sequence[complex], float, complex]


def as_state(theta: StateLike) -> ParameterState:
    return theta if isinstance(theta, ParameterState) else ParameterState(np.atleast_1d(theta))


class LossModel:
    """Base class: subclasses provide ``_value``, ``_grad`` and ``_hvp``.

    ``_hessian`` defaults to stacking HVPs against the identity.
    """

    name = "loss"
    supports_complex = False
    dense_cap = DENSE_CAP

    def __init__(self, dim: int):
        if dim < 1:
            raise ValidationError(f"dimension must be positive, got {dim}")
        self.dim = int(dim)

    # domain handling

    def _x(self, theta: StateLike) -> np.ndarray:
        s = as_state(theta)
        if s.dim != self.dim:
            raise ValidationError(f"{self.name} expects {self.dim} parameters, got {s.dim}")
        if s.is_real:
            return s.real
        if not self.supports_complex:
            raise UnsupportedComplexDomain(f"{self.name} cannot be evaluated at complex parameters")
        return s.values.copy()

    def _v(self, v, x: np.ndarray) -> np.ndarray:
        v = np.asarray(v).ravel()
        if v.shape != (self.dim,):
            raise ValidationError(f"direction must have length {self.dim}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("direction has non-finite entries")
        if np.iscomplexobj(v) and not np.any(v.imag):
            v = v.real
        return v

    # public derivative API

    def eval(self, theta: StateLike):
        return self._value(self._x(theta))

    def grad(self, theta: StateLike) -> np.ndarray:
        return self._grad(self._x(theta))

    def hessian(self, theta: StateLike) -> np.ndarray:
        if self.dim > self.dense_cap:
            raise DenseCapExceeded(
                f"dense Hessian of size {self.dim} exceeds cap {self.dense_cap}; use hvp"
            )
        return self._hessian(self._x(theta))

    def hvp(self, theta: StateLike, v) -> np.ndarray:
        x = self._x(theta)
        return self._hvp(x, self._v(v, x))

    def hgp_fd(self, theta: StateLike, eps_rule: Optional[Callable[[float], float]] = None) -> np.ndarray:
        """Forward-difference estimate of H g: (g(theta + eps g) - g(theta)) / eps.

        The default step is ``eps = 0.01 / ||g||``.
        """
        x = self._x(theta)
        g = self._grad(x)
        n = np.linalg.norm(g)
        if n == 0:
            raise ZeroGradient(f"{self.name}: gradient is zero, H g estimate undefined")
        eps = 0.01 / n if eps_rule is None else eps_rule(n)
        return (self._grad(x + eps * g) - g) / eps

    def directional_third(self, theta: StateLike, v) -> np.ndarray:
        """Gradient of ``v^T H(theta) v`` with ``v`` held fixed.

        Central differences of the HVP along ``v / ||v||`` with step
        ``eps^(1/3) (1 + ||theta||)``.
        """
        x = self._x(theta)
        v = self._v(v, x)
        nv = np.linalg.norm(v)
        if nv == 0:
            return np.zeros(self.dim, dtype=np.result_type(x, v))
        vh = v / nv
        eps = np.finfo(float).eps ** (1 / 3) * (1 + np.linalg.norm(x))
        return (self._hvp(x + eps * vh, v) - self._hvp(x - eps * vh, v)) * (nv / (2 * eps))

    def _hessian(self, x: np.ndarray) -> np.ndarray:
        dt = np.result_type(x, float)
        H = np.stack([self._hvp(x, e) for e in np.eye(self.dim, dtype=dt)], axis=1)
        return 0.5 * (H + H.T)

    def describe(self) -> dict:
        return {"model": self.name, "dim": self.dim}


class Quadratic(LossModel):
    """E = 1/2 theta^T M theta + b^T theta + c."""

    name = "quadratic"
    supports_complex = True

    def __init__(self, M, b=None, c: float = 0.0):
        M = np.array(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValidationError(f"M must be square, got shape {M.shape}")
        check_symmetric(M)
        super().__init__(M.shape[0])
        self.M = M
        self.b = np.zeros(self.dim) if b is None else np.array(b, dtype=float).ravel()
        if self.b.shape != (self.dim,):
            raise ValidationError(f"b must have length {self.dim}")
        self.c = float(c)
        for a in (self.M, self.b):
            a.flags.writeable = False

    def _value(self, x):
        return 0.5 * x @ self.M @ x + self.b @ x + self.c

    def _grad(self, x):
        return self.M @ x + self.b

    def _hvp(self, x, v):
        return self.M @ v

    def _hessian(self, x):
        return self.M.copy()

    def directional_third(self, theta, v):
        x = self._x(theta)
        return np.zeros(self.dim, dtype=np.result_type(x, self._v(v, x)))

    def describe(self):
        return {
            "model": self.name,
            "dim": self.dim,
            "M": self.M.tolist(),
            "b": self.b.tolist(),
            "c": self.c,
        }


class ScalarSquare(Quadratic):
    """E = 1/2 (theta - center)^2 in one dimension."""

    name = "scalar_square"

    def __init__(self, center: float = 0.0):
        self.center = float(center)
        super().__init__([[1.0]], [-self.center], 0.5 * self.center**2)

    def describe(self):
        return {"model": self.name, "dim": 1, "center": self.center}


class Linear(Quadratic):
    """E = b^T theta + c (zero Hessian)."""

    name = "linear"

    def __init__(self, b, c: float = 0.0):
        b = np.array(b, dtype=float).ravel()
        super().__init__(np.zeros((b.size, b.size)), b, c)


class Rosenbrock(LossModel):
    """E = (a - x)^2 + bhat (y - x^2)^2."""

    name = "rosenbrock"
    supports_complex = True

    def __init__(self, a: float = 1.0, bhat: float = 100.0):
        super().__init__(2)
        self.a = float(a)
        self.bhat = float(bhat)

    def _value(self, p):
        x, y = p
        return (self.a - x) ** 2 + self.bhat * (y - x * x) ** 2

    def _grad(self, p):
        x, y = p
        r = y - x * x
        return np.array([-2 * (self.a - x) - 4 * self.bhat * x * r, 2 * self.bhat * r])

    def _hessian(self, p):
        x, y = p
        B = self.bhat
        hxy = -4 * B * x
        return np.array([[2 - 4 * B * y + 12 * B * x * x, hxy], [hxy, 2 * B]])

    def _hvp(self, p, v):
        return self._hessian(p) @ v

    def describe(self):
        return {"model": self.name, "dim": 2, "a": self.a, "bhat": self.bhat}


class CosBranch(LossModel):
    """cos(theta) + theta for theta < 0, (theta/3)^2 + 1 + theta/3 otherwise.

    Continuous at 0 but not differentiable there.  Complex arguments pick
    the branch by the sign of the real part.
    """

    name = "cos_branch"
    supports_complex = True

    def __init__(self):
        super().__init__(1)

    def _value(self, x):
        t = x[0]
        return np.cos(t) + t if t.real < 0 else (t / 3) ** 2 + 1 + t / 3

    def _grad(self, x):
        t = x[0]
        return np.array([-np.sin(t) + 1 if t.real < 0 else 2 * t / 9 + 1 / 3])

    def _hvp(self, x, v):
        t = x[0]
        return (-np.cos(t) if t.real < 0 else 2 / 9) * v

    def describe(self):
        return {"model": self.name, "dim": 1}


class Quartic(LossModel):
    """E = sum(theta^4) / 4."""

    name = "quartic"
    supports_complex = True

    def _value(self, x):
        return np.sum(x**4) / 4

    def _grad(self, x):
        return x**3

    def _hvp(self, x, v):
        return 3 * x * x * v

    def _hessian(self, x):
        return np.diag(3 * x * x)


class Dataset(NamedTuple):
    x: np.ndarray
    y: np.ndarray


def make_mlp_dataset(seed: int, n: int = 5, d_in: int = 2, d_out: int = 1) -> Dataset:
    """Standard-normal inputs (n x d_in) and targets (n x d_out)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d_in))
    y = rng.standard_normal((n, d_out))
    return Dataset(x, y)


def dataset_checksum(ds: Dataset) -> str:
    h = hashlib.sha256()
    for a in (ds.x, ds.y):
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def save_dataset_csv(ds: Dataset, path) -> None:
    """Write columns x0..x{d-1}, y (or y0.. for vector targets)."""
    d_in, d_out = ds.x.shape[1], ds.y.shape[1]
    ycols = ["y"] if d_out == 1 else [f"y{j}" for j in range(d_out)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{j}" for j in range(d_in)] + ycols)
        for xi, yi in zip(ds.x, ds.y):
            w.writerow([repr(float(v)) for v in (*xi, *yi)])


def load_dataset_csv(path) -> Dataset:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, data = rows[0], np.array(rows[1:], dtype=float)
    d_in = sum(1 for h in header if h.startswith("x"))
    return Dataset(data[:, :d_in], data[:, d_in:])


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple = (2, 10, 1)
    seed: int = 0
    n_examples: int = 5

    def __post_init__(self):
        w = tuple(int(v) for v in self.widths)
        if len(w) < 2 or min(w) < 1:
            raise ValidationError(f"invalid layer widths {self.widths}")
        object.__setattr__(self, "widths", w)

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))


def init_mlp_params(spec: MLPSpec, seed: Optional[int] = None) -> np.ndarray:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng([spec.seed if seed is None else seed, 1])
    parts = []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        parts.append(rng.standard_normal(fan_in * fan_out) / np.sqrt(fan_in))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


class MLP(LossModel):
    """Elu MLP with a linear output layer and mean-squared-error loss."""

    name = "mlp"
    supports_complex = True

    def __init__(self, spec: MLPSpec = MLPSpec(), dataset: Optional[Dataset] = None):
        super().__init__(spec.n_params)
        self.spec = spec
        if dataset is None:
            dataset = make_mlp_dataset(spec.seed, spec.n_examples, spec.widths[0], spec.widths[-1])
        x = np.ascontiguousarray(dataset.x, dtype=float)
        y = np.ascontiguousarray(np.reshape(dataset.y, (x.shape[0], -1)), dtype=float)
        if x.shape[1] != spec.widths[0] or y.shape[1] != spec.widths[-1]:
            raise ValidationError("dataset shape does not match the layer widths")
        self.dataset = Dataset(x, y)
        self._w = np.array(spec.widths, dtype=np.intp)

    def init_params(self, seed: Optional[int] = None) -> np.ndarray:
        return init_mlp_params(self.spec, seed)

    def _value(self, p):
        return kernels.mlp_loss(p, self.dataset.x, self.dataset.y, self._w)

    def _grad(self, p):
        return kernels.mlp_loss_grad(p, self.dataset.x, self.dataset.y, self._w)[1]

    def value_and_grad(self, theta):
        return kernels.mlp_loss_grad(self._x(theta), self.dataset.x, self.dataset.y, self._w)

    def _hvp(self, p, v):
        return kernels.mlp_hvp(p, self.dataset.x, self.dataset.y, self._w, v)

    def _hessian(self, p):
        return kernels.mlp_hessian(p, self.dataset.x, self.dataset.y, self._w)

    def describe(self):
        return {
            "model": self.name,
            "dim": self.dim,
            "widths": list(self.spec.widths),
            "seed": self.spec.seed,
            "n_examples": self.spec.n_examples,
        }


def build_model(name: str, **params) -> LossModel:
    """Construct a model from its registered name and keyword parameters."""
    registry = {
        "quadratic": Quadratic,
        "scalar_square": ScalarSquare,
        "linear": Linear,
        "rosenbrock": Rosenbrock,
        "cos_branch": CosBranch,
        "quartic": Quartic,
    }
    if name == "mlp":
        widths = params.pop("widths", (2, 10, 1))
        seed = params.pop("seed", 0)
        n = params.pop("n_examples", 5)
        if params:
            raise ValidationError(f"unknown mlp parameters: {sorted(params)}")
        return MLP(MLPSpec(tuple(widths), int(seed), int(n)))
    if name not in registry:
        raise ValidationError(f"unknown model {name!r}; choose from {sorted(registry) + ['mlp']}")
    if name == "quartic" and "dim" not in params:
        params["dim"] = 1
    try:
        return registry[name](**params)
    except TypeError as exc:
        raise ValidationError(f"bad parameters for {name}: {exc}") from None
