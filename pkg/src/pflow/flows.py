"""Continuous-time vector fields that model gradient descent.

Every flow has the form ``theta' = sum_i alpha(h lambda_i) (g^T u_i) u_i``
over the Hessian eigenpairs ``(lambda_i, u_i)``:

* NGF, the negative gradient flow: ``alpha = -1``.
* IGR: ``alpha = -(1 + z/2)``.
* Principal flow (PF): ``alpha = log(1 - z) / z``.

This module also provides truncations of the PF series, the third-order
flow with its non-principal term, and the probe flows used in
edge-of-stability diagnostics.
"""

from __future__ import annotations

import cmath
import enum
from dataclasses import dataclass, field as dc_field
from typing import List, Optional

import numpy as np

from .errors import Singular, ValidationError
from .losses import LossModel, StateLike, as_state
from .numlin import Spectrum, complex_eig, lanczos_topk, orient_spectrum, sym_eigh

DELTA_SING = 1e-9
SERIES_RADIUS = 1e-6


class FlowKind(enum.Enum):
    NGF = "ngf"
    IGR = "igr"
    THIRD_ORDER = "third_order"
    TRUNCATED_SERIES = "truncated_series"
    PF = "pf"
    PF_PLUS_NONPRINCIPAL = "pf_plus_nonprincipal"
    POSITIVE_GRADIENT = "positive_gradient"
    FLIPPED_TOP = "flipped_top"
    MOMENTUM_FLOW = "momentum_flow"


_ALIASES = {
    "third": FlowKind.THIRD_ORDER,
    "series": FlowKind.TRUNCATED_SERIES,
    "pf_np": FlowKind.PF_PLUS_NONPRINCIPAL,
    "positive": FlowKind.POSITIVE_GRADIENT,
    "flipped": FlowKind.FLIPPED_TOP,
    "momentum": FlowKind.MOMENTUM_FLOW,
}


@dataclass(frozen=True)
class FlowSpec:
    """One vector field plus its parameters.

    ``n`` is the series order for TRUNCATED_SERIES and ``m`` the decay for
    MOMENTUM_FLOW.  ``k`` restricts PF-type fields to a Lanczos top-k
    spectrum; ``None`` means the dense spectrum.
    """

    kind: FlowKind
    h: float
    n: Optional[int] = None
    m: Optional[float] = None
    k: Optional[int] = None

    def __post_init__(self):
        if not isinstance(self.kind, FlowKind):
            object.__setattr__(self, "kind", parse_kind(self.kind))
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValidationError(f"h must be positive, got {self.h}")
        if self.kind is FlowKind.TRUNCATED_SERIES:
            if self.n is None or int(self.n) != self.n or self.n < 0:
                raise ValidationError(f"truncated series needs an order n >= 0, got {self.n}")
            object.__setattr__(self, "n", int(self.n))
        if self.kind is FlowKind.MOMENTUM_FLOW:
            if self.m is None or not (0 <= self.m < 1):
                raise ValidationError(f"momentum decay must lie in [0, 1), got {self.m}")
        if self.k is not None and self.k < 1:
            raise ValidationError(f"k must be positive, got {self.k}")

    @property
    def label(self) -> str:
        if self.kind is FlowKind.TRUNCATED_SERIES:
            return f"series{self.n}"
        if self.kind is FlowKind.MOMENTUM_FLOW:
            return f"momentum{self.m:g}"
        return self.kind.value

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "h": self.h, "n": self.n, "m": self.m, "k": self.k}


def parse_kind(name) -> FlowKind:
    key = str(name).lower().replace("-", "_")
    if key in _ALIASES:
        return _ALIASES[key]
    try:
        return FlowKind(key)
    except ValueError:
        names = sorted([k.value for k in FlowKind] + list(_ALIASES))
        raise ValidationError(f"unknown flow {name!r}; choose from {names}") from None


class Regime(enum.Enum):
    REAL_STABLE = "RealStable"
    COMPLEX_STABLE = "ComplexStable"
    UNSTABLE_COMPLEX = "UnstableComplex"
    COLLAPSE = "Collapse"


def classify(lam: complex, h: float) -> Regime:
    """Regime of one eigendirection: thresholds at 1/h and 2/h on Re(lambda)."""
    lam = complex(lam)
    if abs(1 - h * lam) < DELTA_SING:
        return Regime.COLLAPSE
    if lam.real < 1 / h:
        return Regime.REAL_STABLE
    if lam.real < 2 / h:
        return Regime.COMPLEX_STABLE
    return Regime.UNSTABLE_COMPLEX


def _principal_log(w: complex) -> complex:
    # drop a signed-zero imaginary part so real w < 0 lands on +i*pi
    w = complex(w)
    if w.imag == 0:
        w = complex(w.real, 0.0)
    return cmath.log(w)


def alpha_pf(z: complex) -> complex:
    z = complex(z)
    if abs(1 - z) < DELTA_SING:
        raise Singular(f"alpha_PF is singular at z = {z} (|1 - z| < {DELTA_SING:g})")
    if abs(z) < SERIES_RADIUS:
        return -1 - z / 2 - z * z / 3 - z**3 / 4
    return _principal_log(1 - z) / z


def alpha(kind, z: complex) -> complex:
    """Coefficient function of NGF, IGR or PF at ``z = h * lambda``."""
    kind = kind if isinstance(kind, FlowKind) else parse_kind(kind)
    z = complex(z)
    if kind is FlowKind.NGF:
        return complex(-1.0)
    if kind is FlowKind.IGR:
        return -(1 + z / 2)
    if kind is FlowKind.PF:
        return alpha_pf(z)
    raise ValidationError(f"alpha is defined for NGF, IGR and PF, not {kind.value}")


# spectra


def spectrum_at(model: LossModel, theta: StateLike, k: Optional[int] = None, seed: int = 0) -> Spectrum:
    """Hessian spectrum at ``theta`` oriented against the gradient.

    Dense by default; with ``k`` (real ``theta`` only) the top-k pairs come
    from Lanczos on the HVP.
    """
    x = model._x(theta)
    g = model._grad(x)
    if k is None or k >= model.dim and model.dim <= model.dense_cap:
        H = model.hessian(x)
        s = complex_eig(H) if np.iscomplexobj(x) else sym_eigh(H)
    else:
        if np.iscomplexobj(x):
            raise ValidationError("Lanczos spectra require real parameters")
        s = lanczos_topk(lambda v: model._hvp(x, v), model.dim, k, seed=seed)
    return orient_spectrum(s, g)


def _coefficients(s: Spectrum, g: np.ndarray) -> np.ndarray:
    """Expansion coefficients of ``g`` in the eigenbasis (projections if partial)."""
    U = s.eigenvectors
    if s.is_partial:
        return U.real.T @ g if s.is_real else U.T @ g
    if s.is_real:
        return U.real.T @ g
    return np.linalg.solve(U, g)


def _eig_field(s: Spectrum, g: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    # partial spectra leave the remaining directions on the NGF coefficient -1
    c = _coefficients(s, g)
    U = s.eigenvectors.real if s.is_real else s.eigenvectors
    if s.is_partial:
        return -g + U @ ((alphas + 1) * c)
    return U @ (alphas * c)


def _alphas(kind: FlowKind, s: Spectrum, h: float) -> np.ndarray:
    out = np.empty(s.k, dtype=complex)
    for i, lam in enumerate(s.eigenvalues):
        try:
            out[i] = alpha(kind, h * lam)
        except Singular as exc:
            raise Singular(
                f"direction {i} is a Collapse direction (h*lambda = {h * lam})", index=i
            ) from exc
    return out


def _series(model: LossModel, x: np.ndarray, g: np.ndarray, h: float, n: int) -> np.ndarray:
    out = -g.astype(np.result_type(g, float))
    w = g
    for p in range(1, n + 1):
        w = h * model._hvp(x, w)
        out = out - w / (p + 1)
    return out


def field(spec: FlowSpec, model: LossModel, theta: StateLike, spectrum: Optional[Spectrum] = None) -> np.ndarray:
    """Evaluate the vector field of ``spec`` at ``theta``.

    ``spectrum`` may be supplied to reuse an eigendecomposition already
    computed at ``theta``.
    """
    x = model._x(theta)
    g = model._grad(x)
    h = spec.h
    kind = spec.kind
    if kind is FlowKind.NGF:
        return -g
    if kind is FlowKind.POSITIVE_GRADIENT:
        return g.copy()
    if kind is FlowKind.MOMENTUM_FLOW:
        return -g / (1 - spec.m)
    if kind is FlowKind.IGR:
        return _series(model, x, g, h, 1)
    if kind is FlowKind.TRUNCATED_SERIES:
        return _series(model, x, g, h, spec.n)
    if kind is FlowKind.THIRD_ORDER:
        return _series(model, x, g, h, 2) - (h * h / 12) * model.directional_third(x, g)

    s = spectrum if spectrum is not None else spectrum_at(model, x, spec.k)
    if kind is FlowKind.FLIPPED_TOP:
        c = _coefficients(s, g)
        u0 = s.eigenvectors[:, 0].real if s.is_real else s.eigenvectors[:, 0]
        return -g + 2 * c[0] * u0
    pf = _eig_field(s, g, _alphas(FlowKind.PF, s, h))
    if kind is FlowKind.PF:
        return pf
    if kind is FlowKind.PF_PLUS_NONPRINCIPAL:
        return pf - (h * h / 12) * model.directional_third(x, g)
    raise ValidationError(f"unhandled flow kind {kind}")


# diagnostics


@dataclass(frozen=True)
class DirectionRecord:
    index: int
    eigenvalue: complex
    g_dot_u: complex
    alpha: complex
    sc: complex
    regime: Regime

    def to_dict(self) -> dict:
        c = lambda z: [float(np.real(z)), float(np.imag(z))]
        return {
            "index": self.index,
            "eigenvalue": c(self.eigenvalue),
            "g_dot_u": c(self.g_dot_u),
            "alpha": c(self.alpha),
            "sc": c(self.sc),
            "regime": self.regime.value,
        }


@dataclass(frozen=True)
class StabilityReport:
    records: List[DirectionRecord]
    lambda0: float
    h: float
    k: int
    partial: bool
    threshold: float = dc_field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "threshold", 2 / self.h)

    @property
    def sc0(self) -> complex:
        return self.records[0].sc

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "lambda0": self.lambda0,
            "threshold_2_over_h": self.threshold,
            "k": self.k,
            "partial": self.partial,
            "directions": [r.to_dict() for r in self.records],
        }


def _require_real(model: LossModel, theta: StateLike) -> np.ndarray:
    s = as_state(theta)
    if not s.is_real:
        raise ValidationError("regime diagnostics are defined at real parameters only")
    return model._x(s)


def stability_report(
    model: LossModel, theta: StateLike, h: float, k: Optional[int] = None, spectrum: Optional[Spectrum] = None
) -> StabilityReport:
    """Per-direction stability coefficients ``sc_i = alpha_PF(h lambda_i) (g^T u_i)``.

    Collapse directions carry ``alpha = -inf``.
    """
    if not h > 0:
        raise ValidationError(f"h must be positive, got {h}")
    x = _require_real(model, theta)
    g = model._grad(x)
    s = spectrum if spectrum is not None else spectrum_at(model, x, k)
    dots = s.eigenvectors.real.T @ g
    records = []
    for i, (lam, d) in enumerate(zip(s.eigenvalues, dots)):
        regime = classify(lam, h)
        if regime is Regime.COLLAPSE:
            a = complex(-np.inf)
            sc = a * d if d != 0 else 0j
        else:
            a = alpha_pf(h * lam)
            sc = a * d
        records.append(DirectionRecord(i, complex(lam), complex(d), a, sc, regime))
    return StabilityReport(records, float(s.eigenvalues[0].real), h, s.k, s.is_partial)


def loss_rate(model: LossModel, theta: StateLike, h: float, kind=FlowKind.PF, k: Optional[int] = None) -> complex:
    """dE/dt along a flow: ``sum_i alpha(h lambda_i) (g^T u_i)^2``."""
    kind = kind if isinstance(kind, FlowKind) else parse_kind(kind)
    x = _require_real(model, theta)
    g = model._grad(x)
    if kind is FlowKind.NGF:
        return complex(-(g @ g))
    s = spectrum_at(model, x, k)
    a = _alphas(kind, s, h)
    d = s.eigenvectors.real.T @ g
    rate = np.sum(a * d * d)
    if s.is_partial:
        rate += -(g @ g - d @ d)
    return complex(rate)


@dataclass(frozen=True)
class CriticalDirection:
    index: int
    eigenvalue: complex
    pf: complex
    ngf: complex
    igr: complex
    pf_label: str
    ngf_label: str
    igr_label: str


def _label(z: complex) -> str:
    if z.real < 0:
        return "attract"
    if z.real > 0:
        return "repel"
    return "marginal"


def critical_point_analysis(spectrum: Spectrum, h: float) -> List[CriticalDirection]:
    """Jacobian eigenvalues of PF, NGF and IGR at a critical point.

    PF: ``log(1 - h lambda) / h``; NGF: ``-lambda``; IGR:
    ``-(lambda + (h/2) lambda^2)``.  A Collapse direction gets PF value
    ``-inf`` and label ``collapse``.
    """
    out = []
    for i, lam in enumerate(spectrum.eigenvalues):
        lam = complex(lam)
        ngf = -lam
        igr = -(lam + 0.5 * h * lam * lam)
        if abs(1 - h * lam) < DELTA_SING:
            pf, pf_label = complex(-np.inf), "collapse"
        else:
            pf = _principal_log(1 - h * lam) / h
            pf_label = _label(pf)
        out.append(CriticalDirection(i, lam, pf, ngf, igr, pf_label, _label(ngf), _label(igr)))
    return out


@dataclass(frozen=True)
class NonPrincipalDecomposition:
    raw_term: np.ndarray
    per_direction: np.ndarray
    field_term: np.ndarray
    sum_mismatch: float
    relative_magnitude: float


def nonprincipal_decomposition(model: LossModel, theta: StateLike, h: float) -> NonPrincipalDecomposition:
    """Split ``grad(g^T H g)`` into ``(g^T u_i)^2 grad(lambda_i)`` pieces.

    ``field_term`` is the contribution ``-(h^2/12) raw_term`` to the flow.
    The per-direction sum equals the raw term only when the eigenvectors
    are locally constant, so ``sum_mismatch`` is reported, not enforced.
    """
    x = _require_real(model, theta)
    g = model._grad(x)
    s = spectrum_at(model, x)
    raw = model.directional_third(x, g)
    U = s.eigenvectors.real
    d = U.T @ g
    per = np.stack([d[i] ** 2 * model.directional_third(x, U[:, i]) for i in range(s.k)])
    total = per.sum(0)
    scale = max(np.linalg.norm(raw), np.finfo(float).tiny)
    mismatch = float(np.linalg.norm(total - raw) / scale) if np.any(raw) else float(np.linalg.norm(total))
    gn = np.linalg.norm(g)
    rel = float(np.linalg.norm(raw) / gn) if gn > 0 else 0.0
    return NonPrincipalDecomposition(raw, per, -(h * h / 12) * raw, mismatch, rel)
