"""Simulation of flows, closed-form PF solutions and GD-vs-flow errors.

``euler_simulate`` is the fixed-step forward Euler integrator used for all
flow/GD comparisons.  The step is adjusted to ``h / round(h / step)`` so
that records land exactly on multiples of the modeled learning rate.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field as dc_field, replace
from typing import Dict, List, Optional

import numpy as np

from . import kernels
from .errors import Divergence, Singular, ValidationError
from .flows import (
    DELTA_SING,
    FlowKind,
    FlowSpec,
    Regime,
    alpha,
    alpha_pf,
    classify,
    field,
    spectrum_at,
)
from .losses import MLP, LossModel, ParameterState, Quadratic, StateLike, as_state
from .numlin import sym_eigh

DEFAULT_STEP = 5e-5
DENSE_REFRESH_DIM = 50
DEFAULT_REFRESH = 20
DIAGNOSTIC_DENSE_DIM = 200

_SPECTRAL = {FlowKind.PF, FlowKind.PF_PLUS_NONPRINCIPAL, FlowKind.FLIPPED_TOP}


@dataclass
class Trajectory:
    """Time-ordered records of a simulation or optimizer run.

    ``extra`` holds additional named columns (one value per record) that
    are appended to the CSV after the standard ones.
    """

    t: np.ndarray
    theta: np.ndarray
    loss: np.ndarray
    grad_norm: np.ndarray
    lambda0: np.ndarray
    sc0: np.ndarray
    step: float
    spec: Optional[FlowSpec]
    model: dict
    seed: Optional[int] = None
    diverged: bool = False
    steps_done: int = 0
    meta: Dict[str, object] = dc_field(default_factory=dict)
    extra: Dict[str, np.ndarray] = dc_field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def final(self) -> np.ndarray:
        return self.theta[-1]

    def columns(self) -> List[str]:
        D = self.theta.shape[1]
        cols = ["t"]
        for j in range(D):
            cols += [f"theta_{j}_re", f"theta_{j}_im"]
        cols += ["loss_re", "loss_im", "grad_norm", "lambda0", "sc0_re", "sc0_im"]
        return cols + list(self.extra)

    def rows(self):
        for i in range(len(self.t)):
            row = [self.t[i]]
            for z in self.theta[i]:
                row += [z.real, z.imag]
            row += [self.loss[i].real, self.loss[i].imag, self.grad_norm[i], self.lambda0[i]]
            row += [self.sc0[i].real, self.sc0[i].imag]
            row += [self.extra[k][i] for k in self.extra]
            yield row

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for row in self.rows():
            w.writerow([_fmt(v) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text

    def metadata(self) -> dict:
        return {
            "spec": None if self.spec is None else self.spec.to_dict(),
            "model": self.model,
            "seed": self.seed,
            "step": self.step,
            "records": len(self.t),
            "steps_done": self.steps_done,
            "diverged": self.diverged,
            **self.meta,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.metadata(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    def to_records(self) -> List[dict]:
        cols = self.columns()
        return [dict(zip(cols, (float(v) for v in row))) for row in self.rows()]


def _fmt(v) -> str:
    v = float(v)
    return repr(v) if np.isfinite(v) else ("nan" if np.isnan(v) else ("inf" if v > 0 else "-inf"))


# diagnostics at recorded states


def _top_diagnostics(model: LossModel, x: np.ndarray, h: float):
    """(lambda0, sc0) with sc0 = alpha_PF(h lambda0) (g^T u0); sc0 is NaN when h is."""
    if model.dim > DIAGNOSTIC_DENSE_DIM and np.iscomplexobj(x):
        return np.nan, complex(np.nan, np.nan)
    k = None if model.dim <= DIAGNOSTIC_DENSE_DIM else 1
    s = spectrum_at(model, x, k)
    g = model._grad(x)
    lam = complex(s.eigenvalues[0])
    if s.is_real:
        d = s.eigenvectors[:, 0].real @ g
    elif s.is_partial:
        d = s.eigenvectors[:, 0] @ g
    else:
        d = np.linalg.solve(s.eigenvectors, g)[0]
    if np.isnan(h):
        sc = complex(np.nan, np.nan)
    elif classify(lam, h) is Regime.COLLAPSE:
        sc = complex(-np.inf) if d != 0 else 0j
    else:
        sc = complex(alpha_pf(h * lam) * d)
    return lam.real, sc


def record_states(
    model: LossModel,
    t: np.ndarray,
    thetas: np.ndarray,
    h,
    diagnostics: bool = True,
    **kw,
) -> Trajectory:
    """Build a :class:`Trajectory` by evaluating loss, gradient norm and top-eigen diagnostics.

    ``h`` is a scalar or one learning rate per record (NaN skips sc0).
    """
    n = len(t)
    hs = np.broadcast_to(np.asarray(np.nan if h is None else h, dtype=float), (n,))
    loss = np.empty(n, dtype=complex)
    gn = np.empty(n)
    lam0 = np.full(n, np.nan)
    sc0 = np.full(n, complex(np.nan, np.nan))
    for i, th in enumerate(thetas):
        x = model._x(th)
        loss[i] = model._value(x)
        gn[i] = np.linalg.norm(model._grad(x))
        if diagnostics:
            lam0[i], sc0[i] = _top_diagnostics(model, x, hs[i])
    return Trajectory(
        t=np.asarray(t, dtype=float),
        theta=np.asarray(thetas, dtype=complex),
        loss=loss,
        grad_norm=gn,
        lambda0=lam0,
        sc0=sc0,
        model=model.describe(),
        **kw,
    )


# Euler integration


def effective_step(h: float, step: float) -> float:
    """Largest step not above ``step`` that divides ``h`` into whole substeps."""
    if not (step > 0 and h > 0):
        raise ValidationError(f"step and h must be positive, got step={step}, h={h}")
    return h / max(1, round(h / step))


def _quadratic_coefficients(spec: FlowSpec, lam: np.ndarray):
    """Eigenbasis coefficients of a flow on a quadratic, plus the Collapse mask."""
    h = spec.h
    kind = spec.kind
    z = h * lam
    collapse = np.zeros(len(lam), dtype=bool)
    if kind is FlowKind.NGF:
        a = -np.ones(len(lam), dtype=complex)
    elif kind is FlowKind.POSITIVE_GRADIENT:
        a = np.ones(len(lam), dtype=complex)
    elif kind is FlowKind.MOMENTUM_FLOW:
        a = -np.ones(len(lam), dtype=complex) / (1 - spec.m)
    elif kind is FlowKind.IGR:
        a = -(1 + z / 2) + 0j
    elif kind in (FlowKind.TRUNCATED_SERIES, FlowKind.THIRD_ORDER):
        n = spec.n if kind is FlowKind.TRUNCATED_SERIES else 2
        a = -sum(z**p / (p + 1) for p in range(n + 1)) + 0j
    elif kind is FlowKind.FLIPPED_TOP:
        a = -np.ones(len(lam), dtype=complex)
        a[0] = 1.0
    else:
        a = np.empty(len(lam), dtype=complex)
        for i, zi in enumerate(z):
            if abs(1 - zi) < DELTA_SING:
                collapse[i] = True
                a[i] = 0.0
            else:
                a[i] = alpha(FlowKind.PF, zi)
    return a, collapse


def _euler_quadratic(spec, model: Quadratic, x0, step, nsteps, sample_every):
    # the Hessian is constant, so every flow is affine: theta' = F (M theta + b)
    s = sym_eigh(model.M)
    lam = s.eigenvalues.real
    U = s.eigenvectors.real
    a, collapse = _quadratic_coefficients(spec, lam)
    F = (U * a) @ U.T
    A = F @ model.M
    c = F @ model.b
    start = np.array(x0, dtype=complex)
    if np.any(collapse):
        # one GD step lands a Collapse component on its equilibrium -b_i/lambda_i
        coords = U.T @ start
        bc = U.T @ model.b
        coords[collapse] = -bc[collapse] / lam[collapse]
        start = U @ coords
    samples, done = kernels.euler_linear(A, c, start, step, nsteps, sample_every)
    samples = np.array(samples)
    samples[0] = x0
    return samples, done, {"collapse_directions": np.flatnonzero(collapse).tolist()}


def _euler_generic(spec, model: LossModel, x0, step, nsteps, sample_every, refresh):
    x = np.array(x0)
    samples = [x.astype(complex)]
    spectral = spec.kind in _SPECTRAL
    s = None
    for k in range(1, nsteps + 1):
        if spectral and (k - 1) % refresh == 0:
            s = spectrum_at(model, x, spec.k)
        f = field(spec, model, x, spectrum=s)
        x = x + step * f
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > kernels.GUARD_NORM:
            return np.array(samples), k
        if k % sample_every == 0:
            samples.append(x.astype(complex))
    return np.array(samples), nsteps


def euler_simulate(
    spec: FlowSpec,
    model: LossModel,
    theta0: StateLike,
    total_time: float,
    step: float = DEFAULT_STEP,
    sample_every: Optional[int] = None,
    refresh: Optional[int] = None,
    diagnostics: bool = True,
    seed: Optional[int] = None,
) -> Trajectory:
    """Forward Euler ``theta <- theta + step * field(theta)`` from ``theta0``.

    ``sample_every`` counts Euler substeps between records and defaults to
    one record per modeled GD step (time ``h``).  Spectral flows recompute
    the eigendecomposition every substep when ``D <= 50`` and every
    ``refresh`` (default 20) substeps otherwise.  A state with norm above
    ``1e12`` ends the run with ``diverged=True``.  A Collapse direction
    raises :class:`Singular` except on quadratic models, where the
    component is placed on its equilibrium.
    """
    x0 = model._x(theta0)
    if total_time < 0:
        raise ValidationError(f"total_time must be non-negative, got {total_time}")
    step = effective_step(spec.h, step)
    per_h = round(spec.h / step)
    if sample_every is None:
        sample_every = per_h
    if sample_every < 1:
        raise ValidationError("sample_every must be at least 1")
    nsteps = int(round(total_time / step))
    if refresh is None:
        refresh = 1 if model.dim <= DENSE_REFRESH_DIM else DEFAULT_REFRESH
    meta = {"spectrum_refresh": refresh, "sample_every": sample_every, "total_time": total_time}

    if isinstance(model, Quadratic):
        samples, done, extra = _euler_quadratic(spec, model, x0, step, nsteps, sample_every)
        meta.update(extra)
    elif isinstance(model, MLP) and spec.kind in (
        FlowKind.NGF,
        FlowKind.POSITIVE_GRADIENT,
        FlowKind.MOMENTUM_FLOW,
    ) and not np.iscomplexobj(x0):
        coef = {FlowKind.NGF: -1.0, FlowKind.POSITIVE_GRADIENT: 1.0}.get(spec.kind)
        if coef is None:
            coef = -1.0 / (1 - spec.m)
        d = model.dataset
        samples, done = kernels.euler_mlp_gradflow(x0, d.x, d.y, model._w, coef, step, nsteps, sample_every)
    else:
        samples, done = _euler_generic(spec, model, x0, step, nsteps, sample_every, refresh)

    diverged = done < nsteps or (
        len(samples) and (not np.all(np.isfinite(samples[-1])) or np.linalg.norm(samples[-1]) > kernels.GUARD_NORM)
    )
    t = np.arange(len(samples)) * (sample_every * step)
    return record_states(
        model,
        t,
        samples,
        spec.h,
        diagnostics,
        step=step,
        spec=spec,
        seed=seed,
        diverged=bool(diverged),
        steps_done=int(done),
        meta=meta,
    )


# accurate reference solutions


def reference_simulate(
    spec: FlowSpec, model: LossModel, theta0: StateLike, t_eval, rtol: float = 1e-13, atol: float = 1e-15
) -> np.ndarray:
    """High-order adaptive (DOP853) solution of a real flow, sampled at ``t_eval``.

    Used where Euler's first-order error would swamp the quantity being
    measured, e.g. one-step BEA error orders.
    """
    from scipy.integrate import solve_ivp

    x0 = model._x(theta0)
    if np.iscomplexobj(x0):
        raise ValidationError("reference_simulate supports real states only")
    t_eval = np.atleast_1d(np.asarray(t_eval, dtype=float))

    def rhs(_t, y):
        f = field(spec, model, y)
        if np.iscomplexobj(f):
            if np.max(np.abs(f.imag)) > 1e-12 * max(1.0, np.max(np.abs(f))):
                raise ValidationError("flow left the real domain; use euler_simulate")
            f = f.real
        return f

    sol = solve_ivp(rhs, (0.0, float(t_eval[-1])), x0, method="DOP853", t_eval=t_eval, rtol=rtol, atol=atol)
    if not sol.success:
        raise Divergence(f"reference integration failed: {sol.message}")
    return sol.y.T


# closed forms


def _pf_exact_coords(lam: np.ndarray, x0: np.ndarray, bc: np.ndarray, h: float, t: float) -> np.ndarray:
    out = np.empty(len(lam), dtype=complex)
    for i, (l, x, b) in enumerate(zip(lam, x0, bc)):
        if abs(1 - h * l) < DELTA_SING:
            out[i] = x if t == 0 else (-b / l)
        elif l == 0:
            out[i] = x - t * b
        else:
            ct = alpha_pf(h * l) * l * t
            out[i] = np.exp(ct) * x + np.expm1(ct) / l * b
    return out


def quadratic_pf_exact(M, b, theta0, h: float, t: float) -> ParameterState:
    """Closed-form PF solution on ``E = 1/2 theta^T M theta + b^T theta``.

    Each eigencomponent ``x_i`` solves ``x_i' = c_i (x_i + b_i/lambda_i)``
    with ``c_i = log(1 - h lambda_i)/h``, so at ``t = n h`` it equals the
    GD iterate.  A Collapse component sits on ``-b_i/lambda_i`` for ``t > 0``.
    """
    if not h > 0:
        raise ValidationError(f"h must be positive, got {h}")
    if t < 0:
        raise ValidationError(f"t must be non-negative, got {t}")
    M = np.asarray(M, dtype=float)
    s = sym_eigh(M)
    U = s.eigenvectors.real
    lam = s.eigenvalues.real
    b = np.zeros(M.shape[0]) if b is None else np.asarray(b, dtype=float)
    x0 = np.asarray(as_state(theta0).values)
    coords = _pf_exact_coords(lam, U.T @ x0, U.T @ b, h, t)
    return ParameterState(U @ coords)


def scalar_pf_exact(h: float, z0: complex, t: float) -> complex:
    """PF solution for ``E = z^2/2`` (lambda = 1).

    ``(1-h)^(t/h) z0`` for ``h < 1`` and
    ``(h-1)^(t/h) (cos(pi t/h) + i sin(pi t/h)) z0`` for ``h > 1``.
    """
    if not h > 0:
        raise ValidationError(f"h must be positive, got {h}")
    if abs(1 - h) < DELTA_SING:
        raise Singular("h = 1 is a Collapse learning rate for E = z^2/2", index=0)
    r = t / h
    if h < 1:
        return complex((1 - h) ** r * z0)
    return complex((h - 1) ** r * complex(np.cos(np.pi * r), np.sin(np.pi * r)) * z0)


# GD versus flow


def gd_path(model: LossModel, theta0: StateLike, h: float, n_steps: int) -> np.ndarray:
    """GD iterates ``theta_0 .. theta_n`` (stops early past the divergence guard)."""
    x = model._x(theta0)
    out = [x.copy()]
    for _ in range(n_steps):
        x = x - h * model._grad(x)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > kernels.GUARD_NORM:
            break
        out.append(x.copy())
    return np.array(out)


def flow_vs_gd_error(
    spec: FlowSpec,
    model: LossModel,
    theta0: StateLike,
    h: Optional[float] = None,
    n_steps: int = 10,
    step: float = DEFAULT_STEP,
) -> np.ndarray:
    """``||theta_GD,k - theta_flow(k h)||`` for ``k = 1..n_steps``.

    Shorter than ``n_steps`` when either side diverges first.
    """
    if h is not None and h != spec.h:
        spec = replace(spec, h=h)
    gd = gd_path(model, theta0, spec.h, n_steps)
    traj = euler_simulate(spec, model, theta0, n_steps * spec.h, step, diagnostics=False)
    n = min(len(gd), len(traj.theta)) - 1
    return np.linalg.norm(gd[1 : n + 1] - traj.theta[1 : n + 1], axis=1)


def step_errors(spec: FlowSpec, model: LossModel, theta0: StateLike, hs, n_steps: int = 1) -> np.ndarray:
    """``||theta_GD,n - theta_flow(n h)||`` for each ``h`` in ``hs``, flow solved by DOP853."""
    out = []
    for h in hs:
        gd = gd_path(model, theta0, h, n_steps)
        if len(gd) <= n_steps:
            raise Divergence(f"GD diverged within {n_steps} steps at h={h}")
        flow = reference_simulate(replace(spec, h=h), model, theta0, [n_steps * h])[-1]
        out.append(np.linalg.norm(gd[-1] - flow))
    return np.array(out)


def loglog_slope(hs, errors) -> float:
    """Least-squares slope of ``log(errors)`` against ``log(hs)``."""
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])
