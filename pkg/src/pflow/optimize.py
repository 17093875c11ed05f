"""Discrete optimizers, drift estimators and edge-of-stability diagnostics.

DAL (drift adjusted learning rate) picks ``h = 2 / ||H g_hat||^p`` where
``g_hat`` is the unit gradient, so that the per-step "signal"
``h ||g||`` equals the leading drift term ``(h^2/2) ||H g||`` when p = 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import kernels
from .errors import NoMinimizerAlongRay, ValidationError, ZeroGradient
from .flows import FlowKind, FlowSpec, Regime, classify
from .integrate import DEFAULT_STEP, Trajectory, euler_simulate, record_states
from .losses import LossModel, StateLike, as_state
from .numlin import lanczos_topk

PER_PARAM_FLOOR = 1e-12


def _real(model: LossModel, theta: StateLike) -> np.ndarray:
    s = as_state(theta)
    if not s.is_real:
        raise ValidationError("optimizers operate on real parameters")
    return model._x(s)


@dataclass(frozen=True)
class OptimizerState:
    theta: np.ndarray
    velocity: np.ndarray
    step_index: int = 0
    last_lr: float = float("nan")
    last_drift_estimate: float = float("nan")

    @classmethod
    def start(cls, theta) -> "OptimizerState":
        x = np.array(as_state(theta).real)
        return cls(x, np.zeros_like(x))


class Estimator(enum.Enum):
    EXACT_HVP = "exact_hvp"
    FD_APPROX = "fd_approx"


@dataclass(frozen=True)
class DalConfig:
    p: float = 1.0
    lr_cap: float = 5.0
    estimator: Estimator = Estimator.EXACT_HVP

    def __post_init__(self):
        if not (0 < self.p <= 2):
            raise ValidationError(f"DAL exponent p must lie in (0, 2], got {self.p}")
        if not self.lr_cap > 0:
            raise ValidationError(f"lr_cap must be positive, got {self.lr_cap}")
        if not isinstance(self.estimator, Estimator):
            try:
                object.__setattr__(self, "estimator", Estimator(self.estimator))
            except ValueError:
                raise ValidationError(f"unknown estimator {self.estimator!r}") from None


# plain updates


def gd_step(model: LossModel, theta: StateLike, h: float) -> np.ndarray:
    x = _real(model, theta)
    return x - h * model._grad(x)


def momentum_step(model: LossModel, state: OptimizerState, h: float, m: float) -> OptimizerState:
    """``v <- m v - h g``; ``theta <- theta + v``."""
    if not (0 <= m < 1):
        raise ValidationError(f"momentum decay must lie in [0, 1), got {m}")
    g = model._grad(state.theta)
    v = m * state.velocity - h * g
    return OptimizerState(state.theta + v, v, state.step_index + 1, h, drift_estimate(model, state.theta, h))


# DAL family


def hg_unit_norm(model: LossModel, theta: StateLike, estimator=Estimator.EXACT_HVP) -> float:
    """``||H g_hat||``, from an exact HVP or the forward-difference estimate."""
    x = _real(model, theta)
    g = model._grad(x)
    n = np.linalg.norm(g)
    if n == 0:
        raise ZeroGradient("gradient is zero; DAL learning rate undefined")
    if Estimator(estimator) is Estimator.FD_APPROX:
        return float(np.linalg.norm(model.hgp_fd(x)) / n)
    return float(np.linalg.norm(model._hvp(x, g / n)))


def dal_learning_rate(model: LossModel, theta: StateLike, cfg: DalConfig = DalConfig(), capped: bool = True) -> float:
    """``min(lr_cap, 2 / ||H g_hat||^p)``; a drift-free point returns the cap."""
    x = hg_unit_norm(model, theta, cfg.estimator)
    if x == 0:
        return cfg.lr_cap if capped else float("inf")
    lr = 2.0 / x**cfg.p
    return min(cfg.lr_cap, lr) if capped else lr


def dal_step(model: LossModel, theta: StateLike, cfg: DalConfig = DalConfig()):
    """One GD step at the DAL rate; returns ``(theta', lr)``."""
    lr = dal_learning_rate(model, theta, cfg)
    return gd_step(model, theta, lr), lr


def dal_momentum_step(model: LossModel, state: OptimizerState, m: float, cfg: DalConfig = DalConfig()) -> OptimizerState:
    """``v <- m v - g / (2 ||H g_hat||^p)``; ``theta <- theta + v``.

    The coefficient ``1/(2x)`` is a quarter of the DAL rate ``2/x``; it is
    capped at ``lr_cap`` like every other emitted rate.
    """
    if not (0 <= m < 1):
        raise ValidationError(f"momentum decay must lie in [0, 1), got {m}")
    x = hg_unit_norm(model, state.theta, cfg.estimator)
    coef = cfg.lr_cap if x == 0 else min(cfg.lr_cap, 1.0 / (2.0 * x**cfg.p))
    g = model._grad(state.theta)
    v = m * state.velocity - coef * g
    return OptimizerState(state.theta + v, v, state.step_index + 1, coef, drift_estimate(model, state.theta, coef))


def per_param_rates(model: LossModel, theta: StateLike, p: float = 1.0, cap: float = 5.0) -> np.ndarray:
    """Elementwise ``min(cap, 2 / |(H g)_i|^p)``; entries below 1e-12 get the cap."""
    if not (0 < p <= 2) or not cap > 0:
        raise ValidationError(f"need 0 < p <= 2 and cap > 0, got p={p}, cap={cap}")
    x = _real(model, theta)
    hg = np.abs(model._hvp(x, model._grad(x)))
    rates = np.full(model.dim, float(cap))
    ok = hg >= PER_PARAM_FLOOR
    rates[ok] = np.minimum(cap, 2.0 / hg[ok] ** p)
    return rates


def per_param_dal_step(model: LossModel, theta: StateLike, p: float = 1.0, cap: float = 5.0) -> np.ndarray:
    x = _real(model, theta)
    return x - per_param_rates(model, x, p, cap) * model._grad(x)


# drift


def per_iteration_drift(model: LossModel, theta: StateLike, h: float, step: float = DEFAULT_STEP) -> float:
    """``||gd_step(theta, h) - NGF~(theta, h)||`` with NGF~ the Euler solution."""
    x = _real(model, theta)
    flow = euler_simulate(FlowSpec(FlowKind.NGF, h), model, x, h, step, diagnostics=False)
    return float(np.linalg.norm(gd_step(model, x, h) - flow.final.real))


def drift_estimate(model: LossModel, theta: StateLike, h: float) -> float:
    """Leading drift term ``(h^2/2) ||H g||``."""
    x = _real(model, theta)
    return float(0.5 * h * h * np.linalg.norm(model._hvp(x, model._grad(x))))


def signal_to_noise(model: LossModel, theta: StateLike, h: float) -> float:
    """Step length over leading drift: ``h ||g|| / ((h^2/2) ||H g||)``.

    Equal to 1 at the uncapped DAL rate with ``p = 1``.
    """
    x = _real(model, theta)
    g = model._grad(x)
    return float(h * np.linalg.norm(g) / (0.5 * h * h * np.linalg.norm(model._hvp(x, g))))


def momentum_drift_estimate(model: LossModel, state: OptimizerState, h: float, m: float) -> np.ndarray:
    """``h^2/(2(1-m)^2) H g + m v - h m/(1-m) g`` at the state's parameters."""
    x = state.theta
    g = model._grad(x)
    return h * h / (2 * (1 - m) ** 2) * model._hvp(x, g) + m * state.velocity - h * m / (1 - m) * g


# frozen-eigenpair and Taylor predictions


def predict_dot_product(x0: float, lam: float, h: float, kind) -> float:
    """``g^T u`` after one step of length ``h`` with ``(lambda, u)`` held fixed.

    PF gives ``x0 (1 - h lambda)``, the same factor as one GD step, and is
    negative past ``h lambda = 1``.  NGF gives ``x0 exp(-h lambda)`` and IGR
    ``x0 exp(-h (lambda + h lambda^2 / 2))``.
    """
    kind = kind if isinstance(kind, FlowKind) else FlowKind(str(kind).lower())
    if kind is FlowKind.PF:
        return float(x0 * (1 - h * lam))
    if kind is FlowKind.NGF:
        return float(x0 * np.exp(-h * lam))
    if kind is FlowKind.IGR:
        return float(x0 * np.exp(-h * (lam + h * lam * lam / 2)))
    raise ValidationError(f"predictions exist for NGF, IGR and PF, not {kind.value}")


def taylor_optimal_lr(model: LossModel, theta: StateLike) -> float:
    """``1 / (g_hat^T H g_hat)``, the minimiser of the quadratic model along -g."""
    x = _real(model, theta)
    g = model._grad(x)
    n = np.linalg.norm(g)
    if n == 0:
        raise ZeroGradient("gradient is zero; no descent ray")
    gh = g / n
    curv = float(gh @ model._hvp(x, gh))
    if not curv > 0:
        raise NoMinimizerAlongRay(f"curvature along the gradient is {curv:.3e} <= 0")
    return 1.0 / curv


def loss_change_quadratic(model: LossModel, theta: StateLike, h: float) -> float:
    """Second-order prediction ``-h ||g||^2 + (h^2/2) g^T H g`` of one GD step's loss change."""
    x = _real(model, theta)
    g = model._grad(x)
    return float(-h * (g @ g) + 0.5 * h * h * (g @ model._hvp(x, g)))


def edge_state(lambda0: float, h: float) -> Regime:
    if not h > 0:
        raise ValidationError(f"h must be positive, got {h}")
    return classify(lambda0, h)


def top_eigenvalue(model: LossModel, theta: StateLike, seed: int = 0) -> float:
    """lambda_0 by Lanczos top-1 on the HVP."""
    x = _real(model, theta)
    s = lanczos_topk(lambda v: model._hvp(x, v), model.dim, 1, seed=seed)
    return float(s.eigenvalues[0].real)


# logged runs


class Method(enum.Enum):
    GD = "gd"
    MOMENTUM = "momentum"
    DAL = "dal"
    DAL_MOMENTUM = "dal_momentum"
    PER_PARAM_DAL = "per_param_dal"


def run_optimizer(
    model: LossModel,
    theta0: StateLike,
    method="gd",
    n_steps: int = 10,
    h: Optional[float] = None,
    m: float = 0.0,
    cfg: DalConfig = DalConfig(),
    measure_drift: bool = True,
    drift_step: float = DEFAULT_STEP,
    diagnostics: bool = True,
    seed: Optional[int] = None,
) -> Trajectory:
    """Iterate an optimizer and log it in the trajectory schema.

    Extra columns: ``lr`` (rate used to reach the record; NaN at step 0,
    the mean rate for per-parameter DAL), ``drift_measured`` and
    ``drift_estimated`` (both for the step into the record).  Stops early
    with ``diverged=True`` past the norm guard.
    """
    method = method if isinstance(method, Method) else Method(str(method).lower())
    if method in (Method.GD, Method.MOMENTUM) and not (h is not None and h > 0):
        raise ValidationError(f"{method.value} needs a positive learning rate h")
    state = OptimizerState.start(_real(model, theta0))
    thetas = [state.theta.copy()]
    lrs, dm, de = [np.nan], [np.nan], [np.nan]
    diverged = False
    for _ in range(n_steps):
        x = state.theta
        try:
            if method is Method.GD:
                state = replace(state, theta=gd_step(model, x, h), step_index=state.step_index + 1, last_lr=h)
            elif method is Method.MOMENTUM:
                state = momentum_step(model, state, h, m)
            elif method is Method.DAL:
                new, lr = dal_step(model, x, cfg)
                state = replace(state, theta=new, step_index=state.step_index + 1, last_lr=lr)
            elif method is Method.DAL_MOMENTUM:
                state = dal_momentum_step(model, state, m, cfg)
            else:
                rates = per_param_rates(model, x, cfg.p, cfg.lr_cap)
                state = replace(
                    state, theta=x - rates * model._grad(x), step_index=state.step_index + 1, last_lr=float(rates.mean())
                )
        except ZeroGradient:
            break
        lr = state.last_lr
        if not np.all(np.isfinite(state.theta)) or np.linalg.norm(state.theta) > kernels.GUARD_NORM:
            diverged = True
            break
        thetas.append(state.theta.copy())
        lrs.append(lr)
        de.append(drift_estimate(model, x, lr))
        dm.append(per_iteration_drift(model, x, lr, drift_step) if measure_drift else np.nan)
    t = np.arange(len(thetas), dtype=float)
    # sc0 at each record uses the rate of the step taken from it
    rates = np.append(lrs[1:], np.nan) if h is None else h
    traj = record_states(
        model,
        t,
        np.array(thetas),
        rates,
        diagnostics,
        step=float("nan"),
        spec=None,
        seed=seed,
        diverged=diverged,
        steps_done=len(thetas) - 1,
        meta={"method": method.value, "h": h, "m": m, "dal": {"p": cfg.p, "lr_cap": cfg.lr_cap, "estimator": cfg.estimator.value}},
    )
    traj.extra = {"lr": np.array(lrs), "drift_measured": np.array(dm), "drift_estimated": np.array(de)}
    return traj
