"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line; the lines are repeated in the
terminal summary.  Tolerances are the contract values, never loosened.
"""

import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.stats import spearmanr

from pflow.flows import FlowKind, FlowSpec, alpha_pf, critical_point_analysis
from pflow.integrate import (
    euler_simulate,
    gd_path,
    loglog_slope,
    quadratic_pf_exact,
    scalar_pf_exact,
    step_errors,
)
from pflow.losses import MLP, MLPSpec, Quadratic, Rosenbrock, ScalarSquare
from pflow.numlin import sym_eigh
from pflow.optimize import (
    DalConfig,
    dal_learning_rate,
    drift_estimate,
    per_iteration_drift,
    predict_dot_product,
    run_optimizer,
    signal_to_noise,
    top_eigenvalue,
)
from pflow.scenarios import edge_lr, eos_model, eos_run, eos_statistics, run_scenario

EOS = {"widths": [2, 32, 32, 1], "n_examples": 40, "seeds": [0, 1, 2]}
TESTS = os.path.dirname(__file__)


def test_c01_quadratic_exactness(criterion):
    M = 2 * np.diag([1.0, 0.01])
    q, x0, step = Quadratic(M), np.array([1.0, 1.0]), 5e-5
    exact_worst, euler_worst, ok = 0.0, {}, True
    for h in (0.5, 0.9, 1.05):
        gd = gd_path(q, x0, h, 20)
        for k in range(21):
            e = np.linalg.norm(gd[k] - quadratic_pf_exact(M, None, x0, h, k * h).values)
            exact_worst = max(exact_worst, e / max(1.0, np.linalg.norm(gd[k])))
        tr = euler_simulate(FlowSpec(FlowKind.PF, h), q, x0, 20 * h, step, diagnostics=False)
        euler_worst[h] = float(np.max(np.linalg.norm(tr.theta - gd, axis=1)))
    ok = exact_worst <= 1e-10 and all(v <= 10 * step for v in euler_worst.values())
    detail = f"closed form rel err {exact_worst:.1e} (<=1e-10); Euler PF max err " + ", ".join(
        f"h={h}: {v:.1e}" for h, v in euler_worst.items()
    ) + f" (<= {10 * step:.0e})"
    criterion(1, "quadratic exactness", ok, detail)


def test_c02_scalar_regimes(criterion):
    model, z0, worst, shapes = ScalarSquare(), 1.0, 0.0, {}
    for h in (0.8, 1.5, 2.1):
        gd = gd_path(model, [z0], h, 20)[:, 0]
        pf = np.array([scalar_pf_exact(h, z0, k * h) for k in range(21)])
        worst = max(worst, float(np.max(np.abs(gd - pf))))
        for name, z in (("gd", gd), ("pf", pf.real)):
            a = np.abs(z)
            if np.all(z > 0) and np.all(np.diff(a) < 0):
                shape = "monotone"
            elif np.all(np.sign(z[1:]) == -np.sign(z[:-1])):
                shape = "alternating-" + ("contracting" if np.all(np.diff(a) < 0) else "diverging" if np.all(np.diff(a) > 0) else "mixed")
            else:
                shape = "other"
            shapes[(h, name)] = shape
    want = {0.8: "monotone", 1.5: "alternating-contracting", 2.1: "alternating-diverging"}
    ok = worst <= 1e-12 and all(shapes[(h, s)] == w for h, w in want.items() for s in ("gd", "pf"))
    criterion(2, "scalar regimes", ok, f"max |GD - PF| {worst:.1e}; " + ", ".join(f"h={h}: {shapes[(h, 'pf')]}" for h in want))


def test_c03_taylor_coefficients(criterion):
    # Cauchy integral on a circle of radius r, evaluated by the trapezoid rule
    r, n = 0.5, 256
    w = r * np.exp(2j * np.pi * np.arange(n) / n)
    vals = np.array([alpha_pf(z) for z in w])
    coef = np.fft.fft(vals) / n / r ** np.arange(n)
    err = max(abs(coef[p] - (-1 / (p + 1))) for p in range(9))
    criterion(3, "Taylor coefficients of alpha_PF", err <= 1e-6, f"max |c_p + 1/(p+1)|, p<=8: {err:.1e} (<=1e-6)")


def _slopes(theta0):
    model = Rosenbrock()
    hs = np.geomspace(1e-3, 1e-2, 10)
    out = {}
    for kind in (FlowKind.NGF, FlowKind.IGR, FlowKind.THIRD_ORDER):
        for n in (1, 2):
            out[(kind, n)] = loglog_slope(hs, step_errors(FlowSpec(kind, hs[0]), model, theta0, hs, n))
    return out


def test_c04_error_order_slopes(criterion):
    slopes = _slopes([0.0, 0.0])
    target = {FlowKind.NGF: (2.0, 0.15), FlowKind.IGR: (3.0, 0.2), FlowKind.THIRD_ORDER: (4.0, 0.3)}
    ok = all(abs(slopes[(k, n)] - c) <= tol for k, (c, tol) in target.items() for n in (1, 2))
    detail = "; ".join(
        f"{k.value} {slopes[(k, 1)]:.2f}/{slopes[(k, 2)]:.2f} (want {c}+-{tol})" for k, (c, tol) in target.items()
    )
    criterion(4, "one-/two-step error slopes on rosenbrock", ok, detail)


def test_c05_jacobian_spectra(criterion):
    h, eps, lams = 0.5, 1e-6, np.array([0.5, 1.0, 5.0])
    q = Quadratic(np.diag(lams))
    spec = FlowSpec(FlowKind.PF, h)
    from pflow.flows import field

    J = np.zeros((3, 3), dtype=complex)
    for i in range(3):
        e = np.zeros(3)
        e[i] = eps
        J[:, i] = (field(spec, q, e) - field(spec, q, -e)) / (2 * eps)
    got = np.sort_complex(np.linalg.eigvals(J))
    want = np.sort_complex(np.log((1 - h * lams).astype(complex)) / h)
    err = float(np.max(np.abs(got - want)))
    below, above = 2 / h - 1e-9, 2 / h + 1e-9
    labels = [d.pf_label for d in critical_point_analysis(sym_eigh(np.diag([0.5, 1.0, below, above, 5.0])), h)]
    flips = labels == ["repel", "repel", "attract", "attract", "attract"]
    ok = err <= 1e-5 and flips
    criterion(5, "PF Jacobian spectra at a minimum", ok, f"eigenvalue err {err:.1e} (<=1e-5); labels desc {labels}")


def test_c06_drift_law(criterion):
    model, h = Rosenbrock(), 1e-3
    theta = np.array([0.0, 0.0])
    ratio = per_iteration_drift(model, theta, h, step=h / 1000) / drift_estimate(model, theta, h)
    rng = np.random.default_rng(0)
    thetas = rng.uniform([-1.5, -0.5], [1.5, 1.5], size=(5, 2))
    measured, estimated = [], []
    for th in thetas:
        for hh in (1e-3, 2e-3, 5e-3, 1e-2):
            measured.append(per_iteration_drift(model, th, hh, step=hh / 200))
            estimated.append(drift_estimate(model, th, hh))
    rho = float(spearmanr(measured, estimated).statistic)
    ok = 0.95 <= ratio <= 1.05 and rho >= 0.95
    criterion(6, "drift law", ok, f"ratio at h=1e-3 {ratio:.4f} (in [0.95,1.05]); Spearman {rho:.4f} (>=0.95)")


def test_c07_dal_identity(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(100):
        if i % 3 == 0:
            A = rng.standard_normal((4, 4))
            model, theta = Quadratic(A @ A.T + 0.1 * np.eye(4)), rng.standard_normal(4)
        elif i % 3 == 1:
            model, theta = Rosenbrock(), rng.uniform(-2, 2, 2)
        else:
            model = MLP(MLPSpec((2, 10, 1), i, 5))
            theta = model.init_params() + 0.1 * rng.standard_normal(model.dim)
        lr = dal_learning_rate(model, theta, DalConfig(p=1.0), capped=False)
        worst = max(worst, abs(signal_to_noise(model, theta, lr) - 1))
    criterion(7, "DAL signal-to-noise identity", worst <= 1e-12, f"max |SNR - 1| over 100 pairs {worst:.1e} (rounding, <=1e-12)")


def test_c08_dal_stability(criterion):
    problems = [(f"quad cond {s:g}", Quadratic(np.diag([s, 1.0])), np.array([1.0, 1.0])) for s in (10.0, 1e2, 1e3, 1e4)]
    mlp = MLP(MLPSpec((2, 10, 1), 0, 5))
    problems.append(("mlp 5 examples", mlp, mlp.init_params()))
    parts, ok = [], True
    for name, model, x0 in problems:
        dal = run_optimizer(model, x0, "dal", 300, cfg=DalConfig(p=1.0), measure_drift=False, diagnostics=False)
        loss = dal.loss.real
        rises = np.diff(loss[5:]) > 1e-12 * np.maximum(1.0, np.abs(loss[5:-1]))
        dal_ok = not dal.diverged and not rises.any()
        h = 2.5 / top_eigenvalue(model, x0)
        fixed = run_optimizer(model, x0, "gd", 300, h=h, measure_drift=False, diagnostics=False)
        fixed_div = fixed.diverged
        ok &= dal_ok and fixed_div
        parts.append(f"{name}: DAL rises {int(rises.sum())}, fixed 2.5/l0 diverged={fixed_div}")
    criterion(8, "DAL stability vs fixed 2.5/lambda0", ok, "; ".join(parts))


@pytest.fixture(scope="module")
def eos_runs():
    make = eos_model(EOS)
    out = []
    for seed in EOS["seeds"]:
        m = make(seed)
        x0 = m.init_params()
        rows, _ = eos_run(m, x0, edge_lr(m, x0, 1.0), 400)
        out.append(eos_statistics(rows))
    return out


def test_c09_frozen_eigenpair_prediction(criterion, eos_runs):
    h, worst = 0.9, 0.0
    for lam in (0.5, 1.5, 2.5):
        q = Quadratic(np.diag([lam, 0.1]))
        path = gd_path(q, [1.0, 1.0], h, 20)
        x = q.grad(path[0])[0]
        for k in range(1, 21):
            x = predict_dot_product(x, lam, h, "pf")
            worst = max(worst, abs(x - q.grad(path[k])[0]) / max(1.0, abs(x)))
    fracs = [r["frac_frozen_prediction_sign_agrees"] for r in eos_runs]
    ok = worst <= 1e-12 and min(fracs) >= 0.8
    criterion(9, "frozen-eigenpair prediction", ok, f"quadratic 20-step err {worst:.1e}; MLP growth agreement {', '.join(f'{f:.2f}' for f in fracs)} (>=0.80)")


def test_c10_one_direction_instability(criterion, tmp_path):
    # start: first iterate with lambda0 >= 2/h whose GD step raises the loss
    s = run_scenario("flip_u0", {**EOS}, out=str(tmp_path))
    parts = [
        f"seed {r['seed']}: flipped {r.get('flipped_top_dloss', float('nan')):+.2e}, ngf {r.get('ngf_dloss', float('nan')):+.2e}"
        for r in s["runs"]
    ]
    crossing = [r.get("crossing_flipped_top_dloss", float("nan")) for r in s["runs"]]
    ok = all(r.get("flipped_increases_ngf_decreases", False) for r in s["runs"]) and len(s["runs"]) == 3
    detail = "; ".join(parts) + " (first-crossing iterate: flipped " + ", ".join(f"{c:+.1e}" for c in crossing) + ")"
    criterion(10, "one eigendirection suffices for instability", ok, detail)


def test_c11_edge_of_stability(criterion, eos_runs):
    fracs = [r["frac_increases_with_lambda0_above_2_over_h"] for r in eos_runs]
    counts = [r["loss_increases"] for r in eos_runs]
    ok = all(c > 0 for c in counts) and min(fracs) >= 0.9
    criterion(11, "loss increases need lambda0 > 2/h", ok, ", ".join(f"{f:.2f} of {c}" for f, c in zip(fracs, counts)) + " (>=0.90)")


def test_c12_invariant_suites(criterion):
    files = [os.path.join(TESTS, f"test_{m}.py") for m in ("numlin", "losses", "flows", "integrate", "optimize", "kernels")]
    res = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *files], capture_output=True, text=True, cwd=TESTS
    )
    tail = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr[-200:]
    criterion(12, "module invariant and property suites", res.returncode == 0, tail)
