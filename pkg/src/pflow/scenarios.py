"""Scenario catalog: each entry regenerates the data behind one figure.

A scenario is a function of a flat, validated config dict.  It writes
CSV (or JSON) data files plus ``config.json`` and ``summary.json`` into
the output directory and returns the summary.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .errors import NumericalError, ValidationError
from .flows import FlowKind, FlowSpec, alpha_pf
from .integrate import (
    Trajectory,
    euler_simulate,
    flow_vs_gd_error,
    gd_path,
    quadratic_pf_exact,
    record_states,
    scalar_pf_exact,
)
from .losses import MLP, CosBranch, LossModel, MLPSpec, Quadratic, Rosenbrock, ScalarSquare
from .numlin import lanczos_topk
from .optimize import (
    DalConfig,
    drift_estimate,
    per_iteration_drift,
    predict_dot_product,
    run_optimizer,
    top_eigenvalue,
)

COMMON_KEYS = {"seed": 0, "out": None, "format": "csv", "step": 5e-5, "workers": 4}


@dataclass(frozen=True)
class Scenario:
    id: str
    figure: str
    description: str
    defaults: dict
    run: Callable[[dict, str], dict]


CATALOG: Dict[str, Scenario] = {}


def scenario(id, figure, description, **defaults):
    def deco(fn):
        CATALOG[id] = Scenario(id, figure, description, defaults, fn)
        return fn

    return deco


def list_scenarios() -> str:
    lines = []
    for s in CATALOG.values():
        lines.append(f"{s.id:14s} {s.description}\n{'':14s} figure: {s.figure}")
    return "\n".join(lines)


def resolve_config(id: str, overrides: dict) -> dict:
    """Merge overrides onto scenario defaults, rejecting unknown keys."""
    if id not in CATALOG:
        raise ValidationError(f"unknown scenario {id!r}; available:\n{list_scenarios()}")
    sc = CATALOG[id]
    cfg = {"scenario": id, **COMMON_KEYS, **sc.defaults}
    for k, v in overrides.items():
        if k == "scenario":
            if v != id:
                raise ValidationError(f"config names scenario {v!r} but {id!r} was requested")
            continue
        if k == "h" and "hs" in sc.defaults:
            cfg["hs"] = [v] if not isinstance(v, (list, tuple)) else list(v)
            continue
        if k not in cfg:
            raise ValidationError(f"unknown key {k!r} for scenario {id}; allowed: {sorted(cfg)}")
        cfg[k] = _coerce(k, v, cfg[k])
    if cfg["format"] not in ("csv", "json"):
        raise ValidationError(f"format must be csv or json, got {cfg['format']!r}")
    if not (isinstance(cfg["step"], (int, float)) and cfg["step"] > 0):
        raise ValidationError(f"step must be positive, got {cfg['step']!r}")
    return cfg


def _coerce(key, value, default):
    if default is None or value is None:
        return value
    try:
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int) and not isinstance(default, bool):
            if float(value) != int(float(value)):
                raise ValueError
            return int(float(value))
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            seq = value if isinstance(value, (list, tuple)) else [value]
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                kind = float if isinstance(default[0], float) else int
                return [kind(v) for v in seq]
            return list(seq)
    except (TypeError, ValueError):
        raise ValidationError(f"invalid value {value!r} for key {key!r}") from None
    return value


def run_scenario(id: str, overrides: dict | None = None, out: str | None = None) -> dict:
    cfg = resolve_config(id, dict(overrides or {}))
    out = out or cfg["out"] or os.path.join("runs", id)
    cfg["out"] = out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    summary = CATALOG[id].run(cfg, out)
    summary = {"scenario": id, **summary}
    with open(os.path.join(out, "summary.json"), "w") as f:
        f.write(dumps(summary) + "\n")
    return summary


# output helpers


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return [_clean(float(obj.real)), _clean(float(obj.imag))]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True)


def write_trajectory(traj: Trajectory, out: str, name: str, fmt: str = "csv") -> None:
    if fmt == "csv":
        traj.to_csv(os.path.join(out, name + ".csv"))
        traj.to_json(os.path.join(out, name + ".json"))
    else:
        with open(os.path.join(out, name + ".json"), "w") as f:
            f.write(dumps({"meta": traj.metadata(), "records": traj.to_records()}) + "\n")


def write_table(rows: List[dict], out: str, name: str, fmt: str = "csv") -> None:
    if fmt == "json":
        with open(os.path.join(out, name + ".json"), "w") as f:
            f.write(dumps(rows) + "\n")
        return
    cols = list(dict.fromkeys(c for r in rows for c in r))
    with open(os.path.join(out, name + ".csv"), "w") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(_cell(r.get(c)) for c in cols) + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _pmap(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _gd_trajectory(model: LossModel, theta0, h: float, n: int, seed=None) -> Trajectory:
    path = gd_path(model, theta0, h, n)
    return record_states(
        model,
        np.arange(len(path)) * h,
        path,
        h,
        step=h,
        spec=None,
        seed=seed,
        diverged=len(path) < n + 1,
        steps_done=len(path) - 1,
        meta={"method": "gd", "h": h},
    )


def figure_quadratic() -> Quadratic:
    """E = theta^T A theta with A = diag(1, 0.01), i.e. M = 2A."""
    return Quadratic(2 * np.diag([1.0, 0.01]))


def _flow_runs(cfg, out, model, theta0, hs, flows, n_steps, prefix):
    fmt, step = cfg["format"], cfg["step"]
    rows = []

    def one(args):
        h, fl = args
        spec = FlowSpec(fl, h)
        try:
            tr = euler_simulate(spec, model, theta0, n_steps * h, step, seed=cfg["seed"])
        except NumericalError as exc:
            return h, fl, None, str(exc)
        return h, fl, tr, None

    jobs = [(h, fl) for h in hs for fl in flows]
    for h, fl, tr, err in _pmap(one, jobs, cfg["workers"]):
        gd = gd_path(model, theta0, h, n_steps)
        row = {"h": h, "flow": fl, "status": "ok" if err is None else "singular"}
        if tr is not None:
            write_trajectory(tr, out, f"{prefix}_{fl}_h{h:g}", fmt)
            n = min(len(gd), len(tr.theta))
            row["max_err_vs_gd"] = float(np.max(np.linalg.norm(gd[:n] - tr.theta[:n], axis=1)))
            row["diverged"] = tr.diverged
        rows.append(row)
    for h in hs:
        write_trajectory(_gd_trajectory(model, theta0, h, n_steps, cfg["seed"]), out, f"{prefix}_gd_h{h:g}", fmt)
    return rows


# scenarios


@scenario(
    "quad2d",
    "Quadratic losses in 2 dimensions (GD vs PF, NGF, IGR)",
    "E = theta^T diag(1, 0.01) theta; PF follows GD exactly in every regime.",
    hs=[0.5, 0.9, 1.05],
    n_steps=20,
    theta0=[1.0, 1.0],
    flows=["pf", "ngf", "igr"],
)
def _quad2d(cfg, out):
    q = figure_quadratic()
    rows = _flow_runs(cfg, out, q, cfg["theta0"], cfg["hs"], cfg["flows"], cfg["n_steps"], "quad2d")
    exact = []
    for h in cfg["hs"]:
        gd = gd_path(q, cfg["theta0"], h, cfg["n_steps"])
        errs = [
            np.linalg.norm(gd[k] - quadratic_pf_exact(q.M, q.b, cfg["theta0"], h, k * h).values)
            for k in range(len(gd))
        ]
        exact.append({"h": h, "max_exact_pf_err": float(max(errs))})
    write_table(rows, out, "errors", cfg["format"])
    return {"runs": rows, "exact": exact}


@scenario(
    "scalar1d",
    "Complex flows capture oscillations (E = (theta - 0.6)^2 / 2, h = 1.2)",
    "GD overshoots the minimum each step; the complex PF tracks it, NGF does not.",
    h=1.2,
    n_steps=10,
    theta0=0.0,
    center=0.6,
    samples_per_step=20,
)
def _scalar1d(cfg, out):
    m = ScalarSquare(cfg["center"])
    h, n, c = cfg["h"], cfg["n_steps"], cfg["center"]
    rows = _flow_runs(cfg, out, m, [cfg["theta0"]], [h], ["pf", "ngf"], n, "scalar1d")
    dense = []
    for i in range(n * cfg["samples_per_step"] + 1):
        t = i * h / cfg["samples_per_step"]
        z = scalar_pf_exact(h, cfg["theta0"] - c, t)
        dense.append({"t": t, "pf_re": z.real + c, "pf_im": z.imag})
    write_table(dense, out, "pf_exact", cfg["format"])
    return {"runs": rows}


@scenario(
    "zsquare",
    "PF on E = z^2/2: convergence, oscillation and divergence",
    "Closed-form PF vs GD for h in {0.8, 1.5, 2.1}.",
    hs=[0.8, 1.5, 2.1],
    n_steps=10,
    z0=1.0,
    samples_per_step=20,
)
def _zsquare(cfg, out):
    summary = []
    for h in cfg["hs"]:
        rows = []
        z0 = cfg["z0"]
        for i in range(cfg["n_steps"] * cfg["samples_per_step"] + 1):
            t = i * h / cfg["samples_per_step"]
            z = scalar_pf_exact(h, z0, t)
            rec = {"t": t, "pf_re": z.real, "pf_im": z.imag, "gd": float("nan")}
            if i % cfg["samples_per_step"] == 0:
                rec["gd"] = (1 - h) ** (i // cfg["samples_per_step"]) * z0
            rows.append(rec)
        write_table(rows, out, f"zsquare_h{h:g}", cfg["format"])
        gd = np.array([r["gd"] for r in rows if not math.isnan(r["gd"])])
        pf = np.array([r["pf_re"] for r in rows[:: cfg["samples_per_step"]]])
        summary.append(
            {
                "h": h,
                "abs_increasing": bool(np.all(np.diff(np.abs(gd)) > 0)),
                "sign_alternating": bool(np.all(np.sign(gd[1:]) != np.sign(gd[:-1]))),
                "max_pf_gd_gap": float(np.max(np.abs(pf - gd))),
            }
        )
    return {"regimes": summary}


@scenario(
    "banana",
    "Banana function: GD vs flows, incl. the non-principal term",
    "Rosenbrock (a=1, bhat=100) for three learning rates; PF with and without the non-principal term.",
    hs=[0.0006, 0.0017, 0.005],
    n_steps=100,
    theta0=[-1.2, 1.0],
    flows=["ngf", "igr", "pf", "pf_plus_nonprincipal"],
)
def _banana(cfg, out):
    r = Rosenbrock()
    rows = _flow_runs(cfg, out, r, cfg["theta0"], cfg["hs"], cfg["flows"], cfg["n_steps"], "banana")
    write_table(rows, out, "errors", cfg["format"])
    return {"runs": rows}


@scenario(
    "cosbranch",
    "Cosine branch loss: flows across a kink",
    "E = cos(theta) + theta (theta < 0), (theta/3)^2 + 1 + theta/3 (theta >= 0).",
    hs=[0.5, 0.85],
    n_steps=30,
    theta0=1.0,
    flows=["ngf", "igr", "pf"],
)
def _cosbranch(cfg, out):
    rows = _flow_runs(cfg, out, CosBranch(), [cfg["theta0"]], cfg["hs"], cfg["flows"], cfg["n_steps"], "cosbranch")
    write_table(rows, out, "errors", cfg["format"])
    return {"runs": rows}


@scenario(
    "mlp_error",
    "Error between GD and continuous flows on a small MLP",
    "flow_vs_gd_error for NGF, IGR, third-order and PF on the 2-10-1 Elu MLP.",
    seeds=[0, 1, 2],
    hs=[0.1, 0.2, 0.25],
    n_steps=5,
    flows=["ngf", "igr", "third_order", "pf"],
)
def _mlp_error(cfg, out):
    def one(args):
        seed, h = args
        m = MLP(MLPSpec(seed=seed))
        th = m.init_params()
        errs = {}
        for fl in cfg["flows"]:
            try:
                errs[fl] = flow_vs_gd_error(FlowSpec(fl, h), m, th, n_steps=cfg["n_steps"], step=cfg["step"])
            except NumericalError:
                errs[fl] = np.array([])
        return seed, h, errs, h * top_eigenvalue(m, th)

    jobs = [(s, h) for s in cfg["seeds"] for h in cfg["hs"]]
    rows, best = [], []
    for seed, h, errs, hlam in _pmap(one, jobs, cfg["workers"]):
        for k in range(cfg["n_steps"]):
            row = {"seed": seed, "h": h, "k": k + 1}
            for fl in cfg["flows"]:
                row[f"err_{fl}"] = float(errs[fl][k]) if k < len(errs[fl]) else float("nan")
            rows.append(row)
        if "pf" in errs:
            others = [fl for fl in cfg["flows"] if fl != "pf"]
            n = min(len(errs[fl]) for fl in cfg["flows"])
            best.append(
                {
                    "seed": seed,
                    "h": h,
                    "h_lambda0_init": hlam,
                    "pf_best_every_step": bool(
                        n > 0 and all(np.all(errs["pf"][:n] < errs[fl][:n]) for fl in others if fl != "third_order")
                    ),
                }
            )
    write_table(rows, out, "errors", cfg["format"])
    return {"pf_vs_ngf_igr": best}


# edge of stability


def eos_model(cfg) -> Callable[[int], MLP]:
    return lambda seed: MLP(MLPSpec(tuple(cfg["widths"]), seed, cfg["n_examples"]))


def edge_lr(model: MLP, theta, h_scale: float) -> float:
    """``h_scale * 2 / lambda0`` at ``theta``."""
    return h_scale * 2.0 / top_eigenvalue(model, theta)


def _top(model, x, seed=0):
    s = lanczos_topk(lambda v: model._hvp(x, v), model.dim, 1, seed=seed)
    g = model._grad(x)
    u = s.eigenvectors[:, 0].real
    if u @ g < 0:
        u = -u
    return float(s.eigenvalues[0].real), u, g


def eos_run(model: MLP, theta0, h: float, n_steps: int, probe_every: int = 0, probe_step: float = 5e-5):
    """GD with per-iterate Lanczos top-1 diagnostics.

    Rows carry the loss, lambda0, g^T u0 and the frozen-eigenvector value
    g_{t+1}^T u0(t), plus NGF / positive-gradient probe loss changes over
    time h every ``probe_every`` iterates.
    """
    x = np.array(theta0, dtype=float)
    rows = []
    lam, u, g = _top(model, x)
    for t in range(n_steps + 1):
        E = float(model._value(x))
        try:
            sc0 = complex(alpha_pf(h * lam)) * float(u @ g)
        except NumericalError:
            sc0 = complex(float("nan"), float("nan"))
        row = {"iter": t, "h": h, "loss": E, "lambda0": lam, "edge": lam >= 2 / h, "gu0": float(u @ g)}
        row["sc0_re"], row["sc0_im"] = sc0.real, sc0.imag
        row["grad_norm"] = float(np.linalg.norm(g))
        if probe_every and t % probe_every == 0:
            for name, kind in (("ngf", FlowKind.NGF), ("pos", FlowKind.POSITIVE_GRADIENT)):
                tr = euler_simulate(FlowSpec(kind, h), model, x, h, probe_step, diagnostics=False)
                row[f"probe_{name}_dloss"] = float(tr.loss[-1].real - E)
        if t == n_steps:
            row["gu0_next_frozen"] = float("nan")
            rows.append(row)
            break
        x = x - h * g
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e12:
            row["gu0_next_frozen"] = float("nan")
            rows.append(row)
            break
        lam_new, u_new, g = _top(model, x)
        row["gu0_next_frozen"] = float(u @ g)
        rows.append(row)
        lam, u = lam_new, u_new
    return rows, x


def eos_statistics(rows: List[dict], h_key: str = "h") -> dict:
    """Loss-increase/edge agreement and frozen-eigenpair growth agreement."""
    loss = np.array([r["loss"] for r in rows])
    lam = np.array([r["lambda0"] for r in rows])
    hs = np.array([r[h_key] for r in rows])
    inc = np.flatnonzero(np.diff(loss) > 0)
    above_at_inc = lam[inc] > 2 / hs[inc]
    cur = np.abs([r["gu0"] for r in rows[:-1]])
    nxt = np.abs([r["gu0_next_frozen"] for r in rows[:-1]])
    ok = np.isfinite(nxt)
    grows = nxt[ok] > cur[ok]
    above = (lam[:-1] > 2 / hs[:-1])[ok]
    return {
        "iterations": len(rows) - 1,
        "loss_increases": int(len(inc)),
        "frac_increases_with_lambda0_above_2_over_h": float(above_at_inc.mean()) if len(inc) else float("nan"),
        "frac_frozen_prediction_sign_agrees": float(np.mean(grows == above)) if ok.any() else float("nan"),
        "frac_iterates_above_2_over_h": float(np.mean(lam > 2 / hs)),
    }


_EOS_DEFAULTS = dict(widths=[2, 32, 32, 1], n_examples=40, seeds=[0, 1, 2], h_scale=1.0)


@scenario(
    "eos_mlp",
    "Edge of stability: instability occurs when lambda0 > 2/h",
    "GD on an Elu MLP with h = h_scale * 2/lambda0(init); logs lambda0, g^T u0 and NGF/positive-gradient probes.",
    n_steps=400,
    probe_every=20,
    probe_step=5e-5,
    **_EOS_DEFAULTS,
)
def _eos_mlp(cfg, out):
    make = eos_model(cfg)

    def one(seed):
        m = make(seed)
        x0 = m.init_params()
        h = edge_lr(m, x0, cfg["h_scale"])
        rows, _ = eos_run(m, x0, h, cfg["n_steps"], cfg["probe_every"], cfg["probe_step"])
        return seed, h, rows

    stats = []
    for seed, h, rows in _pmap(one, cfg["seeds"], cfg["workers"]):
        write_table(rows, out, f"eos_seed{seed}", cfg["format"])
        edge = next((r["iter"] for r in rows if r["edge"]), None)
        stats.append({"seed": seed, "h": h, "edge_iteration": edge, **eos_statistics(rows)})
    return {"runs": stats}


def train_to_edge(model: MLP, theta0, h: float, max_steps: int, unstable: bool = False):
    """GD until the first iterate with lambda0 >= 2/h; returns (theta, iterations) or (None, n).

    With ``unstable`` it keeps going until the first such iterate whose GD
    step increases the loss, i.e. inside the oscillating edge-of-stability
    area rather than at the first crossing.
    """
    x = np.array(theta0, dtype=float)
    for t in range(max_steps + 1):
        lam, _, g = _top(model, x)
        nxt = x - h * g
        if lam >= 2 / h and (not unstable or model._value(nxt) > model._value(x)):
            return x, t
        x = nxt
    return None, max_steps


@scenario(
    "flip_u0",
    "One eigendirection is sufficient for instability",
    "Train into the edge-of-stability area, then compare the flipped-top flow against NGF over one GD step of time.",
    max_steps=2000,
    n_steps=1,
    samples_per_step=10,
    **{**_EOS_DEFAULTS, "h_scale": 0.8},
)
def _flip_u0(cfg, out):
    make = eos_model(cfg)

    def compare(m, x, h):
        res = {}
        for fl in ("flipped_top", "ngf"):
            spec = FlowSpec(fl, h, k=1 if fl == "flipped_top" else None)
            every = max(1, round(h / cfg["step"]) // cfg["samples_per_step"])
            res[fl] = euler_simulate(spec, m, x, cfg["n_steps"] * h, cfg["step"], sample_every=every, diagnostics=False)
        return res

    def one(seed):
        m = make(seed)
        x0 = m.init_params()
        h = edge_lr(m, x0, cfg["h_scale"])
        starts = {}
        for where, unstable in (("crossing", False), ("unstable", True)):
            x, iters = train_to_edge(m, x0, h, cfg["max_steps"], unstable)
            starts[where] = (iters, None if x is None else compare(m, x, h))
        return seed, h, starts

    summary = []
    for seed, h, starts in _pmap(one, cfg["seeds"], cfg["workers"]):
        rec = {"seed": seed, "h": h}
        for where, (iters, res) in starts.items():
            pre = "" if where == "unstable" else "crossing_"
            rec[f"{pre}edge_iteration"] = iters
            rec[f"{pre}reached_edge"] = res is not None
            if res is None:
                continue
            for fl, tr in res.items():
                write_trajectory(tr, out, f"flip_seed{seed}_{where}_{fl}", cfg["format"])
                rec[f"{pre}{fl}_dloss"] = float(tr.loss[-1].real - tr.loss[0].real)
            rec[f"{pre}flipped_increases_ngf_decreases"] = rec[f"{pre}flipped_top_dloss"] > 0 > rec[f"{pre}ngf_dloss"]
        summary.append(rec)
    return {"runs": summary}


@scenario(
    "lr_drop",
    "Reducing the learning rate mid-run stabilises training",
    "Edge-of-stability GD, then h is multiplied by drop_factor at drop_at.",
    n_steps=300,
    drop_at=150,
    drop_factor=0.5,
    **_EOS_DEFAULTS,
)
def _lr_drop(cfg, out):
    make = eos_model(cfg)

    def one(seed):
        m = make(seed)
        x0 = m.init_params()
        h = edge_lr(m, x0, cfg["h_scale"])
        first, x = eos_run(m, x0, h, cfg["drop_at"])
        second, _ = eos_run(m, x, h * cfg["drop_factor"], cfg["n_steps"] - cfg["drop_at"])
        for r in second:
            r["iter"] += cfg["drop_at"]
        return seed, h, first[:-1] + second

    summary = []
    for seed, h, rows in _pmap(one, cfg["seeds"], cfg["workers"]):
        write_table(rows, out, f"lr_drop_seed{seed}", cfg["format"])
        loss = np.array([r["loss"] for r in rows])
        d = cfg["drop_at"]
        summary.append(
            {
                "seed": seed,
                "h": h,
                "loss_increases_before": int(np.sum(np.diff(loss[: d + 1]) > 0)),
                "loss_increases_after": int(np.sum(np.diff(loss[d:]) > 0)),
            }
        )
    return {"runs": summary}


@scenario(
    "dotprod_pred",
    "g^T u0 measured vs frozen-eigenpair predictions (inflection at lambda = 2/h)",
    "Per iterate: g_{t+1}^T u0(t) against PF, NGF and IGR predictions from g_t^T u0(t).",
    n_steps=200,
    quad_sigma=[0.5, 1.5, 2.5],
    quad_h=0.9,
    **_EOS_DEFAULTS,
)
def _dotprod_pred(cfg, out):
    rows = []
    h = cfg["quad_h"]
    for sig in cfg["quad_sigma"]:
        q = Quadratic(np.diag([sig, 0.1]))
        path = gd_path(q, [1.0, 1.0], h, 20)
        for k in range(len(path) - 1):
            x0 = q.grad(path[k])[0]
            rows.append(
                {
                    "source": f"quadratic_sigma{sig:g}",
                    "iter": k,
                    "h": h,
                    "lambda0": sig,
                    "measured": float(q.grad(path[k + 1])[0]),
                    **{f"pred_{kd}": predict_dot_product(x0, sig, h, kd) for kd in ("pf", "ngf", "igr")},
                }
            )
    make = eos_model(cfg)
    for seed in cfg["seeds"]:
        m = make(seed)
        x0 = m.init_params()
        hh = edge_lr(m, x0, cfg["h_scale"])
        eos, _ = eos_run(m, x0, hh, cfg["n_steps"])
        for r in eos[:-1]:
            rows.append(
                {
                    "source": f"mlp_seed{seed}",
                    "iter": r["iter"],
                    "h": hh,
                    "lambda0": r["lambda0"],
                    "measured": r["gu0_next_frozen"],
                    **{f"pred_{kd}": predict_dot_product(r["gu0"], r["lambda0"], hh, kd) for kd in ("pf", "ngf", "igr")},
                }
            )
    write_table(rows, out, "dotprod", cfg["format"])
    quad = [r for r in rows if r["source"].startswith("quadratic")]
    return {"max_quadratic_pf_gap": float(max(abs(r["measured"] - r["pred_pf"]) for r in quad))}


@scenario(
    "drift_corr",
    "Connection between ||H g|| and the per-iteration drift",
    "per_iteration_drift vs (h^2/2)||H g|| over an h grid and a theta grid, with Spearman correlation.",
    sigmas=[1.0, 10.0, 100.0],
    hs=[0.001, 0.002, 0.005, 0.01],
    n_thetas=5,
    include_rosenbrock=True,
)
def _drift_corr(cfg, out):
    from scipy.stats import spearmanr

    rng = np.random.default_rng(cfg["seed"])
    thetas = rng.uniform(-1, 1, size=(cfg["n_thetas"], 2))
    models = [(f"quadratic_sigma{s:g}", Quadratic(np.diag([s, 1.0]))) for s in cfg["sigmas"]]
    if cfg["include_rosenbrock"]:
        models.append(("rosenbrock", Rosenbrock()))
    rows = []
    for name, m in models:
        for i, th in enumerate(thetas):
            for h in cfg["hs"]:
                step = min(cfg["step"], h / 100)
                rows.append(
                    {
                        "model": name,
                        "theta_index": i,
                        "h": h,
                        "drift_measured": per_iteration_drift(m, th, h, step),
                        "drift_estimated": drift_estimate(m, th, h),
                    }
                )
    write_table(rows, out, "drift", cfg["format"])

    def rho(sel):
        a = [r["drift_measured"] for r in sel]
        b = [r["drift_estimated"] for r in sel]
        return float(spearmanr(a, b).statistic)

    quad = [r for r in rows if r["model"].startswith("quadratic")]
    return {"spearman_quadratic": rho(quad), "spearman_all": rho(rows)}


@scenario(
    "dal_sweep",
    "DAL-p sweep against fixed learning rates",
    "DAL with p in {0.5, 1, 1.5, 2} and a fixed-h grid on quadratics and the MLP.",
    ps=[0.5, 1.0, 1.5, 2.0],
    fixed_hs=[0.01, 0.05, 0.1, 0.5, 1.0],
    sigmas=[1.0, 100.0],
    n_steps=100,
    lr_cap=5.0,
    measure_drift=False,
)
def _dal_sweep(cfg, out):
    problems = [(f"quadratic_sigma{s:g}", Quadratic(np.diag([s, 1.0])), np.ones(2)) for s in cfg["sigmas"]]
    mlp = MLP(MLPSpec(seed=cfg["seed"]))
    problems.append(("mlp", mlp, mlp.init_params()))
    jobs = [(p, ("dal", q)) for p in problems for q in cfg["ps"]] + [
        (p, ("gd", h)) for p in problems for h in cfg["fixed_hs"]
    ]

    def one(job):
        (name, model, x0), (method, val) = job
        if method == "dal":
            tr = run_optimizer(
                model, x0, "dal", cfg["n_steps"], cfg=DalConfig(val, cfg["lr_cap"]), measure_drift=cfg["measure_drift"]
            )
        else:
            tr = run_optimizer(model, x0, "gd", cfg["n_steps"], h=val, measure_drift=cfg["measure_drift"])
        return name, method, val, tr

    summary = []
    for name, method, val, tr in _pmap(one, jobs, cfg["workers"]):
        tag = f"{name}_{method}_{'p' if method == 'dal' else 'h'}{val:g}"
        write_trajectory(tr, out, tag, cfg["format"])
        summary.append(
            {
                "problem": name,
                "method": method,
                "p" if method == "dal" else "h": val,
                "final_loss": float(tr.loss[-1].real),
                "diverged": tr.diverged,
            }
        )
    write_table(
        [{"problem": s["problem"], "method": s["method"], "param": s.get("p", s.get("h")), "final_loss": s["final_loss"], "diverged": s["diverged"]} for s in summary],
        out,
        "final_losses",
        cfg["format"],
    )
    return {"runs": summary}


@scenario(
    "escape_sharp",
    "Local minima are not attractive when lambda0 > 2/h",
    "Converge with h = small_h_scale * 2/lambda0(init) until ||g|| < 1e-3, nudge by a seeded perturbation of norm"
    " `perturb`, then raise h above 2/lambda0 and follow GD.",
    small_h_scale=0.45,
    perturb=1e-12,
    raise_factor=1.2,
    max_steps=20000,
    n_after=200,
    grad_tol=1e-3,
    seeds=[0],
)
def _escape_sharp(cfg, out):
    problems = [("quadratic", Quadratic(np.diag([50.0, 1.0])), np.ones(2))]
    for seed in cfg["seeds"]:
        m = MLP(MLPSpec(seed=seed))
        problems.append((f"mlp_seed{seed}", m, m.init_params()))
    summary = []
    for name, model, x in problems:
        x = np.array(x, dtype=float)
        small_h = cfg["small_h_scale"] * 2 / top_eigenvalue(model, x)
        steps = 0
        while np.linalg.norm(model._grad(x)) >= cfg["grad_tol"] and steps < cfg["max_steps"]:
            nxt = x - small_h * model._grad(x)
            if not np.all(np.isfinite(nxt)):
                raise NumericalError(f"{name}: GD with h={small_h} diverged before converging")
            x = nxt
            steps += 1
        lam = top_eigenvalue(model, x)
        h = cfg["raise_factor"] * 2 / lam
        # a minimum is tested for attractiveness, so start slightly off it
        nudge = np.random.default_rng(cfg["seed"]).standard_normal(x.size)
        x = x + cfg["perturb"] * nudge / np.linalg.norm(nudge)
        tr = run_optimizer(model, x, "gd", cfg["n_after"], h=h, measure_drift=False)
        write_trajectory(tr, out, f"escape_{name}", cfg["format"])
        lam_end = float(tr.lambda0[-1]) if len(tr) and not tr.diverged else float("nan")
        summary.append(
            {
                "problem": name,
                "small_h": small_h,
                "converge_steps": steps,
                "converged": bool(np.linalg.norm(model._grad(tr.theta[0].real)) < cfg["grad_tol"]),
                "lambda0_before": lam,
                "h_after": h,
                "max_distance": float(np.max(np.linalg.norm(tr.theta - tr.theta[0], axis=1))),
                "lambda0_after": lam_end,
                "diverged": tr.diverged,
            }
        )
    return {"runs": summary}
