"""Command-line entry point: ``pflow {run,list,simulate,optimize,diagnose}``.

Every command accepts ``--seed``, ``--out``, ``--format {csv,json}`` and
``--config FILE``, a flat JSON object whose keys are the long option names
(dashes or underscores).  Explicit flags override file keys.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import DenseCapExceeded, NumericalError, PflowError, UnsupportedComplexDomain, ValidationError
from .flows import FlowSpec, stability_report
from .integrate import DEFAULT_STEP, euler_simulate
from .losses import build_model
from .optimize import DalConfig, Estimator, run_optimizer
from .scenarios import dumps, list_scenarios, run_scenario, write_trajectory

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# built-in defaults; argparse defaults stay None so that file keys can be told apart from flags
DEFAULTS = {
    "common": {"seed": 0, "format": "csv"},
    "run": {"set": []},
    "simulate": {
        "model": "quadratic",
        "model_param": [],
        "flow": "pf",
        "h": 0.5,
        "steps": 10,
        "step": DEFAULT_STEP,
        "n": None,
        "m": None,
        "k": None,
        "theta0": None,
        "no_diagnostics": False,
    },
    "optimize": {
        "model": "quadratic",
        "model_param": [],
        "method": "gd",
        "h": None,
        "m": 0.0,
        "p": 1.0,
        "lr_cap": 5.0,
        "estimator": "exact_hvp",
        "steps": 10,
        "theta0": None,
        "no_drift": False,
        "drift_step": DEFAULT_STEP,
    },
    "diagnose": {"model": "quadratic", "model_param": [], "h": 0.1, "k": 5, "theta0": None},
    "list": {},
}


def _kv(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    try:
        value = json.loads(value)
    except json.JSONDecodeError:
        pass
    return key.strip().replace("-", "_"), value


def _common(p):
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=["csv", "json"], help="data file format (default csv)")
    p.add_argument("--config", help="flat JSON config file; flags override its keys")


def _model_args(p):
    p.add_argument("--model", help="quadratic, scalar_square, linear, rosenbrock, cos_branch, quartic, mlp")
    p.add_argument(
        "--model-param",
        dest="model_param",
        type=_kv,
        action="append",
        metavar="KEY=VALUE",
        help="model parameter, JSON value (e.g. M='[[2,0],[0,0.02]]', widths='[2,10,1]')",
    )
    p.add_argument("--theta0", help="initial parameters, comma separated (complex as 1+2j)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run a catalogued scenario")
    p.add_argument("scenario", help="scenario id (see `pflow list`)")
    p.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE", help="override a scenario key")
    _common(p)

    p = sub.add_parser("list", help="list scenarios")
    _common(p)

    p = sub.add_parser("simulate", help="Euler-simulate one flow")
    _model_args(p)
    p.add_argument("--flow", help="ngf, igr, third_order, truncated_series, pf, pf_plus_nonprincipal, ...")
    p.add_argument("--h", type=float, help="modeled learning rate")
    p.add_argument("--steps", type=int, help="duration in GD steps (time = steps * h)")
    p.add_argument("--step", type=float, help="Euler integration step")
    p.add_argument("--n", type=int, help="truncation order for truncated_series")
    p.add_argument("--m", type=float, help="momentum for momentum_flow")
    p.add_argument("--k", type=int, help="use only the top-k eigenpairs (Lanczos)")
    p.add_argument("--no-diagnostics", dest="no_diagnostics", action="store_true", default=None)
    _common(p)

    p = sub.add_parser("optimize", help="run an optimizer")
    _model_args(p)
    p.add_argument("--method", choices=["gd", "momentum", "dal", "dal_momentum", "per_param_dal"])
    p.add_argument("--h", type=float, help="learning rate (gd, momentum)")
    p.add_argument("--m", type=float, help="momentum coefficient")
    p.add_argument("--p", type=float, help="DAL exponent")
    p.add_argument("--lr-cap", dest="lr_cap", type=float, help="DAL learning-rate cap")
    p.add_argument("--estimator", choices=[e.value for e in Estimator])
    p.add_argument("--steps", type=int, help="number of iterations")
    p.add_argument("--no-drift", dest="no_drift", action="store_true", default=None)
    p.add_argument("--drift-step", dest="drift_step", type=float, help="Euler step for measured drift")
    _common(p)

    p = sub.add_parser("diagnose", help="stability report for the top-k eigendirections")
    _model_args(p)
    p.add_argument("--h", type=float, help="learning rate")
    p.add_argument("--k", type=int, help="number of directions (default 5)")
    _common(p)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file and explicit flags."""
    cmd = args.command
    cfg = {**DEFAULTS["common"], "out": None, **DEFAULTS[cmd]}
    if args.config:
        try:
            with open(args.config) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
        for k, v in data.items():
            key = k.replace("-", "_")
            if cmd == "run":
                cfg.setdefault("file", {})[key] = v
            elif key not in cfg:
                raise ValidationError(f"unknown config key {k!r} for {cmd}; allowed: {sorted(cfg)}")
            else:
                cfg[key] = v
    for k, v in vars(args).items():
        if k in ("command", "config", "scenario") or v is None:
            continue
        cfg[k] = v
    return cfg


def _model(cfg):
    params = dict(p if isinstance(p, (list, tuple)) else p for p in _pairs(cfg["model_param"]))
    name = cfg["model"]
    if name == "quadratic" and "M" not in params:
        params["M"] = [[2.0, 0.0], [0.0, 0.02]]
    if name == "mlp":
        params.setdefault("seed", cfg["seed"])
    for key in ("M", "b", "center"):
        if key in params and isinstance(params[key], list):
            params[key] = np.array(params[key], dtype=float)
    return build_model(name, **params)


def _pairs(items):
    if isinstance(items, dict):
        return list(items.items())
    return [tuple(i) for i in items]


_THETA0 = {"scalar_square": [1.0], "rosenbrock": [-1.2, 1.0], "cos_branch": [1.0]}


def _theta0(cfg, model):
    raw = cfg["theta0"]
    if raw is None:
        if cfg["model"] == "mlp":
            return model.init_params()
        if cfg["model"] in _THETA0:
            return np.array(_THETA0[cfg["model"]])
        return np.ones(model.dim)
    if isinstance(raw, str):
        try:
            vals = [complex(s.strip().replace(" ", "")) for s in raw.split(",")]
        except ValueError:
            raise ValidationError(f"cannot parse theta0 {raw!r}") from None
    else:
        vals = [complex(v) for v in np.atleast_1d(raw)]
    arr = np.array(vals)
    return arr.real if np.all(arr.imag == 0) else arr


def _out(cfg, name):
    out = cfg["out"] or os.path.join("runs", name)
    os.makedirs(out, exist_ok=True)
    return out


def _echo(cfg, out):
    with open(os.path.join(out, "config.json"), "w") as f:
        f.write(dumps(cfg) + "\n")


def cmd_run(args, cfg):
    overrides = dict(cfg.pop("file", {}))
    overrides.update(dict(_pairs(cfg.get("set") or [])))
    for key in ("seed", "format"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    summary = run_scenario(args.scenario, overrides, out=cfg["out"])
    print(dumps(summary))
    return EXIT_OK


def cmd_list(args, cfg):
    print(list_scenarios())
    return EXIT_OK


def cmd_simulate(args, cfg):
    model = _model(cfg)
    spec = FlowSpec(cfg["flow"], cfg["h"], n=cfg["n"], m=cfg["m"], k=cfg["k"])
    theta0 = _theta0(cfg, model)
    if not (isinstance(cfg["steps"], int) and cfg["steps"] > 0):
        raise ValidationError(f"steps must be a positive integer, got {cfg['steps']!r}")
    traj = euler_simulate(
        spec, model, theta0, cfg["steps"] * spec.h, cfg["step"], diagnostics=not cfg["no_diagnostics"], seed=cfg["seed"]
    )
    out = _out(cfg, "simulate")
    _echo(cfg, out)
    write_trajectory(traj, out, "trajectory", cfg["format"])
    print(os.path.join(out, "trajectory." + cfg["format"]))
    if traj.diverged:
        print(f"diverged after {traj.steps_done} steps", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_optimize(args, cfg):
    model = _model(cfg)
    dal = DalConfig(cfg["p"], cfg["lr_cap"], Estimator(cfg["estimator"]))
    if not (isinstance(cfg["steps"], int) and cfg["steps"] >= 0):
        raise ValidationError(f"steps must be a non-negative integer, got {cfg['steps']!r}")
    traj = run_optimizer(
        model,
        _theta0(cfg, model),
        cfg["method"],
        cfg["steps"],
        h=cfg["h"],
        m=cfg["m"],
        cfg=dal,
        measure_drift=not cfg["no_drift"],
        drift_step=cfg["drift_step"],
        seed=cfg["seed"],
    )
    out = _out(cfg, "optimize")
    _echo(cfg, out)
    write_trajectory(traj, out, "trajectory", cfg["format"])
    print(os.path.join(out, "trajectory." + cfg["format"]))
    if traj.diverged:
        print(f"diverged after {traj.steps_done} steps", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_diagnose(args, cfg):
    model = _model(cfg)
    theta = _theta0(cfg, model)
    k = cfg["k"]
    if k is not None and not (isinstance(k, int) and k > 0):
        raise ValidationError(f"k must be a positive integer, got {k!r}")
    k = None if k is None or k >= model.dim else k
    report = stability_report(model, theta, cfg["h"], k=k)
    data = {"model": model.describe(), "seed": cfg["seed"], **report.to_dict()}
    out = _out(cfg, "diagnose")
    _echo(cfg, out)
    text = dumps(data)
    with open(os.path.join(out, "report.json"), "w") as f:
        f.write(text + "\n")
    if cfg["format"] == "csv":
        rows = data["directions"]
        cols = ["index", "eigenvalue_re", "eigenvalue_im", "g_dot_u_re", "g_dot_u_im", "sc_re", "sc_im", "regime"]
        with open(os.path.join(out, "report.csv"), "w") as f:
            f.write(",".join(cols) + "\n")
            for r in rows:
                vals = [r["index"], *r["eigenvalue"], *r["g_dot_u"], *r["sc"], r["regime"]]
                f.write(",".join("" if v is None else str(v) for v in vals) + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "list": cmd_list,
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except (ValidationError, UnsupportedComplexDomain, DenseCapExceeded) as exc:
        print(f"pflow: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"pflow: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PflowError as exc:
        print(f"pflow: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
