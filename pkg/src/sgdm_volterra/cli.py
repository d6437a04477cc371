"""Command-line front end.

Every subcommand reads one JSON config file.  ``--seed`` and ``--out``
override the corresponding config keys.  Exit codes: 0 when the analysis
completed (divergence is a result, not a failure), 2 for an invalid config,
3 for an I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .ingest import DataFormatError, load_idx, load_matrix, parity_target, precondition_rows
from .rates import advise, heatmap, rate_report
from .simulate import (THEORY_SOURCES, LeastSquaresProblem, SgdmConfig, compare_to_theory,
                       gen_gaussian_problem, predict_for_problem, run_ensemble)
from .spectrum import condition_report, empirical_spectrum, load_spectrum, spectrum_from_dict
from .volterra import Hyperparams, solve_volterra

log = logging.getLogger("sgdm_volterra")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Schemas

def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


NUM = {"type": "number"}
POS = {"type": "number", "exclusiveMinimum": 0}
NONNEG = {"type": "number", "minimum": 0}
INT_POS = {"type": "integer", "minimum": 1}
INT_NONNEG = {"type": "integer", "minimum": 0}
STR = {"type": "string"}

SPECTRUM = {"oneOf": [
    _obj({"kind": {"const": "mp"}, "r": POS, "nodes": {"type": "integer", "minimum": 2}},
         ["kind", "r"]),
    _obj({"kind": {"const": "explicit"},
          "values": {"type": "array", "minItems": 1,
                     "items": {"type": "array", "items": NUM, "minItems": 2, "maxItems": 2}}},
         ["kind", "values"]),
    _obj({"kind": {"const": "file"}, "path": STR}, ["kind", "path"]),
    _obj({"kind": {"const": "matrix"}, "path": STR, "skip_header": {"type": "boolean"},
          "precondition": {"type": "boolean"}}, ["kind", "path"]),
]}

HYPER = _obj({"gamma": NONNEG, "delta": NONNEG, "zeta": POS, "R": NONNEG, "R_tilde": NONNEG,
              "d_over_n": POS}, ["gamma", "delta", "zeta"])

GRID = {"oneOf": [
    {"type": "array", "items": NUM, "minItems": 1},
    _obj({"start": NUM, "stop": NUM, "num": INT_POS, "log": {"type": "boolean"}},
         ["start", "stop", "num"]),
]}

PROBLEM = {"oneOf": [
    _obj({"kind": {"const": "gaussian"}, "n": INT_POS, "d": INT_POS, "R": NONNEG,
          "R_tilde": NONNEG, "seed": INT_NONNEG, "target": {"enum": ["generative", "direct"]}},
         ["kind", "n", "d"]),
    _obj({"kind": {"const": "mnist"}, "images": STR, "labels": STR, "limit": INT_POS},
         ["kind", "images", "labels"]),
    _obj({"kind": {"const": "matrix"}, "matrix": STR, "target": STR,
          "skip_header": {"type": "boolean"}, "precondition": {"type": "boolean"}},
         ["kind", "matrix", "target"]),
]}

SGDM = _obj({"gamma": NONNEG, "delta": NONNEG, "zeta": POS, "max_iters": INT_NONNEG,
             "record_every": INT_POS}, ["gamma", "delta", "zeta", "max_iters"])

THEORY = _obj({"source": {"enum": list(THEORY_SOURCES)}, "R": NONNEG, "R_tilde": NONNEG,
               "nodes": {"type": "integer", "minimum": 2}})

SCHEMAS = {
    "predict": _obj({"spectrum": SPECTRUM, "hyperparams": HYPER, "horizon": INT_NONNEG,
                     "psi0": NONNEG, "out": STR}, ["spectrum", "hyperparams", "horizon"]),
    "simulate": _obj({"problem": PROBLEM, "sgdm": SGDM, "runs": INT_POS, "seed": INT_NONNEG,
                      "out": STR}, ["problem", "sgdm"]),
    "compare": _obj({"problem": PROBLEM, "sgdm": SGDM, "runs": INT_POS, "seed": INT_NONNEG,
                     "theory": THEORY, "out": STR}, ["problem", "sgdm"]),
    "rates": _obj({"spectrum": SPECTRUM, "hyperparams": HYPER, "epsilon": NONNEG, "out": STR},
                  ["spectrum", "hyperparams"]),
    "heatmap": _obj({"spectrum": SPECTRUM, "zeta": POS, "delta_grid": GRID, "gamma_grid": GRID,
                     "epsilon": NONNEG, "R": NONNEG, "R_tilde": NONNEG, "threads": INT_POS,
                     "out": STR}, ["spectrum", "zeta", "delta_grid", "gamma_grid"]),
    "advise": _obj({"spectrum": SPECTRUM, "zeta": POS, "out": STR}, ["spectrum", "zeta"]),
    "spectrum": _obj({"matrix": STR, "skip_header": {"type": "boolean"},
                      "precondition": {"type": "boolean"}, "out": STR}, ["matrix"]),
}


def validate(command: str, config: dict) -> None:
    try:
        jsonschema.validate(config, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{command} config invalid at {where}: {exc.message}") from None


# ---------------------------------------------------------------------------
# Builders

def _resolve(base: Path, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


def build_spectrum(cfg: dict, base: Path):
    kind = cfg["kind"]
    if kind in ("mp", "explicit"):
        return spectrum_from_dict(cfg)
    if kind == "file":
        return load_spectrum(_resolve(base, cfg["path"]))
    matrix = load_matrix(_resolve(base, cfg["path"]), cfg.get("skip_header", False))
    if cfg.get("precondition", False):
        matrix = precondition_rows(matrix)
    return empirical_spectrum(matrix)


def build_hyperparams(cfg: dict) -> Hyperparams:
    return Hyperparams(cfg["gamma"], cfg["delta"], cfg["zeta"], cfg.get("R", 1.0),
                       cfg.get("R_tilde", 1.0), cfg.get("d_over_n"))


def build_grid(cfg) -> np.ndarray:
    if isinstance(cfg, list):
        return np.asarray(cfg, dtype=np.float64)
    if cfg.get("log", False):
        if cfg["start"] <= 0 or cfg["stop"] <= 0:
            raise ConfigError("log grids need positive start and stop")
        return np.geomspace(cfg["start"], cfg["stop"], cfg["num"])
    return np.linspace(cfg["start"], cfg["stop"], cfg["num"])


def build_problem(cfg: dict, base: Path) -> LeastSquaresProblem:
    kind = cfg["kind"]
    if kind == "gaussian":
        return gen_gaussian_problem(cfg["n"], cfg["d"], cfg.get("R", 1.0), cfg.get("R_tilde", 1.0),
                                    cfg.get("seed", 0), cfg.get("target", "generative"))
    if kind == "mnist":
        data = load_idx(_resolve(base, cfg["images"]), _resolve(base, cfg["labels"]))
        if "limit" in cfg:
            data = type(data)(data.samples[: cfg["limit"]], data.labels[: cfg["limit"]])
        data = precondition_rows(data)
        return LeastSquaresProblem(data.samples, parity_target(data))
    matrix = load_matrix(_resolve(base, cfg["matrix"]), cfg.get("skip_header", False))
    if cfg.get("precondition", False):
        matrix = precondition_rows(matrix)
    target = load_matrix(_resolve(base, cfg["target"]), cfg.get("skip_header", False)).ravel()
    return LeastSquaresProblem(matrix, target)


def build_sgdm(cfg: dict, seed: int) -> SgdmConfig:
    return SgdmConfig(cfg["gamma"], cfg["delta"], cfg["zeta"], cfg["max_iters"], seed,
                      cfg.get("record_every", 1))


class Context:
    """Where a command reads relative paths from and may write to."""

    def __init__(self, config_path: Path):
        self.config_path = config_path.resolve()
        self.base = self.config_path.parent

    def path(self, name: str) -> Path:
        return _resolve(self.base, name)

    def target(self, name: str | Path) -> Path:
        p = self.path(str(name)).resolve()
        if p == self.config_path:
            raise ConfigError(f"output {p} would overwrite the config file")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def prefix(self, cfg: dict, default: str) -> str:
        return cfg.get("out", default)

    def write_json(self, name: str | Path, payload: dict) -> None:
        self.target(name).write_text(json.dumps(payload, indent=1, allow_nan=False) + "\n")


# ---------------------------------------------------------------------------
# Commands; each returns the JSON-able summary it printed.

def cmd_predict(cfg: dict, ctx: Context) -> dict:
    spectrum = build_spectrum(cfg["spectrum"], ctx.base)
    params = build_hyperparams(cfg["hyperparams"])
    sol = solve_volterra(spectrum, params, cfg["horizon"], cfg.get("psi0"))
    prefix = ctx.prefix(cfg, "predict")
    sol.write(ctx.target(prefix + ".csv"), ctx.target(prefix + ".meta.json"))
    return sol.sidecar()


def _ensemble(cfg: dict, ctx: Context):
    problem = build_problem(cfg["problem"], ctx.base)
    config = build_sgdm(cfg["sgdm"], cfg.get("seed", 0))
    log.info("problem %d x %d, %d runs", problem.n, problem.d, cfg.get("runs", 1))
    ens = run_ensemble(problem, config, cfg.get("runs", 1))
    return problem, config, ens


def cmd_simulate(cfg: dict, ctx: Context) -> dict:
    _, _, ens = _ensemble(cfg, ctx)
    prefix = ctx.prefix(cfg, "simulate")
    ens.write(ctx.target(prefix + ".csv"), ctx.target(prefix + ".meta.json"))
    return {"runs": ens.num_runs, "diverged": int(ens.diverged.sum()),
            "final_p50": _clean(ens.bands()["p50"][-1])}


def cmd_compare(cfg: dict, ctx: Context) -> dict:
    problem, config, ens = _ensemble(cfg, ctx)
    theory = cfg.get("theory", {})
    sol = predict_for_problem(problem, config, theory.get("source", "realized"),
                              theory.get("R", 1.0), theory.get("R_tilde", 1.0),
                              theory.get("nodes", 512))
    report = compare_to_theory(ens, sol)
    prefix = ctx.prefix(cfg, "compare")
    ens.write(ctx.target(prefix + ".csv"), ctx.target(prefix + ".meta.json"))
    sol.write(ctx.target(prefix + "_theory.csv"), ctx.target(prefix + "_theory.meta.json"))
    summary = report.to_dict()
    ctx.write_json(prefix + "_deviation.json", summary)
    return {"median_relative": summary["median_relative"],
            "relative_quantiles": summary["relative_quantiles"]}


def cmd_rates(cfg: dict, ctx: Context) -> dict:
    spectrum = build_spectrum(cfg["spectrum"], ctx.base)
    rep = rate_report(spectrum, build_hyperparams(cfg["hyperparams"]), cfg.get("epsilon", 0.5))
    out = rep.to_dict()
    if "out" in cfg:
        ctx.write_json(cfg["out"], out)
    return out


def cmd_heatmap(cfg: dict, ctx: Context) -> dict:
    spectrum = build_spectrum(cfg["spectrum"], ctx.base)
    hm = heatmap(spectrum, cfg["zeta"], build_grid(cfg["delta_grid"]), build_grid(cfg["gamma_grid"]),
                 cfg.get("epsilon", 0.5), cfg.get("R", 1.0), cfg.get("R_tilde", 1.0),
                 cfg.get("threads"))
    hm.write_csv(ctx.target(cfg.get("out", "heatmap.csv")))
    regimes = hm.field("regime").ravel().tolist()
    return {"cells": len(regimes),
            "counts": {r: regimes.count(r) for r in sorted(set(regimes))}}


def cmd_advise(cfg: dict, ctx: Context) -> dict:
    spectrum = build_spectrum(cfg["spectrum"], ctx.base)
    out = advise(spectrum, cfg["zeta"]).to_dict()
    out["condition"] = condition_report(spectrum).to_dict()
    if "out" in cfg:
        ctx.write_json(cfg["out"], out)
    return out


def cmd_spectrum(cfg: dict, ctx: Context) -> dict:
    matrix = load_matrix(ctx.path(cfg["matrix"]), cfg.get("skip_header", False))
    if cfg.get("precondition", False):
        matrix = precondition_rows(matrix)
    spectrum = empirical_spectrum(matrix)
    spectrum.to_json(ctx.target(cfg.get("out", "spectrum.json")))
    return {"n": int(matrix.shape[0]), "d": int(matrix.shape[1]),
            "sigma2_min": spectrum.sigma2_min, "sigma2_max": spectrum.sigma2_max,
            "zero_mass": spectrum.zero_mass}


COMMANDS = {
    "predict": cmd_predict, "simulate": cmd_simulate, "compare": cmd_compare,
    "rates": cmd_rates, "heatmap": cmd_heatmap, "advise": cmd_advise, "spectrum": cmd_spectrum,
}


def _clean(x):
    return float(x) if np.isfinite(x) else None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgdm-volterra",
        description="Volterra predictions, rates and simulations for SGD with momentum on least squares.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "predict": "solve the Volterra equation; writes CSV and a JSON sidecar",
        "simulate": "run an SGD+M ensemble; writes per-run losses and percentile bands",
        "compare": "simulate and compare against the Volterra prediction",
        "rates": "print the asymptotic rate report for one parameter set",
        "heatmap": "rate report over a (delta, gamma) grid; writes CSV",
        "advise": "recommended parameters and condition numbers",
        "spectrum": "eigenvalues of A A^T for a CSV or IDX matrix; writes JSON",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("config", type=Path, help="JSON config file")
        p.add_argument("--out", help="override the config's output path")
        if name in ("simulate", "compare"):
            p.add_argument("--seed", type=int, help="override the config's master seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = json.loads(args.config.read_text())
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out is not None:
        cfg["out"] = str(Path(args.out).resolve())
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    ctx = Context(args.config)
    try:
        validate(args.command, cfg)
        log.info("running %s", args.command)
        summary = COMMANDS[args.command](cfg, ctx)
    except (OSError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(summary, indent=1, allow_nan=False))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
