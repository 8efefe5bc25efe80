"""Command-line driver: solve, check-assumptions, certify, convergence.

Runs are configured by a TOML file with the sections ``[model]``, ``[grid]``,
``[continuation]``, ``[check]``, ``[certify]``, ``[convergence]`` and ``[output]``;
``--override section.key=value`` edits single entries (values are TOML literals).

Exit codes: 0 success, 1 a check or certificate failed, 2 invalid configuration,
3 model/grid invariant violated or field files missing/mismatched, 4 continuation stall.
"""

from __future__ import annotations

import argparse
import copy
import inspect
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .discretization import SpaceTimeGrid, read_field, write_field
from .errors import ConfigError, ContinuationStall, GridError, ModelError, NewtonError
from .models import BUILTIN_MODELS
from .solver import ContinuationConfig, continuation_solve, recover_m
from .verification import certify, check_assumptions, self_convergence, _jsonable

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_STALL = 0, 1, 2, 3, 4

DEFAULTS = {
    "model": {"name": "sql"},
    "grid": {"d": 1, "Nx": 32, "Nt": 32, "T": 1.0},
    "continuation": {},
    "check": {"n": 512, "p_max": 10.0, "m_min": 0.05, "m_max": 20.0},
    "certify": {"search_Cmax": 10.0, "u_field": "", "m_field": ""},
    "convergence": {"grids": [16, 32, 64], "order_min": 1.7, "order_max": 2.3},
    "output": {"dir": "out"},
}
_CONTINUATION_KEYS = set(inspect.signature(ContinuationConfig).parameters)


class InvariantError(Exception):
    """Raised for exit status 3 conditions found by the driver itself."""


# --- configuration --------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                user = tomllib.load(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from err
        for section, values in user.items():
            if section not in cfg or not isinstance(values, dict):
                raise ConfigError(f"unknown config section [{section}]")
            cfg[section].update(values)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        section, name = key.strip().split(".", 1)
        if section not in cfg:
            raise ConfigError(f"unknown config section [{section}] in override {item!r}")
        cfg[section][name] = _parse_value(raw.strip())
    _check_keys(cfg)
    return cfg


def _check_keys(cfg):
    name = cfg["model"].get("name")
    if name not in BUILTIN_MODELS:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}")
    allowed = set(inspect.signature(BUILTIN_MODELS[name]).parameters) - {"d", "validate"}
    extra = set(cfg["model"]) - allowed - {"name"}
    if extra:
        raise ConfigError(f"unknown [model] keys for {name!r}: {sorted(extra)}")
    for section in ("grid", "check", "certify", "convergence", "output"):
        extra = set(cfg[section]) - set(DEFAULTS[section])
        if extra:
            raise ConfigError(f"unknown [{section}] keys: {sorted(extra)}")
    extra = set(cfg["continuation"]) - _CONTINUATION_KEYS
    if extra:
        raise ConfigError(f"unknown [continuation] keys: {sorted(extra)}")
    if not isinstance(cfg["check"]["n"], int) or cfg["check"]["n"] <= 0:
        raise ConfigError(f"[check] n must be a positive integer, got {cfg['check']['n']!r}")
    grids = cfg["convergence"]["grids"]
    if not isinstance(grids, list) or len(grids) < 3:
        raise ConfigError("[convergence] grids needs at least three entries")


def build(cfg):
    """Model, grid and continuation settings from a resolved config."""
    mc = dict(cfg["model"])
    name = mc.pop("name")
    gc = cfg["grid"]
    try:
        cont = ContinuationConfig(**cfg["continuation"])
    except TypeError as err:
        raise ConfigError(str(err)) from err
    try:
        model = BUILTIN_MODELS[name](d=int(gc["d"]), **mc)
    except TypeError as err:
        raise ConfigError(f"[model]: {err}") from err
    grid = SpaceTimeGrid(d=int(gc["d"]), Nx=int(gc["Nx"]), Nt=int(gc["Nt"]), T=float(gc["T"]))
    return model, grid, cont


# --- output ------------------------------------------------------------------------------

def _write_json(path: Path, payload: dict, cfg: dict):
    payload = {"config": cfg, **payload}
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def _outdir(cfg) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands -------------------------------------------------------------------------

def cmd_solve(cfg) -> int:
    model, grid, cont = build(cfg)
    out = _outdir(cfg)
    try:
        u, trace = continuation_solve(model, grid, cont)
    except ContinuationStall as stall:
        _write_json(out / "trace.json", {"status": "stalled", "stall_theta": stall.theta,
                                         "trace": stall.trace.to_list()}, cfg)
        write_field(out / "u_last_good.txt", grid, stall.u, name="u")
        print(f"continuation stalled at theta={stall.theta:.6g}", file=sys.stderr)
        return EXIT_STALL
    m = recover_m(model, grid, u)
    write_field(out / "u.txt", grid, u, name="u")
    write_field(out / "m.txt", grid, m, name="m")
    _write_json(out / "trace.json", {"status": "ok", "trace": trace.to_list()}, cfg)
    rep = certify(model, grid, u, m, search_Cmax=float(cfg["certify"]["search_Cmax"]))
    _write_json(out / "certificate.json", rep.to_dict(), cfg)
    print(f"solved: min gap {trace.min_gap:.6g}, certificate {'all pass' if rep.passed else 'FAILED'}")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_check(cfg) -> int:
    model, _, _ = build(cfg)
    ck = cfg["check"]
    box = {k: float(ck[k]) for k in ("p_max", "m_min", "m_max")}
    try:
        rep = check_assumptions(model, box=box, n=int(ck["n"]))
    except ValueError as err:
        raise ConfigError(str(err)) from err
    _write_json(_outdir(cfg) / "assumptions.json", rep.to_dict(), cfg)
    if rep.passed:
        print("all assumptions hold on the sample box")
        return EXIT_OK
    print("violated: " + ", ".join(rep.failed()))
    return EXIT_CHECK


def cmd_certify(cfg) -> int:
    model, grid, _ = build(cfg)
    out = _outdir(cfg)
    paths = [Path(cfg["certify"][k] or out / f"{k[0]}.txt") for k in ("u_field", "m_field")]
    for p in paths:
        if not p.is_file():
            raise InvariantError(f"field file {p} does not exist")
    _, u = read_field(paths[0], grid)
    _, m = read_field(paths[1], grid)
    rep = certify(model, grid, u, m, search_Cmax=float(cfg["certify"]["search_Cmax"]))
    _write_json(out / "certificate.json", rep.to_dict(), cfg)
    print("certificate " + ("all pass" if rep.passed else "FAILED: " + ", ".join(
        k for k, v in rep.checks.items() if not v)))
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_convergence(cfg) -> int:
    model, grid, cont = build(cfg)
    cc = cfg["convergence"]
    grids = [SpaceTimeGrid(d=grid.d, Nx=int(n), Nt=int(n), T=grid.T) for n in cc["grids"]]
    try:
        rep = self_convergence(model, grids, cont)
    except ContinuationStall as stall:
        print(f"continuation stalled at theta={stall.theta:.6g}", file=sys.stderr)
        return EXIT_STALL
    orders = rep.order_u if isinstance(rep.order_u, list) else [rep.order_u]
    ok = all(o == "exact" or cc["order_min"] <= o <= cc["order_max"] for o in orders)
    _write_json(_outdir(cfg) / "convergence.json", {"within_window": ok, **rep.to_dict()}, cfg)
    print(f"observed order for u: {rep.order_u}")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"solve": cmd_solve, "check-assumptions": cmd_check, "certify": cmd_certify,
            "convergence": cmd_convergence}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emfg", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None, help="TOML run configuration")
        sp.add_argument("--out", type=Path, default=None, help="output directory")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="section.key=value, repeatable")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.override)
        if args.out is not None:
            cfg["output"]["dir"] = str(args.out)
        return COMMANDS[args.command](cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelError, GridError, InvariantError) as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return EXIT_INVARIANT
    except NewtonError as err:
        print(f"newton failure: {err}", file=sys.stderr)
        return EXIT_STALL


if __name__ == "__main__":
    sys.exit(main())
