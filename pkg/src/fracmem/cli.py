"""Command-line driver: ``fracmem <command> --config path.json [--out dir] [--seed n]``.

Exit codes: 0 success, 2 invalid configuration, 3 solver failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .eigen import EigenSolverError, SubspaceError, smallest_eigenpair
from .fracop import OperatorError, assemble, interval_torsion
from .grid import SHAPES, DomainError, DomainMask, build_domain
from .optimize import (OptimalPair, OptimizationError, PhysicalParams, alpha_bar, best_pair,
                       pn_convert, radial_optimize)
from .symmetry import SymmetryError, asymmetry, breaking_case, disk_control, radially_monotone

logger = logging.getLogger("fracmem")

COMMANDS = ("solve", "optimize", "alpha-bar", "convert-pn", "experiment-ball",
            "experiment-annulus", "validate-operator")
SCHEMA_LINE = "# fracmem-schema 1"
DISK_CONTROL_RESOLUTION = 64

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

_TOP_KEYS = {"command", "domain", "s", "alpha", "area_fraction", "seed", "tolerances",
             "output_dir", "physical", "delta", "b_list", "cells_across", "alpha_factor",
             "disk_control", "s_list", "n_list", "max_iter"}
_DOMAIN_KEYS = {"shape", "resolution", "a", "b", "width", "height", "radius", "N"}
_TOL_KEYS = {"eigen", "bisection"}
_PHYS_KEYS = {"h", "H", "M", "Theta"}


class ConfigError(ValueError):
    pass


def _number(data, key, lo=None, hi=None, lo_open=False, hi_open=False, default=None, integer=False):
    val = data.get(key, default)
    if val is None:
        raise ConfigError(f"{key}: required")
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {val!r}")
    if integer and int(val) != val:
        raise ConfigError(f"{key}: expected an integer, got {val!r}")
    val = int(val) if integer else float(val)
    if not math.isfinite(val):
        raise ConfigError(f"{key}: must be finite")
    if lo is not None and (val <= lo if lo_open else val < lo):
        raise ConfigError(f"{key}: must be {'>' if lo_open else '>='} {lo}, got {val}")
    if hi is not None and (val >= hi if hi_open else val > hi):
        raise ConfigError(f"{key}: must be {'<' if hi_open else '<='} {hi}, got {val}")
    return val


def _reject_unknown(data, allowed, where):
    extra = sorted(set(data) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(extra)}")


@dataclass
class RunConfig:
    command: str
    domain: dict = field(default_factory=dict)
    s: float = 0.5
    alpha: Optional[float] = None
    area_fraction: float = 0.0
    seed: int = 0
    eigen_tol: float = 1e-12
    bisection_tol: float = 1e-8
    output_dir: str = "out"
    physical: Optional[dict] = None
    delta: float = 0.3
    b_list: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    cells_across: int = 8
    alpha_factor: float = 0.5
    disk_control: bool = False
    s_list: list = field(default_factory=lambda: [0.25, 0.5, 0.75])
    n_list: list = field(default_factory=lambda: [64, 128, 256])
    max_iter: int = 500

    @classmethod
    def from_dict(cls, command: str, data: dict, out: str | None = None, seed: int | None = None):
        if command not in COMMANDS:
            raise ConfigError(f"command: unknown {command!r}; expected one of {COMMANDS}")
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a JSON object")
        _reject_unknown(data, _TOP_KEYS, "config")
        if "command" in data and data["command"] != command:
            raise ConfigError(f"command: config says {data['command']!r} but {command!r} was requested")
        cfg = cls(command)

        dom = data.get("domain")
        if dom is not None:
            if not isinstance(dom, dict):
                raise ConfigError("domain: expected an object")
            _reject_unknown(dom, _DOMAIN_KEYS, "domain")
            if dom.get("shape") not in SHAPES:
                raise ConfigError(f"domain.shape: expected one of {SHAPES}, got {dom.get('shape')!r}")
            _number(dom, "resolution", lo=2, integer=True)
            for key in ("width", "height", "radius", "b"):
                if key in dom and dom["shape"] != "interval":
                    _number(dom, key, lo=0, lo_open=True)
            cfg.domain = dict(dom)
        elif command in ("solve", "optimize", "alpha-bar", "experiment-ball"):
            raise ConfigError("domain: required for this command")
        if command == "experiment-ball" and cfg.domain.get("shape") != "disk":
            raise ConfigError("domain.shape: experiment-ball needs a disk")

        if "s" in data or command not in ("convert-pn", "validate-operator"):
            cfg.s = _number(data, "s", lo=0, hi=1, lo_open=True, hi_open=True, default=cfg.s)
        if "alpha" in data:
            cfg.alpha = _number(data, "alpha", lo=0, lo_open=True)
        elif command == "optimize":
            raise ConfigError("alpha: required for optimize")
        cfg.area_fraction = _number(data, "area_fraction", lo=0, hi=1, default=0.0)
        if command == "alpha-bar" and cfg.area_fraction >= 1:
            raise ConfigError("area_fraction: must be < 1 for alpha-bar")
        cfg.seed = _number(data, "seed", lo=0, default=0, integer=True)
        if seed is not None:
            cfg.seed = int(seed)

        tols = data.get("tolerances", {})
        if not isinstance(tols, dict):
            raise ConfigError("tolerances: expected an object")
        _reject_unknown(tols, _TOL_KEYS, "tolerances")
        cfg.eigen_tol = _number(tols, "eigen", lo=0, hi=1e-3, lo_open=True, default=cfg.eigen_tol)
        cfg.bisection_tol = _number(tols, "bisection", lo=0, hi=1e-2, lo_open=True, default=cfg.bisection_tol)

        cfg.output_dir = str(out or data.get("output_dir") or cfg.output_dir)
        cfg.max_iter = _number(data, "max_iter", lo=1, default=cfg.max_iter, integer=True)

        if command == "convert-pn":
            phys = data.get("physical")
            if not isinstance(phys, dict):
                raise ConfigError("physical: required object with h, H, M, Theta")
            _reject_unknown(phys, _PHYS_KEYS, "physical")
            cfg.physical = {k: _number(phys, k) for k in ("h", "H", "M", "Theta")}
            if dom is None:
                raise ConfigError("domain: required for convert-pn (sets |Omega|)")

        if command == "experiment-annulus":
            cfg.delta = _number(data, "delta", lo=0, hi=1, lo_open=True, hi_open=True, default=cfg.delta)
            b_list = data.get("b_list", cfg.b_list)
            if not isinstance(b_list, list) or not b_list:
                raise ConfigError("b_list: expected a non-empty list")
            cfg.b_list = [_number({"b_list": b}, "b_list", lo=0, lo_open=True) for b in b_list]
            cfg.cells_across = _number(data, "cells_across", lo=2, default=cfg.cells_across, integer=True)
            if not isinstance(data.get("disk_control", False), bool):
                raise ConfigError("disk_control: expected true or false")
            cfg.disk_control = data.get("disk_control", False)
        if command == "experiment-ball":
            cfg.alpha_factor = _number(data, "alpha_factor", lo=0, lo_open=True, default=cfg.alpha_factor)
        if command == "validate-operator":
            s_list = data.get("s_list", cfg.s_list)
            n_list = data.get("n_list", cfg.n_list)
            if not isinstance(s_list, list) or not s_list or not isinstance(n_list, list) or not n_list:
                raise ConfigError("s_list/n_list: expected non-empty lists")
            cfg.s_list = [_number({"s_list": v}, "s_list", lo=0, hi=1, lo_open=True, hi_open=True) for v in s_list]
            cfg.n_list = [_number({"n_list": v}, "n_list", lo=4, integer=True) for v in n_list]
        return cfg

    def build_domain(self) -> DomainMask:
        params = {k: v for k, v in self.domain.items() if k not in ("shape", "resolution")}
        return build_domain(self.domain["shape"], self.domain["resolution"], **params)


# -- artifact writers ---------------------------------------------------------

def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return "" if x is None else str(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def write_json(path: Path, data: dict):
    _atomic_write(path, json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: list, rows: list):
    lines = [SCHEMA_LINE, ",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_csv(path) -> list:
    """Rows of a fracmem CSV as dicts of strings (schema line skipped)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SCHEMA_LINE:
        raise ValueError(f"{path}: missing schema line")
    header = lines[1].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[2:]]


def svg_heatmap(values: np.ndarray, inside: np.ndarray, cell: int = 6) -> str:
    """Linear grayscale heatmap, one rect per inside cell (white = min)."""
    vals = np.atleast_2d(np.asarray(values, dtype=float))
    ins = np.atleast_2d(np.asarray(inside, dtype=bool))
    if vals.shape[0] > 1:
        # first axis runs left to right, second axis bottom to top
        vals, ins = vals.T[::-1], ins.T[::-1]
    rows, cols = vals.shape
    sel = vals[ins]
    lo, hi = (float(sel.min()), float(sel.max())) if sel.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" height="{rows * cell}" '
           f'viewBox="0 0 {cols * cell} {rows * cell}" shape-rendering="crispEdges">']
    for i in range(rows):
        for j in range(cols):
            if not ins[i, j]:
                continue
            g = int(round(255 * (1.0 - (vals[i, j] - lo) / span)))
            out.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({g},{g},{g})"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _field_outputs(outdir: Path, domain: DomainMask, u: np.ndarray, D: Optional[np.ndarray]):
    mask = np.zeros(domain.grid.shape, bool) if D is None else D
    idx = domain.indices()
    rows = []
    for cell in idx:
        t = tuple(cell)
        rows.append([" ".join(str(int(c)) for c in t), u[t], bool(mask[t])])
    write_csv(outdir / "fields.csv", ["cell", "u", "in_D"], rows)
    _atomic_write(outdir / "u.svg", svg_heatmap(u, domain.inside))
    _atomic_write(outdir / "D.svg", svg_heatmap(mask.astype(float), domain.inside))


def _pair_summary(pair: OptimalPair, domain: DomainMask, alpha_crit: Optional[float]) -> dict:
    out = {
        "lambda": pair.lam,
        "t": pair.t,
        "realized_measure": pair.D.n_cells * domain.grid.cell_volume,
        "target_measure": pair.D.target_measure,
        "status": pair.status,
        "start": pair.start,
        "iterations": len(pair.history),
        "history": list(pair.history),
    }
    if alpha_crit is not None:
        out["alpha_bar"] = alpha_crit
        out["alpha_exceeds_bar"] = bool(pair.alpha > alpha_crit)
    else:
        out["alpha_exceeds_bar"] = pair.alpha_exceeds_bar
    return out


# -- commands -----------------------------------------------------------------

def _cmd_solve(cfg, outdir):
    domain = cfg.build_domain()
    op = assemble(domain, cfg.s)
    pair = smallest_eigenpair(op, tol=cfg.eigen_tol)
    write_json(outdir / "result.json", {
        "command": cfg.command, "lambda": pair.lam, "residual": pair.residual,
        "iterations": pair.iterations, "measure": domain.measure, "operator": op.metadata(),
    })
    _field_outputs(outdir, domain, pair.u, None)


def _cmd_optimize(cfg, outdir):
    domain = cfg.build_domain()
    op = assemble(domain, cfg.s)
    A = cfg.area_fraction * domain.measure
    pair = best_pair(domain, cfg.s, cfg.alpha, A, op=op, seed=cfg.seed, max_iter=cfg.max_iter,
                     eig_tol=cfg.eigen_tol)
    result = {"command": cfg.command, "alpha": cfg.alpha, "A": A, "s": cfg.s,
              "operator": op.metadata(), "domain": domain.to_json()}
    result.update(_pair_summary(pair, domain, None))
    write_json(outdir / "result.json", result)
    _field_outputs(outdir, domain, pair.u, pair.D.mask)


def _cmd_alpha_bar(cfg, outdir):
    domain = cfg.build_domain()
    op = assemble(domain, cfg.s)
    A = cfg.area_fraction * domain.measure
    val = alpha_bar(domain, cfg.s, A, op=op, tol=cfg.bisection_tol, seed=cfg.seed)
    write_json(outdir / "result.json", {
        "command": cfg.command, "s": cfg.s, "A": A, "alpha_bar": val,
        "mu": smallest_eigenpair(op).lam, "operator": op.metadata(),
    })


def _cmd_convert_pn(cfg, outdir):
    omega = cfg.build_domain().measure
    p = cfg.physical
    try:
        alpha, A, Lam = pn_convert(PhysicalParams(p["h"], p["H"], p["M"], p["Theta"]), omega)
    except OptimizationError as exc:
        raise ConfigError(f"physical: {exc}") from exc
    write_json(outdir / "result.json", {
        "command": cfg.command, "physical": p, "omega_measure": omega,
        "alpha": alpha, "A": A, "Lambda": Lam,
    })


def _cmd_experiment_ball(cfg, outdir):
    domain = cfg.build_domain()
    op = assemble(domain, cfg.s)
    A = cfg.area_fraction * domain.measure
    crit = alpha_bar(domain, cfg.s, A, op=op, tol=cfg.bisection_tol, seed=cfg.seed)
    alpha = cfg.alpha if cfg.alpha is not None else cfg.alpha_factor * crit
    full = best_pair(domain, cfg.s, alpha, A, op=op, seed=cfg.seed, max_iter=cfg.max_iter)
    radial = radial_optimize(domain, cfg.s, alpha, A, op=op)
    result = {
        "command": cfg.command, "s": cfg.s, "alpha": alpha, "A": A,
        "asymmetry": asymmetry(full.D, domain),
        "radially_monotone": radially_monotone(full.D, domain),
        "lambda_radial": radial.lam,
        "relative_gap": abs(full.lam - radial.lam) / radial.lam,
    }
    result.update(_pair_summary(full, domain, crit))
    write_json(outdir / "result.json", result)
    _field_outputs(outdir, domain, full.u, full.D.mask)


def _workers():
    raw = os.environ.get("FRACMEM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"FRACMEM_THREADS: expected a positive integer, got {raw!r}")


SCAN_FIELDS = ["s", "b", "delta", "N", "alpha", "resolution", "sigma", "tau", "lambda_sector",
               "lambda_full", "asym", "verdict_sector", "verdict_full", "verdict",
               "sigma_status", "full_status"]


def _cmd_experiment_annulus(cfg, outdir):
    from concurrent.futures import ThreadPoolExecutor

    def job(b):
        return breaking_case(cfg.s, cfg.delta, b, cfg.cells_across, cfg.alpha)

    workers = min(_workers(), len(cfg.b_list))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cases = list(pool.map(job, cfg.b_list))
    else:
        cases = [job(b) for b in cfg.b_list]
    reports = [c[0] for c in cases]
    rows = [[r.row()[k] for k in SCAN_FIELDS] for r in reports]
    if cfg.disk_control:
        ctrl = disk_control(cfg.s, cfg.delta, resolution=DISK_CONTROL_RESOLUTION)[0]
        rows.append([ctrl.row()[k] for k in SCAN_FIELDS])
    write_csv(outdir / "scan.csv", SCAN_FIELDS, rows)
    write_json(outdir / "result.json", {
        "command": cfg.command, "s": cfg.s, "delta": cfg.delta,
        "cells_across": cfg.cells_across, "reports": [r.row() for r in reports],
    })
    last_report, last_radial, last_full = cases[-1]
    domain = build_domain("annulus", last_report.resolution, b=last_report.b)
    _field_outputs(outdir, domain, last_full.u, last_full.D.mask)


def _cmd_validate_operator(cfg, outdir):
    rows, summary = [], {}
    for s in cfg.s_list:
        errs = []
        for n in cfg.n_list:
            domain = build_domain("interval", n)
            op = assemble(domain, s)
            u = np.linalg.solve(op.matrix(), np.ones(n))
            x = domain.grid.axis_centers()
            exact = interval_torsion(x, s)
            interior = np.abs(x) <= 0.9
            err = float(np.max(np.abs(u[interior] - exact[interior]) / exact[interior]))
            errs.append(err)
            rows.append([s, n, err])
        summary[str(s)] = {"errors": errs, "monotone": bool(np.all(np.diff(errs) < 0))}
    write_csv(outdir / "scan.csv", ["s", "n", "max_rel_interior_error"], rows)
    write_json(outdir / "result.json", {"command": cfg.command, "torsion": summary})


_DISPATCH = {
    "solve": _cmd_solve,
    "optimize": _cmd_optimize,
    "alpha-bar": _cmd_alpha_bar,
    "convert-pn": _cmd_convert_pn,
    "experiment-ball": _cmd_experiment_ball,
    "experiment-annulus": _cmd_experiment_annulus,
    "validate-operator": _cmd_validate_operator,
}


def run(cfg: RunConfig) -> int:
    outdir = Path(cfg.output_dir)
    try:
        _DISPATCH[cfg.command](cfg, outdir)
    except (ConfigError, DomainError) as exc:
        logger.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except (EigenSolverError, OperatorError, OptimizationError, SymmetryError, SubspaceError,
            np.linalg.LinAlgError) as exc:
        logger.error("solver failure: %s", exc)
        return EXIT_SOLVER
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fracmem", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with open(args.config) as fh:
            data = json.load(fh)
        cfg = RunConfig.from_dict(args.command, data, out=args.out, seed=args.seed)
        if args.command not in ("convert-pn", "validate-operator", "experiment-annulus"):
            cfg.build_domain()
    except (OSError, json.JSONDecodeError, ConfigError, DomainError) as exc:
        print(f"fracmem: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code = run(cfg)
    if code == EXIT_CONFIG:
        print("fracmem: invalid configuration (see log)", file=sys.stderr)
    elif code == EXIT_SOLVER:
        print("fracmem: solver failure (see log)", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
