"""Configuration-driven experiment runner.

    degenlab run <config.json>
    degenlab sweep <config.json>
    degenlab validate <config.json>

Exit codes: 0 success, 2 invalid configuration, 3 numerical-status failure
(the report is still written).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import itertools
import json
import os
import sys as _sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .geometry import (
    GeometryError,
    IntervalSet,
    SearchFailure,
    SpaceTimeSet,
    fat_cantor,
    set_from_json,
)
from .pde import Control, ContractError, TimeGrid, solve_forward, trajectory_to_csv
from .spectral import DegenerateOperatorSpec, NumericalError, SpectralError, eigen_closed_form, eigen_fd

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
KINDS = ("eig", "solve", "observability", "game", "normopt", "sweep")
STOCHASTIC = ("observability", "game", "normopt")


class ConfigError(ValueError):
    pass


class NumericalStatus(RuntimeError):
    """The pipeline ran but did not reach a trustworthy result."""


# -- schema ----------------------------------------------------------------

_num = {"oneOf": [{"type": "number"}, {"type": "string", "pattern": r"^-?\d+(/\d+)?$"}]}
_modes = {"type": "array", "items": {"type": "number"}}
_set = {
    "type": "object",
    "properties": {
        "type": {"enum": ["space", "time", "spacetime", "fat_cantor", "product"]},
        "cells": {"type": "array", "items": {"type": "array", "items": _num}},
        "level": {"type": "integer", "minimum": 0},
        "ratio": _num,
        "carrier": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        "space": {"$ref": "#/$defs/set"},
        "time": {"$ref": "#/$defs/set"},
    },
    "required": ["type"],
    "additionalProperties": False,
}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = {
    "$defs": {"set": _set},
    **_obj(
        {
            "kind": {"enum": list(KINDS)},
            "seed": {"type": "integer"},
            "output_dir": {"type": "string"},
            "operator": _obj(
                {
                    "alpha": {"type": "number"},
                    "n_cells": {"type": "integer"},
                    "grading": {"type": "number"},
                    "K": {"type": "integer", "minimum": 1},
                    "validation": {"type": "boolean"},
                },
                ["alpha"],
            ),
            "grid": _obj({"T": {"type": "number"}, "n_steps": {"type": "integer"}}, ["T"]),
            "eig": _obj({"closed_form": {"type": "boolean"}, "tol": {"type": "number"}}),
            "solve": _obj(
                {"y0": _modes, "g": _obj({"support": {"$ref": "#/$defs/set"}, "modes": _modes}, ["support", "modes"])}
            ),
            "observability": _obj(
                {
                    "D": {"$ref": "#/$defs/set"},
                    "omega": {"$ref": "#/$defs/set"},
                    "restarts": {"type": "integer", "minimum": 0},
                    "mu": {"type": ["number", "null"]},
                    "max_iter": {"type": "integer", "minimum": 1},
                    "T_list": {"type": "array", "items": {"type": "number"}},
                }
            ),
            "game": _obj(
                {
                    "omega": {"$ref": "#/$defs/set"},
                    "omega1": {"$ref": "#/$defs/set"},
                    "omega2": {"$ref": "#/$defs/set"},
                    "G1": {"$ref": "#/$defs/set"},
                    "G2": {"$ref": "#/$defs/set"},
                    "M0": {"type": "number"},
                    "M1": {"type": "number"},
                    "M2": {"type": "number"},
                    "y0": _modes,
                    "yT1": _modes,
                    "yT2": _modes,
                    "g_modes": _modes,
                    "tol": {"type": "number"},
                    "max_rounds": {"type": "integer", "minimum": 1},
                    "probes": {"type": "integer", "minimum": 1},
                    "tol_class": {"type": "number"},
                },
                ["omega1", "omega2", "G1", "G2", "M1", "M2", "yT1", "yT2"],
            ),
            "normopt": _obj(
                {
                    "omega": {"$ref": "#/$defs/set"},
                    "y0": _modes,
                    "followers": {"enum": ["none", "null_target"]},
                    "omega1": {"$ref": "#/$defs/set"},
                    "omega2": {"$ref": "#/$defs/set"},
                    "G1": {"$ref": "#/$defs/set"},
                    "G2": {"$ref": "#/$defs/set"},
                    "M1": {"type": "number"},
                    "M2": {"type": "number"},
                    "yT1": _modes,
                    "yT2": _modes,
                    "eps_schedule": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                    "delta": {"type": "number"},
                    "primal": {"type": "boolean"},
                    "alternate": {"type": "boolean"},
                    "rounds": {"type": "integer", "minimum": 1},
                    "allow_outside": {"type": "boolean"},
                },
                ["omega", "y0"],
            ),
            "base": {"type": "object"},
            "sweep": _obj(
                {
                    "T_list": {"type": "array", "items": {"type": "number"}},
                    "alpha_list": {"type": "array", "items": {"type": "number"}},
                    "K_list": {"type": "array", "items": {"type": "integer"}},
                }
            ),
        },
        ["kind"],
    ),
}


def _load(path) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def validate_config(doc: dict) -> dict:
    """Schema plus cross-field checks; raises :class:`ConfigError` with a field path."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"field {where}: {exc.message}") from exc
    kind = doc["kind"]
    if kind in STOCHASTIC and "seed" not in doc:
        raise ConfigError(f"field seed: required for kind '{kind}'")
    if kind == "sweep":
        if "base" not in doc or "sweep" not in doc:
            raise ConfigError("field base/sweep: a sweep needs a base config and a parameter grid")
        grid = doc["sweep"]
        if not grid or any(len(v) == 0 for v in grid.values()):
            raise ConfigError("field sweep: the parameter grid is empty")
        if doc["base"].get("kind") == "sweep":
            raise ConfigError("field base/kind: nested sweeps are not supported")
        # cells differ only in swept numbers; the first one stands for the grid
        validate_config(next(_cells(doc))[1])
        return doc
    if "operator" not in doc:
        raise ConfigError("field operator: required")
    if kind != "eig" and "grid" not in doc:
        raise ConfigError("field grid: required")
    if kind not in ("eig",) and kind not in doc:
        raise ConfigError(f"field {kind}: required for kind '{kind}'")
    try:
        build(doc)
    except (GeometryError, ContractError, SpectralError, ValueError) as exc:
        raise ConfigError(f"semantic check failed: {exc}") from exc
    return doc


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# -- object construction ---------------------------------------------------


def _frac(v):
    return Fraction(v) if isinstance(v, str) else Fraction(v).limit_denominator(10**12) if isinstance(v, float) else Fraction(v)


def parse_set(doc):
    kind = doc["type"]
    if kind == "fat_cantor":
        return fat_cantor(doc.get("level", 0), _frac(doc["ratio"]), tuple(_frac(c) for c in doc.get("carrier", (0, 1))))
    if kind == "product":
        return SpaceTimeSet.product(parse_set(doc["space"]), parse_set(doc["time"]))
    cells = [[_frac(v) for v in c] for c in doc.get("cells", [])]
    return set_from_json({"type": kind, "cells": cells})


class Built:
    """Lazily assembled objects for one config."""

    def __init__(self, doc):
        self.doc = doc
        op = doc["operator"]
        self.op = DegenerateOperatorSpec(
            op["alpha"], op.get("n_cells", 400), op.get("grading", 2.0), op.get("validation", False)
        )
        self.K = op.get("K", 8)
        g = doc.get("grid")
        self.grid = TimeGrid(g["T"], g.get("n_steps", 50)) if g else None
        self._sys = None

    @property
    def sys(self):
        if self._sys is None:
            self._sys = eigen_fd(self.op, self.K)
        return self._sys


def build(doc) -> Built:
    b = Built(doc)
    if b.K > b.op.n_cells - 1:
        raise ContractError(f"K={b.K} too large for n_cells={b.op.n_cells}")
    for key in ("observability", "game", "normopt", "solve"):
        block = doc.get(key, {})
        for name, v in block.items():
            if isinstance(v, dict) and "type" in v:
                parse_set(v)
            if isinstance(v, dict) and "support" in v:
                parse_set(v["support"])
    if doc["kind"] == "observability":
        ob = doc["observability"]
        if "D" not in ob and "omega" not in ob:
            raise ContractError("observability needs D or omega")
        if "T_list" in ob and len(ob["T_list"]) < 4:
            raise ContractError("T_list needs at least 4 horizons")
    return b


# -- pipelines -------------------------------------------------------------


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, Fraction):
        return str(v)
    return v


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return path


def _pipe_eig(b: Built, out: Path, timings):
    t = time.perf_counter()
    lam = b.sys.eigenvalues
    timings["eigen_fd"] = time.perf_counter() - t
    rows, report = [], {"eigenvalues": lam}
    closed = None
    if b.doc.get("eig", {}).get("closed_form", True):
        t = time.perf_counter()
        closed = eigen_closed_form(b.op.alpha, b.K, b.doc.get("eig", {}).get("tol", 1e-12))
        timings["eigen_closed_form"] = time.perf_counter() - t
        report["closed_form"] = closed
        report["max_rel_err"] = float(np.max(np.abs(lam - closed) / closed))
    for k in range(b.K):
        row = [k + 1, float(lam[k])]
        if closed is not None:
            row += [float(closed[k]), float(abs(lam[k] - closed[k]) / closed[k])]
        rows.append(row)
    header = ["k", "eigenvalue"] + (["closed_form", "rel_err"] if closed is not None else [])
    files = [_write_csv(out / "eigenvalues.csv", header, rows)]
    return report, files, None


def _pipe_solve(b: Built, out: Path, timings):
    s = b.doc["solve"]
    g = None
    if "g" in s:
        g = Control.from_modes(b.sys, b.grid, parse_set(s["g"]["support"]), [s["g"]["modes"]])
    t = time.perf_counter()
    traj = solve_forward(b.sys, s.get("y0"), g, None, None, b.grid)
    timings["solve_forward"] = time.perf_counter() - t
    files = [trajectory_to_csv(traj, out / "trajectory.csv")]
    report = {"terminal_state": traj.terminal_state, "terminal_norm": float(np.linalg.norm(traj.terminal_state))}
    return report, files, None


def _pipe_observability(b: Built, out: Path, timings):
    from .observability import ObservabilityConfig, blowup_exponent_fit, estimate_obs_constant, scaling_csv

    ob = b.doc["observability"]
    seed = b.doc["seed"]
    files = []
    if "T_list" in ob:
        omega = parse_set(ob["omega"])
        t = time.perf_counter()
        fit = blowup_exponent_fit(
            b.op.alpha, omega, ob.get("mu"), ob["T_list"], K=b.K, restarts=ob.get("restarts", 8),
            seed=seed, n_steps=b.grid.n_steps, sys=b.sys,
        )
        timings["blowup_exponent_fit"] = time.perf_counter() - t
        files.append(scaling_csv(fit.T, fit.c_lower, out / "scaling.csv"))
        report = {"slope": fit.slope, "intercept": fit.intercept, "residual": fit.residual, "mu": fit.mu,
                  "T": fit.T, "c_lower": fit.c_lower}
        return report, files, None
    D = parse_set(ob["D"]) if "D" in ob else SpaceTimeSet.product(
        parse_set(ob["omega"]), IntervalSet.interval(0, Fraction(b.grid.T).limit_denominator(10**12))
    )
    cfg = ObservabilityConfig(b.op.alpha, D, b.grid, seed=seed, K=b.K, mu=ob.get("mu"),
                              restarts=ob.get("restarts", 32), max_iter=ob.get("max_iter", 200))
    t = time.perf_counter()
    est = estimate_obs_constant(cfg, b.sys, workers=_workers())
    timings["estimate_obs_constant"] = time.perf_counter() - t
    files.append(scaling_csv([b.grid.T], [est.c_lower], out / "scaling.csv"))
    report = est.to_json({"alpha": b.op.alpha, "mu": cfg.mu, "K": b.K, "restarts": cfg.restarts, "seed": seed})
    return report, files, None


def _game_spec(b: Built, gm: dict):
    from .game import GameSpec

    omega = parse_set(gm["omega"]) if "omega" in gm else IntervalSet.interval(0, 1)
    g = None
    if "g_modes" in gm:
        g = Control.from_modes(b.sys, b.grid, omega, [gm["g_modes"]])
    return GameSpec(
        b.sys, b.grid, omega, parse_set(gm["omega1"]), parse_set(gm["omega2"]), parse_set(gm["G1"]),
        parse_set(gm["G2"]), gm.get("M0", 0.0 if g is None else g.linf_l2), gm["M1"], gm["M2"],
        gm.get("y0"), gm["yT1"], gm["yT2"], g,
    )


def _pipe_game(b: Built, out: Path, timings):
    from .game import nash_solve

    gm = b.doc["game"]
    spec = _game_spec(b, gm)
    t = time.perf_counter()
    rep = nash_solve(spec, tol=gm.get("tol", 1e-8), max_rounds=gm.get("max_rounds", 200),
                     verify_probes=gm.get("probes", 200), seed=b.doc["seed"], tol_class=gm.get("tol_class"))
    timings["nash_solve"] = time.perf_counter() - t
    files = [rep.norms_csv(out / "norms.csv")]
    failure = None if rep.converged else f"equilibrium not certified (status {rep.status})"
    return rep.to_json(), files, failure


def _pipe_normopt(b: Built, out: Path, timings):
    from .normopt import DEFAULT_EPS, LeaderProblem, leader_follower_alternation, solve_normopt

    nm = b.doc["normopt"]
    omega = parse_set(nm["omega"])
    u1 = u2 = None
    notes = []
    if nm.get("followers", "none") == "null_target" or nm.get("alternate", False):
        gm = {k: nm[k] for k in ("omega1", "omega2", "G1", "G2", "M1", "M2", "yT1", "yT2") if k in nm}
        missing = {"omega1", "omega2", "G1", "G2", "M1", "M2", "yT1", "yT2"} - set(gm)
        if missing:
            raise ContractError(f"followers need fields {sorted(missing)}")
        gm.update(omega=nm["omega"], y0=nm["y0"])
        spec = _game_spec(b, gm)
        for i, w in ((1, spec.omega1), (2, spec.omega2)):
            if not w.is_subset_of(omega):
                if not nm.get("allow_outside", False):
                    raise ContractError(f"omega{i} must lie inside omega (set allow_outside to permit)")
                notes.append(f"omega{i} is not contained in omega; leader characterization may not apply")
        if nm.get("alternate", False):
            t = time.perf_counter()
            hist = leader_follower_alternation(spec, nm.get("rounds", 3), nm.get("eps_schedule", DEFAULT_EPS),
                                               seed=b.doc["seed"])
            timings["alternation"] = time.perf_counter() - t
            rep, eq = hist[-1]
            report = {"rounds": [{"V": r.V, "N_dual": r.N_dual, "class": e.cls, "converged": e.converged}
                                 for r, e in hist], "warnings": notes}
            return report, [], None if eq.converged else "alternation ended without a certified equilibrium"
        from .game import null_target_follower

        u1, u2 = null_target_follower(1, spec), null_target_follower(2, spec)
    prob = LeaderProblem(b.sys, b.grid, omega, nm["y0"], u1, u2)
    t = time.perf_counter()
    rep = solve_normopt(prob, nm.get("eps_schedule", DEFAULT_EPS), delta=nm.get("delta"),
                        primal=nm.get("primal", True), seed=b.doc["seed"])
    timings["solve_normopt"] = time.perf_counter() - t
    files = [rep.leader_csv(prob, out / "leader.csv")]
    failure = None
    if rep.primal_feasible is False:
        failure = "primal estimate did not reach the terminal tolerance"
    return dict(rep.to_json(), warnings=notes), files, failure


PIPELINES = {
    "eig": _pipe_eig,
    "solve": _pipe_solve,
    "observability": _pipe_observability,
    "game": _pipe_game,
    "normopt": _pipe_normopt,
}


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("DEGENLAB_WORKERS", str(min(4, os.cpu_count() or 1)))))
    except ValueError:
        return 1


def execute(doc: dict, out: Path) -> tuple[int, dict]:
    """Run one validated non-sweep config into ``out``; returns ``(exit_code, manifest)``."""
    out.mkdir(parents=True, exist_ok=True)
    start = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    timings, files, failure, code = {}, [], None, EXIT_OK
    report = {}
    try:
        b = build(doc)
        report, files, failure = PIPELINES[doc["kind"]](b, out, timings)
        if failure:
            code = EXIT_NUMERICAL
    except (NumericalError, SearchFailure, NumericalStatus, ArithmeticError) as exc:
        failure, code = f"{type(exc).__name__}: {exc}", EXIT_NUMERICAL
    except (GeometryError, ContractError, SpectralError, ConfigError, ValueError) as exc:
        failure, code = f"{type(exc).__name__}: {exc}", EXIT_INVALID
    report = {"kind": doc["kind"], "status": "ok" if code == EXIT_OK else "failed", "failure": failure,
              "result": report, "config": doc}
    files = [_write_json(out / "report.json", report)] + list(files)
    manifest = {
        "config_hash": config_hash(doc),
        "version": __version__,
        "started": start.isoformat(),
        "wall_clock": time.perf_counter() - t0,
        "timings": timings,
        "outputs": sorted(p.name for p in files),
        "exit_code": code,
        "failure": failure,
    }
    _write_json(out / "manifest.json", manifest)
    return code, manifest


def _summary(kind: str, report: dict) -> dict:
    res = report.get("result", {}) or {}
    keys = {
        "eig": ("max_rel_err",),
        "solve": ("terminal_norm",),
        "observability": ("c_lower",),
        "game": ("class", "converged"),
        "normopt": ("V", "N_dual", "N_primal", "duality_gap"),
    }[kind]
    return {k: res.get(k) for k in keys}


def _cells(doc):
    grid = doc["sweep"]
    keys = [k for k in ("alpha_list", "K_list", "T_list") if k in grid]
    for combo in itertools.product(*(grid[k] for k in keys)):
        cell = copy.deepcopy(doc["base"])
        if "seed" in doc and "seed" not in cell:
            cell["seed"] = doc["seed"]
        params = dict(zip(keys, combo))
        if "alpha_list" in params:
            cell.setdefault("operator", {})["alpha"] = params["alpha_list"]
        if "K_list" in params:
            cell.setdefault("operator", {})["K"] = params["K_list"]
        if "T_list" in params:
            cell.setdefault("grid", {})["T"] = params["T_list"]
        yield {k[:-5]: v for k, v in params.items()}, cell


def run_sweep(doc: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    cells = list(_cells(doc))

    def one(idx_cell):
        idx, (params, cell) = idx_cell
        cell_dir = out / f"cell_{idx:03d}"
        try:
            validate_config(cell)
            code, _ = execute(cell, cell_dir)
        except ConfigError as exc:
            cell_dir.mkdir(parents=True, exist_ok=True)
            _write_json(cell_dir / "manifest.json", {"config_hash": config_hash(cell), "exit_code": EXIT_INVALID,
                                                     "failure": str(exc), "version": __version__})
            return params, EXIT_INVALID, {}
        except Exception as exc:  # contain any crash to its cell
            cell_dir.mkdir(parents=True, exist_ok=True)
            _write_json(cell_dir / "manifest.json", {"config_hash": config_hash(cell), "exit_code": EXIT_NUMERICAL,
                                                     "failure": f"{type(exc).__name__}: {exc}", "version": __version__})
            return params, EXIT_NUMERICAL, {}
        report = json.loads((cell_dir / "report.json").read_text())
        return params, code, _summary(cell["kind"], report)

    with ThreadPoolExecutor(max_workers=_workers()) as ex:
        results = list(ex.map(one, enumerate(cells)))
    pkeys = list(results[0][0]) if results else []
    skeys = sorted({k for _, _, s in results for k in s})
    rows = [[p[k] for k in pkeys] + [s.get(k, "") for k in skeys] + [code] for p, code, s in results]
    _write_csv(out / "sweep.csv", pkeys + skeys + ["exit_code"], rows)
    _write_json(out / "manifest.json", {
        "config_hash": config_hash(doc),
        "version": __version__,
        "cells": len(cells),
        "outputs": ["sweep.csv"] + [f"cell_{i:03d}" for i in range(len(cells))],
        "exit_codes": [c for _, c, _ in results],
    })
    codes = {c for _, c, _ in results}
    return EXIT_OK if codes == {EXIT_OK} else (EXIT_NUMERICAL if EXIT_NUMERICAL in codes else EXIT_INVALID)


# -- entry points ----------------------------------------------------------


def _prepare(path, expect_sweep: bool | None):
    doc = validate_config(_load(path))
    if expect_sweep is True and doc["kind"] != "sweep":
        raise ConfigError("field kind: 'sweep' expects kind 'sweep'")
    if expect_sweep is False and doc["kind"] == "sweep":
        raise ConfigError("field kind: use 'degenlab sweep' for sweep configs")
    out = Path(doc.get("output_dir", "degenlab_out"))
    if not out.is_absolute():
        out = Path(path).resolve().parent / out
    return doc, out


def cmd_run(path) -> int:
    doc, out = _prepare(path, False)
    code, _ = execute(doc, out)
    return code


def cmd_sweep(path) -> int:
    doc, out = _prepare(path, True)
    return run_sweep(doc, out)


def cmd_validate(path) -> int:
    _prepare(path, None)
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="degenlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"degenlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("run", "execute one experiment"),
        ("sweep", "execute a parameter grid"),
        ("validate", "check a config without running it"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="path to a JSON experiment file")
    args = parser.parse_args(argv)
    handler = {"run": cmd_run, "sweep": cmd_sweep, "validate": cmd_validate}[args.command]
    try:
        code = handler(args.config)
    except (ConfigError, OSError) as exc:
        print(f"degenlab: invalid configuration: {exc}", file=_sys.stderr)
        return EXIT_INVALID
    if code == EXIT_OK and args.command == "validate":
        print("ok")
    return code


if __name__ == "__main__":
    _sys.exit(main())
