"""Command-line front end: config ingestion, dispatch, sweeps and deterministic output.

Usage::

    magchan --config run.json --command sweep --out results/ [--seed N] [--threads N]

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  The
worker count defaults to the ``MAGCHAN_WORKERS`` environment variable, then
to the number of available CPUs; ``--threads`` overrides both.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from . import __version__
from .errors import NumericalFailure
from .periodic import FieldConfig, PeriodicFunction

SCHEMA_VERSION = 1
ENV_WORKERS = "MAGCHAN_WORKERS"
W_CONVENTION = "exact"

COMMANDS = ("fixed-points", "classify", "sweep", "spiral-window", "bifurcate", "channel-chart", "exceptional",
            "construct-exceptional", "saddle-order", "collapse", "geodesic")

DEFAULT_TOLERANCES = {
    "tau_max": 500.0,
    "tol": 1e-10,
    "tol_fp": 1e-10,
    "fp_window": 2.0,
    "fp_match": 1e-3,
    "tol_sp": 1e-6,
    "tol_sc": 1e-4,
    "collapse_log_r": -30.0,
    "min_alternations": 3,
    "max_cells": 100000,
    "success_fraction": 0.99,
}

_PERIODIC = {
    "type": "object",
    "properties": {
        "const": {"type": "number"},
        "cos": {"type": "array", "items": {"type": "number"}},
        "sin": {"type": "array", "items": {"type": "number"}},
    },
    "additionalProperties": False,
}

_PAIR = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "field": {
            "type": "object",
            "properties": {"b": _PERIODIC, "V": _PERIODIC, "label": {"type": "string"}},
            "required": ["b"],
            "additionalProperties": False,
        },
        "geo": {
            "type": "object",
            "properties": {"f": _PERIODIC, "c": {"type": "number", "minimum": 0}},
            "required": ["f", "c"],
            "additionalProperties": False,
        },
        "tolerances": {
            "type": "object",
            "properties": {k: {"type": "integer" if isinstance(v, int) else "number"}
                           for k, v in DEFAULT_TOLERANCES.items()},
            "additionalProperties": False,
        },
        "energy": {
            "oneOf": [
                {"type": "number"},
                {
                    "type": "object",
                    "properties": {
                        "grid": {
                            "type": "object",
                            "properties": {"lo": {"type": "number"}, "hi": {"type": "number"},
                                           "n": {"type": "integer", "minimum": 1}},
                            "required": ["lo", "hi", "n"],
                            "additionalProperties": False,
                        }
                    },
                    "required": ["grid"],
                    "additionalProperties": False,
                },
            ]
        },
        "ensemble": {
            "type": "object",
            "properties": {"count": {"type": "integer", "minimum": 1}, "seed": {"type": "integer", "minimum": 0}},
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {"format": {"enum": ["json", "csv"]}, "path": {"type": "string"}},
            "additionalProperties": False,
        },
        "options": {
            "type": "object",
            "properties": {
                "bracket": _PAIR,
                "interval": _PAIR,
                "kappa_bracket": _PAIR,
                "record": {"type": "integer", "minimum": 0},
                "start": _PAIR,
                "tau": {"type": "number"},
                "level": {"type": "number"},
                "transport_taus": {"type": "array", "items": {"type": "number"}},
            },
            "additionalProperties": False,
        },
    },
    "required": ["field"],
    "additionalProperties": False,
}


class ConfigError(Exception):
    """Invalid configuration; ``path`` is the offending key path."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"config error at '{path or '<root>'}': {reason}")
        self.path = path
        self.reason = reason


@dataclass
class RunConfig:
    field: FieldConfig
    geo: Optional[object]
    tolerances: Dict[str, float]
    energy: object
    ensemble: Dict[str, int]
    output: Dict[str, str]
    options: Dict[str, object]

    def energies(self) -> List[float]:
        if self.energy is None:
            return []
        if isinstance(self.energy, dict):
            g = self.energy["grid"]
            return [float(x) for x in np.linspace(g["lo"], g["hi"], g["n"])]
        return [float(self.energy)]

    def to_json(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "field": self.field.to_json(), "tolerances": dict(self.tolerances),
               "ensemble": dict(self.ensemble), "output": dict(self.output), "options": copy.deepcopy(self.options)}
        if self.energy is not None:
            out["energy"] = copy.deepcopy(self.energy)
        if self.geo is not None:
            out["geo"] = {"f": self.geo.f.to_json(), "c": self.geo.c}
        return out

    def hash(self) -> str:
        """SHA-256 of the canonical resolved config, output location excluded."""
        d = self.to_json()
        d.pop("output")
        return hashlib.sha256(_dumps(d).encode()).hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def parse_config(source) -> RunConfig:
    """Validate and resolve a config from a path, JSON text, or dict.

    Raises
    ------
    ConfigError
        For malformed JSON, schema violations (with the key path) and
        semantic errors.
    """
    if isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        text = source
        if not source.lstrip().startswith("{"):
            try:
                with open(source, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError("", f"cannot read config: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"malformed JSON: {exc}") from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    # unknown keys first, so a misspelt key is named rather than the key it should have been
    errors = sorted(validator.iter_errors(raw),
                    key=lambda e: (e.validator != "additionalProperties", list(map(str, e.absolute_path))))
    if errors:
        e = errors[0]
        raise ConfigError("/".join(map(str, e.absolute_path)), e.message)
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(raw.get("tolerances", {}))
    ens = {"count": 1, "seed": 0}
    ens.update(raw.get("ensemble", {}))
    out = {"format": "json", "path": ""}
    out.update(raw.get("output", {}))
    try:
        fcfg = FieldConfig(PeriodicFunction.from_json(raw["field"]["b"]),
                           PeriodicFunction.from_json(raw["field"].get("V", {})), raw["field"].get("label", ""))
    except (TypeError, ValueError) as exc:
        raise ConfigError("field", str(exc)) from exc
    geo = None
    if "geo" in raw:
        from .geomodel import GeoConfig

        try:
            geo = GeoConfig(PeriodicFunction.from_json(raw["geo"]["f"]), raw["geo"]["c"])
        except ValueError as exc:
            raise ConfigError("geo", str(exc)) from exc
    energy = raw.get("energy")
    if isinstance(energy, dict) and energy["grid"]["hi"] < energy["grid"]["lo"]:
        raise ConfigError("energy/grid", "hi must not be below lo")
    rc = RunConfig(fcfg, geo, tol, energy, ens, out, raw.get("options", {}))
    cells = max(1, len(rc.energies())) * ens["count"]
    if cells > tol["max_cells"]:
        raise ConfigError("ensemble/count", f"{cells} cells exceed max_cells = {tol['max_cells']}")
    return rc


# -- output ------------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings, complex to [re, im]."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (complex, np.complexfloating)):
        return [_clean(float(obj.real)), _clean(float(obj.imag))]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def header(rc: RunConfig, command: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "tool_version": __version__, "command": command,
            "config_hash": rc.hash(), "tolerances": rc.tolerances, "w_convention": W_CONVENTION}


def render_json(rc: RunConfig, command: str, payload) -> str:
    return _dumps(_clean({"header": header(rc, command), "result": payload})) + "\n"


def render_csv(rc: RunConfig, command: str, columns: Sequence[str], rows) -> str:
    buf = io.StringIO(newline="")
    for k, v in sorted(header(rc, command).items()):
        buf.write(f"# {k}={_dumps(_clean(v))}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


# -- sweep runner ------------------------------------------------------------------

def _controls(tol):
    from .flow import Controls

    return Controls(tau_max=tol["tau_max"], tol=tol["tol"], tol_fp=tol["tol_fp"], fp_window=tol["fp_window"],
                    fp_match=tol["fp_match"], tol_sp=tol["tol_sp"], tol_sc=tol["tol_sc"],
                    collapse_log_r=tol["collapse_log_r"], min_alternations=int(tol["min_alternations"]))


def _row_states(cfg: FieldConfig, E: float, count: int, seed: int, e_index: int):
    from .flow import random_shell_states

    rng = np.random.default_rng(np.random.SeedSequence([seed, e_index]))
    return random_shell_states(cfg, E, count, rng)


def _run_row(task):
    """Classify every initial state of one energy row; the spiral is searched once per row."""
    from .flow import UNDETERMINED, ChannelOutcome, classify
    from .fixedpoints import locate
    from .spiral import outgoing_spiral_or_none

    cfg_json, tol, E, e_index, count, seed, starts = task
    cfg = FieldConfig.from_json(cfg_json)
    ctl = _controls(tol)
    out = []
    if E <= cfg.V.max():
        for k in range(count):
            out.append(((e_index, k), E, None, {"variant": UNDETERMINED,
                                                "diagnostics": {"error": "E does not exceed max V"}}))
        return out
    states = starts if starts is not None else _row_states(cfg, E, count, seed, e_index)
    try:
        records = locate(cfg, E)
        spiral = outgoing_spiral_or_none(cfg, E) if abs(cfg.flux) > 0 else None
    except NumericalFailure as exc:
        records, spiral = None, None
        pre_error = f"{type(exc).__name__}: {exc}"
    else:
        pre_error = None
    for k, s0 in enumerate(states):
        if pre_error is not None:
            res = ChannelOutcome(UNDETERMINED, energy=E, diagnostics={"error": pre_error}).to_json()
        else:
            try:
                res = classify(cfg, E, s0, ctl, spiral=spiral, records=records, find_spiral=False).to_json()
            except NumericalFailure as exc:
                res = ChannelOutcome(UNDETERMINED, energy=E,
                                     diagnostics={"error": f"{type(exc).__name__}: {exc}"}).to_json()
        out.append(((e_index, k), E, (s0.theta, s0.eta, s0.rho), res))
    return out


@dataclass
class SweepResult:
    records: List[dict]
    counts: Dict[str, int]
    failures: int
    metadata: dict = field(default_factory=dict)

    @property
    def success_fraction(self) -> float:
        n = len(self.records)
        return 1.0 if n == 0 else 1.0 - self.failures / n

    def to_json(self) -> dict:
        return {"records": self.records, "counts": dict(sorted(self.counts.items())), "failures": self.failures,
                "success_fraction": self.success_fraction, "metadata": self.metadata}


def worker_count(threads: Optional[int] = None) -> int:
    if threads:
        return max(1, int(threads))
    env = os.environ.get(ENV_WORKERS)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(ENV_WORKERS, f"not an integer: {env!r}") from None
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


def sweep(rc: RunConfig, threads: Optional[int] = None, starts=None) -> SweepResult:
    """Classify all (energy, initial state) cells; rows run concurrently and merge in key order."""
    Es = rc.energies()
    if not Es:
        raise ConfigError("energy", "this command needs an energy")
    count = rc.ensemble["count"] if starts is None else len(starts)
    tasks = [(rc.field.to_json(), rc.tolerances, E, i, count, rc.ensemble["seed"], starts)
             for i, E in enumerate(Es)]
    n = worker_count(threads)
    if n == 1 or len(tasks) == 1:
        rows = [_run_row(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(n, len(tasks))) as ex:
            rows = list(ex.map(_run_row, tasks))
    cells = sorted((c for r in rows for c in r), key=lambda c: c[0])
    records = []
    counts: Counter = Counter()
    failures = 0
    for (ei, k), E, s0, res in cells:
        rec = {"key": [ei, k], "E": E, "outcome": res}
        if s0 is not None:
            rec["state"] = list(s0)
        records.append(rec)
        counts[res["variant"]] += 1
        if "error" in res.get("diagnostics", {}):
            failures += 1
    meta = {"config_hash": rc.hash(), "tool_version": __version__, "w_convention": W_CONVENTION}
    return SweepResult(records, dict(counts), failures, meta)


# -- dispatch ----------------------------------------------------------------------

def _one_energy(rc: RunConfig) -> float:
    Es = rc.energies()
    if len(Es) != 1:
        raise ConfigError("energy", "this command needs a single energy")
    return Es[0]


def _bracket(rc: RunConfig, key: str, default=None) -> Tuple[float, float]:
    br = rc.options.get(key, default)
    if br is None:
        raise ConfigError(f"options/{key}", "required for this command")
    if not br[0] < br[1]:
        raise ConfigError(f"options/{key}", "needs lo < hi")
    return float(br[0]), float(br[1])


def _cmd_fixed_points(rc):
    from .fixedpoints import locate

    rows = []
    for E in rc.energies():
        for r in locate(rc.field, E):
            rows.append((E, r.theta, r.sign, r.rho, r.cls, complex(r.lam).real, complex(r.lam).imag,
                         complex(r.lam_t).real, complex(r.lam_t).imag))
    cols = ["E", "theta", "sign", "rho", "class", "lam_re", "lam_im", "lam_t_re", "lam_t_im"]
    return {"rows": [dict(zip(cols, r)) for r in rows]}, (cols, rows)


def _sweep_payload(res: SweepResult):
    cols = ["e_index", "ic_index", "E", "theta0", "eta0", "rho0", "variant"]
    rows = [(r["key"][0], r["key"][1], r["E"], *(r.get("state") or (math.nan,) * 3), r["outcome"]["variant"])
            for r in res.records]
    return res.to_json(), (cols, rows)


def _cmd_classify(rc, threads):
    _one_energy(rc)
    starts = None
    if "start" in rc.options:
        from .flow import shell_state

        th, psi = rc.options["start"]
        starts = [shell_state(rc.field, rc.energies()[0], float(th), float(psi))]
    return _sweep_payload(sweep(rc, threads, starts))


def _cmd_sweep(rc, threads):
    res = sweep(rc, threads)
    payload, table = _sweep_payload(res)
    return payload, table, (0 if res.success_fraction >= rc.tolerances["success_fraction"] else 3)


def _cmd_spiral_window(rc):
    from .spiral import window

    w = window(rc.field, _bracket(rc, "bracket", (float(rc.field.V.max()), 50.0)))
    return w.to_json(), None


def _cmd_bifurcate(rc):
    from .spiral import bifurcate, window

    w = window(rc.field, _bracket(rc, "bracket", (float(rc.field.V.max()), 50.0)))
    return {"window": w.to_json(), "bifurcation": bifurcate(rc.field, w).to_json()}, None


def _cmd_channel_chart(rc):
    from .channel import build_chart
    from .fixedpoints import SINK, locate

    lo, hi = _bracket(rc, "interval")
    E_mid = 0.5 * (lo + hi)
    recs = locate(rc.field, E_mid)
    if "record" in rc.options:
        i = int(rc.options["record"])
        if i >= len(recs):
            raise ConfigError("options/record", f"only {len(recs)} fixed points at E = {E_mid}")
        rec = recs[i]
    else:
        sinks = [r for r in recs if r.cls == SINK]
        if not sinks:
            raise ConfigError("options/interval", "no stable sink at the interval midpoint")
        rec = sinks[0]
    chart = build_chart(rc.field, rec, (lo, hi))
    return chart.to_json(), (["E", "theta", "eta"], list(chart.csv_rows()))


def _cmd_exceptional(rc):
    from .exceptional import find_heteroclinic

    hets, prof = find_heteroclinic(rc.field, _bracket(rc, "bracket"), level=float(rc.options.get("level", 0.0)))
    return {"heteroclinics": [h.to_json() for h in hets], "scan_energies": prof.energies}, None


def _cmd_construct_exceptional(rc):
    from .exceptional import construct_exceptional_field

    kb = _bracket(rc, "kappa_bracket") if "kappa_bracket" in rc.options else None
    return construct_exceptional_field(rc.field.b, kb).to_json(), None


def _cmd_saddle_order(rc):
    from .exceptional import saddle_order

    return saddle_order(rc.field, _one_energy(rc)).to_json(), None


def _cmd_collapse(rc):
    from .exceptional import collapse_analysis

    taus = tuple(float(t) for t in rc.options.get("transport_taus", ()))
    rep = collapse_analysis(rc.field, _one_energy(rc), n=rc.ensemble["count"], seed=rc.ensemble["seed"],
                            transport_taus=taus)
    return rep.to_json(), None


def _cmd_geodesic(rc):
    from .geomodel import geo_classify, geo_fixed_points, geo_integrate

    if rc.geo is None:
        raise ConfigError("geo", "the geodesic command needs a geo block")
    E = _one_energy(rc)
    fps = geo_fixed_points(rc.geo, E)
    rng = np.random.default_rng(rc.ensemble["seed"])
    starts = [tuple(rc.options["start"])] if "start" in rc.options else \
        [tuple(x) for x in rng.uniform(0.0, 2 * math.pi, (rc.ensemble["count"], 2))]
    outcomes = [geo_classify(rc.geo, E, s, fixed_points=fps).to_json() for s in starts]
    counts = Counter(o["variant"] for o in outcomes)
    payload = {"fixed_points": [f.to_json() for f in fps], "outcomes": outcomes,
               "counts": dict(sorted(counts.items()))}
    table = None
    if "start" in rc.options:
        orb = geo_integrate(rc.geo, E, starts[0], (0.0, float(rc.options.get("tau", 50.0))), n_out=501)
        payload["orbit"] = orb.to_json()
        table = (["tau", "theta", "psi", "a1"], orb.csv_rows())
    return payload, table


def dispatch(command: str, rc: RunConfig, out_dir: Optional[str] = None, threads: Optional[int] = None) -> int:
    """Run ``command``, write its output, and return the exit code.

    Raises
    ------
    ConfigError
        For configuration problems detected at dispatch time.
    """
    simple = {"fixed-points": _cmd_fixed_points, "spiral-window": _cmd_spiral_window,
              "bifurcate": _cmd_bifurcate, "channel-chart": _cmd_channel_chart, "exceptional": _cmd_exceptional,
              "construct-exceptional": _cmd_construct_exceptional, "saddle-order": _cmd_saddle_order,
              "collapse": _cmd_collapse, "geodesic": _cmd_geodesic}
    code = 0
    if command == "sweep":
        payload, table, code = _cmd_sweep(rc, threads)
    elif command == "classify":
        payload, table = _cmd_classify(rc, threads)
    elif command in simple:
        payload, table = simple[command](rc)
    else:
        raise ConfigError("command", f"unknown command {command!r}")
    fmt = rc.output.get("format", "json")
    if fmt == "csv" and table is None:
        raise ConfigError("output/format", f"{command} has no tabular output")
    text = render_csv(rc, command, *table) if fmt == "csv" else render_json(rc, command, payload)
    target = rc.output.get("path") or ""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        target = os.path.join(out_dir, target or f"{command}.{fmt}")
    if target:
        with open(target, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magchan", description="Classical channel analysis for degree-zero fields.")
    p.add_argument("--config", required=True, help="path to the JSON run config")
    p.add_argument("--command", required=True, choices=COMMANDS)
    p.add_argument("--out", default=None, help="output directory (stdout when omitted and no output.path)")
    p.add_argument("--seed", type=int, default=None, help="override ensemble.seed")
    p.add_argument("--threads", type=int, default=None, help=f"worker processes (default: ${ENV_WORKERS} or CPUs)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        rc = parse_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed", "must be non-negative")
            rc.ensemble["seed"] = args.seed
        return dispatch(args.command, rc, args.out, args.threads)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure in stage '{args.command}': {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
