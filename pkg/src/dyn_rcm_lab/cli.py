"""Config-driven experiment runner: ``dyn-rcm-lab <experiment> --config FILE``.

Exit codes: 0 all pass-expected reports pass, 1 a report failed, 2 the
config is invalid, 3 a runtime error.
"""

from __future__ import annotations

import argparse
import copy
import json
import platform
import sys
import time
import traceback
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .environment import EnvironmentSpec, TimeWindow, kind_from_json, sample_environment
from .errors import DomainError
from .kernel import DEFAULT_TOL, backward_collision_sum, transition_kernel
from .lattice import Lattice
from .parallel import default_threads
from .seeding import MASK64, RandomSeed
from .verify import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    TestReport,
    backward_sum_divergence,
    check_censored_stationarity,
    check_markov_type,
    check_moment_bound,
    collision_growth,
    divergence_report,
    growth_report,
    report_table,
)
from .voter import CONSENSUS_HORIZON_8X8, consensus_fraction, duality_check, half_half_field
from .walker import LazyPointProcess, build_path

EXPERIMENTS = ("simulate", "verify", "kernel", "collide", "voter")
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int_pos = {"type": "integer", "minimum": 1}
_vertex = {"type": "array", "items": {"type": "integer"}, "minItems": 1, "maxItems": 2}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


LATTICE_SCHEMA = _obj(
    {"dimension": {"enum": [1, 2]}, "mode": {"enum": ["box", "torus"]}, "side_length": {"type": "integer", "minimum": 0}},
    ("dimension", "mode", "side_length"),
)
ENVIRONMENT_SCHEMA = {
    "oneOf": [
        _obj({"kind": {"const": "static"}, "c": _nonneg}, ("kind",)),
        _obj(
            {"kind": {"const": "dynamical_percolation"}, "p": {"type": "number", "minimum": 0, "maximum": 1}, "mu": _pos},
            ("kind",),
        ),
        _obj(
            {
                "kind": {"const": "exclusion"},
                "density": {"type": "number", "minimum": 0, "maximum": 1},
                "hop_rate": _pos,
                "low": _nonneg,
                "high": _nonneg,
            },
            ("kind",),
        ),
        _obj({"kind": {"const": "deterministic_phase"}, "amplitude": _nonneg, "step": _pos}, ("kind",)),
    ]
}
_check_common = {"replicas": _int_pos, "lattice": LATTICE_SCHEMA}
PARAMS_SCHEMA = _obj(
    {
        "start": _vertex,
        "starts": {"type": "array", "items": _vertex, "minItems": 2, "maxItems": 2},
        "s": _num,
        "t": _num,
        "M": _int_pos,
        "site": _vertex,
        "horizon": _pos,
        "consensus_lattice": LATTICE_SCHEMA,
        "consensus_horizon": _pos,
        "fit_fraction": _pos,
        "checks": _obj(
            {
                "moment_bound": _obj(_check_common | {"p": {"enum": [1, 2]}, "b": _pos}),
                "markov_type": _obj(_check_common | {"t": _pos, "constant": _pos}),
                "censored_stationarity": _obj(
                    _check_common
                    | {
                        "k": _int_pos,
                        "times": {"type": "array", "items": _nonneg, "minItems": 1},
                        "start": {"enum": ["uniform", "origin"]},
                    }
                ),
                "collision_growth": _obj(
                    _check_common
                    | {
                        "horizons": {"type": "array", "items": _pos, "minItems": 2},
                        "starts": {"type": "array", "items": _vertex, "minItems": 2, "maxItems": 2},
                        "fit_fraction": _pos,
                    }
                ),
                "backward_sum_divergence": _obj(
                    _check_common
                    | {
                        "M_list": {"type": "array", "items": _int_pos, "minItems": 1},
                        "fit_range": {"type": "array", "items": _int_pos, "minItems": 2, "maxItems": 2},
                    }
                ),
            }
        ),
    }
)
CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "dyn-rcm-lab experiment config",
    **_obj(
        {
            "experiment": {"enum": list(EXPERIMENTS)},
            "environment": ENVIRONMENT_SCHEMA,
            "lattice": LATTICE_SCHEMA,
            "window": _obj({"start": _num, "end": _num}, ("start", "end")),
            "horizons": {"type": "array", "items": _pos, "minItems": 1},
            "replicas": _int_pos,
            "master_seed": {"type": "integer", "minimum": 0, "maximum": MASK64},
            "output_dir": {"type": "string", "minLength": 1},
            "tolerances": _obj({"kernel": _pos}),
            "params": PARAMS_SCHEMA,
        },
        ("experiment", "environment", "lattice", "replicas", "master_seed"),
    ),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    environment: dict
    lattice: dict
    replicas: int
    master_seed: int
    window: dict | None = None
    horizons: list | None = None
    output_dir: str = "out"
    tolerances: dict = field(default_factory=lambda: {"kernel": DEFAULT_TOL})
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        validate_config(d)
        cfg = cls(**copy.deepcopy(d))
        cfg.spec()  # semantic checks beyond the schema
        return cfg

    def to_dict(self) -> dict:
        out = {
            "experiment": self.experiment,
            "environment": self.environment,
            "lattice": self.lattice,
            "replicas": self.replicas,
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
            "tolerances": self.tolerances,
            "params": self.params,
        }
        if self.window is not None:
            out["window"] = self.window
        if self.horizons is not None:
            out["horizons"] = self.horizons
        return copy.deepcopy(out)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(d)

    @property
    def tol(self) -> float:
        return float(self.tolerances.get("kernel", DEFAULT_TOL))

    @property
    def seed(self) -> RandomSeed:
        return RandomSeed(self.master_seed)

    def lattice_obj(self, override: dict | None = None) -> Lattice:
        d = override or self.lattice
        try:
            return Lattice(d["dimension"], d["mode"], d["side_length"])
        except DomainError as exc:
            raise ConfigError(str(exc)) from None

    def time_window(self) -> TimeWindow:
        w = self.window or {"start": 0.0, "end": 1.0}
        try:
            return TimeWindow(float(w["start"]), float(w["end"]))
        except DomainError as exc:
            raise ConfigError(str(exc)) from None

    def spec(self, lattice: dict | None = None) -> EnvironmentSpec:
        try:
            kind = kind_from_json(self.environment)
        except (DomainError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        return EnvironmentSpec(kind, self.lattice_obj(lattice), self.time_window())


def validate_config(d) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(d), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"  at /{'/'.join(map(str, e.absolute_path))}: {e.message}" for e in errors]
        raise ConfigError("config failed schema validation:\n" + "\n".join(lines))


# -- experiments -------------------------------------------------------------


@dataclass
class RunResult:
    reports: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)  # name -> text


def _exp_simulate(cfg: ExperimentConfig, threads: int) -> RunResult:
    spec = cfg.spec()
    lat = spec.lattice
    start = tuple(cfg.params.get("start", lat.origin))
    s0 = float(cfg.params.get("s", max(spec.window.start, min(0.0, spec.window.end))))
    res = RunResult()
    jumps = []
    for i in range(cfg.replicas):
        seed = cfg.seed.derive(i)
        traj = sample_environment(spec, seed.derive(0))
        path = build_path(LazyPointProcess(traj, seed.derive(1).rng()), (start, s0))
        jumps.append(path.n_jumps)
        if i == 0:
            res.files["environment_0.json"] = json.dumps(traj.to_json(), sort_keys=True)
            res.files["path_0.json"] = json.dumps(path.to_json(), sort_keys=True)
            res.files["path_0.csv"] = "time,vertex\n" + "".join(
                f"{t!r},{' '.join(map(str, lat.vertex(v)))}\n" for t, v in path.trace_rows()
            )
    res.files["jump_counts.csv"] = "replica,jumps\n" + "".join(f"{i},{n}\n" for i, n in enumerate(jumps))
    return res


def _exp_kernel(cfg: ExperimentConfig, threads: int) -> RunResult:
    spec = cfg.spec()
    tol = cfg.tol
    traj = sample_environment(spec, cfg.seed.derive(0))
    s = float(cfg.params.get("s", spec.window.start))
    t = float(cfg.params.get("t", spec.window.end))
    fwd = transition_kernel(traj, s, t, tol)
    bwd = transition_kernel(traj, t, s, tol)
    err = float(np.max(np.abs(fwd.entries - bwd.entries.T)))
    verdict = PASS if err <= 10 * tol else FAIL
    res = RunResult()
    res.reports.append(
        TestReport("detailed_balance", err, 10 * tol, 0.0, 1, verdict, "bound", {"s": s, "t": t, "tol": tol})
    )
    res.files["kernel.csv"] = kernel_csv(fwd.entries)
    if "M" in cfg.params:
        M = int(cfg.params["M"])
        S = backward_collision_sum(traj, traj.lattice.origin, M, tol)
        res.files["backward_sums.csv"] = "m,S_m\n" + "".join(f"{m},{v!r}\n" for m, v in enumerate(S.tolist(), 1))
    return res


def kernel_csv(P: np.ndarray) -> str:
    return "\n".join(",".join(repr(float(x)) for x in row) for row in P) + "\n"


def _exp_collide(cfg: ExperimentConfig, threads: int) -> RunResult:
    spec = cfg.spec()
    lat = spec.lattice
    horizons = cfg.horizons or [10.0, 100.0]
    starts = cfg.params.get("starts", [list(lat.origin), list(lat.origin)])
    frac = float(cfg.params.get("fit_fraction", 1.0))
    curve = collision_growth(spec, starts, horizons, cfg.replicas, cfg.seed.derive(0), threads, fit_fraction=frac)
    res = RunResult()
    res.curves["collision_growth"] = curve
    res.reports.append(growth_report(curve))
    return res


def _exp_voter(cfg: ExperimentConfig, threads: int) -> RunResult:
    spec = cfg.spec()
    lat = spec.lattice
    site = tuple(cfg.params.get("site", lat.origin))
    t = float(cfg.params.get("t", 1.0))
    res = RunResult()
    res.reports.append(duality_check(spec, half_half_field(lat), site, t, cfg.replicas, cfg.seed.derive(0), threads))
    if "consensus_lattice" in cfg.params:
        cspec = cfg.spec(cfg.params["consensus_lattice"])
        horizon = float(cfg.params.get("consensus_horizon", CONSENSUS_HORIZON_8X8))
        res.reports.append(consensus_fraction(cspec, horizon, cfg.replicas, cfg.seed.derive(1), threads=threads))
    return res


def _exp_verify(cfg: ExperimentConfig, threads: int) -> RunResult:
    checks = cfg.params.get("checks")
    if not checks:
        raise ConfigError("verify needs params.checks")
    res = RunResult()
    base = cfg.seed
    for idx, name in enumerate(sorted(checks)):
        c = checks[name]
        reps = int(c.get("replicas", cfg.replicas))
        seed = base.derive(idx)
        if name == "moment_bound":
            spec = cfg.spec(c.get("lattice", {"dimension": 2, "mode": "box", "side_length": 12}))
            res.reports.append(check_moment_bound(spec, int(c.get("p", 2)), float(c.get("b", 1.0)), reps, seed, threads))
        elif name == "markov_type":
            spec = cfg.spec(c.get("lattice", {"dimension": 2, "mode": "box", "side_length": 100}))
            res.reports.append(
                check_markov_type(spec, float(c.get("t", 1.0)), reps, seed, float(c.get("constant", 25.0)), threads)
            )
        elif name == "censored_stationarity":
            spec = cfg.spec(c.get("lattice"))
            res.reports.append(
                check_censored_stationarity(
                    spec, int(c.get("k", 6)), c.get("times", [1.0, 5.0]), reps, seed, c.get("start", "uniform"), threads
                )
            )
        elif name == "collision_growth":
            spec = cfg.spec(c.get("lattice"))
            o = list(spec.lattice.origin)
            curve = collision_growth(
                spec,
                c.get("starts", [o, o]),
                c.get("horizons", [10, 100]),
                reps,
                seed,
                threads,
                fit_fraction=float(c.get("fit_fraction", 1.0)),
            )
            res.curves[name] = curve
            res.reports.append(growth_report(curve))
        elif name == "backward_sum_divergence":
            spec = cfg.spec(c.get("lattice"))
            fr = c.get("fit_range", [10, 200])
            curve = backward_sum_divergence(spec, c.get("M_list", [20, 200]), reps, seed, fr, threads)
            res.curves[name] = curve
            res.reports.append(divergence_report(curve))
    return res


RUNNERS = {
    "simulate": _exp_simulate,
    "verify": _exp_verify,
    "kernel": _exp_kernel,
    "collide": _exp_collide,
    "voter": _exp_voter,
}


def run(cfg: ExperimentConfig, out_dir: Path | str | None = None, threads: int | None = None) -> tuple[int, RunResult]:
    """Run one experiment, write its artifacts and return (exit status, result)."""
    out = Path(out_dir or cfg.output_dir)
    threads = default_threads() if threads is None else threads
    t0 = time.perf_counter()
    result = RUNNERS[cfg.experiment](cfg, threads)
    wall = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rep in result.reports:
        name = f"report_{rep.name}.json"
        (out / name).write_text(rep.dumps() + "\n")
        written.append(name)
    for key, curve in result.curves.items():
        (out / f"curve_{key}.csv").write_text(curve.to_csv())
        (out / f"curve_{key}.json").write_text(json.dumps(curve.to_json(), sort_keys=True, indent=2) + "\n")
    for name, text in result.files.items():
        (out / name).write_text(text)
    if result.reports:
        (out / "reports.txt").write_text(report_table(result.reports) + "\n")
    manifest = {
        "config": cfg.to_dict(),
        "reports": written,
        "verdicts": {r.name: r.verdict for r in result.reports},
        "versions": {
            "dyn_rcm_lab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "jsonschema": metadata.version("jsonschema"),
        },
        "threads": threads,
        "wall_time_seconds": wall,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    failed = any(r.verdict == FAIL for r in result.reports if r.verdict != INCONCLUSIVE)
    return (EXIT_FAIL if failed else EXIT_PASS), result


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dyn-rcm-lab", description=__doc__.splitlines()[0])
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--seed", type=int, help="override master_seed")
    ap.add_argument("--out", help="override output_dir")
    ap.add_argument("--replicas", type=int, help="override replicas")
    ap.add_argument("--threads", type=int, help="worker processes (default: $DYN_RCM_THREADS or 1)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if args.seed is not None:
            raw["master_seed"] = args.seed
        if args.replicas is not None:
            raw["replicas"] = args.replicas
        if args.out is not None:
            raw["output_dir"] = args.out
        raw.setdefault("experiment", args.experiment)
        if raw["experiment"] != args.experiment:
            raise ConfigError(f"config is for {raw['experiment']!r}, not {args.experiment!r}")
        cfg = ExperimentConfig.from_dict(raw)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        status, result = run(cfg, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any module failure maps to exit 3
        traceback.print_exc()
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if result.reports:
        print(report_table(result.reports))
    return status


if __name__ == "__main__":
    sys.exit(main())
