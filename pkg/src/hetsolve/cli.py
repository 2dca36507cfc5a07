"""Experiment configuration, orchestration and CSV reporting, plus the command line.

Configuration files are line oriented::

    # comment
    [section]
    key = value

Vectors are whitespace separated, booleans are true/false, an empty value
means "unset" for optional keys. Unknown sections and keys are errors.
"""

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .elasticity import Material
from .ensemble import (center_surface_node, default_sample_points, make_source_schedule,
                       run_ensemble, write_frequency_csv)
from .mesh import BoxMeshSpec, write_mesh_text
from .pipeline import phase_timeline, run_pipeline, write_timeline_csv
from .timeloop import BACKENDS, PREDICTORS, RunConfig, StepReport, build_problem, run_single_lane

REQUIRED = object()


class ConfigError(ValueError):
    pass


def _vec(kind, size):
    def parse(text):
        parts = text.split()
        if len(parts) != size:
            raise ValueError(f"expected {size} values, got {len(parts)}")
        return tuple(kind(p) for p in parts)
    parse.__name__ = f"{size} {kind.__name__} values"
    return parse


def _bool(text):
    low = text.lower()
    if low not in ("true", "false"):
        raise ValueError("expected true or false")
    return low == "true"


def _optional_int(text):
    return None if text == "" else int(text)


def _words(text):
    return tuple(text.split())


_bool.__name__ = "bool"
_optional_int.__name__ = "int or empty"
_words.__name__ = "word list"

METHODS = ("crs-cg-singlelane", "ebe-cg-singlelane", "ebe-mcg-singlelane",
           "crs-cg-pipeline", "ebe-cg-pipeline", "ebe-mcg-pipeline")


def _material_keys(density, vs, poisson):
    return {
        "density": (float, density, lambda v: v > 0, "must be > 0"),
        "vs": (float, vs, lambda v: v > 0, "must be > 0"),
        "poisson": (float, poisson, lambda v: 0 <= v < 0.5, "must lie in [0, 0.5)"),
        "alpha": (float, 0.0, lambda v: v >= 0, "must be >= 0"),
        "beta": (float, 1e-3, lambda v: v >= 0, "must be >= 0"),
    }


# section -> key -> (parser, default or REQUIRED, check, message)
SCHEMA = {
    "mesh": {
        "extent": (_vec(float, 3), REQUIRED, lambda v: min(v) > 0, "must be positive"),
        "div": (_vec(int, 3), REQUIRED, lambda v: min(v) >= 1, "must be >= 1"),
        "interface": (float, 0.0, lambda v: v >= 0, "must be >= 0"),
    },
    "bedrock": _material_keys(REQUIRED, REQUIRED, REQUIRED),
    "sediment": _material_keys(REQUIRED, REQUIRED, REQUIRED),
    "run": {
        "dt": (float, 0.005, lambda v: v > 0, "must be > 0"),
        "nt": (int, 200, lambda v: v >= 1, "must be >= 1"),
        "eps": (float, 1e-8, lambda v: 0 < v < 1, "must lie in (0, 1)"),
        "max_iter": (int, 2000, lambda v: v >= 1, "must be >= 1"),
        "predictor": (str, "data-driven", lambda v: v in PREDICTORS, f"must be one of {PREDICTORS}"),
        "r": (int, 4, lambda v: v >= 1, "must be >= 1"),
        "s_min": (int, 8, lambda v: v >= 1, "must be >= 1"),
        "s_max": (int, 32, lambda v: v >= 1, "must be >= 1"),
        "s_fixed": (_optional_int, None, lambda v: v is None or v >= 1, "must be >= 1"),
        "s_timing": (str, "wall", lambda v: v in ("wall", "model"), "must be wall or model"),
        "theta_low": (float, 0.8, lambda v: v > 0, "must be > 0"),
        "theta_high": (float, 1.1, lambda v: v > 0, "must be > 0"),
        "region_size": (int, 512, lambda v: v >= 1, "must be >= 1"),
        "model_speed_ratio": (float, 8.0, lambda v: v > 0, "must be > 0"),
    },
    "experiment": {
        "methods": (_words, ("crs-cg-singlelane", "ebe-mcg-pipeline", "crs-cg-pipeline"),
                    lambda v: len(v) > 0 and all(m in METHODS for m in v),
                    f"must list methods from {METHODS}"),
        "window": (_vec(int, 2), (100, 200), lambda v: 1 <= v[0] <= v[1], "need 1 <= start <= end"),
        "seed": (int, 0, lambda v: v >= 0, "must be >= 0"),
        "n_sources": (int, 20, lambda v: v >= 0, "must be >= 0"),
        "source_steps": (int, 50, lambda v: v >= 1, "must be >= 1"),
        "host_workers": (int, 1, lambda v: v >= 1, "must be >= 1"),
        "output": (str, "out", lambda v: v != "", "must not be empty"),
    },
    "ensemble": {
        "n_cases": (int, 8, lambda v: v >= 1, "must be >= 1"),
        "n_points": (int, 16, lambda v: v >= 1, "must be >= 1"),
        "neighbors": (int, 4, lambda v: v >= 0, "must be >= 0"),
        "segment": (int, 256, lambda v: v >= 256 and not v & (v - 1), "must be a power of two >= 256"),
        "pipeline": (_bool, True, lambda v: True, ""),
    },
}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, tuple):
        return " ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    """Parsed configuration: ``values[section][key]``, every key filled (defaults included)."""

    values: dict
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    def __getitem__(self, key):
        section, name = key.split(".")
        return self.values[section][name]

    @classmethod
    def defaults(cls, **required):
        """A config with every default plus the given ``"section.key": value`` entries."""
        values = {s: {k: d for k, (_, d, _, _) in keys.items()} for s, keys in SCHEMA.items()}
        for key, v in required.items():
            section, name = key.split(".")
            values[section][name] = v
        missing = [f"{s}.{k}" for s, ks in values.items() for k, v in ks.items() if v is REQUIRED]
        if missing:
            raise ConfigError("missing required keys: " + ", ".join(missing))
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self):
        for section, keys in SCHEMA.items():
            for key, (_, _, check, message) in keys.items():
                if not check(self.values[section][key]):
                    where = self.lines.get((section, key))
                    prefix = f"line {where}: " if where else ""
                    raise ConfigError(f"{prefix}key '{key}' in [{section}] {message}, "
                                      f"got {self.values[section][key]!r}")
        run = self.values["run"]
        if run["s_min"] > run["s_max"]:
            raise ConfigError("key 's_min' in [run] must not exceed 's_max'")
        if run["s_fixed"] is not None and run["s_fixed"] > run["s_max"]:
            raise ConfigError("key 's_fixed' in [run] must not exceed 's_max'")
        if run["theta_low"] > run["theta_high"]:
            raise ConfigError("key 'theta_low' in [run] must not exceed 'theta_high'")
        if self.values["mesh"]["interface"] > self.values["mesh"]["extent"][2]:
            raise ConfigError("key 'interface' in [mesh] must not exceed the z extent")
        return self

    def mesh_spec(self):
        m = self.values["mesh"]
        return BoxMeshSpec(*m["extent"], *m["div"], layer_interface=m["interface"])

    def materials(self):
        out = []
        for name in ("bedrock", "sediment"):
            v = self.values[name]
            out.append(Material.from_wave_speed(v["density"], v["vs"], v["poisson"],
                                                v["alpha"], v["beta"]))
        return out

    def run_config(self, **changes):
        run = dict(self.values["run"])
        run["host_workers"] = self.values["experiment"]["host_workers"]
        run["seed"] = self.values["experiment"]["seed"]
        run.update(changes)
        return RunConfig(**run)

    def with_overrides(self, seed=None, host_workers=None, output=None):
        values = {s: dict(ks) for s, ks in self.values.items()}
        for key, v in (("seed", seed), ("host_workers", host_workers), ("output", output)):
            if v is not None:
                values["experiment"][key] = v
        return ExperimentConfig(values, dict(self.lines)).validate()


def parse_config(text):
    """Parse configuration text; errors name the key and line number."""
    seen = {}
    lines = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any section")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key '{key}' in [{section}]")
        if (section, key) in lines:
            raise ConfigError(f"line {lineno}: key '{key}' in [{section}] repeated "
                              f"(first on line {lines[(section, key)]})")
        parser = SCHEMA[section][key][0]
        try:
            seen[(section, key)] = parser(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: key '{key}' in [{section}] expects "
                              f"{parser.__name__}, got {value!r}") from None
        lines[(section, key)] = lineno
    values, missing = {}, []
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (_, default, _, _) in keys.items():
            if (sec, key) in seen:
                values[sec][key] = seen[(sec, key)]
            elif default is REQUIRED:
                missing.append(f"{sec}.{key}")
            else:
                values[sec][key] = default
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing))
    return ExperimentConfig(values, lines).validate()


def serialize_config(config):
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key in keys:
            out.append(f"{key} = {_format(config.values[section][key])}".rstrip())
        out.append("")
    return "\n".join(out)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------- experiments

STEP_COLUMNS = ["method"] + [f for f in StepReport.__dataclass_fields__]
TIMING_COLUMNS = ("predictor_ms", "solver_ms", "step_ms")


def method_parts(label):
    backend, solver, mode = label.split("-")
    name = {"crs": "crs", "ebe": "ebe-multi" if solver == "mcg" else "ebe"}[backend]
    assert name in BACKENDS
    return name, mode == "pipeline"


def case_inputs(config, problem):
    r = config["run.r"]
    return make_source_schedule(problem.mesh, config["experiment.n_sources"],
                                config["experiment.seed"], n_cases=2 * r,
                                max_step=config["experiment.source_steps"])


def run_method(label, config, problem, schedule):
    backend, pipelined = method_parts(label)
    cfg = config.run_config(backend=backend)
    r = cfg.r
    if pipelined:
        return run_pipeline(cfg, problem, schedule.cases[:r], schedule.cases[r:2 * r])
    return run_single_lane(cfg, problem, schedule.cases)


def _value(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_steps_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_COLUMNS)
        for label, rep in rows:
            w.writerow([label] + [_value(getattr(rep, f)) for f in STEP_COLUMNS[1:]])


def read_steps_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize_steps(rows, window, baseline="crs-cg-singlelane", bytes_per_matvec=None):
    """Per-method means over steps ``window`` (inclusive) from raw step rows.

    ``rows`` are dicts as read back from the steps CSV, so every figure here
    can be recomputed from the files on disk.
    """
    lo, hi = window
    per = {}
    for row in rows:
        step = int(row["step"])
        if lo <= step <= hi:
            per.setdefault(row["method"], []).append(row)
    out = []
    for label, rs in per.items():
        iters = np.array([float(r["iterations"]) for r in rs])
        step_ms = np.array([float(r["step_ms"]) for r in rs])
        solver_ms = np.array([float(r["solver_ms"]) for r in rs])
        entry = {"method": label, "window_start": lo, "window_end": hi,
                 "mean_iterations": float(iters.mean()),
                 "mean_ms_per_step_case": float(step_ms.mean()),
                 "matvec_gb_per_s": float("nan"), "speedup": float("nan")}
        if bytes_per_matvec and label in bytes_per_matvec and solver_ms.sum() > 0:
            traffic = bytes_per_matvec[label] * float(np.sum(iters + 2))
            entry["matvec_gb_per_s"] = traffic / (solver_ms.sum() * 1e-3) / 1e9
        out.append(entry)
    base = next((e for e in out if e["method"] == baseline), None)
    for e in out:
        if base is not None and e["mean_ms_per_step_case"] > 0:
            e["speedup"] = base["mean_ms_per_step_case"] / e["mean_ms_per_step_case"]
    return out


SUMMARY_COLUMNS = ["method", "window_start", "window_end", "mean_iterations",
                   "mean_ms_per_step_case", "matvec_gb_per_s", "speedup"]


def write_summary_csv(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for e in summary:
            w.writerow([_value(e[c]) for c in SUMMARY_COLUMNS])


@dataclass
class ComparisonReport:
    summary: list
    window: tuple
    results: dict
    output: str
    failed: dict = field(default_factory=dict)

    def row(self, method):
        return next(e for e in self.summary if e["method"] == method)


def run_experiment(config, problem=None):
    """Run every configured method on the same cases and write CSV artifacts.

    Files: ``steps.csv`` (raw per-case step records), ``summary.csv``,
    ``controller.csv`` and ``timeline_<method>.csv`` for pipelined methods.
    A method that fails leaves ``FAILED_<method>.txt`` and is reported in
    ``ComparisonReport.failed``.
    """
    out = config["experiment.output"]
    os.makedirs(out, exist_ok=True)
    if problem is None:
        problem = build_problem(config.mesh_spec(), config.materials(), config["run.dt"],
                                config["run.region_size"])
    schedule = case_inputs(config, problem)
    rows, results, failed = [], {}, {}
    r = config["run.r"]
    for label in config["experiment.methods"]:
        try:
            res = run_method(label, config, problem, schedule)
        except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
            failed[label] = str(exc)
            with open(os.path.join(out, f"FAILED_{label}.txt"), "w") as fh:
                fh.write(f"{exc}\n")
            continue
        results[label] = res
        rows.extend((label, rep) for rep in res.reports)
        if res.timeline:
            write_timeline_csv(res, os.path.join(out, f"timeline_{label}.csv"))
    write_steps_csv(os.path.join(out, "steps.csv"), rows)
    with open(os.path.join(out, "controller.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "step", "lane", "s", "predictor_ms", "solver_ms"])
        for label, res in results.items():
            for rec in _controller_rows(res):
                w.writerow([label, rec["step"], rec["lane"], rec["s"],
                            _value(rec["predictor_ms"]), _value(rec["solver_ms"])])
    traffic = {label: matvec_bytes(problem, method_parts(label)[0], r)
               for label in config["experiment.methods"]}
    window = tuple(config["experiment.window"])
    summary = summarize_steps(read_steps_csv(os.path.join(out, "steps.csv")), window,
                              bytes_per_matvec=traffic)
    write_summary_csv(os.path.join(out, "summary.csv"), summary)
    return ComparisonReport(summary, window, results, out, failed)


def _controller_rows(result):
    rows = getattr(result, "controller_trace", None)
    if rows is not None:
        return rows
    merged = {}
    for rep in result.reports:
        rec = merged.setdefault(rep.step, {"step": rep.step, "lane": 0, "s": rep.s,
                                           "predictor_ms": 0.0, "solver_ms": 0.0})
        rec["predictor_ms"] += rep.predictor_ms
        rec["solver_ms"] += rep.solver_ms
    return [merged[k] for k in sorted(merged)]


# ---------------------------------------------------------------- kernels


def matvec_bytes(problem, backend, r=1):
    """Analytic bytes moved by one system product, per right-hand side.

    crs:  every 3x3 block (9 values + 1 column index), row pointers, one
          read of x and one write of y.
    ebe:  per element the stored M_e and K_e (2 x 900 values), 10 node
          indices and 2 weights, plus a 30-value gather and a 30-value
          read-modify-write scatter; the r lanes of ebe-multi share the
          element data, so that part is divided by r.
    """
    value = 8
    n = problem.n_dofs
    if backend == "crs":
        A = problem.backend("crs").A
        index = A.col_idx.dtype.itemsize
        return A.n_blocks * (9 * value + index) + (A.n_nodes + 1) * A.row_ptr.dtype.itemsize \
            + 2 * n * value
    ops = problem.ops
    lanes = r if backend == "ebe-multi" else 1
    shared = ops.n_elements * (2 * 900 * value + 10 * ops.node_map.dtype.itemsize + 2 * value)
    per_vector = ops.n_elements * 3 * 30 * value
    return shared / lanes + per_vector


def bench_kernels(problem, r_values=(1, 2, 4, 8), repeats=3, calls=5, seed=0):
    """Seconds per product and effective GB/s for each backend and lane count.

    Each repeat reports the median over ``calls`` products; the table holds
    one row per (backend, r, repeat).
    """
    rng = np.random.default_rng(seed)
    n = problem.n_dofs
    rows = []
    cases = [("crs", 1), ("ebe", 1)] + [("ebe-multi", r) for r in r_values]
    for name, r in cases:
        be = problem.backend(name)
        x = rng.standard_normal((n, r)) if name == "ebe-multi" else rng.standard_normal(n)
        be.apply_A(x)
        for rep in range(repeats):
            times = []
            for _ in range(calls):
                t0 = time.perf_counter()
                be.apply_A(x)
                times.append(time.perf_counter() - t0)
            sec = float(np.median(times))
            nbytes = matvec_bytes(problem, name, r) * r
            rows.append({"backend": name, "r": r, "repeat": rep, "seconds": sec,
                         "seconds_per_vector": sec / r, "bytes": nbytes,
                         "gb_per_s": nbytes / sec / 1e9})
    return rows


def write_rows_csv(path, rows):
    if not rows:
        with open(path, "w") as fh:
            fh.write("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: _value(v) for k, v in row.items()})


# ---------------------------------------------------------------- command line


def _build_parser():
    p = argparse.ArgumentParser(prog="hetsolve", description="Two-lane predictor/solver runs "
                                "for layered-box elastodynamics.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, text in (("mesh", "write the mesh and print its size"),
                       ("bench", "time the system product kernels"),
                       ("run", "run the configured methods and write comparison CSVs"),
                       ("ensemble", "random-impulse ensemble and dominant-frequency map"),
                       ("report", "recompute the summary table from steps.csv")):
        sp = sub.add_parser(verb, help=text)
        if verb == "report":
            sp.add_argument("--output", "-o", required=True, help="directory holding steps.csv")
            sp.add_argument("--window", nargs=2, type=int, default=None)
            sp.add_argument("--baseline", default="crs-cg-singlelane")
            continue
        sp.add_argument("--config", "-c", required=True)
        sp.add_argument("--output", "-o", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--host-workers", type=int, default=None,
                        help="host-pool workers (the accelerator role is always exclusive)")
    return p


def _print_table(rows, columns):
    print(",".join(columns))
    for row in rows:
        print(",".join(_value(row[c]) for c in columns))


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "report":
            rows = read_steps_csv(os.path.join(args.output, "steps.csv"))
            if args.window is None:
                steps = [int(r["step"]) for r in rows]
                window = (min(steps), max(steps)) if steps else (1, 1)
            else:
                window = tuple(args.window)
            _print_table(summarize_steps(rows, window, args.baseline),
                         [c for c in SUMMARY_COLUMNS if c != "matvec_gb_per_s"])
            return 0
        config = load_config(args.config).with_overrides(args.seed, args.host_workers,
                                                         args.output)
        out = config["experiment.output"]
        os.makedirs(out, exist_ok=True)
        if args.verb == "mesh":
            problem = build_problem(config.mesh_spec(), config.materials(), config["run.dt"],
                                    config["run.region_size"])
            path = os.path.join(out, "mesh.txt")
            write_mesh_text(problem.mesh, path)
            print(f"nodes {problem.mesh.n_nodes} elements {problem.mesh.n_elements} "
                  f"dofs {problem.n_dofs} regions {len(problem.regions)} -> {path}")
            return 0
        problem = build_problem(config.mesh_spec(), config.materials(), config["run.dt"],
                                config["run.region_size"])
        if args.verb == "bench":
            rows = bench_kernels(problem)
            write_rows_csv(os.path.join(out, "bench.csv"), rows)
            _print_table(rows, list(rows[0]))
            return 0
        if args.verb == "run":
            report = run_experiment(config, problem)
            _print_table(report.summary, SUMMARY_COLUMNS)
            for label, msg in report.failed.items():
                print(f"FAILED {label}: {msg}", file=sys.stderr)
            return 1 if report.failed else 0
        if args.verb == "ensemble":
            ens = config.values["ensemble"]
            if config["run.nt"] < 2 * ens["segment"]:
                raise ConfigError(f"key 'nt' in [run] must be at least 2 x segment "
                                  f"= {2 * ens['segment']} for the ensemble verb")
            schedule = make_source_schedule(problem.mesh, config["experiment.n_sources"],
                                            config["experiment.seed"], n_cases=ens["n_cases"],
                                            max_step=config["experiment.source_steps"])
            points = np.unique(np.append(default_sample_points(problem.mesh, ens["n_points"]),
                                         center_surface_node(problem.mesh)))
            result = run_ensemble(config.run_config(backend="ebe-multi"), problem, schedule,
                                  points, ens["neighbors"], ens["segment"],
                                  pipeline=ens["pipeline"])
            write_frequency_csv(result, os.path.join(out, "frequencies.csv"))
            write_rows_csv(os.path.join(out, "iterations.csv"), result.iteration_table())
            _print_table([{"x": x, "y": y, "frequency": f, "confidence": c}
                          for (x, y, _), f, c in zip(result.coords, result.frequency,
                                                     result.confidence)],
                         ["x", "y", "frequency", "confidence"])
            return 0
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
