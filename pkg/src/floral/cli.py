"""Config-driven experiment runner.

    floral run --config configs/linear_floral.yaml [key=value ...] [--out DIR]
    floral sweep --config configs/linear_sweep.yaml [--grid method.name=fedavg,floral]
    floral compare runs/*.jsonl [--csv table.csv]

Configs are YAML with a versioned schema; every record in a metrics file
carries the schema version and a hash of the effective config. The default
output directory comes from ``FLORAL_OUTPUT_DIR`` and ``--out`` overrides it.

Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O or metrics format error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import os
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .datasets import gen_linear_task, gen_mlp_task, reduce_data
from .errors import ConfigError, DivergenceError, MetricsFormatError
from .federation import FederatedRun, MethodSpec, TrainConfig

SCHEMA_VERSION = 1
OUTPUT_ENV = "FLORAL_OUTPUT_DIR"

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

FAMILY_DEFAULTS = {
    "linear": dict(K=10, C=2, d_x=16, d_y=16, alpha=4.0),
    "mlp": dict(K=20, C=4, d_x=16, d_y=8, d_h=16, width_mult=2),
}
FAMILY_ONLY = {"alpha": "linear", "d_h": "mlp", "width_mult": "mlp"}

# execution-only settings that do not change results and stay out of the hash
HASH_EXCLUDED = {("train", "workers")}

RECORD_KEYS = ("schema_version", "config_hash", "round", "train_loss", "test_loss",
               "router_accuracy", "tv_mismatch", "params")

SUMMARY_FIELDS = ("run", "family", "data", "keep_fraction", "method", "C", "seed", "rounds",
                  "final_train_loss", "final_test_loss", "best_test_loss",
                  "final_router_accuracy", "base_params", "adaptor_params", "local_params",
                  "config_hash")


@dataclass
class TaskSection:
    """Synthetic task. ``None`` dims take the family default."""

    family: str = "linear"
    K: int | None = None
    C: int | None = None
    d_x: int | None = None
    d_y: int | None = None
    d_h: int | None = None
    r_true: int = 2
    alpha: float | None = None
    width_mult: int | None = None
    seed: int = 0
    keep_fraction: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILY_DEFAULTS:
            raise ConfigError(f"must be one of {sorted(FAMILY_DEFAULTS)}", field="task.family")
        for name, family in FAMILY_ONLY.items():
            if getattr(self, name) is not None and family != self.family:
                raise ConfigError(f"only applies to the {family} family", field=f"task.{name}")
        for name, value in FAMILY_DEFAULTS[self.family].items():
            if getattr(self, name) is None:
                setattr(self, name, value)
        for name in ("K", "C", "d_x", "d_y", "d_h", "r_true", "width_mult"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError("must be >= 1", field=f"task.{name}")
        if self.C > self.K:
            raise ConfigError("cannot exceed task.K", field="task.C")
        if not 0 < self.keep_fraction <= 1:
            raise ConfigError("must lie in (0, 1]", field="task.keep_fraction")

    def build(self):
        if self.family == "linear":
            task = gen_linear_task(self.K, self.C, self.d_x, self.d_y, self.r_true, self.alpha,
                                   self.seed)
        else:
            task = gen_mlp_task(self.K, self.C, self.d_x, self.d_h, self.d_y, self.r_true,
                                self.width_mult, self.seed)
        return task if self.keep_fraction == 1 else reduce_data(task, self.keep_fraction)


@dataclass
class OutputSection:
    dir: str | None = None
    name: str | None = None


@dataclass
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    method: MethodSpec = field(default_factory=MethodSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    output: OutputSection = field(default_factory=OutputSection)
    sweep: dict = field(default_factory=dict)

    @property
    def run_name(self):
        if self.output.name:
            return self.output.name
        data = "full" if self.task.keep_fraction == 1 else "reduced"
        return f"{self.task.family}-{self.method.name}-{data}-s{self.seed}"


SECTIONS = {"task": TaskSection, "method": MethodSpec, "train": TrainConfig,
            "output": OutputSection}


# ---------------------------------------------------------------------------
# parsing and validation
# ---------------------------------------------------------------------------

def _allowed_types(annotation):
    if isinstance(annotation, types.UnionType) or typing.get_origin(annotation) is typing.Union:
        return tuple(typing.get_args(annotation))
    return (annotation,)


def _check_value(name, value, annotation):
    allowed = _allowed_types(annotation)
    if value is None:
        if type(None) in allowed:
            return None
        raise ConfigError("may not be null", field=name)
    if isinstance(value, bool):
        if bool in allowed:
            return value
    elif isinstance(value, int) and int in allowed:
        return value
    elif isinstance(value, (int, float)) and float in allowed:
        return float(value)
    elif isinstance(value, str) and str in allowed:
        return value
    elif isinstance(value, str) and float in allowed:
        try:  # YAML 1.1 reads forms like 1e-3 as strings
            return float(value)
        except ValueError:
            pass
    names = " or ".join(t.__name__ for t in allowed if t is not type(None))
    raise ConfigError(f"expected {names}, got {type(value).__name__} {value!r}", field=name)


def _section(name, cls, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("must be a mapping", field=name)
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError("unknown key", field=f"{name}.{key}")
        values[key] = _check_value(f"{name}.{key}", value, hints[key])
    return values


def _set_dotted(tree, key, value):
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError("is not a section", field=part)
        node = child
    node[parts[-1]] = value


def parse_override(text):
    """``a.b=value`` with ``value`` parsed as a YAML scalar."""
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    return key.strip(), yaml.safe_load(value) if value else None


def config_from_dict(raw, overrides=()):
    """Validate a raw config tree (plus ``key=value`` overrides) into a :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    raw = json.loads(json.dumps(raw))
    for text in overrides:
        _set_dotted(raw, *parse_override(text))
    version = raw.pop("schema_version", None)
    if version is None:
        raise ConfigError("missing", field="schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported version {version!r} (expected {SCHEMA_VERSION})",
                          field="schema_version")
    for key in raw:
        if key not in (*SECTIONS, "seed", "sweep"):
            raise ConfigError("unknown key", field=key)
    task = TaskSection(**_section("task", TaskSection, raw.get("task")))
    method_values = _section("method", MethodSpec, raw.get("method"))
    method_values.setdefault("C", task.C)
    method = MethodSpec(**method_values)
    if method.optimal_router and method.C != task.C:
        raise ConfigError(f"optimal routing needs method.C == task.C ({task.C})",
                          field="method.C")
    train = TrainConfig(**_section("train", TrainConfig, raw.get("train")))
    output = OutputSection(**_section("output", OutputSection, raw.get("output")))
    seed = _check_value("seed", raw.get("seed", 0), int)
    sweep = raw.get("sweep") or {}
    if not isinstance(sweep, dict):
        raise ConfigError("must be a mapping of dotted keys to lists", field="sweep")
    for key, values in sweep.items():
        if not isinstance(values, list) or not values:
            raise ConfigError("must be a nonempty list", field=f"sweep.{key}")
    return RunConfig(task, method, train, seed, output, sweep)


def load_config(path, overrides=()):
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw, overrides)


def effective_config(cfg):
    """The config with every default filled in, as a plain tree."""
    tree = {"schema_version": SCHEMA_VERSION}
    for name in SECTIONS:
        tree[name] = dataclasses.asdict(getattr(cfg, name))
    tree["seed"] = cfg.seed
    if cfg.sweep:
        tree["sweep"] = cfg.sweep
    return tree


def config_hash(cfg):
    """SHA-256 of everything that determines results (not output paths or worker count)."""
    tree = effective_config(cfg)
    tree.pop("output")
    tree.pop("sweep", None)
    for section, key in HASH_EXCLUDED:
        tree[section].pop(key)
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(effective_config(cfg), fh, sort_keys=False)


def expand_sweep(cfg, grid=()):
    """One config per point of the Cartesian grid (config ``sweep`` plus ``--grid`` entries)."""
    axes = dict(cfg.sweep)
    for text in grid:
        key, _, values = text.partition("=")
        if not values:
            raise ConfigError(f"grid entry {text!r} is not of the form key=v1,v2")
        axes[key.strip()] = [yaml.safe_load(v) for v in values.split(",")]
    base = effective_config(cfg)
    base.pop("sweep", None)
    if not axes:
        return [cfg]
    # keys already encoded in the default run name
    named = {"task.family", "method.name", "task.keep_fraction", "seed"}
    out = []
    for point in itertools.product(*axes.values()):
        overrides = [f"{k}={json.dumps(v)}" for k, v in zip(axes, point)]
        run = config_from_dict(base, overrides)
        if "output.name" not in axes:
            skip = named if cfg.output.name is None else set()
            suffix = "".join(f"-{k.rsplit('.', 1)[-1]}{v}" for k, v in zip(axes, point)
                             if k not in skip)
            run.output.name = run.run_name + suffix
        out.append(run)
    names = [r.run_name for r in out]
    if len(set(names)) != len(names):
        raise ConfigError("sweep produces duplicate run names", field="sweep")
    return out


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def resolve_output_dir(flag=None, cfg=None):
    if flag:
        return Path(flag)
    if cfg is not None and cfg.output.dir:
        return Path(cfg.output.dir)
    return Path(os.environ.get(OUTPUT_ENV) or "runs")


def _param_counts(run):
    model = run.server.model
    base = sum(a.size for a in model.base_arrays()) if model.base_trainable else 0
    adaptors = sum(s.num_params for s in model.adaptors)
    local = sum(c.local_adaptor.num_params for c in run.clients if c.local_adaptor is not None)
    return {"base": int(base), "adaptors": int(adaptors), "local": int(local)}


def _record(report, digest, params):
    return {
        "schema_version": SCHEMA_VERSION,
        "config_hash": digest,
        "round": report.round,
        "train_loss": report.train_loss,
        "test_loss": report.test_loss,
        "router_accuracy": report.router_accuracy,
        "tv_mismatch": report.tv_per_cluster,
        "params": params,
    }


def run_config(cfg, out_dir, log=None):
    """Run one config, writing ``<name>.jsonl``, ``<name>.yaml`` and a summary row."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = cfg.run_name
    digest = config_hash(cfg)
    dump_config(cfg, out_dir / f"{name}.yaml")
    run = FederatedRun(cfg.task.build(), cfg.method, cfg.train, cfg.seed)
    params = _param_counts(run)
    metrics_path = out_dir / f"{name}.jsonl"
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        def emit(report):
            fh.write(json.dumps(_record(report, digest, params)) + "\n")
            if log is not None and (report.round % 100 == 0 or report.round == cfg.train.rounds):
                log(f"[{name}] round {report.round:5d}  train {report.train_loss:.4e}  "
                    f"test {report.test_loss:.4e}")
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            reports = run.run(callback=emit)
    row = summary_row(cfg, reports, params, digest)
    update_summary(out_dir / "summary.csv", [row])
    return metrics_path, row


def summary_row(cfg, reports, params, digest):
    test = [r.test_loss for r in reports]
    last = reports[-1] if reports else None
    return {
        "run": cfg.run_name,
        "family": cfg.task.family,
        "data": "full" if cfg.task.keep_fraction == 1 else "reduced",
        "keep_fraction": cfg.task.keep_fraction,
        "method": cfg.method.name,
        "C": cfg.method.C,
        "seed": cfg.seed,
        "rounds": len(reports),
        "final_train_loss": last.train_loss if last else "",
        "final_test_loss": test[-1] if test else "",
        "best_test_loss": min(test) if test else "",
        "final_router_accuracy": "" if last is None or last.router_accuracy is None
        else last.router_accuracy,
        "base_params": params["base"],
        "adaptor_params": params["adaptors"],
        "local_params": params["local"],
        "config_hash": digest,
    }


def update_summary(path, rows):
    """Merge ``rows`` into the summary CSV at ``path``, keyed and ordered by run name."""
    existing = {}
    if path.exists():
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                existing[row["run"]] = row
    for row in rows:
        existing[row["run"]] = {k: row[k] for k in SUMMARY_FIELDS}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for name in sorted(existing):
            writer.writerow(existing[name])


# ---------------------------------------------------------------------------
# comparing metrics files
# ---------------------------------------------------------------------------

def read_metrics(path):
    """Parse a metrics file into a list of records; errors name the offending line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricsFormatError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(rec, dict):
                raise MetricsFormatError("record is not an object", path, lineno)
            missing = [k for k in RECORD_KEYS if k not in rec]
            if missing:
                raise MetricsFormatError(f"missing keys {missing}", path, lineno)
            if records and rec["schema_version"] != records[0]["schema_version"]:
                raise MetricsFormatError("schema version changes within the file", path, lineno)
            records.append(rec)
    if not records:
        raise MetricsFormatError("no records", path)
    return records


def compare(paths):
    """One summary row per metrics file, sorted by final test loss ascending."""
    runs = [(Path(p), read_metrics(p)) for p in paths]
    versions = {p.name: recs[0]["schema_version"] for p, recs in runs}
    if len(set(versions.values())) > 1:
        detail = ", ".join(f"{name}={v}" for name, v in versions.items())
        raise MetricsFormatError(f"schema version mismatch across files ({detail})")
    version = next(iter(versions.values()))
    if version != SCHEMA_VERSION:
        raise MetricsFormatError(f"unsupported schema version {version} "
                                 f"(expected {SCHEMA_VERSION})")
    rows = []
    for path, recs in runs:
        test = [r["test_loss"] for r in recs]
        rows.append({
            "run": path.stem,
            "rounds": len(recs),
            "final_test_loss": test[-1],
            "best_test_loss": min(test),
            "final_train_loss": recs[-1]["train_loss"],
            "router_accuracy": recs[-1]["router_accuracy"],
        })
    rows.sort(key=lambda r: (r["final_test_loss"], r["run"]))
    return rows


def format_table(rows):
    cols = list(rows[0])

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4e}"
        return str(v)

    cells = [[cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def write_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="floral", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one config")
    run.add_argument("--config", required=True)
    run.add_argument("overrides", nargs="*", metavar="key=value")
    run.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
    run.add_argument("--quiet", action="store_true")

    sweep = sub.add_parser("sweep", help="run the Cartesian grid of a config")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("overrides", nargs="*", metavar="key=value")
    sweep.add_argument("--grid", action="append", default=[], metavar="key=v1,v2")
    sweep.add_argument("--out")
    sweep.add_argument("--quiet", action="store_true")

    cmp_ = sub.add_parser("compare", help="tabulate metrics files")
    cmp_.add_argument("files", nargs="+")
    cmp_.add_argument("--csv", help="also write the table as CSV")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    log = None if getattr(args, "quiet", True) else (lambda m: print(m, file=sys.stderr))
    try:
        if args.command == "compare":
            rows = compare(args.files)
            print(format_table(rows))
            if args.csv:
                write_csv(rows, args.csv)
            return EXIT_OK
        cfg = load_config(args.config, args.overrides)
        if args.command == "run" and cfg.sweep:
            raise ConfigError("config defines a sweep; use the sweep command", field="sweep")
        configs = expand_sweep(cfg, args.grid) if args.command == "sweep" else [cfg]
        paths = []
        for run_cfg in configs:
            path, _ = run_config(run_cfg, resolve_output_dir(args.out, run_cfg), log)
            paths.append(path)
        if args.command == "sweep":
            print(format_table(compare(paths)))
        else:
            print(paths[0])
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, MetricsFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
