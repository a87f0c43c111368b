"""Command-line entry point: config parsing, experiment execution, result files.

Configuration is layered: built-in defaults, then a ``key = value`` file,
then the ``MIST_SEED`` environment variable, then command-line flags. Every
config key has a kebab-case flag (``d_percent`` -> ``--d-percent``).

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .backbone import BackboneConfig, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .harness import PROTOCOLS, ArmResult, ExperimentConfig, RunRecord, StreamConfig, prepare, run_experiment
from .mi_objective import MIObjectiveConfig
from .mist import MistConfig, derive_seed
from .oracles import verify_report

log = logging.getLogger("mistcl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 2, 3, 4
SWEEP_PROTOCOLS = ("sweep_k", "sweep_d", "batch_size")
SEED_ENV = "MIST_SEED"
SUMMARY_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Bad configuration input; the message names the offending key."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class RunConfig:
    protocol: str = "compare"
    host: str = "prototype"
    seed: int = 0
    output_dir: str = "runs"
    checkpoint: str = ""
    # pre-adaptation
    k_percent: float = 5.0
    d_percent: float = 90.0
    epochs: int = 20
    lr: float = 1e-4
    mi_batch_size: int = 32
    fisher_variant: str = "accumulated"
    # MI objective
    tau: float = 0.5
    aug_noise_sigma: float = 0.1
    aug_mask_prob: float = 0.1
    normalize_features: bool = True
    # backbone
    hidden_dims: tuple[int, ...] = (256,)
    feature_dim: int = 128
    # stream
    num_tasks: int = 5
    classes_per_task: int = 4
    samples_per_class: int = 100
    test_samples_per_class: int = 50
    input_dim: int = 64
    shift_level: float = 2.0
    pretrain_classes: int = 24
    separation: float = 3.0
    # host and pretraining
    host_epochs: int = 100
    host_lr: float = 0.1
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    pretrain_batch_size: int = 32
    repeats: int = 1
    jobs: int = 1


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _percent(v):
    return 0 <= v <= 100


def _one_of(options):
    def check(v):
        return v in options

    check.options = options
    return check


_RULES: dict[str, tuple[Callable[[Any], bool], str]] = {
    "protocol": (_one_of(PROTOCOLS), f"one of {', '.join(PROTOCOLS)}"),
    "host": (_one_of(("prototype", "linear")), "one of prototype, linear"),
    "seed": (lambda v: 0 <= v < 2**63, "an integer in [0, 2^63)"),
    "k_percent": (_percent, "a percentage in [0, 100]"),
    "d_percent": (_percent, "a percentage in [0, 100]"),
    "epochs": (_non_negative, ">= 0"),
    "lr": (_positive, "> 0"),
    "mi_batch_size": (lambda v: v >= 2, ">= 2"),
    "fisher_variant": (_one_of(("accumulated", "classical")), "one of accumulated, classical"),
    "tau": (_positive, "> 0"),
    "aug_noise_sigma": (_non_negative, ">= 0"),
    "aug_mask_prob": (lambda v: 0 <= v <= 1, "a probability in [0, 1]"),
    "hidden_dims": (lambda v: len(v) > 0 and all(d > 0 for d in v), "a non-empty list of positive integers"),
    "feature_dim": (_positive, ">= 1"),
    "num_tasks": (_positive, ">= 1"),
    "classes_per_task": (_positive, ">= 1"),
    "samples_per_class": (lambda v: v >= 2, ">= 2"),
    "test_samples_per_class": (_positive, ">= 1"),
    "input_dim": (_positive, ">= 1"),
    "shift_level": (_non_negative, ">= 0"),
    "pretrain_classes": (_positive, ">= 1"),
    "separation": (_non_negative, ">= 0"),
    "host_epochs": (_non_negative, ">= 0"),
    "host_lr": (_non_negative, ">= 0"),
    "pretrain_epochs": (_non_negative, ">= 0"),
    "pretrain_lr": (_non_negative, ">= 0"),
    "pretrain_batch_size": (_positive, ">= 1"),
    "repeats": (_positive, ">= 1"),
    "jobs": (_positive, ">= 1"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True, "false": False, "no": False, "off": False, "0": False}


def coerce(key: str, raw: str) -> Any:
    """Parse the string ``raw`` as the declared type of config ``key``."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        if kind == "bool":
            return _BOOL_WORDS[text.lower()]
        if kind.startswith("tuple"):
            return tuple(int(part) for part in text.replace(" ", "").split(",") if part)
        return text
    except (ValueError, KeyError):
        expected = {"int": "integer", "float": "finite number", "bool": "boolean (true/false)"}.get(
            kind, "comma-separated integers" if kind.startswith("tuple") else kind
        )
        raise ConfigError(f"{key}: expected {expected}, got {raw!r}") from None


def validate(cfg: RunConfig) -> RunConfig:
    for key, (ok, expected) in _RULES.items():
        value = getattr(cfg, key)
        if not ok(value):
            raise ConfigError(f"{key}: value {value!r} out of range, expected {expected}")
    return cfg


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = coerce(key, value)
    return values


def parse_config_file(path) -> dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    return parse_config_text(text, str(path))


def build_config(
    path=None, flags: dict[str, Any] | None = None, env: dict[str, str] | None = None
) -> RunConfig:
    """Defaults, then file, then ``MIST_SEED``, then flags."""
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_file(path))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        values["seed"] = coerce("seed", env[SEED_ENV])
    for key, raw in (flags or {}).items():
        values[key] = coerce(key, raw) if isinstance(raw, str) else raw
    return validate(replace(RunConfig(), **values))


def experiment_config(rc: RunConfig) -> ExperimentConfig:
    stream = StreamConfig(
        num_tasks=rc.num_tasks, classes_per_task=rc.classes_per_task, samples_per_class=rc.samples_per_class,
        test_samples_per_class=rc.test_samples_per_class, input_dim=rc.input_dim, shift_level=rc.shift_level,
        pretrain_classes=rc.pretrain_classes, separation=rc.separation,
    )
    mi_cfg = MIObjectiveConfig(rc.tau, rc.aug_noise_sigma, rc.aug_mask_prob, rc.normalize_features)
    mist = MistConfig(
        k_percent=rc.k_percent, d_percent=rc.d_percent, epochs=rc.epochs, lr=rc.lr,
        mi_batch_size=rc.mi_batch_size, mi_cfg=mi_cfg, fisher_variant=rc.fisher_variant, seed=rc.seed,
    )
    backbone = BackboneConfig(rc.input_dim, tuple(rc.hidden_dims), rc.feature_dim, seed=rc.seed)
    return ExperimentConfig(
        protocol=rc.protocol, stream=stream, backbone=backbone, mist=mist, host=rc.host,
        host_epochs=rc.host_epochs, host_lr=rc.host_lr, pretrain_epochs=rc.pretrain_epochs,
        pretrain_lr=rc.pretrain_lr, pretrain_batch_size=rc.pretrain_batch_size, seed=rc.seed,
        repeats=rc.repeats, jobs=rc.jobs,
    )


def config_snapshot(rc: RunConfig) -> dict[str, Any]:
    """Everything that determines results; the output location is not one of them."""
    snap = asdict(rc)
    snap.pop("output_dir")
    snap["hidden_dims"] = list(rc.hidden_dims)
    return snap


# ---------------------------------------------------------------------------
# Results


def build_id() -> str:
    """Git-style blob hash over the package sources, stable for a given build."""
    digest = hashlib.sha1()
    root = resources.files("mistcl")
    for name in sorted(p.name for p in root.iterdir() if p.name.endswith((".py", ".json"))):
        data = (root / name).read_bytes()
        digest.update(f"{name}\0blob {len(data)}\0".encode())
        digest.update(data)
    return digest.hexdigest()


def _finite(x):
    """JSON has no NaN/inf; diverged losses are written as null."""
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, list):
        return [_finite(v) for v in x]
    return x


def _run_entry(r: ArmResult) -> dict[str, Any]:
    entry: dict[str, Any] = {
        "run_id": r.run_id,
        "arm": {"name": r.arm.name, "adapt": r.arm.adapt, "scorer": r.arm.scorer, "loss": r.arm.loss},
        "repeat": r.repeat,
        "seed": r.seed,
        "error": r.error,
        "metrics": None,
        "zero_shot": _finite(list(r.zero_shot)),
        "counters": None,
        "reports": [],
    }
    if r.metrics is not None:
        entry["metrics"] = {"R": r.metrics.R, "A": r.metrics.A, "A_T": r.metrics.A_T, "A_bar": r.metrics.A_bar}
    if r.counters is not None:
        entry["counters"] = {"delta_p": r.counters.delta_p, "update_flops": r.counters.update_flops}
    for t, rep in enumerate(r.reports):
        entry["reports"].append({
            "task": t,
            "scalars_selected": rep.scalars_selected,
            "scalars_updated_per_batch": rep.scalars_updated_per_batch,
            "loss_kind": rep.loss_kind,
            "loss_trace": _finite(list(rep.mi_loss_trace)),
            "parameter_delta_norm": _finite(rep.parameter_delta_norm),
            "batches": rep.batches,
        })
    return entry


def summary_document(record: RunRecord, rc: RunConfig) -> dict[str, Any]:
    timing = {
        "wall_time_s": record.wall_time,
        "runs": {
            r.run_id: {
                "batch_time_ms": r.counters.batch_time_ms if r.counters else None,
                "pre_adapt_s": [rep.wall_time for rep in r.reports],
            }
            for r in record.runs
        },
    }
    return {
        "format_version": SUMMARY_FORMAT_VERSION,
        "tool": {"name": "mistcl", "version": __version__, "build_id": build_id()},
        "protocol": record.config.protocol,
        "seed": rc.seed,
        "config": config_snapshot(rc),
        "pretrain": [
            {"repeat": i, "held_out_accuracy": p["pretrain_accuracy"], "loss_trace": _finite(list(p["pretrain_loss"]))}
            for i, p in enumerate(record.pretrain)
        ],
        "runs": [_run_entry(r) for r in record.runs],
        "aggregate": record.summary(),
        "timing": timing,
    }


def load_schema() -> dict:
    return json.loads(resources.files("mistcl").joinpath("summary.schema.json").read_text())


METRIC_COLUMNS = ("protocol", "run_id", "t", "i", "R_ti", "A_t", "A_bar", "delta_p")
EVENT_FIELDS = ("run_id", "task", "epoch", "batch", "mi_loss", "updated_scalars")


def write_results(record: RunRecord, rc: RunConfig, out_dir) -> dict[str, Path]:
    """Write summary.json, metrics.csv, events.jsonl and zero_shot.csv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("summary.json", "metrics.csv", "events.jsonl", "zero_shot.csv")}
    paths["summary.json"].write_text(json.dumps(summary_document(record, rc), indent=2) + "\n")
    protocol = record.config.protocol
    with paths["metrics.csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in record.runs:
            if r.metrics is None:
                continue
            delta_p = r.counters.delta_p if r.counters else 0.0
            for t, row in enumerate(r.metrics.R, start=1):
                for i, acc in enumerate(row, start=1):
                    w.writerow([protocol, r.run_id, t, i, repr(acc), repr(r.metrics.A[t - 1]),
                                repr(r.metrics.A_bar), repr(delta_p)])
    with paths["events.jsonl"].open("w") as fh:
        for r in record.runs:
            for ev in r.events:
                line = {k: ev[k] for k in EVENT_FIELDS}
                line["mi_loss"] = _finite(line["mi_loss"])
                fh.write(json.dumps(line) + "\n")
    with paths["zero_shot.csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("run_id", "after_task", "zero_shot_accuracy"))
        for r in record.runs:
            for t, acc in enumerate(r.zero_shot):
                w.writerow([r.run_id, t, repr(acc)])
    return paths


def write_failure(out_dir, kind: str, message: str, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "failure.json"
    path.write_text(json.dumps({"status": "failed", "kind": kind, "message": message, **(extra or {})}, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# Commands


def _pretrained_from(rc: RunConfig):
    if not rc.checkpoint:
        return None
    return load_checkpoint(rc.checkpoint)


def execute(rc: RunConfig, out_dir=None) -> int:
    """Run ``rc.protocol`` and write its result files; returns an exit code."""
    out = Path(out_dir or rc.output_dir)
    try:
        record = run_experiment(rc.protocol, experiment_config(rc), pretrained=_pretrained_from(rc))
        write_results(record, rc, out)
    except (CheckpointError, OSError, ValueError) as exc:
        write_failure(out, type(exc).__name__, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    failed = [r for r in record.runs if r.error is not None]
    if failed:
        write_failure(out, "arm_failure", f"{len(failed)} of {len(record.runs)} runs failed",
                      {"runs": [{"run_id": r.run_id, "error": r.error} for r in failed]})
        print(f"error: {len(failed)} runs failed; see {out / 'failure.json'}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, stats in record.summary().items():
        print(f"{name:>16}  A_T={stats['A_T']:6.2f}  A_bar={stats['A_bar']:6.2f}  zero-shot={stats['zero_shot_final']:6.2f}")
    print(f"results written to {out}")
    return EXIT_OK


def cmd_run(rc: RunConfig, args) -> int:
    return execute(rc)


def cmd_sweep(rc: RunConfig, args) -> int:
    protocols = args.protocols.split(",") if args.protocols else list(SWEEP_PROTOCOLS)
    unknown = [p for p in protocols if p not in PROTOCOLS]
    if unknown:
        raise ConfigError(f"protocols: unknown protocol(s) {', '.join(unknown)}")
    status = EXIT_OK
    for protocol in protocols:
        code = execute(replace(rc, protocol=protocol), Path(rc.output_dir) / protocol)
        status = max(status, code)
    return status


def cmd_verify(rc: RunConfig, args) -> int:
    report = verify_report(rc.seed)
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def pretrain_backbone(rc: RunConfig):
    """Pretrain exactly as repeat 0 of ``run`` would, for reuse via ``checkpoint``."""
    cfg = experiment_config(rc)
    _, store, info = prepare(cfg, derive_seed(cfg.seed, 0))
    return store, info


def cmd_pretrain(rc: RunConfig, args) -> int:
    target = Path(args.output or Path(rc.output_dir) / "backbone.ckpt")
    try:
        store, info = pretrain_backbone(rc)
        target.parent.mkdir(parents=True, exist_ok=True)
        ck = save_checkpoint(store, target)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({
        "path": str(target),
        "parameters": store.total_count,
        "held_out_accuracy": info["pretrain_accuracy"],
        "checksum": f"{ck.checksum:016x}",
    }, indent=2))
    return EXIT_OK


def cmd_inspect(rc: RunConfig, args) -> int:
    try:
        ck = read_checkpoint(args.path)
    except (CheckpointError, OSError) as exc:
        print(json.dumps({"path": args.path, "valid": False, "error": type(exc).__name__, "message": str(exc)}, indent=2))
        return EXIT_RUNTIME
    print(json.dumps({
        "path": args.path,
        "valid": True,
        "version": ck.version,
        "checksum": f"{ck.checksum:016x}",
        "parameters": int(sum(a.size for _, a in ck.tensors)),
        "tensors": [
            {"name": n, "shape": list(a.shape), "l2_norm": float(np.linalg.norm(a))} for n, a in ck.tensors
        ],
    }, indent=2))
    return EXIT_OK


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key = value config file")
    group = p.add_argument_group("config keys (override the file)")
    for f in fields(RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=argparse.SUPPRESS, metavar="V")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mistcl", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"mistcl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "run": (cmd_run, "run one protocol and write results"),
        "sweep": (cmd_sweep, "run the k, d and batch-size sweeps, one subdirectory each"),
        "verify": (cmd_verify, "run the analytic oracle suite and print a JSON report"),
        "pretrain": (cmd_pretrain, "pretrain a backbone and save a checkpoint"),
        "inspect-checkpoint": (cmd_inspect, "validate a checkpoint and list its tensors"),
    }
    for name, (fn, helptext) in commands.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        _add_config_flags(p)
        p.set_defaults(func=fn)
        if name == "sweep":
            p.add_argument("--protocols", help=f"comma-separated subset (default {','.join(SWEEP_PROTOCOLS)})")
        elif name == "verify":
            p.add_argument("--report", metavar="FILE", help="also write the JSON report here")
        elif name == "pretrain":
            p.add_argument("--output", metavar="FILE", help="checkpoint path (default OUTPUT_DIR/backbone.ckpt)")
        elif name == "inspect-checkpoint":
            p.add_argument("path")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    flags = {f.name: getattr(args, f.name) for f in fields(RunConfig) if hasattr(args, f.name)}
    try:
        rc = build_config(args.config, flags)
        return args.func(rc, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
