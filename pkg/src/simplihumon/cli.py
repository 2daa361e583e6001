"""Command line entry point: synth, train, eval, ablate, verify, bench.

Exit codes: 0 success, 1 failed check or aborted run, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .data import SCENARIOS, SequenceFormatError, read_sequences, synth_generate, write_sequences
from .model import ModelConfig
from .training import (
    ABLATION_SUITES,
    NON_PAPER_DEFAULTS,
    DatasetSpec,
    TrainConfig,
    TrainingDivergedError,
    benchmark,
    evaluate,
    prepare_dataset,
    run_ablation,
    train,
)
from .verify import SOFT_BUDGET_SECONDS, run_battery

log = logging.getLogger("simplihumon")

CONFIG_SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# run manifest -----------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str = __version__
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    non_paper_defaults: list[str] = field(default_factory=lambda: list(NON_PAPER_DEFAULTS))

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# config files -----------------------------------------------------------------


@dataclass
class RunConfig:
    train: TrainConfig
    datasets: list[dict]
    val: str | None
    base_dir: Path
    raw: dict

    def dataset_specs(self) -> list[DatasetSpec]:
        specs = []
        for i, d in enumerate(self.datasets):
            seqs = read_sequences(self.resolve(d["path"]))
            specs.append(
                DatasetSpec(
                    dataset_id=d.get("dataset_id") or seqs[0].dataset_id,
                    sequences=seqs,
                    task_mode=d.get("task_mode"),
                    past_frames=d.get("past_frames"),
                    future_frames=d.get("future_frames"),
                )
            )
        return specs

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def input_paths(self) -> list[Path]:
        paths = [self.resolve(d["path"]) for d in self.datasets]
        return paths + ([self.resolve(self.val)] if self.val else [])


def load_config(path, seed: int | None = None) -> RunConfig:
    """Parse a run config; every problem is reported with its field path.

    Layout::

        {"schema_version": 1,
         "model": {...ModelConfig fields...},
         "train": {...TrainConfig fields except model...},
         "datasets": [{"path": "train.jsonl", "task_mode": "joint"}],
         "val": "val.jsonl"}
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if raw.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {CONFIG_SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    unknown = set(raw) - {"schema_version", "model", "train", "datasets", "val"}
    if unknown:
        raise ConfigError(f"unknown top-level fields: {sorted(unknown)}")
    try:
        model = ModelConfig.from_dict(raw.get("model", {}))
    except (TypeError, ValueError) as err:
        raise ConfigError(f"model: {err}") from None
    train_fields = dict(raw.get("train", {}))
    if seed is not None:
        train_fields["seed"] = seed
    try:
        tc = TrainConfig.from_dict({**train_fields, "model": model})
    except (TypeError, ValueError) as err:
        raise ConfigError(f"train: {err}") from None
    datasets = raw.get("datasets", [])
    if not isinstance(datasets, list) or not datasets:
        raise ConfigError("datasets: need a non-empty list")
    for i, d in enumerate(datasets):
        if not isinstance(d, dict) or "path" not in d:
            raise ConfigError(f"datasets[{i}].path: missing")
        extra = set(d) - {"path", "dataset_id", "task_mode", "past_frames", "future_frames"}
        if extra:
            raise ConfigError(f"datasets[{i}]: unknown fields {sorted(extra)}")
        if d.get("task_mode") not in (None, "joint", "traj_only", "pose_only"):
            raise ConfigError(f"datasets[{i}].task_mode: invalid value {d['task_mode']!r}")
    return RunConfig(tc, datasets, raw.get("val"), path.parent, raw)


# commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.count < 1:
        raise ConfigError("count must be >= 1")
    seqs = synth_generate(
        args.scenario, args.count, args.frames, args.joints, args.seed, turn_frame=args.turn_frame, dataset_id=args.dataset_id
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_sequences(out, seqs)
    cfg = {k: getattr(args, k) for k in ("scenario", "count", "frames", "joints", "turn_frame", "dataset_id")}
    RunManifest("synth", cfg, args.seed, outputs=[str(out)]).write(Path(str(out) + ".manifest.json"))
    print(f"wrote {n} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = load_config(args.config, args.seed)
    out = Path(args.out)
    manifest = RunManifest("train", rc.train.to_dict(), rc.train.seed)
    for p in rc.input_paths():
        manifest.add_input(p)
    val = read_sequences(rc.resolve(rc.val)) if rc.val else None
    result = train(rc.train, rc.dataset_specs(), val=val, out_dir=out)
    manifest.outputs = sorted(str(p.relative_to(out)) for p in out.iterdir() if p.name != "manifest.json")
    manifest.write(out / "manifest.json")
    last = result.log[-1]
    print(f"trained {len(result.log)} epochs, final mean loss {last['mean_loss']:.6f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def _parse_timesteps(text):
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--timesteps: expected comma-separated integers, got {text!r}") from None


def cmd_eval(args) -> int:
    params, cfg, meta = load_checkpoint(args.checkpoint)
    seqs = read_sequences(args.data)
    task = args.task
    if task is None:
        task = cfg.task_mode if cfg.task_mode != "joint" else seqs[0].task_mode
    samples = prepare_dataset(DatasetSpec(seqs[0].dataset_id, seqs, task), cfg)
    report = evaluate(params, cfg, samples, k=args.k, timesteps=_parse_timesteps(args.timesteps), stream=args.stream)
    if meta.get("train_config"):
        report.notes.append(
            "lr, lr schedule and gradient clipping are implementation defaults, not published values"
        )
    out = Path(args.out)
    _write_json(out / "metrics.json", report.to_dict())
    manifest = RunManifest(
        "eval", {"k": report.k, "timesteps": sorted(report.min_fde_at), "task": task, "model": cfg.to_dict()}, None
    )
    manifest.add_input(Path(args.checkpoint).with_suffix(".json"))
    manifest.add_input(Path(args.checkpoint).with_suffix(".bin"))
    manifest.add_input(args.data)
    manifest.outputs = ["metrics.json"]
    manifest.write(out / "manifest.json")
    print(report.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = load_config(args.config, args.seed)
    if not rc.val:
        raise ConfigError("val: the ablation config needs a validation file")
    train_seqs = [s for spec in rc.dataset_specs() for s in spec.sequences]
    val_seqs = read_sequences(rc.resolve(rc.val))
    res = run_ablation(args.suite, rc.train, train_seqs, val_seqs, seed=rc.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "ablation.csv")
    outputs = ["ablation.csv"]
    for name, grid in res.attention.items():
        fname = f"attention_{name}.json"
        g = np.asarray(grid["grid"])
        _write_json(
            out / fname,
            {
                "variant": name,
                "layer": 1,
                "context_rows": [0, grid["context_len"]],
                "query_rows": [grid["context_len"], int(g.shape[0])],
                "grid": g.tolist(),
            },
        )
        outputs.append(fname)
    if res.histograms:
        _write_json(out / "winner_histograms.json", {"n_val": len(val_seqs), "histograms": res.histograms})
        outputs.append("winner_histograms.json")
    if res.checks:
        _write_json(out / "checks.json", res.checks)
        outputs.append("checks.json")
    manifest = RunManifest("ablate", {"suite": args.suite, **rc.train.to_dict()}, rc.train.seed, outputs=outputs)
    for p in rc.input_paths():
        manifest.add_input(p)
    manifest.write(out / "manifest.json")
    for row in res.rows:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    results = run_battery()
    total = time.perf_counter() - t0
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if total > SOFT_BUDGET_SECONDS:
        print(f"warning: battery took {total:.0f}s, over the {SOFT_BUDGET_SECONDS:.0f}s budget")
    if args.out:
        out = Path(args.out)
        _write_json(out / "verify.json", {"seconds": total, "checks": [asdict(r) for r in results]})
        RunManifest("verify", {}, None, outputs=["verify.json"]).write(out / "manifest.json")
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(results)} checks passed in {total:.1f}s")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.repeats < 2:
        raise ConfigError("repeats must be >= 2")
    rc = load_config(args.config, args.seed)
    specs = rc.dataset_specs()
    if args.data:
        seqs = read_sequences(args.data)
        specs = [DatasetSpec(seqs[0].dataset_id, seqs, rc.datasets[0].get("task_mode"))]
    samples = prepare_dataset(specs[0], rc.train.model)
    report = benchmark(rc.train, samples, args.repeats)
    out = Path(args.out)
    _write_json(out / "bench.json", report)
    manifest = RunManifest("bench", {"repeats": args.repeats, **rc.train.to_dict()}, rc.train.seed, outputs=["bench.json"])
    for p in [args.data] if args.data else rc.input_paths():
        manifest.add_input(p)
    manifest.write(out / "manifest.json")
    for key in ("train_throughput", "test_throughput"):
        s = report[key]
        print(f"{key}: {s['mean']:.1f} ± {s['std']:.1f} samples/s over {args.repeats} runs")
    return EXIT_OK


# argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simplihumon", description="Unified pose and trajectory forecasting")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic sequence file")
    s.add_argument("--scenario", choices=SCENARIOS, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--frames", type=int, default=20, help="frames per sequence (T)")
    s.add_argument("--joints", type=int, default=1, help="joints per frame (M)")
    s.add_argument("--turn-frame", type=int, default=None)
    s.add_argument("--dataset-id", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a JSON run config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a sequence file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--timesteps", default=None, help="comma-separated 1-based frames, default the last")
    s.add_argument("--task", choices=("joint", "traj_only", "pose_only"), default=None)
    s.add_argument("--stream", choices=("traj", "pose", "world"), default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and compare the variants of an ablation suite")
    s.add_argument("--suite", choices=ABLATION_SUITES, required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("verify", help="run the invariant battery")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bench", help="forward and train-step throughput")
    s.add_argument("--config", required=True)
    s.add_argument("--data", default=None)
    s.add_argument("--repeats", type=int, default=10)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDivergedError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    except (ConfigError, SequenceFormatError, FileNotFoundError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
