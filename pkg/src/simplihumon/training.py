"""Training loop, evaluation, ablation runner and throughput benchmark."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import MotionSequence, SampleSet, augment, balanced_batches, stack_samples
from .metrics import MetricReport, ape, branch_distances, fde, jpe, ade, mode_utilization, wta_loss
from .model import ModelConfig, ProposalSet, attention_grid, freeze, init_params, model_forward, parameter_count
from .optim import AdamW, clip_grad_norm

log = logging.getLogger(__name__)

# Values the source publication does not state; reported alongside results.
NON_PAPER_DEFAULTS = ("lr", "lr_schedule", "clip_norm", "n_heads", "ffn_mult")

ABLATION_SUITES = ("attention_variant", "norm_variant", "type_embedding", "k_modes", "modality_exchange")
ABLATION_COLUMNS = ("variant", "params", "min_ade", "min_fde", "min_ape", "min_jpe", "max_share")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 3e-4
    betas: tuple[float, float] = (0.95, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 300
    batch_size: int = 64
    seed: int = 0
    clip_norm: float = 1.0
    mirror: bool = False
    yaw: bool = False
    eval_every: int = 0
    stream_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "stream_weights", tuple(float(w) for w in self.stream_weights))
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["stream_weights"] = list(self.stream_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        if "model" in d and not isinstance(d["model"], ModelConfig):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class DatasetSpec:
    """Sequences of one source plus the task-type flag that routes them."""

    dataset_id: str
    sequences: list[MotionSequence]
    task_mode: str | None = None
    past_frames: int | None = None
    future_frames: int | None = None


@dataclass
class TrainResult:
    params: dict
    config: TrainConfig
    log: list[dict]
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    best_min_ade: float | None = None


def prepare_dataset(spec: DatasetSpec, cfg: ModelConfig) -> SampleSet:
    """Normalize a dataset and check that the model can be sliced to fit it."""
    task = spec.task_mode or spec.sequences[0].task_mode
    if cfg.task_mode != "joint" and task != cfg.task_mode:
        raise ValueError(f"dataset {spec.dataset_id!r} has task {task!r}, model is {cfg.task_mode!r}")
    H = spec.past_frames or cfg.past_frames
    F = spec.future_frames or cfg.future_frames
    if F > cfg.future_frames:
        raise ValueError(f"dataset {spec.dataset_id!r}: F={F} exceeds model future_frames={cfg.future_frames}")
    samples = stack_samples(spec.sequences, H, F, task, spec.dataset_id)
    if samples.pose_past is not None:
        if samples.pose_past.shape[2] > cfg.n_joints:
            raise ValueError(
                f"dataset {spec.dataset_id!r} has {samples.pose_past.shape[2]} joints, model supports {cfg.n_joints}"
            )
        if samples.joint_mask is not None:
            samples.pose_past = samples.pose_past * samples.joint_mask[None, None, :, None]
    return samples


def _as_sample_set(data, cfg: ModelConfig, task: str | None = None) -> SampleSet:
    if isinstance(data, SampleSet):
        return data
    if isinstance(data, DatasetSpec):
        return prepare_dataset(data, cfg)
    seqs = list(data)
    return prepare_dataset(DatasetSpec(seqs[0].dataset_id, seqs, task or _default_task(cfg, seqs)), cfg)


def _default_task(cfg: ModelConfig, seqs: Sequence[MotionSequence]) -> str:
    if cfg.task_mode == "joint" and seqs[0].task_mode != "joint":
        return seqs[0].task_mode
    return cfg.task_mode


def forward_samples(params, cfg: ModelConfig, samples: SampleSet, capture_attention: bool = False) -> ProposalSet:
    F = (samples.traj_future if samples.traj_future is not None else samples.pose_future).shape[1]
    return model_forward(
        params,
        cfg,
        samples.traj_past,
        samples.pose_past,
        task=samples.task_mode,
        future_frames=F,
        capture_attention=capture_attention,
    )


def _batch_loss(params, cfg: ModelConfig, batch: SampleSet, weights):
    props = forward_samples(params, cfg, batch)
    return wta_loss(props, batch.traj_future, batch.pose_future, weights=weights, joint_mask=batch.joint_mask)


def train(
    config: TrainConfig,
    datasets: Sequence[DatasetSpec],
    *,
    val: DatasetSpec | Sequence[MotionSequence] | None = None,
    out_dir=None,
) -> TrainResult:
    """Dataset-balanced WTA training with AdamW.

    Each batch comes from one dataset and is routed through the streams its
    task flag selects. With ``out_dir`` the final checkpoint, a JSONL epoch
    log, and (given ``val`` and ``eval_every``) the best-minADE checkpoint are
    written there.
    """
    cfg = config.model
    if not datasets:
        raise ValueError("no training datasets")
    sets = [prepare_dataset(d, cfg) for d in datasets]
    by_id = {s.dataset_id: s for s in sets}
    if len(by_id) != len(sets):
        raise ValueError("dataset ids must be unique")
    val_set = None if val is None else _as_sample_set(val, cfg)
    params = init_params(cfg, config.seed)
    opt = AdamW(params, config.lr, config.betas, config.eps, config.weight_decay)
    schedule = balanced_batches([(s.dataset_id, len(s)) for s in sets], config.batch_size, config.seed, config.epochs)
    aug_rng = np.random.default_rng([config.seed, 1])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("", encoding="utf-8")
    meta = {"train_config": config.to_dict(), "non_paper_defaults": list(NON_PAPER_DEFAULTS)}

    history = []
    best = None
    best_path = None
    for epoch, batches in enumerate(schedule.epochs, start=1):
        t0 = time.perf_counter()
        losses, winners = [], []
        for b, (name, idx) in enumerate(batches):
            batch = augment(by_id[name].subset(idx), aug_rng, config.mirror, config.yaw)
            opt.zero_grad()
            try:
                loss, win = _batch_loss(params, cfg, batch, config.stream_weights)
            except ad.NumericError as err:
                raise TrainingDivergedError(epoch, b, str(err)) from None
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, b, f"loss={value}")
            ad.backward(loss)
            clip_grad_norm(params, config.clip_norm)
            opt.step()
            losses.append(value)
            winners.append(np.asarray(win))
        hist, _ = mode_utilization(np.concatenate(winners), cfg.n_proposals)
        entry = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)),
            "winner_histogram": hist.tolist(),
            "wall_seconds": time.perf_counter() - t0,
        }
        history.append(entry)
        log.debug("epoch %d loss %.6f", epoch, entry["mean_loss"])
        if out is not None:
            with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if config.eval_every and epoch % config.eval_every == 0 and epoch != config.epochs:
            best, best_path = _checkpoint_step(params, config, val_set, out, epoch, meta, best, best_path)

    best, best_path = _checkpoint_step(params, config, val_set, out, config.epochs, meta, best, best_path)
    final = save_checkpoint(out / "checkpoint", params, cfg, meta) if out is not None else None
    return TrainResult(params, config, history, final, best_path, best)


def _checkpoint_step(params, config, val_set, out, epoch, meta, best, best_path):
    if out is not None and config.eval_every:
        save_checkpoint(out / f"checkpoint_epoch{epoch:04d}", params, config.model, meta)
    if val_set is None:
        return best, best_path
    score = evaluate(params, config.model, val_set).min_ade
    if best is None or score < best:
        best = score
        if out is not None:
            best_path = save_checkpoint(out / "best", params, config.model, {**meta, "epoch": epoch, "min_ade": score})
    return best, best_path


# evaluation ---------------------------------------------------------------


def _thread_count(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    return max(1, int(os.environ.get("SIMPLIHUMON_THREADS", "1")))


def predict(params, cfg: ModelConfig, samples: SampleSet, threads: int | None = None, chunk: int = 256) -> ProposalSet:
    """Inference over all samples as numpy arrays, in sample order."""
    frozen = freeze(params)
    starts = list(range(0, len(samples), chunk))

    def run(s):
        with ad.no_grad():
            return forward_samples(frozen, cfg, samples.subset(slice(s, s + chunk))).numpy()

    n = _thread_count(threads)
    if n > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    cat = lambda key: None if getattr(parts[0], key) is None else np.concatenate([getattr(p, key) for p in parts])
    return ProposalSet(traj=cat("traj"), pose=cat("pose"))


def _metric_arrays(samples: SampleSet, props: ProposalSet, stream: str | None):
    """(gt (N,F,M,3), pred (N,K,F,M,3), has_pose, mask, root) for the chosen view."""
    task = samples.task_mode
    view = stream or {"traj_only": "traj", "pose_only": "pose", "joint": "world"}[task]
    if view == "traj":
        if props.traj is None:
            raise ValueError("no trajectory stream to evaluate")
        return samples.traj_future[:, :, None], props.traj[:, :, :, None], False, None, 0
    if props.pose is None:
        raise ValueError("no pose stream to evaluate")
    if view == "pose":
        return samples.pose_future, props.pose, True, samples.joint_mask, samples.root_index
    if view != "world" or props.traj is None:
        raise ValueError(f"unknown evaluation stream {stream!r}")
    gt = samples.traj_future[:, :, None] + samples.pose_future
    pred = props.traj[:, :, :, None] + props.pose
    return gt, pred, True, samples.joint_mask, samples.root_index


def evaluate(
    model,
    cfg: ModelConfig | None = None,
    data=None,
    *,
    k: int | None = None,
    timesteps: Sequence[int] | None = None,
    stream: str | None = None,
    task: str | None = None,
    threads: int | None = None,
    weights=(1.0, 1.0),
) -> MetricReport:
    """Min-over-k ADE/FDE (and APE/JPE with pose) plus the winner histogram.

    ``model`` is a parameter dict or a checkpoint path (then ``cfg`` may be
    ``None``). ``timesteps`` are 1-based frame numbers, default the final one.
    ``stream`` picks "traj", "pose" or "world" metrics; by default the task's
    own view is used (joint tasks use world-frame joints).
    """
    if isinstance(model, (str, os.PathLike)):
        model, cfg, _ = load_checkpoint(model)
    if cfg is None or data is None:
        raise ValueError("evaluate needs a model config and data")
    samples = _as_sample_set(data, cfg, task)
    K = cfg.n_proposals if k is None else int(k)
    if not 1 <= K <= cfg.n_proposals:
        raise ValueError(f"k must lie in [1, {cfg.n_proposals}], got {k}")
    props = predict(model, cfg, samples, threads)
    gt, pred, has_pose, mask, root = _metric_arrays(samples, props, stream)
    pred = pred[:, :K]
    F = gt.shape[1]
    steps = [F] if timesteps is None else [int(t) for t in timesteps]
    bad = [t for t in steps if not 1 <= t <= F]
    if bad:
        raise ValueError(f"timesteps {bad} out of range; valid frames are 1..{F}")

    N = len(samples)
    ades = np.empty(N)
    fdes = {t: np.empty(N) for t in steps}
    apes = {t: np.empty(N) for t in steps} if has_pose else {}
    jpes = {t: np.empty(N) for t in steps} if has_pose else {}
    for i in range(N):
        ades[i] = min(ade(gt[i], p, mask) for p in pred[i])
        for t in steps:
            fdes[t][i] = min(fde(gt[i], p, t - 1, mask) for p in pred[i])
            if has_pose:
                apes[t][i] = min(ape(gt[i], p, t - 1, root, mask) for p in pred[i])
                jpes[t][i] = min(jpe(gt[i], p, t - 1, mask) for p in pred[i])

    sub = ProposalSet(
        traj=None if props.traj is None else props.traj[:, :K],
        pose=None if props.pose is None else props.pose[:, :K],
    )
    with ad.no_grad():
        dist = branch_distances(sub, samples.traj_future, samples.pose_future, weights=weights, joint_mask=samples.joint_mask)
    hist, _ = mode_utilization(np.argmin(dist.data, axis=1), K)
    return MetricReport(
        min_ade=float(ades.mean()),
        min_fde_at={t: float(v.mean()) for t, v in fdes.items()},
        min_ape_at={t: float(v.mean()) for t, v in apes.items()},
        min_jpe_at={t: float(v.mean()) for t, v in jpes.items()},
        winner_histogram=hist.tolist(),
        n_samples=N,
        n_agents=len(set(samples.agent_ids)),
        k=K,
    )


# ablations ----------------------------------------------------------------


@dataclass
class AblationResult:
    suite: str
    rows: list[dict]
    attention: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({c: _fmt(row.get(c)) for c in ABLATION_COLUMNS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _variants(suite: str, model: ModelConfig, k_values) -> list[tuple[str, ModelConfig, str | None]]:
    if suite == "attention_variant":
        return [(v, replace(model, attn_variant=v), None) for v in ("unified", "cross")]
    if suite == "norm_variant":
        return [(v, replace(model, norm_variant=v), None) for v in ("rmsnorm", "layernorm")]
    if suite == "type_embedding":
        return [(f"type_embedding={'on' if v else 'off'}", replace(model, type_embedding=v), None) for v in (True, False)]
    if suite == "k_modes":
        return [(f"K={k}", replace(model, n_proposals=k), None) for k in k_values]
    if suite == "modality_exchange":
        return [
            ("pose_only", replace(model, task_mode="pose_only"), "pose"),
            ("traj_only", replace(model, task_mode="traj_only"), "traj"),
            ("joint", replace(model, task_mode="joint"), None),
        ]
    raise ValueError(f"unknown ablation suite {suite!r}; expected one of {ABLATION_SUITES}")


def _row(name: str, cfg: ModelConfig, rep: MetricReport) -> dict:
    last = max(rep.min_fde_at)
    return {
        "variant": name,
        "params": parameter_count(cfg),
        "min_ade": rep.min_ade,
        "min_fde": rep.min_fde_at[last],
        "min_ape": rep.min_ape_at.get(last),
        "min_jpe": rep.min_jpe_at.get(last),
        "max_share": rep.max_share,
    }


def run_ablation(
    suite: str,
    base: TrainConfig,
    train_data: Sequence[MotionSequence],
    val_data: Sequence[MotionSequence],
    seed: int | None = None,
    *,
    k_values=(1, 6),
) -> AblationResult:
    """Train every variant of ``suite`` from the same seed and data, evaluate
    identically, and tabulate. Ordering between variants is not asserted."""
    seed = base.seed if seed is None else seed
    variants = _variants(suite, base.model, k_values)
    result = AblationResult(suite=suite, rows=[])
    for name, cfg, view in variants:
        task = cfg.task_mode
        tc = replace(base, model=cfg, seed=seed)
        spec = DatasetSpec(train_data[0].dataset_id, list(train_data), task)
        trained = train(tc, [spec]).params
        val = prepare_dataset(DatasetSpec(val_data[0].dataset_id, list(val_data), task), cfg)
        if task == "joint" and suite == "modality_exchange":
            for sv in ("pose", "traj"):
                result.rows.append(_row(f"joint/{sv}", cfg, evaluate(trained, cfg, val, stream=sv)))
        else:
            rep = evaluate(trained, cfg, val, stream=view)
            result.rows.append(_row(name, cfg, rep))
            result.histograms[name] = rep.winner_histogram
        if suite == "attention_variant":
            with ad.no_grad():
                props = forward_samples(freeze(trained), cfg, val.subset(slice(0, 64)), capture_attention=True)
            ctx = val.traj_past.shape[1] if val.traj_past is not None else val.pose_past.shape[1]
            ctx *= 2 if task == "joint" else 1
            result.attention[name] = {"grid": attention_grid(props.attention, cfg, ctx), "context_len": ctx}
        if suite == "type_embedding" and not cfg.type_embedding and task == "joint":
            from .model import build_queries

            with ad.no_grad():
                q = build_queries(freeze(trained), cfg).data
            F = q.shape[0] // 2
            result.checks["query_blocks_identical"] = bool(np.array_equal(q[:F], q[F:]))
    return result


# benchmark ----------------------------------------------------------------


def benchmark(config: TrainConfig, samples: SampleSet, repeats: int = 10) -> dict:
    """Forward-only and train-step throughput (samples/s), mean and sample std."""
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    cfg = config.model
    batch = samples.subset(np.arange(min(config.batch_size, len(samples))))
    params = init_params(cfg, config.seed)
    frozen = freeze(params)
    opt = AdamW(params, config.lr, config.betas, config.eps, config.weight_decay)
    fwd, step = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        with ad.no_grad():
            forward_samples(frozen, cfg, batch)
        fwd.append(len(batch) / (time.perf_counter() - t0))
        t0 = time.perf_counter()
        opt.zero_grad()
        loss, _ = _batch_loss(params, cfg, batch, config.stream_weights)
        ad.backward(loss)
        clip_grad_norm(params, config.clip_norm)
        opt.step()
        step.append(len(batch) / (time.perf_counter() - t0))
    stats = lambda xs: {"mean": float(np.mean(xs)), "std": float(np.std(xs, ddof=1)), "runs": [float(x) for x in xs]}
    return {"batch_size": len(batch), "repeats": repeats, "test_throughput": stats(fwd), "train_throughput": stats(step)}
