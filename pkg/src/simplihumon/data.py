"""Motion sequences: normalization, canonical mapping, synthesis, I/O, batching."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .skeleton import (
    DEFAULT_SKELETON,
    GENERIC_SKELETON,
    SKELETON_IDS,
    CanonicalSkeleton,
    joint_count,
)

TASK_MODES = ("pose_only", "traj_only", "joint")
SCENARIOS = ("const_velocity", "sine_gait_walker", "fork_turn")
FILE_KEYS = ("dataset_id", "agent_id", "fps", "skeleton_id", "task_mode", "root_joint_index", "frames")


class SequenceFormatError(ValueError):
    pass


@dataclass
class MotionSequence:
    """One agent's recording: ``frames`` is (T, M, 3), absolute world meters."""

    dataset_id: str
    agent_id: str
    fps: float
    skeleton_id: str
    frames: np.ndarray
    task_mode: str = "joint"
    root_joint_index: int = 0
    joint_mask: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must be (T, M, 3), got {self.frames.shape}")
        T, M, _ = self.frames.shape
        if T < 2:
            raise ValueError(f"sequence needs at least 2 frames, got {T}")
        if self.skeleton_id not in SKELETON_IDS:
            raise ValueError(f"unknown skeleton_id {self.skeleton_id!r}")
        expected = joint_count(self.skeleton_id)
        if expected is not None and M != expected:
            raise ValueError(f"skeleton {self.skeleton_id} has {expected} joints, frames have {M}")
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"task_mode must be one of {TASK_MODES}, got {self.task_mode!r}")
        if self.skeleton_id == "traj_point" and self.task_mode != "traj_only":
            raise ValueError("traj_point sequences only support task_mode 'traj_only'")
        if not 0 <= self.root_joint_index < M:
            raise ValueError(f"root_joint_index {self.root_joint_index} out of range for M={M}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite coordinates")
        if self.joint_mask is not None:
            self.joint_mask = np.asarray(self.joint_mask, dtype=bool)
            if self.joint_mask.shape != (M,):
                raise ValueError(f"joint_mask must have shape ({M},)")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]


@dataclass
class NormalizedSample:
    """Past and future in the frame anchored at the last observed root position.

    Trajectories are root positions minus ``anchor``; poses are per-frame
    root-relative joint positions. Streams the task does not use are ``None``.
    """

    traj_past: np.ndarray | None
    pose_past: np.ndarray | None
    anchor: np.ndarray
    traj_future: np.ndarray | None
    pose_future: np.ndarray | None
    root_index: int = 0
    joint_mask: np.ndarray | None = None


def normalize(seq: MotionSequence, past_frames: int, future_frames: int, task_mode: str | None = None) -> NormalizedSample:
    H, F = past_frames, future_frames
    T = seq.n_frames
    if H < 1 or F < 1 or T < H + F:
        raise ValueError(f"sequence too short: T={T} but past H={H} + future F={F} frames are needed")
    task = task_mode or seq.task_mode
    r = seq.root_joint_index
    window = seq.frames[: H + F]
    root = window[:, r, :]
    anchor = root[H - 1].copy()
    traj = root - anchor
    pose = window - root[:, None, :]
    use_traj = task in ("traj_only", "joint")
    use_pose = task in ("pose_only", "joint")
    return NormalizedSample(
        traj_past=traj[:H] if use_traj else None,
        pose_past=pose[:H] if use_pose else None,
        anchor=anchor,
        traj_future=traj[H:] if use_traj else None,
        pose_future=pose[H:] if use_pose else None,
        root_index=r,
        joint_mask=seq.joint_mask,
    )


def denormalize(traj: np.ndarray | None, pose: np.ndarray | None, anchor, world_pose: bool = False):
    """Undo the anchor shift.

    Returns ``(traj_world, pose_out)``. Poses stay root-relative unless
    ``world_pose`` is set, in which case the world root is added to every joint
    (a missing trajectory is treated as the anchor itself).
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    traj_world = None if traj is None else np.asarray(traj) + anchor
    if pose is None or not world_pose:
        return traj_world, pose
    pose = np.asarray(pose)
    root = anchor if traj_world is None else traj_world
    return traj_world, pose + np.expand_dims(root, -2)


def map_to_canonical(seq: MotionSequence, skeleton: CanonicalSkeleton = DEFAULT_SKELETON):
    """Scatter ``seq`` into the 22-joint layout; returns ``(sequence, mask)``."""
    if seq.skeleton_id == GENERIC_SKELETON:
        raise ValueError("synthetic skeletons have no canonical mapping")
    slots = skeleton.slots(seq.skeleton_id)
    mask = skeleton.mask(seq.skeleton_id)
    out = np.zeros((seq.n_frames, len(skeleton.joint_names), 3))
    src = np.flatnonzero(slots >= 0)
    out[:, slots[src], :] = seq.frames[:, src, :]
    root_slot = slots[seq.root_joint_index]
    mapped = replace(
        seq,
        skeleton_id="canonical22",
        frames=out,
        task_mode="traj_only" if seq.skeleton_id == "traj_point" else seq.task_mode,
        root_joint_index=int(root_slot) if root_slot >= 0 else 0,
        joint_mask=mask,
    )
    return mapped, mask


def pad_2d_to_3d(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.concatenate([points, np.zeros((points.shape[0], 1))], axis=1)


# synthesis ----------------------------------------------------------------


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _body_template(M: int) -> np.ndarray:
    """Deterministic rest pose: root at the origin, others on a helix."""
    j = np.arange(M, dtype=np.float64)
    ang = 2.0 * np.pi * j / max(M, 1)
    tmpl = np.stack([0.2 * np.cos(ang), 0.2 * np.sin(ang), 0.08 * j], axis=1)
    return tmpl - tmpl[0]


def _skeleton_for(M: int) -> str:
    return {1: "traj_point", 22: "canonical22"}.get(M, GENERIC_SKELETON)


def synth_generate(
    scenario: str,
    count: int,
    n_frames: int,
    n_joints: int,
    seed: int,
    *,
    turn_frame: int | None = None,
    speed: float | None = None,
    turn_angle: float = math.pi / 4,
    fps: float = 25.0,
    dataset_id: str | None = None,
) -> list[MotionSequence]:
    """Generate synthetic agents; record ``i`` depends only on ``(seed, i)``.

    ``fork_turn`` walks straight until ``turn_frame`` (default ``n_frames // 2``)
    and then turns left or right by ``turn_angle`` with equal probability; the
    chosen side is the suffix of ``agent_id``.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    if count < 1:
        raise ValueError("count must be >= 1")
    T, M = n_frames, n_joints
    if T < 2 or M < 1:
        raise ValueError("need n_frames >= 2 and n_joints >= 1")
    onset = T // 2 if turn_frame is None else turn_frame
    if scenario == "fork_turn" and not 1 <= onset < T:
        raise ValueError(f"turn_frame must lie in [1, {T - 1}]")
    skeleton = _skeleton_for(M)
    task = "traj_only" if M == 1 else "joint"
    tmpl = _body_template(M)
    t = np.arange(T, dtype=np.float64)
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        heading = rng.uniform(0.0, 2.0 * np.pi)
        v = speed if speed is not None else rng.uniform(0.03, 0.1)
        start = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), 0.0])
        direction = _rot_z(heading) @ np.array([1.0, 0.0, 0.0])
        agent = f"{scenario}-{i:05d}"
        headings = np.full(T, heading)
        if scenario == "fork_turn":
            side = 1.0 if rng.random() < 0.5 else -1.0
            agent += "-left" if side > 0 else "-right"
            turned = _rot_z(side * turn_angle) @ direction
            steps = np.where(t[:, None] < onset, direction, turned) * v
            steps[0] = 0.0
            root = start + np.cumsum(steps, axis=0)
            headings = np.where(t < onset, heading, heading + side * turn_angle)
        else:
            root = start + t[:, None] * v * direction
        frames = np.empty((T, M, 3))
        for f in range(T):
            frames[f] = root[f] + tmpl @ _rot_z(headings[f]).T
        if scenario == "sine_gait_walker" and M > 1:
            phase = rng.uniform(0, 2 * np.pi) + np.linspace(0, np.pi, M)
            freq = rng.uniform(0.15, 0.3)
            amp = 0.05 * np.ones(M)
            amp[0] = 0.0
            swing = amp[None, :] * np.sin(freq * t[:, None] + phase[None, :])
            fwd = _rot_z(heading)[:, 0]
            frames += swing[:, :, None] * fwd[None, None, :]
            frames[:, :, 2] += 0.5 * swing
        out.append(
            MotionSequence(
                dataset_id=dataset_id or scenario,
                agent_id=agent,
                fps=fps,
                skeleton_id=skeleton,
                frames=frames,
                task_mode=task,
                root_joint_index=0,
            )
        )
    return out


# I/O ----------------------------------------------------------------------


def _to_record(seq: MotionSequence) -> dict:
    rec = {
        "dataset_id": seq.dataset_id,
        "agent_id": seq.agent_id,
        "fps": float(seq.fps),
        "skeleton_id": seq.skeleton_id,
        "task_mode": seq.task_mode,
        "root_joint_index": int(seq.root_joint_index),
        "frames": seq.frames.tolist(),
    }
    if seq.joint_mask is not None:
        rec["joint_mask"] = seq.joint_mask.astype(bool).tolist()
    return rec


def write_sequences(path, sequences: Iterable[MotionSequence]) -> int:
    """Write one JSON object per line; returns the record count."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq in sequences:
            fh.write(json.dumps(_to_record(seq), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_sequences(path) -> list[MotionSequence]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                missing = [k for k in FILE_KEYS if k not in rec]
                if missing:
                    raise ValueError(f"missing keys {missing}")
                out.append(
                    MotionSequence(
                        dataset_id=str(rec["dataset_id"]),
                        agent_id=str(rec["agent_id"]),
                        fps=float(rec["fps"]),
                        skeleton_id=rec["skeleton_id"],
                        frames=np.asarray(rec["frames"], dtype=np.float64),
                        task_mode=rec["task_mode"],
                        root_joint_index=int(rec["root_joint_index"]),
                        joint_mask=rec.get("joint_mask"),
                    )
                )
            except (ValueError, TypeError) as err:
                raise SequenceFormatError(f"{path}:{lineno}: {err}") from None
    return out


# batching -----------------------------------------------------------------


@dataclass
class BatchSchedule:
    """Batches per epoch, each drawn from a single dataset."""

    epochs: list[list[tuple[str, np.ndarray]]]
    seed: int
    batches_per_dataset: int

    @property
    def batches(self) -> list[tuple[str, np.ndarray]]:
        return [b for epoch in self.epochs for b in epoch]


class _Pool:
    """Sample indices drawn without replacement, reshuffled on exhaustion."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size)
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        if self.pos + n > self.size:
            self.order = self.rng.permutation(self.size)
            self.pos = 0
        out = self.order[self.pos : self.pos + n]
        self.pos += n
        return out


def balanced_batches(
    datasets: Sequence[tuple[str, int]], batch_size: int, seed: int, epochs: int = 1
) -> BatchSchedule:
    """Dataset-balanced schedule: every dataset contributes the same number of
    batches per epoch (set by the smallest dataset), interleaved at random."""
    if not datasets:
        raise ValueError("no datasets given")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    for name, size in datasets:
        if size < batch_size:
            raise ValueError(f"dataset {name!r} has {size} samples, fewer than batch_size={batch_size}")
    per = min(size // batch_size for _, size in datasets)
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(datasets) + 1)
    pools = [_Pool(size, np.random.default_rng(c)) for (_, size), c in zip(datasets, children)]
    order_rng = np.random.default_rng(children[-1])
    schedule = []
    for _ in range(epochs):
        epoch = [
            (name, pool.take(batch_size))
            for (name, _), pool in zip(datasets, pools)
            for _ in range(per)
        ]
        perm = order_rng.permutation(len(epoch))
        schedule.append([epoch[i] for i in perm])
    return BatchSchedule(epochs=schedule, seed=seed, batches_per_dataset=per)


# stacked samples -----------------------------------------------------------


@dataclass
class SampleSet:
    """Normalized samples of one dataset stacked along a leading axis."""

    dataset_id: str
    task_mode: str
    traj_past: np.ndarray | None
    pose_past: np.ndarray | None
    traj_future: np.ndarray | None
    pose_future: np.ndarray | None
    anchors: np.ndarray
    root_index: int
    joint_mask: np.ndarray | None
    agent_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.anchors.shape[0]

    def subset(self, idx) -> "SampleSet":
        pick = lambda a: None if a is None else a[idx]
        return replace(
            self,
            traj_past=pick(self.traj_past),
            pose_past=pick(self.pose_past),
            traj_future=pick(self.traj_future),
            pose_future=pick(self.pose_future),
            anchors=self.anchors[idx],
            agent_ids=[self.agent_ids[i] for i in np.atleast_1d(np.arange(len(self))[idx])],
        )


def stack_samples(
    sequences: Sequence[MotionSequence],
    past_frames: int,
    future_frames: int,
    task_mode: str | None = None,
    dataset_id: str | None = None,
) -> SampleSet:
    """Normalize every sequence (first ``H + F`` frames) and stack them."""
    if not sequences:
        raise ValueError("no sequences to stack")
    task = task_mode or sequences[0].task_mode
    if task not in TASK_MODES:
        raise ValueError(f"task_mode must be one of {TASK_MODES}, got {task!r}")
    M = sequences[0].n_joints
    root = sequences[0].root_joint_index
    for s in sequences:
        if s.n_joints != M or s.root_joint_index != root:
            raise ValueError("all sequences of a dataset must share joint count and root index")
        if task in ("pose_only", "joint") and s.task_mode == "traj_only":
            raise ValueError(f"sequence {s.agent_id} carries no pose for task {task!r}")
    samples = [normalize(s, past_frames, future_frames, task) for s in sequences]
    stack = lambda name: None if getattr(samples[0], name) is None else np.stack([getattr(x, name) for x in samples])
    mask = sequences[0].joint_mask
    return SampleSet(
        dataset_id=dataset_id or sequences[0].dataset_id,
        task_mode=task,
        traj_past=stack("traj_past"),
        pose_past=stack("pose_past"),
        traj_future=stack("traj_future"),
        pose_future=stack("pose_future"),
        anchors=np.stack([x.anchor for x in samples]),
        root_index=root,
        joint_mask=None if mask is None else np.asarray(mask, dtype=bool),
        agent_ids=[s.agent_id for s in sequences],
    )


def augment(samples: SampleSet, rng: np.random.Generator, mirror: bool = False, yaw: bool = False) -> SampleSet:
    """Random yaw about the vertical axis and/or reflection of the y axis.

    Applied in the anchored frame, so rotation is about the last observed root.
    Mirroring reflects coordinates only; joint labels are not swapped.
    """
    if not (mirror or yaw):
        return samples
    n = len(samples)
    mats = np.repeat(np.eye(3)[None], n, axis=0)
    if yaw:
        mats = np.stack([_rot_z(a) for a in rng.uniform(0, 2 * np.pi, n)])
    if mirror:
        flip = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        mats = mats * np.stack([np.ones(n), flip, np.ones(n)], axis=1)[:, None, :]
    rot = lambda a: None if a is None else np.einsum("n...j,nij->n...i", a, mats)
    return replace(
        samples,
        traj_past=rot(samples.traj_past),
        pose_past=rot(samples.pose_past),
        traj_future=rot(samples.traj_future),
        pose_future=rot(samples.pose_future),
    )
