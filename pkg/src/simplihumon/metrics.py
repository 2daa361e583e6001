"""Winner-takes-all loss and displacement metrics.

Metric arrays are (F, M, 3); an (F, 3) trajectory is read as a single joint.
Frame indices ``t`` are 0-based. Optional ``mask`` (M,) drops invalid joints
from the joint average.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ProposalSet

SCHEMA_VERSION = 1


def _as_joints(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None, :] if x.ndim == 2 else x


def _pair(gt, pred):
    gt, pred = _as_joints(gt), _as_joints(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    if gt.ndim != 3 or gt.shape[-1] != 3:
        raise ValueError(f"expected (F, M, 3) arrays, got {gt.shape}")
    return gt, pred


def _joint_mean(dist: np.ndarray, mask) -> np.ndarray:
    """Mean over the last (joint) axis, restricted to valid joints."""
    if mask is None:
        return dist.mean(axis=-1)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask leaves no valid joints")
    return dist[..., mask].mean(axis=-1)


def _check_t(t: int, F: int) -> int:
    if not 0 <= t < F:
        raise ValueError(f"timestep {t} out of range; valid frame indices are 0..{F - 1}")
    return t


def ade(gt, pred, mask=None) -> float:
    gt, pred = _pair(gt, pred)
    return float(_joint_mean(np.linalg.norm(gt - pred, axis=-1), mask).mean())


def fde(gt, pred, t: int, mask=None) -> float:
    gt, pred = _pair(gt, pred)
    t = _check_t(t, gt.shape[0])
    return float(_joint_mean(np.linalg.norm(gt[t] - pred[t], axis=-1), mask))


def jpe(gt, pred, t: int, mask=None) -> float:
    """Per-joint error in world coordinates at frame ``t``; same formula as FDE."""
    return fde(gt, pred, t, mask)


def ape(gt, pred, t: int, root_index: int = 0, mask=None) -> float:
    gt, pred = _pair(gt, pred)
    t = _check_t(t, gt.shape[0])
    if not 0 <= root_index < gt.shape[1]:
        raise ValueError(f"root_index {root_index} out of range for {gt.shape[1]} joints")
    g = gt[t] - gt[t, root_index]
    p = pred[t] - pred[t, root_index]
    return float(_joint_mean(np.linalg.norm(g - p, axis=-1), mask))


def min_over_k(metric: Callable, gt, proposals, *args, **kwargs) -> float:
    """Smallest single-proposal value of ``metric`` over the leading K axis."""
    proposals = np.asarray(proposals)
    if proposals.shape[0] < 1:
        raise ValueError("need at least one proposal")
    return min(metric(gt, p, *args, **kwargs) for p in proposals)


def mean_over_agents(per_agent: Sequence[float]) -> float:
    """Multi-person scenes report the average of per-agent minima."""
    if len(per_agent) == 0:
        raise ValueError("no agents")
    return float(np.mean(per_agent))


def mode_utilization(winners, n_proposals: int):
    """Counts of winning indices and the largest share; 1.0 means collapse."""
    winners = np.asarray(winners, dtype=int).reshape(-1)
    if winners.size and (winners.min() < 0 or winners.max() >= n_proposals):
        raise ValueError(f"winner indices must lie in [0, {n_proposals})")
    hist = np.bincount(winners, minlength=n_proposals)
    share = float(hist.max() / winners.size) if winners.size else 0.0
    return hist, share


# winner-takes-all ----------------------------------------------------------


def _residual_sq(pred, gt, stream_ndim: int, weight: float, mask=None) -> Tensor:
    """Squared residual summed per branch -> (B, K)."""
    gt = np.asarray(gt, dtype=np.float64)
    diff = ad._as_tensor(pred) - gt[:, None]
    if mask is not None:
        diff = diff * np.asarray(mask, dtype=np.float64)[:, None]
    sq = ad.square(diff)
    axes = tuple(range(2, 2 + stream_ndim))
    out = ad.sum(sq, axis=axes)
    return out if weight == 1.0 else out * weight


def branch_distances(proposals: ProposalSet, gt_traj=None, gt_pose=None, *, weights=(1.0, 1.0), joint_mask=None) -> Tensor:
    """Euclidean norm of the flattened future residual per branch, (B, K)."""
    has_t, has_p = proposals.traj is not None, proposals.pose is not None
    if has_t != (gt_traj is not None) or has_p != (gt_pose is not None):
        raise ValueError("ground-truth streams do not match proposal streams")
    total = None
    if has_t:
        total = _residual_sq(proposals.traj, gt_traj, 2, float(weights[0]))
    if has_p:
        part = _residual_sq(proposals.pose, gt_pose, 3, float(weights[1]), joint_mask)
        total = part if total is None else total + part
    return ad.sqrt(total)


def wta_loss(proposals: ProposalSet, gt_traj=None, gt_pose=None, *, weights=(1.0, 1.0), joint_mask=None):
    """Batch mean of the best branch's distance, and the winning indices.

    Gradient reaches only the winning branch of each sample. Ties go to the
    lowest index. Unbatched proposals (K, F, ...) give a scalar loss and an
    integer winner.
    """
    if proposals.traj is not None:
        single = proposals.traj.ndim == 3
    else:
        single = proposals.pose.ndim == 4
    if single:
        proposals = ProposalSet(
            traj=None if proposals.traj is None else ad._as_tensor(proposals.traj).reshape((1,) + proposals.traj.shape),
            pose=None if proposals.pose is None else ad._as_tensor(proposals.pose).reshape((1,) + proposals.pose.shape),
        )
        gt_traj = None if gt_traj is None else np.asarray(gt_traj)[None]
        gt_pose = None if gt_pose is None else np.asarray(gt_pose)[None]
    dist = branch_distances(proposals, gt_traj, gt_pose, weights=weights, joint_mask=joint_mask)
    winners = np.argmin(dist.data, axis=1)
    best = dist[np.arange(dist.shape[0]), winners]
    loss = ad.mean(best)
    return loss, (int(winners[0]) if single else winners)


# reporting ------------------------------------------------------------------


@dataclass
class MetricReport:
    """Distances in meters; frame keys are 1-based (frame F is the final one)."""

    min_ade: float
    min_fde_at: dict[int, float]
    min_ape_at: dict[int, float] = field(default_factory=dict)
    min_jpe_at: dict[int, float] = field(default_factory=dict)
    winner_histogram: list[int] = field(default_factory=list)
    n_samples: int = 0
    n_agents: int = 0
    k: int = 1
    notes: list[str] = field(default_factory=list)

    @property
    def max_share(self) -> float:
        total = sum(self.winner_histogram)
        return max(self.winner_histogram) / total if total else 0.0

    def to_dict(self) -> dict:
        keyed = lambda d: {str(k): float(v) for k, v in sorted(d.items())}
        return {
            "schema_version": SCHEMA_VERSION,
            "min_ade": float(self.min_ade),
            "min_fde_at": keyed(self.min_fde_at),
            "min_ape_at": keyed(self.min_ape_at),
            "min_jpe_at": keyed(self.min_jpe_at),
            "winner_histogram": [int(c) for c in self.winner_histogram],
            "max_share": self.max_share,
            "n_samples": int(self.n_samples),
            "n_agents": int(self.n_agents),
            "k": int(self.k),
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported metric report schema {d.get('schema_version')!r}")
        unkey = lambda m: {int(k): float(v) for k, v in m.items()}
        return cls(
            min_ade=d["min_ade"],
            min_fde_at=unkey(d["min_fde_at"]),
            min_ape_at=unkey(d["min_ape_at"]),
            min_jpe_at=unkey(d["min_jpe_at"]),
            winner_histogram=list(d["winner_histogram"]),
            n_samples=d["n_samples"],
            n_agents=d["n_agents"],
            k=d["k"],
            notes=list(d.get("notes", [])),
        )

    def summary(self) -> str:
        """One line; APE/JPE in millimeters, as in pose-forecasting tables."""
        last = max(self.min_fde_at) if self.min_fde_at else None
        parts = [f"minADE={self.min_ade:.4f}"]
        if last is not None:
            parts.append(f"minFDE@{last}={self.min_fde_at[last]:.4f}")
        if self.min_ape_at:
            t = max(self.min_ape_at)
            parts.append(f"APE@{t}={1000 * self.min_ape_at[t]:.1f}mm JPE@{t}={1000 * self.min_jpe_at[t]:.1f}mm")
        parts.append(f"max_share={self.max_share:.3f}")
        return " ".join(parts)
