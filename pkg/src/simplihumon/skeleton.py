"""Source skeleton definitions and the 22-joint canonical mapping.

The canonical layout is the AMASS/SMPL body ordering. Every source skeleton
declares its joint names in file order and a mapping from source joint name to
canonical joint name; canonical joints with no source counterpart are
zero-filled and masked invalid.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CANONICAL_JOINTS: tuple[str, ...] = (
    "Pelvis", "L_Hip", "R_Hip", "Spine1", "L_Knee", "R_Knee", "Spine2",
    "L_Ankle", "R_Ankle", "Spine3", "L_Foot", "R_Foot", "Neck", "L_Collar",
    "R_Collar", "Head", "L_Shoulder", "R_Shoulder", "L_Elbow", "R_Elbow",
    "L_Wrist", "R_Wrist",
)

# Joint order as stored in sequence files for each source skeleton.
SOURCE_JOINTS: dict[str, tuple[str, ...]] = {
    "canonical22": CANONICAL_JOINTS,
    "human36m": (
        "Hips", "RightUpLeg", "RightLeg", "RightFoot", "LeftUpLeg", "LeftLeg",
        "LeftFoot", "Spine", "Thorax", "Neck", "Head", "LeftArm", "LeftForeArm",
        "LeftHand", "RightArm", "RightForeArm", "RightHand",
    ),
    "mocap_umpm": (
        "Hips", "LHip", "RHip", "Spine", "LKnee", "RKnee", "LAnkle", "RAnkle",
        "Neck", "Head", "LShoulder", "RShoulder", "LElbow", "RElbow", "LWrist",
    ),
    "tdpw": (
        "Pelvis", "LHip", "RHip", "LKnee", "RKnee", "LFoot", "RFoot",
        "LShoulder", "RShoulder", "LElbow", "RElbow", "LWrist", "RWrist",
    ),
    "traj_point": ("Root",),
}

# Root joint used for normalization when a file does not say otherwise.
DEFAULT_ROOT: dict[str, str] = {
    "canonical22": "Pelvis",
    "human36m": "Hips",
    "mocap_umpm": "Hips",
    "tdpw": "Pelvis",
    "traj_point": "Root",
}

# source joint name -> canonical joint name. Absent entries map nowhere.
# Human3.6M "Hips" and "Thorax" have no canonical counterpart.
CANONICAL_MAPS: dict[str, dict[str, str]] = {
    "canonical22": {name: name for name in CANONICAL_JOINTS},
    "human36m": {
        "RightUpLeg": "R_Hip", "RightLeg": "R_Knee", "RightFoot": "R_Ankle",
        "LeftUpLeg": "L_Hip", "LeftLeg": "L_Knee", "LeftFoot": "L_Ankle",
        "Spine": "Spine1", "Neck": "Neck", "Head": "Head", "Head-top": "Head",
        "LeftArm": "L_Shoulder", "LeftForeArm": "L_Elbow", "LeftHand": "L_Wrist",
        "RightArm": "R_Shoulder", "RightForeArm": "R_Elbow", "RightHand": "R_Wrist",
    },
    "mocap_umpm": {
        "Hips": "Pelvis", "LHip": "L_Hip", "RHip": "R_Hip", "Spine": "Spine1",
        "LKnee": "L_Knee", "RKnee": "R_Knee", "LAnkle": "L_Ankle",
        "RAnkle": "R_Ankle", "Neck": "Neck", "Head": "Head",
        "LShoulder": "L_Shoulder", "RShoulder": "R_Shoulder",
        "LElbow": "L_Elbow", "RElbow": "R_Elbow", "LWrist": "L_Wrist",
    },
    "tdpw": {
        "Pelvis": "Pelvis", "LHip": "L_Hip", "RHip": "R_Hip", "LKnee": "L_Knee",
        "RKnee": "R_Knee", "LFoot": "L_Foot", "RFoot": "R_Foot",
        "LShoulder": "L_Shoulder", "RShoulder": "R_Shoulder",
        "LElbow": "L_Elbow", "RElbow": "R_Elbow", "LWrist": "L_Wrist",
        "RWrist": "R_Wrist",
    },
    "traj_point": {"Root": "Pelvis"},
}

# Sequences with a free joint count (synthetic data) use this id; they have no
# canonical mapping.
GENERIC_SKELETON = "synthetic"
SKELETON_IDS = tuple(SOURCE_JOINTS) + (GENERIC_SKELETON,)


def joint_count(skeleton_id: str) -> int | None:
    """Joint count for a named skeleton, ``None`` for the generic one."""
    if skeleton_id == GENERIC_SKELETON:
        return None
    try:
        return len(SOURCE_JOINTS[skeleton_id])
    except KeyError:
        raise ValueError(f"unknown skeleton_id {skeleton_id!r}") from None


def default_root_index(skeleton_id: str) -> int:
    if skeleton_id == GENERIC_SKELETON:
        return 0
    return SOURCE_JOINTS[skeleton_id].index(DEFAULT_ROOT[skeleton_id])


@dataclass(frozen=True)
class CanonicalSkeleton:
    """Per-source index tables into the canonical layout."""

    joint_names: tuple[str, ...] = CANONICAL_JOINTS
    maps: dict[str, dict[str, str]] = field(default_factory=lambda: CANONICAL_MAPS)

    def slots(self, skeleton_id: str) -> np.ndarray:
        """``slots[j]`` is the canonical index of source joint ``j`` or -1."""
        if skeleton_id not in self.maps or skeleton_id not in SOURCE_JOINTS:
            raise ValueError(f"no canonical mapping for skeleton {skeleton_id!r}")
        mapping = self.maps[skeleton_id]
        out = np.full(len(SOURCE_JOINTS[skeleton_id]), -1, dtype=int)
        for j, name in enumerate(SOURCE_JOINTS[skeleton_id]):
            if name in mapping:
                out[j] = self.joint_names.index(mapping[name])
        taken = out[out >= 0]
        if len(set(taken.tolist())) != len(taken):
            raise ValueError(f"mapping for {skeleton_id!r} is not injective")
        return out

    def mask(self, skeleton_id: str) -> np.ndarray:
        """Boolean validity mask over the canonical joints."""
        valid = np.zeros(len(self.joint_names), dtype=bool)
        s = self.slots(skeleton_id)
        valid[s[s >= 0]] = True
        return valid

    def table(self) -> list[tuple[str, ...]]:
        """Rows ``(canonical, human36m, mocap_umpm, tdpw)``; ``None`` marks a gap.

        Source names that share a canonical slot are joined with " / ".
        """
        rows = []
        for name in self.joint_names:
            row = [name]
            for src in ("human36m", "mocap_umpm", "tdpw"):
                hits = [s for s, c in self.maps[src].items() if c == name]
                row.append(" / ".join(hits) if hits else None)
            rows.append(tuple(row))
        return rows


DEFAULT_SKELETON = CanonicalSkeleton()
