"""Input validation helpers shared by the estimator, the CLI and training."""
from __future__ import annotations

import os
from typing import Iterable, Sequence

import numpy as np

from .data import MotionSequence, read_sequences


def check_sequences(X, *, min_frames: int | None = None, name: str = "X") -> list[MotionSequence]:
    """Accept a sequence file path or an iterable of MotionSequence."""
    if isinstance(X, (str, os.PathLike)):
        X = read_sequences(X)
    elif isinstance(X, MotionSequence):
        X = [X]
    seqs = list(X) if isinstance(X, Iterable) else None
    if not seqs:
        raise ValueError(f"{name} must be a non-empty collection of MotionSequence")
    bad = [type(s).__name__ for s in seqs if not isinstance(s, MotionSequence)]
    if bad:
        raise TypeError(f"{name} must contain MotionSequence objects, found {bad[0]}")
    if min_frames is not None:
        short = [s.agent_id for s in seqs if s.n_frames < min_frames]
        if short:
            raise ValueError(f"{len(short)} sequence(s) shorter than {min_frames} frames, e.g. {short[0]!r}")
    return seqs


def group_by_dataset(seqs: Sequence[MotionSequence]) -> dict[str, list[MotionSequence]]:
    """Split sequences by dataset id, keeping first-appearance order."""
    out: dict[str, list[MotionSequence]] = {}
    for s in seqs:
        out.setdefault(s.dataset_id, []).append(s)
    return out


def check_timesteps(timesteps, horizon: int) -> list[int]:
    """Validate 1-based report frames against the forecast horizon."""
    if timesteps is None:
        return [horizon]
    steps = [int(t) for t in np.atleast_1d(timesteps)]
    bad = [t for t in steps if not 1 <= t <= horizon]
    if bad:
        raise ValueError(f"timesteps {bad} out of range; valid frames are 1..{horizon}")
    return steps


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
