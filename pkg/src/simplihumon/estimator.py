"""Scikit-learn style wrapper around the forecasting model."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import SampleSet
from .metrics import MetricReport
from .model import ModelConfig, ProposalSet
from .training import DatasetSpec, TrainConfig, evaluate, predict, prepare_dataset, train
from .validation import check_sequences, check_timesteps, group_by_dataset


class MotionForecaster(BaseEstimator):
    """Multi-proposal motion forecaster.

    ``fit`` takes MotionSequence objects (or a sequence file path); each
    distinct ``dataset_id`` becomes one balanced-batching pool. ``predict``
    returns world-frame proposals for the first ``past_frames`` of each input.
    """

    def __init__(
        self,
        task_mode="joint",
        past_frames=8,
        future_frames=12,
        n_joints=None,
        n_proposals=6,
        n_layers=2,
        d_model=32,
        n_heads=4,
        ffn_mult=4,
        attn_variant="unified",
        norm_variant="rmsnorm",
        type_embedding=True,
        lr=3e-4,
        weight_decay=1e-4,
        epochs=300,
        batch_size=64,
        clip_norm=1.0,
        mirror=False,
        yaw=False,
        seed=0,
    ):
        self.task_mode = task_mode
        self.past_frames = past_frames
        self.future_frames = future_frames
        self.n_joints = n_joints
        self.n_proposals = n_proposals
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.ffn_mult = ffn_mult
        self.attn_variant = attn_variant
        self.norm_variant = norm_variant
        self.type_embedding = type_embedding
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.mirror = mirror
        self.yaw = yaw
        self.seed = seed

    def _model_config(self, seqs) -> ModelConfig:
        M = self.n_joints if self.n_joints is not None else max(s.n_joints for s in seqs)
        return ModelConfig(
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            ffn_mult=self.ffn_mult,
            past_frames=self.past_frames,
            future_frames=self.future_frames,
            n_joints=M,
            n_proposals=self.n_proposals,
            task_mode=self.task_mode,
            attn_variant=self.attn_variant,
            norm_variant=self.norm_variant,
            type_embedding=self.type_embedding,
        )

    def _spec(self, dataset_id, seqs) -> DatasetSpec:
        task = self.task_mode
        if task == "joint" and seqs[0].task_mode != "joint":
            task = seqs[0].task_mode
        return DatasetSpec(dataset_id, seqs, task)

    def fit(self, X, y=None):
        seqs = check_sequences(X, min_frames=self.past_frames + self.future_frames)
        cfg = self._model_config(seqs)
        tc = TrainConfig(
            model=cfg,
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            clip_norm=self.clip_norm,
            mirror=self.mirror,
            yaw=self.yaw,
            seed=self.seed,
        )
        specs = [self._spec(k, v) for k, v in group_by_dataset(seqs).items()]
        result = train(tc, specs)
        self.config_ = cfg
        self.params_ = result.params
        self.train_log_ = result.log
        self.n_features_in_ = cfg.n_joints
        return self

    def _samples(self, X) -> SampleSet:
        seqs = check_sequences(X, min_frames=self.past_frames + self.future_frames)
        groups = group_by_dataset(seqs)
        if len(groups) > 1:
            raise ValueError("predict/evaluate take sequences from a single dataset at a time")
        (name, group), = groups.items()
        return prepare_dataset(self._spec(name, group), self.config_)

    def predict(self, X) -> ProposalSet:
        """World-frame proposals: traj (N, K, F, 3), pose (N, K, F, M, 3).

        Pose proposals are absolute joint positions when a trajectory is
        predicted and root-relative otherwise.
        """
        check_is_fitted(self, "params_")
        samples = self._samples(X)
        props = predict(self.params_, self.config_, samples)
        a = samples.anchors
        traj = None if props.traj is None else props.traj + a[:, None, None, :]
        pose = props.pose
        if pose is not None and traj is not None:
            pose = pose + traj[:, :, :, None, :]
        return ProposalSet(traj=traj, pose=pose)

    def evaluate(self, X, k=None, timesteps=None, stream=None) -> MetricReport:
        check_is_fitted(self, "params_")
        steps = check_timesteps(timesteps, self.future_frames)
        return evaluate(self.params_, self.config_, self._samples(X), k=k, timesteps=steps, stream=stream)

    def score(self, X, y=None) -> float:
        """Negative min-over-K ADE, so that larger is better."""
        return -self.evaluate(X).min_ade
