from dataclasses import replace

import numpy as np
import pytest

from simplihumon.checkpoint import load_checkpoint
from simplihumon.data import MotionSequence, synth_generate
from simplihumon.model import ModelConfig, init_params, model_forward
from simplihumon.training import (
    DatasetSpec,
    TrainConfig,
    TrainingDivergedError,
    benchmark,
    evaluate,
    prepare_dataset,
    run_ablation,
    train,
)


@pytest.fixture
def walkers():
    return synth_generate("sine_gait_walker", 16, 4, 2, seed=0)


def strip_time(log):
    return [{k: v for k, v in e.items() if k != "wall_seconds"} for e in log]


def test_train_config_validation(tiny_cfg):
    with pytest.raises(ValueError):
        TrainConfig(model=tiny_cfg, lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(model=tiny_cfg, betas=(0.9, 1.0))
    with pytest.raises(ValueError):
        TrainConfig(model=tiny_cfg, epochs=0)
    tc = TrainConfig(model=tiny_cfg, epochs=3)
    assert TrainConfig.from_dict(tc.to_dict()) == tc
    assert TrainConfig().lr == 3e-4 and TrainConfig().weight_decay == 1e-4
    assert TrainConfig().betas == (0.95, 0.999) and TrainConfig().epochs == 300 and TrainConfig().batch_size == 64


def test_log_fields_and_determinism(tiny_cfg, walkers):
    tc = TrainConfig(model=tiny_cfg, epochs=3, batch_size=4, seed=1)
    a = train(tc, [DatasetSpec("w", walkers)])
    b = train(tc, [DatasetSpec("w", walkers)])
    assert set(a.log[0]) == {"epoch", "mean_loss", "winner_histogram", "wall_seconds"}
    assert sum(a.log[0]["winner_histogram"]) == 16
    assert strip_time(a.log) == strip_time(b.log)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_zero_lr_leaves_parameters_and_loss_flat(tiny_cfg, walkers):
    tc = TrainConfig(model=tiny_cfg, epochs=3, batch_size=16, lr=0.0)
    r = train(tc, [DatasetSpec("w", walkers)])
    init = init_params(tiny_cfg, tc.seed)
    for k in init:
        assert np.array_equal(r.params[k].data, init[k].data)
    losses = [e["mean_loss"] for e in r.log]
    assert max(losses) - min(losses) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_coordinates(tiny_cfg):
    seqs = synth_generate("const_velocity", 4, 4, 2, seed=0)
    seqs = [replace(s, frames=s.frames * 1e200) for s in seqs]
    with pytest.raises(TrainingDivergedError, match="epoch 1, batch 0"):
        train(TrainConfig(model=tiny_cfg, epochs=1, batch_size=2), [DatasetSpec("x", seqs)])


def test_mixed_task_training_routes_and_slices():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, past_frames=2, future_frames=3, n_joints=4, n_proposals=2)
    traj = synth_generate("const_velocity", 8, 5, 1, seed=0, dataset_id="ped")
    pose = synth_generate("sine_gait_walker", 8, 4, 3, seed=1, dataset_id="mocap")
    r = train(
        TrainConfig(model=cfg, epochs=2, batch_size=4),
        [DatasetSpec("ped", traj, "traj_only"), DatasetSpec("mocap", pose, "pose_only", future_frames=2)],
    )
    assert len(r.log) == 2 and sum(r.log[0]["winner_histogram"]) == 16
    rep = evaluate(r.params, cfg, DatasetSpec("mocap", pose, "pose_only", future_frames=2))
    assert sorted(rep.min_fde_at) == [2] and rep.min_ape_at


def test_incompatible_dataset_rejected(tiny_cfg):
    single = replace(tiny_cfg, task_mode="traj_only", n_joints=1)
    seqs = synth_generate("sine_gait_walker", 4, 4, 2, seed=0)
    with pytest.raises(ValueError, match="task"):
        prepare_dataset(DatasetSpec("w", seqs, "pose_only"), single)
    wide = synth_generate("sine_gait_walker", 4, 4, 5, seed=0)
    with pytest.raises(ValueError, match="joints"):
        prepare_dataset(DatasetSpec("w", wide), tiny_cfg)


def test_masked_joints_feed_zeros(tiny_cfg):
    seqs = [replace(s, joint_mask=np.array([True, False])) for s in synth_generate("sine_gait_walker", 3, 4, 2, seed=0)]
    s = prepare_dataset(DatasetSpec("w", seqs), tiny_cfg)
    assert np.all(s.pose_past[:, :, 1] == 0)


def test_masked_input_irrelevance():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, past_frames=2, future_frames=2, n_joints=3, n_proposals=2)
    p = init_params(cfg, 0)
    # zero the pose-embed rows that read joint 2
    w = p["pose_embed.0.w"].data
    w[6:9] = 0.0
    rng = np.random.default_rng(0)
    tp, pp = rng.standard_normal((2, 3)), rng.standard_normal((2, 3, 3))
    other = pp.copy()
    other[:, 2] = 123.0
    a, b = model_forward(p, cfg, tp, pp), model_forward(p, cfg, tp, other)
    np.testing.assert_array_equal(a.traj.data, b.traj.data)
    np.testing.assert_array_equal(a.pose.data[..., :2, :], b.pose.data[..., :2, :])


def test_evaluate_protocol(tiny_cfg, walkers):
    params = init_params(tiny_cfg, 0)
    one = evaluate(params, tiny_cfg, walkers, k=1)
    assert one.winner_histogram == [16] and one.k == 1
    two = evaluate(params, tiny_cfg, walkers)
    assert two.min_ade <= one.min_ade
    assert evaluate(params, tiny_cfg, walkers).to_json() == two.to_json()
    assert evaluate(params, tiny_cfg, walkers, threads=3).to_json() == two.to_json()
    with pytest.raises(ValueError, match="1..2"):
        evaluate(params, tiny_cfg, walkers, timesteps=[3])
    with pytest.raises(ValueError):
        evaluate(params, tiny_cfg, walkers, k=3)
    assert two.n_agents == 16 and two.n_samples == 16


def test_evaluate_thread_env(tiny_cfg, walkers, monkeypatch):
    params = init_params(tiny_cfg, 0)
    base = evaluate(params, tiny_cfg, walkers).to_json()
    monkeypatch.setenv("SIMPLIHUMON_THREADS", "4")
    assert evaluate(params, tiny_cfg, walkers).to_json() == base


def test_checkpoint_cadence(tmp_path, tiny_cfg, walkers):
    tc = TrainConfig(model=tiny_cfg, epochs=4, batch_size=8, eval_every=2, lr=1e-2)
    r = train(tc, [DatasetSpec("w", walkers)], val=walkers, out_dir=tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"checkpoint.json", "checkpoint.bin", "train_log.jsonl", "best.json", "checkpoint_epoch0002.json"} <= names
    assert len((tmp_path / "train_log.jsonl").read_text().splitlines()) == 4
    _, _, meta = load_checkpoint(tmp_path / "best.json")
    assert meta["min_ade"] == pytest.approx(r.best_min_ade)
    reloaded = evaluate(tmp_path / "checkpoint.json", None, walkers)
    assert reloaded.to_json() == evaluate(r.params, tiny_cfg, walkers).to_json()


def test_ablation_suites(tiny_cfg):
    data = synth_generate("fork_turn", 16, 4, 2, seed=0, turn_frame=2)
    val = synth_generate("fork_turn", 8, 4, 2, seed=1, turn_frame=2)
    base = TrainConfig(model=tiny_cfg, epochs=1, batch_size=8)
    att = run_ablation("attention_variant", base, data, val)
    assert [r["variant"] for r in att.rows] == ["unified", "cross"]
    assert att.rows[0]["params"] != att.rows[1]["params"]
    for v in att.attention.values():
        np.testing.assert_allclose(v["grid"].sum(1), 1.0, atol=1e-6)
    te = run_ablation("type_embedding", base, data, val)
    assert te.checks["query_blocks_identical"] is True
    km = run_ablation("k_modes", base, data, val, k_values=(1, 3))
    assert [sum(h) for h in km.histograms.values()] == [8, 8]
    mx = run_ablation("modality_exchange", base, data, val)
    assert [r["variant"] for r in mx.rows] == ["pose_only", "traj_only", "joint/pose", "joint/traj"]
    assert mx.rows[1]["min_ape"] is None
    with pytest.raises(ValueError):
        run_ablation("dropout", base, data, val)


def test_benchmark_report(tiny_cfg, walkers):
    s = prepare_dataset(DatasetSpec("w", walkers), tiny_cfg)
    rep = benchmark(TrainConfig(model=tiny_cfg, batch_size=8), s, repeats=3)
    runs = rep["test_throughput"]["runs"]
    assert len(runs) == 3
    assert rep["test_throughput"]["std"] == pytest.approx(np.std(runs, ddof=1))
    with pytest.raises(ValueError):
        benchmark(TrainConfig(model=tiny_cfg), s, repeats=1)


def test_deep_forward_faster_than_train_step():
    cfg = ModelConfig.deep(past_frames=4, future_frames=4, n_joints=3, n_proposals=2)
    seqs = synth_generate("sine_gait_walker", 8, 8, 3, seed=0)
    s = prepare_dataset(DatasetSpec("w", seqs), cfg)
    rep = benchmark(TrainConfig(model=cfg, batch_size=8), s, repeats=3)
    assert rep["test_throughput"]["mean"] >= rep["train_throughput"]["mean"]
