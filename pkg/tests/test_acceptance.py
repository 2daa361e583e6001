"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE
from simplihumon import autodiff as ad
from simplihumon.data import balanced_batches, pad_2d_to_3d, synth_generate
from simplihumon.metrics import ade, ape, fde, jpe, min_over_k, wta_loss
from simplihumon.model import ModelConfig, ProposalSet, init_params, model_forward, parameter_count
from simplihumon.skeleton import CANONICAL_JOINTS, DEFAULT_SKELETON
from simplihumon.training import DatasetSpec, TrainConfig, evaluate, forward_samples, prepare_dataset, train
from simplihumon.verify import (
    REFERENCE_MAPPING_TABLE,
    TINY,
    model_gradient_error,
    model_variants,
    op_gradient_errors,
    oracle_ade,
    oracle_ape,
    oracle_fde,
    random_shape_case,
    shape_mismatches,
)


@contextmanager
def criterion(name):
    note = {"detail": ""}
    try:
        yield note
    except BaseException as err:
        ACCEPTANCE[name] = (False, note["detail"] or f"{type(err).__name__}: {err}")
        raise
    ACCEPTANCE[name] = (True, note["detail"])
    print(f"PASS {name}: {note['detail']}")


def strip_time(log):
    return [{k: v for k, v in e.items() if k != "wall_seconds"} for e in log]


# 1 -----------------------------------------------------------------------------


def test_ac01_gradient_correctness():
    with criterion("AC1 gradient correctness") as c:
        t0 = time.perf_counter()
        model_errs = {name: model_gradient_error(cfg) for name, cfg in model_variants().items()}
        op_errs = op_gradient_errors(trials=100)
        elapsed = time.perf_counter() - t0
        worst_model, worst_op = max(model_errs.values()), max(op_errs.values())
        c["detail"] = f"model max rel err {worst_model:.1e}, per-op max {worst_op:.1e}, {elapsed:.0f}s"
        assert set(model_errs) == {"unified/rmsnorm", "unified/layernorm", "cross/rmsnorm", "cross/layernorm"}
        assert worst_model < 1e-4
        assert worst_op < 1e-4
        assert elapsed < 120


# 2 -----------------------------------------------------------------------------


def test_ac02_shape_contract_sweep():
    with criterion("AC2 shape contract sweep") as c:
        rng = np.random.default_rng(2024)
        bad = []
        for i in range(50):
            cfg, batch = random_shape_case(rng)
            bad += shape_mismatches(cfg, batch, seed=i)
            # attention side covers every context and query token
            S = (2 if cfg.task_mode == "joint" else 1) * (cfg.past_frames + cfg.future_frames)
            tp = np.zeros((batch, cfg.past_frames, 3)) if cfg.has_traj else None
            pp = np.zeros((batch, cfg.past_frames, cfg.n_joints, 3)) if cfg.has_pose else None
            with ad.no_grad():
                props = model_forward(init_params(cfg, i), cfg, tp, pp, capture_attention=True)
            first = props.attention[0]
            side = first.shape[-1] if cfg.attn_variant == "unified" else first["encoder"].shape[-1] + first["decoder_self"].shape[-1]
            if side != S:
                bad.append(f"case {i}: attention side {side} != {S}")
        c["detail"] = f"50 configurations, {len(bad)} mismatches"
        assert bad == []


# 3 -----------------------------------------------------------------------------


def test_ac03_metric_oracle_equivalence():
    with criterion("AC3 metric oracle equivalence") as c:
        worst = 0.0
        worst_shift = 0.0
        for trial in range(200):
            rng = np.random.default_rng([3, trial])
            F, M = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            gt, pred = rng.standard_normal((2, F, M, 3))
            t, r = int(rng.integers(F)), int(rng.integers(M))
            worst = max(
                worst,
                abs(ade(gt, pred) - oracle_ade(gt, pred)),
                abs(fde(gt, pred, t) - oracle_fde(gt, pred, t)),
                abs(jpe(gt, pred, t) - oracle_fde(gt, pred, t)),
                abs(ape(gt, pred, t, r) - oracle_ape(gt, pred, t, r)),
            )
            shift = rng.standard_normal(3)
            worst_shift = max(
                worst_shift,
                abs(ape(gt, pred + shift, t, r) - ape(gt, pred, t, r)),
                abs(jpe(gt, gt + shift, t) - float(np.linalg.norm(shift))),
            )
        c["detail"] = f"oracle max diff {worst:.1e}, translation max diff {worst_shift:.1e}"
        assert worst <= 1e-12
        assert worst_shift <= 1e-12


# 4 -----------------------------------------------------------------------------


def test_ac04_winner_takes_all_semantics():
    with criterion("AC4 winner-takes-all semantics") as c:
        cfg = replace(TINY, n_proposals=4)
        params = init_params(cfg, 0)
        rng = np.random.default_rng(4)
        tp, pp = rng.standard_normal((2, 3)), rng.standard_normal((2, 2, 3))
        tf, pf = rng.standard_normal((2, 3)), rng.standard_normal((2, 2, 3))
        props = model_forward(params, cfg, tp, pp)
        loss, win = wta_loss(props, tf, pf)
        ad.backward(loss)
        P = 3 * cfg.n_joints
        leaks = 0.0
        for k in range(cfg.n_proposals):
            cols = [("traj_split", 3), ("pose_split", P)]
            for name, width in cols:
                gw = params[name + ".w"].grad[:, k * width : (k + 1) * width]
                gb = params[name + ".b"].grad[k * width : (k + 1) * width]
                if k != win:
                    leaks = max(leaks, np.abs(gw).max(), np.abs(gb).max())
                else:
                    assert np.abs(gw).max() > 0
        exact = np.zeros((3, 2, 3))
        exact_loss, exact_win = wta_loss(ProposalSet(traj=np.stack([exact + 1, exact, exact - 1])[:, :, 0]), exact[:, 0])
        monotone_violations = 0
        for trial in range(100):
            r = np.random.default_rng([40, trial])
            K, F = int(r.integers(1, 6)), int(r.integers(1, 5))
            traj = r.standard_normal((K, F, 3))
            gt = r.standard_normal((F, 3))
            extra = r.standard_normal((1, F, 3))
            longer = np.concatenate([traj, extra])
            if min_over_k(ade, gt, longer) > min_over_k(ade, gt, traj):
                monotone_violations += 1
            if wta_loss(ProposalSet(traj=longer), gt)[0].item() > wta_loss(ProposalSet(traj=traj), gt)[0].item():
                monotone_violations += 1
        c["detail"] = (
            f"non-winner head grad max {leaks:.1e}, exact-match loss {exact_loss.item():.1e}, "
            f"{monotone_violations} monotonicity violations in 100 sets"
        )
        assert leaks == 0.0
        assert exact_loss.item() == 0.0 and exact_win == 1
        assert monotone_violations == 0


# 5 -----------------------------------------------------------------------------


def overfit_run():
    seqs = synth_generate("const_velocity", 32, TINY.past_frames + TINY.future_frames, TINY.n_joints, seed=0)
    tc = TrainConfig(model=TINY, epochs=200, batch_size=8, lr=3e-3, seed=0)
    return train(tc, [DatasetSpec("const_velocity", seqs)]), seqs


def test_ac05_overfit():
    with criterion("AC5 overfit check") as c:
        t0 = time.perf_counter()
        first, seqs = overfit_run()
        second, _ = overfit_run()
        elapsed = time.perf_counter() - t0
        l0, l_end = first.log[0]["mean_loss"], first.log[-1]["mean_loss"]
        same = strip_time(first.log) == strip_time(second.log) and all(
            np.array_equal(first.params[k].data, second.params[k].data) for k in first.params
        )
        trained = evaluate(first.params, TINY, seqs).min_ade
        untrained = evaluate(init_params(TINY, 0), TINY, seqs).min_ade
        c["detail"] = (
            f"final/first loss {l_end / l0:.3f}, minADE {untrained:.3f} -> {trained:.3f}, "
            f"deterministic={same}, {elapsed:.0f}s for two runs"
        )
        assert l_end <= 0.1 * l0
        assert untrained >= 5 * trained
        assert same
        assert elapsed < 600


# 6 and 7 -----------------------------------------------------------------------

FORK_H, FORK_F = 8, 12


def fork_cfg(K):
    return ModelConfig(
        n_layers=1, d_model=16, n_heads=2, past_frames=FORK_H, future_frames=FORK_F, n_joints=1, n_proposals=K, task_mode="traj_only"
    )


@pytest.fixture(scope="module")
def fork_runs():
    tr = synth_generate("fork_turn", 256, FORK_H + FORK_F, 1, seed=1, turn_frame=FORK_H)
    va = synth_generate("fork_turn", 128, FORK_H + FORK_F, 1, seed=2, turn_frame=FORK_H)
    t0 = time.perf_counter()
    out = {}
    for K in (1, 2):
        cfg = fork_cfg(K)
        tc = TrainConfig(model=cfg, epochs=200, batch_size=32, lr=3e-3, seed=0)
        result = train(tc, [DatasetSpec("fork_turn", tr)])
        out[K] = (cfg, result.params, evaluate(result.params, cfg, va))
    return out, va, time.perf_counter() - t0


def test_ac06_mode_non_collapse(fork_runs):
    with criterion("AC6 mode non-collapse") as c:
        runs, va, elapsed = fork_runs
        rep1, rep2 = runs[1][2], runs[2][2]
        ratio = rep2.min_ade / rep1.min_ade
        c["detail"] = (
            f"K=2 max_share {rep2.max_share:.3f} (histogram {rep2.winner_histogram}), "
            f"minADE K=2/K=1 = {rep2.min_ade:.4f}/{rep1.min_ade:.4f} = {ratio:.3f}, {elapsed:.0f}s"
        )
        assert 0.3 <= rep2.max_share <= 0.7
        assert ratio <= 0.6
        assert elapsed < 900


def test_ac07_attention_bidirectionality(fork_runs):
    with criterion("AC7 attention bidirectionality") as c:
        runs, va, _ = fork_runs
        cfg, params, _ = runs[2]
        samples = prepare_dataset(DatasetSpec("fork_turn", va), cfg)
        with ad.no_grad():
            props = forward_samples(params, cfg, samples, capture_attention=True)
        maps = props.attention[0]  # (B, heads, S, S), first layer
        ctx = FORK_H
        qq_mass = float(maps[..., ctx:, ctx:].sum(-1).mean())
        row_err = float(np.abs(maps.sum(-1) - 1.0).max())
        c["detail"] = f"query->query mass {qq_mass:.4f}, worst row-sum deviation {row_err:.1e}"
        assert qq_mass > 1e-3
        assert row_err <= 1e-6


# 8 -----------------------------------------------------------------------------


def test_ac08_skeleton_table_fidelity():
    with criterion("AC8 skeleton table fidelity") as c:
        table = DEFAULT_SKELETON.table()
        mismatches = [i + 1 for i, (got, want) in enumerate(zip(table, REFERENCE_MAPPING_TABLE)) if tuple(got) != want]
        h36 = DEFAULT_SKELETON.slots("human36m")
        from simplihumon.skeleton import SOURCE_JOINTS

        left_up_leg = h36[SOURCE_JOINTS["human36m"].index("LeftUpLeg")]
        pelvis_masked = not DEFAULT_SKELETON.mask("human36m")[CANONICAL_JOINTS.index("Pelvis")]
        traj_slot = DEFAULT_SKELETON.slots("traj_point").tolist()
        pts = np.random.default_rng(8).standard_normal((9, 2))
        padded = pad_2d_to_3d(pts)
        roundtrip = np.array_equal(padded[:, :2], pts) and np.all(padded[:, 2] == 0)
        c["detail"] = (
            f"{len(table)} rows, mismatched rows {mismatches}, LeftUpLeg->{CANONICAL_JOINTS[left_up_leg]}, "
            f"Pelvis absent for human36m={pelvis_masked}, traj_point slot {traj_slot}, pad round-trip={roundtrip}"
        )
        assert len(table) == 22 and mismatches == []
        assert CANONICAL_JOINTS[left_up_leg] == "L_Hip"
        assert pelvis_masked
        assert traj_slot == [CANONICAL_JOINTS.index("Pelvis")]
        assert roundtrip


# 9 -----------------------------------------------------------------------------


def test_ac09_balanced_batching():
    with criterion("AC9 balanced batching") as c:
        sizes = {"large": 1000, "small_a": 100, "small_b": 100}
        sched = balanced_batches(list(sizes.items()), 10, seed=9, epochs=5)
        problems = []
        for e, epoch in enumerate(sched.epochs):
            counts = {k: 0 for k in sizes}
            for name, idx in epoch:
                counts[name] += 1
                if len(idx) != 10 or idx.max() >= sizes[name] or len(set(idx.tolist())) != 10:
                    problems.append(f"epoch {e}: malformed batch from {name}")
            if set(counts.values()) != {10}:
                problems.append(f"epoch {e}: counts {counts}")
        c["detail"] = f"5 epochs x {len(sched.epochs[0])} batches, {len(problems)} problems"
        assert problems == []


# 10 ----------------------------------------------------------------------------


def test_ac10_determinism(tmp_path):
    with criterion("AC10 determinism") as c:
        seqs = synth_generate("sine_gait_walker", 16, 4, 2, seed=10)
        tc = TrainConfig(model=TINY, epochs=5, batch_size=4, seed=3, mirror=True, yaw=True)
        reports = []
        for run in ("a", "b"):
            res = train(tc, [DatasetSpec("walk", seqs)], out_dir=tmp_path / run)
            reports.append(evaluate(res.checkpoint, None, seqs, timesteps=[1, 2]).to_json())
        same_files = all(
            (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in ("checkpoint.json", "checkpoint.bin")
        )
        c["detail"] = f"checkpoints byte-identical={same_files}, reports identical={reports[0] == reports[1]}"
        assert same_files
        assert reports[0] == reports[1]


# 11 ----------------------------------------------------------------------------


def test_ac11_config_sanity():
    with criterion("AC11 config sanity") as c:
        wide = parameter_count(ModelConfig.wide(ffn_mult=4, n_joints=15, n_proposals=6, past_frames=25, future_frames=50))
        deep = parameter_count(ModelConfig.deep(ffn_mult=4, n_joints=15, n_proposals=6, past_frames=25, future_frames=50))
        c["detail"] = f"wide {wide:,} (reference 4.0M, range 1M-10M); deep {deep:,} (reference 642K, range 160.5K-1.605M)"
        assert 1_000_000 <= wide <= 10_000_000
        assert 160_500 <= deep <= 1_605_000
