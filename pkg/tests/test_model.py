import math
from dataclasses import replace

import numpy as np
import pytest

from simplihumon import autodiff as ad
from simplihumon.autodiff import Tensor
from simplihumon.model import (
    ModelConfig,
    attention_grid,
    build_queries,
    decoder_forward,
    embed_context,
    init_params,
    model_forward,
    param_shapes,
    parameter_count,
    prediction_heads,
    sinusoidal_pe,
)


def zeroed(params, predicate):
    return {k: Tensor(np.zeros_like(v.data)) if predicate(k) else v for k, v in params.items()}


def test_pe_row_zero_alternates():
    pe = sinusoidal_pe(3, 6)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1])


def test_pe_closed_form_small_table():
    pe = sinusoidal_pe(2, 4)
    np.testing.assert_allclose(pe[1], [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)], rtol=1e-15)


def test_pe_bounded_and_rejects_odd_width():
    assert np.abs(sinusoidal_pe(50, 16)).max() <= 1.0
    with pytest.raises(ValueError):
        sinusoidal_pe(4, 5)


def test_config_validation():
    with pytest.raises(ValueError, match="n_heads"):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError, match="task_mode"):
        ModelConfig(task_mode="both")
    with pytest.raises(ValueError, match="n_layers"):
        ModelConfig(n_layers=0)
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"depth": 3})
    cfg = ModelConfig(n_layers=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("task,rows", [("joint", 10), ("pose_only", 5), ("traj_only", 5)])
def test_context_shape(task, rows):
    cfg = ModelConfig(d_model=16, past_frames=5, n_joints=3, task_mode=task)
    p = init_params(cfg)
    tp = np.zeros((1, 5, 3)) if cfg.has_traj else None
    pp = np.zeros((1, 5, 3, 3)) if cfg.has_pose else None
    assert embed_context(tp, pp, p, cfg).shape == (1, rows, 16)


def test_context_with_zero_weights_is_bare_pe():
    cfg = ModelConfig(d_model=16, past_frames=5, n_joints=3, type_embedding=False)
    p = zeroed(init_params(cfg), lambda k: "embed" in k)
    C = embed_context(np.zeros((1, 5, 3)), np.zeros((1, 5, 3, 3)), p, cfg)
    pe = sinusoidal_pe(5, 16)
    np.testing.assert_array_equal(C.data[0], np.concatenate([pe, pe]))


def test_stream_mismatch_rejected():
    cfg = ModelConfig(d_model=16, past_frames=5, n_joints=3)
    p = init_params(cfg)
    with pytest.raises(ValueError):
        embed_context(None, np.zeros((1, 5, 3, 3)), p, cfg)
    with pytest.raises(ValueError):
        model_forward(p, cfg, None, np.zeros((5, 3, 3)))


@pytest.mark.parametrize("task,rows", [("joint", 20), ("traj_only", 10)])
def test_query_shape(task, rows):
    cfg = ModelConfig(d_model=16, future_frames=10, n_joints=3, task_mode=task)
    assert build_queries(init_params(cfg), cfg).shape == (rows, 16)


def test_queries_identical_without_type_embedding():
    cfg = ModelConfig(d_model=16, future_frames=10, n_joints=3, type_embedding=False)
    Q = build_queries(init_params(cfg), cfg).data
    assert np.array_equal(Q[:10], Q[10:])
    cfg_on = replace(cfg, type_embedding=True)
    Q_on = build_queries(init_params(cfg_on), cfg_on).data
    assert not np.array_equal(Q_on[:10], Q_on[10:])


@pytest.mark.parametrize("variant", ["unified", "cross"])
def test_zero_block_weights_give_identity(variant):
    cfg = ModelConfig(d_model=16, past_frames=5, future_frames=10, n_joints=3, attn_variant=variant)
    p = zeroed(init_params(cfg), lambda k: ".attn." in k or ".ffn." in k or ".cross." in k)
    C = embed_context(np.ones((2, 5, 3)), np.ones((2, 5, 3, 3)), p, cfg)
    Q = build_queries(p, cfg)
    Z, _ = decoder_forward(C, Q, p, cfg)
    np.testing.assert_array_equal(Z.data, np.broadcast_to(Q.data, Z.shape))


def test_attention_map_side_and_rows():
    cfg = ModelConfig(d_model=16, past_frames=5, future_frames=10, n_joints=3)
    p = init_params(cfg, 2)
    rng = np.random.default_rng(0)
    props = model_forward(p, cfg, rng.standard_normal((5, 3)), rng.standard_normal((5, 3, 3)), capture_attention=True)
    assert len(props.attention) == cfg.n_layers
    m = props.attention[0]
    assert m.shape == (cfg.n_heads, 30, 30)
    assert np.all(m >= 0)
    np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-6)


def test_cross_attention_grid_rows_sum_to_one():
    cfg = ModelConfig(d_model=16, past_frames=5, future_frames=10, n_joints=3, attn_variant="cross")
    rng = np.random.default_rng(0)
    props = model_forward(init_params(cfg), cfg, rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 5, 3, 3)), capture_attention=True)
    g = attention_grid(props.attention, cfg, context_len=10)
    assert g.shape == (30, 30)
    np.testing.assert_allclose(g.sum(1), 1.0, atol=1e-6)


def test_head_shapes_joint():
    cfg = ModelConfig(d_model=16, past_frames=4, future_frames=10, n_joints=3, n_proposals=4)
    rng = np.random.default_rng(0)
    props = model_forward(init_params(cfg), cfg, rng.standard_normal((4, 3)), rng.standard_normal((4, 3, 3)))
    assert props.traj.shape == (4, 10, 3)
    assert props.pose.shape == (4, 10, 3, 3)


def test_single_branch_config():
    cfg = ModelConfig(d_model=16, past_frames=4, future_frames=3, n_joints=2, n_proposals=1)
    props = model_forward(init_params(cfg), cfg, np.zeros((4, 3)), np.zeros((4, 2, 3)))
    assert props.n_proposals == 1


def test_zero_heads_give_identical_zero_branches():
    cfg = ModelConfig(d_model=16, past_frames=4, future_frames=3, n_joints=2, n_proposals=3)
    p = zeroed(init_params(cfg), lambda k: k.startswith(("traj_split", "traj_head", "pose_split", "pose_head")))
    rng = np.random.default_rng(0)
    props = model_forward(p, cfg, rng.standard_normal((4, 3)), rng.standard_normal((4, 2, 3)))
    assert np.all(props.traj.data == 0) and np.all(props.pose.data == 0)


def test_tiny_config_shapes(tiny_cfg):
    rng = np.random.default_rng(0)
    props = model_forward(init_params(tiny_cfg), tiny_cfg, rng.standard_normal((2, 3)), rng.standard_normal((2, 2, 3)))
    assert props.traj.shape == (2, 2, 3)
    assert props.pose.shape == (2, 2, 2, 3)


def test_forward_is_pure(tiny_cfg):
    p = init_params(tiny_cfg)
    x = np.random.default_rng(0).standard_normal((2, 3)), np.random.default_rng(1).standard_normal((2, 2, 3))
    a, b = model_forward(p, tiny_cfg, *x), model_forward(p, tiny_cfg, *x)
    assert np.array_equal(a.traj.data, b.traj.data) and np.array_equal(a.pose.data, b.pose.data)


def test_pose_only_input_into_joint_config_rejected(tiny_cfg):
    with pytest.raises(ValueError):
        model_forward(init_params(tiny_cfg), tiny_cfg, None, np.zeros((2, 2, 3)))


def test_joint_config_routes_single_task(tiny_cfg):
    p = init_params(tiny_cfg)
    props = model_forward(p, tiny_cfg, None, np.zeros((2, 2, 3)), task="pose_only")
    assert props.traj is None and props.pose.shape == (2, 2, 2, 3)
    single = replace(tiny_cfg, task_mode="traj_only")
    with pytest.raises(ValueError):
        model_forward(init_params(single), single, None, np.zeros((2, 2, 3)), task="pose_only")


def test_fewer_joints_use_leading_rows(tiny_cfg):
    cfg = replace(tiny_cfg, n_joints=4)
    p = init_params(cfg)
    props = model_forward(p, cfg, np.zeros((2, 3)), np.ones((2, 2, 3)))
    assert props.pose.shape == (2, 2, 2, 3)


def test_pe_is_load_bearing(tiny_cfg):
    # swapping the two past frames changes only the positional pairing
    p = init_params(tiny_cfg, 4)
    rng = np.random.default_rng(3)
    tp, pp = rng.standard_normal((2, 3)), rng.standard_normal((2, 2, 3))
    a = model_forward(p, tiny_cfg, tp, pp)
    b = model_forward(p, tiny_cfg, tp[::-1], pp[::-1])
    assert not np.allclose(a.traj.data, b.traj.data)


def test_identical_blocks_without_type_embedding_give_identical_features():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, past_frames=3, future_frames=2, n_joints=1, n_proposals=2, type_embedding=False)
    p = init_params(cfg, 1)
    # make the pose embedding reproduce the trajectory embedding on matching input
    p["pose_embed.1.w"] = Tensor(np.eye(8))
    p["pose_embed.1.b"] = Tensor(np.zeros(8))
    x = np.random.default_rng(0).standard_normal((1, 3, 3))
    tok = embed_context(x, x[:, :, None, :], p, cfg)
    C = tok.data
    pose_block = C[:, 3:]
    C_same = Tensor(np.concatenate([pose_block, pose_block], axis=1))
    Z, _ = decoder_forward(C_same, build_queries(p, cfg), p, cfg)
    np.testing.assert_allclose(Z.data[:, :2], Z.data[:, 2:], atol=1e-14)


def hand_count(L, d, M, K, F, ffn=4, norm="rmsnorm"):
    nb = 2 if norm == "layernorm" else 1
    layer = 2 * nb * d + 4 * (d * d + d) + (d * ffn * d + ffn * d) + (ffn * d * d + d)
    traj = (3 * d + d) + (d * 3 * K + 3 * K) + (3 * 3 + 3)
    P = 3 * M
    pose = (P * d + d) + (d * d + d) + (d * K * P + K * P) + (P * d + d) + (d * P + P)
    queries = F * 3 + (3 * d + d) + 2 * d
    return traj + pose + queries + L * layer


def test_parameter_count_matches_hand_enumeration():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, n_joints=1, n_proposals=1, future_frames=1)
    assert parameter_count(cfg) == hand_count(1, 8, 1, 1, 1)
    cfg = ModelConfig(n_layers=3, d_model=16, n_heads=4, n_joints=5, n_proposals=3, future_frames=7, norm_variant="layernorm")
    assert parameter_count(cfg) == hand_count(3, 16, 5, 3, 7, norm="layernorm")
    assert parameter_count(cfg) == sum(v.size for v in init_params(cfg).values())


def test_parameter_count_increases_with_depth():
    counts = [parameter_count(ModelConfig(n_layers=L, d_model=16)) for L in range(1, 6)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_init_scheme():
    cfg = ModelConfig(d_model=16, norm_variant="layernorm")
    p = init_params(cfg, 0)
    assert np.all(p["layers.0.norm1.g"].data == 1) and np.all(p["layers.0.norm1.b"].data == 0)
    assert np.abs(p["traj_embed.w"].data).max() <= 1 / math.sqrt(3)
    assert np.abs(p["layers.0.ffn.1.w"].data).max() <= 1 / math.sqrt(64)
    assert abs(p["query_bank"].data.std() - 0.02) < 0.01
    assert set(p) == set(param_shapes(cfg))
