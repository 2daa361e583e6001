"""Unified-attention transformer for pose and trajectory forecasting.

Tensors are batched: context and query sequences are (B, S, d_model),
trajectory outputs (B, K, F, 3) and pose outputs (B, K, F, M, 3).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TASK_MODES = ("pose_only", "traj_only", "joint")
ATTN_VARIANTS = ("unified", "cross")
NORM_VARIANTS = ("rmsnorm", "layernorm")

NORM_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    ffn_mult: int = 4
    past_frames: int = 8
    future_frames: int = 12
    n_joints: int = 22
    n_proposals: int = 6
    task_mode: str = "joint"
    attn_variant: str = "unified"
    norm_variant: str = "rmsnorm"
    type_embedding: bool = True

    def __post_init__(self):
        ints = ("n_layers", "d_model", "n_heads", "ffn_mult", "past_frames", "future_frames", "n_joints", "n_proposals")
        for name in ints:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ValueError(f"d_model must be even for sinusoidal encodings, got {self.d_model}")
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"task_mode must be one of {TASK_MODES}, got {self.task_mode!r}")
        if self.attn_variant not in ATTN_VARIANTS:
            raise ValueError(f"attn_variant must be one of {ATTN_VARIANTS}, got {self.attn_variant!r}")
        if self.norm_variant not in NORM_VARIANTS:
            raise ValueError(f"norm_variant must be one of {NORM_VARIANTS}, got {self.norm_variant!r}")

    @property
    def has_traj(self) -> bool:
        return self.task_mode in ("traj_only", "joint")

    @property
    def has_pose(self) -> bool:
        return self.task_mode in ("pose_only", "joint")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def wide(cls, **kw) -> "ModelConfig":
        return cls(**{"n_layers": 6, "d_model": 192, "n_heads": 8, **kw})

    @classmethod
    def deep(cls, **kw) -> "ModelConfig":
        return cls(**{"n_layers": 16, "d_model": 48, "n_heads": 4, **kw})


@dataclass
class ProposalSet:
    """K hypotheses: ``traj`` (…, K, F, 3) and/or ``pose`` (…, K, F, M, 3)."""

    traj: Tensor | np.ndarray | None = None
    pose: Tensor | np.ndarray | None = None
    winner_index: np.ndarray | int | None = None
    attention: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.traj is None and self.pose is None:
            raise ValueError("a proposal set needs at least one stream")

    @property
    def n_proposals(self) -> int:
        if self.traj is not None:
            return self.traj.shape[-3]
        return self.pose.shape[-4]

    def numpy(self) -> "ProposalSet":
        arr = lambda x: None if x is None else np.array(x.data if isinstance(x, Tensor) else x)
        return ProposalSet(arr(self.traj), arr(self.pose), self.winner_index, self.attention)


# parameters ---------------------------------------------------------------


def _layer_shapes(prefix: str, cfg: ModelConfig, cross: bool = False) -> dict:
    d, h = cfg.d_model, cfg.ffn_mult * cfg.d_model
    shapes = {}

    def norm(name):
        shapes[f"{prefix}.{name}.g"] = (d,)
        if cfg.norm_variant == "layernorm":
            shapes[f"{prefix}.{name}.b"] = (d,)

    def attn(name):
        for p in "qkvo":
            shapes[f"{prefix}.{name}.{p}.w"] = (d, d)
            shapes[f"{prefix}.{name}.{p}.b"] = (d,)

    norm("norm1")
    attn("attn")
    if cross:
        norm("norm_cross")
        attn("cross")
    norm("norm2")
    shapes[f"{prefix}.ffn.0.w"] = (d, h)
    shapes[f"{prefix}.ffn.0.b"] = (h,)
    shapes[f"{prefix}.ffn.1.w"] = (h, d)
    shapes[f"{prefix}.ffn.1.b"] = (d,)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every parameter array, in initialization order."""
    d, K, F, P = cfg.d_model, cfg.n_proposals, cfg.future_frames, 3 * cfg.n_joints
    s: dict[str, tuple] = {}
    if cfg.has_traj:
        s["traj_embed.w"], s["traj_embed.b"] = (3, d), (d,)
    if cfg.has_pose:
        s["pose_embed.0.w"], s["pose_embed.0.b"] = (P, d), (d,)
        s["pose_embed.1.w"], s["pose_embed.1.b"] = (d, d), (d,)
    s["query_bank"] = (F, 3)
    s["query_proj.w"], s["query_proj.b"] = (3, d), (d,)
    if cfg.type_embedding:
        s["type_embed"] = (2, d)
    if cfg.attn_variant == "unified":
        for i in range(cfg.n_layers):
            s.update(_layer_shapes(f"layers.{i}", cfg))
    else:
        for i in range(cfg.n_layers):
            s.update(_layer_shapes(f"encoder.{i}", cfg))
        s["encoder_norm.g"] = (d,)
        if cfg.norm_variant == "layernorm":
            s["encoder_norm.b"] = (d,)
        for i in range(cfg.n_layers):
            s.update(_layer_shapes(f"decoder.{i}", cfg, cross=True))
    if cfg.has_traj:
        s["traj_split.w"], s["traj_split.b"] = (d, K * 3), (K * 3,)
        s["traj_head.w"], s["traj_head.b"] = (3, 3), (3,)
    if cfg.has_pose:
        s["pose_split.w"], s["pose_split.b"] = (d, K * P), (K * P,)
        s["pose_head.0.w"], s["pose_head.0.b"] = (P, d), (d,)
        s["pose_head.1.w"], s["pose_head.1.b"] = (d, P), (P,)
    return s


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(math.prod(shape) for shape in param_shapes(cfg).values()))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) linear weights and biases, N(0, 0.02) for the
    query bank and type embeddings, unit norm gains, zero norm biases."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name in ("query_bank", "type_embed"):
            value = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".g"):
            value = np.ones(shape)
        elif ".norm" in name or name.startswith("encoder_norm"):
            value = np.zeros(shape)
        else:
            fan_in = shapes[name[:-2] + ".w"][0] if name.endswith(".b") else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


def freeze(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Copies that record no graph; safe for concurrent inference."""
    return {k: Tensor(v.data) for k, v in params.items()}


# building blocks ----------------------------------------------------------


def sinusoidal_pe(length: int, d_model: int) -> np.ndarray:
    """Interleaved sin/cos table with base 10000, shape (length, d_model)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def _linear(x: Tensor, params, name: str) -> Tensor:
    return x @ params[name + ".w"] + params[name + ".b"]


def _norm(x: Tensor, params, name: str, cfg: ModelConfig) -> Tensor:
    if cfg.norm_variant == "rmsnorm":
        return ad.rmsnorm(x, params[name + ".g"], NORM_EPS)
    return ad.layernorm(x, params[name + ".g"], params[name + ".b"], NORM_EPS)


def _type_vec(params, cfg: ModelConfig, stream: str):
    if not cfg.type_embedding:
        return None
    return params["type_embed"][0 if stream == "traj" else 1]


def _resolve_task(cfg: ModelConfig, task: str | None) -> str:
    task = task or cfg.task_mode
    if task not in TASK_MODES:
        raise ValueError(f"unknown task {task!r}")
    if cfg.task_mode != "joint" and task != cfg.task_mode:
        raise ValueError(f"a {cfg.task_mode} model cannot serve task {task!r}")
    return task


def _streams(task: str) -> tuple[str, ...]:
    return {"traj_only": ("traj",), "pose_only": ("pose",), "joint": ("traj", "pose")}[task]


def embed_context(traj_past, pose_past, params, cfg: ModelConfig, task: str | None = None) -> Tensor:
    """Context tokens (B, H or 2H, d): embed, add PE, add type embedding,
    concatenate trajectory first.

    Pose inputs with fewer joints than ``cfg.n_joints`` use only the leading
    rows of the first pose-embedding weight.
    """
    task = _resolve_task(cfg, task)
    want = _streams(task)
    got = tuple(s for s, x in (("traj", traj_past), ("pose", pose_past)) if x is not None)
    if got != want:
        raise ValueError(f"task {task!r} needs streams {want}, got {got}")
    parts = []
    horizon = None
    for stream in want:
        if stream == "traj":
            x = ad._as_tensor(traj_past)
            if x.ndim != 3 or x.shape[-1] != 3:
                raise ad.ShapeError(f"traj_past must be (B, H, 3), got {x.shape}")
            emb = _linear(x, params, "traj_embed")
        else:
            x = ad._as_tensor(pose_past)
            if x.ndim != 4 or x.shape[-1] != 3:
                raise ad.ShapeError(f"pose_past must be (B, H, M, 3), got {x.shape}")
            B, H, M, _ = x.shape
            if M > cfg.n_joints:
                raise ad.ShapeError(f"pose has {M} joints, model supports at most {cfg.n_joints}")
            flat = x.reshape(B, H, 3 * M)
            w0 = params["pose_embed.0.w"]
            if M < cfg.n_joints:
                w0 = w0[: 3 * M]
            hid = ad.gelu(flat @ w0 + params["pose_embed.0.b"])
            emb = _linear(hid, params, "pose_embed.1")
        if horizon is not None and emb.shape[1] != horizon:
            raise ad.ShapeError(f"stream horizons differ: {horizon} vs {emb.shape[1]}")
        horizon = emb.shape[1]
        tok = emb + sinusoidal_pe(horizon, cfg.d_model)
        tvec = _type_vec(params, cfg, stream)
        if tvec is not None:
            tok = tok + tvec
        parts.append(tok)
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


def build_queries(params, cfg: ModelConfig, task: str | None = None, future_frames: int | None = None) -> Tensor:
    """Query tokens (F or 2F, d). One projected bank shared by both streams,
    told apart only by the type embedding."""
    task = _resolve_task(cfg, task)
    F = future_frames or cfg.future_frames
    if F > cfg.future_frames:
        raise ad.ShapeError(f"future_frames={F} exceeds the query bank size {cfg.future_frames}")
    bank = params["query_bank"]
    if F < cfg.future_frames:
        bank = bank[:F]
    base = _linear(bank, params, "query_proj") + sinusoidal_pe(F, cfg.d_model)
    parts = []
    for stream in _streams(task):
        tvec = _type_vec(params, cfg, stream)
        parts.append(base if tvec is None else base + tvec)
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


def _attention(xq: Tensor, xkv: Tensor, params, name: str, n_heads: int):
    B, Sq, d = xq.shape
    Sk = xkv.shape[1]
    dh = d // n_heads
    q = _linear(xq, params, name + ".q").reshape(B, Sq, n_heads, dh).transpose((0, 2, 1, 3))
    k = _linear(xkv, params, name + ".k").reshape(B, Sk, n_heads, dh).transpose((0, 2, 3, 1))
    v = _linear(xkv, params, name + ".v").reshape(B, Sk, n_heads, dh).transpose((0, 2, 1, 3))
    w = ad.softmax((q @ k) * (1.0 / math.sqrt(dh)), axis=-1)
    out = (w @ v).transpose((0, 2, 1, 3)).reshape(B, Sq, d)
    return _linear(out, params, name + ".o"), w.data


def _ffn(x: Tensor, params, name: str) -> Tensor:
    return _linear(ad.gelu(_linear(x, params, name + ".0")), params, name + ".1")


def _self_block(x: Tensor, params, prefix: str, cfg: ModelConfig):
    h = _norm(x, params, prefix + ".norm1", cfg)
    a, w = _attention(h, h, params, prefix + ".attn", cfg.n_heads)
    x = x + a
    x = x + _ffn(_norm(x, params, prefix + ".norm2", cfg), params, prefix + ".ffn")
    return x, w


def decoder_forward(C: Tensor, Q: Tensor, params, cfg: ModelConfig, capture_attention: bool = False):
    """Run the transformer stack and return ``(Z, attention_maps)``.

    Unified: pre-norm self-attention blocks over ``[C; Q]`` with no mask; ``Z``
    is the last ``|Q|`` rows. Cross: encoder blocks over ``C``, then decoder
    blocks with query self-attention and cross-attention into the encoded
    context. Attention maps are post-softmax weights, one entry per layer:
    arrays (B, heads, S, S) for unified, dicts of arrays for cross.
    """
    if C.shape[-1] != cfg.d_model or Q.shape[-1] != cfg.d_model:
        raise ad.ShapeError(f"decoder: widths {C.shape[-1]} / {Q.shape[-1]} do not match d_model={cfg.d_model}")
    B = C.shape[0]
    if Q.ndim == 2:
        Q = ad.broadcast(Q, (B,) + Q.shape)
    maps = [] if capture_attention else None
    if cfg.attn_variant == "unified":
        x = ad.concat([C, Q], axis=1)
        for i in range(cfg.n_layers):
            x, w = _self_block(x, params, f"layers.{i}", cfg)
            if maps is not None:
                maps.append(w)
        return x[:, C.shape[1] :], maps

    mem = C
    enc_maps = []
    for i in range(cfg.n_layers):
        mem, w = _self_block(mem, params, f"encoder.{i}", cfg)
        enc_maps.append(w)
    mem = _norm(mem, params, "encoder_norm", cfg)
    x = Q
    for i in range(cfg.n_layers):
        prefix = f"decoder.{i}"
        h = _norm(x, params, prefix + ".norm1", cfg)
        a, w_self = _attention(h, h, params, prefix + ".attn", cfg.n_heads)
        x = x + a
        c, w_cross = _attention(_norm(x, params, prefix + ".norm_cross", cfg), mem, params, prefix + ".cross", cfg.n_heads)
        x = x + c
        x = x + _ffn(_norm(x, params, prefix + ".norm2", cfg), params, prefix + ".ffn")
        if maps is not None:
            maps.append({"encoder": enc_maps[i], "decoder_self": w_self, "decoder_cross": w_cross})
    return x, maps


def prediction_heads(Z: Tensor, params, cfg: ModelConfig, task: str | None = None, n_joints: int | None = None) -> ProposalSet:
    """Per stream: project its F rows to K*C, split into K branches (K is the
    slower axis), then apply the shared stream head to every branch."""
    task = _resolve_task(cfg, task)
    streams = _streams(task)
    B, S, _ = Z.shape
    F = S // len(streams)
    K = cfg.n_proposals
    out = {}
    for n, stream in enumerate(streams):
        rows = Z[:, n * F : (n + 1) * F] if len(streams) > 1 else Z
        if stream == "traj":
            br = _linear(rows, params, "traj_split").reshape(B, F, K, 3).transpose((0, 2, 1, 3))
            out["traj"] = _linear(br, params, "traj_head")
        else:
            P = 3 * cfg.n_joints
            M = n_joints or cfg.n_joints
            br = _linear(rows, params, "pose_split").reshape(B, F, K, P).transpose((0, 2, 1, 3))
            hid = ad.gelu(_linear(br, params, "pose_head.0"))
            w1, b1 = params["pose_head.1.w"], params["pose_head.1.b"]
            if M < cfg.n_joints:
                w1, b1 = w1[:, : 3 * M], b1[: 3 * M]
            out["pose"] = (hid @ w1 + b1).reshape(B, K, F, M, 3)
    return ProposalSet(traj=out.get("traj"), pose=out.get("pose"))


def model_forward(
    params,
    cfg: ModelConfig,
    traj_past=None,
    pose_past=None,
    *,
    task: str | None = None,
    future_frames: int | None = None,
    capture_attention: bool = False,
) -> ProposalSet:
    """Full forward pass. Inputs are normalized arrays, batched (B, H, ...) or
    unbatched (H, ...); unbatched inputs give unbatched proposals.

    ``task`` routes a joint model through a single stream; without it the
    inputs must match ``cfg.task_mode`` exactly.
    """
    traj_past = None if traj_past is None else ad._as_tensor(traj_past)
    pose_past = None if pose_past is None else ad._as_tensor(pose_past)
    unbatched = (traj_past is not None and traj_past.ndim == 2) or (pose_past is not None and pose_past.ndim == 3)
    if unbatched:
        traj_past = None if traj_past is None else traj_past.reshape((1,) + traj_past.shape)
        pose_past = None if pose_past is None else pose_past.reshape((1,) + pose_past.shape)
    n_joints = None if pose_past is None else pose_past.shape[2]
    C = embed_context(traj_past, pose_past, params, cfg, task)
    Q = build_queries(params, cfg, task, future_frames)
    Z, maps = decoder_forward(C, Q, params, cfg, capture_attention)
    props = prediction_heads(Z, params, cfg, task, n_joints)
    props.attention = maps
    if unbatched:
        props.traj = None if props.traj is None else props.traj[0]
        props.pose = None if props.pose is None else props.pose[0]
        if maps is not None:
            props.attention = [
                m[0] if isinstance(m, np.ndarray) else {k: v[0] for k, v in m.items()} for m in maps
            ]
    return props


def attention_grid(maps: list, cfg: ModelConfig, context_len: int, layer: int = 0) -> np.ndarray:
    """Square (S, S) grid of layer attention averaged over batch and heads.

    For the cross variant the grid is assembled from the encoder map (context
    rows) and the decoder maps (query rows); query rows hold the cross and self
    distributions each scaled by 1/2, so every row still sums to 1.
    """
    m = maps[layer]
    if cfg.attn_variant == "unified":
        return m.mean(axis=tuple(range(m.ndim - 2)))
    avg = lambda a: a.mean(axis=tuple(range(a.ndim - 2)))
    enc, dself, dcross = avg(m["encoder"]), avg(m["decoder_self"]), avg(m["decoder_cross"])
    Sq = dself.shape[0]
    grid = np.zeros((context_len + Sq, context_len + Sq))
    grid[:context_len, :context_len] = enc
    grid[context_len:, :context_len] = 0.5 * dcross
    grid[context_len:, context_len:] = 0.5 * dself
    return grid
