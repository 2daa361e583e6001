"""Self-check battery: gradients, metric oracles, shapes, invariances, mapping."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import MotionSequence, balanced_batches, map_to_canonical, normalize, pad_2d_to_3d, synth_generate
from .metrics import ade, ape, fde, jpe, wta_loss
from .model import (
    ModelConfig,
    build_queries,
    decoder_forward,
    embed_context,
    init_params,
    model_forward,
    prediction_heads,
)
from .skeleton import DEFAULT_SKELETON, CanonicalSkeleton

SOFT_BUDGET_SECONDS = 300.0

# Frozen reference for the canonical mapping: (canonical, human36m, mocap_umpm, tdpw).
REFERENCE_MAPPING_TABLE = (
    ("Pelvis", None, "Hips", "Pelvis"),
    ("L_Hip", "LeftUpLeg", "LHip", "LHip"),
    ("R_Hip", "RightUpLeg", "RHip", "RHip"),
    ("Spine1", "Spine", "Spine", None),
    ("L_Knee", "LeftLeg", "LKnee", "LKnee"),
    ("R_Knee", "RightLeg", "RKnee", "RKnee"),
    ("Spine2", None, None, None),
    ("L_Ankle", "LeftFoot", "LAnkle", None),
    ("R_Ankle", "RightFoot", "RAnkle", None),
    ("Spine3", None, None, None),
    ("L_Foot", None, None, "LFoot"),
    ("R_Foot", None, None, "RFoot"),
    ("Neck", "Neck", "Neck", None),
    ("L_Collar", None, None, None),
    ("R_Collar", None, None, None),
    ("Head", "Head / Head-top", "Head", None),
    ("L_Shoulder", "LeftArm", "LShoulder", "LShoulder"),
    ("R_Shoulder", "RightArm", "RShoulder", "RShoulder"),
    ("L_Elbow", "LeftForeArm", "LElbow", "LElbow"),
    ("R_Elbow", "RightForeArm", "RElbow", "RElbow"),
    ("L_Wrist", "LeftHand", "LWrist", "LWrist"),
    ("R_Wrist", "RightHand", None, "RWrist"),
)

TINY = ModelConfig(n_layers=1, d_model=8, n_heads=2, past_frames=2, future_frames=2, n_joints=2, n_proposals=2)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


# gradient checks -------------------------------------------------------------


def _weighted(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    return ad.sum(out * w)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list]]:
    """One randomized scalar-valued probe per op: name -> (f, point)."""
    n = lambda *s: rng.standard_normal(s)
    w = lambda *s: rng.standard_normal(s)
    w23, w34, w6, w24 = w(2, 3), w(3, 4), w(6, 3), w(2, 4)
    w224, w22, w423, w3 = w(2, 2, 4), w(2, 2), w(4, 2, 3), w(3)
    w234, w2 = w(2, 3, 4), w(2)
    return {
        "add": (lambda a, b: _weighted(a + b, w23), [n(2, 3), n(3)]),
        "sub": (lambda a, b: _weighted(a - b, w23), [n(2, 3), n(2, 1)]),
        "mul": (lambda a, b: _weighted(a * b, w23), [n(2, 3), n(2, 3)]),
        "matmul": (lambda a, b: _weighted(a @ b, w24), [n(2, 3), n(3, 4)]),
        "matmul_batched": (lambda a, b: _weighted(a @ b, w224), [n(2, 2, 3), n(3, 4)]),
        "concat": (lambda a, b: _weighted(ad.concat([a, b], axis=0), w6), [n(2, 3), n(4, 3)]),
        "slice": (lambda a: _weighted(a[1:, ::2], w22), [n(3, 4)]),
        "reshape": (lambda a: _weighted(a.reshape(3, 4), w34), [n(2, 6)]),
        "transpose": (lambda a: _weighted(a.transpose((2, 0, 1)), w423), [n(2, 3, 4)]),
        "broadcast": (lambda a: _weighted(ad.broadcast(a, (2, 3, 4)), w234), [n(3, 1)]),
        "sum": (lambda a: _weighted(ad.sum(a, axis=1), w24), [n(2, 3, 4)]),
        "mean": (lambda a: _weighted(ad.mean(a, axis=(0, 2)), w3), [n(2, 3, 4)]),
        "gelu": (lambda a: _weighted(ad.gelu(a), w34), [n(3, 4)]),
        "softmax": (lambda a: _weighted(ad.softmax(a, axis=-1), w34), [n(3, 4)]),
        "rmsnorm": (lambda a, g: _weighted(ad.rmsnorm(a, g), w34), [n(3, 4), n(4)]),
        "layernorm": (lambda a, g, b: _weighted(ad.layernorm(a, g, b), w34), [n(3, 4), n(4), n(4)]),
        "sqrt": (lambda a: _weighted(ad.sqrt(a), w2), [rng.uniform(0.5, 2.0, 2)]),
        "square": (lambda a: _weighted(ad.square(a), w23), [n(2, 3)]),
    }


def op_gradient_errors(trials: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per op over ``trials`` seeded probes."""
    worst: dict[str, float] = {}
    for trial in range(trials):
        cases = op_cases(np.random.default_rng([seed, trial]))
        for name, (f, point) in cases.items():
            worst[name] = max(worst.get(name, 0.0), ad.gradcheck(f, point))
    return worst


def _tiny_batch(cfg: ModelConfig, seed: int):
    seqs = synth_generate("sine_gait_walker", 3, cfg.past_frames + cfg.future_frames, cfg.n_joints, seed)
    samples = [normalize(s, cfg.past_frames, cfg.future_frames, cfg.task_mode) for s in seqs]
    stack = lambda key: np.stack([getattr(x, key) for x in samples])
    return stack("traj_past"), stack("pose_past"), stack("traj_future"), stack("pose_future")


def model_gradient_error(cfg: ModelConfig, seed: int = 0, h: float = 1e-6) -> float:
    """Finite-difference check of the full WTA loss w.r.t. every parameter."""
    params = init_params(cfg, seed)
    names = sorted(params)
    tp, pp, tf, pf = _tiny_batch(cfg, seed)

    def f(*leaves):
        p = dict(zip(names, leaves))
        props = model_forward(p, cfg, tp, pp, task="joint")
        return wta_loss(props, tf, pf)[0]

    return ad.gradcheck(f, [params[k].data for k in names], h=h)


def model_variants(base: ModelConfig = TINY) -> dict[str, ModelConfig]:
    return {
        f"{a}/{n}": replace(base, attn_variant=a, norm_variant=n)
        for a in ("unified", "cross")
        for n in ("rmsnorm", "layernorm")
    }


# metric oracles --------------------------------------------------------------


def _loop_dist(a, b) -> float:
    return float(np.sqrt(sum((float(a[c]) - float(b[c])) ** 2 for c in range(3))))


def oracle_ade(gt, pred) -> float:
    F, M = gt.shape[:2]
    return sum(_loop_dist(gt[t, m], pred[t, m]) for t in range(F) for m in range(M)) / (F * M)


def oracle_fde(gt, pred, t) -> float:
    M = gt.shape[1]
    return sum(_loop_dist(gt[t, m], pred[t, m]) for m in range(M)) / M


def oracle_ape(gt, pred, t, r) -> float:
    M = gt.shape[1]
    total = 0.0
    for m in range(M):
        total += _loop_dist(gt[t, m] - gt[t, r], pred[t, m] - pred[t, r])
    return total / M


def metric_oracle_error(trials: int = 200, seed: int = 0) -> float:
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        F, M = rng.integers(1, 6), rng.integers(1, 6)
        gt, pred = rng.standard_normal((2, F, M, 3))
        t, r = int(rng.integers(F)), int(rng.integers(M))
        worst = max(
            worst,
            abs(ade(gt, pred) - oracle_ade(gt, pred)),
            abs(fde(gt, pred, t) - oracle_fde(gt, pred, t)),
            abs(jpe(gt, pred, t) - oracle_fde(gt, pred, t)),
            abs(ape(gt, pred, t, r) - oracle_ape(gt, pred, t, r)),
        )
    return worst


def translation_error(trials: int = 200, seed: int = 0) -> float:
    """APE must ignore a common translation; JPE must move by its norm."""
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 1])
        F, M = rng.integers(1, 5), rng.integers(1, 5)
        gt = rng.standard_normal((F, M, 3))
        c = rng.standard_normal(3)
        t = int(rng.integers(F))
        worst = max(worst, abs(ape(gt, gt + c, t)), abs(jpe(gt, gt + c, t) - float(np.linalg.norm(c))))
    return worst


# shape sweep -----------------------------------------------------------------


def random_shape_case(rng: np.random.Generator) -> tuple[ModelConfig, int]:
    task = str(rng.choice(["joint", "traj_only", "pose_only"]))
    heads = int(rng.choice([1, 2, 4]))
    cfg = ModelConfig(
        n_layers=int(rng.integers(1, 3)),
        d_model=heads * int(rng.integers(1, 5)) * 2,
        n_heads=heads,
        past_frames=int(rng.integers(1, 6)),
        future_frames=int(rng.integers(1, 6)),
        n_joints=1 if task == "traj_only" else int(rng.integers(1, 6)),
        n_proposals=int(rng.integers(1, 5)),
        task_mode=task,
        attn_variant=str(rng.choice(["unified", "cross"])),
        norm_variant=str(rng.choice(["rmsnorm", "layernorm"])),
    )
    return cfg, int(rng.integers(1, 4))


def shape_mismatches(cfg: ModelConfig, batch: int, seed: int = 0) -> list[str]:
    """Compare every stage's shape with the closed-form expectation."""
    rng = np.random.default_rng(seed)
    H, F, M, K, d = cfg.past_frames, cfg.future_frames, cfg.n_joints, cfg.n_proposals, cfg.d_model
    n_streams = 2 if cfg.task_mode == "joint" else 1
    params = init_params(cfg, seed)
    tp = rng.standard_normal((batch, H, 3)) if cfg.has_traj else None
    pp = rng.standard_normal((batch, H, M, 3)) if cfg.has_pose else None
    bad = []

    def expect(name, got, want):
        if tuple(got) != tuple(want):
            bad.append(f"{name}: {tuple(got)} != {tuple(want)}")

    with ad.no_grad():
        C = embed_context(tp, pp, params, cfg)
        Q = build_queries(params, cfg)
        Z, _ = decoder_forward(C, Q, params, cfg)
        props = prediction_heads(Z, params, cfg)
    expect("context", C.shape, (batch, n_streams * H, d))
    expect("queries", Q.shape, (n_streams * F, d))
    expect("decoder", Z.shape, (batch, n_streams * F, d))
    if cfg.has_traj:
        expect("traj", props.traj.shape, (batch, K, F, 3))
    if cfg.has_pose:
        expect("pose", props.pose.shape, (batch, K, F, M, 3))
    return bad


# data invariances ------------------------------------------------------------


def normalization_translation_error(trials: int = 20, seed: int = 0) -> float:
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 2])
        seq = synth_generate("sine_gait_walker", 1, 10, 4, seed=seed + trial)[0]
        c = rng.uniform(-100, 100, 3)
        moved = replace(seq, frames=seq.frames + c)
        a, b = normalize(seq, 4, 6), normalize(moved, 4, 6)
        for key in ("traj_past", "pose_past", "traj_future", "pose_future"):
            worst = max(worst, float(np.abs(getattr(a, key) - getattr(b, key)).max()))
        worst = max(worst, float(np.abs(b.anchor - a.anchor - c).max()))
    return worst


def mapping_table_mismatches(skeleton: CanonicalSkeleton = DEFAULT_SKELETON) -> list[str]:
    got = skeleton.table()
    bad = [f"row {i + 1}: {g} != {w}" for i, (g, w) in enumerate(zip(got, REFERENCE_MAPPING_TABLE)) if tuple(g) != w]
    if len(got) != len(REFERENCE_MAPPING_TABLE):
        bad.append(f"{len(got)} rows, expected {len(REFERENCE_MAPPING_TABLE)}")
    return bad


def mapping_roundtrip_problems(skeleton: CanonicalSkeleton = DEFAULT_SKELETON) -> list[str]:
    """Present joints keep their coordinates; traj points land on Pelvis."""
    bad = []
    rng = np.random.default_rng(0)
    for sid in ("human36m", "mocap_umpm", "tdpw", "traj_point"):
        M = len(skeleton.slots(sid))
        seq = MotionSequence(
            "check", "a", 25.0, sid, rng.standard_normal((3, M, 3)), "traj_only" if sid == "traj_point" else "joint"
        )
        mapped, mask = map_to_canonical(seq, skeleton)
        slots = skeleton.slots(sid)
        for j, s in enumerate(slots):
            if s >= 0 and not np.array_equal(mapped.frames[:, s], seq.frames[:, j]):
                bad.append(f"{sid} joint {j} moved")
        if np.any(mapped.frames[:, ~mask] != 0.0):
            bad.append(f"{sid} wrote into masked slots")
    pelvis = skeleton.joint_names.index("Pelvis")
    if skeleton.slots("traj_point").tolist() != [pelvis]:
        bad.append("traj_point does not map to Pelvis")
    pts = rng.standard_normal((5, 2))
    padded = pad_2d_to_3d(pts)
    if not (np.array_equal(padded[:, :2], pts) and np.all(padded[:, 2] == 0.0)):
        bad.append("zero-Z padding does not round-trip")
    return bad


def batching_problems(sizes=(1000, 100, 100), batch_size: int = 10, epochs: int = 5, seed: int = 0) -> list[str]:
    names = [f"d{i}" for i in range(len(sizes))]
    sched = balanced_batches(list(zip(names, sizes)), batch_size, seed, epochs)
    want = min(s // batch_size for s in sizes)
    bad = []
    for e, epoch in enumerate(sched.epochs):
        counts = {n: 0 for n in names}
        for name, idx in epoch:
            counts[name] += 1
            size = sizes[names.index(name)]
            if len(idx) != batch_size or len(set(idx.tolist())) != batch_size or idx.min() < 0 or idx.max() >= size:
                bad.append(f"epoch {e}: bad batch from {name}")
        if any(c != want for c in counts.values()):
            bad.append(f"epoch {e}: batch counts {counts}, expected {want} each")
    return bad


# battery ---------------------------------------------------------------------


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as err:  # a crashing check is a failing check
        ok, detail = False, f"{type(err).__name__}: {err}"
    return CheckResult(name, bool(ok), str(detail), time.perf_counter() - t0)


def run_battery(
    *,
    op_trials: int = 100,
    metric_trials: int = 200,
    shape_cases: int = 50,
    skeleton: CanonicalSkeleton = DEFAULT_SKELETON,
    model_checks: bool = True,
) -> list[CheckResult]:
    results = []

    def ops():
        errs = op_gradient_errors(op_trials)
        worst = max(errs, key=errs.get)
        return errs[worst] < 1e-4, f"worst {worst} {errs[worst]:.2e} over {op_trials} trials"

    results.append(_timed("op_gradients", ops))
    for name, cfg in model_variants().items() if model_checks else ():
        results.append(_timed(f"model_gradient[{name}]", lambda cfg=cfg: _bound(model_gradient_error(cfg), 1e-4)))
    results.append(_timed("metric_oracles", lambda: _bound(metric_oracle_error(metric_trials), 1e-12)))
    results.append(_timed("metric_translation", lambda: _bound(translation_error(metric_trials), 1e-12)))

    def shapes():
        rng = np.random.default_rng(0)
        bad = []
        for i in range(shape_cases):
            cfg, batch = random_shape_case(rng)
            bad += [f"case {i}: {m}" for m in shape_mismatches(cfg, batch, seed=i)]
        return _listing(bad, f"{shape_cases} configurations")

    results.append(_timed("shape_sweep", shapes))
    results.append(_timed("normalize_translation", lambda: _bound(normalization_translation_error(), 1e-9)))
    results.append(_timed("mapping_table", lambda: _listing(mapping_table_mismatches(skeleton), "22 rows")))
    results.append(_timed("mapping_roundtrip", lambda: _listing(mapping_roundtrip_problems(skeleton), "4 skeletons")))
    results.append(_timed("balanced_batching", lambda: _listing(batching_problems(), "5 epochs")))
    return results


def _bound(value: float, tol: float) -> tuple[bool, str]:
    return value < tol, f"max error {value:.2e} (tolerance {tol:.0e})"


def _listing(problems: list[str], scope: str) -> tuple[bool, str]:
    if not problems:
        return True, f"ok over {scope}"
    return False, "; ".join(problems[:5]) + (f" (+{len(problems) - 5} more)" if len(problems) > 5 else "")
