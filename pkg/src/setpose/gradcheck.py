"""Finite-difference verification suite for every differentiable operation.

Per-operation checks perturb small random inputs elementwise with central
differences; the full network is checked with a directional derivative over
all parameters at once (two forward passes per seed), which keeps the whole
suite inside a tight runtime budget. ``corrupt`` deliberately scales one
check's analytic gradient and exists purely as a negative control for the
suite itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from setpose import tensor as T
from setpose.attention import (
    AttentionConfig,
    DeformableConfig,
    deformable_attention,
    init_deformable_params,
    init_mha_params,
    multi_head_attention,
    scaled_dot_attention,
)
from setpose.losses import (
    FocalParams,
    LossWeights,
    composite_loss,
    focal_loss_class,
    gaussian_heatmap_render,
    heatmap_focal_loss,
    l1_keypoint_loss,
    oks_loss,
)
from setpose.matching import build_cost_matrix, hungarian
from setpose.model import ModelConfig, attach_params, forward, init_params
from setpose.synth import MINI_SKELETON, SceneSpec, generate_scene
from setpose.tensor import RngState, Tape, Tensor, backward, finite_diff_grad, grad_of, max_rel_error

DEFAULT_TOL = 1e-4
MODEL_TOL = 1e-3

TINY_MODEL = ModelConfig(
    image_size=(8, 8), patch=4, d_model=8, heads=2, encoder_layers=1, decoder_layers=1,
    num_queries=3, num_keypoints=2, ffn_dim=16,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tol


def _elementwise_check(build: Callable, seeds: range, eps: float = 1e-5, scale: float = 1.0) -> float:
    """Worst relative error of analytic vs central differences over seeds.

    ``build(rng) -> (x0, f)`` with ``f`` a pure scalar function of one tensor.
    ``scale`` multiplies the analytic gradient (the corruption hook).
    """
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x0, f = build(rng)
        tape = Tape()
        x = tape.leaf(x0)
        grads = backward(tape, f(x))
        numeric = finite_diff_grad(f, Tensor(x0), eps=eps)
        worst = max(worst, max_rel_error(scale * grad_of(grads, x), numeric.data))
    return worst


# -- per-operation builders ------------------------------------------------------


def _matmul_case(rng):
    b = Tensor(rng.uniform(-2, 2, (4, 3)))
    w = Tensor(rng.uniform(-2, 2, (3, 3)))
    return rng.uniform(-2, 2, (3, 4)), lambda x: (T.matmul(x, b) * w).sum()


def _softmax_case(rng):
    w = Tensor(rng.uniform(-2, 2, (3, 5)))
    return rng.uniform(-2, 2, (3, 5)), lambda x: (T.softmax_rows(x) * w).sum()


def _bilinear_map_case(rng):
    pts = Tensor(rng.uniform(0.2, 3.4, (6, 2)))
    w = Tensor(rng.uniform(-1, 1, (6, 2)))
    return rng.uniform(-2, 2, (4, 5, 2)), lambda x: (T.bilinear_sample(x, pts) * w).sum()


def _bilinear_points_case(rng):
    fmap = Tensor(rng.uniform(-2, 2, (4, 5, 2)))
    w = Tensor(rng.uniform(-1, 1, (6, 2)))
    return rng.uniform(0.2, 2.6, (6, 2)), lambda x: (T.bilinear_sample(fmap, x) * w).sum()


def _scaled_dot_case(rng):
    k = Tensor(rng.uniform(-2, 2, (4, 3)))
    v = Tensor(rng.uniform(-2, 2, (4, 2)))
    w = Tensor(rng.uniform(-1, 1, (3, 2)))
    return rng.uniform(-2, 2, (3, 3)), lambda q: (scaled_dot_attention(q, k, v) * w).sum()


def _multi_head_case(rng):
    cfg = AttentionConfig(d_model=4, heads=2)
    params = init_mha_params(cfg, RngState(int(rng.integers(0, 2**31))))
    x_kv = Tensor(rng.uniform(-1, 1, (5, 4)))
    w = Tensor(rng.uniform(-1, 1, (3, 4)))
    return rng.uniform(-1, 1, (3, 4)), lambda x: (multi_head_attention(x, x_kv, cfg, params) * w).sum()


def _deformable_case(rng):
    cfg = DeformableConfig(sample_points=2)
    fixed = init_deformable_params(2, cfg, RngState(int(rng.integers(0, 2**31))))
    fmap = Tensor(rng.uniform(-1, 1, (4, 4, 2)))
    refs = rng.uniform(0.8, 2.2, (3, 2))
    w = Tensor(rng.uniform(-1, 1, (3, 2)))

    def f(q):
        return (deformable_attention(q, refs, fmap, cfg, fixed) * w).sum()

    return rng.uniform(-1, 1, (3, 2)), f


def _focal_case(rng):
    labels = rng.integers(0, 2, 6)
    return rng.uniform(0.05, 0.95, 6), lambda p: focal_loss_class(p, labels, FocalParams())


def _heatmap_focal_case(rng):
    gt = gaussian_heatmap_render([[1.0, 1.0, 2.0]], 3, 3, sigma=0.8)
    return rng.uniform(0.05, 0.95, gt.shape), lambda p: heatmap_focal_loss(p, gt)


def _l1_case(rng):
    gt = rng.uniform(0.1, 0.9, (4, 2))
    vis = np.array([2, 2, 0, 1])
    return gt + rng.uniform(-0.3, 0.3, (4, 2)) + 0.013, lambda p: l1_keypoint_loss(p, gt, vis)


def _oks_case(rng):
    gt = rng.uniform(2.0, 10.0, (4, 2))
    vis = np.array([2, 1, 2, 2])
    sig = np.full(4, 0.1)
    return gt + rng.uniform(-2, 2, (4, 2)), lambda p: oks_loss(p, gt, vis, area=40.0, sigmas=sig)


OP_CHECKS: dict[str, tuple[Callable, float]] = {
    "core.matmul": (_matmul_case, DEFAULT_TOL),
    "core.softmax_rows": (_softmax_case, DEFAULT_TOL),
    "core.bilinear_sample/map": (_bilinear_map_case, DEFAULT_TOL),
    "core.bilinear_sample/points": (_bilinear_points_case, DEFAULT_TOL),
    "attention.scaled_dot": (_scaled_dot_case, DEFAULT_TOL),
    "attention.multi_head": (_multi_head_case, DEFAULT_TOL),
    "attention.deformable": (_deformable_case, DEFAULT_TOL),
    "losses.focal_class": (_focal_case, DEFAULT_TOL),
    "losses.heatmap_focal": (_heatmap_focal_case, DEFAULT_TOL),
    "losses.l1_keypoints": (_l1_case, DEFAULT_TOL),
    "losses.oks": (_oks_case, DEFAULT_TOL),
}


# -- full-model directional check ----------------------------------------------------


def _flatten(params: dict[str, Tensor]) -> np.ndarray:
    return np.concatenate([params[name].data.reshape(-1) for name in sorted(params)])


def _load_flat(params: dict[str, Tensor], theta: np.ndarray) -> None:
    off = 0
    for name in sorted(params):
        n = params[name].data.size
        params[name].data = theta[off : off + n].reshape(params[name].shape).copy()
        off += n


def _model_loss(cfg: ModelConfig, params: dict[str, Tensor], image, gts, assignment, tape=None) -> Tensor:
    if tape is not None:
        attach_params(params, tape)
    pose, hm = forward(image, cfg, params, tape=tape)
    _, total = composite_loss(
        pose, hm, gts, assignment, LossWeights(), FocalParams(),
        image_size=cfg.image_size, sigmas=np.array(MINI_SKELETON.sigmas[: cfg.num_keypoints]),
    )
    return total


def model_directional_check(cfg: ModelConfig = TINY_MODEL, seed: int = 0, eps: float = 1e-6, scale: float = 1.0) -> float:
    """Directional derivative of the composite loss over all parameters.

    The matching is computed once at the base point and held fixed, since the
    assignment is a discrete decision outside the differentiable path.
    """
    spec = SceneSpec(seed=seed, n_persons=1, image_size=cfg.image_size, skeleton=MINI_SKELETON)
    image, gts = generate_scene(spec)
    for g in gts:  # the tiny model regresses only the first K joints
        g.keypoints = g.keypoints[: cfg.num_keypoints]
    params = init_params(cfg, RngState(seed))
    # the zero offset init pins every sample on a bilinear cell corner, the
    # sampler's non-differentiable seam; check the gradient at a generic point
    nudge = RngState(seed + 7777)
    for name in params:
        if name.endswith(".att.b_off"):
            u = nudge.uniform(params[name].shape, -1.0, 1.0)
            params[name].data = params[name].data + np.sign(u) * (0.07 + 0.12 * np.abs(u))
    pose, _ = forward(image, cfg, params)
    cost = build_cost_matrix(
        pose, gts, LossWeights(), sigmas=np.array(MINI_SKELETON.sigmas[: cfg.num_keypoints]),
        image_size=cfg.image_size,
    )
    assignment = hungarian(cost)

    tape = Tape()
    total = _model_loss(cfg, params, image, gts, assignment, tape=tape)
    grads = backward(tape, total)
    flat_grad = np.concatenate([grad_of(grads, params[name]).reshape(-1) for name in sorted(params)])

    rng = np.random.default_rng(seed)
    theta0 = _flatten(params)
    direction = rng.standard_normal(theta0.size)
    direction /= np.linalg.norm(direction)

    def loss_at(theta: np.ndarray) -> float:
        _load_flat(params, theta)
        try:
            return float(_model_loss(cfg, params, image, gts, assignment).data)
        finally:
            _load_flat(params, theta0)

    numeric = (loss_at(theta0 + eps * direction) - loss_at(theta0 - eps * direction)) / (2.0 * eps)
    analytic = float(flat_grad @ direction) * scale
    return max_rel_error(np.array([analytic]), np.array([numeric]))


# -- the suite ---------------------------------------------------------------------------


def run_suite(seed: int = 0, trials: int = 20, corrupt: str | None = None) -> list[CheckResult]:
    """Run every check once; ``corrupt`` names a check whose analytic gradient
    is deliberately scaled so callers can verify the suite detects breakage."""
    results = []
    for name, (build, tol) in OP_CHECKS.items():
        scale = 1.01 if corrupt == name else 1.0
        seeds = range(seed * 10_000, seed * 10_000 + trials)
        results.append(CheckResult(name, _elementwise_check(build, seeds, scale=scale), tol))
    worst_model = 0.0
    for s in range(trials):
        scale = 1.01 if corrupt == "model.composite" else 1.0
        worst_model = max(worst_model, model_directional_check(TINY_MODEL, seed=seed + s, scale=scale))
    results.append(CheckResult("model.composite", worst_model, MODEL_TOL))
    return results
