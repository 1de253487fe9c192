"""Gaussian optimisation: combined weighted loss, Adam, density control."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from egofield.optim import Adam, exp_decay
from egofield.scene import GroundTruthFrame, SceneSpec
from egofield.splat._fallback import quat_to_rotmat
from egofield.splat.camera import Camera
from egofield.splat.gaussians import GaussianSet, logit
from egofield.splat.render import Background, RenderOutput, render, render_backward
from egofield.transient import _frame_schedule, weighted_loss_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    iterations: int = 3000
    distance: str = "l1"
    lr_position: float = 1.6e-3  # multiplied by the scene extent
    lr_position_final: float = 1.6e-5
    lr_log_scale: float = 0.005
    lr_rotation: float = 0.001
    lr_opacity: float = 0.05
    lr_color: float = 0.02
    lr_feature: float = 0.01
    densify: bool = True
    densify_interval: int = 200
    densify_from: int = 200
    densify_until: Optional[int] = None  # default: half the iterations
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    percent_dense: float = 0.02
    max_gaussians: int = 3000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.distance not in ("l1", "l2"):
            raise ValueError(f"unknown distance {self.distance!r}")

    def learning_rates(self, extent: float = 1.0) -> dict[str, float]:
        return {
            "positions": self.lr_position * extent,
            "log_scales": self.lr_log_scale,
            "rotations": self.lr_rotation,
            "opacity_logits": self.lr_opacity,
            "color_logits": self.lr_color,
            "features": self.lr_feature,
        }


def total_loss(image, rendered, features, rendered_features, transient_mask, lambda1: float = 1.0,
               distance: str = "l1") -> float:
    return total_loss_grad(image, rendered, features, rendered_features, transient_mask, lambda1, distance)[0]


def total_loss_grad(image, rendered, features, rendered_features, transient_mask, lambda1: float = 1.0,
                    distance: str = "l1"):
    """Weighted photometric loss plus ``lambda1`` times the weighted feature loss.

    Returns ``(loss, d/d rendered, d/d rendered_features)``.
    """
    l_rgb, d_rgb, _ = weighted_loss_grad(image, rendered, transient_mask, distance)
    if lambda1 == 0.0 or features is None:
        return l_rgb, d_rgb, None if rendered_features is None else np.zeros_like(rendered_features)
    l_feat, d_feat, _ = weighted_loss_grad(features, rendered_features, transient_mask, distance)
    return l_rgb + lambda1 * l_feat, d_rgb, lambda1 * d_feat


# -------------------------------------------------------- initialisation

def _sample_surface(obj, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if obj.primitive == "sphere":
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return obj.center + obj.size[0] * d, d
    half = np.broadcast_to(obj.size, (3,))
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    side = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * half
    normals = np.zeros((n, 3))
    pts[np.arange(n), axis] = side * half[axis]
    normals[np.arange(n), axis] = side
    return obj.center + pts, normals


def _knn_mean_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    out = np.empty(len(points))
    for start in range(0, len(points), 512):
        block = points[start : start + 512]
        d2 = np.sum((block[:, None, :] - points[None, :, :]) ** 2, axis=-1)
        d2.sort(axis=1)
        out[start : start + 512] = np.sqrt(d2[:, 1 : k + 1]).mean(axis=1)
    return out


def init_gaussians(spec: SceneSpec, points_per_object: int = 150, background_fraction: float = 0.1,
                   feature_dim: int = 16, seed: int = 0, opacity: float = 0.1) -> GaussianSet:
    """Surface samples of every static object plus uniform points in the scene box.

    Stands in for an SfM point cloud: points carry Lambert-shaded object colour.
    """
    rng = np.random.default_rng([seed, 0x1A17])
    light = spec.light_dir / np.linalg.norm(spec.light_dir)
    pts, cols = [], []
    for obj in spec.static_objects:
        p, n = _sample_surface(obj, points_per_object, rng)
        shade = spec.ambient + (1.0 - spec.ambient) * np.clip(n @ light, 0.0, None)
        pts.append(p)
        cols.append(obj.color * shade[:, None])
    pts = np.concatenate(pts)
    cols = np.concatenate(cols)
    n_bg = int(round(background_fraction * len(pts)))
    if n_bg:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = 0.1 * (hi - lo)
        pts = np.concatenate([pts, rng.uniform(lo - pad, hi + pad, (n_bg, 3))])
        cols = np.concatenate([cols, rng.uniform(0.2, 0.8, (n_bg, 3))])
    scale = np.clip(_knn_mean_distance(pts), 1e-3, None)
    return GaussianSet.create(
        positions=pts,
        scales=np.repeat(scale[:, None], 3, axis=1),
        colors=np.clip(cols, 0.02, 0.98),
        opacities=opacity,
        feature_dim=feature_dim,
    )


# ------------------------------------------------------- density control

@dataclass
class DensityStats:
    grad_accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensityStats":
        return cls(np.zeros(n), np.zeros(n))


def densify_and_prune(g: GaussianSet, opt: Adam, stats: DensityStats, cfg: TrainConfig, extent: float,
                      rng: np.random.Generator) -> GaussianSet:
    avg = np.where(stats.count > 0, stats.grad_accum / np.maximum(stats.count, 1), 0.0)
    big_grad = avg >= cfg.grad_threshold
    room = max(cfg.max_gaussians - len(g), 0)
    if big_grad.sum() > room:
        # keep the largest gradients, ties by index
        idx = np.flatnonzero(big_grad)
        top = idx[np.lexsort((idx, -avg[idx]))][:room]
        big_grad = np.zeros(len(g), dtype=bool)
        big_grad[top] = True
    max_scale = g.scales.max(axis=1)
    clone = big_grad & (max_scale <= cfg.percent_dense * extent)
    split = big_grad & ~clone

    new_parts = []
    if clone.any():
        new_parts.append(g.subset(clone))
    if split.any():
        src = g.subset(split)
        stds = src.scales
        rots = quat_to_rotmat(src.rotations / np.linalg.norm(src.rotations, axis=1, keepdims=True))
        copies = []
        for _ in range(2):
            offs = rng.standard_normal(stds.shape) * stds
            c = src.copy()
            c.positions = src.positions + np.einsum("nij,nj->ni", rots, offs)
            c.log_scales = src.log_scales - math.log(1.6)
            copies.append(c)
        new_parts.extend(copies)

    n_old = len(g)
    rows_from = []
    if clone.any():
        rows_from.append(np.flatnonzero(clone))
    if split.any():
        rows_from.extend([np.flatnonzero(split)] * 2)
    for part in new_parts:
        g = g.concat(part)
    if rows_from:
        opt.extend(np.concatenate(rows_from))

    keep = np.ones(len(g), dtype=bool)
    keep[:n_old][split] = False  # split parents are replaced by their children
    keep &= g.opacities >= cfg.prune_opacity
    if not keep.all():
        g = g.subset(keep)
        opt.select(keep)
    return g


# -------------------------------------------------------------- training

@dataclass
class TrainResult:
    gaussians: GaussianSet
    losses: list[tuple[int, int, float]] = field(default_factory=list)  # (iteration, frame, loss)


def train(frames: Sequence[GroundTruthFrame], feature_maps: Optional[np.ndarray],
          transient_masks: Optional[np.ndarray], init: GaussianSet, background: Background,
          cfg: TrainConfig, extent: float = 1.0) -> TrainResult:
    """Fit Gaussians to the given frames.

    ``feature_maps[k]`` and ``transient_masks[k]`` (soft or binary) align with
    ``frames[k]``; either may be None (no feature loss / no weighting).
    """
    if not frames:
        raise TrainingError("no training frames")
    g = init.copy()
    lrs = cfg.learning_rates(extent)
    if feature_maps is None:
        lrs["features"] = 0.0
    opt = Adam(g.params(), lrs)
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    densify_until = cfg.densify_until if cfg.densify_until is not None else cfg.iterations // 2
    stats = DensityStats.zeros(len(g))
    schedule = _frame_schedule(len(frames), cfg.iterations, rng)
    result = TrainResult(g)
    for it, k in enumerate(schedule):
        opt.lrs["positions"] = exp_decay(lrs["positions"], cfg.lr_position_final * extent, it, cfg.iterations)
        fr = frames[k]
        out = render(g, fr.camera, background)
        mask = None if transient_masks is None else transient_masks[k]
        feats = None if feature_maps is None else feature_maps[k]
        loss, d_rgb, d_feat = total_loss_grad(
            fr.rgb, out.rgb, feats, out.features if feats is not None else None, mask, cfg.lambda1, cfg.distance
        )
        if not np.isfinite(loss):
            raise TrainingError(f"loss is not finite at iteration {it} (frame {fr.index}, {len(g)} Gaussians)")
        grads = render_backward(out, d_rgb, d_feat)
        opt.step(g.params(), grads.params())
        g.normalize_rotations()
        result.losses.append((it, fr.index, loss))

        if cfg.densify and it < densify_until:
            seen = out.projection.valid
            stats.grad_accum[seen] += np.linalg.norm(grads.mean2d[seen], axis=1)
            stats.count[seen] += 1
            if it >= cfg.densify_from and (it + 1) % cfg.densify_interval == 0:
                g = densify_and_prune(g, opt, stats, cfg, extent, rng)
                stats = DensityStats.zeros(len(g))
    result.gaussians = g
    return result


# ------------------------------------------------------------ evaluation

def psnr(image: np.ndarray, rendered: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Peak signal-to-noise ratio (peak 1.0) over masked pixels, capped at 99 dB."""
    image = np.asarray(image, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    if mask is None:
        mask = np.ones(image.shape[:2], dtype=bool)
    sel = np.asarray(mask, dtype=bool)
    if not sel.any():
        raise ValueError("empty PSNR region")
    mse = float(np.mean((image[sel] - rendered[sel]) ** 2))
    if mse <= 0.0:
        return 99.0
    return min(99.0, -10.0 * math.log10(mse))


def render_heldout(gaussians: GaussianSet, cameras: Sequence[Camera], background: Background) -> list[RenderOutput]:
    return [render(gaussians, cam, background) for cam in cameras]


def initial_opacity_logit(p: float) -> float:
    return float(logit(p))
