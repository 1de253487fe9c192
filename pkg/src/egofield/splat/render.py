"""Differentiable Gaussian splatting: projection, compositing, analytic backward.

The compositing kernels live in a compiled extension (``_core``) with a
numpy fallback (``_fallback``); which one is used is decided at import time
and can be forced with ``EGOFIELD_BACKEND=python``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from types import ModuleType
from typing import Optional, Sequence

import numpy as np

from egofield.splat import _fallback
from egofield.splat._fallback import quat_to_rotmat
from egofield.splat.camera import Camera
from egofield.splat.gaussians import GaussianSet

NEAR = 0.01
BLUR = 0.3
ALPHA_CUTOFF = 1e-6
T_STOP = 1e-4


def _load_compiled() -> Optional[ModuleType]:
    if os.environ.get("EGOFIELD_BACKEND", "").lower() == "python":
        return None
    try:
        from egofield.splat import _core
    except ImportError:
        return None
    return _core


_compiled = _load_compiled()
BACKEND = "compiled" if _compiled is not None else "python"


def get_kernels(backend: Optional[str] = None) -> ModuleType:
    if backend is None:
        backend = BACKEND
    if backend == "python":
        return _fallback
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled core not built; run `pip install -e .` or use backend='python'")
        return _compiled
    raise ValueError(f"unknown backend {backend!r}")


def available_backends() -> list[str]:
    return ["compiled", "python"] if _compiled is not None else ["python"]


@dataclass(frozen=True)
class Background:
    rgb: np.ndarray
    feature: np.ndarray

    @classmethod
    def make(cls, rgb=(0.0, 0.0, 0.0), feature=None, feature_dim: int = 0) -> "Background":
        feat = np.zeros(feature_dim) if feature is None else np.asarray(feature, dtype=np.float64)
        return cls(np.asarray(rgb, dtype=np.float64).reshape(3), feat.reshape(-1))


@dataclass
class Projection:
    mean2d: np.ndarray
    cov2d: np.ndarray  # (N, 3): c00, c01, c11, blur included
    conic: np.ndarray  # (N, 3): inverse covariance a, b, c
    depth: np.ndarray
    valid: np.ndarray
    bbox: np.ndarray  # (N, 4): x0, x1, y0, y1, half-open
    alpha: np.ndarray
    colors: np.ndarray


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    features: np.ndarray  # (H, W, d)
    alpha: np.ndarray  # (H, W)
    # records for the backward pass
    gaussians: GaussianSet = field(repr=False)
    camera: Camera = field(repr=False)
    background: Background = field(repr=False)
    projection: Projection = field(repr=False)
    order: np.ndarray = field(repr=False)
    transmittance: np.ndarray = field(repr=False)
    last: np.ndarray = field(repr=False)
    backend: str = "python"


@dataclass
class GaussianGrads:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    features: np.ndarray
    mean2d: np.ndarray  # screen-space position gradient, used by densification

    def params(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
            "color_logits": self.color_logits,
            "features": self.features,
        }


def project_all(gaussians: GaussianSet, cam: Camera, backend: Optional[str] = None) -> Projection:
    k = get_kernels(backend)
    out = k.project_forward(
        gaussians.positions, gaussians.log_scales, gaussians.rotations, gaussians.opacity_logits,
        gaussians.color_logits, np.ascontiguousarray(cam.rotation), np.ascontiguousarray(cam.translation),
        float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy), int(cam.width), int(cam.height),
        NEAR, BLUR, ALPHA_CUTOFF,
    )
    return Projection(*out)


def project(gaussians: GaussianSet, index: int, cam: Camera) -> Optional[dict]:
    """Project one Gaussian. Returns None when it sits behind the near plane."""
    p = project_all(gaussians.subset([index]), cam)
    if p.depth[0] <= NEAR:
        return None
    c00, c01, c11 = p.cov2d[0]
    return {"mean2d": p.mean2d[0], "cov2d": np.array([[c00, c01], [c01, c11]]), "depth": float(p.depth[0])}


def depth_order(gaussians: GaussianSet, proj: Projection) -> np.ndarray:
    """Valid Gaussians front to back; ties broken by parameter values, not list position."""
    idx = np.flatnonzero(proj.valid)
    if len(idx) == 0:
        return idx.astype(np.int64)
    keys = [gaussians.features[idx, c] for c in range(gaussians.feature_dim - 1, -1, -1)]
    keys += [gaussians.color_logits[idx, c] for c in (2, 1, 0)]
    keys += [gaussians.opacity_logits[idx]]
    keys += [gaussians.rotations[idx, c] for c in (3, 2, 1, 0)]
    keys += [gaussians.log_scales[idx, c] for c in (2, 1, 0)]
    keys += [gaussians.positions[idx, c] for c in (2, 1, 0)]
    keys += [proj.depth[idx]]
    return np.ascontiguousarray(idx[np.lexsort(keys)], dtype=np.int64)


def render(gaussians: GaussianSet, cam: Camera, background: Background, backend: Optional[str] = None) -> RenderOutput:
    backend = backend or BACKEND
    k = get_kernels(backend)
    d = gaussians.feature_dim
    if len(background.feature) != d:
        raise ValueError(f"background feature has dim {len(background.feature)}, Gaussians have {d}")
    proj = project_all(gaussians, cam, backend)
    order = depth_order(gaussians, proj)
    rgb, feat, trans, last = k.rasterize_forward(
        order, proj.mean2d, proj.conic, proj.alpha, proj.colors, np.ascontiguousarray(gaussians.features),
        proj.bbox, background.rgb, np.ascontiguousarray(background.feature, dtype=np.float64),
        int(cam.height), int(cam.width), ALPHA_CUTOFF, T_STOP,
    )
    return RenderOutput(rgb, feat, 1.0 - trans, gaussians, cam, background, proj, order, trans, last, backend)


def render_backward(out: RenderOutput, grad_rgb: Optional[np.ndarray] = None,
                    grad_features: Optional[np.ndarray] = None) -> GaussianGrads:
    """Gradients of a scalar loss w.r.t. the raw Gaussian parameters.

    ``grad_rgb``/``grad_features`` are the loss gradients on the rendered
    image and feature map; either may be omitted (treated as zero).
    """
    g = out.gaussians
    h, w = out.rgb.shape[:2]
    d = g.feature_dim
    grad_rgb = np.zeros((h, w, 3)) if grad_rgb is None else np.ascontiguousarray(grad_rgb, dtype=np.float64)
    grad_features = (
        np.zeros((h, w, d)) if grad_features is None else np.ascontiguousarray(grad_features, dtype=np.float64)
    )
    k = get_kernels(out.backend)
    p = out.projection
    gm, gcon, galpha, gcol, gfeat = k.rasterize_backward(
        out.order, p.mean2d, p.conic, p.alpha, p.colors, np.ascontiguousarray(g.features), p.bbox,
        out.background.rgb, np.ascontiguousarray(out.background.feature, dtype=np.float64),
        out.transmittance, out.last, grad_rgb, grad_features, ALPHA_CUTOFF,
    )
    gpos, gls, grot = _project_backward(g, out.camera, p, gm, gcon)
    return GaussianGrads(
        positions=gpos,
        log_scales=gls,
        rotations=grot,
        opacity_logits=galpha * p.alpha * (1.0 - p.alpha),
        color_logits=gcol * p.colors * (1.0 - p.colors),
        features=gfeat,
        mean2d=gm,
    )


def _project_backward(g: GaussianSet, cam: Camera, p: Projection, gm: np.ndarray, gcon: np.ndarray):
    n = len(g)
    gpos = np.zeros((n, 3))
    gls = np.zeros((n, 3))
    grot = np.zeros((n, 4))
    idx = np.flatnonzero(p.valid)
    if len(idx) == 0:
        return gpos, gls, grot
    W = cam.rotation
    fx, fy = cam.fx, cam.fy
    xc = g.positions[idx] @ W.T + cam.translation
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]

    # conic -> covariance
    c00, c01, c11 = p.cov2d[idx, 0], p.cov2d[idx, 1], p.cov2d[idx, 2]
    det = c00 * c11 - c01 * c01
    det2 = det * det
    ga, gb, gc = gcon[idx, 0], gcon[idx, 1], gcon[idx, 2]
    g00 = ga * (-c11 * c11 / det2) + gb * (c01 * c11 / det2) + gc * (1.0 / det - c00 * c11 / det2)
    g11 = ga * (1.0 / det - c11 * c00 / det2) + gb * (c01 * c00 / det2) + gc * (-c00 * c00 / det2)
    g01 = ga * (2.0 * c11 * c01 / det2) + gb * (-1.0 / det - 2.0 * c01 * c01 / det2) + gc * (2.0 * c00 * c01 / det2)
    gcov = np.empty((len(idx), 2, 2))
    gcov[:, 0, 0] = g00
    gcov[:, 1, 1] = g11
    gcov[:, 0, 1] = gcov[:, 1, 0] = 0.5 * g01

    # covariance -> Sigma, J
    q_raw = g.rotations[idx]
    qn = np.linalg.norm(q_raw, axis=1)
    q = q_raw / qn[:, None]
    rq = quat_to_rotmat(q)
    s = np.exp(g.log_scales[idx])
    a = rq * s[:, None, :]
    sigma = a @ a.transpose(0, 2, 1)
    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    t2 = jac @ W
    gsigma = t2.transpose(0, 2, 1) @ gcov @ t2
    gt2 = 2.0 * gcov @ t2 @ sigma
    gjac = gt2 @ W.T

    gx = gjac[:, 0, 2] * (-fx / (z * z))
    gy = gjac[:, 1, 2] * (-fy / (z * z))
    gz = (
        gjac[:, 0, 0] * (-fx / (z * z)) + gjac[:, 0, 2] * (2.0 * fx * x / z**3)
        + gjac[:, 1, 1] * (-fy / (z * z)) + gjac[:, 1, 2] * (2.0 * fy * y / z**3)
    )
    gmx, gmy = gm[idx, 0], gm[idx, 1]
    gx = gx + gmx * fx / z
    gy = gy + gmy * fy / z
    gz = gz - gmx * fx * x / (z * z) - gmy * fy * y / (z * z)
    gpos[idx] = np.stack([gx, gy, gz], axis=1) @ W

    # Sigma -> scale, rotation
    ga_mat = 2.0 * gsigma @ a
    gs = np.sum(ga_mat * rq, axis=1)
    gls[idx] = gs * s
    gR = ga_mat * s[:, None, :]
    w_, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = gR
    gw = 2 * (-qz * r[:, 0, 1] + qy * r[:, 0, 2] + qz * r[:, 1, 0] - qx * r[:, 1, 2] - qy * r[:, 2, 0] + qx * r[:, 2, 1])
    gqx = 2 * (qy * r[:, 0, 1] + qz * r[:, 0, 2] + qy * r[:, 1, 0] - 2 * qx * r[:, 1, 1] - w_ * r[:, 1, 2]
               + qz * r[:, 2, 0] + w_ * r[:, 2, 1] - 2 * qx * r[:, 2, 2])
    gqy = 2 * (-2 * qy * r[:, 0, 0] + qx * r[:, 0, 1] + w_ * r[:, 0, 2] + qx * r[:, 1, 0] + qz * r[:, 1, 2]
               - w_ * r[:, 2, 0] + qz * r[:, 2, 1] - 2 * qy * r[:, 2, 2])
    gqz = 2 * (-2 * qz * r[:, 0, 0] - w_ * r[:, 0, 1] + qx * r[:, 0, 2] + w_ * r[:, 1, 0] - 2 * qz * r[:, 1, 1]
               + qy * r[:, 1, 2] + qx * r[:, 2, 0] + qy * r[:, 2, 1])
    gq = np.stack([gw, gqx, gqy, gqz], axis=1)
    gq = (gq - q * np.sum(q * gq, axis=1, keepdims=True)) / qn[:, None]
    grot[idx] = gq
    return gpos, gls, grot


def render_many(gaussians: GaussianSet, cameras: Sequence[Camera], background: Background) -> list[RenderOutput]:
    return [render(gaussians, cam, background) for cam in cameras]
