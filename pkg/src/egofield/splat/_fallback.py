"""Pure-numpy reference kernels, used when the compiled core is unavailable.

Compositing runs Gaussian-major: Gaussians are visited in depth order and
each one updates the pixels of its bounding box. Because every pixel sees the
Gaussians in the same global depth order, this equals per-pixel front-to-back
compositing.
"""
from __future__ import annotations

import numpy as np


def project_forward(pos, log_scales, rots, opacity_logits, color_logits, R, t, fx, fy, cx, cy,
                    width, height, near, blur, alpha_cutoff):
    n = len(pos)
    alpha = 1.0 / (1.0 + np.exp(-opacity_logits))
    colors = 1.0 / (1.0 + np.exp(-color_logits))
    xc = pos @ R.T + t
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    depth = z.copy()
    front = z > near
    zs = np.where(front, z, 1.0)

    q = rots / np.linalg.norm(rots, axis=1, keepdims=True)
    rq = quat_to_rotmat(q)
    a = rq * np.exp(log_scales)[:, None, :]
    sigma = a @ a.transpose(0, 2, 1)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * x / (zs * zs)
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * y / (zs * zs)
    t2 = jac @ R
    cov = t2 @ sigma @ t2.transpose(0, 2, 1)
    c00 = cov[:, 0, 0] + blur
    c01 = cov[:, 0, 1]
    c11 = cov[:, 1, 1] + blur
    det = c00 * c11 - c01 * c01
    ok = front & (det >= 1e-12)
    dets = np.where(ok, det, 1.0)
    conic = np.where(ok[:, None], np.stack([c11 / dets, -c01 / dets, c00 / dets], axis=1), 0.0)
    mean2d = np.where(ok[:, None], np.stack([fx * x / zs + cx, fy * y / zs + cy], axis=1), 0.0)
    cov2d = np.where(front[:, None], np.stack([c00, c01, c11], axis=1), 0.0)

    ok &= alpha > alpha_cutoff
    m2 = 2.0 * np.log(np.where(ok, alpha, 1.0) / alpha_cutoff)
    ex = np.sqrt(np.maximum(c00 * m2, 0.0))
    ey = np.sqrt(np.maximum(c11 * m2, 0.0))
    bbox = np.zeros((n, 4), dtype=np.int64)
    bbox[:, 0] = np.maximum(0.0, np.ceil(mean2d[:, 0] - ex))
    bbox[:, 1] = np.minimum(float(width), np.floor(mean2d[:, 0] + ex) + 1.0)
    bbox[:, 2] = np.maximum(0.0, np.ceil(mean2d[:, 1] - ey))
    bbox[:, 3] = np.minimum(float(height), np.floor(mean2d[:, 1] + ey) + 1.0)
    bbox[~ok] = 0
    valid = ok & (bbox[:, 0] < bbox[:, 1]) & (bbox[:, 2] < bbox[:, 3])
    return mean2d, cov2d, conic, depth, valid, bbox, alpha, colors


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=1,
    )


def _patch(g, mean2d, conic, bbox):
    x0, x1, y0, y1 = bbox[g]
    dx = np.arange(x0, x1, dtype=np.float64)[None, :] - mean2d[g, 0]
    dy = np.arange(y0, y1, dtype=np.float64)[:, None] - mean2d[g, 1]
    ca, cb, cc = conic[g]
    power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
    return (slice(y0, y1), slice(x0, x1)), dx, dy, power


def rasterize_forward(order, mean2d, conic, alpha, colors, feats, bbox, bg_rgb, bg_feat,
                      height, width, alpha_cutoff, t_stop):
    d = feats.shape[1]
    rgb = np.zeros((height, width, 3))
    feat = np.zeros((height, width, d))
    trans = np.ones((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    done = np.zeros((height, width), dtype=bool)
    for k, g in enumerate(order):
        sl, _, _, power = _patch(g, mean2d, conic, bbox)
        al = alpha[g] * np.exp(power)
        use = (al >= alpha_cutoff) & ~done[sl]
        if not use.any():
            continue
        al = np.where(use, al, 0.0)
        w = al * trans[sl]
        rgb[sl] += w[..., None] * colors[g]
        feat[sl] += w[..., None] * feats[g]
        trans[sl] = np.where(use, trans[sl] * (1.0 - al), trans[sl])
        last[sl] = np.where(use, k + 1, last[sl])
        done[sl] |= use & (trans[sl] < t_stop)
    rgb += trans[..., None] * bg_rgb
    feat += trans[..., None] * bg_feat
    return rgb, feat, trans, last


def rasterize_backward(order, mean2d, conic, alpha, colors, feats, bbox, bg_rgb, bg_feat,
                       trans_final, last, g_rgb, g_feat, alpha_cutoff):
    n, d = feats.shape
    gm = np.zeros((n, 2))
    gc = np.zeros((n, 3))
    ga = np.zeros(n)
    gcol = np.zeros((n, 3))
    gf = np.zeros((n, d))
    trans = trans_final.copy()
    srgb = trans[..., None] * bg_rgb
    sfeat = trans[..., None] * bg_feat
    for k in range(len(order) - 1, -1, -1):
        g = order[k]
        sl, dx, dy, power = _patch(g, mean2d, conic, bbox)
        G = np.exp(power)
        al = alpha[g] * G
        use = (al >= alpha_cutoff) & (k < last[sl])
        if not use.any():
            continue
        al = np.where(use, al, 0.0)
        inv = 1.0 / (1.0 - al)
        T = trans[sl] * inv
        trans[sl] = T
        wT = (al * T)[..., None]
        grgb, gfeat = g_rgb[sl], g_feat[sl]
        dal = np.sum(grgb * (colors[g] * T[..., None] - srgb[sl] * inv[..., None]), axis=-1)
        dal += np.sum(gfeat * (feats[g] * T[..., None] - sfeat[sl] * inv[..., None]), axis=-1)
        dal = np.where(use, dal, 0.0)
        gcol[g] += np.sum(grgb * wT, axis=(0, 1))
        gf[g] += np.sum(gfeat * wT, axis=(0, 1))
        srgb[sl] += colors[g] * wT
        sfeat[sl] += feats[g] * wT
        ga[g] += np.sum(dal * G)
        dpow = dal * alpha[g] * G
        ca, cb, cc = conic[g]
        gc[g] += [np.sum(-0.5 * dx * dx * dpow), np.sum(-dx * dy * dpow), np.sum(-0.5 * dy * dy * dpow)]
        gm[g] += [np.sum((ca * dx + cb * dy) * dpow), np.sum((cb * dx + cc * dy) * dpow)]
    return gm, gc, ga, gcol, gf
