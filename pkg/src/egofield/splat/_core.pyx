# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled projection and per-pixel compositing kernels.

Mirrors ``_fallback.py`` operation for operation; see that module for the
reference formulation.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, ceil, floor

cnp.import_array()


def project_forward(double[:, ::1] pos, double[:, ::1] log_scales, double[:, ::1] rots,
                    double[::1] opacity_logits, double[:, ::1] color_logits,
                    double[:, ::1] R, double[::1] t, double fx, double fy, double cx, double cy,
                    int width, int height, double near, double blur, double alpha_cutoff):
    cdef Py_ssize_t n = pos.shape[0]
    mean2d_a = np.zeros((n, 2))
    cov2d_a = np.zeros((n, 3))
    conic_a = np.zeros((n, 3))
    depth_a = np.zeros(n)
    valid_a = np.zeros(n, dtype=np.uint8)
    bbox_a = np.zeros((n, 4), dtype=np.int64)
    alpha_a = np.zeros(n)
    colors_a = np.zeros((n, 3))
    cdef double[:, ::1] mean2d = mean2d_a
    cdef double[:, ::1] cov2d = cov2d_a
    cdef double[:, ::1] conic = conic_a
    cdef double[::1] depth = depth_a
    cdef unsigned char[::1] valid = valid_a
    cdef long long[:, ::1] bbox = bbox_a
    cdef double[::1] alpha = alpha_a
    cdef double[:, ::1] colors = colors_a

    cdef Py_ssize_t i, r, c, k
    cdef double x, y, z, qw, qx, qy, qz, qn, s0, s1, s2
    cdef double Rq[3][3]
    cdef double A[3][3]
    cdef double S[3][3]
    cdef double T2[2][3]
    cdef double tmp[2][3]
    cdef double J00, J02, J11, J12, c00, c01, c11, det, m2, ex, ey, mx, my, a

    for i in range(n):
        alpha[i] = 1.0 / (1.0 + exp(-opacity_logits[i]))
        for k in range(3):
            colors[i, k] = 1.0 / (1.0 + exp(-color_logits[i, k]))
        x = R[0, 0] * pos[i, 0] + R[0, 1] * pos[i, 1] + R[0, 2] * pos[i, 2] + t[0]
        y = R[1, 0] * pos[i, 0] + R[1, 1] * pos[i, 1] + R[1, 2] * pos[i, 2] + t[1]
        z = R[2, 0] * pos[i, 0] + R[2, 1] * pos[i, 1] + R[2, 2] * pos[i, 2] + t[2]
        depth[i] = z
        if z <= near:
            continue
        qn = sqrt(rots[i, 0] * rots[i, 0] + rots[i, 1] * rots[i, 1] + rots[i, 2] * rots[i, 2] + rots[i, 3] * rots[i, 3])
        qw = rots[i, 0] / qn
        qx = rots[i, 1] / qn
        qy = rots[i, 2] / qn
        qz = rots[i, 3] / qn
        Rq[0][0] = 1.0 - 2.0 * (qy * qy + qz * qz)
        Rq[0][1] = 2.0 * (qx * qy - qw * qz)
        Rq[0][2] = 2.0 * (qx * qz + qw * qy)
        Rq[1][0] = 2.0 * (qx * qy + qw * qz)
        Rq[1][1] = 1.0 - 2.0 * (qx * qx + qz * qz)
        Rq[1][2] = 2.0 * (qy * qz - qw * qx)
        Rq[2][0] = 2.0 * (qx * qz - qw * qy)
        Rq[2][1] = 2.0 * (qy * qz + qw * qx)
        Rq[2][2] = 1.0 - 2.0 * (qx * qx + qy * qy)
        s0 = exp(log_scales[i, 0])
        s1 = exp(log_scales[i, 1])
        s2 = exp(log_scales[i, 2])
        for r in range(3):
            A[r][0] = Rq[r][0] * s0
            A[r][1] = Rq[r][1] * s1
            A[r][2] = Rq[r][2] * s2
        for r in range(3):
            for c in range(3):
                S[r][c] = A[r][0] * A[c][0] + A[r][1] * A[c][1] + A[r][2] * A[c][2]
        J00 = fx / z
        J02 = -fx * x / (z * z)
        J11 = fy / z
        J12 = -fy * y / (z * z)
        for c in range(3):
            T2[0][c] = J00 * R[0, c] + J02 * R[2, c]
            T2[1][c] = J11 * R[1, c] + J12 * R[2, c]
        for r in range(2):
            for c in range(3):
                tmp[r][c] = T2[r][0] * S[0][c] + T2[r][1] * S[1][c] + T2[r][2] * S[2][c]
        c00 = tmp[0][0] * T2[0][0] + tmp[0][1] * T2[0][1] + tmp[0][2] * T2[0][2] + blur
        c01 = tmp[0][0] * T2[1][0] + tmp[0][1] * T2[1][1] + tmp[0][2] * T2[1][2]
        c11 = tmp[1][0] * T2[1][0] + tmp[1][1] * T2[1][1] + tmp[1][2] * T2[1][2] + blur
        cov2d[i, 0] = c00
        cov2d[i, 1] = c01
        cov2d[i, 2] = c11
        det = c00 * c11 - c01 * c01
        if det < 1e-12:
            continue
        conic[i, 0] = c11 / det
        conic[i, 1] = -c01 / det
        conic[i, 2] = c00 / det
        mx = fx * x / z + cx
        my = fy * y / z + cy
        mean2d[i, 0] = mx
        mean2d[i, 1] = my
        a = alpha[i]
        if a <= alpha_cutoff:
            continue
        m2 = 2.0 * log(a / alpha_cutoff)
        ex = sqrt(c00 * m2)
        ey = sqrt(c11 * m2)
        bbox[i, 0] = <long long> max(0.0, ceil(mx - ex))
        bbox[i, 1] = <long long> min(<double> width, floor(mx + ex) + 1.0)
        bbox[i, 2] = <long long> max(0.0, ceil(my - ey))
        bbox[i, 3] = <long long> min(<double> height, floor(my + ey) + 1.0)
        if bbox[i, 0] < bbox[i, 1] and bbox[i, 2] < bbox[i, 3]:
            valid[i] = 1
    return mean2d_a, cov2d_a, conic_a, depth_a, valid_a.astype(bool), bbox_a, alpha_a, colors_a


def rasterize_forward(long long[::1] order, double[:, ::1] mean2d, double[:, ::1] conic,
                      double[::1] alpha, double[:, ::1] colors, double[:, ::1] feats,
                      long long[:, ::1] bbox, double[::1] bg_rgb, double[::1] bg_feat,
                      int height, int width, double alpha_cutoff, double t_stop):
    cdef Py_ssize_t d = feats.shape[1]
    rgb_a = np.zeros((height, width, 3))
    feat_a = np.zeros((height, width, d))
    trans_a = np.ones((height, width))
    last_a = np.zeros((height, width), dtype=np.int64)
    done_a = np.zeros((height, width), dtype=np.uint8)
    cdef double[:, :, ::1] rgb = rgb_a
    cdef double[:, :, ::1] feat = feat_a
    cdef double[:, ::1] trans = trans_a
    cdef long long[:, ::1] last = last_a
    cdef unsigned char[:, ::1] done = done_a
    cdef Py_ssize_t k, g, px, py, ch, K = order.shape[0]
    cdef double dx, dy, power, al, w, T, ca, cb, cc, mx, my

    for k in range(K):
        g = order[k]
        ca = conic[g, 0]
        cb = conic[g, 1]
        cc = conic[g, 2]
        mx = mean2d[g, 0]
        my = mean2d[g, 1]
        for py in range(bbox[g, 2], bbox[g, 3]):
            for px in range(bbox[g, 0], bbox[g, 1]):
                if done[py, px]:
                    continue
                dx = px - mx
                dy = py - my
                power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
                al = alpha[g] * exp(power)
                if al < alpha_cutoff:
                    continue
                T = trans[py, px]
                w = al * T
                for ch in range(3):
                    rgb[py, px, ch] += w * colors[g, ch]
                for ch in range(d):
                    feat[py, px, ch] += w * feats[g, ch]
                T = T * (1.0 - al)
                trans[py, px] = T
                last[py, px] = k + 1
                if T < t_stop:
                    done[py, px] = 1
    for py in range(height):
        for px in range(width):
            T = trans[py, px]
            for ch in range(3):
                rgb[py, px, ch] += T * bg_rgb[ch]
            for ch in range(d):
                feat[py, px, ch] += T * bg_feat[ch]
    return rgb_a, feat_a, trans_a, last_a


def rasterize_backward(long long[::1] order, double[:, ::1] mean2d, double[:, ::1] conic,
                       double[::1] alpha, double[:, ::1] colors, double[:, ::1] feats,
                       long long[:, ::1] bbox, double[::1] bg_rgb, double[::1] bg_feat,
                       double[:, ::1] trans_final, long long[:, ::1] last,
                       double[:, :, ::1] g_rgb, double[:, :, ::1] g_feat, double alpha_cutoff):
    cdef Py_ssize_t n = mean2d.shape[0], d = feats.shape[1]
    cdef Py_ssize_t height = trans_final.shape[0], width = trans_final.shape[1]
    gm_a = np.zeros((n, 2))
    gc_a = np.zeros((n, 3))
    ga_a = np.zeros(n)
    gcol_a = np.zeros((n, 3))
    gf_a = np.zeros((n, d))
    # running transmittance and suffix colour/feature sums, per pixel
    trans_a = np.array(trans_final, copy=True)
    srgb_a = np.zeros((height, width, 3))
    sfeat_a = np.zeros((height, width, d))
    cdef double[:, ::1] gm = gm_a
    cdef double[:, ::1] gc = gc_a
    cdef double[::1] ga = ga_a
    cdef double[:, ::1] gcol = gcol_a
    cdef double[:, ::1] gf = gf_a
    cdef double[:, ::1] trans = trans_a
    cdef double[:, :, ::1] srgb = srgb_a
    cdef double[:, :, ::1] sfeat = sfeat_a
    cdef Py_ssize_t k, g, px, py, ch, K = order.shape[0]
    cdef double dx, dy, power, G, al, T, inv, dal, dG, dpow, ca, cb, cc, mx, my
    cdef double acc_a, acc_ca, acc_cb, acc_cc, acc_mx, acc_my

    for py in range(height):
        for px in range(width):
            T = trans[py, px]
            for ch in range(3):
                srgb[py, px, ch] = T * bg_rgb[ch]
            for ch in range(d):
                sfeat[py, px, ch] = T * bg_feat[ch]

    for k in range(K - 1, -1, -1):
        g = order[k]
        ca = conic[g, 0]
        cb = conic[g, 1]
        cc = conic[g, 2]
        mx = mean2d[g, 0]
        my = mean2d[g, 1]
        acc_a = 0.0
        acc_ca = 0.0
        acc_cb = 0.0
        acc_cc = 0.0
        acc_mx = 0.0
        acc_my = 0.0
        for py in range(bbox[g, 2], bbox[g, 3]):
            for px in range(bbox[g, 0], bbox[g, 1]):
                if k >= last[py, px]:
                    continue
                dx = px - mx
                dy = py - my
                power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
                G = exp(power)
                al = alpha[g] * G
                if al < alpha_cutoff:
                    continue
                inv = 1.0 / (1.0 - al)
                T = trans[py, px] * inv
                trans[py, px] = T
                dal = 0.0
                for ch in range(3):
                    dal += g_rgb[py, px, ch] * (colors[g, ch] * T - srgb[py, px, ch] * inv)
                    gcol[g, ch] += g_rgb[py, px, ch] * al * T
                    srgb[py, px, ch] += colors[g, ch] * al * T
                for ch in range(d):
                    dal += g_feat[py, px, ch] * (feats[g, ch] * T - sfeat[py, px, ch] * inv)
                    gf[g, ch] += g_feat[py, px, ch] * al * T
                    sfeat[py, px, ch] += feats[g, ch] * al * T
                acc_a += dal * G
                dG = dal * alpha[g]
                dpow = dG * G
                acc_ca += -0.5 * dx * dx * dpow
                acc_cb += -dx * dy * dpow
                acc_cc += -0.5 * dy * dy * dpow
                acc_mx += (ca * dx + cb * dy) * dpow
                acc_my += (cb * dx + cc * dy) * dpow
        ga[g] += acc_a
        gc[g, 0] += acc_ca
        gc[g, 1] += acc_cb
        gc[g, 2] += acc_cc
        gm[g, 0] += acc_mx
        gm[g, 1] += acc_my
    return gm_a, gc_a, ga_a, gcol_a, gf_a
