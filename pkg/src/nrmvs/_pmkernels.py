"""Numba kernels for non-rigid PatchMatch.

Pixels are updated in a red/black checkerboard. Every propagation neighbour
of a pixel has the opposite parity, so one half-step reads only values
written by the previous half-step and rows can be processed in parallel with
an outcome independent of the thread count. Random numbers come from
``hash_uniform`` keyed on (seed, x, y, step, draw).
"""

import numpy as np
from numba import njit, prange

from ._kernels import (
    OK,
    approx_inverse_point_normal,
    deform_point_normal,
    hash_uniform,
    plane_transfer_ws,
    weighted_ncc,
)

OFFSETS = np.array(
    [[-1, 0], [1, 0], [0, -1], [0, 1], [-5, 0], [5, 0], [0, -5], [0, 5]], dtype=np.int64
)


@njit(cache=True, parallel=True)
def ref_windows(img, radius, sigma_c, sigma_s):
    """Bilateral weights and weighted moments of every integer-pixel window.

    Returns ``weights (H, W, n)``, ``moments (H, W, 3)`` holding
    ``(sum w, sum w a, sum w a^2)``, and a per-pixel flag that is false when
    the window leaves the image or is flat (every hypothesis would score
    ``rho = 0`` there).
    """
    h, w = img.shape
    side = 2 * radius + 1
    weights = np.zeros((h, w, side * side))
    moments = np.zeros((h, w, 3))
    inside = np.zeros((h, w), dtype=np.bool_)
    inv2c = 1.0 / (2.0 * sigma_c * sigma_c)
    inv2s = 1.0 / (2.0 * sigma_s * sigma_s)
    for y in prange(radius, h - radius):
        for x in range(radius, w - radius):
            c0 = img[y, x]
            sw = 0.0
            sr = 0.0
            srr = 0.0
            j = 0
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    a = img[y + dy, x + dx]
                    dc = a - c0
                    wt = np.exp(-dc * dc * inv2c - (dx * dx + dy * dy) * inv2s)
                    weights[y, x, j] = wt
                    sw += wt
                    sr += wt * a
                    srr += wt * a * a
                    j += 1
            moments[y, x, 0] = sw
            moments[y, x, 1] = sr
            moments[y, x, 2] = srr
            mr = sr / sw
            inside[y, x] = srr / sw - mr * mr >= 1e-10
    return weights, moments, inside


@njit(cache=True)
def _to_canonical(X, n, g, Rn_t, Tn_t, ident_t, k, xc, nc):
    if ident_t:
        for r in range(3):
            xc[r] = X[r]
            nc[r] = n[r]
        return OK
    return approx_inverse_point_normal(X, n, g, Rn_t, Tn_t, k, xc, nc)


@njit(cache=True)
def _to_support(xc, nc, g, Rn, Tn, ident, k, xs, ns):
    if ident:
        for r in range(3):
            xs[r] = xc[r]
            ns[r] = nc[r]
        return OK
    return deform_point_normal(xc, nc, g, Rn, Tn, k, xs, ns)


@njit(cache=True)
def pixel_ray(x, y, K_inv, R, out):
    """World direction of pixel (x, y), scaled so that its camera z is 1."""
    cx = K_inv[0, 0] * x + K_inv[0, 1] * y + K_inv[0, 2]
    cy = K_inv[1, 0] * x + K_inv[1, 1] * y + K_inv[1, 2]
    cz = K_inv[2, 0] * x + K_inv[2, 1] * y + K_inv[2, 2]
    for r in range(3):
        out[r] = R[0, r] * cx + R[1, r] * cy + R[2, r] * cz


@njit(cache=True)
def eval_hypothesis(
    x, y, depth, n,
    img_t, Kt_inv, Rt, tt, Ct, weights, moments, inside,
    src_imgs, Ks, Rs, ts,
    g, Rn_t, Tn_t, ident_t, Rn_s, Tn_s, ident_s, k, radius, rho_out, ws, gvec,
):
    """Cost ``mean_s (1 - rho_s)`` of plane hypothesis (depth, n) at pixel (x, y).

    Invalid samples (window outside an image, flat patch, failed transport)
    score ``rho = 0``. Fills ``rho_out`` with the per-support values.
    ``ws`` (11, 3, 3) and ``gvec`` (4,) are scratch arrays.
    """
    S = src_imgs.shape[0]
    for s in range(S):
        rho_out[s] = 0.0
    if not inside[y, x]:
        return 1.0
    X = ws[8, 0]
    xc = ws[8, 1]
    nc = ws[8, 2]
    xs = ws[9, 0]
    ns = ws[9, 1]
    ray = ws[9, 2]
    Hm = ws[10]
    pixel_ray(x, y, Kt_inv, Rt, ray)
    for r in range(3):
        X[r] = Ct[r] + depth * ray[r]
    if _to_canonical(X, n, g, Rn_t, Tn_t, ident_t, k, xc, nc) != OK:
        return 1.0
    sw = moments[y, x, 0]
    sr = moments[y, x, 1]
    srr = moments[y, x, 2]
    total = 0.0
    for s in range(S):
        rho = 0.0
        if _to_support(xc, nc, g, Rn_s[s], Tn_s[s], ident_s[s], k, xs, ns) == OK:
            if plane_transfer_ws(Kt_inv, Rt, tt, Ks[s], Rs[s], ts[s], X, n, xs, ns, Hm, gvec, ws) == OK:
                img_s = src_imgs[s]
                hs, wsz = img_s.shape
                umax = wsz - 1.0
                vmax = hs - 1.0
                ss = 0.0
                sss = 0.0
                srs = 0.0
                ok = True
                j = 0
                for dy in range(-radius, radius + 1):
                    v = y + dy
                    for dx in range(-radius, radius + 1):
                        u = x + dx
                        den = gvec[0] * u + gvec[1] * v + gvec[2]
                        pz = Hm[2, 0] * u + Hm[2, 1] * v + Hm[2, 2]
                        # the ray must hit the plane in front of both cameras
                        if den * gvec[3] <= 0.0 or pz * den * gvec[3] <= 0.0:
                            ok = False
                            break
                        px = (Hm[0, 0] * u + Hm[0, 1] * v + Hm[0, 2]) / pz
                        py = (Hm[1, 0] * u + Hm[1, 1] * v + Hm[1, 2]) / pz
                        if not (px >= 0.0 and py >= 0.0 and px <= umax and py <= vmax):
                            ok = False
                            break
                        x0 = int(px)
                        y0 = int(py)
                        if x0 >= wsz - 1:
                            x0 = wsz - 2
                        if y0 >= hs - 1:
                            y0 = hs - 2
                        ax = px - x0
                        ay = py - y0
                        b = (1.0 - ay) * ((1.0 - ax) * img_s[y0, x0] + ax * img_s[y0, x0 + 1]) + ay * (
                            (1.0 - ax) * img_s[y0 + 1, x0] + ax * img_s[y0 + 1, x0 + 1]
                        )
                        wt = weights[y, x, j]
                        ss += wt * b
                        sss += wt * b * b
                        srs += wt * b * img_t[v, u]
                        j += 1
                    if not ok:
                        break
                if ok and not np.isnan(ss):
                    rho, _ = weighted_ncc(sw, sr, ss, srr, sss, srs)
        rho_out[s] = rho
        total += 1.0 - rho
    return total / S


@njit(cache=True)
def _random_normal(seed, x, y, step, draw0, ray, out):
    """Uniform direction on the hemisphere facing the camera (n . ray < 0)."""
    z = 2.0 * hash_uniform(seed, x, y, step, draw0) - 1.0
    phi = 2.0 * np.pi * hash_uniform(seed, x, y, step, draw0 + 1)
    rxy = np.sqrt(max(0.0, 1.0 - z * z))
    out[0] = rxy * np.cos(phi)
    out[1] = rxy * np.sin(phi)
    out[2] = z
    if out[0] * ray[0] + out[1] * ray[1] + out[2] * ray[2] > 0.0:
        for r in range(3):
            out[r] = -out[r]


@njit(cache=True, parallel=True)
def patchmatch(
    img_t, Kt_inv, Rt, tt, Ct, weights, moments, inside,
    src_imgs, Ks, Rs, ts,
    g, Rn_t, Tn_t, ident_t, Rn_s, Tn_s, ident_s, k, radius,
    dmin, dmax, iterations, halvings, seed,
    depth, normal, cost, rho, init,
):
    """Run PatchMatch in place on ``depth``, ``normal``, ``cost``, ``rho``.

    If ``init`` is true the state is first filled with random hypotheses;
    otherwise the incoming ``depth``/``normal`` are scored and refined.
    """
    h, w = img_t.shape
    S = src_imgs.shape[0]
    span = dmax - dmin

    for y in prange(h):
        ray = np.empty(3)
        nrm = np.empty(3)
        rv = np.empty(S)
        ws = np.empty((11, 3, 3))
        gv = np.empty(4)
        for x in range(w):
            pixel_ray(x, y, Kt_inv, Rt, ray)
            if init:
                depth[y, x] = dmin + span * hash_uniform(seed, x, y, 0, 0)
                _random_normal(seed, x, y, 0, 1, ray, nrm)
                for r in range(3):
                    normal[y, x, r] = nrm[r]
            for r in range(3):
                nrm[r] = normal[y, x, r]
            cost[y, x] = eval_hypothesis(
                x, y, depth[y, x], nrm, img_t, Kt_inv, Rt, tt, Ct, weights, moments, inside,
                src_imgs, Ks, Rs, ts, g, Rn_t, Tn_t, ident_t, Rn_s, Tn_s, ident_s, k, radius, rv, ws, gv,
            )
            for s in range(S):
                rho[y, x, s] = rv[s]

    for it in range(iterations):
        for parity in range(2):
            step = 1 + 2 * it + parity
            for y in prange(h):
                ray = np.empty(3)
                cand_n = np.empty(3)
                rv = np.empty(S)
                ws = np.empty((11, 3, 3))
                gv = np.empty(4)
                qx_pt = np.empty(3)
                qray = np.empty(3)
                for x in range((y + parity) % 2, w, 2):
                    if not inside[y, x]:
                        continue
                    pixel_ray(x, y, Kt_inv, Rt, ray)
                    best = cost[y, x]
                    # propagation: intersect this pixel's ray with the neighbour's plane
                    for o in range(OFFSETS.shape[0]):
                        qx = x + OFFSETS[o, 0]
                        qy = y + OFFSETS[o, 1]
                        if qx < 0 or qy < 0 or qx >= w or qy >= h:
                            continue
                        pixel_ray(qx, qy, Kt_inv, Rt, qray)
                        dq = depth[qy, qx]
                        num = 0.0
                        den = 0.0
                        for r in range(3):
                            cand_n[r] = normal[qy, qx, r]
                            qx_pt[r] = dq * qray[r]
                            num += cand_n[r] * qx_pt[r]
                            den += cand_n[r] * ray[r]
                        if den >= -1e-9:
                            continue
                        d = num / den
                        if d < dmin or d > dmax:
                            d = dq
                        c = eval_hypothesis(
                            x, y, d, cand_n, img_t, Kt_inv, Rt, tt, Ct, weights, moments, inside,
                            src_imgs, Ks, Rs, ts, g, Rn_t, Tn_t, ident_t, Rn_s, Tn_s, ident_s,
                            k, radius, rv, ws, gv,
                        )
                        if c < best:
                            best = c
                            cost[y, x] = c
                            depth[y, x] = d
                            for r in range(3):
                                normal[y, x, r] = cand_n[r]
                            for s in range(S):
                                rho[y, x, s] = rv[s]
                    # random refinement with halving perturbation radii
                    scale = 0.5
                    for hv in range(halvings):
                        d = depth[y, x] + (2.0 * hash_uniform(seed, x, y, step, 4 * hv) - 1.0) * scale * span
                        if d < dmin or d > dmax:
                            d = depth[y, x]
                        nn = 0.0
                        for r in range(3):
                            cand_n[r] = normal[y, x, r] + (
                                2.0 * hash_uniform(seed, x, y, step, 4 * hv + 1 + r) - 1.0
                            ) * scale
                            nn += cand_n[r] * cand_n[r]
                        nn = np.sqrt(nn)
                        facing = 0.0
                        for r in range(3):
                            cand_n[r] /= nn
                            facing += cand_n[r] * ray[r]
                        if facing >= 0.0:
                            for r in range(3):
                                cand_n[r] = normal[y, x, r]
                        c = eval_hypothesis(
                            x, y, d, cand_n, img_t, Kt_inv, Rt, tt, Ct, weights, moments, inside,
                            src_imgs, Ks, Rs, ts, g, Rn_t, Tn_t, ident_t, Rn_s, Tn_s, ident_s,
                            k, radius, rv, ws, gv,
                        )
                        if c < best:
                            best = c
                            cost[y, x] = c
                            depth[y, x] = d
                            for r in range(3):
                                normal[y, x, r] = cand_n[r]
                            for s in range(S):
                                rho[y, x, s] = rv[s]
                        scale *= 0.5


@njit(cache=True, parallel=True)
def geometric_check(
    depth, normal, Kt_inv, Rt, Ct,
    Ks, Ks_inv, Rs, ts,
    g, Rn_t, Tn_t, ident_t, Rn_s, Tn_s, ident_s, k,
    sup_depth, sup_normal, tol,
):
    """Per (support, pixel) geometric agreement of the target hypotheses.

    The target point is carried to each support's state and projected there;
    its depth must lie within ``tol`` (relative) of the support pixel's plane
    along the same ray. Support pixels with depth 0 never agree.
    """
    h, w = depth.shape
    S = Ks.shape[0]
    hs = sup_depth.shape[1]
    ws = sup_depth.shape[2]
    agree = np.zeros((S, h, w), dtype=np.bool_)
    for y in prange(h):
        ray = np.empty(3)
        X = np.empty(3)
        n = np.empty(3)
        xc = np.empty(3)
        nc = np.empty(3)
        xs = np.empty(3)
        ns = np.empty(3)
        sray = np.empty(3)
        for x in range(w):
            if depth[y, x] <= 0.0:
                continue
            pixel_ray(x, y, Kt_inv, Rt, ray)
            for r in range(3):
                X[r] = Ct[r] + depth[y, x] * ray[r]
                n[r] = normal[y, x, r]
            if _to_canonical(X, n, g, Rn_t, Tn_t, ident_t, k, xc, nc) != OK:
                continue
            for s in range(S):
                if _to_support(xc, nc, g, Rn_s[s], Tn_s[s], ident_s[s], k, xs, ns) != OK:
                    continue
                cam = np.empty(3)
                for r in range(3):
                    cam[r] = Rs[s, r, 0] * xs[0] + Rs[s, r, 1] * xs[1] + Rs[s, r, 2] * xs[2] + ts[s, r]
                if cam[2] <= 0.0:
                    continue
                u = (Ks[s, 0, 0] * cam[0] + Ks[s, 0, 1] * cam[1] + Ks[s, 0, 2] * cam[2]) / cam[2]
                v = (Ks[s, 1, 1] * cam[1] + Ks[s, 1, 2] * cam[2]) / cam[2]
                qx = int(np.floor(u + 0.5))
                qy = int(np.floor(v + 0.5))
                if qx < 0 or qy < 0 or qx >= ws or qy >= hs:
                    continue
                dq = sup_depth[s, qy, qx]
                if dq <= 0.0:
                    continue
                # support plane through its pixel q, intersected with the ray through (u, v)
                pixel_ray(qx, qy, Ks_inv[s], Rs[s], sray)
                num = 0.0
                for r in range(3):
                    num += sup_normal[s, qy, qx, r] * dq * sray[r]
                pixel_ray(u, v, Ks_inv[s], Rs[s], sray)
                den = 0.0
                for r in range(3):
                    den += sup_normal[s, qy, qx, r] * sray[r]
                ref_depth = num / den if abs(den) > 1e-9 else dq
                if ref_depth <= 0.0:
                    continue
                if abs(cam[2] - ref_depth) <= tol * ref_depth:
                    agree[s, y, x] = True
    return agree
