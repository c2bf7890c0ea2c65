"""Compiled inner loops shared by the deformation, photometric and PatchMatch code.

Everything here works on plain arrays so it can be called from other
``njit`` functions. Status codes are returned instead of raising; the
Python wrappers translate them into exceptions.
"""

import numpy as np
from numba import njit

OK = 0
DEGENERATE = 1
SINGULAR = 2
OUT_OF_BOUNDS = 3
FLAT = 4

_U64_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_U64_M1 = np.uint64(0xBF58476D1CE4E5B9)
_U64_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _splitmix(z):
    z = z + _U64_GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _U64_M1
    z = (z ^ (z >> np.uint64(27))) * _U64_M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def hash_uniform(seed, a, b, c, d):
    """Counter-based uniform in [0, 1) from five integer keys."""
    h = _splitmix(np.uint64(seed))
    h = _splitmix(h ^ np.uint64(a))
    h = _splitmix(h ^ np.uint64(b))
    h = _splitmix(h ^ np.uint64(c))
    h = _splitmix(h ^ np.uint64(d))
    return np.float64(h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


# --------------------------------------------------------------------------
# skinning and deformation
# --------------------------------------------------------------------------


@njit(cache=True)
def knn_weights(p, pos, k, idx, w):
    """Skinning weights of ``p`` against node positions ``pos``.

    Fills ``idx``/``w`` (length k). Ties in distance go to the lower index.
    A single-node graph gets weight 1 on that node.
    """
    m = pos.shape[0]
    if m == 1:
        idx[0] = 0
        w[0] = 1.0
        for i in range(1, k):
            idx[i] = 0
            w[i] = 0.0
        return OK
    kk = k + 1
    best_d = np.full(kk, np.inf)
    best_i = np.zeros(kk, dtype=np.int64)
    for j in range(m):
        dx = p[0] - pos[j, 0]
        dy = p[1] - pos[j, 1]
        dz = p[2] - pos[j, 2]
        d2 = dx * dx + dy * dy + dz * dz
        if d2 < best_d[kk - 1]:
            slot = kk - 1
            while slot > 0 and best_d[slot - 1] > d2:
                best_d[slot] = best_d[slot - 1]
                best_i[slot] = best_i[slot - 1]
                slot -= 1
            best_d[slot] = d2
            best_i[slot] = j
    d_far = np.sqrt(best_d[kk - 1])
    if d_far == 0.0:
        return DEGENERATE
    total = 0.0
    for i in range(k):
        idx[i] = best_i[i]
        a = 1.0 - np.sqrt(best_d[i]) / d_far
        w[i] = a * a
        total += w[i]
    if total == 0.0:
        for i in range(k):
            w[i] = 1.0 / k
    else:
        for i in range(k):
            w[i] /= total
    return OK


@njit(cache=True)
def deform_with(p, g, R, t, idx, w, out):
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    for i in range(idx.shape[0]):
        wi = w[i]
        if wi == 0.0:
            continue
        j = idx[i]
        a0 = p[0] - g[j, 0]
        a1 = p[1] - g[j, 1]
        a2 = p[2] - g[j, 2]
        for r in range(3):
            out[r] += wi * (R[j, r, 0] * a0 + R[j, r, 1] * a1 + R[j, r, 2] * a2 + g[j, r] + t[j, r])


@njit(cache=True)
def blend_rotation(R, idx, w, out):
    for r in range(3):
        for c in range(3):
            out[r, c] = 0.0
    for i in range(idx.shape[0]):
        wi = w[i]
        if wi == 0.0:
            continue
        j = idx[i]
        for r in range(3):
            for c in range(3):
                out[r, c] += wi * R[j, r, c]


@njit(cache=True)
def normalize3(v):
    n = np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    return n


@njit(cache=True)
def inv3(M, out):
    """Inverse of a 3x3 matrix; returns SINGULAR if Frobenius condition >= 1e8."""
    c00 = M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1]
    c01 = M[1, 2] * M[2, 0] - M[1, 0] * M[2, 2]
    c02 = M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0]
    det = M[0, 0] * c00 + M[0, 1] * c01 + M[0, 2] * c02
    if det == 0.0 or not np.isfinite(det):
        return SINGULAR
    inv_det = 1.0 / det
    out[0, 0] = c00 * inv_det
    out[1, 0] = c01 * inv_det
    out[2, 0] = c02 * inv_det
    out[0, 1] = (M[0, 2] * M[2, 1] - M[0, 1] * M[2, 2]) * inv_det
    out[1, 1] = (M[0, 0] * M[2, 2] - M[0, 2] * M[2, 0]) * inv_det
    out[2, 1] = (M[0, 1] * M[2, 0] - M[0, 0] * M[2, 1]) * inv_det
    out[0, 2] = (M[0, 1] * M[1, 2] - M[0, 2] * M[1, 1]) * inv_det
    out[1, 2] = (M[0, 2] * M[1, 0] - M[0, 0] * M[1, 2]) * inv_det
    out[2, 2] = (M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]) * inv_det
    fa = 0.0
    fb = 0.0
    for r in range(3):
        for c in range(3):
            fa += M[r, c] * M[r, c]
            fb += out[r, c] * out[r, c]
    if np.sqrt(fa * fb) >= 1e8:
        return SINGULAR
    return OK


@njit(cache=True)
def inverse_with(vh, g, R, t, idx, w, out):
    """Pre-image of ``vh`` given the skinning weights ``idx, w``."""
    M = np.empty((3, 3))
    Minv = np.empty((3, 3))
    blend_rotation(R, idx, w, M)
    st = inv3(M, Minv)
    if st != OK:
        return st
    b0 = vh[0]
    b1 = vh[1]
    b2 = vh[2]
    for i in range(idx.shape[0]):
        wi = w[i]
        if wi == 0.0:
            continue
        j = idx[i]
        for r in range(3):
            rg = R[j, r, 0] * g[j, 0] + R[j, r, 1] * g[j, 1] + R[j, r, 2] * g[j, 2]
            val = wi * (rg - g[j, r] - t[j, r])
            if r == 0:
                b0 += val
            elif r == 1:
                b1 += val
            else:
                b2 += val
    for r in range(3):
        out[r] = Minv[r, 0] * b0 + Minv[r, 1] * b1 + Minv[r, 2] * b2
    return OK


@njit(cache=True)
def deform_point_normal(p, n, g, R, t, k, xo, no):
    """Forward deformation of a point and its normal. Returns a status code."""
    idx = np.empty(k, dtype=np.int64)
    w = np.empty(k)
    st = knn_weights(p, g, k, idx, w)
    if st != OK:
        return st
    deform_with(p, g, R, t, idx, w, xo)
    M = np.empty((3, 3))
    blend_rotation(R, idx, w, M)
    for r in range(3):
        no[r] = M[r, 0] * n[0] + M[r, 1] * n[1] + M[r, 2] * n[2]
    nn = normalize3(no)
    if nn < 1e-9:
        return DEGENERATE
    for r in range(3):
        no[r] /= nn
    return OK


@njit(cache=True)
def approx_inverse_point_normal(ph, nh, g, R, t, k, xo, no):
    """Approximate inverse: weights measured against deformed nodes g + t."""
    m = g.shape[0]
    pos = np.empty((m, 3))
    for j in range(m):
        for r in range(3):
            pos[j, r] = g[j, r] + t[j, r]
    idx = np.empty(k, dtype=np.int64)
    w = np.empty(k)
    st = knn_weights(ph, pos, k, idx, w)
    if st != OK:
        return st
    st = inverse_with(ph, g, R, t, idx, w, xo)
    if st != OK:
        return st
    M = np.empty((3, 3))
    Minv = np.empty((3, 3))
    blend_rotation(R, idx, w, M)
    inv3(M, Minv)
    for r in range(3):
        no[r] = Minv[r, 0] * nh[0] + Minv[r, 1] * nh[1] + Minv[r, 2] * nh[2]
    nn = normalize3(no)
    if nn < 1e-9:
        return DEGENERATE
    for r in range(3):
        no[r] /= nn
    return OK


@njit(cache=True)
def skin_batch(P, pos, k):
    n = P.shape[0]
    idx = np.zeros((n, k), dtype=np.int64)
    w = np.zeros((n, k))
    status = np.zeros(n, dtype=np.int64)
    for i in range(n):
        status[i] = knn_weights(P[i], pos, k, idx[i], w[i])
    return idx, w, status


@njit(cache=True)
def deform_batch(P, idx, w, g, R, t):
    n = P.shape[0]
    out = np.empty((n, 3))
    for i in range(n):
        deform_with(P[i], g, R, t, idx[i], w[i], out[i])
    return out


@njit(cache=True)
def normal_batch(N, idx, w, R):
    n = N.shape[0]
    out = np.empty((n, 3))
    status = np.zeros(n, dtype=np.int64)
    M = np.empty((3, 3))
    for i in range(n):
        blend_rotation(R, idx[i], w[i], M)
        for r in range(3):
            out[i, r] = M[r, 0] * N[i, 0] + M[r, 1] * N[i, 1] + M[r, 2] * N[i, 2]
        nn = normalize3(out[i])
        if nn < 1e-9:
            status[i] = DEGENERATE
        else:
            for r in range(3):
                out[i, r] /= nn
    return out, status


@njit(cache=True)
def inverse_batch(Vh, idx, w, g, R, t):
    n = Vh.shape[0]
    out = np.empty((n, 3))
    status = np.zeros(n, dtype=np.int64)
    for i in range(n):
        status[i] = inverse_with(Vh[i], g, R, t, idx[i], w[i], out[i])
    return out, status


# --------------------------------------------------------------------------
# photometric consistency
# --------------------------------------------------------------------------


@njit(cache=True)
def bilinear(img, u, v):
    """Bilinear sample; NaN outside [0, W-1] x [0, H-1]."""
    h, w = img.shape
    if not (u >= 0.0 and v >= 0.0 and u <= w - 1 and v <= h - 1):
        return np.nan
    x0 = int(np.floor(u))
    y0 = int(np.floor(v))
    if x0 >= w - 1:
        x0 = w - 2
    if y0 >= h - 1:
        y0 = h - 2
    ax = u - x0
    ay = v - y0
    return (
        (1.0 - ay) * ((1.0 - ax) * img[y0, x0] + ax * img[y0, x0 + 1])
        + ay * ((1.0 - ax) * img[y0 + 1, x0] + ax * img[y0 + 1, x0 + 1])
    )


@njit(cache=True)
def align_rotation(a, b, out):
    """Minimal-twist rotation taking unit vector ``a`` onto unit vector ``b``."""
    vx = a[1] * b[2] - a[2] * b[1]
    vy = a[2] * b[0] - a[0] * b[2]
    vz = a[0] * b[1] - a[1] * b[0]
    c = a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    if c < -1.0 + 1e-12:
        # antiparallel: half turn about any axis orthogonal to a
        if abs(a[0]) < 0.9:
            ox, oy, oz = 0.0, -a[2], a[1]
        else:
            ox, oy, oz = a[2], 0.0, -a[0]
        nrm = np.sqrt(ox * ox + oy * oy + oz * oz)
        ox /= nrm
        oy /= nrm
        oz /= nrm
        axis = (ox, oy, oz)
        for r in range(3):
            for cc in range(3):
                out[r, cc] = 2.0 * axis[r] * axis[cc] - (1.0 if r == cc else 0.0)
        return
    f = 1.0 / (1.0 + c)
    # R = I + [v]x + [v]x^2 / (1 + c)
    out[0, 0] = 1.0 + f * (-vy * vy - vz * vz)
    out[0, 1] = -vz + f * (vx * vy)
    out[0, 2] = vy + f * (vx * vz)
    out[1, 0] = vz + f * (vx * vy)
    out[1, 1] = 1.0 + f * (-vx * vx - vz * vz)
    out[1, 2] = -vx + f * (vy * vz)
    out[2, 0] = -vy + f * (vx * vz)
    out[2, 1] = vx + f * (vy * vz)
    out[2, 2] = 1.0 + f * (-vx * vx - vy * vy)


@njit(cache=True)
def plane_transfer(Kr_inv, Rr, tr, Ks, Rs, ts, x, n, xh, nh, H, gvec):
    """Pixel transfer induced by carrying the tangent plane (x, n) to (xh, nh).

    Writes ``H`` (3x3, ref pixel -> src homogeneous pixel) and ``gvec`` with
    ``gvec[:3] . [u, v, 1]`` the plane/ray denominator and ``gvec[3]`` the
    plane offset in the reference camera. Returns a status code.
    """
    ws = np.empty((8, 3, 3))
    return plane_transfer_ws(Kr_inv, Rr, tr, Ks, Rs, ts, x, n, xh, nh, H, gvec, ws)


@njit(cache=True)
def plane_transfer_ws(Kr_inv, Rr, tr, Ks, Rs, ts, x, n, xh, nh, H, gvec, ws):
    """:func:`plane_transfer` using the caller's (8, 3, 3) scratch array."""
    Xc = ws[0, 0]
    nc = ws[0, 1]
    for r in range(3):
        Xc[r] = Rr[r, 0] * x[0] + Rr[r, 1] * x[1] + Rr[r, 2] * x[2] + tr[r]
        nc[r] = Rr[r, 0] * n[0] + Rr[r, 1] * n[1] + Rr[r, 2] * n[2]
    if Xc[2] <= 0.0:
        return OUT_OF_BOUNDS
    d = nc[0] * Xc[0] + nc[1] * Xc[1] + nc[2] * Xc[2]
    if abs(d) < 1e-12:
        return OUT_OF_BOUNDS
    nhu = ws[0, 2]
    nn = normalize3(nh)
    if nn < 1e-12:
        return DEGENERATE
    nhu[0] = nh[0] / nn
    nhu[1] = nh[1] / nn
    nhu[2] = nh[2] / nn
    nu = ws[1, 0]
    nn0 = normalize3(n)
    nu[0] = n[0] / nn0
    nu[1] = n[1] / nn0
    nu[2] = n[2] / nn0
    Rm = ws[3]
    align_rotation(nu, nhu, Rm)
    # src_cam = A @ X_refcam + b on the plane, A = Rs Rm Rr^T
    RmRrT = ws[4]
    for r in range(3):
        for c in range(3):
            RmRrT[r, c] = Rm[r, 0] * Rr[c, 0] + Rm[r, 1] * Rr[c, 1] + Rm[r, 2] * Rr[c, 2]
    A = ws[5]
    for r in range(3):
        for c in range(3):
            A[r, c] = Rs[r, 0] * RmRrT[0, c] + Rs[r, 1] * RmRrT[1, c] + Rs[r, 2] * RmRrT[2, c]
    # world point of the camera-frame origin offset: Rr^T (X - tr) - x
    q = ws[1, 1]
    for r in range(3):
        q[r] = -(Rr[0, r] * tr[0] + Rr[1, r] * tr[1] + Rr[2, r] * tr[2]) - x[r]
    b = ws[1, 2]
    mq = ws[2, 0]
    for r in range(3):
        mq[r] = Rm[r, 0] * q[0] + Rm[r, 1] * q[1] + Rm[r, 2] * q[2] + xh[r]
    for r in range(3):
        b[r] = Rs[r, 0] * mq[0] + Rs[r, 1] * mq[1] + Rs[r, 2] * mq[2] + ts[r]
    # on the plane nc . X = d, so A X + b = (A + b nc^T / d) X
    G = ws[6]
    for r in range(3):
        for c in range(3):
            G[r, c] = A[r, c] + b[r] * nc[c] / d
    GK = ws[7]
    for r in range(3):
        for c in range(3):
            GK[r, c] = G[r, 0] * Kr_inv[0, c] + G[r, 1] * Kr_inv[1, c] + G[r, 2] * Kr_inv[2, c]
    for r in range(3):
        for c in range(3):
            H[r, c] = Ks[r, 0] * GK[0, c] + Ks[r, 1] * GK[1, c] + Ks[r, 2] * GK[2, c]
    for c in range(3):
        gvec[c] = nc[0] * Kr_inv[0, c] + nc[1] * Kr_inv[1, c] + nc[2] * Kr_inv[2, c]
    gvec[3] = d
    return OK


@njit(cache=True)
def transfer_pixel(H, gvec, u, v):
    """Map a reference pixel through ``plane_transfer``; NaN if invalid."""
    den = gvec[0] * u + gvec[1] * v + gvec[2]
    if den == 0.0:
        return np.nan, np.nan
    s = gvec[3] / den
    if s <= 0.0:
        return np.nan, np.nan
    pz = H[2, 0] * u + H[2, 1] * v + H[2, 2]
    if pz * s <= 0.0:
        return np.nan, np.nan
    px = (H[0, 0] * u + H[0, 1] * v + H[0, 2]) / pz
    py = (H[1, 0] * u + H[1, 1] * v + H[1, 2]) / pz
    return px, py


@njit(cache=True)
def ref_window(ref_img, Kr, Rr, tr, x, radius, sigma_c, sigma_s, a_vals, wts, mom):
    """Reference samples and bilateral weights around the projection of ``x``.

    Fills ``a_vals``/``wts`` (length (2r+1)^2) and ``mom`` with the weighted
    moments (sum w, sum w a, sum w a^2). Returns ``(u0, v0, status)``.
    """
    X0 = Rr[0, 0] * x[0] + Rr[0, 1] * x[1] + Rr[0, 2] * x[2] + tr[0]
    X1 = Rr[1, 0] * x[0] + Rr[1, 1] * x[1] + Rr[1, 2] * x[2] + tr[1]
    X2 = Rr[2, 0] * x[0] + Rr[2, 1] * x[1] + Rr[2, 2] * x[2] + tr[2]
    if X2 <= 0.0:
        return 0.0, 0.0, OUT_OF_BOUNDS
    u0 = (Kr[0, 0] * X0 + Kr[0, 1] * X1 + Kr[0, 2] * X2) / X2
    v0 = (Kr[1, 1] * X1 + Kr[1, 2] * X2) / X2
    c0 = bilinear(ref_img, u0, v0)
    if np.isnan(c0):
        return u0, v0, OUT_OF_BOUNDS
    inv2c = 1.0 / (2.0 * sigma_c * sigma_c)
    inv2s = 1.0 / (2.0 * sigma_s * sigma_s)
    sw = 0.0
    sr = 0.0
    srr = 0.0
    j = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            a = bilinear(ref_img, u0 + dx, v0 + dy)
            if np.isnan(a):
                return u0, v0, OUT_OF_BOUNDS
            dc = a - c0
            wgt = np.exp(-dc * dc * inv2c - (dx * dx + dy * dy) * inv2s)
            a_vals[j] = a
            wts[j] = wgt
            sw += wgt
            sr += wgt * a
            srr += wgt * a * a
            j += 1
    mom[0] = sw
    mom[1] = sr
    mom[2] = srr
    return u0, v0, OK


@njit(cache=True)
def src_ncc(Kr_inv, Rr, tr, src_img, Ks, Rs, ts, x, n, xh, nh, radius, u0, v0, a_vals, wts, mom, H, gvec, ws):
    """NCC of a prepared reference window against its transport into the source."""
    st = plane_transfer_ws(Kr_inv, Rr, tr, Ks, Rs, ts, x, n, xh, nh, H, gvec, ws)
    if st != OK:
        return 0.0, st
    hs, wsz = src_img.shape
    umax = wsz - 1.0
    vmax = hs - 1.0
    ss = 0.0
    sss = 0.0
    srs = 0.0
    j = 0
    for dy in range(-radius, radius + 1):
        v = v0 + dy
        for dx in range(-radius, radius + 1):
            u = u0 + dx
            # inline transfer_pixel + bilinear
            den = gvec[0] * u + gvec[1] * v + gvec[2]
            pz = H[2, 0] * u + H[2, 1] * v + H[2, 2]
            if den * gvec[3] <= 0.0 or pz * den * gvec[3] <= 0.0:
                return 0.0, OUT_OF_BOUNDS
            px = (H[0, 0] * u + H[0, 1] * v + H[0, 2]) / pz
            py = (H[1, 0] * u + H[1, 1] * v + H[1, 2]) / pz
            if not (px >= 0.0 and py >= 0.0 and px <= umax and py <= vmax):
                return 0.0, OUT_OF_BOUNDS
            x0 = int(px)
            y0 = int(py)
            if x0 >= wsz - 1:
                x0 = wsz - 2
            if y0 >= hs - 1:
                y0 = hs - 2
            ax = px - x0
            ay = py - y0
            bval = (1.0 - ay) * ((1.0 - ax) * src_img[y0, x0] + ax * src_img[y0, x0 + 1]) + ay * (
                (1.0 - ax) * src_img[y0 + 1, x0] + ax * src_img[y0 + 1, x0 + 1]
            )
            wgt = wts[j]
            ss += wgt * bval
            sss += wgt * bval * bval
            srs += wgt * a_vals[j] * bval
            j += 1
    return weighted_ncc(mom[0], mom[1], ss, mom[2], sss, srs)


@njit(cache=True)
def ncc_point(
    ref_img, Kr, Rr, tr, src_img, Ks, Rs, ts, x, n, xh, nh, radius, sigma_c, sigma_s
):
    """Bilaterally weighted NCC of the patch around ``x`` in ref vs. its transport in src.

    Returns ``(rho, status)``. ``rho`` is 0 for flat or invalid patches.
    """
    side = 2 * radius + 1
    a_vals = np.empty(side * side)
    wts = np.empty(side * side)
    mom = np.empty(3)
    u0, v0, st = ref_window(ref_img, Kr, Rr, tr, x, radius, sigma_c, sigma_s, a_vals, wts, mom)
    if st != OK:
        return 0.0, st
    Kr_inv = np.empty((3, 3))
    inv3(Kr, Kr_inv)
    return src_ncc(
        Kr_inv, Rr, tr, src_img, Ks, Rs, ts, x, n, xh, nh, radius, u0, v0, a_vals, wts, mom,
        np.empty((3, 3)), np.empty(4), np.empty((8, 3, 3)),
    )


@njit(cache=True)
def weighted_ncc(sw, sr, ss, srr, sss, srs):
    mr = sr / sw
    ms = ss / sw
    var_r = srr / sw - mr * mr
    var_s = sss / sw - ms * ms
    if var_r < 1e-10 or var_s < 1e-10:
        return 0.0, FLAT
    rho = (srs / sw - mr * ms) / np.sqrt(var_r * var_s)
    if rho > 1.0:
        rho = 1.0
    elif rho < -1.0:
        rho = -1.0
    return rho, OK


@njit(cache=True)
def ref_windows_batch(ref_img, Kr, Rr, tr, X, radius, sigma_c, sigma_s):
    """:func:`ref_window` for every point: samples, weights, moments, centres, status."""
    n = X.shape[0]
    side = 2 * radius + 1
    A = np.zeros((n, side * side))
    Wt = np.zeros((n, side * side))
    M = np.zeros((n, 3))
    UV = np.zeros((n, 2))
    status = np.zeros(n, dtype=np.int64)
    for i in range(n):
        u0, v0, st = ref_window(ref_img, Kr, Rr, tr, X[i], radius, sigma_c, sigma_s, A[i], Wt[i], M[i])
        UV[i, 0] = u0
        UV[i, 1] = v0
        status[i] = st
    return A, Wt, M, UV, status


@njit(cache=True)
def ncc_batch_pre(Kr, Rr, tr, src_img, Ks, Rs, ts, X, N, Xh, Nh, radius, A, Wt, M, UV, wstat, active):
    """Batched NCC using precomputed reference windows; inactive points are skipped."""
    n = X.shape[0]
    rho = np.zeros(n)
    status = np.zeros(n, dtype=np.int64)
    Kr_inv = np.empty((3, 3))
    inv3(Kr, Kr_inv)
    H = np.empty((3, 3))
    gvec = np.empty(4)
    ws = np.empty((8, 3, 3))
    for i in range(n):
        if wstat[i] != OK:
            status[i] = wstat[i]
            continue
        if not active[i]:
            continue
        rho[i], status[i] = src_ncc(
            Kr_inv, Rr, tr, src_img, Ks, Rs, ts, X[i], N[i], Xh[i], Nh[i], radius, UV[i, 0], UV[i, 1],
            A[i], Wt[i], M[i], H, gvec, ws,
        )
    return rho, status


@njit(cache=True)
def ncc_batch_fd_pre(Kr, Rr, tr, src_img, Ks, Rs, ts, X, N, Xh, Mh, radius, A, Wt, M, UV, wstat, active, h):
    """NCC and its forward-difference gradient w.r.t. the deformed point and
    the unnormalised deformed normal ``Mh``, with precomputed reference windows.

    A perturbation that leaves the source image zeroes that gradient entry.

    Returns ``rho (n,)``, ``grad (n, 6)``, ``status (n,)``.
    """
    n = X.shape[0]
    rho = np.zeros(n)
    grad = np.zeros((n, 6))
    status = np.zeros(n, dtype=np.int64)
    Kr_inv = np.empty((3, 3))
    inv3(Kr, Kr_inv)
    H = np.empty((3, 3))
    gvec = np.empty(4)
    ws = np.empty((8, 3, 3))
    xp = np.empty(3)
    mp = np.empty(3)
    for i in range(n):
        if wstat[i] != OK:
            status[i] = wstat[i]
            continue
        if not active[i]:
            continue
        u0 = UV[i, 0]
        v0 = UV[i, 1]
        r0, st = src_ncc(
            Kr_inv, Rr, tr, src_img, Ks, Rs, ts, X[i], N[i], Xh[i], Mh[i], radius, u0, v0,
            A[i], Wt[i], M[i], H, gvec, ws,
        )
        rho[i] = r0
        status[i] = st
        if st != OK:
            continue
        for c in range(6):
            for r in range(3):
                xp[r] = Xh[i, r]
                mp[r] = Mh[i, r]
            if c < 3:
                xp[c] += h
            else:
                mp[c - 3] += h
            rv, st2 = src_ncc(
                Kr_inv, Rr, tr, src_img, Ks, Rs, ts, X[i], N[i], xp, mp, radius, u0, v0,
                A[i], Wt[i], M[i], H, gvec, ws,
            )
            if st2 == OK:
                grad[i, c] = (rv - r0) / h
    return rho, grad, status


@njit(cache=True)
def ncc_batch(ref_img, Kr, Rr, tr, src_img, Ks, Rs, ts, X, N, Xh, Nh, radius, sigma_c, sigma_s):
    A, Wt, M, UV, wstat = ref_windows_batch(ref_img, Kr, Rr, tr, X, radius, sigma_c, sigma_s)
    active = np.ones(X.shape[0], dtype=np.bool_)
    return ncc_batch_pre(Kr, Rr, tr, src_img, Ks, Rs, ts, X, N, Xh, Nh, radius, A, Wt, M, UV, wstat, active)


@njit(cache=True)
def ncc_batch_fd(
    ref_img, Kr, Rr, tr, src_img, Ks, Rs, ts, X, N, Xh, Mh, radius, sigma_c, sigma_s, h
):
    """:func:`ncc_batch_fd_pre` that samples the reference windows itself."""
    A, Wt, M, UV, wstat = ref_windows_batch(ref_img, Kr, Rr, tr, X, radius, sigma_c, sigma_s)
    active = np.ones(X.shape[0], dtype=np.bool_)
    return ncc_batch_fd_pre(Kr, Rr, tr, src_img, Ks, Rs, ts, X, N, Xh, Mh, radius, A, Wt, M, UV, wstat, active, h)
