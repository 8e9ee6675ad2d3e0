"""Compiled per-ray kernels for the analytic density field.

Primitive table layout (one row per primitive):

    kind   0 = axis-aligned Gaussian blob, 1 = soft slab, 2 = Gaussian capsule
    prm    blob:    cx cy cz sx sy sz  -
           slab:    lox loy loz hix hiy hiz edge
           capsule: ax ay az bx by bz radius
    amp    peak density
    col    rgb

Renderer kernels skip a primitive on a ray outside its bounding volume, where
its density is below ~1e-10 of the amplitude.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

BLOB, SLAB, CAPSULE = 0, 1, 2
_GAUSS_CUT = 7.0  # bounding radius in standard deviations
_SLAB_CUT = 25.0  # bounding margin in edge widths
_EMPTY = 1e-12


@njit(cache=True)
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def prim_density(k, kind, prm, amp, x, y, z):
    kd = kind[k]
    if kd == 0:
        dx = (x - prm[k, 0]) / prm[k, 3]
        dy = (y - prm[k, 1]) / prm[k, 4]
        dz = (z - prm[k, 2]) / prm[k, 5]
        return amp[k] * math.exp(-0.5 * (dx * dx + dy * dy + dz * dz))
    if kd == 1:
        w = prm[k, 6]
        v = amp[k]
        v *= _sigmoid((x - prm[k, 0]) / w) * _sigmoid((prm[k, 3] - x) / w)
        v *= _sigmoid((y - prm[k, 1]) / w) * _sigmoid((prm[k, 4] - y) / w)
        v *= _sigmoid((z - prm[k, 2]) / w) * _sigmoid((prm[k, 5] - z) / w)
        return v
    ax, ay, az = prm[k, 0], prm[k, 1], prm[k, 2]
    ux, uy, uz = prm[k, 3] - ax, prm[k, 4] - ay, prm[k, 5] - az
    uu = ux * ux + uy * uy + uz * uz
    s = 0.0
    if uu > 1e-18:
        s = ((x - ax) * ux + (y - ay) * uy + (z - az) * uz) / uu
        s = min(max(s, 0.0), 1.0)
    ex, ey, ez = x - ax - s * ux, y - ay - s * uy, z - az - s * uz
    r = prm[k, 6]
    return amp[k] * math.exp(-(ex * ex + ey * ey + ez * ez) / (2.0 * r * r))


@njit(cache=True)
def prim_density_grad(k, kind, prm, amp, x, y, z, g):
    """Density plus d/dx in g[0:3]; capsules also d/dA in g[3:6], d/dB in g[6:9]."""
    for i in range(9):
        g[i] = 0.0
    kd = kind[k]
    if kd == 0:
        sx, sy, sz = prm[k, 3], prm[k, 4], prm[k, 5]
        dx, dy, dz = x - prm[k, 0], y - prm[k, 1], z - prm[k, 2]
        v = amp[k] * math.exp(-0.5 * ((dx / sx) ** 2 + (dy / sy) ** 2 + (dz / sz) ** 2))
        g[0] = -v * dx / (sx * sx)
        g[1] = -v * dy / (sy * sy)
        g[2] = -v * dz / (sz * sz)
        return v
    if kd == 1:
        w = prm[k, 6]
        lx = _sigmoid((x - prm[k, 0]) / w)
        hx = _sigmoid((prm[k, 3] - x) / w)
        ly = _sigmoid((y - prm[k, 1]) / w)
        hy = _sigmoid((prm[k, 4] - y) / w)
        lz = _sigmoid((z - prm[k, 2]) / w)
        hz = _sigmoid((prm[k, 5] - z) / w)
        v = amp[k] * lx * hx * ly * hy * lz * hz
        g[0] = v * ((1.0 - lx) - (1.0 - hx)) / w
        g[1] = v * ((1.0 - ly) - (1.0 - hy)) / w
        g[2] = v * ((1.0 - lz) - (1.0 - hz)) / w
        return v
    ax, ay, az = prm[k, 0], prm[k, 1], prm[k, 2]
    ux, uy, uz = prm[k, 3] - ax, prm[k, 4] - ay, prm[k, 5] - az
    uu = ux * ux + uy * uy + uz * uz
    s = 0.0
    if uu > 1e-18:
        s = ((x - ax) * ux + (y - ay) * uy + (z - az) * uz) / uu
        s = min(max(s, 0.0), 1.0)
    ex, ey, ez = x - ax - s * ux, y - ay - s * uy, z - az - s * uz
    r2 = prm[k, 6] * prm[k, 6]
    v = amp[k] * math.exp(-(ex * ex + ey * ey + ez * ez) / (2.0 * r2))
    f = v / r2
    g[0] = -f * ex
    g[1] = -f * ey
    g[2] = -f * ez
    g[3] = f * ex * (1.0 - s)
    g[4] = f * ey * (1.0 - s)
    g[5] = f * ez * (1.0 - s)
    g[6] = f * ex * s
    g[7] = f * ey * s
    g[8] = f * ez * s
    return v


@njit(cache=True)
def _ray_interval(k, kind, prm, ox, oy, oz, dx, dy, dz):
    """Parameter interval of the ray inside primitive k's bounding volume."""
    kd = kind[k]
    if kd == 1:
        m = _SLAB_CUT * prm[k, 6]
        t0, t1 = -1e30, 1e30
        o = (ox, oy, oz)
        d = (dx, dy, dz)
        for a in range(3):
            lo = prm[k, a] - m
            hi = prm[k, 3 + a] + m
            if abs(d[a]) < 1e-15:
                if o[a] < lo or o[a] > hi:
                    return 1.0, -1.0
            else:
                ta = (lo - o[a]) / d[a]
                tb = (hi - o[a]) / d[a]
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
        return t0, t1
    if kd == 0:
        cx, cy, cz = prm[k, 0], prm[k, 1], prm[k, 2]
        rad = _GAUSS_CUT * max(prm[k, 3], max(prm[k, 4], prm[k, 5]))
    else:
        cx = 0.5 * (prm[k, 0] + prm[k, 3])
        cy = 0.5 * (prm[k, 1] + prm[k, 4])
        cz = 0.5 * (prm[k, 2] + prm[k, 5])
        hx, hy, hz = prm[k, 3] - prm[k, 0], prm[k, 4] - prm[k, 1], prm[k, 5] - prm[k, 2]
        rad = 0.5 * math.sqrt(hx * hx + hy * hy + hz * hz) + _GAUSS_CUT * prm[k, 6]
    px, py, pz = cx - ox, cy - oy, cz - oz
    tc = px * dx + py * dy + pz * dz
    d2 = px * px + py * py + pz * pz - tc * tc
    if d2 > rad * rad:
        return 1.0, -1.0
    half = math.sqrt(rad * rad - d2)
    return tc - half, tc + half


@njit(cache=True)
def field_eval(points, kind, prm, amp, col, is_actor, bg):
    """Total density, mixed colour and actor density at arbitrary points."""
    n = points.shape[0]
    sig = np.zeros(n)
    rgb = np.zeros((n, 3))
    act = np.zeros(n)
    for i in range(n):
        x, y, z = points[i, 0], points[i, 1], points[i, 2]
        s = 0.0
        r = 0.0
        gg = 0.0
        b = 0.0
        a = 0.0
        for k in range(kind.shape[0]):
            v = prim_density(k, kind, prm, amp, x, y, z)
            s += v
            r += v * col[k, 0]
            gg += v * col[k, 1]
            b += v * col[k, 2]
            if is_actor[k]:
                a += v
        sig[i] = s
        act[i] = a
        if s > _EMPTY:
            rgb[i, 0] = r / s
            rgb[i, 1] = gg / s
            rgb[i, 2] = b / s
        else:
            rgb[i, 0] = bg[0]
            rgb[i, 1] = bg[1]
            rgb[i, 2] = bg[2]
    return sig, rgb, act


@njit(cache=True)
def field_grad(points, kind, prm, amp):
    """Total density and its spatial gradient at points (no culling)."""
    n = points.shape[0]
    sig = np.zeros(n)
    grad = np.zeros((n, 3))
    g = np.zeros(9)
    for i in range(n):
        for k in range(kind.shape[0]):
            v = prim_density_grad(k, kind, prm, amp, points[i, 0], points[i, 1], points[i, 2], g)
            sig[i] += v
            grad[i, 0] += g[0]
            grad[i, 1] += g[1]
            grad[i, 2] += g[2]
    return sig, grad


@njit(cache=True)
def _active(kind, prm, ox, oy, oz, dx, dy, dz, t_lo, t_hi, act, lo, hi):
    n = 0
    for k in range(kind.shape[0]):
        a, b = _ray_interval(k, kind, prm, ox, oy, oz, dx, dy, dz)
        if b >= a and b >= t_lo and a <= t_hi:
            act[n] = k
            lo[n] = a
            hi[n] = b
            n += 1
    return n


@njit(cache=True)
def render_forward(origins, dirs, tvals, delta_last, kind, prm, amp, col, bg, far):
    """Emission-absorption quadrature. Returns (P, 5): rgb, depth, opacity."""
    P, S = tvals.shape
    npr = kind.shape[0]
    out = np.zeros((P, 5))
    act = np.zeros(npr, dtype=np.int64)
    lo = np.zeros(npr)
    hi = np.zeros(npr)
    for p in range(P):
        ox, oy, oz = origins[p, 0], origins[p, 1], origins[p, 2]
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        na = _active(kind, prm, ox, oy, oz, dx, dy, dz, tvals[p, 0], tvals[p, S - 1], act, lo, hi)
        T = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        dep = 0.0
        op = 0.0
        for i in range(S):
            t = tvals[p, i]
            dt = tvals[p, i + 1] - t if i < S - 1 else delta_last
            x, y, z = ox + t * dx, oy + t * dy, oz + t * dz
            s = 0.0
            r = 0.0
            gg = 0.0
            b = 0.0
            for j in range(na):
                if lo[j] <= t and t <= hi[j]:
                    k = act[j]
                    v = prim_density(k, kind, prm, amp, x, y, z)
                    s += v
                    r += v * col[k, 0]
                    gg += v * col[k, 1]
                    b += v * col[k, 2]
            if s <= _EMPTY:
                continue
            e = math.exp(-s * dt)
            w = T * (1.0 - e)
            cr += w * r / s
            cg += w * gg / s
            cb += w * b / s
            dep += w * t
            op += w
            T *= e
        out[p, 0] = cr + (1.0 - op) * bg[0]
        out[p, 1] = cg + (1.0 - op) * bg[1]
        out[p, 2] = cb + (1.0 - op) * bg[2]
        out[p, 3] = dep / max(op, 1e-8) if op >= 1e-6 else far
        out[p, 4] = op
    return out


@njit(cache=True)
def render_backward(origins, dirs, tvals, delta_last, kind, prm, amp, col, bg, far,
                    pixels, gout):
    """Adjoints of origins, directions (per selected pixel) and primitive endpoints."""
    S = tvals.shape[1]
    npr = kind.shape[0]
    n = pixels.shape[0]
    g_o = np.zeros((n, 3))
    g_d = np.zeros((n, 3))
    g_prm = np.zeros((npr, 6))
    act = np.zeros(npr, dtype=np.int64)
    lo = np.zeros(npr)
    hi = np.zeros(npr)
    sig = np.zeros(S)
    cs = np.zeros((S, 3))
    ws = np.zeros(S)
    Ts = np.zeros(S + 1)
    dts = np.zeros(S)
    q = np.zeros(S)
    g = np.zeros(9)
    for jp in range(n):
        p = pixels[jp]
        ox, oy, oz = origins[p, 0], origins[p, 1], origins[p, 2]
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        na = _active(kind, prm, ox, oy, oz, dx, dy, dz, tvals[p, 0], tvals[p, S - 1], act, lo, hi)
        T = 1.0
        op = 0.0
        dep = 0.0
        for i in range(S):
            t = tvals[p, i]
            dt = tvals[p, i + 1] - t if i < S - 1 else delta_last
            dts[i] = dt
            x, y, z = ox + t * dx, oy + t * dy, oz + t * dz
            s = 0.0
            r = 0.0
            gg = 0.0
            b = 0.0
            for j in range(na):
                if lo[j] <= t and t <= hi[j]:
                    k = act[j]
                    v = prim_density(k, kind, prm, amp, x, y, z)
                    s += v
                    r += v * col[k, 0]
                    gg += v * col[k, 1]
                    b += v * col[k, 2]
            Ts[i] = T
            sig[i] = s
            if s <= _EMPTY:
                ws[i] = 0.0
                cs[i, 0] = bg[0]
                cs[i, 1] = bg[1]
                cs[i, 2] = bg[2]
                continue
            cs[i, 0] = r / s
            cs[i, 1] = gg / s
            cs[i, 2] = b / s
            e = math.exp(-s * dt)
            w = T * (1.0 - e)
            ws[i] = w
            op += w
            dep += w * t
            T *= e
        Ts[S] = T
        gr, ggc, gb = gout[jp, 0], gout[jp, 1], gout[jp, 2]
        gdep, gop = gout[jp, 3], gout[jp, 4]
        use_dep = op >= 1e-6
        if use_dep:
            dep = dep / max(op, 1e-8)
        for i in range(S):
            qi = gr * (cs[i, 0] - bg[0]) + ggc * (cs[i, 1] - bg[1]) + gb * (cs[i, 2] - bg[2]) + gop
            if use_dep:
                qi += gdep * (tvals[p, i] - dep) / op
            q[i] = qi
        suffix = 0.0
        for i in range(S - 1, -1, -1):
            s = sig[i]
            if s <= _EMPTY:
                continue
            t = tvals[p, i]
            gsig = dts[i] * (Ts[i + 1] * q[i] - suffix)
            suffix += ws[i] * q[i]
            w = ws[i]
            x, y, z = ox + t * dx, oy + t * dy, oz + t * dz
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for j in range(na):
                if lo[j] <= t and t <= hi[j]:
                    k = act[j]
                    v = prim_density_grad(k, kind, prm, amp, x, y, z, g)
                    gp = gsig + w * (gr * (col[k, 0] - cs[i, 0]) + ggc * (col[k, 1] - cs[i, 1])
                                     + gb * (col[k, 2] - cs[i, 2])) / s
                    gx += gp * g[0]
                    gy += gp * g[1]
                    gz += gp * g[2]
                    if kind[k] == 2:
                        for c in range(6):
                            g_prm[k, c] += gp * g[3 + c]
            g_o[jp, 0] += gx
            g_o[jp, 1] += gy
            g_o[jp, 2] += gz
            g_d[jp, 0] += t * gx
            g_d[jp, 1] += t * gy
            g_d[jp, 2] += t * gz
    return g_o, g_d, g_prm


@njit(cache=True)
def segment_optical_depth(origins, targets, n_steps, kind, prm, amp):
    """Midpoint-rule optical depth along origin->target segments, with adjoint factors.

    Returns tau (J,), dtau/dorigin (J, 3), dtau/dtarget (J, 3).
    """
    J = origins.shape[0]
    tau = np.zeros(J)
    g_o = np.zeros((J, 3))
    g_t = np.zeros((J, 3))
    g = np.zeros(9)
    for j in range(J):
        vx = targets[j, 0] - origins[j, 0]
        vy = targets[j, 1] - origins[j, 1]
        vz = targets[j, 2] - origins[j, 2]
        L = math.sqrt(vx * vx + vy * vy + vz * vz)
        if L < 1e-12:
            continue
        ssum = 0.0
        ax = ay = az = 0.0
        bx = by = bz = 0.0
        for i in range(n_steps):
            s = (i + 0.5) / n_steps
            x = origins[j, 0] + s * vx
            y = origins[j, 1] + s * vy
            z = origins[j, 2] + s * vz
            for k in range(kind.shape[0]):
                v = prim_density_grad(k, kind, prm, amp, x, y, z, g)
                ssum += v
                ax += g[0] * (1.0 - s)
                ay += g[1] * (1.0 - s)
                az += g[2] * (1.0 - s)
                bx += g[0] * s
                by += g[1] * s
                bz += g[2] * s
        h = L / n_steps
        tau[j] = ssum * h
        m = ssum / n_steps / L
        g_o[j, 0] = h * ax - m * vx
        g_o[j, 1] = h * ay - m * vy
        g_o[j, 2] = h * az - m * vz
        g_t[j, 0] = h * bx + m * vx
        g_t[j, 1] = h * by + m * vy
        g_t[j, 2] = h * bz + m * vz
    return tau, g_o, g_t
