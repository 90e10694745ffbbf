"""Independent scalar re-implementations used as test oracles.

Each is written voxel by voxel with plain Python loops, or on top of scipy,
so none shares a code path with the vectorized library.
"""

import itertools
import math

import numpy as np


def sample_trilinear(img, x, y, z):
    """Trilinear value of ``img`` at a continuous point, coordinates clamped to the grid."""
    dims = img.shape
    pt = [min(max(c, 0.0), n - 1.0) for c, n in zip((x, y, z), dims)]
    base = [min(int(math.floor(c)), max(n - 2, 0)) for c, n in zip(pt, dims)]
    total = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        idx, w = [], 1.0
        for d in range(3):
            i = min(base[d] + corner[d], dims[d] - 1)
            t = pt[d] - base[d]
            w *= t if corner[d] else 1.0 - t
            idx.append(i)
        total += w * img[tuple(idx)]
    return total


def warp_brute(img, u):
    out = np.zeros(img.shape)
    for p in np.ndindex(*img.shape):
        out[p] = sample_trilinear(img, *(p[d] - u[(d,) + p] for d in range(3)))
    return out


def compose_brute(a, b):
    """``u_b(p) + u_a(p - u_b(p))`` evaluated per voxel."""
    out = np.zeros(a.shape)
    for p in np.ndindex(*a.shape[1:]):
        q = [p[d] - b[(d,) + p] for d in range(3)]
        for c in range(3):
            out[(c,) + p] = b[(c,) + p] + sample_trilinear(a[c], *q)
    return out


def window_slices(p, dims, n):
    r = n // 2
    return tuple(slice(max(i - r, 0), min(i + r + 1, d)) for i, d in zip(p, dims))


def lncc_brute(a, b, n, eps=1e-5):
    """Sum over voxels of the squared correlation inside each clipped window."""
    total = 0.0
    for p in np.ndindex(*a.shape):
        sl = window_slices(p, a.shape, n)
        wa, wb = a[sl].ravel(), b[sl].ravel()
        da, db = wa - wa.mean(), wb - wb.mean()
        cross = float(np.dot(da, db))
        total += cross * cross / ((float(np.dot(da, da)) + eps) * (float(np.dot(db, db)) + eps))
    return total


def ssim_brute(a, b, window=7, data_range=1.0):
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for p in np.ndindex(*a.shape):
        sl = window_slices(p, a.shape, window)
        wa, wb = a[sl].ravel(), b[sl].ravel()
        ma, mb = wa.mean(), wb.mean()
        va, vb = wa.var(), wb.var()
        cov = np.mean((wa - ma) * (wb - mb))
        vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def uce_brute(pred, obs, bins):
    pred, obs = np.ravel(pred), np.ravel(obs)
    lo, hi = pred.min(), pred.max()
    width = (hi - lo) / bins
    groups = {}
    for p, o in zip(pred, obs):
        k = bins - 1 if width == 0 else min(int((p - lo) / width), bins - 1)
        groups.setdefault(k, []).append((p, o))
    total = 0.0
    for members in groups.values():
        mp = sum(m[0] for m in members) / len(members)
        mo = sum(m[1] for m in members) / len(members)
        total += len(members) / pred.size * abs(mo - mp)
    return total


def det3(m):
    return (
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    )


def folded_count_brute(u):
    """Count of voxels with ``det(I + du/dx) <= 0`` using forward differences, backward at the far face."""
    dims = u.shape[1:]
    count = 0
    for p in np.ndindex(*dims):
        jac = [[1.0 if i == j else 0.0 for j in range(3)] for i in range(3)]
        for j in range(3):
            q = list(p)
            if p[j] + 1 < dims[j]:
                q[j] += 1
                lo, hi = tuple(p), tuple(q)
            else:
                q[j] -= 1
                lo, hi = tuple(q), tuple(p)
            for i in range(3):
                jac[i][j] += u[(i,) + hi] - u[(i,) + lo]
        count += det3(jac) <= 0
    return count


def cubic_bspline_scalar(t):
    t = abs(t)
    if t < 1:
        return (4 - 6 * t * t + 3 * t**3) / 6
    if t < 2:
        return (2 - t) ** 3 / 6
    return 0.0


def euler_flow(v, steps):
    """Displacement ``p - x(1)`` for ``dx/dt = -v(x)``, ``x(0) = p``, by explicit Euler.

    Velocity lookups use scipy's order-1 ``map_coordinates`` with border
    replication, an interpolation code path independent of the library.
    """
    from scipy import ndimage

    dims = v.shape[1:]
    p = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in dims], indexing="ij")).reshape(3, -1)
    upper = (np.array(dims, dtype=float) - 1)[:, None]
    x = p.copy()
    for _ in range(steps):
        xc = np.clip(x, 0.0, upper)
        vel = np.stack([ndimage.map_coordinates(v[c], xc, order=1, mode="nearest") for c in range(3)])
        x = x - vel / steps
    return (p - x).reshape(v.shape)


def rotation(axis, angle):
    c, s = math.cos(angle), math.sin(angle)
    i, j = [(1, 2), (0, 2), (0, 1)][axis]
    m = np.eye(3)
    m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
    if axis == 1:
        m[i, j], m[j, i] = s, -s
    return m


def homogeneous_affine(params, dims):
    """4x4 matrix T(c) T(t) R_z R_y R_x Sh Sc T(-c) applied per voxel; returns ``phi(p) - p``."""
    rx, ry, rz, tx, ty, tz, sx, sy, sz, hxy, hxz, hyz = params
    shear = np.array([[1, hxy, hxz], [0, 1, hyz], [0, 0, 1.0]])
    lin = rotation(2, rz) @ rotation(1, ry) @ rotation(0, rx) @ shear @ np.diag([sx, sy, sz])
    c = (np.array(dims, dtype=float) - 1) / 2
    to_c, from_c, move, core = np.eye(4), np.eye(4), np.eye(4), np.eye(4)
    to_c[:3, 3] = c
    from_c[:3, 3] = -c
    move[:3, 3] = (tx, ty, tz)
    core[:3, :3] = lin
    h = move @ to_c @ core @ from_c
    out = np.zeros((3,) + tuple(dims))
    for p in np.ndindex(*dims):
        q = h @ np.array(list(p) + [1.0])
        for d in range(3):
            out[(d,) + p] = q[d] - p[d]
    return out


def attention_scalar(x, wq, wk, wv, bq, bk, bv, bias, wo, bo):
    """Single-head attention over a list of token vectors, written out term by term."""
    n, c = len(x), len(x[0])
    q = [[sum(x[i][a] * wq[a][o] for a in range(c)) + bq[o] for o in range(c)] for i in range(n)]
    k = [[sum(x[i][a] * wk[a][o] for a in range(c)) + bk[o] for o in range(c)] for i in range(n)]
    v = [[sum(x[i][a] * wv[a][o] for a in range(c)) + bv[o] for o in range(c)] for i in range(n)]
    out = []
    for i in range(n):
        logits = [sum(q[i][o] * k[j][o] for o in range(c)) / math.sqrt(c) + bias[i][j] for j in range(n)]
        m = max(logits)
        e = [math.exp(t - m) for t in logits]
        s = sum(e)
        head = [sum(e[j] / s * v[j][o] for j in range(n)) for o in range(c)]
        out.append([sum(head[a] * wo[a][o] for a in range(c)) + bo[o] for o in range(c)])
    return out
