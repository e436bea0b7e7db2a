"""Independent scalar reimplementations used as test oracles.

These loops use plain Python floats and the same operation order as the
vectorized code, so agreement is expected bit for bit.
"""

import math

import numpy as np


def project_point(cam, p):
    R, T = cam.rotation.tolist(), cam.translation.tolist()
    x, y, z = (float(c) for c in p)
    xc = R[0][0] * x + R[0][1] * y + R[0][2] * z + T[0]
    yc = R[1][0] * x + R[1][1] * y + R[1][2] * z + T[1]
    zc = R[2][0] * x + R[2][1] * y + R[2][2] * z + T[2]
    if not zc > 0:
        return None
    u = cam.focal * (xc / zc) + float(cam.principal_point[0])
    v = cam.focal * (yc / zc) + float(cam.principal_point[1])
    if not (0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1):
        return None
    return u, v


def lerp(a, b, t):
    return a + t * (b - a) if t < 0.5 else b - (1.0 - t) * (b - a)


def bilinear(fmap, u, v):
    H, W, C = fmap.shape
    x0 = min(math.floor(u), max(W - 2, 0))
    y0 = min(math.floor(v), max(H - 2, 0))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = u - x0, v - y0
    out = []
    for c in range(C):
        a, b = float(fmap[y0, x0, c]), float(fmap[y0, x1, c])
        d, e = float(fmap[y1, x0, c]), float(fmap[y1, x1, c])
        top = lerp(a, b, fx)
        bot = lerp(d, e, fx)
        out.append(lerp(top, bot, fy))
    return out


def brute_force_variance(maps, cameras, centers):
    """Per-voxel population variance of min-shifted values, summed ascending."""
    C = maps[0].shape[2]
    data = np.zeros((len(centers), C))
    count = np.zeros(len(centers), dtype=np.int64)
    for i, p in enumerate(centers):
        samples = []
        for fmap, cam in zip(maps, cameras):
            uv = project_point(cam, p)
            if uv is not None:
                samples.append(bilinear(fmap, *uv))
        count[i] = len(samples)
        if len(samples) < 2:
            continue
        for c in range(C):
            vals = sorted(s[c] for s in samples)
            vals = [x - vals[0] for x in vals]
            total = 0.0
            for x in vals:
                total = total + x
            mean = total / len(vals)
            sq = 0.0
            for x in vals:
                sq = sq + (x - mean) * (x - mean)
            data[i, c] = sq / len(vals)
    return data, count


def trilinear(data, origin, spacing, p):
    """Eight-corner trilinear sum written out per corner."""
    dims = data.shape[:3]
    g = [(float(p[a]) - float(origin[a])) / spacing for a in range(3)]
    if not all(0 <= g[a] <= dims[a] - 1 for a in range(3)):
        return np.zeros(data.shape[3])
    i0 = [min(int(math.floor(g[a])), dims[a] - 2) for a in range(3)]
    f = [g[a] - i0[a] for a in range(3)]
    acc = np.zeros(data.shape[3])
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                w = (f[0] if cx else 1 - f[0]) * (f[1] if cy else 1 - f[1]) * (f[2] if cz else 1 - f[2])
                acc += w * data[i0[0] + cx, i0[1] + cy, i0[2] + cz].astype(np.float64)
    return acc
