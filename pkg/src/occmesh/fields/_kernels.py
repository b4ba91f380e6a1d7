"""Compiled inner loops for voxelization and hard z-buffer rasterization."""

import numpy as np
from numba import njit

_TINY = 1e-300


@njit(cache=True)
def ray_parity(verts, faces, origin, h, dims, jitter_x, jitter_y):
    """Per-node parity of +z ray crossings with the given triangles."""
    nx, ny, nz = dims[0], dims[1], dims[2]
    parity = np.zeros((nx, ny, nz), dtype=np.uint8)
    for f in range(faces.shape[0]):
        a = verts[faces[f, 0]]
        b = verts[faces[f, 1]]
        c = verts[faces[f, 2]]
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-300:
            continue
        x0 = min(a[0], b[0], c[0])
        x1 = max(a[0], b[0], c[0])
        y0 = min(a[1], b[1], c[1])
        y1 = max(a[1], b[1], c[1])
        i0 = max(int(np.floor((x0 - origin[0] - jitter_x) / h)), 0)
        i1 = min(int(np.ceil((x1 - origin[0] - jitter_x) / h)), nx - 1)
        j0 = max(int(np.floor((y0 - origin[1] - jitter_y) / h)), 0)
        j1 = min(int(np.ceil((y1 - origin[1] - jitter_y) / h)), ny - 1)
        for i in range(i0, i1 + 1):
            px = origin[0] + i * h + jitter_x
            for j in range(j0, j1 + 1):
                py = origin[1] + j * h + jitter_y
                w1 = ((px - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (py - a[1])) / det
                w2 = ((b[0] - a[0]) * (py - a[1]) - (px - a[0]) * (b[1] - a[1])) / det
                w0 = 1.0 - w1 - w2
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                zhit = w0 * a[2] + w1 * b[2] + w2 * c[2]
                kmax = int(np.ceil((zhit - origin[2]) / h))
                if kmax > nz:
                    kmax = nz
                for k in range(0, kmax):
                    if origin[2] + k * h < zhit:
                        parity[i, j, k] ^= 1
    return parity


@njit(cache=True)
def _seg_sq(px, py, pz, ax, ay, az, bx, by, bz, t):
    qx = ax + t * (bx - ax) - px
    qy = ay + t * (by - ay) - py
    qz = az + t * (bz - az) - pz
    return qx * qx + qy * qy + qz * qz


@njit(cache=True)
def _seg_t(px, py, pz, ax, ay, az, bx, by, bz):
    ex, ey, ez = bx - ax, by - ay, bz - az
    den = ex * ex + ey * ey + ez * ez
    if den <= _TINY:
        return 0.0
    t = ((px - ax) * ex + (py - ay) * ey + (pz - az) * ez) / den
    return min(max(t, 0.0), 1.0)


@njit(cache=True)
def _closest_point_sq(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    # squared distance from p to triangle abc (Voronoi-region walk)
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return _seg_sq(px, py, pz, ax, ay, az, bx, by, bz, d1 / max(d1 - d3, _TINY))
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return _seg_sq(px, py, pz, ax, ay, az, cx, cy, cz, d2 / max(d2 - d6, _TINY))
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        return _seg_sq(px, py, pz, bx, by, bz, cx, cy, cz, (d4 - d3) / max((d4 - d3) + (d5 - d6), _TINY))
    if va + vb + vc <= _TINY:
        # zero-area face: nearest point lies on one of its edges
        ab = _seg_sq(px, py, pz, ax, ay, az, bx, by, bz, _seg_t(px, py, pz, ax, ay, az, bx, by, bz))
        bc = _seg_sq(px, py, pz, bx, by, bz, cx, cy, cz, _seg_t(px, py, pz, bx, by, bz, cx, cy, cz))
        ca = _seg_sq(px, py, pz, cx, cy, cz, ax, ay, az, _seg_t(px, py, pz, cx, cy, cz, ax, ay, az))
        return min(ab, bc, ca)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    qx = ax + abx * v + acx * w - px
    qy = ay + aby * v + acy * w - py
    qz = az + abz * v + acz * w - pz
    return qx * qx + qy * qy + qz * qz


@njit(cache=True)
def min_surface_distance(points, verts, faces):
    out = np.empty(points.shape[0])
    for n in range(points.shape[0]):
        px, py, pz = points[n, 0], points[n, 1], points[n, 2]
        best = np.inf
        for f in range(faces.shape[0]):
            a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
            d = _closest_point_sq(
                px, py, pz,
                verts[a, 0], verts[a, 1], verts[a, 2],
                verts[b, 0], verts[b, 1], verts[b, 2],
                verts[c, 0], verts[c, 1], verts[c, 2],
            )
            if d < best:
                best = d
        out[n] = np.sqrt(best)
    return out


@njit(cache=True)
def zbuffer(screen, faces, H, W):
    """Hard rasterization of screen-space triangles (x, y in [-1, 1], z depth).

    Returns the nearest face index per pixel (-1 for empty) and its depth.
    """
    depth = np.full((H, W), np.inf)
    fid = np.full((H, W), -1, dtype=np.int64)
    for f in range(faces.shape[0]):
        a = screen[faces[f, 0]]
        b = screen[faces[f, 1]]
        c = screen[faces[f, 2]]
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-14:
            continue
        x0 = min(a[0], b[0], c[0])
        x1 = max(a[0], b[0], c[0])
        y0 = min(a[1], b[1], c[1])
        y1 = max(a[1], b[1], c[1])
        c0 = max(int(np.floor((x0 + 1.0) * W / 2.0 - 0.5)), 0)
        c1 = min(int(np.ceil((x1 + 1.0) * W / 2.0 - 0.5)), W - 1)
        r0 = max(int(np.floor((y0 + 1.0) * H / 2.0 - 0.5)), 0)
        r1 = min(int(np.ceil((y1 + 1.0) * H / 2.0 - 0.5)), H - 1)
        for r in range(r0, r1 + 1):
            py = 2.0 * (r + 0.5) / H - 1.0
            for col in range(c0, c1 + 1):
                px = 2.0 * (col + 0.5) / W - 1.0
                w1 = ((px - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (py - a[1])) / det
                w2 = ((b[0] - a[0]) * (py - a[1]) - (px - a[0]) * (b[1] - a[1])) / det
                w0 = 1.0 - w1 - w2
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * a[2] + w1 * b[2] + w2 * c[2]
                if z < depth[r, col]:
                    depth[r, col] = z
                    fid[r, col] = f
    return fid, depth
