"""Closed reference meshes with known distance fields."""

import numpy as np


def icosphere(subdivisions=3, radius=1.0):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts) * radius, np.array(faces, dtype=np.int64)


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), n=8):
    """Axis-aligned box surface with an ``n x n`` vertex grid on every face."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    index = {}
    verts = []
    faces = []

    def vid(ijk):
        if ijk not in index:
            index[ijk] = len(verts)
            verts.append(lo + (hi - lo) * np.array(ijk) / (n - 1))
        return index[ijk]

    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, n - 1):
            for i in range(n - 1):
                for j in range(n - 1):
                    q = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        ijk = [0, 0, 0]
                        ijk[axis], ijk[u], ijk[v] = side, i + di, j + dj
                        q.append(vid(tuple(ijk)))
                    tris = [(q[0], q[1], q[2]), (q[0], q[2], q[3])]
                    # outward orientation
                    flip = (side == 0) != (axis == 1)
                    faces += [t[::-1] if flip else t for t in tris]
    return np.array(verts), np.array(faces, dtype=np.int64)
