"""Soft multi-instance depth rasterizer.

Triangles are projected with a weak-perspective camera while vertex z is kept
as depth (smaller z is nearer). Coverage of a pixel by a face is a sigmoid of
the signed 2D distance to the triangle boundary and an instance covers a pixel
as much as its best-covering face does (front and back layers of a closed
surface would otherwise double-count at the silhouette); per-instance depth is a
coverage-weighted soft minimum over faces. Instances compete for each pixel
through soft front-to-back compositing: instance i is seen where it is
covered and every other covering instance is softly behind it.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..geometry import project_weak_perspective
from ._kernels import zbuffer

COVERAGE_EPS = 1e-4
DEGENERATE_AREA = 1e-12


@dataclass
class DepthRender:
    depth: torch.Tensor  # (N, H, W), +inf where the instance is absent
    soft_visibility: torch.Tensor  # (N, H, W), per-pixel sum <= 1
    coverage: torch.Tensor  # (N, H, W)
    degenerate_faces: int = 0

    def most_visible(self):
        """Index of the most visible instance per pixel, -1 where nothing is drawn."""
        vis = self.soft_visibility
        idx = vis.argmax(0)
        return torch.where(vis.amax(0) > COVERAGE_EPS, idx, torch.full_like(idx, -1))


def pixel_centers(H, W, dtype=torch.float64):
    xs = (2.0 * torch.arange(W, dtype=dtype) + 1.0) / W - 1.0
    ys = (2.0 * torch.arange(H, dtype=dtype) + 1.0) / H - 1.0
    return xs, ys


def _candidate_pairs(tri, H, W, margin):
    """(face, row, col) triples for pixels within ``margin`` of each face's 2D bbox."""
    lo = tri.min(1) - margin
    hi = tri.max(1) + margin
    c0 = np.clip(np.floor((lo[:, 0] + 1.0) * W / 2.0 - 0.5), 0, W - 1).astype(np.int64)
    c1 = np.clip(np.ceil((hi[:, 0] + 1.0) * W / 2.0 - 0.5), 0, W - 1).astype(np.int64)
    r0 = np.clip(np.floor((lo[:, 1] + 1.0) * H / 2.0 - 0.5), 0, H - 1).astype(np.int64)
    r1 = np.clip(np.ceil((hi[:, 1] + 1.0) * H / 2.0 - 0.5), 0, H - 1).astype(np.int64)
    off = (hi[:, 0] < -1 - margin) | (lo[:, 0] > 1 + margin) | (hi[:, 1] < -1 - margin) | (lo[:, 1] > 1 + margin)
    nc = np.where(off, 0, c1 - c0 + 1)
    nr = np.where(off, 0, r1 - r0 + 1)
    counts = nc * nr
    face = np.repeat(np.arange(len(tri)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(counts.sum()) - start
    rows = r0[face] + local // nc[face]
    cols = c0[face] + local % nc[face]
    return face, rows, cols


def _cross2(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _segment_distance(p, a, b):
    ab = b - a
    t = ((p - a) * ab).sum(-1) / (ab * ab).sum(-1).clamp_min(1e-30)
    t = t.clamp(0.0, 1.0)
    q = a + t.unsqueeze(-1) * ab
    return ((p - q) ** 2).sum(-1).clamp_min(1e-30).sqrt()


def _edge_neighbors(faces):
    """For each face edge (v_k, v_k+1), the opposite vertex of the adjacent face or -1."""
    faces = np.asarray(faces)
    opp = np.full(faces.shape, -1, dtype=np.int64)
    table = {}
    for f, tri in enumerate(faces):
        for k in range(3):
            a, b = tri[k], tri[(k + 1) % 3]
            table.setdefault((min(a, b), max(a, b)), []).append((f, k))
    for pairs in table.values():
        if len(pairs) == 2:
            (f0, k0), (f1, k1) = pairs
            opp[f0, k0] = faces[f1, (k1 + 2) % 3]
            opp[f1, k1] = faces[f0, (k0 + 2) % 3]
    return opp


def _interior_edges(xy, faces, opp):
    """(F, 3) mask of edges whose neighbouring face lies on the other side in 2D.

    Such edges are not part of the projected silhouette and must not attenuate
    coverage, otherwise every internal edge shows up as a seam.
    """
    tri = xy[faces]
    out = np.zeros(faces.shape, dtype=bool)
    for k in range(3):
        a, b, c = tri[:, k], tri[:, (k + 1) % 3], tri[:, (k + 2) % 3]
        d = xy[np.maximum(opp[:, k], 0)]
        side_c = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        side_d = (b[:, 0] - a[:, 0]) * (d[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (d[:, 0] - a[:, 0])
        out[:, k] = (opp[:, k] >= 0) & (side_c * side_d < 0)
    return out


def _render_instance(screen, faces, H, W, sharpness, cutoff):
    """Per-pixel log(1 - coverage) and soft-min depth for one instance."""
    dtype = screen.dtype
    faces = np.asarray(faces, dtype=np.int64)
    interior = _interior_edges(screen.detach().numpy()[:, :2], faces, _edge_neighbors(faces))
    faces = torch.from_numpy(faces)
    tri = screen[faces]  # (F, 3, 3)
    area2 = _cross2(tri[:, 1, :2] - tri[:, 0, :2], tri[:, 2, :2] - tri[:, 0, :2])
    good = area2.detach().abs() > DEGENERATE_AREA
    n_degenerate = int((~good).sum())
    keep = torch.nonzero(good).squeeze(1)
    tri, area2 = tri[keep], area2[keep]
    interior = torch.from_numpy(interior)[keep]

    face, rows, cols = _candidate_pairs(tri.detach().numpy()[:, :, :2], H, W, cutoff / sharpness)
    face = torch.from_numpy(face)
    pix = torch.from_numpy(rows * W + cols)
    xs, ys = pixel_centers(H, W, dtype)
    p = torch.stack([xs[torch.from_numpy(cols)], ys[torch.from_numpy(rows)]], -1)

    t = tri[face]  # (P, 3, 3)
    a, b, c = t[:, 0, :2], t[:, 1, :2], t[:, 2, :2]
    ar = area2[face]
    # barycentric coordinates via edge functions
    la = _cross2(c - b, p - b) / ar
    lb = _cross2(a - c, p - c) / ar
    lc = _cross2(b - a, p - a) / ar
    inside = (la >= 0) & (lb >= 0) & (lc >= 0)
    edge_d = torch.stack([_segment_distance(p, a, b), _segment_distance(p, b, c), _segment_distance(p, c, a)], -1)
    # inside a face only silhouette edges count towards the boundary distance
    inner = torch.where(interior[face], torch.full_like(edge_d, 1e3), edge_d).amin(-1)
    signed = torch.where(inside, inner, -edge_d.amin(-1))

    lam = torch.stack([la, lb, lc], -1).clamp_min(0.0)
    lam = lam / lam.sum(-1, keepdim=True).clamp_min(1e-30)
    z = (lam * t[:, :, 2]).sum(-1)

    npix = H * W
    best = torch.full((npix,), -torch.inf, dtype=dtype).scatter_reduce(0, pix, signed, "amax")
    log_1mc = F.logsigmoid(-sharpness * best)
    logits = F.logsigmoid(sharpness * signed) - sharpness * z
    ref = torch.full((npix,), -torch.inf, dtype=dtype).scatter_reduce(0, pix, logits.detach(), "amax")
    e = torch.exp(logits - ref[pix])
    num = torch.zeros(npix, dtype=dtype).index_add(0, pix, e * z)
    den = torch.zeros(npix, dtype=dtype).index_add(0, pix, e)
    has = den > 0
    depth = num / torch.where(has, den, torch.ones_like(den))
    return log_1mc, depth, has, n_degenerate


def rasterize(meshes, cam, H=64, W=64, sharpness=50.0, cutoff=12.0):
    """Render instance coverage, depth and soft visibility for a list of meshes.

    ``meshes`` holds ``(vertices (V, 3) tensor, faces (F, 3))`` pairs that share
    one camera ``cam = [s, t_x, t_y]``. Face-pixel pairs farther than
    ``cutoff / sharpness`` from a face's bounding box are treated as
    uncovered (sigmoid below about 1e-5 at the default cutoff).
    """
    if not meshes:
        raise ValueError("need at least one mesh")
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    verts0 = torch.as_tensor(meshes[0][0])
    dtype = verts0.dtype
    cam = torch.as_tensor(cam, dtype=dtype)
    logs, depths, hases = [], [], []
    n_degenerate = 0
    for verts, faces in meshes:
        verts = torch.as_tensor(verts, dtype=dtype)
        xy = project_weak_perspective(verts, cam)
        screen = torch.cat([xy, verts[:, 2:3]], -1)
        log_1mc, depth, has, nd = _render_instance(screen, faces, H, W, sharpness, cutoff)
        logs.append(log_1mc)
        depths.append(depth)
        hases.append(has)
        n_degenerate += nd
    S = torch.stack(logs)  # (N, P)
    D = torch.stack(depths)
    has = torch.stack(hases)
    cov = -torch.expm1(S)
    # P(i in front of j) = sigmoid(sharpness * (D_j - D_i)); an absent j never occludes
    Dm = torch.where(has, D, torch.zeros_like(D))
    front = torch.sigmoid(sharpness * (Dm.unsqueeze(0) - Dm.unsqueeze(1)))  # [i, j]
    occl = 1.0 - cov.unsqueeze(0) * (1.0 - front)
    eye = torch.eye(len(meshes), dtype=torch.bool).unsqueeze(-1)
    vis = cov * torch.where(eye, torch.ones_like(occl), occl).prod(1)
    depth = torch.where(has & (cov > COVERAGE_EPS), D, torch.full_like(D, torch.inf))
    N = len(meshes)
    return DepthRender(
        depth=depth.reshape(N, H, W),
        soft_visibility=vis.reshape(N, H, W),
        coverage=cov.reshape(N, H, W),
        degenerate_faces=n_degenerate,
    )


def hard_rasterize(meshes, cam, H, W):
    """Non-differentiable z-buffer: (instance id map with -1 background, face id map, depth map)."""
    screens, faces_all, owner = [], [], []
    offset = 0
    cam = np.asarray(cam, dtype=np.float64)
    for n, (verts, faces) in enumerate(meshes):
        v = np.asarray(verts.detach() if isinstance(verts, torch.Tensor) else verts, dtype=np.float64)
        screens.append(np.concatenate([cam[0] * v[:, :2] + cam[1:3], v[:, 2:3]], 1))
        faces_all.append(np.asarray(faces) + offset)
        owner.append(np.full(len(faces), n))
        offset += len(v)
    screen = np.ascontiguousarray(np.concatenate(screens))
    faces = np.ascontiguousarray(np.concatenate(faces_all), dtype=np.int64)
    owner = np.concatenate(owner)
    fid, depth = zbuffer(screen, faces, H, W)
    inst = np.where(fid >= 0, owner[np.maximum(fid, 0)], -1)
    return inst, fid, depth
