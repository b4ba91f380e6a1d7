"""Voxelized interior-distance fields used by the interpenetration penalty.

The stored field is zero outside a mesh and equals the distance to the
nearest surface point inside it.
"""

from dataclasses import dataclass

import numpy as np
import torch

from ..body_model import mesh_components
from ._kernels import min_surface_distance, ray_parity

# irrational sub-voxel offsets keep parity rays off mesh edges and vertices
_JITTER = (np.sqrt(2.0) - 1.0) * 1e-4, (np.sqrt(3.0) - 1.0) * 1e-4


class TopologyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SDFGrid:
    origin: np.ndarray  # (3,)
    spacing: float
    dims: tuple
    values: np.ndarray  # dims-shaped, >= 0

    def node(self, i, j, k):
        return self.origin + self.spacing * np.array([i, j, k], dtype=np.float64)


def check_watertight(faces):
    """Every undirected edge must be shared by exactly two faces."""
    faces = np.asarray(faces)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    bad = int((counts != 2).sum())
    if bad:
        raise TopologyError(f"mesh is not watertight: {bad} edges without exactly two faces")


def build_sdf(vertices, faces, resolution=32, offset=None):
    """Interior-distance grid over the mesh bounding box plus one voxel of margin.

    ``resolution`` is the node count along the longest box axis. Inside/outside
    uses +z ray parity per connected component; a point inside any component is
    inside the mesh. ``offset`` (three fractions of a voxel in [0, 1)) shifts the
    node lattice towards the low corner; the grid grows by one node per axis
    so the margin is kept.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    if isinstance(vertices, torch.Tensor):
        vertices = vertices.detach().cpu().numpy()
    verts = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    check_watertight(faces)

    lo, hi = verts.min(0), verts.max(0)
    extent = max(float((hi - lo).max()), 1e-9)
    h = extent / (resolution - 3)
    if not np.isfinite(verts).all():
        raise ValueError("non-finite vertices")
    dims = np.ceil((hi - lo) / h).astype(int) + 3
    origin = lo - h
    if offset is not None:
        offset = np.asarray(offset, dtype=np.float64)
        if offset.shape != (3,) or (offset < 0).any() or (offset >= 1).any():
            raise ValueError("offset must be three fractions in [0, 1)")
        origin = origin - offset * h
        dims = dims + 1
    dims = tuple(int(d) for d in dims)

    inside = np.zeros(dims, dtype=bool)
    labels = mesh_components(faces, len(verts))
    dims_arr = np.array(dims, dtype=np.int64)
    for comp in range(labels.max() + 1):
        sub = np.ascontiguousarray(faces[labels == comp])
        inside |= ray_parity(verts, sub, origin, h, dims_arr, *_JITTER).astype(bool)

    values = np.zeros(dims)
    idx = np.argwhere(inside)
    if len(idx):
        pts = origin + h * idx
        values[inside] = min_surface_distance(np.ascontiguousarray(pts), verts, faces)
    return SDFGrid(origin=origin, spacing=h, dims=dims, values=values)


def sample_sdf(grid, points):
    """Trilinear interpolation of ``grid`` at (..., 3) points; zero outside the grid.

    Differentiable with respect to ``points``; the field itself is a constant.
    """
    points = torch.as_tensor(points)
    dtype = points.dtype
    vals = torch.as_tensor(grid.values, dtype=dtype)
    origin = torch.as_tensor(grid.origin, dtype=dtype)
    dims = torch.tensor(grid.dims)
    u = (points - origin) / grid.spacing
    inside = ((u >= 0) & (u <= (dims - 1).to(dtype))).all(-1)
    base = u.detach().floor().long()
    base = torch.minimum(torch.clamp(base, min=0), dims - 2)
    frac = u - base.to(dtype)
    out = torch.zeros(points.shape[:-1], dtype=dtype)
    for dx in (0, 1):
        wx = frac[..., 0] if dx else 1 - frac[..., 0]
        for dy in (0, 1):
            wy = frac[..., 1] if dy else 1 - frac[..., 1]
            for dz in (0, 1):
                wz = frac[..., 2] if dz else 1 - frac[..., 2]
                v = vals[base[..., 0] + dx, base[..., 1] + dy, base[..., 2] + dz]
                out = out + wx * wy * wz * v
    return torch.where(inside, out, torch.zeros_like(out))
