"""Rotations, weak-perspective projection and similarity alignment.

Coordinate conventions used across the package:

* Model frame: x right, y down, z pointing away from the camera (meters).
* Normalized image coordinates span [-1, 1] on both axes with the origin at the
  image center. Pixel ``p`` (continuous, pixel ``i`` has its center at ``i``)
  maps to ``n = 2 * (p + 0.5) / size - 1``; see :func:`pixel_to_normalized`.
"""

import numpy as np
import torch

DEGENERATE_EPS = 1e-8


class DegenerateRotationError(ValueError):
    pass


class AlignmentDegenerateError(ValueError):
    pass


def rot6d_to_matrix(r):
    """Map (..., 6) 6D rotations to (..., 3, 3) rotation matrices.

    The first three values give column 1 after normalization; the last three
    are orthogonalized against it for column 2; column 3 is their cross product.
    """
    r = torch.as_tensor(r)
    if r.shape[-1] != 6:
        raise ValueError(f"expected trailing dimension 6, got {tuple(r.shape)}")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = a1.norm(dim=-1, keepdim=True)
    if bool((n1 < DEGENERATE_EPS).any()) or bool((a2.norm(dim=-1) < DEGENERATE_EPS).any()):
        raise DegenerateRotationError("zero-length vector in 6D rotation")
    if bool((torch.cross(a1, a2, dim=-1).norm(dim=-1) < DEGENERATE_EPS).any()):
        raise DegenerateRotationError("parallel vectors in 6D rotation")
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = u2.norm(dim=-1, keepdim=True)
    if bool((n2 < DEGENERATE_EPS).any()):
        raise DegenerateRotationError("parallel vectors in 6D rotation")
    b2 = u2 / n2
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d(R):
    """Inverse of :func:`rot6d_to_matrix` on SO(3): first two columns, concatenated."""
    if isinstance(R, np.ndarray):
        return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def axis_angle_to_matrix(aa):
    """Rodrigues formula on numpy (..., 3) arrays; used by the data tools."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(theta < 1e-12, 1.0, theta)
    k = aa / safe
    K = np.zeros(aa.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    th = theta[..., None]
    R = np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)
    return np.where(theta[..., None] < 1e-12, np.eye(3), R)


def project_weak_perspective(points, cam):
    """Project (..., P, 3) points with a (..., 3) camera ``[s, t_x, t_y]``.

    Returns (..., P, 2) normalized image coordinates ``s * xy + t``.
    """
    points = torch.as_tensor(points)
    cam = torch.as_tensor(cam, dtype=points.dtype)
    if bool((cam[..., 0] <= 0).any()):
        raise ValueError("weak-perspective scale must be positive")
    s = cam[..., 0:1].unsqueeze(-2)
    t = cam[..., 1:3].unsqueeze(-2)
    return s * points[..., :2] + t


def pixel_to_normalized(p, size):
    return 2.0 * (p + 0.5) / size - 1.0


def normalized_to_pixel(n, size):
    return (n + 1.0) * size / 2.0 - 0.5


def procrustes_align(pred, gt):
    """Similarity-align ``pred`` onto ``gt`` (both (P, 3)) in the least-squares sense.

    Returns ``(aligned, (scale, R, t))`` with ``aligned = scale * pred @ R.T + t``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.shape[0] < 3:
        raise AlignmentDegenerateError("need at least 3 points")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    X, Y = pred - mu_p, gt - mu_g
    tol = 1e-10 * max(1.0, np.abs(gt).max(), np.abs(pred).max())
    for name, A in (("pred", X), ("gt", Y)):
        sv = np.linalg.svd(A, compute_uv=False)
        if sv[0] < tol or sv[1] < tol:
            raise AlignmentDegenerateError(f"{name} points are coincident or collinear")
    var_p = (X ** 2).sum()
    U, S, Vt = np.linalg.svd(Y.T @ X)
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    scale = np.trace(np.diag(S) @ D) / var_p
    t = mu_g - scale * R @ mu_p
    aligned = scale * pred @ R.T + t
    return aligned, (scale, R, t)
