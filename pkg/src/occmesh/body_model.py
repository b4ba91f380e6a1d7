"""Articulated body model: shape blendshapes, forward kinematics and linear blend skinning.

The 24-joint tree follows the SMPL topology. ``make_toy_model`` builds a
license-free low-poly humanoid with that tree; ``load_model`` reads the same
arrays from an ``.npz`` archive so real SMPL weights can be dropped in.
"""

from dataclasses import dataclass
import functools
import zipfile

import numpy as np
import torch

from .geometry import rot6d_to_matrix

NUM_JOINTS = 24
NUM_BETAS = 10

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)
SMPL_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21],
    dtype=np.int64,
)
PELVIS = 0
# neck, shoulders, pelvis, hips
TORSO_JOINTS = (12, 16, 17, 0, 1, 2)

# COCO order: nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles.
# The five face points have no counterpart in the 24-joint tree and all read the head joint.
COCO17_FROM_SMPL24 = np.array([15, 15, 15, 15, 15, 16, 17, 18, 19, 20, 21, 1, 2, 4, 5, 7, 8])

ARCHIVE_FIELDS = {
    # name: (dtype, shape with None for free dims)
    "template": (np.float32, (None, 3)),
    "faces": (np.int32, (None, 3)),
    "shape_basis": (np.float32, (None, 3, NUM_BETAS)),
    "joint_regressor": (np.float32, (NUM_JOINTS, None)),
    "parents": (np.int32, (NUM_JOINTS,)),
    "skinning_weights": (np.float32, (None, NUM_JOINTS)),
}


class SchemaError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BodyModelSpec:
    template_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    shape_basis: np.ndarray  # (V, 3, 10)
    joint_regressor: np.ndarray  # (24, V)
    parents: np.ndarray  # (24,)
    skinning_weights: np.ndarray  # (V, 24)

    @property
    def num_vertices(self):
        return self.template_vertices.shape[0]

    def validate(self):
        V = self.template_vertices.shape[0]
        checks = {
            "template": self.template_vertices.shape == (V, 3),
            "faces": self.faces.ndim == 2 and self.faces.shape[1] == 3,
            "shape_basis": self.shape_basis.shape == (V, 3, NUM_BETAS),
            "joint_regressor": self.joint_regressor.shape == (NUM_JOINTS, V),
            "parents": self.parents.shape == (NUM_JOINTS,),
            "skinning_weights": self.skinning_weights.shape == (V, NUM_JOINTS),
        }
        for name, ok in checks.items():
            if not ok:
                raise SchemaError(f"{name}: unexpected shape")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise SchemaError("faces: index out of range")
        if not np.isfinite(self.template_vertices).all():
            raise SchemaError("template: non-finite values")
        if not np.allclose(self.joint_regressor.sum(1), 1.0, atol=1e-6, rtol=0):
            raise SchemaError("joint_regressor: rows must sum to 1")
        w = self.skinning_weights
        if (w < 0).any() or not np.allclose(w.sum(1), 1.0, atol=1e-6, rtol=0):
            raise SchemaError("skinning_weights: rows must be nonnegative and sum to 1")
        kinematic_order(self.parents)
        return self


def kinematic_order(parents):
    """Topological order of a single rooted tree, raising SchemaError otherwise."""
    parents = np.asarray(parents)
    roots = np.flatnonzero(parents == -1)
    if len(roots) != 1:
        raise SchemaError(f"parents: expected exactly one root, found {len(roots)}")
    n = len(parents)
    if ((parents < -1) | (parents >= n)).any():
        raise SchemaError("parents: index out of range")
    children = [[] for _ in range(n)]
    for j, p in enumerate(parents):
        if p >= 0:
            children[p].append(j)
    order, stack = [], [int(roots[0])]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        raise SchemaError("parents: not a single connected tree")
    return order


@dataclass
class BodyParams:
    """Regression target: 6D pose (..., 24, 6), shape (..., 10), camera (..., 3) = [s, t_x, t_y]."""

    pose: torch.Tensor
    shape: torch.Tensor
    camera: torch.Tensor

    VECTOR_SIZE = NUM_JOINTS * 6 + NUM_BETAS + 3

    def to_vector(self):
        return torch.cat([self.pose.flatten(-2), self.shape, self.camera], dim=-1)

    @classmethod
    def from_vector(cls, vec):
        pose = vec[..., : NUM_JOINTS * 6].unflatten(-1, (NUM_JOINTS, 6))
        shape = vec[..., NUM_JOINTS * 6 : NUM_JOINTS * 6 + NUM_BETAS]
        camera = vec[..., NUM_JOINTS * 6 + NUM_BETAS :]
        return cls(pose, shape, camera)

    def __getitem__(self, idx):
        return BodyParams(self.pose[idx], self.shape[idx], self.camera[idx])

    def detach(self):
        return BodyParams(self.pose.detach(), self.shape.detach(), self.camera.detach())

    def validate(self):
        for name in ("pose", "shape", "camera"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ValueError(f"non-finite {name}")
        if bool((self.camera[..., 0] <= 0).any()):
            raise ValueError("camera scale must be positive")
        rot6d_to_matrix(self.pose)
        return self


def neutral_params(batch_shape=(), dtype=torch.float64, scale=1.0):
    pose = torch.zeros(*batch_shape, NUM_JOINTS, 6, dtype=dtype)
    pose[..., 0] = 1.0
    pose[..., 4] = 1.0
    shape = torch.zeros(*batch_shape, NUM_BETAS, dtype=dtype)
    camera = torch.zeros(*batch_shape, 3, dtype=dtype)
    camera[..., 0] = scale
    return BodyParams(pose, shape, camera)


@functools.lru_cache(maxsize=16)
def _spec_tensors(spec, dtype):
    return {
        "template": torch.as_tensor(spec.template_vertices, dtype=dtype),
        "shape_basis": torch.as_tensor(spec.shape_basis, dtype=dtype),
        "regressor": torch.as_tensor(spec.joint_regressor, dtype=dtype),
        "weights": torch.as_tensor(spec.skinning_weights, dtype=dtype),
        "order": kinematic_order(spec.parents),
    }


def body_forward(spec, pose, shape):
    """Pose and shape the body.

    ``pose`` is (..., 24, 6) or (..., 24, 3, 3); ``shape`` is (..., 10).
    Returns vertices (..., V, 3) and posed joints (..., 24, 3).
    """
    pose = torch.as_tensor(pose)
    dtype = pose.dtype
    t = _spec_tensors(spec, dtype)
    shape = torch.as_tensor(shape, dtype=dtype)
    R = pose if pose.shape[-2:] == (3, 3) else rot6d_to_matrix(pose)
    batch = R.shape[:-3]

    v_shaped = t["template"] + torch.einsum("vck,...k->...vc", t["shape_basis"], shape)
    rest_joints = torch.einsum("jv,...vc->...jc", t["regressor"], v_shaped)

    parents = spec.parents
    rots = [None] * NUM_JOINTS
    trans = [None] * NUM_JOINTS
    for j in t["order"]:
        p = parents[j]
        if p < 0:
            rots[j] = R[..., j, :, :]
            trans[j] = rest_joints[..., j, :]
        else:
            offset = rest_joints[..., j, :] - rest_joints[..., p, :]
            rots[j] = rots[p] @ R[..., j, :, :]
            trans[j] = trans[p] + (rots[p] @ offset.unsqueeze(-1)).squeeze(-1)
    G_rot = torch.stack(rots, dim=-3)  # (..., 24, 3, 3)
    joints = torch.stack(trans, dim=-2)  # (..., 24, 3)

    # remove rest-pose joint location so skinning acts on template coordinates
    A_t = joints - (G_rot @ rest_joints.unsqueeze(-1)).squeeze(-1)
    W = t["weights"]
    T_rot = torch.einsum("vj,...jab->...vab", W, G_rot)
    T_t = torch.einsum("vj,...ja->...va", W, A_t)
    verts = (T_rot @ v_shaped.unsqueeze(-1)).squeeze(-1) + T_t
    assert verts.shape[:-2] == batch
    return verts, joints


def regress_keypoints17(joints24):
    return joints24[..., COCO17_FROM_SMPL24, :]


# ---------------------------------------------------------------------------
# archive IO


def save_model(spec, path):
    arrays = {
        "template": spec.template_vertices,
        "faces": spec.faces,
        "shape_basis": spec.shape_basis,
        "joint_regressor": spec.joint_regressor,
        "parents": spec.parents,
        "skinning_weights": spec.skinning_weights,
    }
    out = {}
    for name, arr in arrays.items():
        dtype = np.dtype(ARCHIVE_FIELDS[name][0]).newbyteorder("<")
        out[name] = np.asarray(arr).astype(dtype)
    with open(path, "wb") as f:
        np.savez_compressed(f, **out)


def load_model(path):
    """Load a body model archive (see README for the field table).

    Unknown arrays, including pose corrective blendshapes, are ignored.
    """
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise SchemaError(f"cannot read model archive {path}: {e}") from e
    fields = {}
    with archive:
        for name, (dtype, shape) in ARCHIVE_FIELDS.items():
            if name not in archive.files:
                raise SchemaError(f"{name}: missing from archive")
            arr = archive[name]
            if arr.ndim != len(shape) or any(s is not None and s != a for s, a in zip(shape, arr.shape)):
                raise SchemaError(f"{name}: expected shape {shape}, got {arr.shape}")
            fields[name] = arr
    V = fields["template"].shape[0]
    for name in ("shape_basis", "skinning_weights"):
        if fields[name].shape[0] != V:
            raise SchemaError(f"{name}: vertex count {fields[name].shape[0]} != {V}")
    if fields["joint_regressor"].shape[1] != V:
        raise SchemaError(f"joint_regressor: vertex count {fields['joint_regressor'].shape[1]} != {V}")
    spec = BodyModelSpec(
        template_vertices=fields["template"].astype(np.float64),
        faces=fields["faces"].astype(np.int64),
        shape_basis=fields["shape_basis"].astype(np.float64),
        joint_regressor=fields["joint_regressor"].astype(np.float64),
        parents=fields["parents"].astype(np.int64),
        skinning_weights=fields["skinning_weights"].astype(np.float64),
    )
    return spec.validate()


# ---------------------------------------------------------------------------
# procedural toy body

# rest joint positions in an A-pose, y down, toes towards the camera (-z)
_TOY_JOINTS = np.array([
    [0.00, 0.00, 0.0],    # pelvis
    [0.09, 0.05, 0.0],    # left_hip
    [-0.09, 0.05, 0.0],
    [0.00, -0.12, 0.0],   # spine1
    [0.10, 0.45, 0.0],    # left_knee
    [-0.10, 0.45, 0.0],
    [0.00, -0.25, 0.0],   # spine2
    [0.10, 0.85, 0.0],    # left_ankle
    [-0.10, 0.85, 0.0],
    [0.00, -0.38, 0.0],   # spine3
    [0.10, 0.90, -0.12],  # left_foot
    [-0.10, 0.90, -0.12],
    [0.00, -0.50, 0.0],   # neck
    [0.07, -0.45, 0.0],   # left_collar
    [-0.07, -0.45, 0.0],
    [0.00, -0.62, 0.0],   # head
    [0.18, -0.45, 0.0],   # left_shoulder
    [-0.18, -0.45, 0.0],
    [0.37, -0.26, 0.0],   # left_elbow
    [-0.37, -0.26, 0.0],
    [0.54, -0.09, 0.0],   # left_wrist
    [-0.54, -0.09, 0.0],
    [0.60, -0.03, 0.0],   # left_hand
    [-0.60, -0.03, 0.0],
])

# (start joint, end joint, radius); vertices follow the start joint
_TOY_CAPSULES = [
    (1, 4, 0.07), (2, 5, 0.07),
    (4, 7, 0.05), (5, 8, 0.05),
    (7, 10, 0.04), (8, 11, 0.04),
    (12, 15, 0.05),
    (16, 18, 0.045), (17, 19, 0.045),
    (18, 20, 0.04), (19, 21, 0.04),
    (20, 22, 0.035), (21, 23, 0.035),
]
_TORSO_HALF = (0.16, 0.10)
_TORSO_LEVELS = [(0.08, 0), (0.0, 0), (-0.12, 3), (-0.25, 6), (-0.38, 9), (-0.48, 9)]
_HEAD_HALF = (0.09, 0.10)
_HEAD_LEVELS = [-0.61, -0.73, -0.85]


def _perp_basis(d):
    a = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def _closed_tube(rings, start_pole, end_pole):
    """Vertices and faces of a closed surface through stacked rings of equal size.

    ``rings`` is (R, K, 3); poles cap both ends with triangle fans.
    """
    R, K, _ = rings.shape
    verts = np.concatenate([rings.reshape(-1, 3), start_pole[None], end_pole[None]])
    s, e = R * K, R * K + 1
    faces = []
    for r in range(R - 1):
        for k in range(K):
            a, b = r * K + k, r * K + (k + 1) % K
            c, d = a + K, b + K
            faces += [(a, c, b), (b, c, d)]
    for k in range(K):
        faces.append((s, k, (k + 1) % K))
        a, b = (R - 1) * K + k, (R - 1) * K + (k + 1) % K
        faces.append((e, b, a))
    faces = np.array(faces, dtype=np.int64)
    # orient outwards: signed volume w.r.t. the centroid must be positive
    c = verts.mean(0)
    tri = verts[faces] - c
    vol = np.einsum("fi,fi->f", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
    if vol < 0:
        faces = faces[:, ::-1].copy()
    return verts, faces


def _rect_profile(hx, hz):
    # eight points around a rectangle in the xz plane
    return np.array([
        [hx, -hz], [0, -hz], [-hx, -hz], [-hx, 0], [-hx, hz], [0, hz], [hx, hz], [hx, 0],
    ], dtype=np.float64)


def make_toy_model(resolution=1):
    """Procedural humanoid with capsule limbs and box torso/head, about 1.75 units tall.

    Deterministic for a given ``resolution``; each body part is a separate
    closed surface.
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    K = 6 * resolution
    n_body = 1 + 2 * resolution
    n_cap = resolution
    J = _TOY_JOINTS

    parts = []  # (verts, faces, skin joint per vertex, radial offsets, tag)
    ring_index = {}  # joint -> vertex ids whose mean is the joint

    def add_part(verts, faces, skin, radial, tag):
        offset = sum(len(p[0]) for p in parts)
        parts.append((verts, faces + offset, skin, radial, tag))
        return offset

    ang = 2 * np.pi * np.arange(K) / K
    for a, b, radius in _TOY_CAPSULES:
        d = J[b] - J[a]
        L = np.linalg.norm(d)
        d /= L
        e1, e2 = _perp_basis(d)
        circle = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
        rings, centers = [], []
        for i in range(n_cap, 0, -1):
            phi = np.pi / 2 * i / (n_cap + 1)
            centers.append(J[a] - d * radius * np.sin(phi))
            rings.append(centers[-1] + radius * np.cos(phi) * circle)
        body_ts = np.linspace(0.0, 1.0, n_body)
        for tt in body_ts:
            centers.append(J[a] + d * L * tt)
            rings.append(centers[-1] + radius * circle)
        for i in range(1, n_cap + 1):
            phi = np.pi / 2 * i / (n_cap + 1)
            centers.append(J[b] + d * radius * np.sin(phi))
            rings.append(centers[-1] + radius * np.cos(phi) * circle)
        rings = np.array(rings)
        centers = np.array(centers)
        verts, faces = _closed_tube(rings, J[a] - d * radius, J[b] + d * radius)
        radial = np.concatenate([(rings - centers[:, None]).reshape(-1, 3), np.zeros((2, 3))])
        skin = np.full(len(verts), a)
        off = add_part(verts, faces, skin, radial, ("capsule", a, b))
        ring_index.setdefault(a, off + n_cap * K + np.arange(K))
        ring_index.setdefault(b, off + (n_cap + n_body - 1) * K + np.arange(K))

    # torso: rectangular tube along the spine, each ring follows its level's joint
    prof = _rect_profile(*_TORSO_HALF)
    rings = np.array([[[x, y, z] for x, z in prof] for y, _ in _TORSO_LEVELS])
    verts, faces = _closed_tube(
        rings, np.array([0.0, _TORSO_LEVELS[0][0], 0.0]), np.array([0.0, _TORSO_LEVELS[-1][0], 0.0])
    )
    skin = np.concatenate([np.full(len(prof), j) for _, j in _TORSO_LEVELS] + [[0, 9]])
    radial = np.concatenate([(rings - rings.mean(1, keepdims=True)).reshape(-1, 3), np.zeros((2, 3))])
    off = add_part(verts, faces, skin, radial, ("torso",))
    for i, (y, j) in enumerate(_TORSO_LEVELS):
        if np.isclose(y, J[j][1]):
            ring_index[j] = off + i * len(prof) + np.arange(len(prof))

    prof = _rect_profile(*_HEAD_HALF)
    rings = np.array([[[x, y, z] for x, z in prof] for y in _HEAD_LEVELS])
    verts, faces = _closed_tube(
        rings, np.array([0.0, _HEAD_LEVELS[0], 0.0]), np.array([0.0, _HEAD_LEVELS[-1], 0.0])
    )
    radial = np.concatenate([(rings - rings.mean(1, keepdims=True)).reshape(-1, 3), np.zeros((2, 3))])
    add_part(verts, faces, np.full(len(verts), 15), radial, ("head",))

    template = np.concatenate([p[0] for p in parts])
    faces = np.concatenate([p[1] for p in parts])
    skin_joint = np.concatenate([p[2] for p in parts])
    radial = np.concatenate([p[3] for p in parts])
    part_of = np.concatenate([np.full(len(p[0]), i) for i, p in enumerate(parts)])
    V = len(template)

    weights = np.zeros((V, NUM_JOINTS))
    weights[np.arange(V), skin_joint] = 1.0

    regressor = np.zeros((NUM_JOINTS, V))
    for j, ids in ring_index.items():
        regressor[j, ids] = 1.0 / len(ids)
    for collar, shoulder in ((13, 16), (14, 17)):
        regressor[collar] = 0.6 * regressor[12] + 0.4 * regressor[shoulder]
    assert np.allclose(regressor.sum(1), 1.0)

    basis = _toy_shape_basis(template, skin_joint, radial, part_of, parts)
    spec = BodyModelSpec(
        template_vertices=template,
        faces=faces,
        shape_basis=basis,
        joint_regressor=regressor,
        parents=SMPL_PARENTS.copy(),
        skinning_weights=weights,
    )
    return spec.validate()


_LEFT_ARM = {16, 18, 20}
_RIGHT_ARM = {17, 19, 21}
_LEGS = {1, 2, 4, 5, 7, 8}


def _toy_shape_basis(template, skin_joint, radial, part_of, parts):
    V = len(template)
    B = np.zeros((V, 3, NUM_BETAS))
    x, y = template[:, 0], template[:, 1]
    tags = [p[4][0] for p in parts]
    is_torso = np.array([tags[i] == "torso" for i in part_of])
    is_head = np.array([tags[i] == "head" for i in part_of])
    left_arm = np.isin(skin_joint, list(_LEFT_ARM))
    right_arm = np.isin(skin_joint, list(_RIGHT_ARM))
    arm = left_arm | right_arm
    leg = np.isin(skin_joint, list(_LEGS))

    B[:, 1, 0] = 0.06 * y  # stature
    B[:, :, 1] = 0.15 * radial  # girth
    B[leg, 1, 2] = 0.04 * np.clip((y[leg] - 0.05) / 0.4, 0.0, 1.0)  # leg length
    for mask, sh in ((left_arm, _TOY_JOINTS[16]), (right_arm, _TOY_JOINTS[17])):
        d = _TOY_JOINTS[20] - _TOY_JOINTS[16]
        if sh[0] < 0:
            d = d * np.array([-1.0, 1.0, 1.0])
        n = np.linalg.norm(d)
        u = ((template[mask] - sh) @ (d / n)) / n
        B[mask, :, 3] = 0.05 * np.clip(u, 0.0, None)[:, None] * (d / n)  # arm length
    B[arm, 0, 4] = 0.03 * np.sign(x[arm])  # shoulder width
    B[is_torso, 0, 5] = 0.04 * x[is_torso] / _TORSO_HALF[0]  # torso width
    head_c = template[is_head].mean(0)
    B[is_head, :, 6] = 0.15 * (template[is_head] - head_c)  # head size
    belly = is_torso & (template[:, 2] < 0) & (y > -0.3) & (y < 0.05)
    B[belly, 2, 7] = -0.04
    B[leg, 0, 8] = 0.025 * np.sign(x[leg])  # hip width
    B[arm, :, 9] = 0.2 * radial[arm]  # arm thickness
    return B


def mesh_components(faces, num_vertices):
    """Label each face with its connected component (vertex-sharing)."""
    parent = np.arange(num_vertices)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for f in faces:
        r0 = find(f[0])
        for v in f[1:]:
            r = find(v)
            if r != r0:
                parent[r] = r0
    roots = np.array([find(f[0]) for f in faces])
    _, labels = np.unique(roots, return_inverse=True)
    return labels
