"""Capsule body: 21-joint kinematic tree, rigid skinning and an exact capsule-union SDF.

Frame parameters follow the motion layout ``[t (3), r (6D rotation), theta (21 x 3 axis-angle)]``.
All functions accept numpy arrays or Tensors with arbitrary leading batch
dimensions and are differentiable through :mod:`scenemotion.autodiff`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

N_JOINTS = 21
N_PARAMS = 3 + 6 + 3 * N_JOINTS
N_BETAS = 10
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

_AXIAL = np.array([0.125, 0.375, 0.625, 0.875])


@dataclass(frozen=True)
class SkeletonTemplate:
    names: tuple[str, ...]      # J non-root joint names
    parents: np.ndarray         # (J,) index into [root] + joints, root = 0
    offsets: np.ndarray         # (J, 3) rest offset from parent
    radii: np.ndarray           # (J,)
    samples: np.ndarray         # (J,) vertex samples per bone
    len_basis: np.ndarray       # (J, 10)
    rad_basis: np.ndarray       # (J, 10)
    root_name: str = "pelvis"

    @property
    def num_vertices(self) -> int:
        return int(self.samples.sum())

    @classmethod
    def parse(cls, text: str) -> "SkeletonTemplate":
        root = None
        rows = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "root":
                root = parts[1]
                continue
            rows.append(parts)
        if root is None:
            raise ValueError("skeleton asset has no root line")
        names = tuple(r[0] for r in rows)
        index = {root: 0} | {n: i + 1 for i, n in enumerate(names)}
        parents = []
        for r in rows:
            if r[1] not in index:
                raise ValueError(f"joint {r[0]} has unknown parent {r[1]}")
            parents.append(index[r[1]])
        parents = np.array(parents)
        if any(p >= i + 1 for i, p in enumerate(parents)):
            raise ValueError("joints must be listed after their parents")
        nums = np.array([[float(v) for v in r[2:6]] + [float(r[6])] + [float(v) for v in r[7:]] for r in rows])
        if nums.shape[1] != 5 + 2 * N_BETAS:
            raise ValueError("each joint row needs offset, radius, samples and two 10-wide basis rows")
        tpl = cls(names, parents, nums[:, 0:3], nums[:, 3], nums[:, 4].astype(int),
                  nums[:, 5:15], nums[:, 15:25], root)
        if (tpl.radii <= 0).any():
            raise ValueError("capsule radii must be positive")
        return tpl

    def dumps(self) -> str:
        lines = ["# capsule skeleton template", f"root {self.root_name}"]
        names = (self.root_name,) + self.names
        for j, n in enumerate(self.names):
            vals = [n, names[self.parents[j]]] + [f"{v:.4f}" for v in self.offsets[j]]
            vals += [f"{self.radii[j]:.4f}", str(int(self.samples[j]))]
            vals += [f"{v:.4f}" for v in self.len_basis[j]] + [f"{v:.4f}" for v in self.rad_basis[j]]
            lines.append(" ".join(vals))
        return "\n".join(lines) + "\n"

    def surface_directions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-vertex (bone index, axial fraction, radial unit direction) in rest pose."""
        bones, axial, dirs = [], [], []
        for j in range(len(self.names)):
            axis = self.offsets[j] / np.linalg.norm(self.offsets[j])
            helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            e1 = np.cross(axis, helper)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(axis, e1)
            n = int(self.samples[j])
            rings = len(_AXIAL)
            per_ring = max(1, n // rings)
            for s in range(n):
                ring, k = divmod(s, per_ring)
                u = _AXIAL[min(ring, rings - 1)]
                phi = 2.0 * np.pi * (k + 0.5 * (ring % 2)) / per_ring
                bones.append(j)
                axial.append(u)
                dirs.append(np.cos(phi) * e1 + np.sin(phi) * e2)
        return np.array(bones), np.array(axial), np.array(dirs)


@lru_cache(maxsize=1)
def default_template() -> SkeletonTemplate:
    text = resources.files("scenemotion").joinpath("assets/skeleton.txt").read_text()
    return SkeletonTemplate.parse(text)


def load_template(path: str | Path) -> SkeletonTemplate:
    return SkeletonTemplate.parse(Path(path).read_text())


# ---------------------------------------------------------------- rotations

_SKEW = np.zeros((3, 9))
# [a]_x laid out row-major: (0,1)=-a_z (0,2)=a_y (1,0)=a_z (1,2)=-a_x (2,0)=-a_y (2,1)=a_x
_SKEW[2, 1], _SKEW[1, 2], _SKEW[2, 3], _SKEW[0, 5], _SKEW[1, 6], _SKEW[0, 7] = -1, 1, 1, -1, -1, 1


def _cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[..., 0:1], a[..., 1:2], a[..., 2:3]
    bx, by, bz = b[..., 0:1], b[..., 1:2], b[..., 2:3]
    return ad.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def rot6d_to_matrix(r6) -> Tensor:
    """Gram-Schmidt on the two 3-vectors; columns of the result are (b1, b2, b1 x b2)."""
    r6 = ad.as_tensor(r6)
    a1, a2 = r6[..., 0:3], r6[..., 3:6]
    n1 = np.linalg.norm(a1.data, axis=-1)
    if (n1 < 1e-9).any():
        raise ValueError("degenerate 6D rotation: first vector is zero")
    b1 = ad.div(a1, ad.l2_norm(a1, axis=-1, keepdims=True))
    resid = ad.sub(a2, ad.mul(ad.sum_(ad.mul(b1, a2), axis=-1, keepdims=True), b1))
    if (np.linalg.norm(resid.data, axis=-1) < 1e-9 * np.maximum(1.0, np.linalg.norm(a2.data, axis=-1))).any():
        raise ValueError("degenerate 6D rotation: vectors are parallel or the second is zero")
    b2 = ad.div(resid, ad.l2_norm(resid, axis=-1, keepdims=True))
    b3 = _cross(b1, b2)
    return ad.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot)
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def axis_angle_to_matrix(aa) -> Tensor:
    """Rodrigues with sin(x)/x and 2 sin^2(x/2)/x^2 forms (no cancellation near zero)."""
    aa = ad.as_tensor(aa)
    lead = aa.shape[:-1]
    theta = ad.sqrt(ad.add(ad.sum_(ad.mul(aa, aa), axis=-1, keepdims=True), 1e-24))
    a = ad.div(ad.sin(theta), theta)
    half = ad.sin(ad.scale(theta, 0.5))
    b = ad.div(ad.scale(ad.mul(half, half), 2.0), ad.mul(theta, theta))
    k = ad.reshape(ad.matmul(ad.reshape(aa, (-1, 3)), Tensor(_SKEW)), lead + (3, 3))
    k2 = ad.matmul(k, k)
    a4 = ad.reshape(a, lead + (1, 1))
    b4 = ad.reshape(b, lead + (1, 1))
    return ad.add(ad.add(Tensor(np.eye(3)), ad.mul(a4, k)), ad.mul(b4, k2))


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------- kinematics

def _prepare(params, beta):
    params = ad.as_tensor(params)
    if params.shape[-1] != N_PARAMS:
        raise ad.ShapeError(f"frame parameters need {N_PARAMS} entries, got {params.shape}")
    lead = params.shape[:-1]
    beta = ad.as_tensor(np.zeros(N_BETAS) if beta is None else beta)
    if beta.shape[-1] != N_BETAS:
        raise ad.ShapeError(f"beta needs {N_BETAS} entries, got {beta.shape}")
    if beta.shape[:-1] != lead:
        pre = beta.shape[:-1]
        if lead[: len(pre)] != pre:
            raise ad.ShapeError(f"beta batch {pre} does not prefix frame batch {lead}")
        beta = ad.reshape(beta, pre + (1,) * (len(lead) - len(pre)) + (N_BETAS,))
        beta = ad.add(beta, Tensor(np.zeros(lead + (N_BETAS,))))
    p = int(np.prod(lead)) if lead else 1
    return ad.reshape(params, (p, N_PARAMS)), ad.reshape(beta, (p, N_BETAS)), lead


def _shape_terms(beta: Tensor, tpl: SkeletonTemplate):
    len_scale = ad.exp(ad.matmul(beta, Tensor(tpl.len_basis.T)))    # (P, J)
    rad_scale = ad.exp(ad.matmul(beta, Tensor(tpl.rad_basis.T)))
    offsets = ad.mul(ad.reshape(len_scale, len_scale.shape + (1,)), Tensor(tpl.offsets))  # (P, J, 3)
    radii = ad.mul(rad_scale, Tensor(tpl.radii))                       # (P, J)
    return offsets, radii


def _kinematics(params: Tensor, beta: Tensor, tpl: SkeletonTemplate, canonical: bool):
    p = params.shape[0]
    offsets, radii = _shape_terms(beta, tpl)
    local = axis_angle_to_matrix(ad.reshape(params[:, 9:], (p, N_JOINTS, 3)))  # (P, J, 3, 3)
    if canonical:
        root_r = Tensor(np.broadcast_to(np.eye(3), (p, 3, 3)))
        root_t = Tensor(np.zeros((p, 3)))
    else:
        root_r = rot6d_to_matrix(params[:, 3:9])
        root_t = params[:, 0:3]
    rots = [root_r]
    pos = [root_t]
    for j in range(N_JOINTS):
        par = tpl.parents[j]
        step = ad.reshape(ad.matmul(rots[par], ad.reshape(offsets[:, j, :], (p, 3, 1))), (p, 3))
        pos.append(ad.add(pos[par], step))
        rots.append(ad.matmul(rots[par], local[:, j]))
    return ad.stack(pos, axis=1), ad.stack(rots, axis=1), offsets, radii


def forward_kinematics(params, beta=None, tpl: SkeletonTemplate | None = None) -> Tensor:
    """World positions of root + 21 joints, shape (..., 22, 3)."""
    tpl = tpl or default_template()
    params, beta, lead = _prepare(params, beta)
    joints, _, _, _ = _kinematics(params, beta, tpl, canonical=False)
    return ad.reshape(joints, lead + (N_JOINTS + 1, 3))


def _skin(params, beta, tpl, canonical):
    tpl = tpl or default_template()
    params, beta, lead = _prepare(params, beta)
    joints, rots, offsets, radii = _kinematics(params, beta, tpl, canonical)
    p = params.shape[0]
    bone, axial, dirs = tpl.surface_directions()
    v = len(bone)
    par = tpl.parents[bone]
    # local vertex = axial fraction of the (scaled) bone offset + scaled radius along a fixed direction
    off_v = ad.gather(offsets, np.broadcast_to(bone, (p, v)))                       # (P, V, 3)
    rad_v = ad.gather(ad.reshape(radii, (p, N_JOINTS, 1)), np.broadcast_to(bone, (p, v)))  # (P, V, 1)
    local = ad.add(ad.mul(off_v, Tensor(axial[:, None])), ad.mul(rad_v, Tensor(dirs)))
    rot_v = ad.reshape(ad.gather(ad.reshape(rots, (p, N_JOINTS + 1, 9)), np.broadcast_to(par, (p, v))), (p, v, 3, 3))
    pos_v = ad.gather(joints, np.broadcast_to(par, (p, v)))
    verts = ad.add(ad.reshape(ad.matmul(rot_v, ad.reshape(local, (p, v, 3, 1))), (p, v, 3)), pos_v)
    return ad.reshape(verts, lead + (v, 3))


def skin_mesh(params, beta=None, tpl: SkeletonTemplate | None = None) -> Tensor:
    """Vertices (..., V, 3); every vertex rides rigidly on its bone's parent frame."""
    return _skin(params, beta, tpl, canonical=False)


def canonical_mesh(params, beta=None, tpl: SkeletonTemplate | None = None) -> Tensor:
    """Like :func:`skin_mesh` with the global translation and orientation removed."""
    return _skin(params, beta, tpl, canonical=True)


def marker_positions(params, beta=None, tpl: SkeletonTemplate | None = None) -> Tensor:
    """The 21 non-root joint positions, used as motion-capture style markers."""
    joints = forward_kinematics(params, beta, tpl)
    return joints[..., 1:, :]


def capsules(params, beta=None, tpl: SkeletonTemplate | None = None):
    """Bone segments (start, end) of shape (P, J, 3) and radii (P, J) for flattened frames."""
    tpl = tpl or default_template()
    params, beta, lead = _prepare(params, beta)
    joints, _, _, radii = _kinematics(params, beta, tpl, canonical=False)
    p = params.shape[0]
    start = ad.gather(joints, np.broadcast_to(tpl.parents, (p, N_JOINTS)))
    end = joints[:, 1:, :]
    return start, end, radii, lead


def capsule_distance(query, start, end, radii) -> Tensor:
    """Signed distance of each query to each capsule: (P, G, J)."""
    q = ad.as_tensor(query)
    if q.ndim == 2:
        q = ad.reshape(q, (1,) + q.shape)
    p = start.shape[0]
    ab = ad.reshape(ad.sub(end, start), (p, 1, N_JOINTS, 3))
    ap = ad.sub(ad.reshape(q, (q.shape[0], q.shape[1], 1, 3)), ad.reshape(start, (p, 1, N_JOINTS, 3)))
    denom = ad.sum_(ad.mul(ab, ab), axis=-1)
    s = ad.clip01(ad.div(ad.sum_(ad.mul(ap, ab), axis=-1), denom))
    closest = ad.sub(ap, ad.mul(ad.reshape(s, s.shape + (1,)), ab))
    return ad.sub(ad.l2_norm(closest, axis=-1), ad.reshape(radii, (p, 1, N_JOINTS)))


def body_sdf(params, beta, query, tpl: SkeletonTemplate | None = None) -> Tensor:
    """relu(min over query points of the capsule-union signed distance), per frame."""
    query = ad.as_tensor(query)
    if query.shape[-2] == 0:
        raise ValueError("body_sdf needs at least one query point")
    start, end, radii, lead = capsules(params, beta, tpl)
    d = capsule_distance(query, start, end, radii)           # (P, G, J)
    p = d.shape[0]
    nearest = ad.minimum_reduce(ad.reshape(d, (p, -1)), axis=-1)
    return ad.reshape(ad.relu(nearest), lead)


def standing_height(beta=None, tpl: SkeletonTemplate | None = None) -> float:
    """Root height that puts the lowest rest-pose vertex on the floor (z = 0)."""
    params = np.zeros(N_PARAMS)
    params[3:9] = IDENTITY_6D
    verts = skin_mesh(params, beta, tpl).data
    start, end, radii, _ = capsules(params, beta, tpl)
    low_caps = np.minimum(start.data[0, :, 2], end.data[0, :, 2]) - radii.data[0]
    return float(-min(verts[:, 2].min(), low_caps.min()))


def rest_frame(beta=None, translation=(0.0, 0.0, 0.0)) -> np.ndarray:
    params = np.zeros(N_PARAMS)
    params[:3] = translation
    params[3:9] = IDENTITY_6D
    return params
