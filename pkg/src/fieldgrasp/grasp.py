"""Parallel-jaw gripper model, antipodal sampling, joint closure and contacts.

Canonical gripper frame: finger 0 sits at ``x = +w_open/2`` and closes along
``-x``; finger 1 sits at ``x = -w_open/2`` and closes along ``+x``. Pads are
rectangles in the local y/z plane centred on the x axis.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GraspMissError, NoContactError, SamplerExhaustedError
from .kernels import radius_pairs
from .mesh_core import TetMesh, TriMesh, raycast_many, sample_surface, triangle_normals

F_MAX = 15.0


# --------------------------------------------------------------------------
# rotations

def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def so3_exp(omega):
    """Rotation matrix of an axis-angle vector (Rodrigues)."""
    omega = np.asarray(omega, dtype=np.float64)
    th2 = float(omega @ omega)
    K = np.array([[0, -omega[2], omega[1]], [omega[2], 0, -omega[0]], [-omega[1], omega[0], 0]])
    if th2 < 1e-12:
        a, b = 1.0 - th2 / 6.0, 0.5 - th2 / 24.0
    else:
        th = math.sqrt(th2)
        a, b = math.sin(th) / th, (1 - math.cos(th)) / th2
    return np.eye(3) + a * K + b * (K @ K)


def frame_from_axis(axis, angle=0.0):
    """Right-handed frame whose first column is ``axis``, spun by ``angle`` about it.

    The zero-angle in-plane direction is built from a fixed helper vector, so
    the frame is a deterministic function of the axis.
    """
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, a)
    u /= np.linalg.norm(u)
    v = np.cross(a, u)
    c, s = math.cos(angle), math.sin(angle)
    return np.stack([a, c * u + s * v, -s * u + c * v], axis=1)


# --------------------------------------------------------------------------
# data types

@dataclass(frozen=True)
class GripperModel:
    """Two rectangular finger pads, maximally open at ``w_open``.

    ``pad_offset`` shifts the pad centres within the pad plane (local y, z).
    A nonzero z offset models fingertip pads that extend away from the palm
    and makes the rotations about a grasp axis distinct grasps; with a
    centred square pad they would coincide.
    """

    w_open: float = 0.08
    pad_size: tuple = (0.02, 0.02)
    pad_res: tuple = (5, 5)
    pad_offset: tuple = (0.0, 0.005)

    def __post_init__(self):
        if self.w_open <= 0 or min(self.pad_size) <= 0 or min(self.pad_res) < 1 \
                or self.pad_res[0] * self.pad_res[1] < 2:
            raise ValueError("invalid gripper dimensions")
        object.__setattr__(self, "pad_size", tuple(float(v) for v in self.pad_size))
        object.__setattr__(self, "pad_res", tuple(int(v) for v in self.pad_res))
        object.__setattr__(self, "pad_offset", tuple(float(v) for v in self.pad_offset))

    @property
    def closing_axis(self):
        return np.array([1.0, 0.0, 0.0])

    def pad_grid(self):
        """Local (y, z) pad vertex coordinates and pad triangles."""
        ny, nz = self.pad_res
        hy, hz = self.pad_size[0] / 2, self.pad_size[1] / 2
        oy, oz = self.pad_offset
        ys = np.linspace(oy - hy, oy + hy, ny) if ny > 1 else np.array([oy])
        zs = np.linspace(oz - hz, oz + hz, nz) if nz > 1 else np.array([oz])
        Y, Z = np.meshgrid(ys, zs, indexing="ij")
        yz = np.stack([Y.ravel(), Z.ravel()], axis=1)
        tris = []
        for i in range(ny - 1):
            for j in range(nz - 1):
                a = i * nz + j
                b, c, d = a + nz, a + 1, a + nz + 1
                tris += [(a, b, d), (a, d, c)]
        return yz, np.array(tris, dtype=np.int64).reshape(-1, 3)

    def pad_edges(self):
        """Grid edges of one pad plus the diagonal used by its triangulation."""
        ny, nz = self.pad_res
        idx = np.arange(ny * nz).reshape(ny, nz)
        e = [np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1),
             np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1),
             np.stack([idx[:-1, :-1].ravel(), idx[1:, 1:].ravel()], axis=1)]
        return np.unique(np.sort(np.concatenate(e), axis=1), axis=0)

    def canonical_edges(self):
        """Undirected pad edges of both fingers, indexed like :meth:`canonical_vertices`."""
        e = self.pad_edges()
        k = self.pad_res[0] * self.pad_res[1]
        return np.concatenate([e, e + k])

    def canonical_vertices(self, p_g=(0.0, 0.0)):
        """Local pad vertices with each finger closed inward by ``p_g``.

        Returns ``(vertices (2k, 3), finger (2k,), tris (2t, 3))``.
        """
        yz, tris = self.pad_grid()
        k = len(yz)
        x0 = self.w_open / 2 - p_g[0]
        x1 = -self.w_open / 2 + p_g[1]
        v = np.concatenate([np.column_stack([np.full(k, x0), yz]),
                            np.column_stack([np.full(k, x1), yz])])
        # grid winding faces +x, so finger 0 (at +x) is flipped to face inward
        all_tris = np.concatenate([tris[:, [0, 2, 1]], tris + k])
        finger = np.repeat([0, 1], k)
        return v, finger, all_tris


@dataclass(frozen=True, eq=False)
class GraspPose:
    rotation: np.ndarray
    translation: np.ndarray
    p_g: np.ndarray = field(default_factory=lambda: np.zeros(2))
    F_g: float = 15.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape == (4,):
            R = quat_to_matrix(R)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        object.__setattr__(self, "p_g", np.asarray(self.p_g, dtype=np.float64))
        object.__setattr__(self, "F_g", float(self.F_g))
        if not 0.0 <= self.F_g <= F_MAX:
            raise ValueError(f"grasp force {self.F_g} outside [0, {F_MAX}] N")
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-8):
            raise ValueError("rotation must be a 3x3 orthonormal matrix or a unit quaternion")

    def to_list(self):
        return [*matrix_to_quat(self.rotation).tolist(), *self.translation.tolist()]

    def to_dict(self):
        return {"T": self.to_list(), "p_g": self.p_g.tolist(), "F_g": self.F_g}

    @classmethod
    def from_dict(cls, d):
        T = d["T"]
        return cls(np.array(T[:4]), np.array(T[4:7]), np.array(d.get("p_g", [0.0, 0.0])),
                   float(d.get("F_g", 15.0)))

    def replace(self, **kw):
        args = dict(rotation=self.rotation, translation=self.translation, p_g=self.p_g, F_g=self.F_g)
        args.update(kw)
        return GraspPose(**args)

    def compose_local(self, xi):
        """Apply a 6-vector increment (translation, axis-angle) in the gripper frame."""
        xi = np.asarray(xi, dtype=np.float64)
        return self.replace(rotation=self.rotation @ so3_exp(xi[3:]),
                            translation=self.translation + self.rotation @ xi[:3])


@dataclass(frozen=True, eq=False)
class PosedGripper:
    vertices: np.ndarray
    finger: np.ndarray
    tris: np.ndarray
    closing_dirs: np.ndarray
    edges: np.ndarray

    def meshes(self):
        k = int(np.sum(self.finger == 0))
        t0 = self.tris[: len(self.tris) // 2]
        return (TriMesh(self.vertices[:k], t0), TriMesh(self.vertices[k:], t0[:, [0, 2, 1]]))


@dataclass(frozen=True, eq=False)
class ContactAssignment:
    contact_pairs: np.ndarray
    per_finger_object_nodes: tuple
    closing_dirs: np.ndarray

    @property
    def both_fingers(self):
        return all(len(s) > 0 for s in self.per_finger_object_nodes)

    def to_dict(self):
        return {"pairs": self.contact_pairs.tolist(),
                "fingers": [np.asarray(s).tolist() for s in self.per_finger_object_nodes],
                "closing_dirs": np.asarray(self.closing_dirs).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["pairs"], dtype=np.int64).reshape(-1, 2),
                   tuple(np.array(s, dtype=np.int64) for s in d["fingers"]),
                   np.array(d["closing_dirs"], dtype=np.float64))


# --------------------------------------------------------------------------
# closure and contacts

def compute_joint_closure(mesh: TetMesh, gripper: GripperModel, pose: GraspPose) -> np.ndarray:
    """Per-finger closing travel until the pad plane meets the first object vertex.

    Object vertices are projected into the gripper frame; only those whose
    (y, z) lies within the pad rectangle are considered.
    """
    local, inside = _in_pad(mesh.vertices, gripper, pose)
    if not np.any(inside):
        raise GraspMissError("no object vertex projects inside the finger pads")
    x = local[inside, 0]
    half = gripper.w_open / 2
    p_g = np.array([np.min(half - x), np.min(x + half)])
    if np.any(p_g < 0):
        raise GraspMissError("object extends beyond the open gripper")
    return p_g


def _in_pad(points, gripper, pose):
    local = (points - pose.translation) @ pose.rotation
    hy, hz = gripper.pad_size[0] / 2, gripper.pad_size[1] / 2
    oy, oz = gripper.pad_offset
    inside = (np.abs(local[:, 1] - oy) <= hy) & (np.abs(local[:, 2] - oz) <= hz)
    return local, inside


def pose_gripper(gripper: GripperModel, pose: GraspPose, p_g=None) -> PosedGripper:
    p_g = pose.p_g if p_g is None else p_g
    v, finger, tris = gripper.canonical_vertices(p_g)
    R = pose.rotation
    world = v @ R.T + pose.translation
    dirs = np.stack([-R[:, 0], R[:, 0]])
    return PosedGripper(world, finger, tris, dirs, gripper.canonical_edges())


def find_contacts(mesh: TetMesh, posed: PosedGripper, epsilon: float = 0.005) -> ContactAssignment:
    """All (gripper vertex, object vertex) pairs within ``epsilon`` (vertex-to-vertex)."""
    pairs = radius_pairs(posed.vertices, mesh.vertices, float(epsilon))
    if len(pairs) == 0:
        raise NoContactError(f"no gripper/object vertex pair within {epsilon} m")
    fingers = tuple(np.unique(pairs[posed.finger[pairs[:, 0]] == f, 1]) for f in (0, 1))
    return ContactAssignment(pairs, fingers, posed.closing_dirs.copy())


def close_gripper(mesh: TetMesh, gripper: GripperModel, pose: GraspPose, epsilon: float = 0.005):
    """Closure, posed pads and contacts at ``pose``; the returned pose carries ``p_g``."""
    p_g = compute_joint_closure(mesh, gripper, pose)
    pose = pose.replace(p_g=p_g)
    posed = pose_gripper(gripper, pose)
    return pose, posed, find_contacts(mesh, posed, epsilon)


# --------------------------------------------------------------------------
# antipodal sampling

def sample_antipodal(mesh: TetMesh, gripper: GripperModel | None = None, n_points: int = 25,
                     rotations: int = 4, seed: int = 0, grasp_force: float = 15.0,
                     epsilon: float = 0.005) -> list[GraspPose]:
    """Antipodal grasps: ``rotations`` poses about each of ``n_points`` surface normals.

    The grasp axis is the sampled outward normal; the opposing contact is the
    first hit of a ray cast inward from the sample. A candidate point is
    resampled when the ray misses, the opening exceeds ``w_open``, or any of
    its rotations fails to touch the object with both fingers.
    """
    gripper = gripper or GripperModel()
    rng = np.random.default_rng(seed)
    surf = mesh.surface()
    normals = triangle_normals(surf.vertices, surf.tris)
    poses: list[GraspPose] = []
    found = 0
    for _ in range(100 * n_points):
        if found == n_points:
            break
        pts, tri = sample_surface(surf, 1, rng)
        p, n = pts[0], normals[tri[0]]
        t, _ = raycast_many(surf.vertices, surf.tris, p, -n, t_min=1e-6)
        if not math.isfinite(t) or t >= gripper.w_open:
            continue
        center = p - 0.5 * t * n
        group = []
        for k in range(rotations):
            pose = GraspPose(frame_from_axis(n, 2 * math.pi * k / rotations), center,
                             F_g=grasp_force)
            try:
                pose, _, contact = close_gripper(mesh, gripper, pose, epsilon)
            except (GraspMissError, NoContactError):
                break
            if not contact.both_fingers:
                break
            group.append(pose)
        if len(group) == rotations:
            poses.extend(group)
            found += 1
    if found < n_points:
        raise SamplerExhaustedError(
            f"found {found}/{n_points} valid antipodal points in {100 * n_points} attempts")
    return poses


def save_grasps(path, object_id: str, grasps) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"object_id": object_id, "grasps": [g.to_dict() for g in grasps]}, fh)


def load_grasps(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return doc["object_id"], [GraspPose.from_dict(g) for g in doc["grasps"]]
