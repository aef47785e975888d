"""Tetrahedral / triangular meshes, JSON I/O and geometric queries."""
from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateElementError,
    MeshFormatError,
    MeshIndexError,
    PrimitiveError,
)

MIN_TET_VOLUME = 1e-12

# outward faces of a positively oriented tet (a, b, c, d)
_TET_FACES = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
_TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


def signed_volumes(vertices, tets):
    """Signed volume of every tet, ``det[b-a, c-a, d-a] / 6``."""
    p = vertices[tets]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    e3 = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", np.cross(e1, e2), e3) / 6.0


def _boundary_faces(tets):
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if np.any(counts > 2):
        raise MeshFormatError("non-manifold mesh: a face is shared by more than two tets")
    return faces[counts[inverse] == 1]


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    tris: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.tris, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshIndexError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "tris", t)
        if t.size and np.any(triangle_areas(v, t) <= 0.0):
            raise MeshFormatError("degenerate (zero-area) triangle")

    def edges(self):
        """Unique undirected edges as a sorted (k, 2) array."""
        e = self.tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        return np.unique(np.sort(e, axis=1), axis=0)


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Volumetric object mesh.

    Construction canonicalizes every tet to positive signed volume and
    extracts the outward-oriented boundary triangles.
    """

    vertices: np.ndarray
    tets: np.ndarray
    elastic_modulus: float = 1e6
    id: str = "object"
    metadata: dict = field(default_factory=dict)
    surface_tris: np.ndarray = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.tets, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or not np.all(np.isfinite(v)):
            raise MeshFormatError("vertices must be a finite (n, 3) array")
        if t.ndim != 2 or t.shape[1] != 4 or len(t) == 0:
            raise MeshFormatError("tets must be a non-empty (m, 4) integer array")
        if t.min() < 0 or t.max() >= len(v):
            raise MeshIndexError(f"tet index out of range for {len(v)} vertices")
        if not self.elastic_modulus > 0:
            raise MeshFormatError("elastic modulus must be positive")
        vol = signed_volumes(v, t)
        if np.any(np.abs(vol) < MIN_TET_VOLUME):
            bad = int(np.argmin(np.abs(vol)))
            raise DegenerateElementError(f"tet {bad} has volume {vol[bad]:.3e} m^3")
        t = t.copy()
        flip = vol < 0
        t[flip, 2], t[flip, 3] = t[flip, 3].copy(), t[flip, 2].copy()
        v.setflags(write=False)
        t.setflags(write=False)
        surf = _boundary_faces(t)
        surf.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "tets", t)
        object.__setattr__(self, "elastic_modulus", float(self.elastic_modulus))
        object.__setattr__(self, "surface_tris", surf)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def volume(self):
        return float(signed_volumes(self.vertices, self.tets).sum())

    def centroid(self):
        return self.vertices.mean(axis=0)

    def edges(self):
        """Unique undirected tet edges, sorted (k, 2)."""
        e = self.tets[:, _TET_EDGES].reshape(-1, 2)
        return np.unique(np.sort(e, axis=1), axis=0)

    def surface(self):
        return TriMesh(self.vertices, self.surface_tris)

    def with_modulus(self, elastic_modulus, id=None):
        return TetMesh(self.vertices, self.tets, elastic_modulus,
                       id if id is not None else self.id, dict(self.metadata))


def triangle_areas(vertices, tris):
    p = vertices[tris]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def triangle_normals(vertices, tris):
    p = vertices[tris]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def extract_surface(mesh: TetMesh) -> np.ndarray:
    """Sorted indices of vertices touching at least one boundary triangle."""
    return np.unique(mesh.surface_tris)


def interior_vertices(mesh: TetMesh) -> np.ndarray:
    mask = np.ones(mesh.n_vertices, dtype=bool)
    mask[extract_surface(mesh)] = False
    return np.nonzero(mask)[0]


# --------------------------------------------------------------------------
# JSON I/O

def _open_text(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def mesh_to_dict(mesh: TetMesh) -> dict:
    return {
        "id": mesh.id,
        "elastic_modulus_pa": mesh.elastic_modulus,
        "vertices": mesh.vertices.tolist(),
        "tets": mesh.tets.tolist(),
    }


def mesh_from_dict(doc: dict) -> TetMesh:
    try:
        verts = np.array(doc["vertices"], dtype=np.float64)
        tets = np.array(doc["tets"], dtype=np.int64)
        modulus = float(doc.get("elastic_modulus_pa", 1e6))
        mid = str(doc.get("id", "object"))
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshFormatError(f"malformed mesh document: {exc}") from exc
    return TetMesh(verts, tets, modulus, mid)


def load_mesh(path) -> TetMesh:
    """Read a mesh JSON file (optionally ``.json.gz``)."""
    try:
        with _open_text(path, "r") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise MeshFormatError(f"{path}: top-level JSON must be an object")
    return mesh_from_dict(doc)


def save_mesh(mesh: TetMesh, path) -> None:
    with _open_text(path, "w") as fh:
        json.dump(mesh_to_dict(mesh), fh)


# --------------------------------------------------------------------------
# primitive generation

_KUHN = [tuple(p) for p in permutations(range(3))]


def _lattice_tets(shape, periodic_axis=None):
    """Kuhn (6 tets per cell) decomposition of an ``nx x ny x nz`` cell grid.

    Vertex (i, j, k) has flat index ``(i * (ny+1) + j) * (nz+1) + k``; with a
    periodic axis, the last vertex layer of that axis wraps to layer 0.
    """
    nx, ny, nz = shape
    dims = [nx + 1, ny + 1, nz + 1]
    if periodic_axis is not None:
        dims[periodic_axis] -= 1

    def vid(i, j, k):
        ijk = [i, j, k]
        if periodic_axis is not None:
            ijk[periodic_axis] = ijk[periodic_axis] % dims[periodic_axis]
        return (ijk[0] * dims[1] + ijk[1]) * dims[2] + ijk[2]

    gi, gj, gk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    gi, gj, gk = gi.ravel(), gj.ravel(), gk.ravel()
    tets = []
    for perm in _KUHN:
        corner = [gi.copy(), gj.copy(), gk.copy()]
        path = [vid(*corner)]
        for axis in perm:
            corner[axis] = corner[axis] + 1
            path.append(vid(*corner))
        tets.append(np.stack(path, axis=1))
    return np.concatenate(tets, axis=0), dims


def _grid_points(dims, lo, hi):
    axes = [np.linspace(lo[a], hi[a], dims[a]) for a in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([x.ravel() for x in g], axis=1)


def _cells(res, extent, longest):
    return max(1, int(round(res * extent / longest)))


def _box_to_ball(p, axes):
    """Map points of a cube/square onto a ball/disk along selected axes.

    Each concentric cube shell (sup-norm) lands on the sphere of the same
    radius, so the map is continuous and boundary points are exactly on the
    unit sphere.
    """
    sub = p[:, axes]
    inf = np.abs(sub).max(axis=1)
    two = np.linalg.norm(sub, axis=1)
    scale = np.divide(inf, two, out=np.zeros_like(inf), where=two > 0)
    out = p.copy()
    out[:, axes] = sub * scale[:, None]
    return out


def generate_primitive(kind: str, dims, resolution: int = 4, elastic_modulus: float = 1e6,
                       id: str | None = None) -> TetMesh:
    """Structured-lattice tetrahedral mesh of a primitive, centered at the origin.

    Parameters
    ----------
    kind : {"cuboid", "cylinder", "ellipsoid", "annulus"}
    dims : 3 floats in meters
        cuboid: edge lengths (x, y, z); cylinder: (radius_x, radius_y, height);
        ellipsoid: semi-axes (a, b, c); annulus: (inner_radius, outer_radius, height).
    resolution : int
        Cells along the longest dimension (>= 2); other axes scale proportionally.
    """
    dims = tuple(float(d) for d in dims)
    if len(dims) != 3 or not all(d > 0 for d in dims):
        raise PrimitiveError("dims must be three positive lengths")
    if int(resolution) < 2:
        raise PrimitiveError("resolution must be >= 2")
    res = int(resolution)
    id = id or f"{kind}_{'x'.join(f'{d:g}' for d in dims)}_r{res}"
    meta = {"generator": "lattice", "pattern": "kuhn6", "kind": kind,
            "dims": list(dims), "resolution": res}

    if kind == "cuboid":
        longest = max(dims)
        shape = tuple(_cells(res, d, longest) for d in dims)
        tets, vdims = _lattice_tets(shape)
        meta["cells"] = list(shape)
        half = np.array(dims) / 2
        verts = _grid_points(vdims, -half, half)
    elif kind == "ellipsoid":
        tets, vdims = _lattice_tets((res, res, res))
        meta["cells"] = [res, res, res]
        cube = _grid_points(vdims, [-1, -1, -1], [1, 1, 1])
        verts = _box_to_ball(cube, [0, 1, 2]) * np.array(dims)
    elif kind == "cylinder":
        rx, ry, h = dims
        nz = _cells(res, h, 2 * max(rx, ry))
        tets, vdims = _lattice_tets((res, res, nz))
        meta["cells"] = [res, res, nz]
        box = _grid_points(vdims, [-1, -1, -h / 2], [1, 1, h / 2])
        verts = _box_to_ball(box, [0, 1]) * np.array([rx, ry, 1.0])
    elif kind == "annulus":
        r_in, r_out, h = dims
        if r_in >= r_out:
            raise PrimitiveError(f"annulus inner radius {r_in} >= outer radius {r_out}")
        n_r = max(1, int(round(res * (r_out - r_in) / (2 * r_out))))
        n_theta = max(8, 4 * res)
        n_z = _cells(res, h, 2 * r_out)
        tets, vdims = _lattice_tets((n_r, n_theta, n_z), periodic_axis=1)
        meta["cells"] = [n_r, n_theta, n_z]
        r = np.linspace(r_in, r_out, vdims[0])
        theta = np.arange(vdims[1]) * (2 * math.pi / vdims[1])
        z = np.linspace(-h / 2, h / 2, vdims[2])
        R, TH, Z = np.meshgrid(r, theta, z, indexing="ij")
        verts = np.stack([(R * np.cos(TH)).ravel(), (R * np.sin(TH)).ravel(), Z.ravel()], axis=1)
    else:
        raise PrimitiveError(f"unknown primitive kind {kind!r}")

    return TetMesh(verts, tets, elastic_modulus, id, meta)


def element_size(mesh: TetMesh) -> float:
    """Longest tet edge length."""
    e = mesh.edges()
    return float(np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1).max())


# --------------------------------------------------------------------------
# sampling, Chamfer distance, raycasting

def _as_surface(m) -> TriMesh:
    if isinstance(m, TetMesh):
        return m.surface()
    if isinstance(m, TriMesh):
        return m
    raise TypeError(f"expected TetMesh or TriMesh, got {type(m).__name__}")


def sample_surface(mesh, n: int, rng: np.random.Generator):
    """Area-weighted uniform points on a surface; returns (points, tri_index)."""
    surf = _as_surface(mesh)
    if len(surf.tris) == 0:
        raise MeshFormatError("empty surface")
    areas = triangle_areas(surf.vertices, surf.tris)
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    b0, b1, b2 = 1.0 - su, su * (1.0 - v), su * v
    p = surf.vertices[surf.tris[tri]]
    pts = b0[:, None] * p[:, 0] + b1[:, None] * p[:, 1] + b2[:, None] * p[:, 2]
    return pts, tri


def chamfer_distance(a, b, samples: int = 2048, seed: int = 0) -> float:
    """Symmetric point-sampled Chamfer distance between two surfaces, in mm.

    Both surfaces are sampled with the same seed, so meshes sharing topology
    get corresponding sample points.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    pa, _ = sample_surface(a, samples, np.random.default_rng(seed))
    pb, _ = sample_surface(b, samples, np.random.default_rng(seed))
    dab, _ = cKDTree(pb).query(pa)
    dba, _ = cKDTree(pa).query(pb)
    return float(0.5 * (dab.mean() + dba.mean()) * 1000.0)


def raycast_many(vertices, tris, origin, direction, t_min=1e-9):
    """Moller-Trumbore against all triangles; returns (t, tri) or (inf, -1)."""
    p0 = vertices[tris[:, 0]]
    e1 = vertices[tris[:, 1]] - p0
    e2 = vertices[tris[:, 2]] - p0
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - p0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    tol = 1e-12
    hit = ok & (u >= -tol) & (v >= -tol) & (u + v <= 1 + tol) & (t > t_min)
    if not np.any(hit):
        return math.inf, -1
    t = np.where(hit, t, np.inf)
    k = int(np.argmin(t))
    return float(t[k]), k


def raycast(mesh, origin, direction):
    """Nearest surface hit along a ray.

    Returns ``(point, triangle_index)`` or ``None`` on a miss.
    """
    surf = _as_surface(mesh)
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    t, k = raycast_many(surf.vertices, surf.tris, origin, direction)
    if k < 0:
        return None
    return origin + t * direction, k
