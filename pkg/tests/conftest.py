import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fieldgrasp.grasp import GraspPose, GripperModel, close_gripper, frame_from_axis
from fieldgrasp.mesh_core import TetMesh, generate_primitive

settings.register_profile("repo", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def single_tet():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    return TetMesh(np.array(v, float), np.array([[0, 1, 2, 3]]))


def random_delaunay_mesh(seed, n_points=12):
    """Tet mesh of random points (Delaunay), dropping sliver elements."""
    from scipy.spatial import Delaunay
    rng = np.random.default_rng(seed)
    pts = rng.random((n_points, 3))
    tets = Delaunay(pts).simplices
    p = pts[tets]
    vol = np.abs(np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]),
                           p[:, 3] - p[:, 0])) / 6
    tets = tets[vol > 1e-6]
    used = np.unique(tets)
    remap = -np.ones(n_points, dtype=int)
    remap[used] = np.arange(len(used))
    return TetMesh(pts[used], remap[tets])


@pytest.fixture
def tet():
    return single_tet()


@pytest.fixture(scope="session")
def cuboid():
    return generate_primitive("cuboid", (0.06, 0.04, 0.03), resolution=6, id="cuboid")


@pytest.fixture(scope="session")
def gripper():
    return GripperModel()


def side_grasp(mesh, axis=(1.0, 0.0, 0.0), angle=0.0, F_g=15.0):
    """A grasp squeezing the mesh across ``axis`` through its centroid."""
    return GraspPose(frame_from_axis(np.asarray(axis, float), angle), mesh.centroid(), F_g=F_g)


@pytest.fixture(scope="session")
def closed_grasp(cuboid, gripper):
    return close_gripper(cuboid, gripper, side_grasp(cuboid), 0.005)
