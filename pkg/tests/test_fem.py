import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fieldgrasp.errors import ConvergenceError, IsolatedVertexError
from fieldgrasp.fem import (ContactLoad, Material, assemble_stiffness, balance_load, compute_von_mises,
                            contact_load, element_stress, pcg, rigid_modes, run_grasp_trajectory,
                            solve_equilibrium, vertex_average_stress)
from fieldgrasp.grasp import quat_to_matrix
from fieldgrasp.mesh_core import TetMesh, generate_primitive

from conftest import random_delaunay_mesh


def regular_tet():
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float)
    return TetMesh(v, [[0, 1, 2, 3]])


def bar_end_load(mesh, F):
    """Balanced +-x end tractions, area-weighted over each end face."""
    x = mesh.vertices[:, 0]
    f = np.zeros((mesh.n_vertices, 3))
    p = mesh.vertices[mesh.surface_tris]
    areas = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    for end, sign in ((x.max(), 1.0), (x.min(), -1.0)):
        on = np.all(np.abs(p[:, :, 0] - end) < 1e-12, axis=1)
        w = np.zeros(mesh.n_vertices)
        np.add.at(w, mesh.surface_tris[on].ravel(), np.repeat(areas[on] / 3, 3))
        f[:, 0] += sign * F * w / w.sum()
    nodes = np.flatnonzero(np.any(f != 0, axis=1))
    return ContactLoad(nodes, f[nodes], F)


# --------------------------------------------------------------------------
# material and stiffness

def test_material_validation():
    with pytest.raises(ValueError):
        Material(0.0)
    with pytest.raises(ValueError):
        Material(1e6, 0.5)


def test_single_tet_stiffness_rank():
    K = assemble_stiffness(regular_tet(), Material(1e6, 0.3)).toarray()
    assert np.allclose(K, K.T, atol=1e-9 * np.abs(K).max())
    w = np.linalg.eigvalsh(K)
    assert np.sum(np.abs(w) < 1e-9 * w.max()) == 6
    assert np.linalg.matrix_rank(K, tol=1e-9 * w.max()) == 6


def test_stiffness_linear_in_modulus():
    m = generate_primitive("cuboid", (0.02, 0.02, 0.02), resolution=2)
    K1 = assemble_stiffness(m, Material(1e6, 0.0)).toarray()
    K2 = assemble_stiffness(m, Material(2e6, 0.0)).toarray()
    assert np.allclose(K2, 2 * K1, rtol=0, atol=1e-12 * np.abs(K2).max())


@given(seed=st.integers(0, 10_000))
def test_rigid_motion_has_zero_force(seed):
    m = random_delaunay_mesh(seed, 10)
    K = assemble_stiffness(m, Material(1e6, 0.3))
    scale = abs(K).max()
    rng = np.random.default_rng(seed)
    t = np.tile(rng.normal(size=3), m.n_vertices)
    assert np.max(np.abs(K @ t)) <= 1e-10 * scale
    w = rng.normal(size=3)
    rot = np.cross(w, m.vertices - m.centroid()).ravel()
    assert np.max(np.abs(K @ rot)) <= 1e-10 * scale


def test_stiffness_psd():
    m = generate_primitive("ellipsoid", (0.02, 0.02, 0.03), resolution=3)
    w = np.linalg.eigvalsh(assemble_stiffness(m, Material(1e5, 0.3)).toarray())
    assert w.min() >= -1e-9 * w.max()
    assert np.sum(np.abs(w) < 1e-9 * w.max()) == 6


def test_rigid_modes_orthonormal():
    m = generate_primitive("cuboid", (0.02, 0.03, 0.01), resolution=3)
    q = rigid_modes(m.vertices)
    assert np.allclose(q.T @ q, np.eye(6), atol=1e-12)


# --------------------------------------------------------------------------
# solve

def test_zero_load_zero_fields():
    m = generate_primitive("cuboid", (0.02, 0.02, 0.02), resolution=2)
    out = solve_equilibrium(m, Material(1e6), ContactLoad(np.array([0]), np.zeros((1, 3)), 0.0))
    assert not out.displacement.any() and not out.stress.any()


def test_bar_analytic():
    mesh = generate_primitive("cuboid", (0.1, 0.02, 0.02), resolution=10)
    F, E, A, L = 10.0, 1e6, 0.02 * 0.02, 0.1
    out = solve_equilibrium(mesh, Material(E, 0.0), bar_end_load(mesh, F))
    x = mesh.vertices[:, 0]
    u = out.displacement[:, 0]
    elong = u[np.isclose(x, x.max())].mean() - u[np.isclose(x, x.min())].mean()
    assert abs(elong - F * L / (E * A)) <= 0.05 * F * L / (E * A)
    mid = np.isclose(x, 0.0)
    assert abs(np.median(out.stress[mid]) - F / A) <= 0.05 * F / A


def test_doubling_load_doubles_fields(cuboid, closed_grasp):
    _, _, contact = closed_grasp
    mat = Material(cuboid.elastic_modulus)
    a = solve_equilibrium(cuboid, mat, contact_load(cuboid, contact, 5.0))
    b = solve_equilibrium(cuboid, mat, contact_load(cuboid, contact, 10.0))
    assert np.allclose(b.displacement, 2 * a.displacement, rtol=1e-6, atol=1e-6 * np.abs(b.displacement).max())
    assert np.allclose(b.stress, 2 * a.stress, rtol=1e-6, atol=1e-6 * b.stress.max())


def test_fields_scale_inverse_in_modulus(cuboid, closed_grasp):
    _, _, contact = closed_grasp
    load = contact_load(cuboid, contact, 15.0)
    a = solve_equilibrium(cuboid, Material(1e5), load)
    b = solve_equilibrium(cuboid, Material(4e5), load)
    assert np.allclose(4 * b.displacement, a.displacement, atol=1e-6 * np.abs(a.displacement).max())
    # stress is independent of E for a pure traction problem
    assert np.allclose(a.stress, b.stress, atol=1e-6 * a.stress.max())


def test_rigid_mode_orthogonality_and_energy(cuboid, closed_grasp):
    _, _, contact = closed_grasp
    mat = Material(cuboid.elastic_modulus)
    load = contact_load(cuboid, contact, 15.0)
    out = solve_equilibrium(cuboid, mat, load)
    u = out.displacement
    assert np.all(np.abs(u.mean(axis=0)) <= 1e-9)
    r = cuboid.vertices - cuboid.centroid()
    assert np.all(np.abs(np.cross(r, u).sum(axis=0)) <= 1e-9)
    K = assemble_stiffness(cuboid, mat)
    f = load.as_vector(cuboid.n_vertices)
    e_int = 0.5 * u.ravel() @ (K @ u.ravel())
    assert math.isclose(e_int, 0.5 * f @ u.ravel(), rel_tol=1e-6)
    assert np.all(out.stress >= 0)
    assert np.allclose(out.deformation_mag, np.linalg.norm(u, axis=1))


def test_pcg_non_convergence(cuboid, closed_grasp):
    _, _, contact = closed_grasp
    with pytest.raises(ConvergenceError):
        solve_equilibrium(cuboid, Material(1e6), contact_load(cuboid, contact, 15.0), max_iter=2)


def test_pcg_matches_dense_solve():
    m = generate_primitive("cuboid", (0.02, 0.02, 0.02), resolution=2)
    K = assemble_stiffness(m, Material(1e6, 0.3))
    q = rigid_modes(m.vertices)
    f = np.random.default_rng(0).normal(size=K.shape[0])
    u, _ = pcg(K, f, q, tol=1e-12)
    fp = f - q @ (q.T @ f)
    ref = np.linalg.pinv(K.toarray(), rcond=1e-10) @ fp
    assert np.allclose(u, ref, atol=1e-8 * np.abs(ref).max())


# --------------------------------------------------------------------------
# von Mises and averaging

def test_von_mises_examples():
    s = 7.0
    assert compute_von_mises(np.diag([s, 0, 0])) == pytest.approx(s)
    assert compute_von_mises(np.eye(3) * 3.0) == pytest.approx(0.0, abs=1e-12)
    t = np.zeros((3, 3))
    t[0, 1] = t[1, 0] = s
    assert compute_von_mises(t) == pytest.approx(s * math.sqrt(3))


@given(seed=st.integers(0, 100_000))
def test_von_mises_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3))
    t = a + a.T
    base = compute_von_mises(t)
    for _ in range(100):
        q = rng.normal(size=4)
        R = quat_to_matrix(q / np.linalg.norm(q))
        assert abs(compute_von_mises(R @ t @ R.T) - base) <= 1e-10 * base


def brute_vertex_average(mesh, tensors):
    out = np.zeros((mesh.n_vertices, 3, 3))
    for v in range(mesh.n_vertices):
        inc = [e for e in range(len(mesh.tets)) if v in mesh.tets[e]]
        out[v] = sum(tensors[e] for e in inc) / len(inc)
    return out


def test_vertex_average_uniform():
    m = generate_primitive("cuboid", (0.02, 0.02, 0.02), resolution=2)
    t = np.arange(9.0).reshape(3, 3)
    t = t + t.T
    out = vertex_average_stress(m, np.repeat(t[None], len(m.tets), axis=0))
    assert np.allclose(out, t)


def test_vertex_average_two_tets():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, -1]], float)
    m = TetMesh(v, [[0, 1, 2, 3], [0, 2, 1, 4]])
    A, B = np.eye(3), 3 * np.eye(3)
    out = vertex_average_stress(m, np.stack([A, B]))
    assert np.allclose(out[0], (A + B) / 2) and np.allclose(out[3], A) and np.allclose(out[4], B)


def test_vertex_average_matches_incidence_scan():
    m = random_delaunay_mesh(3, 20)
    t = np.random.default_rng(1).normal(size=(len(m.tets), 3, 3))
    assert np.array_equal(vertex_average_stress(m, t), brute_vertex_average(m, t))


def test_isolated_vertex_error():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [5, 5, 5]], float)
    m = TetMesh(v, [[0, 1, 2, 3]])
    with pytest.raises(IsolatedVertexError):
        vertex_average_stress(m, np.zeros((1, 3, 3)))


def test_element_stress_uniform_strain():
    m = generate_primitive("cuboid", (0.02, 0.02, 0.02), resolution=2)
    mat = Material(1e6, 0.0)
    u = np.zeros_like(m.vertices)
    u[:, 0] = 0.01 * m.vertices[:, 0]
    s = element_stress(m, mat, u)
    assert np.allclose(s[:, 0, 0], 1e6 * 0.01)
    assert np.allclose(s[:, 1:, 1:], 0, atol=1e-6)


# --------------------------------------------------------------------------
# contact load and trajectory

def test_contact_load_sums_and_balance(cuboid, closed_grasp):
    _, _, contact = closed_grasp
    raw = contact_load(cuboid, contact, 15.0, balance=False)
    proj = 0.0
    for nodes, d in zip(contact.per_finger_object_nodes, contact.closing_dirs):
        proj += np.sum(raw.forces[np.searchsorted(raw.nodes, nodes)] @ d)
    assert abs(proj - 15.0) <= 1e-9
    bal = contact_load(cuboid, contact, 15.0)
    r = cuboid.vertices[bal.nodes] - cuboid.centroid()
    assert np.all(np.abs(bal.forces.sum(axis=0)) <= 1e-9)
    assert np.all(np.abs(np.cross(r, bal.forces).sum(axis=0)) <= 1e-9)


@given(seed=st.integers(0, 10_000))
def test_balance_load_removes_resultants(seed):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(7, 3))
    f = balance_load(pos, rng.normal(size=(7, 3)))
    r = pos - pos.mean(axis=0)
    assert np.all(np.abs(f.sum(axis=0)) <= 1e-9)
    assert np.all(np.abs(np.cross(r, f).sum(axis=0)) <= 1e-9)


def test_trajectory_levels_and_scaling(cuboid, closed_grasp):
    _, _, contact = closed_grasp
    mat = Material(cuboid.elastic_modulus)
    traj = run_grasp_trajectory(cuboid, mat, contact, 15.0, 50)
    assert len(traj) == 50
    assert np.allclose([t.force_level for t in traj], 0.3 * np.arange(1, 51), rtol=0, atol=1e-12)
    full = solve_equilibrium(cuboid, mat, contact_load(cuboid, contact, 15.0))
    assert np.array_equal(traj[-1].stress, full.stress)
    assert np.array_equal(traj[-1].displacement, full.displacement)
    assert np.allclose(traj[24].stress, 0.5 * traj[-1].stress, rtol=0, atol=1e-12 * full.stress.max())
    assert traj[24].scale == 0.5


def test_trajectory_bad_substeps(cuboid, closed_grasp):
    with pytest.raises(ValueError):
        run_grasp_trajectory(cuboid, Material(1e6), closed_grasp[2], 15.0, 0)
