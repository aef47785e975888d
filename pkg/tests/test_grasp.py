import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fieldgrasp.errors import GraspMissError, NoContactError, SamplerExhaustedError
from fieldgrasp.grasp import (ContactAssignment, GraspPose, GripperModel, close_gripper,
                              compute_joint_closure, find_contacts, frame_from_axis, load_grasps,
                              matrix_to_quat, pose_gripper, quat_to_matrix, sample_antipodal,
                              save_grasps, so3_exp)
from fieldgrasp.mesh_core import TetMesh, generate_primitive, raycast

from conftest import side_grasp


def brute_pairs(gv, ov, eps):
    out = []
    for i, g in enumerate(gv):
        for j, o in enumerate(ov):
            if math.dist(g, o) <= eps:
                out.append((i, j))
    return out


def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


# --------------------------------------------------------------------------
# rotations and poses

@given(seed=st.integers(0, 100_000))
def test_quaternion_roundtrip(seed):
    R = random_rotation(np.random.default_rng(seed))
    q = matrix_to_quat(R)
    assert q[0] >= 0
    assert np.allclose(quat_to_matrix(q), R, atol=1e-12)


@given(seed=st.integers(0, 100_000))
def test_so3_exp_orthonormal_and_axis_fixed(seed):
    w = np.random.default_rng(seed).normal(size=3)
    R = so3_exp(w)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.allclose(R @ w, w, atol=1e-12)
    assert math.isclose(np.trace(R), 1 + 2 * math.cos(np.linalg.norm(w)), abs_tol=1e-12)


def test_frame_from_axis_first_column():
    for axis in ([1, 0, 0], [0, 0, 1], [0.3, -0.2, 0.9]):
        a = np.array(axis, float) / np.linalg.norm(axis)
        for k in range(4):
            R = frame_from_axis(a, k * math.pi / 2)
            assert np.allclose(R[:, 0], a) and math.isclose(np.linalg.det(R), 1.0)


def test_pose_dict_roundtrip_and_validation(tmp_path):
    p = GraspPose(frame_from_axis([0, 1, 0], 0.4), [0.1, 0.2, 0.3], [0.01, 0.02], 7.5)
    q = GraspPose.from_dict(p.to_dict())
    assert np.allclose(q.rotation, p.rotation, atol=1e-12)
    assert np.array_equal(q.translation, p.translation) and q.F_g == 7.5
    save_grasps(tmp_path / "g.json", "obj", [p, q])
    oid, back = load_grasps(tmp_path / "g.json")
    assert oid == "obj" and len(back) == 2 and len(back[0].to_dict()["T"]) == 7
    with pytest.raises(ValueError):
        GraspPose(np.eye(3), np.zeros(3), F_g=16.0)
    with pytest.raises(ValueError):
        GraspPose(2 * np.eye(3), np.zeros(3))


def test_compose_local_translation_in_gripper_frame():
    R = frame_from_axis([0, 1, 0], 0.3)
    p = GraspPose(R, [1.0, 2.0, 3.0])
    q = p.compose_local([0.1, 0, 0, 0, 0, 0])
    assert np.allclose(q.translation - p.translation, 0.1 * R[:, 0])
    r = p.compose_local([0, 0, 0, 0.2, 0, 0])
    assert np.allclose(r.rotation[:, 0], R[:, 0])


# --------------------------------------------------------------------------
# gripper model

def test_gripper_pads_mirror_symmetric():
    g = GripperModel()
    v, finger, tris = g.canonical_vertices((0.01, 0.01))
    a, b = v[finger == 0], v[finger == 1]
    assert np.allclose(a * [-1, 1, 1], b)
    assert math.isclose(np.linalg.norm(g.closing_axis), 1.0)
    assert len(tris) == 2 * 2 * 4 * 4


def test_posed_pads_face_inward(gripper):
    pose = GraspPose(np.eye(3), np.zeros(3), [0.01, 0.01])
    posed = pose_gripper(gripper, pose)
    m0, m1 = posed.meshes()
    from fieldgrasp.mesh_core import triangle_normals
    assert np.allclose(triangle_normals(m0.vertices, m0.tris), [-1, 0, 0])
    assert np.allclose(triangle_normals(m1.vertices, m1.tris), [1, 0, 0])
    assert np.allclose(posed.closing_dirs, [[-1, 0, 0], [1, 0, 0]])


# --------------------------------------------------------------------------
# closure

def test_closure_centered_cuboid():
    w = 0.03
    m = generate_primitive("cuboid", (w, 0.04, 0.04), resolution=4)
    g = GripperModel()
    p = compute_joint_closure(m, g, GraspPose(np.eye(3), np.zeros(3)))
    assert np.allclose(p, (g.w_open - w) / 2, atol=1e-15)


def test_closure_offset_along_axis():
    m = generate_primitive("cuboid", (0.03, 0.04, 0.04), resolution=4)
    g = GripperModel()
    p0 = compute_joint_closure(m, g, GraspPose(np.eye(3), np.zeros(3)))
    p1 = compute_joint_closure(m, g, GraspPose(np.eye(3), [0.001, 0, 0]))
    assert math.isclose(abs(p1[0] - p1[1]), 0.002, abs_tol=1e-12)
    assert math.isclose(p1.sum(), p0.sum(), abs_tol=1e-12)


def test_closure_miss():
    m = generate_primitive("cuboid", (0.03, 0.04, 0.04), resolution=4)
    with pytest.raises(GraspMissError):
        compute_joint_closure(m, GripperModel(), GraspPose(np.eye(3), [0, 0.2, 0]))
    big = generate_primitive("cuboid", (0.1, 0.04, 0.04), resolution=4)
    with pytest.raises(GraspMissError):
        compute_joint_closure(big, GripperModel(), GraspPose(np.eye(3), np.zeros(3)))


@given(seed=st.integers(0, 100_000))
def test_closure_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    m = generate_primitive("ellipsoid", (0.02, 0.025, 0.03), resolution=4)
    g = GripperModel()
    pose = GraspPose(frame_from_axis([1, 0.2, 0.1], 0.5), [0.001, -0.002, 0.0])
    Q, t = random_rotation(rng), rng.normal(size=3)
    m2 = TetMesh(m.vertices @ Q.T + t, m.tets)
    pose2 = GraspPose(Q @ pose.rotation, Q @ pose.translation + t)
    assert np.allclose(compute_joint_closure(m, g, pose), compute_joint_closure(m2, g, pose2),
                       atol=1e-12)


# --------------------------------------------------------------------------
# contacts

def test_find_contacts_matches_brute_force(cuboid, gripper):
    for angle in (0.0, 0.3, 1.0):
        pose = side_grasp(cuboid, (1, 0.1, 0.0), angle)
        pose = pose.replace(p_g=compute_joint_closure(cuboid, gripper, pose))
        posed = pose_gripper(gripper, pose)
        c = find_contacts(cuboid, posed, 0.005)
        want = brute_pairs(posed.vertices, cuboid.vertices, 0.005)
        assert [tuple(p) for p in c.contact_pairs.tolist()] == want
        for f in (0, 1):
            idx = [j for i, j in want if posed.finger[i] == f]
            assert c.per_finger_object_nodes[f].tolist() == sorted(set(idx))


def test_pad_touching_face_pairs_with_face_vertices(gripper):
    m = generate_primitive("cuboid", (0.04, 0.04, 0.04), resolution=8)
    pose = GraspPose(np.eye(3), np.zeros(3))
    pose, posed, c = close_gripper(m, gripper, pose, 0.005)
    assert np.allclose(pose.p_g, 0.02)
    touched = np.unique(c.contact_pairs[:, 1])
    assert np.all(np.abs(np.abs(m.vertices[touched, 0]) - 0.02) <= 0.005)
    # every pad vertex lies on the face and has a lattice vertex within eps
    assert set(np.unique(c.contact_pairs[:, 0])) == set(range(len(posed.vertices)))


def test_zero_epsilon_no_contact(cuboid, gripper):
    pose = side_grasp(cuboid, (1, 0.1, 0.05), 0.2)
    pose = pose.replace(p_g=compute_joint_closure(cuboid, gripper, pose))
    with pytest.raises(NoContactError):
        find_contacts(cuboid, pose_gripper(gripper, pose), 0.0)


@given(eps=st.floats(0.001, 0.01))
def test_contacts_monotone_in_epsilon(eps):
    m = generate_primitive("cuboid", (0.06, 0.04, 0.03), resolution=6)
    g = GripperModel()
    pose = side_grasp(m, (1, 0.1, 0.0), 0.3)
    pose = pose.replace(p_g=compute_joint_closure(m, g, pose))
    posed = pose_gripper(g, pose)

    def count(e):
        try:
            return len(find_contacts(m, posed, e).contact_pairs)
        except NoContactError:
            return 0
    assert count(2 * eps) >= count(eps)


def test_contact_assignment_roundtrip(closed_grasp):
    c = closed_grasp[2]
    d = ContactAssignment.from_dict(c.to_dict())
    assert np.array_equal(d.contact_pairs, c.contact_pairs)
    assert all(np.array_equal(a, b) for a, b in zip(d.per_finger_object_nodes, c.per_finger_object_nodes))


# --------------------------------------------------------------------------
# antipodal sampler

def test_sampler_count_and_determinism(cuboid, gripper):
    a = sample_antipodal(cuboid, gripper, 25, 4, seed=3)
    b = sample_antipodal(cuboid, gripper, 25, 4, seed=3)
    assert len(a) == 100
    assert all(np.array_equal(p.rotation, q.rotation) and np.array_equal(p.translation, q.translation)
               for p, q in zip(a, b))


def test_sampler_rotations_regular(cuboid, gripper):
    poses = sample_antipodal(cuboid, gripper, 3, 4, seed=1)
    for i in range(0, 12, 4):
        group = poses[i:i + 4]
        for k, p in enumerate(group):
            assert np.allclose(p.rotation[:, 0], group[0].rotation[:, 0])
            c = float(np.clip(p.rotation[:, 1] @ group[0].rotation[:, 1], -1, 1))
            assert math.isclose(math.acos(c), abs(math.remainder(k * math.pi / 2, 2 * math.pi)),
                                abs_tol=1e-7)


def test_sphere_axes_through_center(gripper):
    m = generate_primitive("ellipsoid", (0.025, 0.025, 0.025), resolution=8)
    for p in sample_antipodal(m, gripper, 10, 4, seed=0):
        a = p.rotation[:, 0]
        # distance of the centre from the grasp axis line; facets make normals approximate
        d = np.linalg.norm(np.cross(p.translation, a))
        assert d < 0.006


def test_antipodality(cuboid, gripper):
    surf = cuboid.surface()
    for p in sample_antipodal(cuboid, gripper, 10, 4, seed=5)[::4]:
        a = p.rotation[:, 0]
        hit_out = raycast(cuboid, p.translation, a)
        hit_in = raycast(cuboid, p.translation, -a)
        assert hit_out is not None and hit_in is not None
        # both contacts on the axis; axis along the outward normal of the first surface point
        for pt, _ in (hit_out, hit_in):
            assert np.linalg.norm(np.cross(pt - p.translation, a)) < 1e-9
        assert math.isclose(np.linalg.norm(hit_out[0] - p.translation),
                            np.linalg.norm(hit_in[0] - p.translation), abs_tol=1e-9)


def test_sampler_exhaustion():
    big = generate_primitive("cuboid", (0.2, 0.2, 0.2), resolution=2)
    with pytest.raises(SamplerExhaustedError):
        sample_antipodal(big, GripperModel(), 2, 4, seed=0)
