"""Linear-elastic quasistatic FEM oracle on linear tetrahedra.

The body is unconstrained: loads are balanced, and the six rigid-body modes
are projected out of both the load vector and the CG iterates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConvergenceError, DegenerateElementError, IsolatedVertexError
from .kernels import scatter_add_rows
from .mesh_core import TetMesh, signed_volumes


@dataclass(frozen=True)
class Material:
    elastic_modulus: float
    poisson_ratio: float = 0.3

    def __post_init__(self):
        if not self.elastic_modulus > 0:
            raise ValueError("elastic modulus must be positive")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must lie in [0, 0.5)")

    @classmethod
    def of(cls, mesh: TetMesh, poisson_ratio: float = 0.3) -> "Material":
        return cls(mesh.elastic_modulus, poisson_ratio)

    def elasticity_matrix(self):
        """Isotropic 6x6 matrix, Voigt order xx, yy, zz, yz, xz, xy (engineering shear)."""
        E, nu = self.elastic_modulus, self.poisson_ratio
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[[0, 1, 2], [0, 1, 2]] += 2 * mu
        D[[3, 4, 5], [3, 4, 5]] = mu
        return D


@dataclass(frozen=True, eq=False)
class ContactLoad:
    """Nodal point loads (N) on a subset of vertices."""

    nodes: np.ndarray
    forces: np.ndarray
    total_force: float

    def as_vector(self, n_vertices):
        f = np.zeros((n_vertices, 3))
        f[self.nodes] = self.forces
        return f.reshape(-1)

    @property
    def node_forces(self):
        return {int(i): self.forces[k] for k, i in enumerate(self.nodes)}


@dataclass(frozen=True, eq=False)
class FieldOutput:
    stress: np.ndarray
    displacement: np.ndarray
    force_level: float
    scale: float = 1.0

    @property
    def deformation_mag(self):
        return np.linalg.norm(self.displacement, axis=1)

    def scaled(self, factor, force_level):
        if factor < 0:
            raise ValueError("field scaling factor must be non-negative")
        return FieldOutput(self.stress * factor, self.displacement * factor,
                           force_level, self.scale * factor)


# --------------------------------------------------------------------------
# element kinematics

def shape_gradients(mesh: TetMesh):
    """Per-tet gradients of the 4 linear shape functions, shape (m, 4, 3), and volumes."""
    p = mesh.vertices[mesh.tets]
    vol = signed_volumes(mesh.vertices, mesh.tets)
    if np.any(vol <= 0):
        raise DegenerateElementError("non-positive element volume")
    M = np.concatenate([np.ones((len(p), 4, 1)), p], axis=2)
    inv = np.linalg.inv(M)
    return np.transpose(inv[:, 1:, :], (0, 2, 1)), vol


def strain_matrices(grads):
    """Voigt strain-displacement matrices B, shape (m, 6, 12)."""
    m = grads.shape[0]
    B = np.zeros((m, 6, 12))
    gx, gy, gz = grads[:, :, 0], grads[:, :, 1], grads[:, :, 2]
    c = np.arange(4) * 3
    B[:, 0, c] = gx
    B[:, 1, c + 1] = gy
    B[:, 2, c + 2] = gz
    B[:, 3, c + 1] = gz
    B[:, 3, c + 2] = gy
    B[:, 4, c] = gz
    B[:, 4, c + 2] = gx
    B[:, 5, c] = gy
    B[:, 5, c + 1] = gx
    return B


def _element_dofs(tets):
    return (tets[:, :, None] * 3 + np.arange(3)).reshape(len(tets), 12)


def assemble_stiffness(mesh: TetMesh, mat: Material) -> sp.csr_matrix:
    """Global stiffness ``K = sum_e V_e B_e^T D B_e`` as a (3n, 3n) CSR matrix."""
    grads, vol = shape_gradients(mesh)
    B = strain_matrices(grads)
    D = mat.elasticity_matrix()
    Ke = np.einsum("e,eki,kl,elj->eij", vol, B, D, B)
    dofs = _element_dofs(mesh.tets)
    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    n = 3 * mesh.n_vertices
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    return K


def rigid_modes(vertices):
    """Orthonormal basis (3n, 6) of infinitesimal rigid motions about the centroid."""
    n = len(vertices)
    r = vertices - vertices.mean(axis=0)
    modes = np.zeros((n, 3, 6))
    for a in range(3):
        modes[:, a, a] = 1.0
        e = np.zeros(3)
        e[a] = 1.0
        modes[:, :, 3 + a] = np.cross(e, r)
    q, _ = np.linalg.qr(modes.reshape(3 * n, 6))
    return q


def _project(q, x):
    return x - q @ (q.T @ x)


def pcg(K, f, q, tol=1e-8, max_iter=None):
    """Jacobi-preconditioned CG on the complement of ``span(q)``.

    Returns ``(u, iterations)``. Raises :class:`ConvergenceError` when the
    relative residual stays above ``tol`` after ``max_iter`` iterations.
    """
    n = len(f)
    max_iter = 10 * n if max_iter is None else max_iter
    f = _project(q, f)
    fnorm = np.linalg.norm(f)
    u = np.zeros(n)
    if fnorm == 0.0:
        return u, 0
    inv_diag = 1.0 / K.diagonal()
    r = f.copy()
    z = _project(q, inv_diag * r)
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Kp = K @ p
        alpha = rz / (p @ Kp)
        u += alpha * p
        r -= alpha * Kp
        if np.linalg.norm(r) <= tol * fnorm:
            return _project(q, u), it
        z = _project(q, inv_diag * r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"CG did not reach relative residual {tol:g} in {max_iter} iterations "
        f"(got {np.linalg.norm(r) / fnorm:.3e})")


def element_stress(mesh: TetMesh, mat: Material, u) -> np.ndarray:
    """Per-tet Cauchy stress tensors (m, 3, 3) from nodal displacements (n, 3)."""
    grads, _ = shape_gradients(mesh)
    B = strain_matrices(grads)
    ue = np.asarray(u).reshape(-1)[_element_dofs(mesh.tets)]
    s = np.einsum("kl,elj,ej->ek", mat.elasticity_matrix(), B, ue)
    return voigt_to_tensor(s)


def voigt_to_tensor(s):
    t = np.empty(s.shape[:-1] + (3, 3))
    t[..., 0, 0], t[..., 1, 1], t[..., 2, 2] = s[..., 0], s[..., 1], s[..., 2]
    t[..., 1, 2] = t[..., 2, 1] = s[..., 3]
    t[..., 0, 2] = t[..., 2, 0] = s[..., 4]
    t[..., 0, 1] = t[..., 1, 0] = s[..., 5]
    return t


def compute_von_mises(tensor) -> np.ndarray:
    """Von Mises stress of one (3, 3) tensor or a stack (..., 3, 3)."""
    t = np.asarray(tensor, dtype=np.float64)
    s11, s22, s33 = t[..., 0, 0], t[..., 1, 1], t[..., 2, 2]
    s12, s13, s23 = t[..., 0, 1], t[..., 0, 2], t[..., 1, 2]
    j = 0.5 * ((s11 - s22) ** 2 + (s22 - s33) ** 2 + (s33 - s11) ** 2) \
        + 3.0 * (s12 ** 2 + s13 ** 2 + s23 ** 2)
    return np.sqrt(j)


def vertex_average_stress(mesh: TetMesh, element_tensors) -> np.ndarray:
    """Unweighted mean of the tensors of all tets incident to each vertex."""
    element_tensors = np.asarray(element_tensors, dtype=np.float64)
    idx = mesh.tets.reshape(-1)
    counts = np.bincount(idx, minlength=mesh.n_vertices)
    if np.any(counts == 0):
        raise IsolatedVertexError(f"vertex {int(np.argmin(counts))} has no incident tet")
    rows = np.repeat(element_tensors.reshape(-1, 9), 4, axis=0)
    sums = scatter_add_rows(rows, idx, mesh.n_vertices)
    return (sums / counts[:, None]).reshape(-1, 3, 3)


def solve_equilibrium(mesh: TetMesh, mat: Material, load: ContactLoad,
                      tol: float = 1e-8, max_iter: int | None = None,
                      stiffness=None) -> FieldOutput:
    """Static displacement and vertex von Mises stress under a balanced load."""
    n = mesh.n_vertices
    K = assemble_stiffness(mesh, mat) if stiffness is None else stiffness
    f = load.as_vector(n)
    q = rigid_modes(mesh.vertices)
    u, _ = pcg(K, f, q, tol=tol, max_iter=max_iter)
    u = u.reshape(n, 3)
    tensors = vertex_average_stress(mesh, element_stress(mesh, mat, u))
    return FieldOutput(compute_von_mises(tensors), u, float(load.total_force))


# --------------------------------------------------------------------------
# contact loads

def balance_load(positions, forces):
    """Remove net force and torque with a uniform + linear-in-position correction.

    The correction ``a + b x r_i`` (``r_i`` relative to the loaded-node centroid)
    is the least-norm field that cancels both resultants.
    """
    forces = np.asarray(forces, dtype=np.float64)
    m = len(forces)
    r = positions - positions.mean(axis=0)
    net = forces.sum(axis=0)
    torque = np.cross(r, forces).sum(axis=0)
    J = (r * r).sum() * np.eye(3) - r.T @ r
    b = np.linalg.lstsq(J, torque, rcond=None)[0]
    return forces - net / m - np.cross(b, r)


def contact_load(mesh: TetMesh, contact, grasp_force: float, balance: bool = True) -> ContactLoad:
    """Per-finger uniform split of the grasp force along each finger's closing direction.

    Every loaded node of finger ``i`` gets ``(F_g / 2) / m_i`` along
    ``contact.closing_dirs[i]``.
    """
    f = np.zeros((mesh.n_vertices, 3))
    for nodes, direction in zip(contact.per_finger_object_nodes, contact.closing_dirs):
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) == 0:
            continue
        f[nodes] += (0.5 * grasp_force / len(nodes)) * np.asarray(direction)
    nodes = np.unique(np.concatenate([np.asarray(s, dtype=np.int64)
                                      for s in contact.per_finger_object_nodes]))
    forces = f[nodes]
    if balance and len(nodes):
        forces = balance_load(mesh.vertices[nodes], forces)
    return ContactLoad(nodes, forces, float(grasp_force))


def run_grasp_trajectory(mesh: TetMesh, mat: Material, contact, f_max: float = 15.0,
                         substeps: int = 50, stiffness=None) -> list[FieldOutput]:
    """Fields at ``F_g = k * f_max / substeps`` for ``k = 1..substeps``.

    One solve at ``f_max``; each substep is that solution scaled by ``k/substeps``.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    full = solve_equilibrium(mesh, mat, contact_load(mesh, contact, f_max), stiffness=stiffness)
    return [full.scaled(k / substeps, k * f_max / substeps) for k in range(1, substeps + 1)]
