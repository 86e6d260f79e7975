"""P1 finite element operators on a structured mesh.

Assembles exact mass/stiffness matrices (closed-form element integrals),
eliminates Dirichlet rows/columns, builds the control-to-load maps for
distributed and parameter controls, and caches sparse LU factorizations
of the time-stepping matrices M + nu*k*c*A.

Interior dof vectors are plain 1-D numpy arrays ordered by node index.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh2D

__all__ = [
    "ConfigurationError",
    "FemOperators",
    "assemble",
    "l2_project",
    "l2_project_full",
    "apply_B",
    "apply_Bstar",
    "pair_with_discrete_laplacian",
    "triangle_quadrature",
    "QUAD_POINTS",
    "QUAD_WEIGHTS",
]


class ConfigurationError(ValueError):
    """Inconsistent mesh/control configuration."""


# Order-4 (degree-4 exact) 6-point rule on the reference triangle,
# barycentric coordinates; weights sum to 1 and scale by triangle area.
_A1 = 0.445948490915965
_A2 = 0.091576213509771
QUAD_POINTS = np.array(
    [
        [_A1, _A1, 1.0 - 2.0 * _A1],
        [_A1, 1.0 - 2.0 * _A1, _A1],
        [1.0 - 2.0 * _A1, _A1, _A1],
        [_A2, _A2, 1.0 - 2.0 * _A2],
        [_A2, 1.0 - 2.0 * _A2, _A2],
        [1.0 - 2.0 * _A2, _A2, _A2],
    ]
)
QUAD_WEIGHTS = np.array(
    [0.223381589678011] * 3 + [0.109951743655322] * 3
)


def triangle_quadrature(mesh: Mesh2D):
    """Physical quadrature points and weights for every triangle.

    Returns
    -------
    points : (T, Q, 2) array
    weights : (T, Q) array, already scaled by triangle areas.
    """
    p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
    pts = np.einsum("qv,tvd->tqd", QUAD_POINTS, p)
    areas = mesh.triangle_areas()
    w = areas[:, None] * QUAD_WEIGHTS[None, :]
    return pts, w


@dataclass
class FemOperators:
    """Assembled operators for one mesh level.

    M/A are the interior-restricted mass/stiffness matrices (stiffness is
    the plain Laplacian form; the diffusion coefficient c_diff multiplies
    it explicitly wherever the operator -c*Laplace appears).
    """

    mesh: Mesh2D
    c_diff: float
    control_kind: str  # "distributed" | "parameter"
    M_full: sp.csr_matrix
    A_full: sp.csr_matrix
    interior: np.ndarray        # interior node indices
    interior_index: np.ndarray  # node -> interior position, -1 on boundary
    M: sp.csr_matrix
    A: sp.csr_matrix
    # distributed control data (omega submesh); None for parameter kind
    omega_nodes: np.ndarray | None = None
    Momix: sp.csr_matrix | None = None    # interior x omega-nodes P1 pairing
    Momega: sp.csr_matrix | None = None   # omega-nodes P1 mass
    omega_cells: np.ndarray | None = None
    omega_cell_areas: np.ndarray | None = None
    P0map: sp.csr_matrix | None = None    # interior x omega-cells loads
    # parameter control data
    E: np.ndarray | None = None           # interior x N_c form loads
    form_gram: np.ndarray | None = None   # N_c x N_c overlaps
    form_rects: tuple = ()
    _factor_cache: OrderedDict = field(default_factory=OrderedDict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _mass_lu: object = None

    @property
    def n_interior(self) -> int:
        return self.interior.size

    def mass_dot(self, u, v) -> float:
        return float(u @ (self.M @ v))

    def mass_norm(self, u) -> float:
        return float(np.sqrt(max(self.mass_dot(u, u), 0.0)))

    def step_solver(self, nu: float, k: float):
        """Cached LU solve for (M + nu*k*c_diff*A); reused across steps."""
        key = (float(nu), float(k))
        with self._lock:
            lu = self._factor_cache.get(key)
            if lu is not None:
                self._factor_cache.move_to_end(key)
                return lu.solve
        mat = (self.M + (nu * k * self.c_diff) * self.A).tocsc()
        lu = spla.splu(mat)
        with self._lock:
            self._factor_cache[key] = lu
            while len(self._factor_cache) > 6:
                self._factor_cache.popitem(last=False)
        return lu.solve

    def mass_solve(self, rhs):
        if self._mass_lu is None:
            self._mass_lu = spla.splu(self.M.tocsc())
        return self._mass_lu.solve(rhs)

    def to_full(self, u):
        """Zero-extend an interior vector to all nodes."""
        full = np.zeros(self.mesh.num_nodes)
        full[self.interior] = u
        return full


def _element_matrices(mesh: Mesh2D):
    p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
    x = p[..., 0]
    y = p[..., 1]
    # gradient coefficients of the barycentric basis
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = mesh.triangle_areas()
    Ke = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (
        4.0 * area[:, None, None]
    )
    Me = (np.ones((3, 3)) + np.eye(3))[None, :, :] * (area[:, None, None] / 12.0)
    return Me, Ke


def _assemble_pattern(mesh: Mesh2D, element_mats, shape=None, cols=None):
    tri = mesh.triangles
    T = tri.shape[0]
    rows = np.repeat(tri, 3, axis=1).ravel()
    col_src = tri if cols is None else cols
    colidx = np.tile(col_src, (1, 3)).ravel()
    data = element_mats.reshape(T, 9).ravel()
    n = mesh.num_nodes if shape is None else shape[0]
    m = mesh.num_nodes if shape is None else shape[1]
    return sp.coo_matrix((data, (rows, colidx)), shape=(n, m)).tocsr()


def _rect_indicator_load(mesh: Mesh2D, rect):
    """Exact loads int_rect phi_i for a grid-aligned rectangle."""
    x0, x1, y0, y1 = rect
    centroids = mesh.nodes[mesh.triangles].mean(axis=1)
    inside = (
        (centroids[:, 0] > x0) & (centroids[:, 0] < x1)
        & (centroids[:, 1] > y0) & (centroids[:, 1] < y1)
    )
    areas = mesh.triangle_areas()
    load = np.zeros(mesh.num_nodes)
    cells = np.nonzero(inside)[0]
    np.add.at(load, mesh.triangles[cells].ravel(),
              np.repeat(areas[cells] / 3.0, 3))
    return load


def assemble(mesh: Mesh2D, c_diff: float, control_kind: str = "distributed",
             form_specs=None) -> FemOperators:
    """Assemble mass/stiffness and the control maps for one mesh level.

    Parameters
    ----------
    control_kind : "distributed" (needs omega tags on the mesh) or
        "parameter" (needs ``form_specs``, a list of grid-aligned
        rectangles acting as indicator form functions).
    """
    if c_diff <= 0:
        raise ValueError("c_diff must be positive")
    Me, Ke = _element_matrices(mesh)
    M_full = _assemble_pattern(mesh, Me)
    A_full = _assemble_pattern(mesh, Ke)

    interior = mesh.interior_nodes()
    interior_index = -np.ones(mesh.num_nodes, dtype=np.int64)
    interior_index[interior] = np.arange(interior.size)
    M = M_full[interior][:, interior].tocsr()
    A = A_full[interior][:, interior].tocsr()

    ops = FemOperators(
        mesh=mesh, c_diff=float(c_diff), control_kind=control_kind,
        M_full=M_full, A_full=A_full,
        interior=interior, interior_index=interior_index, M=M, A=A,
    )

    if control_kind == "distributed":
        if mesh.omega_triangles.size == 0:
            raise ConfigurationError(
                "distributed control requires omega-tagged cells"
            )
        cells = mesh.omega_triangles
        areas = mesh.triangle_areas()[cells]
        omega_nodes = np.unique(mesh.triangles[cells].ravel())
        onode_index = -np.ones(mesh.num_nodes, dtype=np.int64)
        onode_index[omega_nodes] = np.arange(omega_nodes.size)

        tri_o = mesh.triangles[cells]
        Me_o = (np.ones((3, 3)) + np.eye(3))[None] * (areas[:, None, None] / 12.0)
        rows = np.repeat(tri_o, 3, axis=1).ravel()
        cols = np.tile(onode_index[tri_o], (1, 3)).ravel()
        data = Me_o.reshape(len(cells), 9).ravel()
        Momix_full = sp.coo_matrix(
            (data, (rows, cols)), shape=(mesh.num_nodes, omega_nodes.size)
        ).tocsr()
        rows_o = np.repeat(onode_index[tri_o], 3, axis=1).ravel()
        Momega = sp.coo_matrix(
            (data, (rows_o, cols)), shape=(omega_nodes.size,) * 2
        ).tocsr()

        loads = np.repeat(areas / 3.0, 3)
        P0_full = sp.coo_matrix(
            (loads, (tri_o.ravel(), np.repeat(np.arange(len(cells)), 3))),
            shape=(mesh.num_nodes, len(cells)),
        ).tocsr()

        ops.omega_nodes = omega_nodes
        ops.Momix = Momix_full[interior].tocsr()
        ops.Momega = Momega
        ops.omega_cells = cells
        ops.omega_cell_areas = areas
        ops.P0map = P0_full[interior].tocsr()
    elif control_kind == "parameter":
        if not form_specs:
            raise ConfigurationError("parameter control requires form_specs")
        rects = tuple(tuple(map(float, r)) for r in form_specs)
        E = np.column_stack(
            [_rect_indicator_load(mesh, r)[interior] for r in rects]
        )
        gram = np.zeros((len(rects), len(rects)))
        for i, (ax0, ax1, ay0, ay1) in enumerate(rects):
            for j, (bx0, bx1, by0, by1) in enumerate(rects):
                dx = max(0.0, min(ax1, bx1) - max(ax0, bx0))
                dy = max(0.0, min(ay1, by1) - max(ay0, by0))
                gram[i, j] = dx * dy
        ops.E = E
        ops.form_gram = gram
        ops.form_rects = rects
    else:
        raise ConfigurationError(f"unknown control kind {control_kind!r}")
    return ops


def _quadrature_load(mesh: Mesh2D, f):
    pts, w = triangle_quadrature(mesh)
    fvals = f(pts[..., 0], pts[..., 1])  # (T, Q)
    contrib = np.einsum("tq,tq,qv->tv", w, fvals, QUAD_POINTS)
    load = np.zeros(mesh.num_nodes)
    np.add.at(load, mesh.triangles.ravel(), contrib.ravel())
    return load


def l2_project(ops: FemOperators, f) -> np.ndarray:
    """L2 projection onto the H^1_0-conforming P1 space (interior dofs).

    ``f(x, y)`` must accept numpy arrays. The load integral uses the
    order-4 rule, the only inexactness for non-polynomial data.
    """
    load = _quadrature_load(ops.mesh, f)
    return ops.mass_solve(load[ops.interior])


def l2_project_full(ops: FemOperators, f) -> np.ndarray:
    """L2 projection onto the full P1 space (all nodes, no BC)."""
    load = _quadrature_load(ops.mesh, f)
    lu = spla.splu(ops.M_full.tocsc())
    return lu.solve(load)


def _matvec_lastaxis(mat, x):
    # mat (r, c) applied along the last axis of x (..., c) -> (..., r)
    if x.ndim == 1:
        return mat @ x
    return (mat @ x.T).T


def apply_B(ops: FemOperators, q_spatial: np.ndarray, spatial: str) -> np.ndarray:
    """Interior load vector(s) of B q, coefficient axis last.

    ``spatial`` selects the coefficient meaning: "p1" (omega-node values),
    "p0" (omega-cell values), or "parameter" (form coefficients).
    """
    q_spatial = np.asarray(q_spatial, dtype=float)
    if spatial == "parameter":
        if ops.E is None:
            raise ConfigurationError("operators lack parameter control data")
        if q_spatial.shape[-1] != ops.E.shape[1]:
            raise ValueError("parameter coefficient count mismatch")
        return q_spatial @ ops.E.T
    if ops.Momix is None:
        raise ConfigurationError("operators lack distributed control data")
    if spatial == "p1":
        if q_spatial.shape[-1] != ops.omega_nodes.size:
            raise ValueError("omega-node coefficient count mismatch")
        return _matvec_lastaxis(ops.Momix, q_spatial)
    if spatial == "p0":
        if q_spatial.shape[-1] != ops.omega_cells.size:
            raise ValueError("omega-cell coefficient count mismatch")
        return _matvec_lastaxis(ops.P0map, q_spatial)
    raise ValueError(f"unknown spatial kind {spatial!r}")


def apply_Bstar(ops: FemOperators, z: np.ndarray, spatial: str) -> np.ndarray:
    """Restriction-to-omega adjoint of apply_B, in control coefficients.

    Exact for all kinds: nodal restriction for "p1", cell averages for
    "p0", form-function pairings for "parameter". Satisfies the duality
    <B q, z> = <q, B* z> in the respective mass inner products. The
    interior-dof axis is last.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != ops.n_interior:
        raise ValueError("interior dof count mismatch")
    if spatial == "parameter":
        return z @ ops.E
    if spatial == "p1":
        full = np.zeros(z.shape[:-1] + (ops.mesh.num_nodes,))
        full[..., ops.interior] = z
        return full[..., ops.omega_nodes]
    if spatial == "p0":
        return _matvec_lastaxis(ops.P0map.T, z) / ops.omega_cell_areas
    raise ValueError(f"unknown spatial kind {spatial!r}")


def pair_with_discrete_laplacian(ops: FemOperators, u: np.ndarray,
                                 z: np.ndarray) -> float:
    """(Laplacian_h u, z)_L2 for the operator -c_diff*Laplace.

    Equals -c_diff * (A u) . z; no mass inverse is needed.
    """
    return -ops.c_diff * float((ops.A @ u) @ z)
