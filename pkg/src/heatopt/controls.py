"""Control discretization strategies and the admissible-set projection.

Four kinds of controls on the reference time interval, all piecewise
constant in time:

* ``variational`` - per-interval P1 fields on the omega submesh; bounds,
  when present, act as a pointwise cutoff of the field (the coefficients
  themselves are the unconstrained pre-projection field).
* ``p0p0``        - cellwise constants on the omega cells.
* ``p0p1``        - continuous P1 on omega nodes, bounds enforced nodally.
* ``parameter``   - coefficients of fixed form functions, one value per
  function and interval; L2(omega) is R^{N_c} with the counting measure.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse.linalg as spla

from .fem import FemOperators, QUAD_POINTS, QUAD_WEIGHTS, apply_B, apply_Bstar
from .mesh import TimeGrid

__all__ = ["ControlFunction", "ControlSpace", "project_admissible", "apply_Isigma"]

KINDS = ("variational", "p0p0", "p0p1", "parameter")

# 3-point Gauss-Legendre on [0, 1] (degree-5 exact), for time averages
_TGAUSS_X = 0.5 + np.array([-0.5, 0.0, 0.5]) * np.sqrt(3.0 / 5.0)
_TGAUSS_W = np.array([5.0, 8.0, 5.0]) / 18.0


@dataclass(frozen=True)
class ControlFunction:
    """Coefficients of one control, (M, n_c), tagged with its kind."""

    kind: str
    grid: TimeGrid
    coeffs: np.ndarray
    bounds: tuple | None = None

    def copy_with(self, coeffs) -> "ControlFunction":
        return replace(self, coeffs=coeffs)


def project_admissible(q: ControlFunction) -> ControlFunction:
    """Coefficientwise clamp onto [q_a, q_b]; idempotent.

    Exact for p0p0/parameter, the nodal convention for p0p1. For the
    variational kind the cutoff is pointwise and applied lazily at
    evaluation, so the coefficients are returned unchanged.
    """
    if q.bounds is None or q.kind == "variational":
        return q
    qa, qb = q.bounds
    return q.copy_with(np.clip(q.coeffs, qa, qb))


class ControlSpace:
    """Inner products, B/B* plumbing and projections for one kind.

    Couples a control kind to the FemOperators of one mesh level and a
    time grid; all optimizer-facing control algebra goes through here.
    """

    def __init__(self, ops: FemOperators, kind: str, grid: TimeGrid,
                 bounds: tuple | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown control kind {kind!r}")
        if kind == "parameter":
            if ops.control_kind != "parameter":
                raise ValueError("parameter controls need parameter operators")
        elif ops.control_kind != "distributed":
            raise ValueError(f"{kind} controls need distributed operators")
        if bounds is not None:
            qa, qb = bounds
            if not qa < qb:
                raise ValueError("bounds must satisfy q_a < q_b")
        self.ops = ops
        self.kind = kind
        self.grid = grid
        self.bounds = bounds
        if kind == "parameter":
            self.n_c = ops.E.shape[1]
        elif kind == "p0p0":
            self.n_c = ops.omega_cells.size
        else:
            self.n_c = ops.omega_nodes.size
        self._momega_lu = None
        if kind in ("variational", "p0p1"):
            # quadrature data on the omega submesh for cutoff integrals
            self._tri_o = ops.mesh.triangles[ops.omega_cells]
            onode_index = -np.ones(ops.mesh.num_nodes, dtype=np.int64)
            onode_index[ops.omega_nodes] = np.arange(ops.omega_nodes.size)
            self._tri_oc = onode_index[self._tri_o]
            self._wq = ops.omega_cell_areas[:, None] * QUAD_WEIGHTS[None, :]

    # -- basic algebra ----------------------------------------------------

    @property
    def spatial(self) -> str:
        return {"variational": "p1", "p0p1": "p1",
                "p0p0": "p0", "parameter": "parameter"}[self.kind]

    def zeros(self) -> ControlFunction:
        return ControlFunction(self.kind, self.grid,
                               np.zeros((self.grid.M, self.n_c)), self.bounds)

    def from_coeffs(self, coeffs) -> ControlFunction:
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.grid.M, self.n_c):
            raise ValueError(
                f"coefficient shape {coeffs.shape} does not match "
                f"({self.grid.M}, {self.n_c})"
            )
        return ControlFunction(self.kind, self.grid, coeffs, self.bounds)

    def spatial_mass_apply(self, x):
        """W x for the slab-wise spatial L2(omega) inner product."""
        if self.kind == "parameter":
            return x
        if self.kind == "p0p0":
            return x * self.ops.omega_cell_areas
        return (self.ops.Momega @ x.T).T

    def dot(self, x: np.ndarray, y: np.ndarray) -> float:
        """L2(I x omega) pairing of two coefficient arrays."""
        k = self.grid.k
        return float(np.einsum("m,mi,mi->", k, x, self.spatial_mass_apply(y)))

    def norm(self, x: np.ndarray) -> float:
        return float(np.sqrt(max(self.dot(x, x), 0.0)))

    def inner(self, q1: ControlFunction, q2: ControlFunction) -> float:
        if q1.kind != q2.kind or q1.grid.M != q2.grid.M:
            raise ValueError("control kind/grid mismatch")
        return self.dot(q1.coeffs, q2.coeffs)

    def mass_solve_spatial(self, duals):
        """Riesz representer of slab-wise dual vectors: W^{-1} duals."""
        if self.kind == "parameter":
            return duals
        if self.kind == "p0p0":
            return duals / self.ops.omega_cell_areas
        if self._momega_lu is None:
            self._momega_lu = spla.splu(self.ops.Momega.tocsc())
        if duals.ndim == 1:
            return self._momega_lu.solve(duals)
        return self._momega_lu.solve(duals.T).T

    # -- cutoff handling (variational kind) --------------------------------

    def _has_cutoff(self, q: ControlFunction) -> bool:
        return self.kind == "variational" and q.bounds is not None

    def _quad_values(self, coeffs_slab):
        """Field values at the omega quadrature points, (T_omega, Q)."""
        return coeffs_slab[self._tri_oc] @ QUAD_POINTS.T

    def _quad_dual(self, vals):
        """Loads int_omega vals * psi_i dx from quad-point values."""
        contrib = np.einsum("tq,tq,qv->tv", self._wq, vals, QUAD_POINTS)
        dual = np.zeros(self.n_c)
        np.add.at(dual, self._tri_oc.ravel(), contrib.ravel())
        return dual

    def control_norm_sq(self, q: ControlFunction) -> float:
        """Squared L2(I x omega) norm of the control's pointwise values."""
        if not self._has_cutoff(q):
            return self.dot(q.coeffs, q.coeffs)
        qa, qb = q.bounds
        k = self.grid.k
        total = 0.0
        for m in range(self.grid.M):
            vals = np.clip(self._quad_values(q.coeffs[m]), qa, qb)
            total += k[m] * float(np.sum(self._wq * vals * vals))
        return total

    # -- B and B* ----------------------------------------------------------

    def loads(self, q: ControlFunction) -> np.ndarray:
        """Interior load vectors of B q(t) per slab, (M, n_interior)."""
        if not self._has_cutoff(q):
            return apply_B(self.ops, q.coeffs, self.spatial)
        qa, qb = q.bounds
        out = np.zeros((self.grid.M, self.ops.n_interior))
        for m in range(self.grid.M):
            vals = np.clip(self._quad_values(q.coeffs[m]), qa, qb)
            contrib = np.einsum("tq,tq,qv->tv", self._wq, vals, QUAD_POINTS)
            full = np.zeros(self.ops.mesh.num_nodes)
            np.add.at(full, self._tri_o.ravel(), contrib.ravel())
            out[m] = full[self.ops.interior]
        return out

    def dloads(self, q: ControlFunction, p: np.ndarray) -> np.ndarray:
        """Directional derivative of loads at q in direction p (M, n_c)."""
        if not self._has_cutoff(q):
            return apply_B(self.ops, p, self.spatial)
        qa, qb = q.bounds
        out = np.zeros((self.grid.M, self.ops.n_interior))
        for m in range(self.grid.M):
            field = self._quad_values(q.coeffs[m])
            mask = (field > qa) & (field < qb)
            vals = self._quad_values(p[m]) * mask
            contrib = np.einsum("tq,tq,qv->tv", self._wq, vals, QUAD_POINTS)
            full = np.zeros(self.ops.mesh.num_nodes)
            np.add.at(full, self._tri_o.ravel(), contrib.ravel())
            out[m] = full[self.ops.interior]
        return out

    def bstar(self, Z: np.ndarray) -> np.ndarray:
        """B* applied to an interior trajectory, (M, n_c) coefficients."""
        return apply_Bstar(self.ops, Z, self.spatial)

    def _omega_quad_of_interior(self, z_slab):
        """Quad-point values over omega cells of an interior P1 field."""
        full = np.zeros(self.ops.mesh.num_nodes)
        full[self.ops.interior] = z_slab
        return full[self._tri_o] @ QUAD_POINTS.T

    def switching_gradient(self, q: ControlFunction, alpha: float,
                           Z: np.ndarray) -> np.ndarray:
        """Representer of d/dq [alpha/2 |q|^2 + <B q, z>], i.e. alpha*q + B*z.

        For a bounded variational control the pointwise cutoff is chained
        through by quadrature, so the result is exact up to the order-4
        rule; elsewhere the formula is exact.
        """
        if not self._has_cutoff(q):
            return alpha * q.coeffs + self.bstar(Z)
        qa, qb = q.bounds
        duals = np.zeros((self.grid.M, self.n_c))
        for m in range(self.grid.M):
            field = self._quad_values(q.coeffs[m])
            mask = (field > qa) & (field < qb)
            zq = self._omega_quad_of_interior(Z[m])
            duals[m] = self._quad_dual(mask * (alpha * np.clip(field, qa, qb) + zq))
        return self.mass_solve_spatial(duals)

    def hessian_representer(self, q: ControlFunction, p: np.ndarray,
                            alpha_nu: float, nu_W: np.ndarray) -> np.ndarray:
        """Representer of the q-block Hessian action alpha*nu*p + nu*B*w.

        ``nu_W`` is nu times the backward-solve trajectory (interior). The
        variational cutoff is chained with its a.e. derivative (0/1 mask);
        for the other kinds the closed formula applies.
        """
        if not self._has_cutoff(q):
            return alpha_nu * p + self.bstar(nu_W)
        qa, qb = q.bounds
        duals = np.zeros((self.grid.M, self.n_c))
        for m in range(self.grid.M):
            field = self._quad_values(q.coeffs[m])
            mask = (field > qa) & (field < qb)
            pv = self._quad_values(p[m])
            wv = self._omega_quad_of_interior(nu_W[m])
            duals[m] = self._quad_dual(mask * (alpha_nu * pv + wv))
        return self.mass_solve_spatial(duals)

    def masked_dot(self, q: ControlFunction, p1: np.ndarray,
                   p2: np.ndarray) -> float:
        """<p1, p2> restricted to where the cutoff of q is inactive.

        Reduces to the plain inner product without a cutoff (the second
        derivative of the clamp vanishes almost everywhere).
        """
        if not self._has_cutoff(q):
            return self.dot(p1, p2)
        qa, qb = q.bounds
        k = self.grid.k
        total = 0.0
        for m in range(self.grid.M):
            field = self._quad_values(q.coeffs[m])
            mask = (field > qa) & (field < qb)
            v1 = self._quad_values(p1[m])
            v2 = self._quad_values(p2[m])
            total += k[m] * float(np.sum(self._wq * mask * v1 * v2))
        return total

    def clamped_dot(self, q: ControlFunction, p: np.ndarray) -> float:
        """<clamp(q), clamp'(q) p>; plain <q, p> without a cutoff."""
        if not self._has_cutoff(q):
            return self.dot(q.coeffs, p)
        qa, qb = q.bounds
        k = self.grid.k
        total = 0.0
        for m in range(self.grid.M):
            field = self._quad_values(q.coeffs[m])
            mask = (field > qa) & (field < qb)
            pv = self._quad_values(p[m])
            total += k[m] * float(
                np.sum(self._wq * mask * np.clip(field, qa, qb) * pv))
        return total

    def fully_clipped_mask(self, q: ControlFunction) -> np.ndarray:
        """Nodes of a bounded variational control whose whole neighborhood
        is cut off (the quadrature mask vanished around them)."""
        if not self._has_cutoff(q):
            return np.zeros_like(q.coeffs, dtype=bool)
        qa, qb = q.bounds
        out = np.zeros((self.grid.M, self.n_c), dtype=bool)
        for m in range(self.grid.M):
            field = self._quad_values(q.coeffs[m])
            inactive = (field > qa) & (field < qb)  # (T, Q)
            has_free = np.zeros(self.n_c, dtype=bool)
            alive = inactive.any(axis=1)
            np.logical_or.at(has_free, self._tri_oc.ravel(),
                             np.repeat(alive, 3))
            out[m] = ~has_free
        return out

    def clipped_field_distance(self, c1: np.ndarray, c2: np.ndarray) -> float:
        """L2(I x omega) distance of the cutoffs of two coefficient sets."""
        if self.bounds is None or self.kind != "variational":
            return self.norm(c1 - c2)
        qa, qb = self.bounds
        k = self.grid.k
        total = 0.0
        for m in range(self.grid.M):
            v1 = np.clip(self._quad_values(c1[m]), qa, qb)
            v2 = np.clip(self._quad_values(c2[m]), qa, qb)
            total += k[m] * float(np.sum(self._wq * (v1 - v2) ** 2))
        return float(np.sqrt(max(total, 0.0)))

    # -- projections --------------------------------------------------------

    def clip(self, coeffs: np.ndarray) -> np.ndarray:
        """Admissible-set projection of raw coefficients (no-op for
        variational, whose cutoff is applied at evaluation)."""
        if self.bounds is None or self.kind == "variational":
            return coeffs
        return np.clip(coeffs, *self.bounds)

    def bq_norm_sq(self, q: ControlFunction) -> float:
        """Squared L2(I; L2(Omega)) norm of B q (for stability checks)."""
        k = self.grid.k
        if self.kind == "parameter":
            return float(np.einsum("m,mi,ij,mj->", k, q.coeffs,
                                   self.ops.form_gram, q.coeffs))
        # extension by zero: equals the control norm itself
        return self.control_norm_sq(q)


def apply_Isigma(space: ControlSpace, f) -> ControlFunction:
    """Project a pointwise-evaluable reference control onto the kind.

    ``f(t, x, y)`` (arrays) for distributed kinds; ``f(t) -> (N_c,)`` for
    parameter controls. p0p0 uses slab/cell L2 averages (the orthogonal
    projection), p0p1 interval averages followed by nodal interpolation,
    parameter componentwise interval averages.
    """
    grid = space.grid
    if space.kind == "variational":
        raise ValueError("I_sigma is the identity for variational controls")
    t0 = grid.breakpoints[:-1]
    k = grid.k
    tq = t0[:, None] + k[:, None] * _TGAUSS_X[None, :]  # (M, 3)

    if space.kind == "parameter":
        coeffs = np.zeros((grid.M, space.n_c))
        for m in range(grid.M):
            vals = np.stack([np.asarray(f(t), dtype=float) for t in tq[m]])
            coeffs[m] = _TGAUSS_W @ vals
        return space.from_coeffs(coeffs)

    ops = space.ops
    if space.kind == "p0p0":
        mesh = ops.mesh
        cells = ops.omega_cells
        p = mesh.nodes[mesh.triangles[cells]]
        pts = np.einsum("qv,tvd->tqd", QUAD_POINTS, p)  # (T, Q, 2)
        coeffs = np.zeros((grid.M, space.n_c))
        for m in range(grid.M):
            acc = np.zeros(space.n_c)
            for w, t in zip(_TGAUSS_W, tq[m]):
                fv = f(t, pts[..., 0], pts[..., 1])
                acc += w * (QUAD_WEIGHTS @ np.asarray(fv, dtype=float).T)
            coeffs[m] = acc
        return space.from_coeffs(coeffs)

    # p0p1: time average evaluated at the omega nodes
    xy = ops.mesh.nodes[ops.omega_nodes]
    coeffs = np.zeros((grid.M, space.n_c))
    for m in range(grid.M):
        acc = np.zeros(space.n_c)
        for w, t in zip(_TGAUSS_W, tq[m]):
            acc += w * np.asarray(f(t, xy[:, 0], xy[:, 1]), dtype=float)
        coeffs[m] = acc
    q = space.from_coeffs(coeffs)
    return project_admissible(q)
