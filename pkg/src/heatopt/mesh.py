"""Structured criss-cross triangulations of the unit square and time grids.

Meshes are deterministic: nodes are ordered lexicographically by (y, x),
two triangles per grid square (diagonal from lower-left to upper-right),
and uniform (red) refinement reproduces the next finer structured mesh so
that coarse nodes embed exactly into fine node sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mesh2D",
    "TimeGrid",
    "AlignmentError",
    "build_structured_mesh",
    "refine_uniform",
    "build_time_grid",
]


class AlignmentError(ValueError):
    """A control rectangle does not align with the structured grid."""


@dataclass(frozen=True)
class Mesh2D:
    """Triangulation of (0,1)^2 with control-region tags.

    Attributes
    ----------
    nodes : (N, 2) float array, lexicographic by (y, x).
    triangles : (T, 3) int array, counter-clockwise vertex indices.
    boundary_nodes : (Nb,) int array, nodes with a coordinate in {0, 1}.
    omega_triangles : (To,) int array, cells whose closure tiles the
        control region omega.
    level : refinement count relative to the construction mesh.
    n_per_side : grid squares per side.
    omega_rects : tuple of (x0, x1, y0, y1) rectangles defining omega.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_nodes: np.ndarray
    omega_triangles: np.ndarray
    level: int
    n_per_side: int
    omega_rects: tuple = field(default_factory=tuple)

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def triangle_areas(self) -> np.ndarray:
        """Signed areas of all triangles (positive for CCW orientation)."""
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.num_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.nonzero(mask)[0]


@dataclass(frozen=True)
class TimeGrid:
    """Partition 0 = t_0 < ... < t_M = 1 of the reference interval."""

    breakpoints: np.ndarray

    @property
    def M(self) -> int:
        return self.breakpoints.size - 1

    @property
    def k(self) -> np.ndarray:
        """Interval lengths k_m, m = 1..M."""
        return np.diff(self.breakpoints)

    @property
    def is_uniform(self) -> bool:
        k = self.k
        return np.allclose(k, k[0], rtol=1e-12, atol=0.0)


def _node_id(i: int, j: int, n: int) -> int:
    # lexicographic by (y, x): row-major with y outer
    return j * (n + 1) + i


def _grid_index(value: float, n: int, what: str) -> int:
    scaled = value * n
    idx = round(scaled)
    if abs(scaled - idx) > 1e-12 * max(1.0, n):
        raise AlignmentError(
            f"{what}={value!r} does not lie on the {n}x{n} grid"
        )
    return int(idx)


def _tag_omega(nodes, triangles, rects, n):
    """Cells whose centroid lies in one of the rectangles.

    Rectangle edges coincide with mesh edges (checked by the caller), so
    centroid membership is exact: a cell is either inside or outside.
    """
    centroids = nodes[triangles].mean(axis=1)
    tagged = np.zeros(triangles.shape[0], dtype=bool)
    for (x0, x1, y0, y1) in rects:
        inside = (
            (centroids[:, 0] > x0) & (centroids[:, 0] < x1)
            & (centroids[:, 1] > y0) & (centroids[:, 1] < y1)
        )
        tagged |= inside
    return np.nonzero(tagged)[0]


def _structured_arrays(n: int):
    side = np.arange(n + 1) / n
    xg, yg = np.meshgrid(side, side)  # row-major: y outer
    nodes = np.column_stack([xg.ravel(), yg.ravel()])
    tris = np.empty((2 * n * n, 3), dtype=np.int64)
    t = 0
    for j in range(n):
        for i in range(n):
            ll = _node_id(i, j, n)
            lr = _node_id(i + 1, j, n)
            ul = _node_id(i, j + 1, n)
            ur = _node_id(i + 1, j + 1, n)
            tris[t] = (ll, lr, ur)
            tris[t + 1] = (ll, ur, ul)
            t += 2
    return nodes, tris


def build_structured_mesh(n_per_side: int, omega_spec=None, level: int = 0) -> Mesh2D:
    """Criss-cross mesh of the unit square with omega tags.

    Parameters
    ----------
    n_per_side : number of grid squares per side (two triangles each).
    omega_spec : list of (x0, x1, y0, y1) axis-aligned rectangles; every
        corner coordinate must be a multiple of 1/n_per_side.

    Raises
    ------
    AlignmentError
        if a rectangle corner misses the grid.
    """
    if n_per_side < 1:
        raise ValueError("n_per_side must be a positive integer")
    rects = tuple(tuple(map(float, r)) for r in (omega_spec or ()))
    for r in rects:
        x0, x1, y0, y1 = r
        if not (x0 < x1 and y0 < y1):
            raise AlignmentError(f"degenerate rectangle {r!r}")
        for v, nm in ((x0, "x0"), (x1, "x1"), (y0, "y0"), (y1, "y1")):
            _grid_index(v, n_per_side, f"rectangle {r!r} corner {nm}")

    nodes, tris = _structured_arrays(n_per_side)
    on_boundary = (
        (nodes[:, 0] == 0.0) | (nodes[:, 0] == 1.0)
        | (nodes[:, 1] == 0.0) | (nodes[:, 1] == 1.0)
    )
    omega = _tag_omega(nodes, tris, rects, n_per_side)
    return Mesh2D(
        nodes=nodes,
        triangles=tris,
        boundary_nodes=np.nonzero(on_boundary)[0],
        omega_triangles=omega,
        level=level,
        n_per_side=n_per_side,
        omega_rects=rects,
    )


def refine_uniform(mesh: Mesh2D) -> Mesh2D:
    """Red refinement: each triangle splits into four via edge midpoints.

    Node ordering of the result is lexicographic by (y, x); omega tags
    are inherited from parents. For structured criss-cross meshes the
    result coincides with ``build_structured_mesh(2 n)`` up to triangle
    ordering.
    """
    n = mesh.n_per_side
    n2 = 2 * n
    fine_nodes, _ = _structured_arrays(n2)

    def fid(pt):
        # dyadic coordinates: exact in floating point
        i = int(round(pt[0] * n2))
        j = int(round(pt[1] * n2))
        return _node_id(i, j, n2)

    tris = []
    tagged = []
    omega_set = set(mesh.omega_triangles.tolist())
    for t, (a, b, c) in enumerate(mesh.triangles):
        pa, pb, pc = mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]
        mab = 0.5 * (pa + pb)
        mbc = 0.5 * (pb + pc)
        mac = 0.5 * (pa + pc)
        ia, ib, ic = fid(pa), fid(pb), fid(pc)
        iab, ibc, iac = fid(mab), fid(mbc), fid(mac)
        children = [
            (ia, iab, iac),
            (iab, ib, ibc),
            (iac, ibc, ic),
            (iab, ibc, iac),
        ]
        tris.extend(children)
        if t in omega_set:
            tagged.extend(range(len(tris) - 4, len(tris)))

    tris = np.asarray(tris, dtype=np.int64)
    on_boundary = (
        (fine_nodes[:, 0] == 0.0) | (fine_nodes[:, 0] == 1.0)
        | (fine_nodes[:, 1] == 0.0) | (fine_nodes[:, 1] == 1.0)
    )
    return Mesh2D(
        nodes=fine_nodes,
        triangles=tris,
        boundary_nodes=np.nonzero(on_boundary)[0],
        omega_triangles=np.asarray(tagged, dtype=np.int64),
        level=mesh.level + 1,
        n_per_side=n2,
        omega_rects=mesh.omega_rects,
    )


def build_time_grid(M: int) -> TimeGrid:
    """Uniform grid with M intervals, k_m = 1/M."""
    if M < 1:
        raise ValueError("M must be a positive integer")
    return TimeGrid(breakpoints=np.arange(M + 1) / M)
