"""Discrete geometry: radius graphs, voxel grids, query sampling, resampling.

Conventions fixed here and relied on everywhere downstream:

* Grid values are stored flat in X-fastest order: the value at integer
  coordinates (i, j, k) lives at flat index ``i + Nx*j + Nx*Ny*k``.
* Grid node (i, j, k) sits at ``origin + (i/Nx) c0 + (j/Ny) c1 + (k/Nz) c2``
  where c0..c2 are the rows of ``cell`` (endpoint-exclusive, so a periodic
  cell tiles without a duplicated seam).
* Edge displacements point from source to destination, r_uv = x_v - x_u.

Coordinates are in Bohr, densities in electrons per Bohr^3.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = [
    "MolecularGraph",
    "VoxelGrid",
    "QuerySample",
    "build_radius_graph",
    "grid_coordinates",
    "fractional_coords",
    "cell_center",
    "sample_queries",
    "partition_grid",
    "trilinear_sample",
    "rotate_instance",
]


def build_radius_graph(coords, cutoff):
    """All ordered pairs within ``cutoff``, sorted by (u, v), no self edges.

    Returns (src, dst, vec) where vec[e] = coords[dst[e]] - coords[src[e]].
    Brute force over all pairs; fine at desk scale.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DomainError("coords must have shape (n, 3)")
    if cutoff <= 0.0:
        raise DomainError("cutoff must be positive")
    diff = coords[None, :, :] - coords[:, None, :]
    dist = np.sqrt(np.einsum("uvx,uvx->uv", diff, diff))
    keep = dist <= cutoff
    np.fill_diagonal(keep, False)
    src, dst = np.nonzero(keep)  # row-major, already sorted by (u, v)
    return src, dst, diff[src, dst]


@dataclass(frozen=True)
class MolecularGraph:
    atom_type: np.ndarray
    atom_coord: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_vec: np.ndarray
    cutoff: float

    def __post_init__(self):
        types = np.asarray(self.atom_type, dtype=int)
        coords = np.asarray(self.atom_coord, dtype=float)
        if types.ndim != 1 or np.any(types < 0):
            raise DomainError("atom_type must be 1-D non-negative integers")
        if coords.shape != (types.size, 3):
            raise DomainError("atom_coord must have shape (n_atoms, 3)")
        if np.any(np.asarray(self.edge_src) == np.asarray(self.edge_dst)):
            raise DomainError("self edges are not allowed")
        object.__setattr__(self, "atom_type", types)
        object.__setattr__(self, "atom_coord", coords)

    @classmethod
    def from_coords(cls, atom_type, atom_coord, cutoff):
        src, dst, vec = build_radius_graph(atom_coord, cutoff)
        return cls(np.asarray(atom_type, dtype=int),
                   np.asarray(atom_coord, dtype=float),
                   src, dst, vec, float(cutoff))

    @property
    def n_atoms(self):
        return self.atom_type.size

    @property
    def n_edges(self):
        return self.edge_src.size


@dataclass(frozen=True)
class VoxelGrid:
    """Density values on a uniform grid inside an arbitrary parallelepiped."""

    shape: tuple
    cell: np.ndarray
    origin: np.ndarray
    values: np.ndarray
    pbc: bool = False

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or any(s < 1 for s in shape):
            raise DomainError("shape must be three positive integers")
        cell = np.asarray(self.cell, dtype=float)
        if cell.shape != (3, 3):
            raise DomainError("cell must be a 3x3 matrix")
        if abs(np.linalg.det(cell)) < 1e-300:
            raise DomainError("cell is singular")
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size != shape[0] * shape[1] * shape[2]:
            raise DomainError("values length does not match shape product")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "cell", cell)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "values", values)

    @property
    def n_voxels(self):
        nx, ny, nz = self.shape
        return nx * ny * nz

    @property
    def voxel_volume(self):
        return abs(np.linalg.det(self.cell)) / self.n_voxels


@dataclass(frozen=True)
class QuerySample:
    """Query points with target densities and a shared volume element."""

    points: np.ndarray
    targets: np.ndarray
    weight: float
    indices: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        tg = np.asarray(self.targets, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or tg.shape != (pts.shape[0],):
            raise DomainError("points (k, 3) and targets (k,) must align")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "targets", tg)


def _coords_at(grid, flat_idx):
    nx, ny, nz = grid.shape
    i = flat_idx % nx
    j = (flat_idx // nx) % ny
    k = flat_idx // (nx * ny)
    frac = np.stack([i / nx, j / ny, k / nz], axis=-1)
    return grid.origin + frac @ grid.cell


def grid_coordinates(grid):
    """Node coordinates for every voxel, in flat (X-fastest) order."""
    return _coords_at(grid, np.arange(grid.n_voxels))


def fractional_coords(grid, points):
    """Solve cell^T f = x - origin for each point; shape (..., 3)."""
    points = np.asarray(points, dtype=float)
    rel = points - grid.origin
    return np.linalg.solve(grid.cell.T, rel.reshape(-1, 3).T).T.reshape(points.shape)


def cell_center(grid):
    return grid.origin + 0.5 * grid.cell.sum(axis=0)


def sample_queries(grid, k, rng_seed):
    """k distinct voxels drawn uniformly; reproducible for a given seed."""
    if not 1 <= k <= grid.n_voxels:
        raise DomainError("sample size out of range")
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(grid.n_voxels, size=k, replace=False)
    return QuerySample(points=_coords_at(grid, idx),
                       targets=grid.values[idx],
                       weight=grid.voxel_volume,
                       indices=idx)


def partition_grid(grid, batch_size):
    """Deterministic batches covering every voxel exactly once, flat order."""
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    out = []
    for start in range(0, grid.n_voxels, batch_size):
        idx = np.arange(start, min(start + batch_size, grid.n_voxels))
        out.append(QuerySample(points=_coords_at(grid, idx),
                               targets=grid.values[idx],
                               weight=grid.voxel_volume,
                               indices=idx))
    return out


def trilinear_sample(grid, points):
    """Trilinear interpolation at arbitrary points.

    Out-of-hull behaviour follows the grid's boundary flag: periodic grids
    wrap fractional coordinates, otherwise coordinates are clamped to the
    node hull (constant extrapolation past the last node).
    """
    frac = fractional_coords(grid, points)
    shape = np.array(grid.shape, dtype=float)
    if grid.pbc:
        s = (frac % 1.0) * shape
        i0 = np.floor(s).astype(int)
        t = s - i0
        i1 = (i0 + 1) % np.array(grid.shape)
        i0 = i0 % np.array(grid.shape)
    else:
        s = np.clip(frac * shape, 0.0, shape - 1.0)
        i0 = np.minimum(np.floor(s).astype(int),
                        np.array(grid.shape) - 2).clip(min=0)
        t = s - i0
        i1 = np.minimum(i0 + 1, np.array(grid.shape) - 1)
    nx, ny = grid.shape[0], grid.shape[1]

    def gather(ii, jj, kk):
        return grid.values[ii + nx * jj + nx * ny * kk]

    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    out = np.zeros(tx.shape)
    for ci, wi in ((0, 1.0 - tx), (1, tx)):
        for cj, wj in ((0, 1.0 - ty), (1, ty)):
            for ck, wk in ((0, 1.0 - tz), (1, tz)):
                ii = i1[..., 0] if ci else i0[..., 0]
                jj = i1[..., 1] if cj else i0[..., 1]
                kk = i1[..., 2] if ck else i0[..., 2]
                out += wi * wj * wk * gather(ii, jj, kk)
    return out


def rotate_instance(atom_coord, grid, rotation):
    """Rotate a molecule-plus-grid instance about the cell center.

    Atom coordinates are rotated directly; grid values are resampled so the
    stored field is the rotated field, f'(x) = f(R^T (x - c) + c). The cell
    and origin are unchanged, which keeps the instance on the same voxel
    lattice (the evaluation protocol for rotated inference).
    """
    R = np.asarray(rotation, dtype=float)
    c = cell_center(grid)
    coords = c + (np.asarray(atom_coord, dtype=float) - c) @ R.T
    nodes = grid_coordinates(grid)
    # pull-back: row-vector form of R^T (x - c) is (x - c) @ R
    pulled = c + (nodes - c) @ R
    values = trilinear_sample(grid, pulled)
    new_grid = VoxelGrid(grid.shape, grid.cell, grid.origin, values, grid.pbc)
    return coords, new_grid
