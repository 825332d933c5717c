"""Structured Cartesian meshes, uniform refinement hierarchies and domain embedding.

Cells are numbered lexicographically with the x index running fastest.  Faces are
numbered axis by axis (all x-normal faces, then y-normal, then z-normal), each
block again lexicographic with x fastest.  A face dof is the net flux through the
face in the positive axis direction.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from spdefield.errors import InvalidArgumentError

log = logging.getLogger(__name__)

REFINEMENT_FACTOR = 2
_WHOLE_CELL_TOL = 1e-9


@dataclass(frozen=True)
class CartesianMesh:
    origin: tuple[float, ...]
    cell_counts: tuple[int, ...]
    cell_sizes: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.cell_counts)

    @property
    def num_cells(self) -> int:
        return math.prod(self.cell_counts)

    @property
    def extents(self) -> tuple[float, ...]:
        return tuple(n * h for n, h in zip(self.cell_counts, self.cell_sizes))

    @property
    def upper(self) -> tuple[float, ...]:
        return tuple(o + e for o, e in zip(self.origin, self.extents))

    @property
    def cell_volume(self) -> float:
        return math.prod(self.cell_sizes)

    @property
    def volume(self) -> float:
        return self.cell_volume * self.num_cells

    def face_area(self, axis: int) -> float:
        return math.prod(h for a, h in enumerate(self.cell_sizes) if a != axis)

    def face_shape(self, axis: int) -> tuple[int, ...]:
        return tuple(n + 1 if a == axis else n for a, n in enumerate(self.cell_counts))

    def faces_per_axis(self, axis: int) -> int:
        return math.prod(self.face_shape(axis))

    @cached_property
    def face_offsets(self) -> tuple[int, ...]:
        offsets = [0]
        for axis in range(self.dim - 1):
            offsets.append(offsets[-1] + self.faces_per_axis(axis))
        return tuple(offsets)

    @property
    def num_faces(self) -> int:
        return sum(self.faces_per_axis(a) for a in range(self.dim))

    def cell_ids(self, multi_index: Sequence[np.ndarray]) -> np.ndarray:
        return np.ravel_multi_index(tuple(multi_index), self.cell_counts, order="F")

    def cell_multi_index(self, ids: np.ndarray | None = None) -> np.ndarray:
        """(dim, n) integer array of cell indices; all cells when `ids` is None."""
        if ids is None:
            ids = np.arange(self.num_cells)
        return np.array(np.unravel_index(ids, self.cell_counts, order="F"))

    def face_ids(self, axis: int, multi_index: Sequence[np.ndarray]) -> np.ndarray:
        local = np.ravel_multi_index(tuple(multi_index), self.face_shape(axis), order="F")
        return self.face_offsets[axis] + local

    def face_multi_index(self, axis: int) -> np.ndarray:
        shape = self.face_shape(axis)
        return np.array(np.unravel_index(np.arange(math.prod(shape)), shape, order="F"))

    def cell_faces(self, axis: int) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper face id of every cell along `axis`."""
        idx = self.cell_multi_index()
        lower = self.face_ids(axis, idx)
        idx[axis] += 1
        upper = self.face_ids(axis, idx)
        return lower, upper

    @cached_property
    def centroids(self) -> np.ndarray:
        idx = self.cell_multi_index()
        coords = [
            self.origin[a] + (idx[a] + 0.5) * self.cell_sizes[a] for a in range(self.dim)
        ]
        return np.stack(coords, axis=1)

    def boundary_faces(self, axis: int | None = None, side: str | None = None) -> np.ndarray:
        """Boundary face ids, optionally restricted to one axis and side ('lower'/'upper')."""
        axes = range(self.dim) if axis is None else [axis]
        sides = ("lower", "upper") if side is None else (side,)
        found = []
        for a in axes:
            idx = self.face_multi_index(a)
            for s in sides:
                target = 0 if s == "lower" else self.cell_counts[a]
                mask = idx[a] == target
                found.append(self.face_offsets[a] + np.flatnonzero(mask))
        return np.unique(np.concatenate(found)) if found else np.empty(0, dtype=int)

    def boundary_cells(self) -> np.ndarray:
        idx = self.cell_multi_index()
        counts = np.array(self.cell_counts)[:, None]
        mask = np.any((idx == 0) | (idx == counts - 1), axis=0)
        return np.flatnonzero(mask)

    def distance_to_boundary(self) -> np.ndarray:
        """Distance from each centroid to the nearest side of the mesh box."""
        lo = np.array(self.origin)
        hi = np.array(self.upper)
        c = self.centroids
        return np.minimum(c - lo, hi - c).min(axis=1)


@dataclass(frozen=True, eq=False)
class EmbeddingMap:
    physical_box: tuple[tuple[float, ...], tuple[float, ...]]
    cell_index_map: np.ndarray
    padding: tuple[tuple[float, float], ...]
    offsets: tuple[int, ...]

    def restrict(self, values: np.ndarray) -> np.ndarray:
        return values[..., self.cell_index_map]


@dataclass(frozen=True, eq=False)
class MeshHierarchy:
    """Levels ordered fine (0) to coarse (L); p_theta[l] and p_u[l] map level l+1 to l."""

    levels: list[CartesianMesh]
    p_theta: list[sp.csr_matrix] = field(repr=False)
    p_u: list[sp.csr_matrix] = field(repr=False)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def coarsest(self) -> int:
        return len(self.levels) - 1

    def check_level(self, level: int, *, needs_coarser: bool = False) -> None:
        top = self.coarsest - 1 if needs_coarser else self.coarsest
        if not 0 <= level <= top:
            raise InvalidArgumentError(
                f"level {level} out of range 0..{top} for a {self.num_levels}-level hierarchy"
            )

    def prolongate_cells(self, values: np.ndarray, from_level: int, to_level: int) -> np.ndarray:
        """Inject a cell vector from a coarser level down to a finer one."""
        out = values
        for level in range(from_level - 1, to_level - 1, -1):
            out = self.p_theta[level] @ out
        return out


def build_cartesian_mesh(
    dim: int,
    origin: Sequence[float],
    extents: Sequence[float],
    cell_counts: Sequence[int],
) -> CartesianMesh:
    if dim not in (2, 3):
        raise InvalidArgumentError(f"dim must be 2 or 3, got {dim}")
    if len(origin) != dim or len(extents) != dim or len(cell_counts) != dim:
        raise InvalidArgumentError("origin, extents and cell_counts must have length dim")
    if any(e <= 0 for e in extents):
        raise InvalidArgumentError(f"extents must be positive, got {tuple(extents)}")
    if any(int(n) != n or n < 1 for n in cell_counts):
        raise InvalidArgumentError(f"cell counts must be positive integers, got {tuple(cell_counts)}")
    counts = tuple(int(n) for n in cell_counts)
    sizes = tuple(float(e) / n for e, n in zip(extents, counts))
    return CartesianMesh(
        origin=tuple(float(o) for o in origin),
        cell_counts=counts,
        cell_sizes=sizes,
    )


def _normalize_padding(padding, dim: int) -> tuple[tuple[float, float], ...]:
    if np.isscalar(padding):
        return tuple((float(padding), float(padding)) for _ in range(dim))
    padding = list(padding)
    if len(padding) != dim:
        raise InvalidArgumentError(f"padding needs {dim} entries, got {len(padding)}")
    out = []
    for p in padding:
        if np.isscalar(p):
            out.append((float(p), float(p)))
        else:
            lo, hi = p
            out.append((float(lo), float(hi)))
    return tuple(out)


def padding_in_cells(length: float, cell_size: float) -> int:
    """Smallest whole number of cells covering `length`."""
    if length <= 0:
        return 0
    return math.ceil(length / cell_size - _WHOLE_CELL_TOL)


def _whole_cells(length: float, cell_size: float, axis: int) -> int:
    ratio = length / cell_size
    n = round(ratio)
    if abs(ratio - n) > _WHOLE_CELL_TOL * max(1.0, ratio):
        raise InvalidArgumentError(
            f"padding {length} on axis {axis} is not a whole number of cells of size {cell_size}"
        )
    return n


def embed_mesh(physical: CartesianMesh, padding) -> tuple[CartesianMesh, EmbeddingMap]:
    pads = _normalize_padding(padding, physical.dim)
    lo_cells, hi_cells = [], []
    for axis, (lo, hi) in enumerate(pads):
        if lo < 0 or hi < 0:
            raise InvalidArgumentError(f"padding must be non-negative, got {pads[axis]}")
        h = physical.cell_sizes[axis]
        lo_cells.append(_whole_cells(lo, h, axis))
        hi_cells.append(_whole_cells(hi, h, axis))

    counts = tuple(n + a + b for n, a, b in zip(physical.cell_counts, lo_cells, hi_cells))
    origin = tuple(o - a * h for o, a, h in zip(physical.origin, lo_cells, physical.cell_sizes))
    embedded = CartesianMesh(origin=origin, cell_counts=counts, cell_sizes=physical.cell_sizes)

    idx = physical.cell_multi_index()
    idx += np.array(lo_cells)[:, None]
    mapping = EmbeddingMap(
        physical_box=(physical.origin, physical.upper),
        cell_index_map=embedded.cell_ids(idx),
        padding=tuple((a * h, b * h) for a, b, h in zip(lo_cells, hi_cells, physical.cell_sizes)),
        offsets=tuple(lo_cells),
    )
    return embedded, mapping


def refine(mesh: CartesianMesh) -> CartesianMesh:
    return CartesianMesh(
        origin=mesh.origin,
        cell_counts=tuple(REFINEMENT_FACTOR * n for n in mesh.cell_counts),
        cell_sizes=tuple(h / REFINEMENT_FACTOR for h in mesh.cell_sizes),
    )


def cell_prolongation(fine: CartesianMesh, coarse: CartesianMesh) -> sp.csr_matrix:
    """Constant injection of coarse cell values to their children."""
    idx = fine.cell_multi_index()
    parents = coarse.cell_ids(idx // REFINEMENT_FACTOR)
    data = np.ones(fine.num_cells)
    return sp.csr_matrix(
        (data, (np.arange(fine.num_cells), parents)),
        shape=(fine.num_cells, coarse.num_cells),
    )


def face_prolongation(fine: CartesianMesh, coarse: CartesianMesh) -> sp.csr_matrix:
    """Canonical interpolation of lowest-order face fluxes.

    A coarse unit flux splits evenly over the 2^(d-1) fine faces covering the coarse
    face; the fine faces on the mid-planes of the adjacent coarse cells carry half
    of that, which is where the coarse normal component has dropped to one half.
    """
    d = coarse.dim
    on_face = 2.0 ** (1 - d)
    mid_plane = 2.0 ** (-d)
    rows, cols, vals = [], [], []
    for axis in range(d):
        coarse_idx = coarse.face_multi_index(axis)
        coarse_ids = coarse.face_ids(axis, coarse_idx)
        transverse = [a for a in range(d) if a != axis]
        for shifts in itertools.product((0, 1), repeat=d - 1):
            base = REFINEMENT_FACTOR * coarse_idx
            for a, s in zip(transverse, shifts):
                base[a] += s
            for offset, weight in ((0, on_face), (-1, mid_plane), (1, mid_plane)):
                idx = base.copy()
                idx[axis] += offset
                valid = (idx[axis] >= 0) & (idx[axis] <= fine.cell_counts[axis])
                rows.append(fine.face_ids(axis, idx[:, valid]))
                cols.append(coarse_ids[valid])
                vals.append(np.full(int(valid.sum()), weight))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(fine.num_faces, coarse.num_faces),
    )


def refine_hierarchy(coarsest: CartesianMesh, num_levels: int) -> MeshHierarchy:
    if num_levels < 1:
        raise InvalidArgumentError(f"num_levels must be >= 1, got {num_levels}")
    meshes = [coarsest]
    for _ in range(num_levels - 1):
        meshes.append(refine(meshes[-1]))
    meshes.reverse()

    p_theta, p_u = [], []
    for fine, coarse in zip(meshes[:-1], meshes[1:]):
        p_theta.append(cell_prolongation(fine, coarse))
        p_u.append(face_prolongation(fine, coarse))
    log.debug(
        "hierarchy built: %s",
        " > ".join("x".join(map(str, m.cell_counts)) for m in meshes),
    )
    return MeshHierarchy(levels=meshes, p_theta=p_theta, p_u=p_u)


@dataclass(frozen=True, eq=False)
class EmbeddedHierarchy:
    embedded: MeshHierarchy
    physical: MeshHierarchy
    maps: list[EmbeddingMap]


def embed_hierarchy(physical_coarsest: CartesianMesh, padding, num_levels: int) -> EmbeddedHierarchy:
    """Embedded and physical hierarchies sharing one padding, plus a map per level."""
    embedded_coarsest, _ = embed_mesh(physical_coarsest, padding)
    embedded = refine_hierarchy(embedded_coarsest, num_levels)
    physical = refine_hierarchy(physical_coarsest, num_levels)
    maps = []
    for level, (emb, phys) in enumerate(zip(embedded.levels, physical.levels)):
        check, mapping = embed_mesh(phys, padding)
        if check.cell_counts != emb.cell_counts:
            raise InvalidArgumentError(f"embedding of level {level} does not match the hierarchy")
        maps.append(mapping)
    return EmbeddedHierarchy(embedded=embedded, physical=physical, maps=maps)
