"""Perforated-domain geometry.

Builds the unit cell Y with an axis-aligned box hole S, the perforated
domain obtained by removing the lattice of scaled holes from an outer box,
and structured grids whose planes contain every hole face.  Node classes:

* ``FLUID``          -- strictly inside the perforated domain,
* ``HOLE_INTERIOR``  -- strictly inside a hole,
* ``HOLE_BOUNDARY``  -- on a hole face,
* ``OUTER_BOUNDARY`` -- on the boundary of the outer box.

Hole-boundary degrees of freedom are (node, face) pairs: a node on an edge
or corner of a hole box carries one DOF per adjacent face.  Face normals
point from the fluid into the hole (the outward normal of the fluid
region), which is the direction the normal-derivative coupling uses.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError

FLUID = 0
HOLE_INTERIOR = 1
HOLE_BOUNDARY = 2
OUTER_BOUNDARY = 3

#: tolerance for "this coordinate sits on a grid plane"
ALIGN_TOL = 1e-12

_grid_tokens = itertools.count()


def _as_point(p, d, name):
    arr = np.asarray(p, dtype=float)
    if arr.shape != (d,):
        raise ConfigurationError(f"{name} must have {d} components, got shape {arr.shape}")
    return tuple(arr.tolist())


@dataclass(frozen=True)
class UnitCellSpec:
    """Representative cell Y = prod [0, l_a) with an optional open box hole S."""

    lengths: tuple
    hole: tuple | None = None

    def __post_init__(self):
        d = len(self.lengths)
        if d not in (2, 3):
            raise ConfigurationError(f"cell dimension must be 2 or 3, got {d}")
        object.__setattr__(self, "lengths", tuple(float(l) for l in self.lengths))
        if any(l <= 0 for l in self.lengths):
            raise ConfigurationError("cell edge lengths must be positive")
        if self.hole is not None:
            lo = _as_point(self.hole[0], d, "cell.hole lower corner")
            hi = _as_point(self.hole[1], d, "cell.hole upper corner")
            for a in range(d):
                if not (0.0 < lo[a] < hi[a] < self.lengths[a]):
                    raise ValidationError(
                        "hole closure must be strictly inside the open cell "
                        f"(axis {a}: need 0 < {lo[a]} < {hi[a]} < {self.lengths[a]})"
                    )
            object.__setattr__(self, "hole", (lo, hi))

    @property
    def dim(self) -> int:
        return len(self.lengths)

    @property
    def cell_measure(self) -> float:
        return float(np.prod(self.lengths))

    @property
    def hole_measure(self) -> float:
        if self.hole is None:
            return 0.0
        lo, hi = self.hole
        return float(np.prod(np.subtract(hi, lo)))

    @property
    def porosity(self) -> float:
        """Fluid volume fraction |Y*|/|Y|; equals 1 iff there is no hole."""
        return 1.0 - self.hole_measure / self.cell_measure


def enumerate_hole_shifts(box, eps: float, cell: UnitCellSpec):
    """Integer shifts k whose scaled hole eps*(k*l + S) has closure inside the box.

    Holes touching the outer boundary are dropped.
    """
    if cell.hole is None:
        return []
    lo_box, hi_box = (np.asarray(box[0], float), np.asarray(box[1], float))
    s_lo, s_hi = (np.asarray(cell.hole[0]), np.asarray(cell.hole[1]))
    lengths = np.asarray(cell.lengths)
    d = cell.dim
    k_min = np.floor((lo_box / eps - s_hi) / lengths).astype(int) - 1
    k_max = np.ceil((hi_box / eps - s_lo) / lengths).astype(int) + 1
    shifts = []
    for k in itertools.product(*[range(k_min[a], k_max[a] + 1) for a in range(d)]):
        h_lo = eps * (np.asarray(k) * lengths + s_lo)
        h_hi = eps * (np.asarray(k) * lengths + s_hi)
        if np.all(h_lo > lo_box) and np.all(h_hi < hi_box):
            shifts.append(tuple(int(x) for x in k))
    shifts.sort()
    return shifts


@dataclass(frozen=True)
class PerforatedDomainSpec:
    """Outer box D, scale eps, the cell spec, and the retained hole lattice."""

    box: tuple
    eps: float
    cell: UnitCellSpec
    shifts: tuple
    holes: tuple  # ((lo, hi), ...) in physical coordinates

    @property
    def dim(self) -> int:
        return self.cell.dim

    @property
    def n_holes(self) -> int:
        return len(self.holes)

    @property
    def porosity(self) -> float:
        return self.cell.porosity


class StructuredGrid:
    """Uniform vertex grid on the outer box with per-node classification.

    Nodes sit at ``box_lo + i*h`` (C-order flat indexing).  Index sets:

    * ``fluid_idx``  -- flat indices of FLUID nodes (the PDE unknowns),
    * ``domain_idx`` -- everything except hole interiors; fields "defined on
      the perforated domain" are vectors over these nodes, and zero
      extension fills hole interiors with 0.
    """

    def __init__(self, box, h, shape, node_class):
        self.box = (tuple(map(float, box[0])), tuple(map(float, box[1])))
        self.h = tuple(map(float, h))
        self.shape = tuple(map(int, shape))
        self.node_class = node_class
        node_class.setflags(write=False)
        self.dim = len(self.shape)
        self.n_nodes = int(np.prod(self.shape))
        self.fluid_idx = np.flatnonzero(node_class == FLUID)
        self.domain_idx = np.flatnonzero(node_class != HOLE_INTERIOR)
        self.fluid_idx.setflags(write=False)
        self.domain_idx.setflags(write=False)
        # position of each node inside fluid_idx / domain_idx, -1 if absent
        self.fluid_pos = np.full(self.n_nodes, -1, dtype=np.int64)
        self.fluid_pos[self.fluid_idx] = np.arange(self.fluid_idx.size)
        self.domain_pos = np.full(self.n_nodes, -1, dtype=np.int64)
        self.domain_pos[self.domain_idx] = np.arange(self.domain_idx.size)
        self.fluid_pos.setflags(write=False)
        self.domain_pos.setflags(write=False)
        self.fluid_pos_in_domain = self.domain_pos[self.fluid_idx]
        self.fluid_pos_in_domain.setflags(write=False)
        self.cache_token = next(_grid_tokens)

    @property
    def n_fluid(self) -> int:
        return self.fluid_idx.size

    @property
    def n_domain(self) -> int:
        return self.domain_idx.size

    @property
    def volume_weight(self) -> float:
        """Quadrature weight h^d of one node."""
        return float(np.prod(self.h))

    def axis_coords(self, a: int) -> np.ndarray:
        return self.box[0][a] + self.h[a] * np.arange(self.shape[a])

    def node_coords(self, flat_idx) -> np.ndarray:
        """Coordinates of the given flat node indices, shape (n, d)."""
        multi = np.unravel_index(np.asarray(flat_idx), self.shape)
        cols = [self.box[0][a] + self.h[a] * multi[a] for a in range(self.dim)]
        return np.stack(cols, axis=-1).astype(float)

    def all_coords(self) -> np.ndarray:
        return self.node_coords(np.arange(self.n_nodes))


class BoundaryDofMap:
    """Ordered hole-boundary degrees of freedom.

    Arrays indexed by DOF: flat node index, hole id, face normal (axis and
    sign, pointing from fluid into the hole), surface weight h^(d-1), and
    the flat index / fluid position of the adjacent fluid node across the
    face (the node whose Laplacian stencil the DOF closes).
    """

    def __init__(self, grid, node_idx, hole_id, axis, sign):
        self.node_idx = node_idx
        self.hole_id = hole_id
        self.axis = axis
        self.sign = sign
        d = grid.dim
        # face element area = product of the spacings transverse to the normal
        hs = np.asarray(grid.h)
        face_area = np.array([np.prod(np.delete(hs, a)) for a in range(d)])
        self.weight = face_area[axis] if axis.size else np.zeros(0)
        strides = np.array([int(np.prod(grid.shape[a + 1:])) for a in range(d)], dtype=np.int64)
        self.fluid_node_idx = node_idx - sign * strides[axis]
        bad = grid.node_class[self.fluid_node_idx] != FLUID
        if np.any(bad):
            raise ConfigurationError(
                "grid spacing too coarse: a hole face has no fluid node across it "
                "(holes closer than h to each other or to the outer boundary)"
            )
        self.fluid_pos = grid.fluid_pos[self.fluid_node_idx]
        for arr in (self.node_idx, self.hole_id, self.axis, self.sign,
                    self.weight, self.fluid_node_idx, self.fluid_pos):
            arr.setflags(write=False)
        self.coords = grid.node_coords(self.node_idx)
        self.coords.setflags(write=False)
        self._lookup = {
            (int(n), int(a), int(s)): j
            for j, (n, a, s) in enumerate(zip(node_idx, axis, sign))
        }

    @property
    def n_dofs(self) -> int:
        return self.node_idx.size

    @property
    def total_weight(self) -> float:
        return float(self.weight.sum())

    def dof_at(self, node_flat: int, axis: int, sign: int) -> int:
        return self._lookup[(node_flat, axis, sign)]

    def normals(self) -> np.ndarray:
        """Unit outward normals (fluid side), shape (n_dofs, d)."""
        d = self.coords.shape[1]
        out = np.zeros((self.n_dofs, d))
        out[np.arange(self.n_dofs), self.axis] = self.sign
        return out


def _check_multiple(value: float, h: float, what: str, axis: int, errors: list):
    ratio = value / h
    if abs(ratio - round(ratio)) > ALIGN_TOL * max(1.0, abs(ratio)):
        errors.append(f"grid.h: {what} along axis {axis} ({value}) is not an integer multiple of h={h}")
    return int(round(ratio))


def build_perforated_domain(box, eps: float, cell: UnitCellSpec, h):
    """Construct the perforated domain, its grid, and the boundary DOF map.

    ``h`` may be a scalar (same spacing on every axis) or a per-axis
    sequence.  Hole faces must land on grid planes: h has to divide the
    scaled cell edges eps*l_a and the scaled hole corner offsets.
    """
    d = cell.dim
    lo = _as_point(box[0], d, "domain box lower corner")
    hi = _as_point(box[1], d, "domain box upper corner")
    if not all(hi[a] > lo[a] for a in range(d)):
        raise ConfigurationError("domain box must have positive extent on every axis")
    if not (0.0 < eps < 1.0):
        raise ConfigurationError(f"eps must lie in (0,1), got {eps}")
    hs = np.asarray(h, dtype=float)
    if hs.ndim == 0:
        hs = np.full(d, float(hs))
    if hs.shape != (d,):
        raise ConfigurationError(f"grid.h must be a scalar or {d}-vector")

    errors: list = []
    shape = []
    for a in range(d):
        n = _check_multiple(hi[a] - lo[a], hs[a], "domain edge", a, errors)
        shape.append(n + 1)
        if eps * cell.lengths[a] >= hi[a] - lo[a]:
            errors.append(f"scaled cell edge eps*l along axis {a} must be smaller than the domain edge")
        _check_multiple(eps * cell.lengths[a], hs[a], "scaled cell edge eps*l", a, errors)
        if cell.hole is not None:
            _check_multiple(eps * cell.hole[0][a], hs[a], "scaled hole corner", a, errors)
            _check_multiple(eps * cell.hole[1][a], hs[a], "scaled hole corner", a, errors)
    if errors:
        raise ConfigurationError(errors)

    shifts = enumerate_hole_shifts((lo, hi), eps, cell)
    holes = []
    for k in shifts:
        h_lo = tuple(eps * (k[a] * cell.lengths[a] + cell.hole[0][a]) for a in range(d))
        h_hi = tuple(eps * (k[a] * cell.lengths[a] + cell.hole[1][a]) for a in range(d))
        holes.append((h_lo, h_hi))
    spec = PerforatedDomainSpec(box=(lo, hi), eps=float(eps), cell=cell,
                                shifts=tuple(shifts), holes=tuple(holes))

    node_class = np.zeros(shape, dtype=np.uint8)
    for a in range(d):
        sl = [slice(None)] * d
        for edge in (0, shape[a] - 1):
            sl[a] = edge
            node_class[tuple(sl)] = OUTER_BOUNDARY
    hole_index_boxes = []
    for (h_lo, h_hi) in holes:
        ia = []
        ib = []
        for a in range(d):
            i0 = int(round((h_lo[a] - lo[a]) / hs[a]))
            i1 = int(round((h_hi[a] - lo[a]) / hs[a]))
            if i1 - i0 < 2:
                raise ConfigurationError(
                    f"hole narrower than two grid cells along axis {a}; refine h"
                )
            ia.append(i0)
            ib.append(i1)
        hole_index_boxes.append((ia, ib))
        closed = tuple(slice(ia[a], ib[a] + 1) for a in range(d))
        interior = tuple(slice(ia[a] + 1, ib[a]) for a in range(d))
        if np.any(node_class[closed] != FLUID):
            raise ConfigurationError("hole boxes overlap or touch; invalid lattice")
        node_class[closed] = HOLE_BOUNDARY
        node_class[interior] = HOLE_INTERIOR

    grid = StructuredGrid((lo, hi), hs, shape, node_class.reshape(-1))

    # boundary DOFs: per hole, per axis, low face (+1 normal) then high (-1)
    dof_nodes, dof_hole, dof_axis, dof_sign = [], [], [], []
    for hid, (ia, ib) in enumerate(hole_index_boxes):
        for a in range(d):
            for sign, plane in ((1, ia[a]), (-1, ib[a])):
                face = tuple(
                    np.array([plane]) if b == a else np.arange(ia[b], ib[b] + 1)
                    for b in range(d)
                )
                mesh = np.meshgrid(*face, indexing="ij")
                flat = np.ravel_multi_index([m.reshape(-1) for m in mesh], shape)
                flat = np.sort(flat)
                dof_nodes.append(flat)
                dof_hole.append(np.full(flat.shape, hid, dtype=np.int64))
                dof_axis.append(np.full(flat.shape, a, dtype=np.int64))
                dof_sign.append(np.full(flat.shape, sign, dtype=np.int64))
    if dof_nodes:
        dofs = BoundaryDofMap(
            grid,
            np.concatenate(dof_nodes),
            np.concatenate(dof_hole),
            np.concatenate(dof_axis),
            np.concatenate(dof_sign),
        )
    else:
        empty = np.zeros(0, dtype=np.int64)
        dofs = BoundaryDofMap(grid, empty, empty.copy(), empty.copy(), empty.copy())
    return spec, grid, dofs


def indicator_field(grid: StructuredGrid) -> np.ndarray:
    """Indicator of the closed perforated domain: 0 inside holes, 1 elsewhere."""
    out = np.ones(grid.n_nodes)
    out[grid.node_class == HOLE_INTERIOR] = 0.0
    return out


def zero_extend(values: np.ndarray, grid: StructuredGrid) -> np.ndarray:
    """Extend a field on the perforated domain's nodes by zero into the holes.

    ``values`` is indexed by ``grid.domain_idx``; the result lives on every
    grid node.  The extension is linear and, with the uniform h^d node
    weights, an exact discrete L2 isometry.
    """
    values = np.asarray(values)
    if values.shape != (grid.n_domain,):
        raise ValidationError(
            f"expected a field over {grid.n_domain} domain nodes, got shape {values.shape}"
        )
    out = np.zeros(grid.n_nodes, dtype=values.dtype)
    out[grid.domain_idx] = values
    return out


def fluid_to_domain(values: np.ndarray, grid: StructuredGrid) -> np.ndarray:
    """Embed a fluid-node field into the domain-node index set (zero trace)."""
    values = np.asarray(values)
    if values.shape != (grid.n_fluid,):
        raise ValidationError(
            f"expected a field over {grid.n_fluid} fluid nodes, got shape {values.shape}"
        )
    out = np.zeros(grid.n_domain, dtype=values.dtype)
    out[grid.fluid_pos_in_domain] = values
    return out
