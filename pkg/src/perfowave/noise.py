"""Trace-class Q-Wiener processes via truncated Karhunen-Loeve expansions.

The common orthonormal basis is the Dirichlet-Laplacian sine eigenbasis of
the outer box, L2-normalized, so discrete orthonormality under the uniform
h^d node quadrature is exact for every sub-Nyquist mode.  Increment
sampling is counter-based: the normals for (seed, path, process, step) are
generated from their own Philox key, so parallel paths and replays never
share generator state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError
from .geometry import BoundaryDofMap, StructuredGrid


def mode_indices(dim: int, count: int) -> tuple:
    """First ``count`` sine multi-indices, ordered by |k|^2 then lexicographically."""
    # generate a cube large enough to contain the first `count` modes
    side = max(2, int(math.ceil(count ** (1.0 / dim))) + 2)
    while side ** dim < count:
        side += 1
    grids = np.meshgrid(*[np.arange(1, side + 1)] * dim, indexing="ij")
    ks = np.stack([g.reshape(-1) for g in grids], axis=1)
    order = np.lexsort(tuple(ks[:, a] for a in reversed(range(dim))) + ((ks ** 2).sum(axis=1),))
    return tuple(tuple(int(x) for x in ks[i]) for i in order[:count])


@dataclass(frozen=True)
class CovarianceSpec:
    """Covariance of one Q-Wiener process: eigenvalues on the sine eigenbasis."""

    box: tuple
    alphas: tuple
    modes: tuple

    def __post_init__(self):
        if len(self.alphas) != len(self.modes):
            raise ConfigurationError("one eigenvalue per mode required")
        if any(a < 0 for a in self.alphas):
            raise ConfigurationError("covariance eigenvalues must be nonnegative")

    @classmethod
    def from_power_law(cls, box, c: float, gamma: float, modes: int) -> "CovarianceSpec":
        """Eigenvalue rule alpha_i = c * i^(-gamma); trace-class needs gamma > 1."""
        if c < 0:
            raise ConfigurationError(f"noise amplitude c must be >= 0, got {c}")
        if gamma <= 1:
            raise ConfigurationError(f"noise decay gamma must exceed 1, got {gamma}")
        dim = len(box[0])
        alphas = tuple(c * float(i) ** (-gamma) for i in range(1, modes + 1))
        return cls(box=_freeze_box(box), alphas=alphas, modes=mode_indices(dim, modes))

    @classmethod
    def from_alphas(cls, box, alphas) -> "CovarianceSpec":
        dim = len(box[0])
        alphas = tuple(float(a) for a in alphas)
        return cls(box=_freeze_box(box), alphas=alphas, modes=mode_indices(dim, len(alphas)))

    @property
    def n_modes(self) -> int:
        return len(self.alphas)

    @property
    def dim(self) -> int:
        return len(self.box[0])


def _freeze_box(box) -> tuple:
    return (tuple(float(x) for x in box[0]), tuple(float(x) for x in box[1]))


def trace(spec: CovarianceSpec) -> float:
    """Tr Q = sum of the truncated eigenvalues, computed exactly as a finite sum."""
    return math.fsum(spec.alphas)


def basis_matrix(spec: CovarianceSpec, points: np.ndarray) -> np.ndarray:
    """Evaluate the L2(D)-normalized sine eigenfunctions, shape (n_modes, n_points)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lo = np.asarray(spec.box[0])
    hi = np.asarray(spec.box[1])
    lengths = hi - lo
    rel = (points - lo) / lengths
    out = np.ones((spec.n_modes, points.shape[0]))
    ks = np.asarray(spec.modes)
    for a in range(spec.dim):
        out *= math.sqrt(2.0 / lengths[a]) * np.sin(np.pi * np.outer(ks[:, a], rel[:, a]))
    return out


def discrete_trace(spec: CovarianceSpec, points: np.ndarray, weights) -> float:
    """Trace of Q restricted to a quadrature set: sum_i alpha_i * ||e_i||^2_w."""
    e = basis_matrix(spec, points)
    norms = (e ** 2) @ np.broadcast_to(np.asarray(weights, float), (e.shape[1],))
    return float(np.asarray(spec.alphas) @ norms)


_grid_basis_cache: dict = {}


def grid_basis(spec: CovarianceSpec, grid: StructuredGrid) -> np.ndarray:
    """Cached basis evaluation on every node of a grid."""
    key = (spec, grid.cache_token)
    mat = _grid_basis_cache.get(key)
    if mat is None:
        mat = basis_matrix(spec, grid.all_coords())
        mat.setflags(write=False)
        _grid_basis_cache[key] = mat
    return mat


def clear_basis_cache():
    _grid_basis_cache.clear()


class WienerSampler:
    """Increment generator for one (path, process) stream of a Q-Wiener process.

    The normals for step n are a pure function of
    (master seed, path index, process index, n); the instance only tracks
    the next step number for the stateful convenience API.
    """

    def __init__(self, spec: CovarianceSpec, seed: int, path: int = 0, process: int = 1):
        if seed < 0 or path < 0 or process < 0:
            raise ConfigurationError("seed, path and process indices must be nonnegative")
        self.spec = spec
        self.seed = int(seed)
        self.path = int(path)
        self.process = int(process)
        self._sqrt_alphas = np.sqrt(np.asarray(spec.alphas))
        self.next_step = 0

    def normals(self, step: int) -> np.ndarray:
        """Standard normals xi_i for the given step, bit-reproducible."""
        seq = np.random.SeedSequence((self.seed, self.path, self.process, int(step)))
        gen = np.random.Generator(np.random.Philox(seq))
        return gen.standard_normal(self.spec.n_modes)

    def mode_increments(self, step: int, dt: float) -> np.ndarray:
        """KL coefficients sqrt(alpha_i * dt) * xi_i of the step increment."""
        if dt <= 0:
            raise ValidationError(f"dt must be positive, got {dt}")
        return self._sqrt_alphas * math.sqrt(dt) * self.normals(step)

    def increment_on(self, step: int, dt: float, basis: np.ndarray) -> np.ndarray:
        """Increment field on a fixed point set given its basis matrix."""
        return self.mode_increments(step, dt) @ basis

    def reset(self, step: int = 0):
        self.next_step = int(step)


def sample_increment(sampler: WienerSampler, dt: float, grid: StructuredGrid) -> np.ndarray:
    """Draw the next Wiener increment as a field on every node of the grid.

    Consumes the sampler's step counter; re-running a freshly constructed
    sampler with the same (seed, path, process) reproduces the sequence
    bit-identically.
    """
    basis = grid_basis(sampler.spec, grid)
    out = sampler.increment_on(sampler.next_step, dt, basis)
    sampler.next_step += 1
    return out


def restrict(field: np.ndarray, grid: StructuredGrid, target: str,
             dofs: BoundaryDofMap | None = None) -> np.ndarray:
    """Copy a full-grid field onto fluid nodes or hole-boundary DOFs."""
    field = np.asarray(field)
    if field.shape != (grid.n_nodes,):
        raise ValidationError(f"expected a full-grid field of length {grid.n_nodes}")
    if target == "fluid":
        return field[grid.fluid_idx]
    if target == "boundary":
        if dofs is None:
            raise ValidationError("boundary restriction needs the BoundaryDofMap")
        return field[dofs.node_idx]
    raise ValidationError(f"unknown restriction target {target!r}")
