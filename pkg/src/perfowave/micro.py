"""Microscopic solver on the perforated domain.

Time-steps the Ito system

    du     = v dt
    dv     = (Lap u - u - v + sin u) dt + dW1          on fluid nodes
    ddelta = theta dt                                  on hole-boundary DOFs
    dtheta = (-theta/eps^2 - delta - v) dt + dW2       on hole-boundary DOFs

with homogeneous Dirichlet data on the outer boundary.  The hole coupling
delta_t = du/dn enters through a ghost closure of the discrete Laplacian:
at a fluid node P whose axis neighbor B lies on a hole face, the missing
value is u_B = u_P + h * theta_j with j the (B, face) DOF.  That closure
pairs the interior operator and the boundary DOFs exactly,

    <Lap_h u, w> = -E(u, w) + <theta, Tw>_boundary,

with E the edge-difference Dirichlet form and (Tw)_j = w at the adjacent
fluid node, so the pseudo-energy identity holds exactly for the
semi-discrete system and its residual measures pure time-discretization
error.

The scheme is semi-implicit Euler-Maruyama: every linear term implicit
(the theta/eps^2 relaxation makes explicit stepping require dt = O(eps^2)),
sin u and the noise explicit.  After eliminating theta, one symmetric
positive definite system in the new velocity is solved per step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import noise as noise_mod
from .errors import BlowUpError, ValidationError
from .geometry import (FLUID, HOLE_BOUNDARY, HOLE_INTERIOR, OUTER_BOUNDARY,
                       BoundaryDofMap, StructuredGrid)
from .linalg import conjugate_gradient

MAGNITUDE_GUARD = 1e12


@dataclass
class MicroState:
    """State (u, v) on fluid nodes and (delta, theta) on boundary DOFs."""

    t: float
    u: np.ndarray
    v: np.ndarray
    delta: np.ndarray
    theta: np.ndarray

    def copy(self) -> "MicroState":
        return MicroState(self.t, self.u.copy(), self.v.copy(),
                          self.delta.copy(), self.theta.copy())

    def check_finite(self, step=None):
        for name, arr in (("u", self.u), ("v", self.v),
                          ("delta", self.delta), ("theta", self.theta)):
            if arr.size and (not np.all(np.isfinite(arr)) or np.max(np.abs(arr)) > MAGNITUDE_GUARD):
                raise BlowUpError(f"non-finite or oversized {name} field",
                                  step=step, time=self.t)


def zero_state(grid: StructuredGrid, dofs: BoundaryDofMap) -> MicroState:
    return MicroState(0.0, np.zeros(grid.n_fluid), np.zeros(grid.n_fluid),
                      np.zeros(dofs.n_dofs), np.zeros(dofs.n_dofs))


@dataclass(frozen=True)
class MicroStepperConfig:
    """Time stepping parameters and recording options."""

    dt: float
    T: float
    implicit_laplacian: bool = True
    implicit_damping: bool = True
    implicit_boundary_stiffness: bool = True
    record_noise: bool = False
    snapshot_every: int = 0
    probe_every: int = 1
    solver_rtol: float = 1e-10
    solver_max_iter: int | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValidationError(f"horizon T={self.T} is not an integer number of steps of dt={self.dt}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


class MicroOperators:
    """Assembled spatial operators for one grid (independent of eps and dt).

    ``A``       fluid Laplacian with Dirichlet closure at the outer boundary
                and dropped edges at holes (csr, negative semidefinite);
    ``B``       boundary-flux coupling, (B theta)_P = sum over adjacent DOFs
                of theta_j / h (csr, n_fluid x n_dofs);
    ``bt_diag`` diagonal of B composed with the trace, used by the Schur
                complement of the implicit step.
    """

    def __init__(self, grid: StructuredGrid, dofs: BoundaryDofMap):
        self.grid = grid
        self.dofs = dofs
        d = grid.dim
        shape = grid.shape
        cls = grid.node_class
        nf = grid.n_fluid
        strides = np.array([int(np.prod(shape[a + 1:])) for a in range(d)], dtype=np.int64)

        dof_table = np.full((grid.n_nodes, d, 2), -1, dtype=np.int64)
        if dofs.n_dofs:
            dof_table[dofs.node_idx, dofs.axis, (dofs.sign + 1) // 2] = np.arange(dofs.n_dofs)

        rows, cols, vals = [], [], []
        diag = np.zeros(nf)
        crow, cdof, cval = [], [], []
        fluid_flat = grid.fluid_idx
        for a in range(d):
            inv_h2 = 1.0 / grid.h[a] ** 2
            inv_h = 1.0 / grid.h[a]
            for s in (1, -1):
                nbr = fluid_flat + s * strides[a]
                ncls = cls[nbr]
                m_fluid = ncls == FLUID
                m_outer = ncls == OUTER_BOUNDARY
                m_hole = ncls == HOLE_BOUNDARY
                if np.any(ncls == HOLE_INTERIOR):
                    raise ValidationError("fluid node adjacent to a hole interior; grid inconsistent")
                rows.append(grid.fluid_pos[fluid_flat[m_fluid]])
                cols.append(grid.fluid_pos[nbr[m_fluid]])
                vals.append(np.full(int(m_fluid.sum()), inv_h2))
                np.subtract.at(diag, grid.fluid_pos[fluid_flat[m_fluid | m_outer]], inv_h2)
                if np.any(m_hole):
                    j = dof_table[nbr[m_hole], a, (s + 1) // 2]
                    if np.any(j < 0):
                        raise ValidationError("missing boundary DOF for a hole-adjacent fluid node")
                    crow.append(grid.fluid_pos[fluid_flat[m_hole]])
                    cdof.append(j)
                    cval.append(np.full(j.size, inv_h))
        rows.append(np.arange(nf))
        cols.append(np.arange(nf))
        vals.append(diag)
        self.A = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nf, nf),
        )
        self.A.sum_duplicates()
        self.A.sort_indices()
        if cdof:
            self.B = sp.csr_matrix(
                (np.concatenate(cval), (np.concatenate(crow), np.concatenate(cdof))),
                shape=(nf, dofs.n_dofs),
            )
            self.bt_diag = np.bincount(np.concatenate(crow),
                                       weights=np.concatenate(cval), minlength=nf)
        else:
            self.B = sp.csr_matrix((nf, max(dofs.n_dofs, 0)))
            self.bt_diag = np.zeros(nf)

        self.vol_w = grid.volume_weight
        self.fluid_coords = grid.node_coords(grid.fluid_idx)
        self.trace_pos = dofs.fluid_pos  # (T w)_j = w[trace_pos[j]]

    # -- inner products and quadratic forms ---------------------------------
    def ip_fluid(self, x, y) -> float:
        return self.vol_w * float(x @ y)

    def ip_boundary(self, x, y) -> float:
        if x.size == 0:
            return 0.0
        return float((self.dofs.weight * x) @ y)

    def dirichlet_form(self, u, w) -> float:
        """Discrete grad-grad form E(u, w) = -<A u, w> with h^d weights."""
        return -self.vol_w * float(w @ (self.A @ u))

    def trace(self, w: np.ndarray) -> np.ndarray:
        return w[self.trace_pos] if self.trace_pos.size else np.zeros(0)


_ops_cache: dict = {}


def operators_for(grid: StructuredGrid, dofs: BoundaryDofMap) -> MicroOperators:
    ops = _ops_cache.get(grid.cache_token)
    if ops is None:
        ops = MicroOperators(grid, dofs)
        _ops_cache[grid.cache_token] = ops
    return ops


def apply_generator(state: MicroState, grid: StructuredGrid,
                    dofs: BoundaryDofMap, eps: float) -> MicroState:
    """Drift of the Ito system at the given state (no noise)."""
    ops = operators_for(grid, dofs)
    du = state.v.copy()
    dv = ops.A @ state.u + ops.B @ state.theta - state.u - state.v + np.sin(state.u)
    ddelta = state.theta.copy()
    dtheta = -state.theta / eps ** 2 - state.delta - ops.trace(state.v)
    return MicroState(state.t, du, dv, ddelta, dtheta)


# -- pseudo-state machinery --------------------------------------------------

def pseudo_transform(state: MicroState, r: float) -> MicroState:
    """Shifted variables (u, v + r u, delta, theta + r delta); r = 0 is the identity."""
    if not 0.0 <= r < 1.0:
        raise ValidationError(f"pseudo parameter r must lie in [0,1), got {r}")
    return MicroState(state.t, state.u.copy(), state.v + r * state.u,
                      state.delta.copy(), state.theta + r * state.delta)


def pseudo_transform_inverse(pstate: MicroState, r: float) -> MicroState:
    return MicroState(pstate.t, pstate.u.copy(), pstate.v - r * pstate.u,
                      pstate.delta.copy(), pstate.theta - r * pstate.delta)


def pseudo_energy(pstate: MicroState, r: float, eps: float,
                  grid: StructuredGrid, dofs: BoundaryDofMap) -> float:
    """Pseudo energy of a transformed state.

    All seven terms: |v_r|^2 + E(u,u) + (1-r+r^2)|u|^2 + |theta_r|^2
    + (1 - r/eps^2 + r^2)|delta|^2 + 4|cos(u/2)|^2 + 2r<u, delta>_boundary.
    The delta coefficient is computed as written and may be negative for
    r > eps^2.
    """
    ops = operators_for(grid, dofs)
    u, vr, delta, thr = pstate.u, pstate.v, pstate.delta, pstate.theta
    cos_half = np.cos(u / 2.0)
    return (
        ops.ip_fluid(vr, vr)
        + ops.dirichlet_form(u, u)
        + (1.0 - r + r * r) * ops.ip_fluid(u, u)
        + ops.ip_boundary(thr, thr)
        + (1.0 - r / eps ** 2 + r * r) * ops.ip_boundary(delta, delta)
        + 4.0 * ops.ip_fluid(cos_half, cos_half)
        + 2.0 * r * ops.ip_boundary(ops.trace(u), delta)
    )


def pseudo_norm_sq(state: MicroState, r: float, grid: StructuredGrid,
                   dofs: BoundaryDofMap) -> float:
    """Squared state-space norm of the pseudo state U_r (H^1 x L2 x L2 x L2)."""
    ops = operators_for(grid, dofs)
    vr = state.v + r * state.u
    thr = state.theta + r * state.delta
    return (ops.dirichlet_form(state.u, state.u) + ops.ip_fluid(state.u, state.u)
            + ops.ip_fluid(vr, vr) + ops.ip_boundary(state.delta, state.delta)
            + ops.ip_boundary(thr, thr))


def estimate_trace_constant(grid: StructuredGrid, dofs: BoundaryDofMap,
                            n_fields: int = 20, seed: int = 0) -> float:
    """Discrete trace constant: max of |Tf|^2_boundary / |f|^2_H1 over random smooth fields."""
    if dofs.n_dofs == 0:
        return 0.0
    ops = operators_for(grid, dofs)
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 7001))))
    lo, hi = grid.box
    coords = ops.fluid_coords
    lengths = np.subtract(hi, lo)
    best = 0.0
    for _ in range(n_fields):
        f = np.zeros(grid.n_fluid)
        for _ in range(6):
            k = gen.integers(1, 4, size=grid.dim)
            amp = gen.standard_normal()
            term = np.full(grid.n_fluid, amp)
            for a in range(grid.dim):
                term = term * np.sin(k[a] * np.pi * (coords[:, a] - lo[a]) / lengths[a])
            f += term
        num = ops.ip_boundary(ops.trace(f), ops.trace(f))
        den = ops.dirichlet_form(f, f) + ops.ip_fluid(f, f)
        if den > 0:
            best = max(best, num / den)
    return math.sqrt(best)


@dataclass(frozen=True)
class PseudoParams:
    """Pseudo-transform parameter r together with the scale eps it is used at."""

    r: float
    eps: float

    def __post_init__(self):
        if not 0.0 <= self.r < 1.0:
            raise ValidationError(f"r must lie in [0,1), got {self.r}")

    def smallness_margin(self, trace_constant: float) -> float:
        """Margin of the smallness condition; must be positive for the moment bound."""
        r, c2 = self.r, trace_constant ** 2
        return min(
            1.0 - 2.0 * r,
            1.0 - 3.0 * r * c2,
            1.0 - r - r / self.eps ** 2 + r * r,
            1.0 - 2.0 * r - 6.0 * r * c2 + 2.0 * r * r,
            1.0 - r - r * c2 + r * r,
        )

    def check(self, grid: StructuredGrid, dofs: BoundaryDofMap, seed: int = 0) -> float:
        margin = self.smallness_margin(estimate_trace_constant(grid, dofs, seed=seed))
        if margin <= 0:
            warnings.warn(
                f"pseudo parameter r={self.r} violates the smallness condition "
                f"at eps={self.eps} (margin {margin:.3e}); moment bounds may not apply",
                stacklevel=2,
            )
        return margin


# -- stepper -----------------------------------------------------------------

class MicroStepper:
    """Semi-implicit Euler-Maruyama stepper bound to one grid, eps and dt."""

    def __init__(self, grid: StructuredGrid, dofs: BoundaryDofMap, eps: float,
                 config: MicroStepperConfig):
        if not 0.0 < eps < 1.0:
            raise ValidationError(f"eps must lie in (0,1), got {eps}")
        self.grid = grid
        self.dofs = dofs
        self.eps = float(eps)
        self.config = config
        self.ops = operators_for(grid, dofs)
        dt = config.dt
        L = config.implicit_laplacian
        Dm = config.implicit_damping
        S = config.implicit_boundary_stiffness
        self.c_theta = 1.0 + (dt / eps ** 2 + dt * dt) * S
        self._theta_exp_stiff = 0.0 if S else dt / eps ** 2
        if L:
            nf = grid.n_fluid
            M = ((1.0 + Dm * dt + dt * dt) * sp.identity(nf, format="csr")
                 + dt * dt * (-self.ops.A)
                 + sp.diags((dt * dt / self.c_theta) * self.ops.bt_diag, format="csr"))
            M = M.tocsr()
            M.sum_duplicates()
            M.sort_indices()
            self.M_v = M
            self.M_diag = M.diagonal()
        else:
            self.M_v = None
            self.v_scale = 1.0 + Dm * dt
        self._warm = None

    def step(self, state: MicroState, dW1: np.ndarray | None = None,
             dW2: np.ndarray | None = None, step_index: int | None = None) -> MicroState:
        """Advance one step; dW1/dW2 are increments on fluid nodes / boundary DOFs."""
        cfg = self.config
        dt = cfg.dt
        ops = self.ops
        u, v, delta, theta = state.u, state.v, state.delta, state.theta
        if dW1 is None:
            dW1 = 0.0
        if dW2 is None:
            dW2 = 0.0
        L, Dm, S = cfg.implicit_laplacian, cfg.implicit_damping, cfg.implicit_boundary_stiffness

        b_v = (v - dt * (0.0 if Dm else v)
               + dt * (ops.A @ u - u + np.sin(u))
               + (0.0 if L else dt * (ops.B @ theta))
               + dW1)
        b_theta = (theta - dt * delta - self._theta_exp_stiff * theta
                   - (0.0 if L else dt * ops.trace(v))
                   + dW2)

        if L:
            rhs = b_v + (dt / self.c_theta) * (ops.B @ b_theta)
            v_new, _ = conjugate_gradient(
                self.M_v, rhs, x0=self._warm, rtol=cfg.solver_rtol,
                max_iter=cfg.solver_max_iter, precond_diag=self.M_diag,
            )
            self._warm = v_new
            theta_new = (b_theta - dt * ops.trace(v_new)) / self.c_theta
        else:
            v_new = b_v / self.v_scale
            theta_new = b_theta / self.c_theta  # coupling already explicit in b_theta

        u_new = u + dt * v_new
        delta_new = delta + dt * theta_new
        out = MicroState(state.t + dt, u_new, v_new, delta_new, theta_new)
        out.check_finite(step=step_index)
        return out


_stepper_cache: dict = {}


def step(state: MicroState, config: MicroStepperConfig, samplers,
         grid: StructuredGrid, dofs: BoundaryDofMap, eps: float) -> MicroState:
    """One step drawing increments from (sampler_W1, sampler_W2); samplers may be None."""
    key = (grid.cache_token, eps, config)
    stepper = _stepper_cache.get(key)
    if stepper is None:
        stepper = MicroStepper(grid, dofs, eps, config)
        _stepper_cache[key] = stepper
    s1, s2 = samplers if samplers is not None else (None, None)
    dW1 = dW2 = None
    if s1 is not None:
        basis = noise_mod.basis_matrix(s1.spec, stepper.ops.fluid_coords)
        dW1 = s1.increment_on(s1.next_step, config.dt, basis)
        s1.next_step += 1
    if s2 is not None and dofs.n_dofs:
        basis = noise_mod.basis_matrix(s2.spec, dofs.coords)
        dW2 = s2.increment_on(s2.next_step, config.dt, basis)
        s2.next_step += 1
    return stepper.step(state, dW1, dW2)


# -- trajectories ------------------------------------------------------------

@dataclass
class Trajectory:
    """A micro run: initial state, the noise log, and recorded probes.

    The per-step increments suffice to replay the deterministic stepper
    bit-identically, which is how the energy-identity and weak-form checks
    recompute the path.
    """

    grid: StructuredGrid
    dofs: BoundaryDofMap
    eps: float
    config: MicroStepperConfig
    initial: MicroState
    dW1: np.ndarray | None  # (n_steps, n_fluid) or None for zero noise
    dW2: np.ndarray | None
    final: MicroState | None = None
    probes: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)
    probe_r: float = 0.0

    @property
    def n_steps(self) -> int:
        return self.config.n_steps

    def increments(self, n: int):
        dW1 = None if self.dW1 is None else self.dW1[n]
        dW2 = None if self.dW2 is None else self.dW2[n]
        return dW1, dW2

    def replay(self):
        """Yield (step_index, state_before, state_after) over the whole run."""
        stepper = MicroStepper(self.grid, self.dofs, self.eps, self.config)
        state = self.initial.copy()
        for n in range(self.n_steps):
            dW1, dW2 = self.increments(n)
            new = stepper.step(state, dW1, dW2, step_index=n)
            yield n, state, new
            state = new


def run_micro(grid: StructuredGrid, dofs: BoundaryDofMap, eps: float,
              config: MicroStepperConfig, state0: MicroState,
              sampler1=None, sampler2=None, *, probe_r: float = 0.0,
              keep_noise: bool | None = None) -> Trajectory:
    """Advance a full trajectory, recording noise increments and probes.

    ``keep_noise`` defaults to config.record_noise or whenever noise is on
    (the increments are required for identity replay).
    """
    stepper = MicroStepper(grid, dofs, eps, config)
    n_steps = config.n_steps
    if keep_noise is None:
        keep_noise = config.record_noise or sampler1 is not None or sampler2 is not None
    basis1 = (noise_mod.basis_matrix(sampler1.spec, stepper.ops.fluid_coords)
              if sampler1 is not None else None)
    basis2 = (noise_mod.basis_matrix(sampler2.spec, dofs.coords)
              if sampler2 is not None and dofs.n_dofs else None)
    dW1_log = np.zeros((n_steps, grid.n_fluid)) if keep_noise and sampler1 is not None else None
    dW2_log = np.zeros((n_steps, dofs.n_dofs)) if keep_noise and basis2 is not None else None

    probes = {"t": [], "energy": [], "pseudo_energy": [], "norm_u": [],
              "norm_v": [], "norm_delta": [], "norm_theta": [], "pseudo_norm_sq": []}

    def record(state):
        ops = stepper.ops
        probes["t"].append(state.t)
        probes["energy"].append(pseudo_energy(pseudo_transform(state, 0.0), 0.0, eps, grid, dofs))
        probes["pseudo_energy"].append(
            pseudo_energy(pseudo_transform(state, probe_r), probe_r, eps, grid, dofs))
        probes["norm_u"].append(math.sqrt(ops.ip_fluid(state.u, state.u)))
        probes["norm_v"].append(math.sqrt(ops.ip_fluid(state.v, state.v)))
        probes["norm_delta"].append(math.sqrt(ops.ip_boundary(state.delta, state.delta)))
        probes["norm_theta"].append(math.sqrt(ops.ip_boundary(state.theta, state.theta)))
        probes["pseudo_norm_sq"].append(pseudo_norm_sq(state, probe_r, grid, dofs))

    traj = Trajectory(grid, dofs, eps, config, state0.copy(), dW1_log, dW2_log,
                      probe_r=probe_r)
    state = state0.copy()
    record(state)
    if config.snapshot_every:
        traj.snapshots.append((0, state.copy()))
    for n in range(n_steps):
        dW1 = sampler1.increment_on(sampler1.next_step, config.dt, basis1) if sampler1 is not None else None
        if sampler1 is not None:
            sampler1.next_step += 1
        dW2 = None
        if basis2 is not None:
            dW2 = sampler2.increment_on(sampler2.next_step, config.dt, basis2)
            sampler2.next_step += 1
        if dW1_log is not None and dW1 is not None:
            dW1_log[n] = dW1
        if dW2_log is not None and dW2 is not None:
            dW2_log[n] = dW2
        state = stepper.step(state, dW1, dW2, step_index=n)
        if (n + 1) % config.probe_every == 0 or n + 1 == n_steps:
            record(state)
        if config.snapshot_every and ((n + 1) % config.snapshot_every == 0 or n + 1 == n_steps):
            traj.snapshots.append((n + 1, state.copy()))
    traj.final = state
    traj.probes = {k: np.asarray(vs) for k, vs in probes.items()}
    return traj


# -- verification functionals -------------------------------------------------

def energy_identity_residual(traj: Trajectory, r: float,
                             specs: tuple | None = None):
    """Both sides of the pathwise pseudo-energy identity along a trajectory.

    Returns (times, residuals) with residual = left - right per step time:
    left is E_r(t) - E_r(0); right collects the dissipation quadrature, the
    cross terms, the left-point stochastic integrals from the noise log,
    and t times the restricted traces of the two covariances.  The trace
    terms are the discrete quadratic-variation traces on fluid nodes and
    boundary DOFs; they vanish when the corresponding noise is off.

    ``specs``: (CovarianceSpec or None, CovarianceSpec or None) for W1, W2.
    Required when the trajectory carries noise.
    """
    grid, dofs, eps = traj.grid, traj.dofs, traj.eps
    ops = operators_for(grid, dofs)
    spec1, spec2 = specs if specs is not None else (None, None)
    if traj.dW1 is not None and spec1 is None:
        raise ValidationError("trajectory carries W1 noise; pass its CovarianceSpec")
    if traj.dW2 is not None and spec2 is None:
        raise ValidationError("trajectory carries W2 noise; pass its CovarianceSpec")
    tr1 = (noise_mod.discrete_trace(spec1, ops.fluid_coords, ops.vol_w)
           if traj.dW1 is not None else 0.0)
    tr2 = (noise_mod.discrete_trace(spec2, dofs.coords, dofs.weight)
           if traj.dW2 is not None and dofs.n_dofs else 0.0)

    dt = traj.config.dt
    e0 = pseudo_energy(pseudo_transform(traj.initial, r), r, eps, grid, dofs)
    times = [traj.initial.t]
    residuals = [0.0]
    acc = 0.0
    for n, state, new in traj.replay():
        u, delta = state.u, state.delta
        vr = state.v + r * u
        thr = state.theta + r * delta
        tu = ops.trace(u)
        diss = (2.0 * (1.0 - r) * ops.ip_fluid(vr, vr)
                + 2.0 * r * ops.dirichlet_form(u, u)
                + 2.0 * r * (1.0 - r + r * r) * ops.ip_fluid(u, u)
                + 2.0 * (1.0 / eps ** 2 - r) * ops.ip_boundary(thr, thr)
                + 2.0 * (1.0 - r / eps ** 2 + r * r) * r * ops.ip_boundary(delta, delta))
        cross = (2.0 * r * ops.ip_fluid(u, np.sin(u))
                 + 4.0 * r * ops.ip_boundary(tu, thr)
                 - 4.0 * r * r * ops.ip_boundary(tu, delta))
        dW1, dW2 = traj.increments(n)
        stoch = 0.0
        if dW1 is not None:
            stoch += 2.0 * ops.ip_fluid(vr, dW1)
        if dW2 is not None:
            stoch += 2.0 * ops.ip_boundary(thr, dW2)
        acc += dt * (cross - diss) + stoch
        e_t = pseudo_energy(pseudo_transform(new, r), r, eps, grid, dofs)
        t_new = new.t
        right = acc + (t_new - traj.initial.t) * (tr1 + tr2)
        times.append(t_new)
        residuals.append(e_t - e0 - right)
    return np.asarray(times), np.asarray(residuals)


@dataclass(frozen=True)
class SpaceTimeProbe:
    """Smooth test function phi(t, x) with analytic time derivatives."""

    value: callable  # (t, coords (n,d)) -> (n,)
    dt: callable
    dtt: callable


def weak_residual(traj: Trajectory, probe: SpaceTimeProbe) -> float:
    """Signed sum of the variational-form integrals along a trajectory.

    Time derivatives are moved onto the (compactly supported) test function:
    integrals of u_tt phi become u phi_tt and so on.  The test function must
    vanish on hole closures and the outer boundary; a nonzero value there is
    a validation error.
    """
    grid, dofs, eps = traj.grid, traj.dofs, traj.eps
    ops = operators_for(grid, dofs)
    cfg = traj.config
    dt = cfg.dt
    n_steps = cfg.n_steps

    non_fluid = np.flatnonzero(grid.node_class != FLUID)
    check_coords = grid.node_coords(non_fluid)
    sample_times = [0.0, cfg.T / 3.0, cfg.T / 2.0, cfg.T]
    scale = 0.0
    for t in sample_times:
        scale = max(scale, float(np.max(np.abs(probe.value(t, ops.fluid_coords)))), 1e-300)
    for t in sample_times:
        if np.max(np.abs(probe.value(t, check_coords))) > 1e-12 * scale:
            raise ValidationError("test function support touches a hole or the outer boundary")
    for t in (0.0, cfg.T):
        if np.max(np.abs(probe.value(t, ops.fluid_coords))) > 1e-12 * scale:
            raise ValidationError("test function must vanish at t=0 and t=T")

    lhs = 0.0
    rhs = 0.0

    def lhs_at(state):
        t = state.t
        phi = probe.value(t, ops.fluid_coords)
        phi_t = probe.dt(t, ops.fluid_coords)
        phi_tt = probe.dtt(t, ops.fluid_coords)
        phi_b = probe.value(t, dofs.coords) if dofs.n_dofs else np.zeros(0)
        phi_b_t = probe.dt(t, dofs.coords) if dofs.n_dofs else np.zeros(0)
        phi_b_tt = probe.dtt(t, dofs.coords) if dofs.n_dofs else np.zeros(0)
        u, delta = state.u, state.delta
        val = (ops.ip_fluid(u, phi_tt)          # u_tt phi
               - ops.ip_fluid(u, phi_t)         # u_t phi
               + ops.dirichlet_form(u, phi)     # grad u . grad phi
               + ops.ip_fluid(u, phi)           # u phi
               - ops.ip_fluid(np.sin(u), phi))  # -sin(u) phi
        val += eps ** 2 * ops.ip_boundary(delta, phi_b_tt)   # eps^2 delta_tt phi
        val += eps ** 2 * ops.ip_boundary(delta, phi_b)      # eps^2 delta phi
        # right-hand side -eps^2 u_t phi moved onto phi_t
        rhs_det = eps ** 2 * ops.ip_boundary(ops.trace(u), phi_b_t)
        return val, rhs_det

    # trapezoid in time over step boundaries; left-point stochastic sums
    weights = np.full(n_steps + 1, dt)
    weights[0] = weights[-1] = dt / 2.0
    val0, rhs0 = lhs_at(traj.initial)
    lhs += weights[0] * val0
    rhs += weights[0] * rhs0
    for n, state, new in traj.replay():
        dW1, dW2 = traj.increments(n)
        if dW1 is not None:
            rhs += ops.ip_fluid(probe.value(state.t, ops.fluid_coords), dW1)
        if dW2 is not None and dofs.n_dofs:
            rhs += eps ** 2 * ops.ip_boundary(probe.value(state.t, dofs.coords), dW2)
        val, rhs_det = lhs_at(new)
        lhs += weights[n + 1] * val
        rhs += weights[n + 1] * rhs_det
    return lhs - rhs


def moment_monitor(trajectories, r: float):
    """Ensemble mean of the squared pseudo-state norm over time.

    Uses the per-path probe series when they were recorded at the same r,
    otherwise replays the noise log.
    """
    if len(trajectories) < 2:
        raise ValidationError("moment monitor needs at least two paths")
    series = []
    times = None
    for traj in trajectories:
        if traj.probes and traj.probe_r == r and "pseudo_norm_sq" in traj.probes:
            t = traj.probes["t"]
            s = traj.probes["pseudo_norm_sq"]
        else:
            ts = [traj.initial.t]
            vals = [pseudo_norm_sq(traj.initial, r, traj.grid, traj.dofs)]
            for _, _, new in traj.replay():
                ts.append(new.t)
                vals.append(pseudo_norm_sq(new, r, traj.grid, traj.dofs))
            t, s = np.asarray(ts), np.asarray(vals)
        if times is None:
            times = t
        elif t.shape != times.shape or not np.allclose(t, times):
            raise ValidationError("trajectories have mismatched probe time grids")
        series.append(s)
    return times, np.mean(np.stack(series, axis=0), axis=0)
