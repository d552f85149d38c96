"""P1 finite elements and Crank-Nicolson time stepping on disk meshes.

Covers the forward parabolic problems (Neumann and Dirichlet variants, with
conductivity, potential and power-law potential inhomogeneities) and the
backward dual problem solved with reversed time.  All assembled operators are
exactly symmetric; within a step the nonlinear reaction weight is frozen at
the previous time level so every step is one symmetric sparse solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .mesh import Mesh, TransferOps, boundary_vertex_weights, prolong

CONDUCTIVITY = "conductivity"
POTENTIAL = "potential"
POWER_POTENTIAL = "power_potential"

_KINDS = (CONDUCTIVITY, POTENTIAL, POWER_POTENTIAL)


class FemError(RuntimeError):
    """Assembly or linear-solve failure."""


@dataclass(frozen=True)
class InhomogeneityOp:
    """How one component of the inhomogeneity enters the equation.

    ``conductivity`` perturbs the diffusion coefficient (1 + u), ``potential``
    adds a zeroth-order term u*y, and ``power_potential`` adds u*|y|^(p-2)*y.
    """

    kind: str
    component: int = 0
    power: float = 2.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown inhomogeneity kind {self.kind!r}")
        if self.kind == POWER_POTENTIAL and self.power < 2.0:
            raise ValueError("power_potential requires power >= 2")


@dataclass(frozen=True)
class SegmentGrid:
    """Uniform time grid on one segment; ``steps * dt`` spans it exactly."""

    t_start: float
    t_end: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("a segment needs at least one step")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.steps

    @property
    def num_times(self) -> int:
        return self.steps + 1

    def times(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.steps + 1)


def segment_grid(t_start: float, t_end: float, dt: float) -> SegmentGrid:
    """Grid from a step size that must partition the interval exactly."""
    span = t_end - t_start
    steps = round(span / dt)
    if steps < 1 or abs(steps * dt - span) > 1e-9 * max(span, dt):
        raise ValueError(f"dt={dt} does not partition [{t_start}, {t_end}]")
    return SegmentGrid(t_start, t_end, steps)


@dataclass
class BoundaryTrace:
    """Values over the boundary vertices at strictly increasing times."""

    times: np.ndarray       # (n,)
    values: np.ndarray      # (n, B)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trace times must be strictly increasing")
        if self.values.shape[0] != self.times.shape[0]:
            raise ValueError("one value row per time instant required")


@dataclass
class Trajectory:
    """One nodal field per time node of a segment grid."""

    grid: SegmentGrid
    values: np.ndarray      # (steps + 1, V)


def assemble_mass(mesh: Mesh) -> sparse.csr_array:
    """Consistent P1 mass matrix."""
    if np.any(mesh.cell_areas <= 0):
        raise FemError("mesh contains a degenerate (zero-area) triangle")
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    data = mesh.cell_areas[:, None, None] * local
    return _scatter(mesh, data)


def assemble_stiffness(mesh: Mesh, coefficient: np.ndarray) -> sparse.csr_array:
    """P1 stiffness matrix with a piecewise-constant coefficient."""
    coefficient = np.asarray(coefficient, dtype=float)
    if coefficient.min() <= 0:
        raise FemError(f"nonpositive diffusion coefficient "
                       f"(min {coefficient.min():.3e}) violates ellipticity")
    g = mesh.basis_gradients
    local = np.einsum("tid,tjd->tij", g, g)
    data = (coefficient * mesh.cell_areas)[:, None, None] * local
    return _scatter(mesh, data)


def assemble_reaction(mesh: Mesh, weight: np.ndarray) -> sparse.csr_array:
    """Cellwise-weighted P1 mass matrix (zeroth-order term)."""
    weight = np.asarray(weight, dtype=float)
    if not np.all(np.isfinite(weight)):
        raise FemError("reaction weight must be finite")
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    data = (weight * mesh.cell_areas)[:, None, None] * local
    return _scatter(mesh, data)


def _scatter(mesh: Mesh, cell_blocks: np.ndarray) -> sparse.csr_array:
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.num_vertices
    mat = sparse.csr_array((cell_blocks.ravel(), (rows, cols)), shape=(n, n))
    mat.sum_duplicates()
    return mat


def assemble_neumann_load(mesh: Mesh, flux: np.ndarray) -> np.ndarray:
    """Load vector of a boundary flux given at the boundary vertices.

    ``flux`` is ordered like ``mesh.boundary_vertices``; edge ``i`` runs from
    boundary vertex ``i`` to ``i + 1`` (cyclically) by construction.
    """
    flux = np.asarray(flux, dtype=float)
    gi = flux
    gj = np.roll(flux, -1)
    lens = mesh.boundary_edge_lengths
    load = np.zeros(mesh.num_vertices)
    np.add.at(load, mesh.boundary_edges[:, 0], lens / 6.0 * (2.0 * gi + gj))
    np.add.at(load, mesh.boundary_edges[:, 1], lens / 6.0 * (gi + 2.0 * gj))
    return load


def assemble_cell_load(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Load vector of a cell field source (one third of the cell integral
    to each corner)."""
    values = np.asarray(values, dtype=float)
    load = np.zeros(mesh.num_vertices)
    contrib = values * mesh.cell_areas / 3.0
    for c in range(3):
        np.add.at(load, mesh.triangles[:, c], contrib)
    return load


def _resolve_u(u, ops, mesh: Mesh, transfer: TransferOps | None):
    """Normalize the inhomogeneity argument to fine (L, T) arrays or a sampler."""
    n_comp = len(ops)
    if u is None:
        return np.zeros((n_comp, mesh.num_cells)), None
    if callable(u):
        def sample(t: float) -> np.ndarray:
            return _to_fine(np.asarray(u(t), dtype=float), n_comp, mesh, transfer)
        return None, sample
    return _to_fine(np.asarray(u, dtype=float), n_comp, mesh, transfer), None


def _to_fine(arr: np.ndarray, n_comp: int, mesh: Mesh,
             transfer: TransferOps | None) -> np.ndarray:
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[0] != n_comp:
        raise FemError(f"expected {n_comp} inhomogeneity components, "
                       f"got {arr.shape[0]}")
    if arr.shape[1] == mesh.num_cells:
        return arr
    if transfer is not None and arr.shape[1] == transfer.num_coarse:
        return prolong(arr, transfer)
    raise FemError(f"inhomogeneity has {arr.shape[1]} cells; expected "
                   f"{mesh.num_cells} (or a coarse field plus transfer ops)")


def _split_ops(u_fine: np.ndarray, ops) -> tuple[np.ndarray, np.ndarray, list]:
    """Diffusion coefficient, linear reaction weight, and lagged power terms."""
    coeff = np.ones(u_fine.shape[1])
    react = np.zeros(u_fine.shape[1])
    lagged = []
    for op in ops:
        comp = u_fine[op.component]
        if op.kind == CONDUCTIVITY:
            coeff = coeff + comp
        elif op.kind == POTENTIAL:
            react = react + comp
        else:
            lagged.append((comp, op.power))
    return coeff, react, lagged


def _lagged_weight(mesh: Mesh, lagged, y: np.ndarray) -> np.ndarray:
    w = np.zeros(mesh.num_cells)
    ybar = y[mesh.triangles].mean(axis=1)
    for comp, power in lagged:
        w += comp * np.abs(ybar) ** (power - 2.0)
    return w


def _linear_system(mesh: Mesh, mass: sparse.csr_array, k_mat: sparse.csr_array,
                   dt: float):
    s_plus = (mass / dt + 0.5 * k_mat).tocsc()
    s_minus = (mass / dt - 0.5 * k_mat).tocsr()
    try:
        lu = splu(s_plus)
    except RuntimeError as exc:
        raise FemError(f"sparse factorization failed: {exc}") from exc
    return lu, s_minus


def _check_solution(y: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise FemError("linear solve produced non-finite values")
    return y


def _be_startup(lu, mass, dt, y0, load_half, load_full):
    """Two backward-Euler half steps replacing the first Crank-Nicolson step.

    Damps the weakly decaying high-frequency transients that plain
    Crank-Nicolson would carry through the march (Rannacher startup); the
    half-step operator 2M/dt + K is exactly twice the Crank-Nicolson matrix,
    so the already-factorized system is reused.
    """
    scale = 2.0 / dt
    y_half = _check_solution(lu.solve(0.5 * (scale * (mass @ y0) + load_half)))
    return _check_solution(lu.solve(0.5 * (scale * (mass @ y_half) + load_full)))


def forward_solve(mesh: Mesh, grid: SegmentGrid, u, ops, f, g,
                  init: np.ndarray, transfer: TransferOps | None = None,
                  picard_sweeps: int = 0, rannacher: bool = True) -> Trajectory:
    """Crank-Nicolson march of the Neumann problem over one segment.

    ``u`` may be None, a (coarse or fine) cell field constant in time, or a
    sampler ``t -> field`` evaluated at step midpoints.  ``f`` and ``g`` are
    samplers for the interior source (cell field) and the boundary flux
    (boundary-vertex values); either may be None.  The first step defaults to
    two backward-Euler half steps to keep second-order accuracy for rough
    starting data.
    """
    u_const, u_sample = _resolve_u(u, ops, mesh, transfer)
    mass = assemble_mass(mesh)
    dt = grid.dt
    values = np.empty((grid.num_times, mesh.num_vertices))
    values[0] = _check_init(init, mesh)

    static = u_sample is None and not any(
        op.kind == POWER_POTENTIAL for op in ops)
    lu = s_minus = None
    if static:
        coeff, react, _ = _split_ops(u_const, ops)
        k_mat = assemble_stiffness(mesh, coeff) + assemble_reaction(mesh, react)
        lu, s_minus = _linear_system(mesh, mass, k_mat, dt)

    times = grid.times()
    for k in range(grid.steps):
        t_mid = times[k] + 0.5 * dt
        startup = rannacher and k == 0
        if static:
            if startup:
                values[1] = _be_startup(lu, mass, dt, values[0],
                                        _load_at(mesh, f, g, times[0] + 0.5 * dt),
                                        _load_at(mesh, f, g, times[1]))
            else:
                rhs = s_minus @ values[k] + _load_at(mesh, f, g, t_mid)
                values[k + 1] = _check_solution(lu.solve(rhs))
            continue
        u_fine = u_sample(t_mid) if u_sample is not None else u_const
        coeff, react, lagged = _split_ops(u_fine, ops)
        y_prev = values[k]

        def advance(weight):
            k_mat = assemble_stiffness(mesh, coeff) + \
                assemble_reaction(mesh, weight)
            lu_k, s_minus_k = _linear_system(mesh, mass, k_mat, dt)
            if startup:
                return _be_startup(lu_k, mass, dt, y_prev,
                                   _load_at(mesh, f, g, times[0] + 0.5 * dt),
                                   _load_at(mesh, f, g, times[1]))
            return _check_solution(
                lu_k.solve(s_minus_k @ y_prev + _load_at(mesh, f, g, t_mid)))

        y_new = advance(react + _lagged_weight(mesh, lagged, y_prev))
        for _ in range(picard_sweeps if lagged else 0):
            y_next = advance(react + _lagged_weight(
                mesh, lagged, 0.5 * (y_prev + y_new)))
            done = np.linalg.norm(y_next - y_new) <= 1e-8 * max(
                np.linalg.norm(y_new), 1e-30)
            y_new = y_next
            if done:
                break
        values[k + 1] = y_new
    return Trajectory(grid, values)


def _check_init(init: np.ndarray, mesh: Mesh) -> np.ndarray:
    init = np.asarray(init, dtype=float)
    if init.shape != (mesh.num_vertices,):
        raise FemError("initial field does not match the mesh")
    return init


def _load_at(mesh: Mesh, f, g, t: float) -> np.ndarray:
    load = np.zeros(mesh.num_vertices)
    if f is not None:
        load += assemble_cell_load(mesh, f(t))
    if g is not None:
        load += assemble_neumann_load(mesh, g(t))
    return load


def dirichlet_solve(mesh: Mesh, grid: SegmentGrid, u, ops, f,
                    trace_values: np.ndarray, init: np.ndarray,
                    transfer: TransferOps | None = None,
                    rannacher: bool = True) -> Trajectory:
    """Crank-Nicolson march with the boundary rows pinned to measured values.

    ``trace_values`` holds one row per grid time node over the boundary
    vertices (callers interpolate measurements onto the grid).  Boundary rows
    and columns are eliminated symmetrically, so the factorized interior
    block stays symmetric.
    """
    trace_values = np.asarray(trace_values, dtype=float)
    if trace_values.shape != (grid.num_times, mesh.num_boundary_vertices):
        raise FemError("trace does not cover the segment's time nodes")
    u_const, u_sample = _resolve_u(u, ops, mesh, transfer)
    mass = assemble_mass(mesh)
    dt = grid.dt
    bnd = mesh.boundary_vertices
    interior = np.setdiff1d(np.arange(mesh.num_vertices), bnd)
    m_int = mass[interior, :].tocsr()

    values = np.empty((grid.num_times, mesh.num_vertices))
    values[0] = _check_init(init, mesh)

    static = u_sample is None and not any(
        op.kind == POWER_POTENTIAL for op in ops)

    def build(u_fine, y_prev):
        coeff, react, lagged = _split_ops(u_fine, ops)
        weight = react + _lagged_weight(mesh, lagged, y_prev)
        k_mat = assemble_stiffness(mesh, coeff) + assemble_reaction(mesh, weight)
        s_plus = (mass / dt + 0.5 * k_mat).tocsr()
        s_minus = (mass / dt - 0.5 * k_mat).tocsr()
        s_pi = s_plus[interior, :].tocsr()
        s_ii = s_pi[:, interior].tocsc()
        s_ib = s_pi[:, bnd].tocsr()
        try:
            lu = splu(s_ii)
        except RuntimeError as exc:
            raise FemError(f"sparse factorization failed: {exc}") from exc
        return lu, s_ib, s_minus

    def be_half(lu, s_ib, y_prev, t_sub, trace_sub):
        # (2M/dt + K)_II = 2 * S_plus_II, so reuse the factorization
        rhs = (2.0 / dt) * (m_int @ y_prev)
        if f is not None:
            rhs = rhs + assemble_cell_load(mesh, f(t_sub))[interior]
        y = np.empty(mesh.num_vertices)
        y[bnd] = trace_sub
        y[interior] = _check_solution(lu.solve(0.5 * rhs - s_ib @ trace_sub))
        return y

    if static:
        lu, s_ib, s_minus = build(u_const, values[0])
    times = grid.times()
    for k in range(grid.steps):
        if not static:
            u_fine = u_sample(times[k] + 0.5 * dt) if u_sample is not None \
                else u_const
            lu, s_ib, s_minus = build(u_fine, values[k])
        if rannacher and k == 0:
            tr_half = 0.5 * (trace_values[0] + trace_values[1])
            y_half = be_half(lu, s_ib, values[0], times[0] + 0.5 * dt, tr_half)
            values[1] = be_half(lu, s_ib, y_half, times[1], trace_values[1])
            continue
        rhs = s_minus @ values[k]
        if f is not None:
            rhs += assemble_cell_load(mesh, f(times[k] + 0.5 * dt))
        y_new = np.empty(mesh.num_vertices)
        y_new[bnd] = trace_values[k + 1]
        y_new[interior] = _check_solution(
            lu.solve(rhs[interior] - s_ib @ trace_values[k + 1]))
        values[k + 1] = y_new
    return Trajectory(grid, values)


def backward_adjoint_solve(mesh: Mesh, grid: SegmentGrid,
                           flux_values: np.ndarray,
                           rannacher: bool = True) -> Trajectory:
    """Backward heat equation with Neumann flux data and zero terminal value.

    Solved as a forward Crank-Nicolson march in the reversed time
    tau = t_end - t, then flipped back, so the returned trajectory is indexed
    by the original time nodes and vanishes at ``t_end``.
    """
    flux_values = np.asarray(flux_values, dtype=float)
    if flux_values.shape != (grid.num_times, mesh.num_boundary_vertices):
        raise FemError("flux does not cover the segment's time nodes")
    mass = assemble_mass(mesh)
    k_mat = assemble_stiffness(mesh, np.ones(mesh.num_cells))
    lu, s_minus = _linear_system(mesh, mass, k_mat, grid.dt)
    rev = flux_values[::-1]
    z = np.zeros((grid.num_times, mesh.num_vertices))
    for k in range(grid.steps):
        if rannacher and k == 0:
            z[1] = _be_startup(lu, mass, grid.dt, z[0],
                               assemble_neumann_load(mesh, 0.5 * (rev[0] + rev[1])),
                               assemble_neumann_load(mesh, rev[1]))
            continue
        half = 0.5 * (rev[k] + rev[k + 1])
        rhs = s_minus @ z[k] + assemble_neumann_load(mesh, half)
        z[k + 1] = _check_solution(lu.solve(rhs))
    return Trajectory(grid, z[::-1].copy())


def boundary_trace(traj: Trajectory, mesh: Mesh) -> BoundaryTrace:
    """Restrict a trajectory to the boundary vertices."""
    return BoundaryTrace(traj.grid.times(),
                         traj.values[:, mesh.boundary_vertices].copy())


def trapezoid_weights(grid: SegmentGrid) -> np.ndarray:
    w = np.full(grid.num_times, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return w


def domain_spacetime_inner(mass: sparse.csr_array, grid: SegmentGrid,
                           a: np.ndarray, b: np.ndarray) -> float:
    """L2 inner product over domain x segment for nodal trajectories."""
    w = trapezoid_weights(grid)
    return float(np.sum(w * np.einsum("kv,kv->k", a, (mass @ b.T).T)))


def boundary_spacetime_inner(mesh: Mesh, grid: SegmentGrid,
                             a: np.ndarray, b: np.ndarray) -> float:
    """L2 inner product over boundary x segment for boundary-value arrays."""
    w = trapezoid_weights(grid)
    bw = boundary_vertex_weights(mesh)
    return float(np.sum(w[:, None] * bw[None, :] * a * b))


def boundary_rel_error(mesh: Mesh, grid: SegmentGrid,
                       a: np.ndarray, b: np.ndarray) -> float:
    """Relative L2(boundary x segment) distance of ``a`` from reference ``b``."""
    diff = a - b
    num = boundary_spacetime_inner(mesh, grid, diff, diff)
    den = boundary_spacetime_inner(mesh, grid, b, b)
    if den <= 0:
        raise FemError("reference trace has zero norm")
    return float(np.sqrt(num / den))
