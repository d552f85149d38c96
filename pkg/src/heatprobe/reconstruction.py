"""Segment-by-segment reconstruction of moving inhomogeneities.

Each time segment runs one cycle: background solve, scattering trace, one
backward dual solve, then an inner loop that maps the local dual field
through the resolver kernel, projects onto the admissible box, and checks
the boundary residual.  When the residual is too large the kernel gains a
symmetric quasi-Newton correction (DFP or BFGS form) built from an auxiliary
scattering pair, so the kernel adapts to the data on the fly.  A Dirichlet
re-solve of the segment provides the next segment's initial value, and the
low-rank terms are damped so stale corrections fade.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .fem import SegmentGrid, Trajectory
from .mesh import (Mesh, TransferOps, boundary_distance, build_disk_mesh,
                   build_transfer, restrict)
from .scenario import Scenario, samplers
from .synth import MeasurementSet, sample_measurement

logger = logging.getLogger(__name__)

CURVATURE_GUARD = 1e-12
SECANT_TOL = 1e-8
DAMP_DROP = 1e-8


@dataclass
class Options:
    """Algorithm parameters (defaults follow the benchmark setup)."""

    segment_length: float = 0.1
    dt: float = 0.0125
    fine_triangles: int = 7002
    coarse_triangles: int = 1120
    nu: float = 1.4
    eps_cut: float = 0.05
    damping: float = 0.6
    tol: float = 0.08
    scheme: str = "dfp"              # dfp | bfg
    rank_cap: int = 24
    max_inner: int = 8
    eta_hat_variant: str = "zeta"    # zeta | r_zeta
    picard_sweeps: int = 0
    horizon: float | None = None     # defaults to the scenario horizon

    def __post_init__(self):
        if self.scheme not in ("dfp", "bfg"):
            raise ValueError(f"unknown correction scheme {self.scheme!r}")
        if self.eta_hat_variant not in ("zeta", "r_zeta"):
            raise ValueError(f"unknown eta_hat variant {self.eta_hat_variant!r}")
        if not 0.0 < self.damping < 1.0:
            raise ValueError("damping factor must lie in (0, 1)")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class KernelTerm:
    """One symmetric-pair factor of the low-rank kernel part."""

    m: np.ndarray           # (nt, L, Tc)
    n: np.ndarray           # (nt, L, Tc)
    weight: float
    damp: float = 1.0       # cumulative damping applied to m


@dataclass
class ResolverKernel:
    """Diagonal boundary-distance part plus a capped list of rank-1 terms."""

    diag: np.ndarray               # (L, Tc)
    terms: list[KernelTerm] = field(default_factory=list)
    rank_cap: int = 24


def make_kernel(coarse: Mesh, n_components: int, nu: float = 1.4,
                eps_cut: float = 0.05, rank_cap: int = 24) -> ResolverKernel:
    """Initial kernel: distance-to-boundary weight, cut off near the boundary."""
    d = boundary_distance(coarse)
    diag = np.where(d >= eps_cut, d**nu, 0.0)
    return ResolverKernel(np.tile(diag, (n_components, 1)), [], rank_cap)


def segment_inner(coarse: Mesh, grid: SegmentGrid, a: np.ndarray,
                  b: np.ndarray) -> float:
    """Space-time L2 inner product of coarse vector fields over one segment."""
    w = fem.trapezoid_weights(grid)
    return float(np.einsum("k,klc,klc,c->", w, a, b, coarse.cell_areas))


def segment_norm(coarse: Mesh, grid: SegmentGrid, a: np.ndarray) -> float:
    return float(np.sqrt(max(segment_inner(coarse, grid, a, a), 0.0)))


def local_dual(z: Trajectory, y: Trajectory, ops, fine: Mesh,
               transfer: TransferOps) -> np.ndarray:
    """Dual field pairing the backward solution with the forward iterate.

    Per component: grad(z).grad(y) for conductivity, z*y for potential and
    z*|y|^(p-2)*y for the power potential, evaluated cellwise on the fine
    mesh and averaged onto the coarse mesh.
    """
    if z.values.shape != y.values.shape:
        raise ValueError("dual factors live on different grids")
    tri = fine.triangles
    zv = z.values[:, tri]                       # (nt, T, 3)
    yv = y.values[:, tri]
    components = []
    for op in ops:
        if op.kind == fem.CONDUCTIVITY:
            gz = np.einsum("ntc,tcd->ntd", zv, fine.basis_gradients)
            gy = np.einsum("ntc,tcd->ntd", yv, fine.basis_gradients)
            comp = np.einsum("ntd,ntd->nt", gz, gy)
        elif op.kind == fem.POTENTIAL:
            comp = (zv * yv).mean(axis=2)
        else:
            comp = (zv * np.abs(yv) ** (op.power - 2.0) * yv).mean(axis=2)
        components.append(comp)
    fine_field = np.stack(components, axis=1)   # (nt, L, Tf)
    return restrict(fine_field, transfer)


def apply_kernel(kernel: ResolverKernel, zeta: np.ndarray, coarse: Mesh,
                 grid: SegmentGrid) -> np.ndarray:
    """Index field: diagonal product plus the separable low-rank sum."""
    eta = kernel.diag[None, :, :] * zeta
    for term in kernel.terms:
        coef = term.weight * term.damp * segment_inner(coarse, grid, term.n, zeta)
        eta = eta + coef * term.m
    return eta


def project(eta: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Componentwise clamp onto the admissible box."""
    out = np.empty_like(eta)
    for comp, (lo, hi) in enumerate(bounds):
        out[:, comp] = np.clip(eta[:, comp], lo, hi)
    return out


def eta_hat(zeta_hat: np.ndarray, r_zeta_hat: np.ndarray, u: np.ndarray,
            bounds: np.ndarray, variant: str = "zeta") -> np.ndarray:
    """Constrained preimage of ``u`` under the projection.

    Where ``u`` is strictly inside the box it is its own preimage; where a
    bound is active the preimage is pushed past the bound, using the dual
    field itself (default) or the kernel image of it (``r_zeta`` variant).
    Projecting the result returns ``u`` exactly.
    """
    base = zeta_hat if variant == "zeta" else r_zeta_hat
    out = u.copy()
    for comp, (lo, hi) in enumerate(bounds):
        uc = u[:, comp]
        at_lo = uc == lo
        at_hi = uc == hi
        out[:, comp][at_lo] = np.minimum(base[:, comp][at_lo], lo)
        out[:, comp][at_hi] = np.maximum(base[:, comp][at_hi], hi)
    return out


def prune_for(kernel: ResolverKernel, incoming: int) -> None:
    """Drop oldest terms until ``incoming`` more fit under the rank cap."""
    while kernel.terms and len(kernel.terms) + incoming > kernel.rank_cap:
        kernel.terms.pop(0)


def _curvature_ok(d: float, na: float, nb: float, label: str) -> bool:
    if abs(d) < CURVATURE_GUARD * max(na * nb, 1e-300):
        logger.warning("curvature breakdown in %s pairing; update skipped",
                       label)
        return False
    return True


def _verify_secant(kernel: ResolverKernel, zeta_hat: np.ndarray,
                   eta_hat_field: np.ndarray, installed: int, coarse: Mesh,
                   grid: SegmentGrid, label: str) -> bool:
    """Accept the freshly installed terms only if the secant relation holds
    numerically; near-degenerate pairings amplify round-off past any useful
    bound, and such corrections would poison later index fields."""
    err = apply_kernel(kernel, zeta_hat, coarse, grid) - eta_hat_field
    rel = segment_norm(coarse, grid, err) \
        / max(segment_norm(coarse, grid, eta_hat_field), 1e-300)
    if rel > SECANT_TOL:
        del kernel.terms[-installed:]
        logger.warning("%s update rolled back: secant residual %.2e exceeds "
                       "%.0e (ill-conditioned pairing)", label, rel,
                       SECANT_TOL)
        return False
    return True


def update_dfp(kernel: ResolverKernel, eta_hat_field: np.ndarray,
               zeta_hat: np.ndarray, coarse: Mesh, grid: SegmentGrid,
               r_zeta_hat: np.ndarray | None = None) -> bool:
    """Symmetric rank-2 correction enforcing kernel(zeta_hat) = eta_hat."""
    prune_for(kernel, 2)
    rz = apply_kernel(kernel, zeta_hat, coarse, grid) \
        if r_zeta_hat is None else r_zeta_hat
    d1 = segment_inner(coarse, grid, zeta_hat, eta_hat_field)
    d2 = segment_inner(coarse, grid, zeta_hat, rz)
    nz = segment_norm(coarse, grid, zeta_hat)
    if not _curvature_ok(d1, nz, segment_norm(coarse, grid, eta_hat_field),
                         "DFP (zeta, eta)"):
        return False
    if not _curvature_ok(d2, nz, segment_norm(coarse, grid, rz),
                         "DFP (zeta, R zeta)"):
        return False
    kernel.terms.append(KernelTerm(eta_hat_field.copy(), eta_hat_field.copy(),
                                   1.0 / d1))
    kernel.terms.append(KernelTerm(rz.copy(), rz.copy(), -1.0 / d2))
    return _verify_secant(kernel, zeta_hat, eta_hat_field, 2, coarse, grid,
                          "DFP")


def update_bfg(kernel: ResolverKernel, eta_hat_field: np.ndarray,
               zeta_hat: np.ndarray, coarse: Mesh, grid: SegmentGrid,
               r_zeta_hat: np.ndarray | None = None) -> bool:
    """BFGS-form correction (scaled outer product plus symmetric cross terms)."""
    prune_for(kernel, 3)
    rz = apply_kernel(kernel, zeta_hat, coarse, grid) \
        if r_zeta_hat is None else r_zeta_hat
    d1 = segment_inner(coarse, grid, zeta_hat, eta_hat_field)
    d2 = segment_inner(coarse, grid, zeta_hat, rz)
    nz = segment_norm(coarse, grid, zeta_hat)
    if not _curvature_ok(d1, nz, segment_norm(coarse, grid, eta_hat_field),
                         "BFG (zeta, eta)"):
        return False
    kernel.terms.append(KernelTerm(eta_hat_field.copy(), eta_hat_field.copy(),
                                   (1.0 + d2 / d1) / d1))
    kernel.terms.append(KernelTerm(eta_hat_field.copy(), rz.copy(), -1.0 / d1))
    kernel.terms.append(KernelTerm(rz.copy(), eta_hat_field.copy(), -1.0 / d1))
    return _verify_secant(kernel, zeta_hat, eta_hat_field, 3, coarse, grid,
                          "BFG")


def rescale_diag(kernel: ResolverKernel, u_first: np.ndarray,
                 zeta_hat_first: np.ndarray, coarse: Mesh,
                 grid: SegmentGrid) -> bool:
    """Match the diagonal part's scale to the first estimate of the segment.

    Norms are cell-area-weighted L1 sums at the segment midpoint time node.
    The factor is computed per component: with mixed inhomogeneity types the
    dual fields carry very different physical scales, and one shared factor
    would calibrate only the dominant component.
    """
    mid = grid.steps // 2
    changed = False
    for comp in range(kernel.diag.shape[0]):
        num = float(np.sum(np.abs(u_first[mid, comp]) * coarse.cell_areas))
        den = float(np.sum(np.abs(kernel.diag[comp] * zeta_hat_first[mid, comp])
                           * coarse.cell_areas))
        if den <= 1e-14:
            logger.warning("diagonal rescale skipped for component %d: "
                           "degenerate denominator", comp)
            continue
        if num == 0.0:
            logger.warning("diagonal rescale zeroed component %d (first "
                           "estimate vanished at the segment midpoint)", comp)
        kernel.diag[comp] = kernel.diag[comp] * (num / den)
        changed = True
    return changed


def damp_kernel(kernel: ResolverKernel, damping: float) -> None:
    """Geometrically fade the low-rank terms; drop terms that fell below
    a fixed fraction of their birth magnitude."""
    if not 0.0 < damping < 1.0:
        raise ValueError("damping factor must lie in (0, 1)")
    for term in kernel.terms:
        term.damp *= damping
    kernel.terms = [t for t in kernel.terms if t.damp >= DAMP_DROP]


def time_average(field_st: np.ndarray, grid: SegmentGrid) -> np.ndarray:
    """Trapezoid-weighted time average of a space-time field."""
    w = fem.trapezoid_weights(grid)
    span = grid.t_end - grid.t_start
    return np.einsum("k,klc->lc", w, field_st) / span


@dataclass
class Counters:
    """Linear-system sweep counts, one per solver category."""

    background: int = 0
    adjoint: int = 0
    forward: int = 0
    dirichlet: int = 0

    @property
    def total(self) -> int:
        return self.background + self.adjoint + self.forward + self.dirichlet

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.background, self.adjoint, self.forward, self.dirichlet)


@dataclass
class SegmentReport:
    index: int
    t_mid: float
    u: np.ndarray               # (L, Tc) time-averaged final estimate
    residual: float
    counters: Counters
    iterations: int
    warned: bool
    kernel_rank: int


@dataclass
class RunResult:
    scenario: str
    options: Options
    segments: list[SegmentReport]
    fine: Mesh
    coarse: Mesh
    transfer: TransferOps

    def mean_counters(self) -> dict[str, float]:
        n = max(len(self.segments), 1)
        keys = ("background", "adjoint", "forward", "dirichlet")
        out = {k: sum(getattr(s.counters, k) for s in self.segments) / n
               for k in keys}
        out["total"] = sum(out.values())
        return out


def run_segment(index: int, grid: SegmentGrid, init: np.ndarray,
                kernel: ResolverKernel, mset: MeasurementSet, scn: Scenario,
                opts: Options, fine: Mesh, coarse: Mesh,
                transfer: TransferOps, f_fn, g_fn):
    """One reconstruction cycle; returns (report, terminal nodal field)."""
    counters = Counters()
    ops, bounds = scn.ops, scn.bounds

    y_bg = fem.forward_solve(fine, grid, None, ops, f_fn, g_fn, init,
                             picard_sweeps=opts.picard_sweeps)
    counters.background += 1
    bg_trace = fem.boundary_trace(y_bg, fine).values
    y_d = sample_measurement(mset, grid.times())
    scatter = bg_trace - y_d

    z = fem.backward_adjoint_solve(fine, grid, scatter)
    counters.adjoint += 1

    y_cur = y_bg
    best = None
    prev_u = None
    warned = False
    iterations = 0
    for k in range(1, opts.max_inner + 1):
        iterations = k
        zeta = local_dual(z, y_cur, ops, fine, transfer)
        eta = apply_kernel(kernel, zeta, coarse, grid)
        u_st = project(eta, bounds)
        u_avg = time_average(u_st, grid)
        y_cur = fem.forward_solve(fine, grid, u_avg, ops, f_fn, g_fn, init,
                                  transfer=transfer,
                                  picard_sweeps=opts.picard_sweeps)
        counters.forward += 1
        residual = fem.boundary_rel_error(
            fine, grid, fem.boundary_trace(y_cur, fine).values, y_d)
        if best is None or residual < best[0]:
            best = (residual, y_cur)
        if residual <= opts.tol:
            break
        if k == opts.max_inner:
            warned = True
            logger.warning("segment %d: inner-iteration cap reached "
                           "(best residual %.4f)", index, best[0])
            break

        aux_scatter = bg_trace - fem.boundary_trace(y_cur, fine).values
        z_hat = fem.backward_adjoint_solve(fine, grid, aux_scatter)
        counters.adjoint += 1
        zeta_hat = local_dual(z_hat, y_cur, ops, fine, transfer)
        rescaled = False
        if k == 1:
            # calibrate the diagonal before installing the correction, so the
            # new terms' secant relation holds for the kernel as stored
            rescaled = rescale_diag(kernel, u_st, zeta_hat, coarse, grid)
        incoming = 2 if opts.scheme == "dfp" else 3
        prune_for(kernel, incoming)
        r_zeta_hat = apply_kernel(kernel, zeta_hat, coarse, grid)
        eh = eta_hat(zeta_hat, r_zeta_hat, u_st, bounds, opts.eta_hat_variant)
        update = update_dfp if opts.scheme == "dfp" else update_bfg
        accepted = update(kernel, eh, zeta_hat, coarse, grid,
                          r_zeta_hat=r_zeta_hat)
        if not (accepted or rescaled) and prev_u is not None \
                and np.array_equal(u_st, prev_u):
            warned = True
            logger.warning("segment %d: no kernel progress possible; "
                           "stopping inner loop", index)
            break
        prev_u = u_st

    residual, y_fin = best
    zeta_fin = local_dual(z, y_fin, ops, fine, transfer)
    u_fin = time_average(project(
        apply_kernel(kernel, zeta_fin, coarse, grid), bounds), grid)

    y_dir = fem.dirichlet_solve(fine, grid, u_fin, ops, f_fn, y_d, init,
                                transfer=transfer)
    counters.dirichlet += 1
    damp_kernel(kernel, opts.damping)

    report = SegmentReport(index=index,
                           t_mid=0.5 * (grid.t_start + grid.t_end),
                           u=u_fin, residual=residual, counters=counters,
                           iterations=iterations, warned=warned,
                           kernel_rank=len(kernel.terms))
    return report, y_dir.values[-1].copy()


def run(scn: Scenario, mset: MeasurementSet, opts: Options | None = None,
        fine: Mesh | None = None, coarse: Mesh | None = None,
        transfer: TransferOps | None = None,
        checkpoint_dir: str | None = None, resume: bool = False) -> RunResult:
    """Reconstruct over the full horizon, threading terminal fields.

    With ``checkpoint_dir`` set, every finished segment is persisted (final
    estimate, terminal field, kernel terms) and ``resume=True`` continues an
    interrupted run from its last complete segment.
    """
    opts = opts or Options()
    horizon = scn.horizon if opts.horizon is None else opts.horizon
    if mset.horizon < horizon - 1e-9:
        raise ValueError(f"measurement horizon {mset.horizon} does not cover "
                         f"[0, {horizon}]")
    if abs(opts.dt - mset.sample_dt) < 1e-12:
        raise ValueError("inversion time step equals the reference sampling "
                         "step (inverse-crime guard)")
    n_segments = round(horizon / opts.segment_length)
    if abs(n_segments * opts.segment_length - horizon) > 1e-9:
        raise ValueError("segment length does not partition the horizon")
    steps = round(opts.segment_length / opts.dt)
    if abs(steps * opts.dt - opts.segment_length) > 1e-12:
        raise ValueError("segment length is not divisible by dt")

    fine = fine or build_disk_mesh(opts.fine_triangles)
    coarse = coarse or build_disk_mesh(opts.coarse_triangles)
    if fine.num_cells == mset.reference_triangles:
        raise ValueError("inversion mesh equals the reference mesh "
                         "(inverse-crime guard)")
    transfer = transfer or build_transfer(fine, coarse)
    f_fn, g_fn, h = samplers(scn, fine)

    kernel = make_kernel(coarse, scn.num_components, opts.nu, opts.eps_cut,
                         opts.rank_cap)
    init = h
    reports: list[SegmentReport] = []
    start = 0
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
        if resume:
            start, init, kernel, reports = _load_checkpoint(
                checkpoint_dir, scn, coarse, init, kernel)

    for n in range(start, n_segments):
        grid = SegmentGrid(n * opts.segment_length,
                           (n + 1) * opts.segment_length, steps)
        report, init = run_segment(n, grid, init, kernel, mset, scn, opts,
                                   fine, coarse, transfer, f_fn, g_fn)
        reports.append(report)
        if checkpoint_dir:
            _save_checkpoint(checkpoint_dir, report, init, kernel)
    return RunResult(scenario=scn.name, options=opts, segments=reports,
                     fine=fine, coarse=coarse, transfer=transfer)


def _save_checkpoint(run_dir: str, report: SegmentReport,
                     terminal: np.ndarray, kernel: ResolverKernel) -> None:
    n = report.index
    np.savetxt(os.path.join(run_dir, f"u_{n:04d}.csv"), report.u.T,
               delimiter=",",
               header=",".join(f"component_{c}" for c in range(len(report.u))),
               comments="")
    np.savetxt(os.path.join(run_dir, f"terminal_{n:04d}.txt"), terminal)
    np.savez(os.path.join(run_dir, f"kernel_{n:04d}.npz"),
             diag=kernel.diag,
             m=np.stack([t.m for t in kernel.terms]) if kernel.terms else
             np.zeros((0,) + kernel.diag.shape),
             n=np.stack([t.n for t in kernel.terms]) if kernel.terms else
             np.zeros((0,) + kernel.diag.shape),
             weight=np.array([t.weight for t in kernel.terms]),
             damp=np.array([t.damp for t in kernel.terms]),
             rank_cap=kernel.rank_cap)
    row = [n, f"{report.t_mid:.17g}", f"{report.residual:.17g}",
           *report.counters.as_tuple(), report.iterations,
           int(report.warned), report.kernel_rank]
    path = os.path.join(run_dir, "segments.csv")
    fresh = not os.path.exists(path) or n == 0
    with open(path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["segment", "t_mid", "residual", "background",
                             "adjoint", "forward", "dirichlet", "iterations",
                             "warned", "kernel_rank"])
        writer.writerow(row)


def _load_checkpoint(run_dir: str, scn: Scenario, coarse: Mesh,
                     init: np.ndarray, kernel: ResolverKernel):
    done = sorted(int(f[2:6]) for f in os.listdir(run_dir)
                  if f.startswith("u_") and f.endswith(".csv"))
    last = -1
    for n in done:
        needed = [f"terminal_{n:04d}.txt", f"kernel_{n:04d}.npz"]
        if all(os.path.exists(os.path.join(run_dir, p)) for p in needed):
            last = n
        else:
            break
    if last < 0:
        return 0, init, kernel, []
    terminal = np.loadtxt(os.path.join(run_dir, f"terminal_{last:04d}.txt"))
    data = np.load(os.path.join(run_dir, f"kernel_{last:04d}.npz"))
    kernel = ResolverKernel(
        diag=data["diag"],
        terms=[KernelTerm(m, n_, w, d) for m, n_, w, d in
               zip(data["m"], data["n"], data["weight"], data["damp"])],
        rank_cap=int(data["rank_cap"]))
    reports = []
    with open(os.path.join(run_dir, "segments.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            n = int(row["segment"])
            if n > last:
                break
            u = np.loadtxt(os.path.join(run_dir, f"u_{n:04d}.csv"),
                           delimiter=",", skiprows=1, ndmin=2).T
            reports.append(SegmentReport(
                index=n, t_mid=float(row["t_mid"]), u=u,
                residual=float(row["residual"]),
                counters=Counters(int(row["background"]), int(row["adjoint"]),
                                  int(row["forward"]), int(row["dirichlet"])),
                iterations=int(row["iterations"]),
                warned=bool(int(row["warned"])),
                kernel_rank=int(row["kernel_rank"])))
    logger.info("resuming after segment %d (%d reports restored)",
                last, len(reports))
    return last + 1, terminal, kernel, reports
