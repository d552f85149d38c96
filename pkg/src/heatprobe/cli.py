"""Command-line harness: data generation, reconstruction, metrics, sweeps.

One process per run.  A reconstruction writes per-segment estimates as CSV,
normalized heatmaps as portable graymaps, a metrics table with one row per
segment, and a cost summary next to the values reported for the benchmark
scenarios.  Everything downstream of the (scenario, seed) pair is
deterministic, so reruns produce byte-identical metrics files.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from . import reconstruction, synth
from .fem import FemError
from .mesh import Mesh, build_disk_mesh, cell_adjacency, locate_cells
from .scenario import (Scenario, ScenarioError, builtin, eval_truth,
                       load_scenario_config, null_scenario, BUILTIN_NAMES)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

# Per-scenario defaults (tolerance and correction scheme) used when the
# command line leaves them unset, and the published average solve counts the
# summary compares against.
EXAMPLE_DEFAULTS = {
    "ex1": {"tol": 0.10, "scheme": "bfg"},
    "ex2": {"tol": 0.08, "scheme": "dfp"},
    "ex3": {"tol": 0.08, "scheme": "bfg"},
    "ex4": {"tol": 0.08, "scheme": "dfp"},
    "ex5": {"tol": 0.08, "scheme": "bfg"},
}
PUBLISHED_SOLVES = {("ex1", 0.05): 4.02, ("ex1", 0.10): 4.22, ("ex2", None): 4.02,
                    ("ex3", None): 7.46, ("ex4", None): 4.04, ("ex5", None): 4.02}

SUPPORT_THRESHOLD = 0.5     # of the segment's max |u| per component
RASTER_SIZE = 256
NEUTRAL_GRAY = 128


@dataclass
class RunConfig:
    """Everything one reconstruction run depends on."""

    scenario: str = "ex1"
    noise: float = 0.05
    seed: int = 1
    segment_length: float = 0.1
    dt: float = 0.0125
    reference_triangles: int = 13870
    sample_dt: float = 0.01
    fine_triangles: int = 7002
    coarse_triangles: int = 1120
    nu: float = 1.4
    eps_cut: float = 0.05
    damping: float = 0.6
    tol: float | None = None          # None: per-scenario default
    scheme: str | None = None         # None: per-scenario default
    rank_cap: int = 24
    max_inner: int = 8
    eta_hat_variant: str = "zeta"
    horizon: float | None = None
    outdir: str = "runs"

    def __post_init__(self):
        if self.noise < 0:
            raise ScenarioError("noise level must be nonnegative")
        if not 0.0 < self.damping < 1.0:
            raise ScenarioError("damping factor must lie in (0, 1)")
        ratio = self.segment_length / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ScenarioError("segment length must be divisible by dt")

    def resolved_tol(self) -> float:
        if self.tol is not None:
            return self.tol
        return EXAMPLE_DEFAULTS.get(self.scenario, {}).get("tol", 0.08)

    def resolved_scheme(self) -> str:
        if self.scheme is not None:
            return self.scheme
        return EXAMPLE_DEFAULTS.get(self.scenario, {}).get("scheme", "dfp")

    def options(self) -> reconstruction.Options:
        return reconstruction.Options(
            segment_length=self.segment_length, dt=self.dt,
            fine_triangles=self.fine_triangles,
            coarse_triangles=self.coarse_triangles, nu=self.nu,
            eps_cut=self.eps_cut, damping=self.damping,
            tol=self.resolved_tol(), scheme=self.resolved_scheme(),
            rank_cap=self.rank_cap, max_inner=self.max_inner,
            eta_hat_variant=self.eta_hat_variant, horizon=self.horizon)


@dataclass
class MetricsRow:
    """One reconstruction segment scored against the ground truth."""

    segment: int
    t_mid: float
    residual: float
    background: int
    adjoint: int
    forward: int
    dirichlet: int
    iterations: int
    warned: bool
    jaccard: list[float]        # per component
    centroid_error: list[float]  # per component; nan when truth is empty


def resolve_scenario(name: str) -> Scenario:
    if name in BUILTIN_NAMES:
        return builtin(name)
    if name == "null":
        return null_scenario()
    if os.path.exists(name):
        return load_scenario_config(name)
    raise ScenarioError(f"scenario {name!r} is neither a builtin "
                        f"({', '.join(BUILTIN_NAMES)}, null) nor a config file")


def support_mask(u_comp: np.ndarray) -> np.ndarray:
    peak = np.abs(u_comp).max()
    if peak == 0:
        return np.zeros_like(u_comp, dtype=bool)
    return np.abs(u_comp) >= SUPPORT_THRESHOLD * peak


def area_jaccard(mesh: Mesh, a: np.ndarray, b: np.ndarray) -> float:
    union = a | b
    if not union.any():
        return 1.0
    return float(mesh.cell_areas[a & b].sum() / mesh.cell_areas[union].sum())


def connected_components(mesh: Mesh, mask: np.ndarray,
                         adjacency=None) -> list[np.ndarray]:
    """Split a cell mask into edge-connected components."""
    adjacency = adjacency if adjacency is not None else cell_adjacency(mesh)
    labels = np.full(mesh.num_cells, -1, dtype=np.int64)
    comps = []
    for seed in np.flatnonzero(mask):
        if labels[seed] >= 0:
            continue
        stack = [seed]
        labels[seed] = len(comps)
        cells = [seed]
        while stack:
            cur = stack.pop()
            for nb in adjacency[cur]:
                if mask[nb] and labels[nb] < 0:
                    labels[nb] = len(comps)
                    stack.append(nb)
                    cells.append(nb)
        comps.append(np.array(sorted(cells), dtype=np.int64))
    return comps


def _blob_centroids(mesh: Mesh, comps) -> np.ndarray:
    out = np.empty((len(comps), 2))
    for i, cells in enumerate(comps):
        w = mesh.cell_areas[cells]
        out[i] = (mesh.centroids[cells] * w[:, None]).sum(0) / w.sum()
    return out


def centroid_errors(mesh: Mesh, recon_mask: np.ndarray,
                    truth_mask: np.ndarray, adjacency=None) -> float:
    """Worst truth-blob centroid distance to the nearest recovered blob.

    Returns nan when the truth has no support at this time, and inf when the
    truth is nonempty but nothing was recovered.
    """
    truth_comps = connected_components(mesh, truth_mask, adjacency)
    if not truth_comps:
        return float("nan")
    recon_comps = connected_components(mesh, recon_mask, adjacency)
    if not recon_comps:
        return float("inf")
    t_cent = _blob_centroids(mesh, truth_comps)
    r_cent = _blob_centroids(mesh, recon_comps)
    dists = np.linalg.norm(t_cent[:, None, :] - r_cent[None, :, :], axis=2)
    return float(dists.min(axis=1).max())


def compute_metrics(result: reconstruction.RunResult, scn: Scenario) -> list[MetricsRow]:
    adjacency = cell_adjacency(result.coarse)
    rows = []
    for seg in result.segments:
        truth = eval_truth(scn, seg.t_mid, result.coarse)
        jac, cent = [], []
        for comp in range(scn.num_components):
            recon = support_mask(seg.u[comp])
            t_mask = truth[comp] != 0
            jac.append(area_jaccard(result.coarse, recon, t_mask))
            cent.append(centroid_errors(result.coarse, recon, t_mask,
                                        adjacency))
        rows.append(MetricsRow(
            segment=seg.index, t_mid=seg.t_mid, residual=seg.residual,
            background=seg.counters.background, adjoint=seg.counters.adjoint,
            forward=seg.counters.forward, dirichlet=seg.counters.dirichlet,
            iterations=seg.iterations, warned=seg.warned,
            jaccard=jac, centroid_error=cent))
    return rows


def write_metrics_csv(path, rows: list[MetricsRow], n_components: int) -> None:
    with open(path, "w") as fh:
        head = ["segment", "t_mid", "residual", "background", "adjoint",
                "forward", "dirichlet", "iterations", "warned"]
        head += [f"jaccard_{c}" for c in range(n_components)]
        head += [f"centroid_error_{c}" for c in range(n_components)]
        fh.write(",".join(head) + "\n")
        for r in rows:
            cells = [str(r.segment), f"{r.t_mid:.6f}", f"{r.residual:.8e}",
                     str(r.background), str(r.adjoint), str(r.forward),
                     str(r.dirichlet), str(r.iterations), str(int(r.warned))]
            cells += [f"{j:.6f}" for j in r.jaccard]
            cells += [f"{c:.6f}" for c in r.centroid_error]
            fh.write(",".join(cells) + "\n")


class _Raster:
    """Pixel-to-cell map for the fixed [-1, 1]^2 grid (built once per mesh)."""

    def __init__(self, mesh: Mesh, size: int = RASTER_SIZE):
        self.size = size
        ticks = -1.0 + (np.arange(size) + 0.5) * (2.0 / size)
        gx, gy = np.meshgrid(ticks, ticks)
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        self.inside = np.linalg.norm(pts, axis=1) <= 1.0
        self.cells = locate_cells(mesh, pts[self.inside])

    def render(self, values: np.ndarray) -> np.ndarray:
        """Map normalized cell values in [-1, 1] to a gray image."""
        img = np.full(self.size * self.size, NEUTRAL_GRAY, dtype=np.uint8)
        gray = np.clip(np.round(127.5 + 127.5 * values[self.cells]), 0, 255)
        img[self.inside] = gray.astype(np.uint8)
        # image rows run top to bottom
        return img.reshape(self.size, self.size)[::-1]


def write_pgm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(image.tobytes())


def render_heatmap(raster: _Raster, u_comp: np.ndarray,
                   truth_mask: np.ndarray | None = None) -> np.ndarray:
    peak = np.abs(u_comp).max()
    normalized = u_comp / peak if peak > 0 else np.zeros_like(u_comp)
    img = raster.render(normalized)
    if truth_mask is not None:
        member = np.zeros(raster.size * raster.size, dtype=bool)
        member[raster.inside] = truth_mask[raster.cells]
        grid = member.reshape(raster.size, raster.size)[::-1]
        edge = np.zeros_like(grid)
        edge[:-1] |= grid[:-1] != grid[1:]
        edge[:, :-1] |= grid[:, :-1] != grid[:, 1:]
        img = img.copy()
        img[edge] = 0
    return img


def _config_lines(cfg: RunConfig) -> list[str]:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {value}")
    lines.append(f"resolved_tol = {cfg.resolved_tol()}")
    lines.append(f"resolved_scheme = {cfg.resolved_scheme()}")
    return lines


def _write_manifest(path, cfg: RunConfig, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        for line in _config_lines(cfg):
            fh.write(line + "\n")
        for key, value in (extra or {}).items():
            fh.write(f"{key} = {value}\n")


def _measurement_base(cfg: RunConfig, directory: str) -> str:
    return os.path.join(directory,
                        f"{os.path.basename(cfg.scenario)}_eps{cfg.noise:g}"
                        f"_seed{cfg.seed}")


def cmd_generate(cfg: RunConfig, binary: bool = False) -> str:
    """Generate and persist one measurement set; returns the base path."""
    scn = resolve_scenario(cfg.scenario)
    mesh = build_disk_mesh(cfg.fine_triangles)
    mset = synth.build_measurement_set(
        scn, mesh, cfg.noise, cfg.seed,
        reference_triangles=cfg.reference_triangles,
        sample_dt=cfg.sample_dt, horizon=cfg.horizon)
    os.makedirs(cfg.outdir, exist_ok=True)
    base = _measurement_base(cfg, cfg.outdir)
    synth.save_measurement_set(mset, base, binary=binary)
    _write_manifest(base + "_manifest.txt", cfg, {
        "samples": len(mset.sample_times),
        "boundary_vertices": mset.clean.shape[1]})
    return base


def cmd_reconstruct(cfg: RunConfig, measurement_base: str | None = None,
                    binary: bool = False, resume: bool = False) -> str:
    """Run the reconstruction and write the full run directory.

    With ``resume=True`` an interrupted run restarts after its last fully
    checkpointed segment instead of from scratch.
    """
    scn = resolve_scenario(cfg.scenario)
    fine = build_disk_mesh(cfg.fine_triangles)
    if measurement_base is not None:
        mset = synth.load_measurement_set(measurement_base,
                                          cfg.reference_triangles,
                                          binary=binary)
    else:
        mset = synth.build_measurement_set(
            scn, fine, cfg.noise, cfg.seed,
            reference_triangles=cfg.reference_triangles,
            sample_dt=cfg.sample_dt, horizon=cfg.horizon)

    run_dir = os.path.join(
        cfg.outdir, f"{os.path.basename(cfg.scenario)}_eps{cfg.noise:g}"
        f"_seed{cfg.seed}_{cfg.resolved_scheme()}")
    seg_dir = os.path.join(run_dir, "segments")
    map_dir = os.path.join(run_dir, "heatmaps")
    os.makedirs(seg_dir, exist_ok=True)
    os.makedirs(map_dir, exist_ok=True)

    started = time.perf_counter()
    result = reconstruction.run(scn, mset, cfg.options(), fine=fine,
                                checkpoint_dir=seg_dir, resume=resume)
    elapsed = time.perf_counter() - started

    raster = _Raster(result.coarse)
    for seg in result.segments:
        for comp in range(scn.num_components):
            img = render_heatmap(raster, seg.u[comp])
            write_pgm(os.path.join(map_dir,
                                   f"seg{seg.index:04d}_c{comp}.pgm"), img)

    rows = compute_metrics(result, scn)
    write_metrics_csv(os.path.join(run_dir, "metrics.csv"), rows,
                      scn.num_components)
    _write_manifest(os.path.join(run_dir, "config.txt"), cfg)
    _write_summary(os.path.join(run_dir, "summary.txt"), cfg, result, rows,
                   elapsed)
    return run_dir


def _write_summary(path, cfg: RunConfig, result: reconstruction.RunResult,
                   rows: list[MetricsRow], elapsed: float) -> None:
    means = result.mean_counters()
    published = PUBLISHED_SOLVES.get((cfg.scenario, cfg.noise),
                                     PUBLISHED_SOLVES.get((cfg.scenario, None)))
    with open(path, "w") as fh:
        fh.write(f"scenario = {cfg.scenario}\n")
        fh.write(f"segments = {len(result.segments)}\n")
        fh.write("\naverage PDE solves per segment\n")
        fh.write(f"  forward background solves   {means['background']:.2f}\n")
        fh.write(f"  backward adjoint solves     {means['adjoint']:.2f}\n")
        fh.write(f"  forward inhomogeneous solves {means['forward']:.2f}\n")
        fh.write(f"  dirichlet verification solves {means['dirichlet']:.2f}\n")
        fh.write(f"  total solves                {means['total']:.2f}\n")
        if published is not None:
            fh.write(f"  reported benchmark total    {published:.2f}\n")
        warned = sum(r.warned for r in rows)
        fh.write(f"\nsegments at iteration cap = {warned}\n")
        med_res = float(np.median([r.residual for r in rows]))
        fh.write(f"median boundary residual = {med_res:.4f}\n")
        for comp in range(len(rows[0].jaccard) if rows else 0):
            med_j = float(np.median([r.jaccard[comp] for r in rows]))
            cents = [r.centroid_error[comp] for r in rows
                     if np.isfinite(r.centroid_error[comp])]
            med_c = float(np.median(cents)) if cents else float("nan")
            fh.write(f"component {comp}: median jaccard = {med_j:.3f}, "
                     f"median centroid error = {med_c:.3f}\n")
        fh.write(f"\nwall time seconds = {elapsed:.1f}\n")


def _read_config_value(run_dir: str, key: str) -> str:
    with open(os.path.join(run_dir, "config.txt")) as fh:
        for line in fh:
            name, _, value = line.partition("=")
            if name.strip() == key:
                return value.strip()
    raise KeyError(key)


def cmd_metrics(run_dir: str, scenario_name: str) -> str:
    """Score a finished run directory against the exact truth."""
    scn = resolve_scenario(scenario_name)
    seg_dir = os.path.join(run_dir, "segments")
    if not os.path.isdir(seg_dir):
        raise OSError(f"{run_dir} has no segments/ directory")
    coarse = build_disk_mesh(int(_read_config_value(run_dir,
                                                    "coarse_triangles")))
    seg_len = float(_read_config_value(run_dir, "segment_length"))
    files = sorted(f for f in os.listdir(seg_dir)
                   if f.startswith("u_") and f.endswith(".csv"))
    if not files:
        raise OSError(f"{seg_dir} holds no segment estimates")
    adjacency = cell_adjacency(coarse)
    raster = _Raster(coarse)
    map_dir = os.path.join(run_dir, "heatmaps_truth")
    os.makedirs(map_dir, exist_ok=True)
    out_path = os.path.join(run_dir, "metrics_truth.csv")
    med = {}
    with open(out_path, "w") as fh:
        header_written = False
        for name in files:
            n = int(name[2:6])
            u = np.loadtxt(os.path.join(seg_dir, name), delimiter=",",
                           skiprows=1, ndmin=2).T
            if u.shape[1] != coarse.num_cells:
                raise OSError(f"{name}: cell count mismatch with the coarse "
                              "mesh in config.txt")
            t_mid = (n + 0.5) * seg_len
            truth = eval_truth(scn, t_mid, coarse)
            if not header_written:
                cols = ["segment", "t_mid"]
                cols += [f"jaccard_{c}" for c in range(len(u))]
                cols += [f"centroid_error_{c}" for c in range(len(u))]
                fh.write(",".join(cols) + "\n")
                header_written = True
            jac, cent = [], []
            for comp in range(len(u)):
                recon = support_mask(u[comp])
                t_mask = truth[comp] != 0
                jac.append(area_jaccard(coarse, recon, t_mask))
                cent.append(centroid_errors(coarse, recon, t_mask, adjacency))
                img = render_heatmap(raster, u[comp], truth_mask=t_mask)
                write_pgm(os.path.join(map_dir, f"seg{n:04d}_c{comp}.pgm"),
                          img)
                med.setdefault(comp, []).append(jac[-1])
            fh.write(",".join([str(n), f"{t_mid:.6f}"]
                              + [f"{x:.6f}" for x in jac]
                              + [f"{x:.6f}" for x in cent]) + "\n")
    for comp, vals in sorted(med.items()):
        print(f"component {comp}: median jaccard {np.median(vals):.3f} "
              f"over {len(vals)} segments")
    return out_path


def cmd_sweep(cfg: RunConfig, noises: list[float], dampings: list[float],
              schemes: list[str]) -> list[str]:
    """Grid of reconstructions over noise level, damping and scheme."""
    out = []
    base_out = cfg.outdir
    for eps in noises:
        for lam in dampings:
            for scheme in schemes:
                sub = os.path.join(base_out,
                                   f"sweep_eps{eps:g}_lam{lam:g}_{scheme}")
                combo = RunConfig(**{**cfg.__dict__, "noise": eps,
                                     "damping": lam, "scheme": scheme,
                                     "outdir": sub})
                out.append(cmd_reconstruct(combo))
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default="ex1",
                   help="ex1..ex5, null, or a scenario config file")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--segment-length", type=float, default=0.1)
    p.add_argument("--dt", type=float, default=0.0125)
    p.add_argument("--reference-triangles", type=int, default=13870)
    p.add_argument("--sample-dt", type=float, default=0.01)
    p.add_argument("--fine-triangles", type=int, default=7002)
    p.add_argument("--coarse-triangles", type=int, default=1120)
    p.add_argument("--nu", type=float, default=1.4)
    p.add_argument("--eps-cut", type=float, default=0.05)
    p.add_argument("--damping", type=float, default=0.6)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--scheme", choices=("dfp", "bfg"), default=None)
    p.add_argument("--rank-cap", type=int, default=24)
    p.add_argument("--max-inner", type=int, default=8)
    p.add_argument("--eta-hat-variant", choices=("zeta", "r_zeta"),
                   default="zeta")
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--out", dest="outdir", default="runs")


def _config_from_args(args) -> RunConfig:
    names = {f.name for f in fields(RunConfig)}
    return RunConfig(**{k: v for k, v in vars(args).items() if k in names})


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="heatprobe",
        description="Track moving inhomogeneities in a 2D parabolic problem "
                    "from one pair of lateral boundary measurements.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="synthesize measurement files")
    _add_run_flags(p_gen)
    p_gen.add_argument("--binary", action="store_true",
                       help="write the binary twin format")

    p_rec = sub.add_parser("reconstruct", help="run the full reconstruction")
    _add_run_flags(p_rec)
    p_rec.add_argument("--measurement", default=None,
                       help="base path of stored measurement files "
                            "(default: generate in memory)")
    p_rec.add_argument("--binary", action="store_true")
    p_rec.add_argument("--resume", action="store_true",
                       help="continue an interrupted run from its last "
                            "checkpointed segment")

    p_met = sub.add_parser("metrics", help="score a run directory")
    p_met.add_argument("--run", required=True)
    p_met.add_argument("--scenario", required=True)

    p_sweep = sub.add_parser("sweep", help="grid over noise/damping/scheme")
    _add_run_flags(p_sweep)
    p_sweep.add_argument("--noises", default=None,
                         help="comma-separated noise levels")
    p_sweep.add_argument("--dampings", default=None)
    p_sweep.add_argument("--schemes", default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            base = cmd_generate(_config_from_args(args), binary=args.binary)
            print(f"wrote measurement files at {base}_*")
        elif args.command == "reconstruct":
            run_dir = cmd_reconstruct(_config_from_args(args),
                                      measurement_base=args.measurement,
                                      binary=args.binary, resume=args.resume)
            print(f"run directory: {run_dir}")
        elif args.command == "metrics":
            out = cmd_metrics(args.run, args.scenario)
            print(f"metrics written to {out}")
        elif args.command == "sweep":
            cfg = _config_from_args(args)
            noises = [float(x) for x in args.noises.split(",")] \
                if args.noises else [cfg.noise]
            dampings = [float(x) for x in args.dampings.split(",")] \
                if args.dampings else [cfg.damping]
            schemes = args.schemes.split(",") if args.schemes \
                else [cfg.resolved_scheme()]
            for run_dir in cmd_sweep(cfg, noises, dampings, schemes):
                print(f"run directory: {run_dir}")
    except (ScenarioError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FemError, synth.SynthError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
