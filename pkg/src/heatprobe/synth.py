"""Reference boundary data on an independent discretization, plus noise.

The measured trace is produced on its own fine mesh and time step, mapped to
the inversion mesh's boundary vertices by angular interpolation on the unit
circle, and perturbed with multiplicative uniform noise from a counter-based
generator (Philox), so the same seed reproduces the data bit for bit.
Generating and inverting on distinct discretizations is asserted, never
assumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .mesh import Mesh, build_disk_mesh
from .scenario import Scenario, eval_truth, samplers

REFERENCE_TRIANGLES = 13870
SAMPLE_DT = 0.01


class SynthError(RuntimeError):
    """Invalid synthetic-data request (including inverse-crime guards)."""


@dataclass
class MeasurementSet:
    """Clean and noisy boundary samples on the inversion mesh's boundary."""

    sample_times: np.ndarray        # (S,)
    clean: np.ndarray               # (S, B)
    noisy: np.ndarray               # (S, B)
    noise_level: float
    seed: int
    reference_triangles: int
    sample_dt: float

    @property
    def horizon(self) -> float:
        return float(self.sample_times[-1])


def boundary_angles(mesh: Mesh) -> np.ndarray:
    pts = mesh.vertices[mesh.boundary_vertices]
    return np.arctan2(pts[:, 1], pts[:, 0])


def generate_reference(scn: Scenario, inversion_mesh: Mesh,
                       reference_triangles: int = REFERENCE_TRIANGLES,
                       sample_dt: float = SAMPLE_DT,
                       horizon: float | None = None,
                       picard_sweeps: int = 1) -> fem.BoundaryTrace:
    """Solve the true problem on a dedicated mesh and sample its trace.

    The trace is interpolated onto the inversion mesh's boundary vertices
    linearly in the boundary angle (exact up to trace smoothness since both
    boundaries lie on the same circle).  The first row is the initial value
    itself, which is known exactly.
    """
    if reference_triangles == inversion_mesh.num_cells:
        raise SynthError("reference and inversion meshes must differ "
                         "(inverse-crime guard)")
    horizon = scn.horizon if horizon is None else float(horizon)
    ref_mesh = build_disk_mesh(reference_triangles)
    grid = fem.segment_grid(0.0, horizon, sample_dt)
    f_fn, g_fn, h = samplers(scn, ref_mesh)

    def truth(t: float) -> np.ndarray:
        return eval_truth(scn, min(t, scn.horizon), ref_mesh)

    u_arg = None if not scn.inclusions else truth
    traj = fem.forward_solve(ref_mesh, grid, u_arg, scn.ops, f_fn, g_fn, h,
                             picard_sweeps=picard_sweeps)
    ref_trace = fem.boundary_trace(traj, ref_mesh)

    src = boundary_angles(ref_mesh)
    order = np.argsort(src)
    dst = boundary_angles(inversion_mesh)
    values = np.empty((grid.num_times, inversion_mesh.num_boundary_vertices))
    for k in range(grid.num_times):
        values[k] = np.interp(dst, src[order], ref_trace.values[k][order],
                              period=2.0 * np.pi)
    _, _, h_inv = samplers(scn, inversion_mesh)
    values[0] = h_inv[inversion_mesh.boundary_vertices]
    return fem.BoundaryTrace(grid.times(), values)


def add_noise(values: np.ndarray, noise_level: float, seed: int) -> np.ndarray:
    """Pointwise multiplicative uniform noise, reproducible across platforms.

    Draws come from a Philox stream keyed by the seed; entry (i, j) always
    consumes the same counter position for a fixed array shape, so the noise
    field is a pure function of (seed, shape).
    """
    if noise_level < 0:
        raise SynthError("noise level must be nonnegative")
    values = np.asarray(values, dtype=float)
    if noise_level == 0:
        return values.copy()
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    delta = rng.uniform(-1.0, 1.0, size=values.shape)
    return values * (1.0 + noise_level * delta)


def build_measurement_set(scn: Scenario, inversion_mesh: Mesh,
                          noise_level: float, seed: int,
                          reference_triangles: int = REFERENCE_TRIANGLES,
                          sample_dt: float = SAMPLE_DT,
                          horizon: float | None = None) -> MeasurementSet:
    """Generate, perturb and package the measured data for one scenario."""
    trace = generate_reference(scn, inversion_mesh, reference_triangles,
                               sample_dt, horizon)
    noisy = add_noise(trace.values, noise_level, seed)
    return MeasurementSet(sample_times=trace.times, clean=trace.values,
                          noisy=noisy, noise_level=noise_level, seed=seed,
                          reference_triangles=reference_triangles,
                          sample_dt=sample_dt)


def sample_measurement(mset: MeasurementSet, t, noisy: bool = True) -> np.ndarray:
    """Linear-in-time interpolation of the stored samples at time(s) ``t``."""
    times = mset.sample_times
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if t_arr.min() < times[0] - 1e-12 or t_arr.max() > times[-1] + 1e-12:
        raise SynthError(f"time {t} outside the measured horizon "
                         f"[{times[0]}, {times[-1]}]")
    values = mset.noisy if noisy else mset.clean
    idx = np.clip(np.searchsorted(times, t_arr, side="right") - 1,
                  0, len(times) - 2)
    w = (t_arr - times[idx]) / (times[idx + 1] - times[idx])
    w = np.clip(w, 0.0, 1.0)[:, None]
    out = (1.0 - w) * values[idx] + w * values[idx + 1]
    return out[0] if np.isscalar(t) or np.ndim(t) == 0 else out


def save_trace_text(path, times: np.ndarray, values: np.ndarray,
                    noise_level: float, seed: int) -> None:
    """Plain-text trace: header ``S B noise seed``, then ``t v_1..v_B`` rows."""
    with open(path, "w") as fh:
        fh.write(f"{len(times)} {values.shape[1]} {noise_level:.17g} {seed}\n")
        for t, row in zip(times, values):
            fh.write(" ".join(f"{x:.17g}" for x in (t, *row)) + "\n")


def load_trace_text(path):
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 4:
            raise SynthError(f"{path}: malformed trace header")
        s, b = int(head[0]), int(head[1])
        noise_level, seed = float(head[2]), int(head[3])
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (s, b + 1):
        raise SynthError(f"{path}: expected {s} rows of {b + 1} columns")
    return data[:, 0].copy(), data[:, 1:].copy(), noise_level, seed


def save_trace_binary(path, times: np.ndarray, values: np.ndarray,
                      noise_level: float, seed: int) -> None:
    """Binary twin of the text trace format (little-endian float64)."""
    with open(path, "wb") as fh:
        fh.write(np.array([len(times), values.shape[1], seed],
                          dtype="<i8").tobytes())
        fh.write(np.array([noise_level], dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_trace_binary(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    header = np.frombuffer(raw[:24], dtype="<i8")
    s, b, seed = (int(x) for x in header)
    noise_level = float(np.frombuffer(raw[24:32], dtype="<f8")[0])
    need = 32 + 8 * s + 8 * s * b
    if len(raw) != need:
        raise SynthError(f"{path}: expected {need} bytes, found {len(raw)}")
    times = np.frombuffer(raw[32:32 + 8 * s], dtype="<f8").copy()
    values = np.frombuffer(raw[32 + 8 * s:], dtype="<f8").reshape(s, b).copy()
    return times, values, noise_level, seed


def save_measurement_set(mset: MeasurementSet, base_path, binary: bool = False):
    """Write the clean/noisy pair next to each other; returns the two paths."""
    ext = ".bin" if binary else ".txt"
    writer = save_trace_binary if binary else save_trace_text
    clean_path = f"{base_path}_clean{ext}"
    noisy_path = f"{base_path}_noisy{ext}"
    writer(clean_path, mset.sample_times, mset.clean, 0.0, mset.seed)
    writer(noisy_path, mset.sample_times, mset.noisy, mset.noise_level,
           mset.seed)
    return clean_path, noisy_path


def load_measurement_set(base_path, reference_triangles: int,
                         binary: bool = False) -> MeasurementSet:
    ext = ".bin" if binary else ".txt"
    reader = load_trace_binary if binary else load_trace_text
    times, clean, _, _ = reader(f"{base_path}_clean{ext}")
    times_n, noisy, noise_level, seed = reader(f"{base_path}_noisy{ext}")
    if len(times) != len(times_n) or not np.array_equal(times, times_n):
        raise SynthError("clean and noisy traces disagree on sample times")
    dt = float(times[1] - times[0]) if len(times) > 1 else 0.0
    return MeasurementSet(sample_times=times, clean=clean, noisy=noisy,
                          noise_level=noise_level, seed=seed,
                          reference_triangles=reference_triangles,
                          sample_dt=dt)
