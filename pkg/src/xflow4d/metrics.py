"""Volume metrics and movie evaluation: MSE, DSSIM, and shell-correlation
resolution against a ground-truth movie, with report files for tables."""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DegenerateInputError, UsageError
from .neuralfield import forward_batch

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
_VOXEL_CHUNK = 1 << 18


def volume_mse(a, b):
    """Mean squared voxel difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _ssim_mean(a, b, data_range, window):
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = uniform_filter(a, window)
    mu_b = uniform_filter(b, window)
    var_a = uniform_filter(a * a, window) - mu_a * mu_a
    var_b = uniform_filter(b * b, window) - mu_b * mu_b
    cov = uniform_filter(a * b, window) - mu_a * mu_b
    ssim = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
    # windows fully inside the volume only
    m = window // 2
    core = tuple(slice(m, n - m) for n in a.shape)
    return float(np.mean(ssim[core]))


def volume_dssim(a, b, data_range=None, window=SSIM_WINDOW):
    """Structural dissimilarity, (1 - mean SSIM)/2 over sliding cubic windows.

    data_range defaults to the span of b (the ground truth); a zero span
    has no meaningful structure to compare against.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {a.shape} vs {b.shape}")
    if any(n < window for n in a.shape):
        raise UsageError(f"volume {a.shape} smaller than the {window}^3 window")
    if data_range is None:
        data_range = float(b.max() - b.min())
    if data_range <= 0:
        raise DegenerateInputError("zero dynamic range in the reference volume")
    return (1.0 - _ssim_mean(a, b, data_range, window)) / 2.0


def _shell_index(n):
    k = np.fft.fftfreq(n) * n
    kx, ky, kz = np.meshgrid(k, k, k, indexing="ij")
    return np.rint(np.sqrt(kx * kx + ky * ky + kz * kz)).astype(np.intp)


def half_bit_threshold(n_voxels):
    """Half-bit information threshold for a shell of n_voxels samples."""
    root = np.sqrt(np.maximum(np.asarray(n_voxels, dtype=np.float64), 1.0))
    return (0.2071 + 1.9102 / root) / (1.2071 + 0.9102 / root)


def fsc_resolution(a, b):
    """Shell-by-shell Fourier correlation and the half-bit resolution.

    Returns (shells, fsc, threshold, resolution_voxels); shells run from
    DC to Nyquist, and the resolution is side/(crossing radius) with the
    crossing linearly interpolated.  Curves that never drop below the
    threshold resolve to the 2-voxel Nyquist floor.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3 or len(set(a.shape)) != 1:
        raise UsageError(f"volumes must be cubic, got {a.shape}")
    n = a.shape[0]
    if n < 16:
        raise UsageError(f"side must be >= 16, got {n}")
    fa = np.fft.fftn(a)
    fb = np.fft.fftn(b)
    shell = _shell_index(n).ravel()
    n_shells = n // 2 + 1
    keep = shell < n_shells
    shell = shell[keep]
    cross = np.bincount(shell, weights=(fa.ravel()[keep] * np.conj(fb.ravel()[keep])).real,
                        minlength=n_shells)
    cross_i = np.bincount(shell, weights=(fa.ravel()[keep] * np.conj(fb.ravel()[keep])).imag,
                          minlength=n_shells)
    pow_a = np.bincount(shell, weights=np.abs(fa.ravel()[keep]) ** 2, minlength=n_shells)
    pow_b = np.bincount(shell, weights=np.abs(fb.ravel()[keep]) ** 2, minlength=n_shells)
    counts = np.bincount(shell, minlength=n_shells)
    denom = np.sqrt(pow_a * pow_b)
    fsc = np.where(denom > 0, np.abs(cross + 1j * cross_i) / np.maximum(denom, 1e-300), 0.0)
    thresh = half_bit_threshold(counts)
    shells = np.arange(n_shells)

    resolution = 2.0
    d = fsc - thresh
    for r in range(1, n_shells):
        if d[r] < 0:
            # interpolate the crossing between r-1 and r
            # never interpolate into the DC shell; a crossing at the first
            # shell means nothing beyond the box-sized period is resolved
            x = r - 1 + d[r - 1] / (d[r - 1] - d[r]) if r > 1 and d[r - 1] > 0 else float(r)
            resolution = float(n / x)
            break
    return shells, fsc, thresh, max(resolution, 2.0)


@dataclass
class EvalReport:
    """Per-frame and aggregate reconstruction quality."""

    frames: list
    times: list
    mse: list
    dssim: list
    resolution: list
    mse_4d: float
    dssim_4d: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.frames)
        if not (len(self.times) == len(self.mse) == len(self.dssim)
                == len(self.resolution) == n):
            raise UsageError("per-frame lists must have equal length")
        if any(r < 2.0 for r in self.resolution):
            raise UsageError("resolution below the 2-voxel floor")

    def _agg(self, xs):
        v = np.asarray(xs, dtype=np.float64)
        return float(v.mean()), float(v.std())

    def to_dict(self):
        mse_m, mse_s = self._agg(self.mse)
        ds_m, ds_s = self._agg(self.dssim)
        res_m, res_s = self._agg(self.resolution)
        return {
            "frames": list(self.frames),
            "times": [float(t) for t in self.times],
            "per_frame": {"mse": self.mse, "dssim": self.dssim,
                          "resolution_voxels": self.resolution},
            "aggregate": {"mse_mean": mse_m, "mse_std": mse_s,
                          "dssim_mean": ds_m, "dssim_std": ds_s,
                          "resolution_mean": res_m, "resolution_std": res_s},
            "movie": {"mse_4d": self.mse_4d, "dssim_4d": self.dssim_4d},
            "provenance": self.provenance,
        }


def voxelize_model(model, domain, t, chunk=_VOXEL_CHUNK):
    """Sample the field's psi on the domain grid at physical time t."""
    pts = domain.grid_points(units="phys")
    half = np.asarray(domain.half_extent)
    t0, t1 = domain.time_span
    tn = (float(t) - t0) / (t1 - t0)
    out = np.empty(pts.shape[0])
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        batch = np.concatenate([pts[lo:hi] / half,
                                np.full((hi - lo, 1), tn)], axis=1)
        psi, _, _ = forward_batch(model, batch)
        out[lo:hi] = psi
    return out.reshape(domain.grid_shape)


def _recon_frame(recon, truth, idx):
    if hasattr(recon, "params"):
        return voxelize_model(recon, truth.spec, float(truth.frames[idx].t))
    return np.asarray(recon.frames[idx].psi.data, dtype=np.float64)


def evaluate_movie(recon, truth, frame_indices=None, provenance=None):
    """Score a reconstruction (field model or movie) against ground truth.

    frame_indices selects a subset (default: every truth frame).  All
    DSSIM values share the dynamic range of the full truth movie so the
    per-frame numbers are comparable across time.
    """
    if frame_indices is None:
        frame_indices = list(range(len(truth)))
    frame_indices = [int(i) for i in frame_indices]
    if any(i < 0 or i >= len(truth) for i in frame_indices):
        raise UsageError("frame index outside the ground-truth movie")
    if not frame_indices:
        raise UsageError("no frames selected")
    truth_psi = [np.asarray(truth.frames[i].psi.data, dtype=np.float64)
                 for i in frame_indices]
    rng_all = float(max(p.max() for p in truth_psi)
                    - min(p.min() for p in truth_psi))
    mses, dssims, resolutions, curves = [], [], [], []
    sq_sum = 0.0
    ssim_sum = 0.0
    n_vox = 0
    for j, i in enumerate(frame_indices):
        rec = _recon_frame(recon, truth, i)
        tp = truth_psi[j]
        mses.append(volume_mse(rec, tp))
        dssims.append(volume_dssim(rec, tp, data_range=rng_all))
        shells, fsc, thr, res = fsc_resolution(rec, tp)
        resolutions.append(res)
        curves.append((i, shells, fsc, thr))
        sq_sum += ((rec - tp) ** 2).sum()
        ssim_sum += _ssim_mean(rec, tp, rng_all, SSIM_WINDOW)
        n_vox += tp.size
    report = EvalReport(
        frames=frame_indices,
        times=[float(truth.frames[i].t) for i in frame_indices],
        mse=mses, dssim=dssims, resolution=resolutions,
        mse_4d=float(sq_sum / n_vox),
        dssim_4d=(1.0 - ssim_sum / len(frame_indices)) / 2.0,
        provenance=provenance or {})
    return report, curves


def write_report(report, curves, out_dir):
    """Emit report.json, per_frame.csv and fsc_curves.csv."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=1)
        f.write("\n")
    with open(os.path.join(out_dir, "per_frame.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "time_s", "mse", "dssim", "resolution_voxels"])
        for row in zip(report.frames, report.times, report.mse, report.dssim,
                       report.resolution):
            w.writerow([row[0], f"{row[1]:.9g}"] + [f"{v:.9g}" for v in row[2:]])
    with open(os.path.join(out_dir, "fsc_curves.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "shell", "fsc", "threshold"])
        for frame, shells, fsc, thr in curves:
            for s, v, t in zip(shells, fsc, thr):
                w.writerow([frame, int(s), f"{v:.9g}", f"{t:.9g}"])
    return os.path.join(out_dir, "report.json")
