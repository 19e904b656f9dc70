"""Parallel-beam projection rendering under the weak-scattering model.

A ray through the sample accumulates line integrals of the complex
refractive index components: the detector records transmission
T = exp(-2k int beta ds) with k the vacuum wavenumber; int delta ds is
available as an optional phase channel.  The beam rotates about the
vertical (z) axis; at angle 0 it travels along +y, so the image plane
is spanned by +x (columns) and +z (rows).

Rays use a rotation-covariant quadrature segment: every ray integrates
over the same length, centered at its closest approach to the domain
center, with the sampler defined as vacuum outside the physical box.
Node placement therefore co-rotates with the beam and a rotationally
symmetric object renders identically at every angle.

Deterministic renders refine strata whose neighbor samples jump
(bisection, bounded depth) so discontinuous objects integrate to small
relative error; training renders use seeded stratified jitter instead,
which keeps the integral unbiased without the data-dependent branching.
"""

from dataclasses import dataclass

import numpy as np

from .core.storage import read_dataset_manifest, read_projection, write_dataset
from .errors import UsageError

HC_EV_M = 1.23984193e-6   # photon energy * wavelength, eV*m

_CHUNK = 1 << 20
_REFINE_DEPTH = 8
_JUMP_FRACTION = 0.05


def wavenumber(energy_ev):
    """Vacuum wavenumber k = 2*pi/lambda for a photon energy in eV."""
    if energy_ev <= 0:
        raise UsageError(f"energy must be > 0 eV, got {energy_ev}")
    return 2.0 * np.pi * energy_ev / HC_EV_M


@dataclass(frozen=True)
class DetectorSpec:
    """Pixel grid, sampling density and photon energy of the virtual camera."""

    width: int
    height: int
    pixel_pitch: float
    samples_per_ray: int = 256
    energy_ev: float = 10000.0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise UsageError(f"detector must be at least 8x8, got {self.width}x{self.height}")
        if self.pixel_pitch <= 0:
            raise UsageError(f"pixel pitch must be > 0, got {self.pixel_pitch}")
        if self.samples_per_ray < 32:
            raise UsageError(f"samples_per_ray must be >= 32, got {self.samples_per_ray}")
        if self.energy_ev <= 0:
            raise UsageError(f"energy must be > 0, got {self.energy_ev}")

    @property
    def k(self):
        return wavenumber(self.energy_ev)


class ProjectionImage:
    """One rendered detector frame."""

    __slots__ = ("transmission", "phase", "angle_deg", "t")

    def __init__(self, transmission, angle_deg, t, phase=None):
        arr = np.asarray(transmission, dtype=np.float64)
        if arr.ndim != 2:
            raise UsageError(f"transmission must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise UsageError("non-finite transmission values")
        if np.any(arr <= 0.0) or np.any(arr > 1.0 + 1e-12):
            raise UsageError("transmission values must lie in (0, 1]")
        arr = np.minimum(arr, 1.0)
        arr.setflags(write=False)
        self.transmission = arr
        self.phase = None if phase is None else np.asarray(phase, dtype=np.float64)
        self.angle_deg = float(angle_deg)
        self.t = float(t)

    @property
    def shape(self):
        return self.transmission.shape


def view_basis(angle_deg):
    """(direction, u_axis, v_axis) for a beam rotated about z by angle_deg."""
    phi = np.deg2rad(angle_deg)
    direction = np.array([np.sin(phi), np.cos(phi), 0.0])
    u_axis = np.array([np.cos(phi), -np.sin(phi), 0.0])
    v_axis = np.array([0.0, 0.0, 1.0])
    return direction, u_axis, v_axis


def pixel_rays(detector, angle_deg):
    """Ray origins (H*W, 3) in the detector plane plus the shared direction.

    Origins lie in the plane through the domain center; row 0 is the top
    of the image (largest v).
    """
    direction, u_axis, v_axis = view_basis(angle_deg)
    cols = (np.arange(detector.width) - (detector.width - 1) / 2.0) * detector.pixel_pitch
    rows = ((detector.height - 1) / 2.0 - np.arange(detector.height)) * detector.pixel_pitch
    uu, vv = np.meshgrid(cols, rows)
    origins = uu.reshape(-1, 1) * u_axis + vv.reshape(-1, 1) * v_axis
    return origins, direction


def transmission(int_beta, energy_ev):
    """Beer-Lambert transmission from an absorption line integral."""
    ib = np.asarray(int_beta, dtype=np.float64)
    if np.any(ib < 0):
        raise UsageError("int_beta must be non-negative")
    return np.exp(-2.0 * wavenumber(energy_ev) * ib)


def _segment_half_length(domain):
    return float(np.linalg.norm(domain.half_extent))


def _sample_chunked(sampler, points, t):
    n = points.shape[0]
    if n <= _CHUNK:
        return sampler.sample(points, t)
    delta = np.empty(n)
    beta = np.empty(n)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        delta[lo:hi], beta[lo:hi] = sampler.sample(points[lo:hi], t)
    return delta, beta


def _refine_jumps(sampler, t, origins, direction, s_mid, vals_d, vals_b, int_d, int_b, width):
    """Bisection refinement of strata whose neighbor samples jump.

    Each selected stratum's midpoint contribution is replaced by a
    two-point estimate, recursively, to bounded depth.  Mutates the
    integral accumulators in place.
    """
    n_rays, s_count = vals_b.shape
    span_b = vals_b.max(axis=1) - vals_b.min(axis=1)
    span_d = vals_d.max(axis=1) - vals_d.min(axis=1)
    scale = np.maximum(span_b, span_d)
    diffs = np.maximum(np.abs(np.diff(vals_b, axis=1)), np.abs(np.diff(vals_d, axis=1)))
    jump = diffs > (_JUMP_FRACTION * scale[:, None] + 1e-300)
    if not np.any(jump):
        return
    ridx, j = np.nonzero(jump)
    # a jump between midpoints j and j+1 can live in either stratum
    w_ridx = np.concatenate([ridx, ridx])
    w_j = np.concatenate([j, j + 1])
    w_ridx, w_j = np.unique(np.stack([w_ridx, w_j]), axis=1)
    w_center = s_mid[w_j]
    w_width = np.full(w_ridx.shape, width)
    w_vd = vals_d[w_ridx, w_j]
    w_vb = vals_b[w_ridx, w_j]
    tol = 1e-4 * scale * width   # per-ray absolute contribution tolerance

    for _ in range(_REFINE_DEPTH):
        if w_ridx.size == 0:
            break
        off = w_width / 4.0
        s_child = np.concatenate([w_center - off, w_center + off])
        c_ridx = np.concatenate([w_ridx, w_ridx])
        pts = origins[c_ridx] + s_child[:, None] * direction
        cd, cb = _sample_chunked(sampler, pts, t)
        m = w_ridx.size
        fine_d = 0.5 * (cd[:m] + cd[m:])
        fine_b = 0.5 * (cb[:m] + cb[m:])
        np.add.at(int_d, w_ridx, (fine_d - w_vd) * w_width)
        np.add.at(int_b, w_ridx, (fine_b - w_vb) * w_width)
        err = np.maximum(np.abs(fine_b - w_vb), np.abs(fine_d - w_vd)) * w_width
        more = err > tol[w_ridx]
        if not np.any(more):
            break
        half = w_width[more] / 2.0
        w_ridx = np.concatenate([w_ridx[more], w_ridx[more]])
        w_center = np.concatenate([w_center[more] - off[more], w_center[more] + off[more]])
        w_width = np.concatenate([half, half])
        w_vd = np.concatenate([cd[:m][more], cd[m:][more]])
        w_vb = np.concatenate([cb[:m][more], cb[m:][more]])


def integrate_rays(sampler, origins, direction, t, domain, n_samples, rng=None,
                   refine=None):
    """Line integrals (int_delta, int_beta) for a batch of parallel rays.

    origins: (R, 3) points on each ray (anywhere along it); direction: unit
    3-vector.  With rng set, stratum nodes are jittered (training mode)
    and refinement is skipped; otherwise midpoint nodes plus jump
    refinement give deterministic, discontinuity-safe integrals.
    """
    origins = np.asarray(origins, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    # slide each origin to its closest approach to the domain center
    origins = origins - (origins @ d)[:, None] * d
    half_len = _segment_half_length(domain)
    width = 2.0 * half_len / n_samples
    if refine is None:
        refine = rng is None

    if rng is None:
        offsets = (np.arange(n_samples) + 0.5) * width - half_len
        s_nodes = np.broadcast_to(offsets, (origins.shape[0], n_samples))
    else:
        jitter = rng.random((origins.shape[0], n_samples))
        s_nodes = (np.arange(n_samples) + jitter) * width - half_len

    pts = origins[:, None, :] + s_nodes[:, :, None] * d
    vd, vb = _sample_chunked(sampler, pts.reshape(-1, 3), t)
    vals_d = vd.reshape(origins.shape[0], n_samples)
    vals_b = vb.reshape(origins.shape[0], n_samples)
    int_d = vals_d.sum(axis=1) * width
    int_b = vals_b.sum(axis=1) * width
    if refine:
        _refine_jumps(sampler, t, origins, d, s_nodes[0], vals_d, vals_b,
                      int_d, int_b, width)
    return int_d, int_b


def ray_integrate(sampler, origin, direction, t, domain, n_samples=256):
    """Deterministic line integral along one ray; (0, 0) when it misses everything."""
    int_d, int_b = integrate_rays(sampler, np.asarray(origin, dtype=np.float64)[None, :],
                                  direction, t, domain, n_samples)
    return float(int_d[0]), float(int_b[0])


def render_projection(sampler, angle_deg, t, detector, domain, rng=None,
                      with_phase=False):
    """Render one parallel-beam projection at the given angle and time."""
    origins, direction = pixel_rays(detector, angle_deg)
    int_d, int_b = integrate_rays(sampler, origins, direction, t, domain,
                                  detector.samples_per_ray, rng=rng)
    trans = transmission(int_b, detector.energy_ev).reshape(detector.height, detector.width)
    phase = int_d.reshape(detector.height, detector.width) if with_phase else None
    return ProjectionImage(trans, angle_deg, t, phase=phase)


class MovieSampler:
    """(delta, beta) sampler backed by a simulated movie.

    Trilinear interpolation of psi between cell centers, linear in time
    between frames, then the material mixture law.  Vacuum outside the
    physical box; time clamps to the movie span.
    """

    def __init__(self, movie, materials):
        self.movie = movie
        self.materials = materials
        self.spec = movie.spec
        self._times = movie.times()
        self._psi = [f.psi.data for f in movie.frames]

    def _interp_frame(self, psi, pts):
        spec = self.spec
        shape = spec.grid_shape
        out = np.zeros(pts.shape[0])
        half = np.asarray(spec.half_extent)
        inside = np.all(np.abs(pts) <= half, axis=1)
        if not np.any(inside):
            return out
        p = pts[inside]
        idx = []
        for a in range(3):
            h = spec.physical_extent[a] / shape[a]
            f = (p[:, a] + half[a]) / h - 0.5
            idx.append(np.clip(f, 0.0, shape[a] - 1.0))
        i0 = [np.floor(f).astype(np.intp) for f in idx]
        i0 = [np.minimum(i, s - 1) for i, s in zip(i0, shape)]
        i1 = [np.minimum(i + 1, s - 1) for i, s in zip(i0, shape)]
        w = [f - i for f, i in zip(idx, i0)]
        val = np.zeros(p.shape[0])
        for cx, ix in ((1.0, 0), (0.0, 1)):
            wx = np.abs(cx - w[0])
            for cy, iy in ((1.0, 0), (0.0, 1)):
                wy = np.abs(cy - w[1])
                for cz, iz in ((1.0, 0), (0.0, 1)):
                    wz = np.abs(cz - w[2])
                    corner = psi[(i0[0], i1[0])[ix], (i0[1], i1[1])[iy], (i0[2], i1[2])[iz]]
                    val += wx * wy * wz * corner
        out[inside] = val
        return out

    def psi_at(self, points, t):
        pts = np.asarray(points, dtype=np.float64)
        times = self._times
        tc = float(np.clip(t, times[0], times[-1]))
        k = int(np.searchsorted(times, tc, side="right") - 1)
        k = max(0, min(k, len(times) - 2))
        w = (tc - times[k]) / (times[k + 1] - times[k])
        if w < 1e-12:
            return self._interp_frame(self._psi[k], pts)
        if w > 1.0 - 1e-12:
            return self._interp_frame(self._psi[k + 1], pts)
        a = self._interp_frame(self._psi[k], pts)
        b = self._interp_frame(self._psi[k + 1], pts)
        return (1.0 - w) * a + w * b

    def sample(self, points, t):
        pts = np.asarray(points, dtype=np.float64)
        psi = self.psi_at(pts, t)
        delta, beta = self.materials.refractive(psi)
        # outside the box psi_at returned 0, which would read as a 50/50
        # mixture; force true vacuum there
        half = np.asarray(self.spec.half_extent)
        outside = ~np.all(np.abs(pts) <= half, axis=1)
        if np.any(outside):
            delta = np.where(outside, 0.0, delta)
            beta = np.where(outside, 0.0, beta)
        return delta, beta


def render_dataset(movie, materials, view_angles_deg, detector, out_path,
                   frame_times=None):
    """Render every (view, frame) projection of a movie and write a dataset."""
    sampler = MovieSampler(movie, materials)
    times = movie.times() if frame_times is None else np.asarray(frame_times, dtype=np.float64)
    projections = []
    for angle in view_angles_deg:
        row = [render_projection(sampler, angle, float(t), detector, movie.spec).transmission
               for t in times]
        projections.append(row)
    write_dataset(out_path, projections, view_angles_deg, times, detector, movie.spec)
    return projections


class ProjectionDataset:
    """Read access to a rendered dataset directory.

    Measured-pixel reads are counted so training-schedule tests can
    assert that random-angle iterations never touch real data.
    """

    def __init__(self, path):
        self.path = path
        angles, times, detector, domain = read_dataset_manifest(path)
        self.view_angles = angles
        self.times = times
        self.detector = detector
        self.domain = domain
        self.read_count = 0
        self._cache = {}

    @property
    def n_views(self):
        return len(self.view_angles)

    @property
    def n_frames(self):
        return len(self.times)

    def projection(self, view, frame):
        """Measured transmission image for (view, frame); counts as a read."""
        if not (0 <= view < self.n_views and 0 <= frame < self.n_frames):
            raise UsageError(f"no projection ({view}, {frame}) in dataset")
        key = (view, frame)
        if key not in self._cache:
            self._cache[key] = read_projection(self.path, view, frame, self.detector)
        self.read_count += 1
        return self._cache[key]
