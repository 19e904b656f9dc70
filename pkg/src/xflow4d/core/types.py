"""Shared domain types: grids, materials, flow states, and coordinate maps.

Conventions used throughout the toolkit:

* The physical box is centered on the origin: axis i spans
  [-extent[i]/2, +extent[i]/2] in meters.  Grid cells are cell-centered.
* Normalized coordinates live in [-1, 1]^3 for space and [0, 1] for time;
  the map is affine per axis and the box corners land exactly on +-1.
* Solver ("simulation") units relate to SI through two reference scales,
  length_scale (m per sim unit) and time_scale (s per sim unit).  For a
  cubic box with the default scales the sim box is exactly [-1, 1]^3.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import OutOfDomainError


@dataclass(frozen=True)
class DomainSpec:
    """Physical box, time span, grid resolution and frame count."""

    physical_extent: tuple  # (Lx, Ly, Lz) meters
    time_span: tuple        # (t0, t1) seconds
    grid_shape: tuple       # (nx, ny, nz)
    frame_count: int
    length_scale: float = None  # m per sim unit; default max(extent)/2
    time_scale: float = None    # s per sim unit; default t1 - t0

    def __post_init__(self):
        ext = tuple(float(v) for v in self.physical_extent)
        span = (float(self.time_span[0]), float(self.time_span[1]))
        shape = tuple(int(v) for v in self.grid_shape)
        if len(ext) != 3 or any(v <= 0 for v in ext):
            raise ValueError(f"physical_extent must be 3 positive lengths, got {ext}")
        if len(shape) != 3 or any(n < 4 for n in shape):
            raise ValueError(f"grid_shape components must be >= 4, got {shape}")
        if span[1] <= span[0]:
            raise ValueError(f"time_span must satisfy t1 > t0, got {span}")
        if int(self.frame_count) < 2:
            raise ValueError(f"frame_count must be >= 2, got {self.frame_count}")
        ls = self.length_scale if self.length_scale is not None else max(ext) / 2.0
        ts = self.time_scale if self.time_scale is not None else span[1] - span[0]
        if ls <= 0 or ts <= 0:
            raise ValueError("reference scales must be positive")
        object.__setattr__(self, "physical_extent", ext)
        object.__setattr__(self, "time_span", span)
        object.__setattr__(self, "grid_shape", shape)
        object.__setattr__(self, "frame_count", int(self.frame_count))
        object.__setattr__(self, "length_scale", float(ls))
        object.__setattr__(self, "time_scale", float(ts))

    @property
    def half_extent(self):
        return tuple(v / 2.0 for v in self.physical_extent)

    @property
    def duration(self):
        return self.time_span[1] - self.time_span[0]

    def cell_size(self):
        """Grid spacing per axis in meters."""
        return tuple(L / n for L, n in zip(self.physical_extent, self.grid_shape))

    def cell_size_sim(self):
        """Grid spacing per axis in sim units."""
        return tuple(h / self.length_scale for h in self.cell_size())

    def extent_sim(self):
        return tuple(L / self.length_scale for L in self.physical_extent)

    def axis_centers(self, axis, units="phys"):
        """Cell-center coordinates along one axis (meters or sim units)."""
        n = self.grid_shape[axis]
        L = self.physical_extent[axis]
        x = (np.arange(n) + 0.5) * (L / n) - L / 2.0
        if units == "sim":
            x = x / self.length_scale
        return x

    def grid_points(self, units="phys"):
        """All cell centers as an (nx*ny*nz, 3) array, C order."""
        axes = [self.axis_centers(a, units) for a in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([v.ravel() for v in g], axis=1)

    def frame_times(self):
        """Uniform frame timestamps in seconds, first at t0, last at t1."""
        t0, t1 = self.time_span
        return np.linspace(t0, t1, self.frame_count)


@dataclass(frozen=True)
class MaterialPair:
    """Non-dimensional liquid/gas properties plus X-ray optical constants.

    n1/n2 are the (delta, beta) components of the complex refractive index
    of the liquid and gas phases; both components must be non-negative.
    """

    rho1: float
    rho2: float
    mu1: float
    mu2: float
    n1: tuple  # (delta, beta)
    n2: tuple  # (delta, beta)
    Re: float
    We: float

    def __post_init__(self):
        for name in ("rho1", "rho2", "mu1", "mu2", "Re", "We"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        n1 = (float(self.n1[0]), float(self.n1[1]))
        n2 = (float(self.n2[0]), float(self.n2[1]))
        if min(n1 + n2) < 0:
            raise ValueError("refractive-index components (delta, beta) must be >= 0")
        object.__setattr__(self, "n1", n1)
        object.__setattr__(self, "n2", n2)

    def density(self, psi):
        """Mixture density, affine in the phase variable."""
        return 0.5 * ((1.0 + psi) * self.rho1 + (1.0 - psi) * self.rho2)

    def viscosity(self, psi):
        """Mixture viscosity, affine in the phase variable."""
        return 0.5 * ((1.0 + psi) * self.mu1 + (1.0 - psi) * self.mu2)

    def refractive(self, psi):
        """(delta, beta) mixture components for the phase variable array."""
        d = 0.5 * ((1.0 + psi) * self.n1[0] + (1.0 - psi) * self.n2[0])
        b = 0.5 * ((1.0 + psi) * self.n1[1] + (1.0 - psi) * self.n2[1])
        return d, b

    def refractive_slope(self):
        """d(delta)/d(psi), d(beta)/d(psi) of the mixture law (constants)."""
        return 0.5 * (self.n1[0] - self.n2[0]), 0.5 * (self.n1[1] - self.n2[1])


class ScalarField3:
    """Immutable scalar samples on the cell-centered grid of a DomainSpec."""

    __slots__ = ("data", "spec")

    def __init__(self, data, spec):
        arr = np.asarray(data, dtype=np.float64)
        if arr.shape != tuple(spec.grid_shape):
            raise ValueError(f"data shape {arr.shape} != grid {spec.grid_shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field contains non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        self.data = arr
        self.spec = spec

    def __repr__(self):
        return f"ScalarField3(shape={self.data.shape})"


class FlowState:
    """One time point of the flow: phase, velocity components, pressure."""

    __slots__ = ("psi", "u", "p", "t")

    def __init__(self, psi, u, p, t):
        if not isinstance(psi, ScalarField3):
            raise TypeError("psi must be a ScalarField3")
        if len(u) != 3 or not all(isinstance(c, ScalarField3) for c in u):
            raise TypeError("u must be three ScalarField3 components")
        if not isinstance(p, ScalarField3):
            raise TypeError("p must be a ScalarField3")
        spec = psi.spec
        if any(c.spec is not spec for c in u) or p.spec is not spec:
            raise ValueError("all fields must share one DomainSpec")
        lo, hi = psi.data.min(), psi.data.max()
        if lo < -1.0 or hi > 1.0:
            raise ValueError(f"psi out of [-1, 1]: [{lo}, {hi}]")
        self.psi = psi
        self.u = tuple(u)
        self.p = p
        self.t = float(t)

    @property
    def spec(self):
        return self.psi.spec

    @classmethod
    def from_arrays(cls, psi, ux, uy, uz, p, t, spec):
        return cls(
            ScalarField3(psi, spec),
            (ScalarField3(ux, spec), ScalarField3(uy, spec), ScalarField3(uz, spec)),
            ScalarField3(p, spec),
            t,
        )


class Movie4D:
    """Ordered, uniformly spaced sequence of FlowState frames."""

    __slots__ = ("frames", "dt_frame")

    def __init__(self, frames, dt_frame=None):
        frames = list(frames)
        if len(frames) < 2:
            raise ValueError("a movie needs at least 2 frames")
        spec = frames[0].spec
        if any(f.spec is not spec for f in frames):
            raise ValueError("every frame must share one DomainSpec")
        times = np.array([f.t for f in frames])
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if dt_frame is None:
            dt_frame = float(steps[0])
        if not np.allclose(steps, dt_frame, rtol=1e-9, atol=1e-30):
            raise ValueError("timestamps must be uniform")
        self.frames = frames
        self.dt_frame = float(dt_frame)

    @property
    def spec(self):
        return self.frames[0].spec

    def times(self):
        return np.array([f.t for f in self.frames])

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def subsample(self, stride):
        """Every stride-th frame, starting at frame 0 (dt_frame scales up)."""
        stride = int(stride)
        if stride < 1:
            raise ValueError("stride must be >= 1")
        sub = self.frames[::stride]
        if len(sub) < 2:
            raise ValueError("stride leaves fewer than 2 frames")
        return Movie4D(sub, self.dt_frame * stride)


def normalize_point(x_phys, t_phys, spec):
    """Map a physical point (m, s) to ([-1,1]^3, [0,1]).

    Affine and invertible; raises OutOfDomainError outside the closed box.
    """
    x = np.asarray(x_phys, dtype=np.float64)
    half = np.array(spec.half_extent)
    if np.any(np.abs(x) > half * (1 + 1e-12)):
        raise OutOfDomainError(f"point {x.tolist()} outside the physical box")
    t0, t1 = spec.time_span
    if not (t0 - 1e-12 * spec.duration <= t_phys <= t1 + 1e-12 * spec.duration):
        raise OutOfDomainError(f"time {t_phys} outside span {spec.time_span}")
    x_norm = x / half
    t_norm = (float(t_phys) - t0) / (t1 - t0)
    return x_norm, t_norm


def denormalize_point(x_norm, t_norm, spec):
    """Inverse of normalize_point."""
    x = np.asarray(x_norm, dtype=np.float64) * np.array(spec.half_extent)
    t0, t1 = spec.time_span
    return x, t0 + float(t_norm) * (t1 - t0)


def normalize_points(points_phys, t_phys, spec):
    """Vectorized map of (N, 3) meters + scalar seconds to normalized coords.

    No domain check; callers that sample along clipped rays stay inside by
    construction and only need the affine map.
    """
    half = np.array(spec.half_extent)
    t0, t1 = spec.time_span
    return np.asarray(points_phys, dtype=np.float64) / half, (float(t_phys) - t0) / (t1 - t0)
