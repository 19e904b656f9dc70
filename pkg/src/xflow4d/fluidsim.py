"""Ground-truth generator: two-phase incompressible flow on a regular grid.

The model couples the non-dimensional Navier-Stokes momentum balance

    rho(psi) (du/dt + u . grad u) = -grad p + (mu(psi)/Re) lap u
                                    - eta grad(psi) / We,    div u = 0

to a Cahn-Hilliard phase equation for psi in [-1, 1] with chemical
potential eta = psi^3 - psi - eps^2 lap psi.  Discretization is a
fractional-step (projection) scheme on collocated cell centers:

  1. conservative upwind advection of psi (exactly mass-preserving);
  2. semi-implicit Cahn-Hilliard diffusion, diagonalized by DCT (wall
     case) or FFT (periodic case), with convex "stabilized" splitting so
     the fourth-order term never limits the step;
  3. second-order semi-Lagrangian momentum convection (RK2 departure
     points, cubic interpolation - linear interpolation is far too
     dissipative to pass an energy-decay check);
  4. explicit viscous and surface-tension forces;
  5. variable-density pressure projection.  The divergence and gradient
     stencils form an exact adjoint pair (G = -D^T) under the wall
     closures (odd ghosts for wall-normal velocity, mirrored ghosts for
     pressure), so D(grad/rho) is symmetric negative semidefinite with
     a constants-only null space and conjugate gradients applies.

All solver arithmetic runs in simulation units (lengths over
DomainSpec.length_scale, times over time_scale), float64, no RNG.
"""

from dataclasses import dataclass, replace

import numpy as np
import scipy.fft as sfft
from scipy.ndimage import map_coordinates

from .core.types import FlowState, Movie4D, ScalarField3
from .errors import GeometryError, SolverError, StepSizeError, UsageError

EYRE_S = 2.0
CFL_LIMIT = 0.5
_MAX_CG_ITER = 4000


@dataclass(frozen=True)
class SimParams:
    """Solver settings in simulation units."""

    materials: "object"
    droplet_radius: float
    droplet_centers: tuple
    impact_speed: float
    interface_width: float
    mobility: float
    dt: float
    steps_per_frame: int
    bc: str = "noslip"

    def __post_init__(self):
        if self.droplet_radius <= 0:
            raise UsageError(f"droplet_radius must be > 0, got {self.droplet_radius}")
        if self.interface_width <= 0:
            raise UsageError(f"interface_width must be > 0, got {self.interface_width}")
        if self.mobility <= 0:
            raise UsageError(f"mobility must be > 0, got {self.mobility}")
        if self.dt <= 0:
            raise UsageError(f"dt must be > 0, got {self.dt}")
        if self.steps_per_frame < 1:
            raise UsageError("steps_per_frame must be >= 1")
        if self.bc not in ("noslip", "periodic"):
            raise UsageError(f"bc must be 'noslip' or 'periodic', got {self.bc!r}")
        if len(self.droplet_centers) != 2:
            raise UsageError("droplet_centers must hold two points")


def _shift(f, axis, step, bc, odd=False):
    """Neighbor values f[i+step] along axis; ghosts by bc and parity."""
    if bc == "periodic":
        return np.roll(f, -step, axis=axis)
    g = np.empty_like(f)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    edge = [slice(None)] * 3
    if step == 1:
        dst[axis] = slice(None, -1)
        src[axis] = slice(1, None)
        edge[axis] = slice(-1, None)
    else:
        dst[axis] = slice(1, None)
        src[axis] = slice(None, -1)
        edge[axis] = slice(None, 1)
    g[tuple(dst)] = f[tuple(src)]
    g[tuple(edge)] = -f[tuple(edge)] if odd else f[tuple(edge)]
    return g


def _gradient(f, spacing, bc):
    return [(_shift(f, a, 1, bc) - _shift(f, a, -1, bc)) / (2.0 * spacing[a])
            for a in range(3)]


def _divergence(u, spacing, bc):
    out = np.zeros_like(u[0])
    for a in range(3):
        out += (_shift(u[a], a, 1, bc, odd=True)
                - _shift(u[a], a, -1, bc, odd=True)) / (2.0 * spacing[a])
    return out


def _laplacian(f, spacing, bc, odd=False):
    out = np.zeros_like(f)
    for a in range(3):
        out += (_shift(f, a, 1, bc, odd) - 2.0 * f
                + _shift(f, a, -1, bc, odd)) / spacing[a] ** 2
    return out


_SYMBOL_CACHE = {}


def _lap_symbol(shape, spacing, bc):
    key = (shape, spacing, bc)
    if key not in _SYMBOL_CACHE:
        parts = []
        for a, (n, h) in enumerate(zip(shape, spacing)):
            i = np.arange(n)
            theta = np.pi * i / n if bc == "noslip" else 2.0 * np.pi * i / n
            lam1 = (2.0 * np.cos(theta) - 2.0) / h ** 2
            shp = [1, 1, 1]
            shp[a] = n
            parts.append(lam1.reshape(shp))
        _SYMBOL_CACHE[key] = parts[0] + parts[1] + parts[2]
    return _SYMBOL_CACHE[key]


def chemical_potential(psi, eps, bc="noslip"):
    """eta = psi^3 - psi - eps^2 lap psi on a ScalarField3."""
    spec = psi.spec
    spacing = spec.cell_size_sim()
    vals = np.clip(psi.data, -1.0, 1.0)
    eta = vals ** 3 - vals - eps ** 2 * _laplacian(vals, spacing, bc)
    return ScalarField3(eta, spec)


def _advect_psi(psi, u, dt, spacing, bc):
    """Flux-form donor-cell advection: conserves sum(psi) to roundoff."""
    out = psi.copy()
    for a in range(3):
        u_hi = 0.5 * (u[a] + _shift(u[a], a, 1, bc, odd=True))   # face i+1/2
        psi_hi = np.where(u_hi > 0.0, psi, _shift(psi, a, 1, bc))
        flux_hi = u_hi * psi_hi
        if bc == "periodic":
            flux_lo = np.roll(flux_hi, 1, axis=a)
        else:
            flux_lo = np.empty_like(flux_hi)
            dst = [slice(None)] * 3
            src = [slice(None)] * 3
            wall = [slice(None)] * 3
            dst[a] = slice(1, None)
            src[a] = slice(None, -1)
            wall[a] = slice(None, 1)
            flux_lo[tuple(dst)] = flux_hi[tuple(src)]
            flux_lo[tuple(wall)] = 0.0   # closed wall: no phase flux
        out -= (dt / spacing[a]) * (flux_hi - flux_lo)
    return out


def _ch_diffuse(psi, eps, mobility, dt, spacing, bc):
    """Semi-implicit Cahn-Hilliard update, stabilized splitting (S=2)."""
    lam = _lap_symbol(psi.shape, spacing, bc)
    fprime = psi ** 3 - psi
    if bc == "periodic":
        ps = sfft.fftn(psi)
        fs = sfft.fftn(fprime)
    else:
        ps = sfft.dctn(psi, type=2)
        fs = sfft.dctn(fprime, type=2)
    num = ps + dt * mobility * lam * (fs - EYRE_S * ps)
    den = 1.0 - dt * mobility * EYRE_S * lam + dt * mobility * (eps ** 2) * lam ** 2
    res = num / den
    if bc == "periodic":
        return sfft.ifftn(res).real
    return sfft.idctn(res, type=2)


def _semi_lagrangian(u, dt, spacing, bc):
    """RK2 departure-point advection of the velocity field itself."""
    shape = u[0].shape
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    mode = "grid-wrap" if bc == "periodic" else "nearest"
    u_idx = [u[a] / spacing[a] for a in range(3)]   # cells per sim-time
    mid = [grids[a] - 0.5 * dt * u_idx[a] for a in range(3)]
    u_mid = [map_coordinates(u_idx[a], mid, order=1, mode=mode) for a in range(3)]
    dep = [grids[a] - dt * u_mid[a] for a in range(3)]
    return [map_coordinates(u[a], dep, order=3, mode=mode) for a in range(3)]


def _pressure_diag(beta, spacing, bc):
    diag = np.zeros_like(beta)
    for a in range(3):
        diag += (_shift(beta, a, 1, bc) + _shift(beta, a, -1, bc)) / (4.0 * spacing[a] ** 2)
    return diag


def _solve_pressure(rhs, beta, spacing, bc, p0, tol_inf):
    """PCG on  -div(beta grad p) = -rhs;  returns (p, iterations, residual)."""

    def apply_K(p):
        g = _gradient(p, spacing, bc)
        return -_divergence([beta * g[0], beta * g[1], beta * g[2]], spacing, bc)

    c = -(rhs - rhs.mean())   # project out the incompatible constant mode
    inv_diag = 1.0 / _pressure_diag(beta, spacing, bc)
    p = p0.copy()
    r = c - apply_K(p)
    res = np.abs(r).max()
    if res <= tol_inf:
        return p - p.mean(), 0, res
    z = inv_diag * r
    d = z.copy()
    rz = float(np.vdot(r, z))
    for it in range(1, _MAX_CG_ITER + 1):
        kd = apply_K(d)
        dkd = float(np.vdot(d, kd))
        if dkd <= 0.0:
            break
        alpha = rz / dkd
        p += alpha * d
        r -= alpha * kd
        res = np.abs(r).max()
        if res <= tol_inf:
            return p - p.mean(), it, res
        z = inv_diag * r
        rz_new = float(np.vdot(r, z))
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise SolverError(f"pressure solve stalled at residual {res:.3e} "
                      f"(tolerance {tol_inf:.3e})", residual=float(res))


def _project(u, beta, dt, spacing, bc, phi0):
    """Remove the discrete divergence of u; returns (u_solenoidal, phi)."""
    rhs = _divergence(u, spacing, bc) / dt
    tol = min(1e-6 * max(1.0, float(np.abs(rhs).max())), 2.5e-6 / dt)
    phi, _, _ = _solve_pressure(rhs, beta, spacing, bc, phi0, tol)
    g = _gradient(phi, spacing, bc)
    return [u[a] - dt * beta * g[a] for a in range(3)], phi


def _mix_density(psi, m):
    # dimensionless density, normalized by the liquid phase
    return 0.5 * ((1.0 + psi) + (1.0 - psi) * (m.rho2 / m.rho1))


def _mix_viscosity(psi, m):
    # dimensionless viscosity, normalized by the liquid phase
    return 0.5 * ((1.0 + psi) + (1.0 - psi) * (m.mu2 / m.mu1))


def cfl_number(u, dt, spacing):
    return max(dt * float(np.abs(u[a]).max()) / spacing[a] for a in range(3))


def init_binary_droplets(params, spec):
    """Two tanh-profile droplets approaching along their line of centers."""
    eps = params.interface_width
    spacing = spec.cell_size_sim()
    if eps < 1.5 * max(spacing):
        raise UsageError(f"interface_width {eps:g} under-resolved: "
                         f"needs >= 1.5 grid spacings ({1.5 * max(spacing):g})")
    c1 = np.asarray(params.droplet_centers[0], dtype=np.float64)
    c2 = np.asarray(params.droplet_centers[1], dtype=np.float64)
    r = params.droplet_radius
    sep = float(np.linalg.norm(c2 - c1))
    if sep <= 2.0 * r:
        raise GeometryError(f"droplets overlap: center distance {sep:g} <= 2R = {2 * r:g}")
    half = np.asarray(spec.extent_sim()) / 2.0
    for c in (c1, c2):
        if np.any(np.abs(c) + r + 2.0 * eps > half):
            raise GeometryError("droplet does not fit inside the domain")

    # droplet_radius is the volume-equivalent radius: place the phase contour
    # at the root of 4*rc^3 + pi^2*a^2*rc = 4*R^3 (a = sqrt(2)*eps) so the
    # integrated liquid volume of the smoothed profile matches (4/3)*pi*R^3
    a2 = 2.0 * eps * eps
    rc = r
    for _ in range(40):
        f = 4.0 * rc ** 3 + np.pi ** 2 * a2 * rc - 4.0 * r ** 3
        rc -= f / (12.0 * rc ** 2 + np.pi ** 2 * a2)
    centers = [spec.axis_centers(a, units="sim") for a in range(3)]
    xx, yy, zz = np.meshgrid(*centers, indexing="ij")
    d1 = np.sqrt((xx - c1[0]) ** 2 + (yy - c1[1]) ** 2 + (zz - c1[2]) ** 2)
    d2 = np.sqrt((xx - c2[0]) ** 2 + (yy - c2[1]) ** 2 + (zz - c2[2]) ** 2)
    psi1 = np.tanh((rc - d1) / (np.sqrt(2.0) * eps))
    psi2 = np.tanh((rc - d2) / (np.sqrt(2.0) * eps))
    psi = np.maximum(psi1, psi2)

    e_hat = (c2 - c1) / sep
    blend = 0.5 * (psi1 + 1.0) - 0.5 * (psi2 + 1.0)   # +1 inside drop 1, -1 inside drop 2
    u = [params.impact_speed * e_hat[a] * blend for a in range(3)]
    p = np.zeros_like(psi)
    return FlowState.from_arrays(psi, u[0], u[1], u[2], p, spec.time_span[0], spec)


def step(state, params):
    """Advance one time step of size params.dt (simulation units)."""
    spec = state.psi.spec
    spacing = spec.cell_size_sim()
    bc = params.bc
    dt = params.dt
    m = params.materials

    psi = state.psi.data
    u = [state.u[a].data for a in range(3)]
    cfl = cfl_number(u, dt, spacing)
    if cfl > CFL_LIMIT + 1e-12:
        raise StepSizeError(f"CFL number {cfl:.3f} exceeds {CFL_LIMIT}")

    psi_adv = _advect_psi(psi, u, dt, spacing, bc)
    psi_new = np.clip(_ch_diffuse(psi_adv, params.interface_width, params.mobility,
                                  dt, spacing, bc), -1.0, 1.0)
    # the interpolating transport and the clip both leak a little phase mass;
    # restore the integral each step across the interface band, which has
    # headroom to the [-1, 1] bounds (the bulk phases sit at saturation)
    corr = psi.sum() - psi_new.sum()
    if corr != 0.0:
        band = np.abs(psi_new) < 0.99
        nb = int(band.sum())
        if nb:
            psi_new[band] += corr / nb

    u_adv = _semi_lagrangian(u, dt, spacing, bc)
    rho = _mix_density(psi_new, m)
    mu = _mix_viscosity(psi_new, m)
    beta = 1.0 / rho
    # explicit diffusion is sub-cycled so the stiffest phase (the gas: its
    # kinematic viscosity exceeds the liquid's) stays inside h^2/(6 nu)
    nu = beta * mu / m.Re
    nu_max = float(nu.max())
    dt_visc = 0.9 * min(s * s for s in spacing) / (6.0 * nu_max) if nu_max > 0 else dt
    n_sub = max(1, int(np.ceil(dt / dt_visc)))
    u_v = [c.copy() for c in u_adv]
    for _ in range(n_sub):
        lap = [_laplacian(u_v[a], spacing, bc, odd=(bc == "noslip")) for a in range(3)]
        for a in range(3):
            u_v[a] += (dt / n_sub) * nu * lap[a]
    eta = (psi_new ** 3 - psi_new
           - params.interface_width ** 2 * _laplacian(psi_new, spacing, bc))
    gpsi = _gradient(psi_new, spacing, bc)
    # incremental pressure splitting: advance with the previous pressure
    # gradient, then project only the increment (the non-incremental form
    # loses O(dt) kinetic energy per unit time)
    gp = _gradient(state.p.data, spacing, bc)
    u_star = []
    for a in range(3):
        force = -eta * gpsi[a] / m.We
        u_star.append(u_v[a] + dt * (force * beta - beta * gp[a]))

    u_new, phi = _project(u_star, beta, dt, spacing, bc, np.zeros_like(psi_new))
    p_new = state.p.data + phi

    t_new = state.t + dt * spec.time_scale
    return FlowState.from_arrays(psi_new, u_new[0], u_new[1], u_new[2], p_new,
                                 t_new, spec)


def run_collision(params, spec):
    """Run the collision and sample frames at the DomainSpec frame times."""
    frame_dt_sim = (spec.duration / (spec.frame_count - 1)) / spec.time_scale
    expected = frame_dt_sim / params.steps_per_frame
    if abs(params.dt - expected) > 1e-9 * max(expected, 1e-300):
        raise StepSizeError(
            f"dt {params.dt:g} times steps_per_frame {params.steps_per_frame} "
            f"does not land on the frame spacing {frame_dt_sim:g}; use dt = {expected:g}")

    state = init_binary_droplets(params, spec)
    # emit a solenoidal initial frame
    spacing = spec.cell_size_sim()
    beta0 = 1.0 / _mix_density(state.psi.data, params.materials)
    u0, p0 = _project([state.u[a].data.copy() for a in range(3)], beta0,
                      params.dt, spacing, params.bc, np.zeros(spec.grid_shape))
    state = FlowState.from_arrays(state.psi.data, u0[0], u0[1], u0[2], p0,
                                  state.t, spec)

    times = spec.frame_times()
    frames = [state]
    for k in range(1, spec.frame_count):
        for _ in range(params.steps_per_frame):
            state = step(state, params)
        # pin the timestamp to the exact frame grid
        state = FlowState.from_arrays(state.psi.data, state.u[0].data,
                                      state.u[1].data, state.u[2].data,
                                      state.p.data, float(times[k]), spec)
        frames.append(state)
    return Movie4D(frames, float(times[1] - times[0]))


def velocity_divergence(state, bc="noslip"):
    """Discrete divergence of a state's velocity, in simulation units."""
    spec = state.psi.spec
    return _divergence([state.u[a].data for a in range(3)],
                       spec.cell_size_sim(), bc)


def liquid_volume(state):
    """integral (1+psi)/2 dV in simulation units."""
    spec = state.psi.spec
    cell = float(np.prod(spec.cell_size_sim()))
    return float(((1.0 + state.psi.data) * 0.5).sum() * cell)


def kinetic_energy(state, materials):
    spec = state.psi.spec
    cell = float(np.prod(spec.cell_size_sim()))
    rho = _mix_density(state.psi.data, materials)
    ke = sum(state.u[a].data ** 2 for a in range(3))
    return float((0.5 * rho * ke).sum() * cell)


def params_with_dt_for(params, spec):
    """Copy params with dt snapped to the frame grid of spec."""
    frame_dt_sim = (spec.duration / (spec.frame_count - 1)) / spec.time_scale
    return replace(params, dt=frame_dt_sim / params.steps_per_frame)
