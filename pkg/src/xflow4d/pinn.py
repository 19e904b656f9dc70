"""Physics constraint: spacetime collocation sampling and the PDE residual loss.

The momentum and divergence residuals of the two-phase flow equations are
evaluated on the continuous field through finite-difference probes, giving a
scalar loss whose parameter gradient drives training toward physically
consistent dynamics.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ResidualError, UsageError
from .neuralfield import (
    DEFAULT_FD_STEP,
    backward,
    forward_batch,
    spacetime_derivatives,
    stencil_points,
)

_REJECT_KEEP = 0.25      # acceptance probability away from the interface (x4 boost)
_INTERFACE_BAND = 0.9    # |psi| below this counts as interface


@dataclass(frozen=True)
class CollocationBatch:
    """Normalized spacetime sample points with per-point loss weights."""

    points: np.ndarray            # (N, 4): x, y, z in [-1, 1], t in [0, 1]
    weights: np.ndarray           # (N,) positive
    seed: int = 0
    strategy: str = "uniform"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4 or pts.shape[0] < 1:
            raise UsageError(f"points must be (N >= 1, 4), got {pts.shape}")
        if w.shape != (pts.shape[0],):
            raise UsageError(f"weights shape {w.shape} does not match {pts.shape[0]} points")
        if np.any(w < 0):
            raise UsageError("weights must be non-negative")
        tol = 1e-12
        if (np.any(np.abs(pts[:, :3]) > 1.0 + tol)
                or np.any(pts[:, 3] < -tol) or np.any(pts[:, 3] > 1.0 + tol)):
            raise UsageError("points must lie inside [-1, 1]^3 x [0, 1]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.points.shape[0]


def sample_collocation(n, seed, strategy="uniform", model=None):
    """Draw n collocation points, deterministically per seed.

    "uniform" samples i.i.d. over the normalized box.  "interface-biased"
    keeps points near the phase boundary (|psi| < 0.9) with probability 1
    and all others with probability 1/4, boosting interface representation
    fourfold; it needs a model to evaluate psi.
    """
    if n < 1:
        raise UsageError(f"n must be >= 1, got {n}")
    if strategy not in ("uniform", "interface-biased"):
        raise UsageError(f"unknown collocation strategy '{strategy}'")
    if strategy == "interface-biased" and model is None:
        raise UsageError("interface-biased sampling needs a model to evaluate psi")
    rng = np.random.default_rng(seed)

    def draw(k):
        pts = np.empty((k, 4))
        pts[:, :3] = rng.uniform(-1.0, 1.0, size=(k, 3))
        pts[:, 3] = rng.uniform(0.0, 1.0, size=k)
        return pts

    if strategy == "uniform":
        pts = draw(n)
    else:
        kept = []
        have = 0
        while have < n:
            cand = draw(max(2 * n, 64))
            psi, _, _ = model.evaluate(cand)
            coin = rng.uniform(0.0, 1.0, size=cand.shape[0])
            keep = (np.abs(psi) < _INTERFACE_BAND) | (coin < _REJECT_KEEP)
            cand = cand[keep]
            kept.append(cand)
            have += cand.shape[0]
        pts = np.concatenate(kept, axis=0)[:n]
    return CollocationBatch(pts, np.ones(n), seed=seed, strategy=strategy)


@dataclass
class ResidualDiagnostics:
    """Per-point residual magnitudes, split by physical origin."""

    momentum: np.ndarray      # (N,) |R_mom|^2 per point, unweighted
    divergence: np.ndarray    # (N,) R_div^2 per point, unweighted
    weights: np.ndarray
    fd_step: float
    flagged: list = field(default_factory=list)

    @property
    def momentum_mean(self):
        return float(np.mean(self.weights * self.momentum))

    @property
    def divergence_mean(self):
        return float(np.mean(self.weights * self.divergence))


def _chain_factors(domain):
    """(space, time) derivative scalings from normalized to simulation units."""
    if domain is None:
        return 1.0, 1.0
    ext = np.asarray(domain.extent_sim(), dtype=np.float64)
    cx = 2.0 / ext
    if np.max(np.abs(cx - cx[0])) > 1e-12 * np.abs(cx[0]):
        raise UsageError("PDE residual needs an isotropic normalization; "
                         f"domain extents {tuple(ext)} differ")
    t0, t1 = domain.time_span
    # normalized t spans [0, 1] over (t1 - t0) seconds of simulation time
    ct = domain.time_scale / (t1 - t0)
    return float(cx[0]), float(ct)


def _material_mix(psi, materials):
    """Dimensionless density/viscosity mixes and their slopes in psi."""
    r_rho = materials.rho2 / materials.rho1
    r_mu = materials.mu2 / materials.mu1
    rho = 0.5 * ((1.0 + psi) + (1.0 - psi) * r_rho)
    mu = 0.5 * ((1.0 + psi) + (1.0 - psi) * r_mu)
    return rho, mu, 0.5 * (1.0 - r_rho), 0.5 * (1.0 - r_mu)


def _residual_terms(d, materials, cx, ct, eps):
    """Momentum residual (N,3) and divergence residual (N,) in sim units."""
    rho, mu, _, _ = _material_mix(d.psi, materials)
    lap_psi = cx * cx * d.lap_psi
    eta = d.psi ** 3 - d.psi - eps * eps * lap_psi
    accel = ct * d.du_dt + np.einsum("nj,nij->ni", d.u, cx * d.du_dx)
    r_mom = (rho[:, None] * accel
             - (mu / materials.Re)[:, None] * (cx * cx * d.lap_u)
             + cx * d.dp_dx
             + (eta / materials.We)[:, None] * (cx * d.dpsi_dx))
    r_div = cx * np.einsum("nii->n", d.du_dx)
    return r_mom, r_div, eta


def pde_residual(model, batch, materials, fd_step=DEFAULT_FD_STEP,
                 domain=None, interface_width=0.0):
    """Weighted mean squared PDE residual of the field at the batch points.

    model needs only `evaluate((N, 4)) -> (psi, u, p)`, so analytic probes
    work.  With a domain the derivatives are chained into simulation units;
    without one the residual is taken in the model's native coordinates.
    interface_width is the phase-field epsilon entering the tension term.
    """
    cx, ct = _chain_factors(domain)
    d = spacetime_derivatives(model, batch.points, fd_step)
    r_mom, r_div, _ = _residual_terms(d, materials, cx, ct, interface_width)
    mom2 = np.sum(r_mom ** 2, axis=1)
    div2 = r_div ** 2
    diag = ResidualDiagnostics(mom2, div2, batch.weights, fd_step)
    bad = ~(np.isfinite(mom2) & np.isfinite(div2))
    if np.any(bad):
        diag.flagged = list(np.nonzero(bad)[0])
        raise ResidualError(f"non-finite residual at {int(bad.sum())} of "
                            f"{len(batch)} points", diag.flagged)
    loss = float(np.mean(batch.weights * (mom2 + div2)))
    return loss, diag


def pde_residual_backward(model, batch, materials, fd_step, tape,
                          domain=None, interface_width=0.0):
    """Accumulate the parameter gradient of the residual loss into tape.

    The loss is recomputed from one batched forward over all stencil sites;
    the chain back through every finite-difference probe lands in a single
    backward() call.  Returns (loss, tape).
    """
    cx, ct = _chain_factors(domain)
    h = float(fd_step)
    if h <= 0:
        raise UsageError(f"fd step must be > 0, got {h}")
    pts = batch.points
    n = pts.shape[0]
    sites = stencil_points(pts, h).reshape(9 * n, 4)
    (psi_all, u_all, p_all), cache = forward_batch(model, sites, want_cache=True)
    psi = psi_all.reshape(9, n)
    u = u_all.reshape(9, n, 3)
    p = p_all.reshape(9, n)

    inv2h = 1.0 / (2.0 * h)
    invh2 = 1.0 / (h * h)
    dpsi_dx = np.stack([(psi[2 * a + 2] - psi[2 * a + 1]) * inv2h for a in range(3)], axis=-1)
    du_dx = np.stack([(u[2 * a + 2] - u[2 * a + 1]) * inv2h for a in range(3)], axis=-1)
    du_dt = (u[8] - u[7]) * inv2h
    dp_dx = np.stack([(p[2 * a + 2] - p[2 * a + 1]) * inv2h for a in range(3)], axis=-1)
    lap_psi = sum(psi[2 * a + 1] - 2.0 * psi[0] + psi[2 * a + 2] for a in range(3)) * invh2
    lap_u = sum(u[2 * a + 1] - 2.0 * u[0] + u[2 * a + 2] for a in range(3)) * invh2

    psi0, u0 = psi[0], u[0]
    rho, mu, drho, dmu = _material_mix(psi0, materials)
    eps2 = interface_width * interface_width
    lap_psi_sim = cx * cx * lap_psi
    eta = psi0 ** 3 - psi0 - eps2 * lap_psi_sim
    accel = ct * du_dt + np.einsum("nj,nij->ni", u0, cx * du_dx)
    visc = (mu / materials.Re)[:, None] * (cx * cx * lap_u)
    tension_dir = cx * dpsi_dx                       # grad psi, sim units
    r_mom = (rho[:, None] * accel - visc + cx * dp_dx
             + (eta / materials.We)[:, None] * tension_dir)
    r_div = cx * np.einsum("nii->n", du_dx)
    mom2 = np.sum(r_mom ** 2, axis=1)
    div2 = r_div ** 2
    bad = ~(np.isfinite(mom2) & np.isfinite(div2))
    if np.any(bad):
        raise ResidualError(f"non-finite residual at {int(bad.sum())} of "
                            f"{len(batch)} points", list(np.nonzero(bad)[0]))
    w = batch.weights
    loss = float(np.mean(w * (mom2 + div2)))

    g_mom = (2.0 / n) * w[:, None] * r_mom           # dL/dR_mom, (N, 3)
    g_div = (2.0 / n) * w * r_div                    # dL/dR_div, (N,)

    d_psi = np.zeros((9, n))
    d_u = np.zeros((9, n, 3))
    d_p = np.zeros((9, n))

    # center site: material mixes, eta's local part, advecting velocity
    gm_dot_accel = np.einsum("ni,ni->n", g_mom, accel)
    gm_dot_lapu = np.einsum("ni,ni->n", g_mom, cx * cx * lap_u)
    gm_dot_tension = np.einsum("ni,ni->n", g_mom, tension_dir)
    deta_dpsi0 = (3.0 * psi0 ** 2 - 1.0) + eps2 * cx * cx * 6.0 * invh2
    d_psi[0] = (gm_dot_accel * drho
                - gm_dot_lapu * dmu / materials.Re
                + gm_dot_tension * deta_dpsi0 / materials.We)
    d_u[0] = (rho[:, None] * np.einsum("ni,nij->nj", g_mom, cx * du_dx)
              + g_mom * (mu / materials.Re)[:, None] * (cx * cx * 6.0 * invh2))

    for a in range(3):
        for s, sign in ((2 * a + 1, -1.0), (2 * a + 2, 1.0)):
            step = sign * inv2h
            # eta through the psi Laplacian, and grad psi in the tension term
            d_psi[s] = (gm_dot_tension * (-eps2 * cx * cx * invh2) / materials.We
                        + g_mom[:, a] * (eta / materials.We) * cx * step)
            # advection Jacobian, velocity Laplacian, divergence
            d_u[s] = (g_mom * (rho * u0[:, a] * cx * step)[:, None]
                      - g_mom * (mu / materials.Re)[:, None] * (cx * cx * invh2))
            d_u[s, :, a] += g_div * cx * step
            d_p[s] = g_mom[:, a] * cx * step
    for s, sign in ((7, -1.0), (8, 1.0)):
        d_u[s] = g_mom * (rho * ct * sign * inv2h)[:, None]

    backward(model, tape, cache,
             d_psi=d_psi.reshape(9 * n),
             d_u=d_u.reshape(9 * n, 3),
             d_p=d_p.reshape(9 * n))
    return loss, tape
