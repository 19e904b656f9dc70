"""Collision solver: setup validation, invariants, viscous decay."""

import hashlib

import numpy as np
import pytest

from xflow4d.core.config import MaterialPair
from xflow4d.core.types import FlowState
from xflow4d.errors import GeometryError, StepSizeError, UsageError
from xflow4d.fluidsim import (
    SimParams,
    cfl_number,
    init_binary_droplets,
    kinetic_energy,
    liquid_volume,
    params_with_dt_for,
    run_collision,
    step,
    velocity_divergence,
)

from util import WATER_AIR, tiny_domain


def smoke_params(n=16, steps_per_frame=8):
    # frame spacing is 0.5 sim units for the tiny two-interval domain
    h = 1.0 / n
    return SimParams(WATER_AIR, 0.12, ((-0.17, 0.0, 0.0), (0.17, 0.0, 0.0)),
                     0.5, 1.5 * h, 0.005, 0.5 / steps_per_frame,
                     steps_per_frame, "noslip")


def movie_digest(movie):
    h = hashlib.sha256()
    for st in movie.frames:
        h.update(st.psi.data.tobytes())
        for a in range(3):
            h.update(st.u[a].data.tobytes())
        h.update(st.p.data.tobytes())
    return h.hexdigest()


def test_params_validation():
    good = smoke_params()
    for bad in (
        dict(droplet_radius=-0.1),
        dict(interface_width=0.0),
        dict(mobility=0.0),
        dict(dt=0.0),
        dict(steps_per_frame=0),
        dict(bc="slippy"),
        dict(droplet_centers=((0.0, 0.0, 0.0),)),
    ):
        kw = dict(materials=good.materials, droplet_radius=good.droplet_radius,
                  droplet_centers=good.droplet_centers,
                  impact_speed=good.impact_speed,
                  interface_width=good.interface_width, mobility=good.mobility,
                  dt=good.dt, steps_per_frame=good.steps_per_frame, bc=good.bc)
        kw.update(bad)
        with pytest.raises(UsageError):
            SimParams(**kw)


def test_overlapping_droplets_rejected():
    spec = tiny_domain()
    p = smoke_params()
    p = SimParams(p.materials, 0.2, ((-0.15, 0, 0), (0.15, 0, 0)), 0.5,
                  p.interface_width, p.mobility, p.dt, p.steps_per_frame)
    with pytest.raises(GeometryError):
        init_binary_droplets(p, spec)


def test_droplet_outside_domain_rejected():
    spec = tiny_domain()
    p = smoke_params()
    p = SimParams(p.materials, 0.3, ((-0.3, 0, 0), (0.35, 0, 0)), 0.5,
                  p.interface_width, p.mobility, p.dt, p.steps_per_frame)
    with pytest.raises(GeometryError):
        init_binary_droplets(p, spec)


def test_under_resolved_interface_rejected():
    spec = tiny_domain(16)
    p = smoke_params()
    p = SimParams(p.materials, p.droplet_radius, p.droplet_centers, 0.5,
                  1.0 / 16, p.mobility, p.dt, p.steps_per_frame)
    with pytest.raises(UsageError):
        init_binary_droplets(p, spec)


def test_initial_liquid_volume_matches_droplet_radius():
    # droplet_radius is volume-equivalent: two drops carry 2*(4/3)*pi*R^3
    n = 64
    spec = tiny_domain(n)
    p = SimParams(WATER_AIR, 0.15, ((-0.2, 0, 0), (0.2, 0, 0)), 0.5,
                  2.0 / n, 0.005, 0.01, 1)
    vol = liquid_volume(init_binary_droplets(p, spec))
    target = 2.0 * (4.0 / 3.0) * np.pi * 0.15 ** 3
    assert vol == pytest.approx(target, rel=1e-2)


def test_dt_must_land_on_frame_grid():
    spec = tiny_domain()
    p = smoke_params()
    bad = SimParams(p.materials, p.droplet_radius, p.droplet_centers,
                    p.impact_speed, p.interface_width, p.mobility,
                    p.dt * 1.01, p.steps_per_frame)
    with pytest.raises(StepSizeError):
        run_collision(bad, spec)
    snapped = params_with_dt_for(bad, spec)
    assert snapped.dt == pytest.approx(0.5 / p.steps_per_frame)


def test_collision_run_invariants():
    spec = tiny_domain()
    movie = run_collision(smoke_params(), spec)
    assert len(movie.frames) == spec.frame_count
    v0 = liquid_volume(movie.frames[0])
    for st in movie.frames:
        # mass conservation, incompressibility, mirror symmetry of the
        # head-on setup, and a bounded phase field, every frame
        assert abs(liquid_volume(st) - v0) / v0 < 1e-2
        assert np.max(np.abs(velocity_divergence(st))) < 1e-5
        psi = st.psi.data
        assert psi.min() >= -1.0 and psi.max() <= 1.0
        mirror = max(
            np.max(np.abs(psi - psi[::-1])),
            np.max(np.abs(st.u[0].data + st.u[0].data[::-1])),
            np.max(np.abs(st.u[1].data - st.u[1].data[::-1])),
            np.max(np.abs(st.u[2].data - st.u[2].data[::-1])),
            np.max(np.abs(st.p.data - st.p.data[::-1])),
        )
        assert mirror < 1e-6


def test_collision_run_is_deterministic():
    spec = tiny_domain()
    a = movie_digest(run_collision(smoke_params(), spec))
    b = movie_digest(run_collision(smoke_params(), spec))
    assert a == b


def test_taylor_green_viscous_decay():
    # single phase (psi = 1): kinetic energy must follow exp(-4 nu k^2 t)
    n = 16
    spec = tiny_domain(n)
    m = MaterialPair(1.0, 1.0, 1.0, 1.0, (1e-6, 1e-8), (1e-9, 1e-12), 25.0, 1.0)
    nu = 1.0 / 25.0
    cs = [spec.axis_centers(a, units="sim") for a in range(3)]
    x, y, _ = np.meshgrid(*cs, indexing="ij")
    k = 2.0 * np.pi
    ux = np.sin(k * x) * np.cos(k * y)
    uy = -np.cos(k * x) * np.sin(k * y)
    uz = np.zeros_like(ux)
    p = 0.25 * (np.cos(2 * k * x) + np.cos(2 * k * y))
    state = FlowState.from_arrays(np.ones_like(ux), ux, uy, uz, p, 0.0, spec)
    params = SimParams(m, 0.1, ((-0.25, 0, 0), (0.25, 0, 0)), 0.0,
                       1.5 / n, 0.01, 0.004, 1, "periodic")
    ke0 = kinetic_energy(state, m)
    nsteps = 25
    for _ in range(nsteps):
        state = step(state, params)
    ratio = kinetic_energy(state, m) / ke0
    analytic = np.exp(-4.0 * nu * k * k * nsteps * params.dt)
    assert ratio == pytest.approx(analytic, rel=0.02)


def test_cfl_number():
    spec = tiny_domain(16)
    u = [np.full(spec.grid_shape, 0.3), np.zeros(spec.grid_shape),
         np.zeros(spec.grid_shape)]
    assert cfl_number(u, 0.1, spec.cell_size_sim()) == pytest.approx(
        0.3 * 0.1 * 16)


def test_energy_and_volume_formulas():
    spec = tiny_domain(16)
    cell = float(np.prod(spec.cell_size_sim()))
    psi = np.full(spec.grid_shape, 0.5)
    u = np.full(spec.grid_shape, 2.0)
    st = FlowState.from_arrays(psi, u, 0 * u, 0 * u, 0 * u, 0.0, spec)
    assert liquid_volume(st) == pytest.approx(0.75 * 16 ** 3 * cell)
    # sim-unit density is normalized by the liquid density
    rho = 0.75 + 0.25 * WATER_AIR.rho2 / WATER_AIR.rho1
    assert kinetic_energy(st, WATER_AIR) == pytest.approx(
        0.5 * rho * 4.0 * 16 ** 3 * cell)
