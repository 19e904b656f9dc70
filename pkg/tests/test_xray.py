"""Projection renderer: geometry, line integrals, dataset access."""

import numpy as np
import pytest

from xflow4d.errors import UsageError
from xflow4d.xray import (
    DetectorSpec,
    MovieSampler,
    ProjectionDataset,
    pixel_rays,
    ray_integrate,
    render_projection,
    transmission,
    view_basis,
    wavenumber,
)

from util import WATER_AIR, sphere_dataset, sphere_movie, tiny_detector, tiny_domain


class VacuumSampler:
    def sample(self, points, t):
        n = np.asarray(points).shape[0]
        return np.zeros(n), np.zeros(n)


class SphereSampler:
    """Uniform (delta0, beta0) ball of physical radius r at the origin."""

    def __init__(self, r, delta0=1e-6, beta0=1e-8):
        self.r = r
        self.delta0 = delta0
        self.beta0 = beta0

    def sample(self, points, t):
        inside = np.linalg.norm(np.asarray(points), axis=-1) <= self.r
        return np.where(inside, self.delta0, 0.0), np.where(inside, self.beta0, 0.0)


def test_vacuum_renders_unit_transmission():
    domain = tiny_domain()
    det = tiny_detector()
    img = render_projection(VacuumSampler(), 33.0, 0.0, det, domain)
    assert img.transmission.shape == (det.height, det.width)
    assert np.all(img.transmission == 1.0)


def test_sphere_chord_integrals_match_analytic():
    domain = tiny_domain()
    r = 0.4 * domain.half_extent[0]
    sampler = SphereSampler(r)
    direction = (0.0, 1.0, 0.0)
    for frac in (0.0, 0.3, 0.6, 0.8, 0.9):
        b = frac * r
        chord = 2.0 * np.sqrt(r * r - b * b)
        _, int_b = ray_integrate(sampler, (b, 0.0, 0.0), direction, 0.0,
                                 domain, n_samples=256)
        assert int_b == pytest.approx(sampler.beta0 * chord, rel=1e-3)


def test_ray_missing_everything_integrates_to_zero():
    domain = tiny_domain()
    r = 0.2 * domain.half_extent[0]
    int_d, int_b = ray_integrate(SphereSampler(r), (3.0 * r, 0.0, 0.0),
                                 (0.0, 1.0, 0.0), 0.0, domain)
    assert int_d == 0.0 and int_b == 0.0


def test_centered_sphere_is_rotation_invariant():
    domain = tiny_domain()
    det = tiny_detector()
    sampler = SphereSampler(0.4 * domain.half_extent[0])
    ref = render_projection(sampler, 0.0, 0.0, det, domain).transmission
    for angle in (23.8, 90.0, 137.0):
        img = render_projection(sampler, angle, 0.0, det, domain).transmission
        assert np.max(np.abs(img - ref)) < 1e-6


def test_transmission_is_beer_lambert():
    k = wavenumber(1e4)
    ib = np.array([0.0, 1e-9, 5e-9])
    np.testing.assert_allclose(transmission(ib, 1e4), np.exp(-2.0 * k * ib))
    with pytest.raises(UsageError):
        transmission(np.array([-1e-12]), 1e4)


def test_pixel_rays_geometry():
    det = tiny_detector(8)
    origins, direction = pixel_rays(det, 23.8)
    assert origins.shape == (64, 3)
    assert np.linalg.norm(direction) == pytest.approx(1.0)
    # detector plane passes through the domain center, normal to the beam
    assert np.max(np.abs(origins @ direction)) < 1e-18
    # neighbouring pixels are one pitch apart
    row = origins[:8]
    gaps = np.linalg.norm(np.diff(row, axis=0), axis=1)
    np.testing.assert_allclose(gaps, det.pixel_pitch)


def test_view_basis_is_orthonormal():
    for angle in (0.0, 23.8, 111.0):
        d, u, v = view_basis(angle)
        for a in (d, u, v):
            assert np.linalg.norm(a) == pytest.approx(1.0)
        assert abs(d @ u) < 1e-15 and abs(d @ v) < 1e-15 and abs(u @ v) < 1e-15


def test_jittered_rendering_is_seeded():
    domain = tiny_domain()
    det = tiny_detector()
    sampler = SphereSampler(0.4 * domain.half_extent[0])
    a = render_projection(sampler, 10.0, 0.0, det, domain,
                          rng=np.random.default_rng(7)).transmission
    b = render_projection(sampler, 10.0, 0.0, det, domain,
                          rng=np.random.default_rng(7)).transmission
    c = render_projection(sampler, 10.0, 0.0, det, domain,
                          rng=np.random.default_rng(8)).transmission
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_movie_sampler_mixture_and_vacuum():
    domain = tiny_domain()
    movie, _ = sphere_movie(domain, WATER_AIR)
    sampler = MovieSampler(movie, WATER_AIR)
    center = np.zeros((1, 3))
    delta, beta = sampler.sample(center, movie.times()[0])
    d1, b1 = WATER_AIR.n1
    assert delta[0] == pytest.approx(d1, rel=1e-6)
    assert beta[0] == pytest.approx(b1, rel=1e-6)
    # outside the physical box: hard vacuum, not a 50/50 mixture
    far = np.array([[10.0 * domain.half_extent[0], 0.0, 0.0]])
    delta, beta = sampler.sample(far, movie.times()[0])
    assert delta[0] == 0.0 and beta[0] == 0.0


def test_dataset_round_trips_rendered_images(tmp_path):
    ds_path = str(tmp_path / "ds")
    ds, movie, _ = sphere_dataset(ds_path, tiny_domain(16, 3))
    sampler = MovieSampler(movie, WATER_AIR)
    for view in range(ds.n_views):
        for frame in range(ds.n_frames):
            direct = render_projection(sampler, ds.view_angles[view],
                                       ds.times[frame], ds.detector,
                                       movie.spec).transmission
            stored = ds.projection(view, frame)
            np.testing.assert_allclose(stored, direct, atol=1e-7)


def test_projection_reads_are_counted(tmp_path):
    ds, _, _ = sphere_dataset(str(tmp_path / "ds"), tiny_domain(16, 2))
    assert ds.read_count == 0
    ds.projection(0, 0)
    ds.projection(0, 0)
    ds.projection(1, 1)
    assert ds.read_count == 3
    with pytest.raises(UsageError):
        ds.projection(0, 99)


def test_detector_spec_rejects_bad_values():
    with pytest.raises(UsageError):
        DetectorSpec(7, 8, 1e-5)
    with pytest.raises(UsageError):
        DetectorSpec(8, 8, 1e-5, samples_per_ray=31)
    with pytest.raises(UsageError):
        DetectorSpec(8, 8, 0.0)
    with pytest.raises(UsageError):
        DetectorSpec(8, 8, 1e-5, energy_ev=0.0)
