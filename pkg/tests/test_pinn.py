"""PDE residual: analytic probes, collocation sampling, gradient path."""

import numpy as np
import pytest

from xflow4d.core.config import ModelShape
from xflow4d.core.types import MaterialPair
from xflow4d.errors import UsageError
from xflow4d.neuralfield import GradientTape, init_parameters
from xflow4d.pinn import (
    CollocationBatch,
    pde_residual,
    pde_residual_backward,
    sample_collocation,
)

UNIT = MaterialPair(1.0, 1.0, 1.0, 1.0, (1e-6, 1e-8), (1e-9, 1e-12), 10.0, 1.0)


class Probe:
    """Analytic field standing in for a trained model."""

    def __init__(self, fn):
        self.fn = fn

    def evaluate(self, points):
        return self.fn(np.asarray(points, dtype=np.float64))


def batch_of(points):
    pts = np.asarray(points, dtype=np.float64)
    return CollocationBatch(pts, np.ones(pts.shape[0]))


def grid_batch(n=5, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.8, 0.8, size=(n, 4))
    pts[:, 3] = rng.uniform(0.1, 0.9, size=n)
    return batch_of(pts)


def test_quiescent_fluid_has_zero_residual():
    def fn(pts):
        n = pts.shape[0]
        return 0.4 * np.ones(n), np.zeros((n, 3)), 1.2 * np.ones(n)

    loss, diag = pde_residual(Probe(fn), grid_batch(), UNIT)
    assert loss < 1e-20


def test_rigid_translation_has_zero_residual():
    # uniform mixture translating at constant velocity: every derivative
    # vanishes identically, so the residual must be an exact zero
    def fn(pts):
        n = pts.shape[0]
        u = np.tile([0.6, -0.3, 0.2], (n, 1))
        return 0.3 * np.ones(n), u, 0.8 * np.ones(n)

    loss, diag = pde_residual(Probe(fn), grid_batch(seed=3), UNIT)
    assert loss < 1e-20
    assert np.all(diag.divergence == 0.0)


def tg_probe(materials):
    # doubly periodic vortex sheet; exact single-phase solution, so the
    # remaining residual is pure finite-difference truncation error
    k = np.pi
    nu = materials.mu1 / (materials.rho1 * materials.Re)

    def fn(pts):
        x, y, t = pts[:, 0], pts[:, 1], pts[:, 3]
        f = np.exp(-2.0 * nu * k * k * t)
        u = np.zeros((pts.shape[0], 3))
        u[:, 0] = f * np.sin(k * x) * np.cos(k * y)
        u[:, 1] = -f * np.cos(k * x) * np.sin(k * y)
        p = materials.rho1 * f * f / 4.0 * (np.cos(2 * k * x) + np.cos(2 * k * y))
        return np.ones(pts.shape[0]), u, p

    return Probe(fn)


def test_manufactured_solution_residual_is_second_order():
    probe = tg_probe(UNIT)
    b = grid_batch(n=24, seed=11)
    r = []
    for h in (0.02, 0.01, 0.005):
        loss, _ = pde_residual(probe, b, UNIT, fd_step=h)
        r.append(np.sqrt(loss))
    assert 3.0 < r[0] / r[1] < 5.0
    assert 3.0 < r[1] / r[2] < 5.0


def test_collocation_sampling_is_seeded_and_in_bounds():
    a = sample_collocation(200, seed=42)
    b = sample_collocation(200, seed=42)
    c = sample_collocation(200, seed=43)
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)
    assert np.all(np.abs(a.points[:, :3]) <= 1.0)
    assert np.all((a.points[:, 3] >= 0.0) & (a.points[:, 3] <= 1.0))
    assert np.all(a.weights > 0)
    assert len(a) == 200


def test_interface_biased_sampling_concentrates_points():
    def fn(pts):
        n = pts.shape[0]
        return np.tanh(pts[:, 0] / 0.05), np.zeros((n, 3)), np.zeros(n)

    probe = Probe(fn)
    flat = sample_collocation(4000, seed=7)
    biased = sample_collocation(4000, seed=7, strategy="interface-biased", model=probe)
    frac_flat = np.mean(np.abs(flat.points[:, 0]) < 0.1)
    frac_biased = np.mean(np.abs(biased.points[:, 0]) < 0.1)
    assert frac_biased > 2.0 * frac_flat


def test_interface_biased_needs_a_model():
    with pytest.raises(UsageError):
        sample_collocation(10, seed=0, strategy="interface-biased")


def test_residual_backward_matches_finite_differences():
    shape = ModelShape(width=8, blocks=2, x_frequencies=2, t_frequencies=1)
    model = init_parameters(shape, seed=5)
    b = grid_batch(n=6, seed=2)

    tape = GradientTape(model)
    loss, tape = pde_residual_backward(model, b, UNIT, 0.05, tape)
    grad = tape.grad

    def loss_of(params):
        l, _ = pde_residual(model.with_params(params), b, UNIT, fd_step=0.05)
        return l

    rng = np.random.default_rng(1)
    idx = rng.choice(grad.size, size=50, replace=False)
    base = np.asarray(model.params).copy()
    worst = 0.0
    for i in idx:
        up, dn = base.copy(), base.copy()
        up[i] += 1e-6
        dn[i] -= 1e-6
        fd = (loss_of(up) - loss_of(dn)) / 2e-6
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8))
    assert worst < 1e-4


def test_residual_with_domain_chains_units():
    # shrinking the box doubles every spatial derivative through the chain rule
    from xflow4d.core.types import DomainSpec

    probe = tg_probe(UNIT)
    b = grid_batch(n=16, seed=8)
    wide = DomainSpec((2.0, 2.0, 2.0), (0.0, 1.0), (16,) * 3, 2,
                      length_scale=1.0, time_scale=1.0)
    loss_native, _ = pde_residual(probe, b, UNIT, fd_step=0.01)
    loss_wide, _ = pde_residual(probe, b, UNIT, fd_step=0.01, domain=wide)
    # extent 2 with scale 1 means sim units == normalized units: same residual
    assert loss_wide == pytest.approx(loss_native, rel=1e-12)
