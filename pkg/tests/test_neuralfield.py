"""Neural field: encoder, forward, reverse-mode gradients, checkpoints."""

import numpy as np
import pytest

from xflow4d.core.config import ModelShape
from xflow4d.errors import PoisonedModelError, UsageError
from xflow4d.neuralfield import (
    GradientTape,
    backward,
    build_layout,
    encode_features,
    feature_dim,
    forward,
    forward_batch,
    init_parameters,
    load_model,
    parameter_count,
    save_model,
    spacetime_derivatives,
    stencil_points,
)
from xflow4d.pinn import CollocationBatch

from util import WATER_AIR, tiny_domain

SHAPE = ModelShape(width=10, blocks=2, x_frequencies=2, t_frequencies=2)


def rand_points(n, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(n, 4))
    pts[:, 3] = rng.uniform(0, 1, size=n)
    return pts


def test_feature_dim_matches_encoder_output():
    pts = rand_points(5)
    feats = encode_features(pts, SHAPE)
    assert feats.shape == (5, feature_dim(SHAPE))
    assert np.all(np.abs(feats) <= 1.0 + 1e-12)


def test_layout_total_matches_parameter_count():
    layout, total = build_layout(SHAPE)
    assert total == parameter_count(SHAPE)
    assert sum(e.count for e in layout) == total
    offsets = [e.offset for e in layout]
    assert offsets == sorted(offsets)


def test_forward_is_deterministic_and_psi_bounded():
    model = init_parameters(SHAPE, seed=7)
    pts = rand_points(64)
    psi1, u1, p1 = forward_batch(model, pts)
    psi2, u2, p2 = forward_batch(model, pts)
    np.testing.assert_array_equal(psi1, psi2)
    np.testing.assert_array_equal(u1, u2)
    assert psi1.shape == (64,) and u1.shape == (64, 3) and p1.shape == (64,)
    assert np.all(np.abs(psi1) <= 1.0)
    # even with wild parameters the psi head stays squashed
    wild = model.with_params(np.asarray(model.params) * 50.0)
    psi_w, _, _ = forward_batch(wild, pts)
    assert np.all(np.abs(psi_w) <= 1.0)


def test_single_point_forward_returns_optics():
    model = init_parameters(SHAPE, seed=7, materials=WATER_AIR)
    psi, u, p, delta, beta = forward(model, (0.1, -0.2, 0.3), 0.5)
    lo = min(WATER_AIR.n1[1], WATER_AIR.n2[1])
    hi = max(WATER_AIR.n1[1], WATER_AIR.n2[1])
    assert lo <= beta <= hi
    assert np.isfinite(delta) and np.isfinite(p)


def test_outside_domain_warns():
    model = init_parameters(SHAPE, seed=7)
    with pytest.warns(UserWarning):
        forward(model, (1.5, 0.0, 0.0), 0.5)


def test_nonfinite_parameters_rejected():
    params = np.zeros(parameter_count(SHAPE))
    params[3] = np.inf
    with pytest.raises(PoisonedModelError):
        init_parameters(SHAPE, 0).with_params(params)


def test_backward_matches_finite_differences():
    model = init_parameters(SHAPE, seed=11)
    pts = rand_points(12, seed=3)
    cu = np.array([0.3, -0.7, 0.2])

    def loss_of(params):
        psi, u, p = forward_batch(model.with_params(params), pts)
        return float(psi.sum() + (u * cu).sum() + p.sum())

    (psi, u, p), cache = forward_batch(model, pts, want_cache=True)
    tape = GradientTape(model)
    backward(model, tape, cache,
             d_psi=np.ones_like(psi),
             d_u=np.tile(cu, (len(pts), 1)),
             d_p=np.ones_like(p))
    grad = tape.grad
    rng = np.random.default_rng(5)
    idx = rng.choice(grad.size, size=80, replace=False)
    h = 1e-6
    worst = 0.0
    base = np.asarray(model.params).copy()
    for i in idx:
        up, dn = base.copy(), base.copy()
        up[i] += h
        dn[i] -= h
        fd = (loss_of(up) - loss_of(dn)) / (2 * h)
        scale = max(abs(fd), abs(grad[i]), 1e-8)
        worst = max(worst, abs(fd - grad[i]) / scale)
    assert worst < 1e-5


def test_tape_accumulates_across_batches():
    model = init_parameters(SHAPE, seed=2)
    pts = rand_points(10, seed=9)
    (_, _, _), cache = forward_batch(model, pts, want_cache=True)
    tape = GradientTape(model)
    backward(model, tape, cache, d_psi=np.ones(10))
    once = tape.grad.copy()
    backward(model, tape, cache, d_psi=np.ones(10))
    np.testing.assert_allclose(tape.grad, 2 * once, rtol=1e-12)


def test_stencil_points_layout():
    pts = rand_points(3)
    st = stencil_points(pts, 0.05)
    # center plus -h/+h along each of 4 axes
    assert st.shape == (9, 3, 4)
    np.testing.assert_allclose(st[0], pts)
    np.testing.assert_allclose(st[1][:, 0], pts[:, 0] - 0.05)
    np.testing.assert_allclose(st[8][:, 3], pts[:, 3] + 0.05)


def test_spacetime_derivatives_of_smooth_field():
    model = init_parameters(SHAPE, seed=4)
    pts = rand_points(6, seed=1)
    d1 = spacetime_derivatives(model, pts, h=0.02)
    d2 = spacetime_derivatives(model, pts, h=0.01)
    # the MLP is smooth, so halving h should not move first derivatives much
    np.testing.assert_allclose(d1.dpsi_dx, d2.dpsi_dx, atol=2e-3)
    assert d1.psi.shape == (6,)
    assert d1.du_dx.shape == (6, 3, 3)
    assert d1.lap_u.shape == (6, 3)


def test_checkpoint_round_trip(tmp_path):
    dom = tiny_domain()
    model = init_parameters(SHAPE, seed=21, materials=WATER_AIR)
    path = str(tmp_path / "model.bin")
    save_model(path, model, header_extra={"note": {"epoch": 3}},
               sections_extra={"aux": np.arange(4.0)}, domain=dom)
    back, header, sections = load_model(path)
    np.testing.assert_array_equal(back.params, model.params)
    assert back.shape == model.shape
    assert back.materials == WATER_AIR
    assert header["note"]["epoch"] == 3
    np.testing.assert_array_equal(sections["aux"], np.arange(4.0))
    from xflow4d.neuralfield import checkpoint_domain
    assert checkpoint_domain(header).grid_shape == dom.grid_shape
