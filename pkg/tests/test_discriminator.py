"""Patch critic: extraction, analytic loss values, gradients, robustness."""

import numpy as np
import pytest

from xflow4d.core.storage import write_checkpoint
from xflow4d.discriminator import (
    Critic,
    PatchBatch,
    critic_forward,
    discriminate,
    extract_patches,
    gan_losses,
    gan_losses_backward,
    init_critic,
    load_critic,
    save_critic,
)
from xflow4d.errors import UsageError
from xflow4d.xray import ProjectionImage


def random_batch(rng, n=3, s=8, label="real"):
    return PatchBatch(rng.uniform(0.2, 1.0, size=(n, s, s)), label)


def zero_head(critic):
    """Critic that outputs logit 0 (probability 1/2) for every patch."""
    params = critic.params.copy()
    for e in critic.layout:
        if e.name.startswith("head"):
            params[e.offset:e.offset + int(np.prod(e.shape))] = 0.0
    return critic.with_params(params)


def test_extract_patches_seeded_and_in_bounds():
    rng = np.random.default_rng(0)
    image = rng.uniform(0.0, 1.0, size=(16, 16))
    a = extract_patches(image, 5, 8, seed=42)
    b = extract_patches(image, 5, 8, seed=42)
    c = extract_patches(image, 5, 8, seed=43)
    assert np.array_equal(a.patches, b.patches)
    assert np.array_equal(a.offsets, b.offsets)
    assert not np.array_equal(a.patches, c.patches)
    assert a.patches.shape == (5, 8, 8)
    for (oy, ox), patch in zip(a.offsets, a.patches):
        assert 0 <= oy <= 8 and 0 <= ox <= 8
        np.testing.assert_array_equal(patch, image[oy:oy + 8, ox:ox + 8])


def test_extract_patches_reads_projection_metadata():
    img = ProjectionImage(np.ones((12, 12)), 23.8, 0.75)
    batch = extract_patches(img, 2, 8, seed=1, label="generated")
    assert batch.angle_deg == 23.8
    assert batch.t == 0.75
    assert batch.label == "generated"


def test_extract_patches_validation():
    image = np.ones((10, 10))
    with pytest.raises(UsageError):
        extract_patches(image, 2, 11, seed=0)
    with pytest.raises(UsageError):
        extract_patches(image, 0, 4, seed=0)


def test_patch_batch_validation():
    with pytest.raises(UsageError):
        PatchBatch(np.ones((2, 4, 5)), "real")
    with pytest.raises(UsageError):
        PatchBatch(np.full((1, 4, 4), np.nan), "real")
    with pytest.raises(UsageError):
        PatchBatch(np.ones((1, 4, 4)), "synthetic")


def test_constant_half_critic_gives_log2_losses():
    rng = np.random.default_rng(5)
    critic = zero_head(init_critic(7))
    real = random_batch(rng, label="real")
    fake = random_batch(rng, label="generated")
    l_d, l_g = gan_losses(critic, real, fake)
    assert abs(l_d - 2.0 * np.log(2.0)) < 1e-12
    assert abs(l_g - np.log(2.0)) < 1e-12


def test_critic_param_gradient_matches_fd():
    rng = np.random.default_rng(11)
    critic = init_critic(3)
    real = random_batch(rng)
    fake = random_batch(rng, label="generated")
    l_d, _, g_params, _ = gan_losses_backward(critic, real, fake)
    idx = rng.choice(critic.params.size, size=120, replace=False)
    h = 1e-5
    worst = 0.0
    for i in idx:
        for sign, store in ((1, "hi"), (-1, "lo")):
            p = critic.params.copy()
            p[i] += sign * h
            vals = gan_losses(critic.with_params(p), real, fake)
            if sign > 0:
                hi = vals[0]
            else:
                lo = vals[0]
        fd = (hi - lo) / (2 * h)
        worst = max(worst, abs(fd - g_params[i]) / max(1.0, abs(fd)))
    assert worst < 1e-6


def test_fake_pixel_gradient_matches_fd():
    rng = np.random.default_rng(13)
    critic = init_critic(3)
    real = random_batch(rng)
    fake = random_batch(rng, label="generated")
    _, l_g, _, d_fake = gan_losses_backward(critic, real, fake)
    assert d_fake.shape == fake.patches.shape
    h = 1e-6
    for (k, i, j) in ((0, 2, 3), (1, 5, 5), (2, 0, 7)):
        for sign in (1, -1):
            p = fake.patches.copy()
            p[k, i, j] += sign * h
            bumped = PatchBatch(p, "generated")
            val = gan_losses(critic, real, bumped)[1]
            if sign > 0:
                hi = val
            else:
                lo = val
        fd = (hi - lo) / (2 * h)
        assert fd == pytest.approx(d_fake[k, i, j], rel=1e-5, abs=1e-10)


def test_probability_clamp_keeps_losses_finite():
    rng = np.random.default_rng(17)
    for trial in range(50):
        critic = init_critic(trial)
        # blow the logits out to saturate the sigmoid in both directions
        critic = critic.with_params(critic.params * rng.uniform(10.0, 1e3))
        real = random_batch(rng)
        fake = random_batch(rng, label="generated")
        l_d, l_g = gan_losses(critic, real, fake)
        assert np.isfinite(l_d) and np.isfinite(l_g)


def test_discriminate_is_a_probability():
    rng = np.random.default_rng(19)
    critic = init_critic(1)
    p = discriminate(critic, rng.uniform(0, 1, size=(8, 8)))
    assert 0.0 < p < 1.0
    assert discriminate(zero_head(critic), rng.uniform(0, 1, size=(8, 8))) == 0.5


def test_small_patches_rejected():
    critic = init_critic(1)
    with pytest.raises(UsageError):
        critic_forward(critic, np.ones((1, 4, 4)))


def test_init_critic_seeded_with_zero_biases():
    a, b, c = init_critic(9), init_critic(9), init_critic(10)
    assert np.array_equal(a.params, b.params)
    assert not np.array_equal(a.params, c.params)
    views = a.views()
    for name, arr in views.items():
        if name.endswith(".b"):
            assert np.all(arr == 0.0)


def test_save_load_critic_round_trip(tmp_path):
    critic = init_critic(21)
    path = str(tmp_path / "critic.ckpt")
    save_critic(path, critic, header_extra={"epoch": 12})
    loaded, header = load_critic(path)
    assert np.array_equal(loaded.params, critic.params)
    assert header["epoch"] == 12
    wrong = str(tmp_path / "other.ckpt")
    write_checkpoint(wrong, {"kind": "field"}, {"params": critic.params})
    with pytest.raises(UsageError):
        load_critic(wrong)
