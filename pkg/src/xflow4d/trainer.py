"""Two-stage training loop for the neural field.

Stage 1 fits the measured views (self-consistency MSE) under the PDE
residual penalty.  Stage 2 adds adversarial pressure: half the iterations
render patches at a random azimuth, score them against patches of the
measured views with the critic, and update generator and critic in turn.
Everything is seeded; identical configs reproduce identical loss
histories bit for bit.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import xray
from .discriminator import (
    Critic,
    PatchBatch,
    extract_patches,
    gan_losses_backward,
    init_critic,
)
from .errors import TrainingAbortError, UsageError
from .neuralfield import (
    GradientTape,
    ModelSampler,
    init_parameters,
    save_model,
    load_model,
)
from .pinn import pde_residual_backward, sample_collocation
from .core.storage import write_checkpoint

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8
_MAX_STRIKES = 3


@dataclass
class RayBatch:
    """Pixel rays of one view at one time, with targets when measured."""

    origins: np.ndarray            # (M, 3) meters
    direction: np.ndarray          # unit 3-vector
    angle_deg: float
    t: float                       # seconds
    view: int | None = None        # dataset view id; None for random angles
    measured: np.ndarray | None = None

    def __post_init__(self):
        if (self.view is None) != (self.measured is None):
            raise UsageError("measured values present iff the view is a dataset view")


@dataclass
class TrainState:
    epoch: int
    stage: int
    model: "object"                 # FieldModel (generator)
    critic: Critic
    gen_m: np.ndarray
    gen_v: np.ndarray
    gen_t: int
    critic_m: np.ndarray
    critic_v: np.ndarray
    critic_t: int
    rngs: dict
    strikes: int = 0
    history: list = field(default_factory=list)
    measured: list = field(default_factory=list)   # [view][frame] -> (H, W)


def mse_loss(rendered, measured):
    """Mean squared difference; lists of per-view arrays are summed."""
    if isinstance(rendered, (list, tuple)) or isinstance(measured, (list, tuple)):
        if not (isinstance(rendered, (list, tuple)) and isinstance(measured, (list, tuple))
                and len(rendered) == len(measured)):
            raise UsageError("rendered/measured view lists differ in length")
        return float(sum(mse_loss(r, m) for r, m in zip(rendered, measured)))
    r = np.asarray(rendered, dtype=np.float64).ravel()
    m = np.asarray(measured, dtype=np.float64).ravel()
    if r.shape != m.shape or r.size < 1:
        raise UsageError(f"length mismatch: rendered {r.shape} vs measured {m.shape}")
    return float(np.mean((r - m) ** 2))


def optimizer_step(params, grads, moments, lr):
    """Bias-corrected Adam; a non-finite gradient leaves everything unchanged."""
    m, v, t = moments
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or m.shape != params.shape or v.shape != params.shape:
        raise UsageError("params, grads, and moments must be aligned")
    if not np.all(np.isfinite(grads)):
        return params, (m, v, t)
    t = t + 1
    m = _ADAM_B1 * m + (1.0 - _ADAM_B1) * grads
    v = _ADAM_B2 * v + (1.0 - _ADAM_B2) * grads * grads
    m_hat = m / (1.0 - _ADAM_B1 ** t)
    v_hat = v / (1.0 - _ADAM_B2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS), (m, v, t)


def init_train_state(config, dataset):
    """Fresh state with all measured projections preloaded.

    Preloading means no iteration ever touches the dataset accessor, so
    random-angle iterations provably read no measured pixels.
    """
    t = config.training
    model = init_parameters(t.model, config.seeds.init, materials=config.materials)
    critic = init_critic(config.seeds.critic_init)
    rngs = {name: np.random.default_rng(getattr(config.seeds, name))
            for name in ("ray", "patch", "angle", "collocation", "jitter")}
    measured = [[np.asarray(dataset.projection(v, f), dtype=np.float64)
                 for f in range(dataset.n_frames)]
                for v in range(dataset.n_views)]
    return TrainState(
        epoch=0, stage=1, model=model, critic=critic,
        gen_m=np.zeros_like(model.params), gen_v=np.zeros_like(model.params), gen_t=0,
        critic_m=np.zeros_like(critic.params), critic_v=np.zeros_like(critic.params),
        critic_t=0, rngs=rngs, measured=measured)


def _pde_ramp(epoch, config):
    t = config.training
    ramp_epochs = max(1, int(round(t.pde_ramp_fraction * t.epochs)))
    return min(1.0, (epoch + 1) / ramp_epochs)


def _integrate_with_grad(sampler, batch, detector, domain, n_samples, jitter_rng,
                         upstreams):
    """Transmissions for a ray batch, recording slots for the backward pass.

    Returns (trans, closure); closure(d_trans) fills the per-call upstream
    arrays that backward_beta expects, in recording order.
    """
    start = len(sampler.records)
    int_d, int_b = xray.integrate_rays(sampler, batch.origins, batch.direction,
                                       batch.t, domain, n_samples, rng=jitter_rng)
    n_calls = len(sampler.records) - start
    trans = xray.transmission(int_b, detector.energy_ev)
    width = 2.0 * xray._segment_half_length(domain) / n_samples
    k = detector.k
    slots = [np.zeros(r[0].shape[0]) for r in sampler.records[start:]]
    upstreams.extend(slots)

    def push(d_trans):
        d_int_b = np.asarray(d_trans) * trans * (-2.0 * k)
        flat = np.repeat(d_int_b, n_samples) * width
        off = 0
        for s in slots:
            s += flat[off:off + s.size]
            off += s.size

    return trans, push


def _pixel_origins(detector, angle_deg, idx):
    origins, direction = xray.pixel_rays(detector, angle_deg)
    return origins[idx], direction


def _patch_pixel_indices(offsets, s, width):
    """Flat pixel indices covering each s-by-s patch, patch-major."""
    idx = []
    for oy, ox in offsets:
        rows = (np.arange(oy, oy + s)[:, None] * width
                + np.arange(ox, ox + s)[None, :])
        idx.append(rows.ravel())
    return np.concatenate(idx)


def training_step(state, dataset, config):
    """One optimization step; returns (state, loss record)."""
    t_cfg = config.training
    w = t_cfg.loss_weights
    detector = dataset.detector
    domain = dataset.domain
    n_s = t_cfg.train_samples_per_ray
    epoch = state.epoch
    stage = 2 if epoch >= t_cfg.stage2_start_epoch else 1
    state.stage = stage
    lam_pde = w.pde * _pde_ramp(epoch, config)
    t0 = time.perf_counter()

    coin = False
    if stage == 2:
        coin = bool(state.rngs["angle"].uniform() < t_cfg.random_angle_probability)

    snapshot = (state.model.params.copy(), state.gen_m.copy(), state.gen_v.copy(),
                state.gen_t, state.critic.params.copy(), state.critic_m.copy(),
                state.critic_v.copy(), state.critic_t)

    sampler = ModelSampler(state.model, domain, keep_cache=True)
    upstreams = []
    tape = GradientTape(state.model)
    record = {"epoch": epoch, "stage": stage, "random_angle": coin}
    critic_grad = None
    finite = True

    if not coin:
        # measured-view iteration: self-consistency on both views + PDE
        frame = int(state.rngs["ray"].integers(dataset.n_frames))
        n_pix = detector.height * detector.width
        per_view = max(1, t_cfg.rays_per_step // max(1, dataset.n_views))
        renders, targets, pushes = [], [], []
        for view in range(dataset.n_views):
            idx = state.rngs["ray"].choice(n_pix, size=min(per_view, n_pix),
                                           replace=False)
            origins, direction = _pixel_origins(detector, dataset.view_angles[view],
                                                idx)
            batch = RayBatch(origins, direction, dataset.view_angles[view],
                             float(dataset.times[frame]), view=view,
                             measured=state.measured[view][frame].ravel()[idx])
            trans, push = _integrate_with_grad(sampler, batch, detector, domain,
                                               n_s, state.rngs["jitter"], upstreams)
            renders.append(trans)
            targets.append(batch.measured)
            pushes.append(push)
        l_mse = mse_loss(renders, targets)
        for trans, target, push in zip(renders, targets, pushes):
            push(w.mse * 2.0 * (trans - target) / trans.size)
        record["mse"] = l_mse
        record["gan"] = None
        record["critic"] = None
        gen_terms = w.mse * l_mse
    else:
        # random-angle iteration: adversarial realism, no measured pixels
        angle = float(state.rngs["angle"].uniform(0.0, 360.0))
        t_lo, t_hi = domain.time_span
        t_rand = float(state.rngs["angle"].uniform(t_lo, t_hi))
        s = t_cfg.patch_size
        n_patch = t_cfg.patches_per_step
        prng = state.rngs["patch"]
        oy = prng.integers(0, detector.height - s + 1, size=n_patch)
        ox = prng.integers(0, detector.width - s + 1, size=n_patch)
        offsets = np.stack([oy, ox], axis=1)
        idx = _patch_pixel_indices(offsets, s, detector.width)
        origins, direction = _pixel_origins(detector, angle, idx)
        batch = RayBatch(origins, direction, angle, t_rand)
        trans, push = _integrate_with_grad(sampler, batch, detector, domain,
                                           n_s, state.rngs["jitter"], upstreams)
        fake = PatchBatch(trans.reshape(n_patch, s, s), "generated",
                          angle_deg=angle, t=t_rand, offsets=offsets)
        view = int(prng.integers(dataset.n_views))
        frame = int(prng.integers(dataset.n_frames))
        real = extract_patches(state.measured[view][frame], n_patch, s,
                               int(prng.integers(2 ** 63)))
        l_d, l_g, d_critic, d_fake = gan_losses_backward(state.critic, real, fake)
        push(w.gan * d_fake.reshape(-1))
        critic_grad = d_critic
        record["mse"] = None
        record["gan"] = l_g
        record["critic"] = l_d
        gen_terms = w.gan * l_g

    # physics penalty on collocation over the full normalized time span;
    # the collocation stream advances even when the weight is zero so an
    # ablation shares every other random draw with the weighted run
    colloc_seed = int(state.rngs["collocation"].integers(2 ** 63))
    if lam_pde > 0.0:
        colloc = sample_collocation(t_cfg.collocation_points, colloc_seed)
        pde_tape = GradientTape(state.model)
        l_pde, pde_tape = pde_residual_backward(
            state.model, colloc, config.materials, t_cfg.fd_step, pde_tape,
            domain=domain, interface_width=config.sim.interface_width)
        pde_grad = pde_tape.grad
    else:
        l_pde = 0.0
        pde_grad = 0.0
    record["pde"] = l_pde
    record["lambda_pde"] = lam_pde
    total = gen_terms + lam_pde * l_pde
    record["total"] = total

    sampler.backward_beta(tape, upstreams)
    grad = tape.grad + lam_pde * pde_grad

    finite = (np.isfinite(total) and np.all(np.isfinite(grad))
              and (critic_grad is None or np.all(np.isfinite(critic_grad))))
    if not finite:
        (params, gm, gv, gt, cp, cm, cv, ct) = snapshot
        state.model = state.model.with_params(params)
        state.gen_m, state.gen_v, state.gen_t = gm, gv, gt
        state.critic = state.critic.with_params(cp)
        state.critic_m, state.critic_v, state.critic_t = cm, cv, ct
        state.strikes += 1
        record["event"] = "rejected"
        record["wall_time"] = time.perf_counter() - t0
        state.history.append(record)
        state.epoch += 1
        if state.strikes >= _MAX_STRIKES:
            raise TrainingAbortError(
                f"{_MAX_STRIKES} consecutive non-finite steps at epoch {epoch}")
        return state, record
    state.strikes = 0

    new_params, (state.gen_m, state.gen_v, state.gen_t) = optimizer_step(
        state.model.params, grad, (state.gen_m, state.gen_v, state.gen_t),
        t_cfg.learning_rate)
    state.model = state.model.with_params(new_params)
    if critic_grad is not None:
        for _ in range(t_cfg.critic_steps):
            new_cp, (state.critic_m, state.critic_v, state.critic_t) = optimizer_step(
                state.critic.params, critic_grad,
                (state.critic_m, state.critic_v, state.critic_t),
                t_cfg.critic_learning_rate)
            state.critic = state.critic.with_params(new_cp)
    record["wall_time"] = time.perf_counter() - t0
    state.history.append(record)
    state.epoch += 1
    return state, record


def _rng_states(state):
    return {name: rng.bit_generator.state for name, rng in state.rngs.items()}


def _restore_rngs(states):
    rngs = {}
    for name, st in states.items():
        g = np.random.default_rng(0)
        g.bit_generator.state = st
        rngs[name] = g
    return rngs


def save_train_checkpoint(path, state, config):
    """Model checkpoint with the full optimizer and schedule state riding along."""
    trainer_header = {
        "epoch": state.epoch, "stage": state.stage, "strikes": state.strikes,
        "gen_t": state.gen_t, "critic_t": state.critic_t,
        "rng_states": _rng_states(state),
    }
    save_model(path, state.model,
               header_extra={"trainer": trainer_header},
               sections_extra=[("gen_m", state.gen_m), ("gen_v", state.gen_v),
                               ("critic_params", state.critic.params),
                               ("critic_m", state.critic_m),
                               ("critic_v", state.critic_v)],
               domain=config.domain)


def load_train_checkpoint(path, dataset):
    """Rebuild a TrainState (measured views re-preloaded from the dataset)."""
    model, header, sections = load_model(path)
    if "trainer" not in header:
        raise UsageError(f"{path}: checkpoint carries no trainer state")
    tr = header["trainer"]
    measured = [[np.asarray(dataset.projection(v, f), dtype=np.float64)
                 for f in range(dataset.n_frames)]
                for v in range(dataset.n_views)]
    return TrainState(
        epoch=int(tr["epoch"]), stage=int(tr["stage"]), model=model,
        critic=Critic(sections["critic_params"]),
        gen_m=sections["gen_m"], gen_v=sections["gen_v"], gen_t=int(tr["gen_t"]),
        critic_m=sections["critic_m"], critic_v=sections["critic_v"],
        critic_t=int(tr["critic_t"]), rngs=_restore_rngs(tr["rng_states"]),
        strikes=int(tr["strikes"]), measured=measured)


def _validation_render(state, dataset, out_dir, epoch):
    angle = dataset.view_angles[0]
    t = float(dataset.times[0])
    img = xray.render_projection(ModelSampler(state.model, dataset.domain),
                                 angle, t, dataset.detector, dataset.domain)
    write_checkpoint(os.path.join(out_dir, f"val_{epoch:06d}.bin"),
                     {"kind": "projection", "angle_deg": angle, "t": t,
                      "epoch": epoch},
                     {"transmission": img.transmission})


def train(config, dataset, out_dir, resume=None, log_name="train.jsonl"):
    """Run the epoch loop; returns (state, final checkpoint path).

    Emits one JSON line per epoch to out_dir/train.jsonl and a checkpoint
    every checkpoint_every epochs plus one at the end.  With resume set to
    a checkpoint path, continues it and reproduces the loss sequence an
    uninterrupted run would have produced.
    """
    os.makedirs(out_dir, exist_ok=True)
    t_cfg = config.training
    if resume is not None:
        state = load_train_checkpoint(resume, dataset)
    else:
        state = init_train_state(config, dataset)
    log_path = os.path.join(out_dir, log_name)
    final_path = None
    with open(log_path, "a") as log:
        while state.epoch < t_cfg.epochs:
            state, record = training_step(state, dataset, config)
            log.write(json.dumps(record) + "\n")
            epoch_done = state.epoch
            if (epoch_done % t_cfg.checkpoint_every == 0
                    or epoch_done == t_cfg.epochs):
                final_path = os.path.join(out_dir, f"ckpt_{epoch_done:06d}.bin")
                save_train_checkpoint(final_path, state, config)
                _validation_render(state, dataset, out_dir, epoch_done)
    if final_path is None:
        final_path = os.path.join(out_dir, f"ckpt_{state.epoch:06d}.bin")
        save_train_checkpoint(final_path, state, config)
    return state, final_path
