"""Adversarial critic: a small convolutional patch classifier and GAN losses.

The critic scores 2D patches cut from projection images.  Renders at angles
never measured have no pixel targets, so realism there is enforced by making
generated patches indistinguishable from patches of the measured views.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .core.storage import read_checkpoint, write_checkpoint

CRITIC_CHANNELS = (16, 32, 64)
DEFAULT_PATCH = 16
LEAK = 0.2
_CLAMP = 1e-7


@dataclass(frozen=True)
class PatchBatch:
    """A batch of square patches plus provenance metadata."""

    patches: np.ndarray           # (N, s, s)
    label: str                    # "real" | "generated"
    angle_deg: float | None = None
    t: float | None = None
    offsets: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.patches, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2] or arr.shape[0] < 1:
            raise UsageError(f"patches must be (N >= 1, s, s), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise UsageError("patches contain non-finite values")
        if self.label not in ("real", "generated"):
            raise UsageError(f"label must be 'real' or 'generated', got {self.label!r}")
        object.__setattr__(self, "patches", arr)

    def __len__(self):
        return self.patches.shape[0]

    @property
    def size(self):
        return self.patches.shape[1]


def extract_patches(image, n, s, seed, label="real"):
    """Cut n s-by-s patches at seeded uniform-random offsets."""
    data = (np.asarray(image.transmission) if hasattr(image, "transmission")
            else np.asarray(image, dtype=np.float64))
    h, w = data.shape
    if s < 1 or s > h or s > w:
        raise UsageError(f"patch size {s} does not fit a {h}x{w} image")
    if n < 1:
        raise UsageError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    oy = rng.integers(0, h - s + 1, size=n)
    ox = rng.integers(0, w - s + 1, size=n)
    patches = np.stack([data[oy[i]:oy[i] + s, ox[i]:ox[i] + s] for i in range(n)])
    meta = {}
    if hasattr(image, "angle_deg"):
        meta["angle_deg"] = float(image.angle_deg)
    if hasattr(image, "t"):
        meta["t"] = float(image.t)
    return PatchBatch(patches, label, offsets=np.stack([oy, ox], axis=1),
                      seed=seed, **meta)


@dataclass(frozen=True)
class _Entry:
    name: str
    offset: int
    shape: tuple


def _critic_layout():
    entries = []
    off = 0
    c_in = 1
    for i, c_out in enumerate(CRITIC_CHANNELS):
        for name, shape in ((f"conv{i}.w", (c_out, c_in, 3, 3)), (f"conv{i}.b", (c_out,))):
            entries.append(_Entry(name, off, shape))
            off += int(np.prod(shape))
        c_in = c_out
    for name, shape in (("head.w", (CRITIC_CHANNELS[-1], 1)), ("head.b", (1,))):
        entries.append(_Entry(name, off, shape))
        off += int(np.prod(shape))
    return tuple(entries), off


@dataclass(frozen=True)
class Critic:
    """Patch classifier: 3 stride-2 conv stages, global average, affine logit."""

    params: np.ndarray
    layout: tuple = field(default=None)

    def __post_init__(self):
        layout, count = _critic_layout()
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (count,):
            raise UsageError(f"critic parameter vector must have {count} entries, got {p.shape}")
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "layout", layout)

    def views(self):
        return {e.name: self.params[e.offset:e.offset + int(np.prod(e.shape))].reshape(e.shape)
                for e in self.layout}

    def with_params(self, params):
        return Critic(params)


def init_critic(seed):
    """He-uniform convolution weights (leaky-ReLU gain), zero biases."""
    layout, count = _critic_layout()
    rng = np.random.default_rng(seed)
    params = np.zeros(count)
    gain2 = 2.0 / (1.0 + LEAK * LEAK)
    for e in layout:
        if e.name.endswith(".b"):
            continue
        if e.name.startswith("conv"):
            fan_in = int(np.prod(e.shape[1:]))
            bound = np.sqrt(3.0 * gain2 / fan_in)
        else:
            fan_in = e.shape[0]
            bound = np.sqrt(3.0 / fan_in)
        n = int(np.prod(e.shape))
        params[e.offset:e.offset + n] = rng.uniform(-bound, bound, size=n)
    return Critic(params)


def _im2col(x, ho, wo):
    """(N, C, H, W) with pad 1 -> (N, C*9, ho*wo) for 3x3 stride-2 windows."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, c, 9, ho, wo))
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky * 3 + kx] = xp[:, :, ky:ky + 2 * ho:2, kx:kx + 2 * wo:2]
    return cols.reshape(n, c * 9, ho * wo)


def _col2im(dcols, shape, ho, wo):
    n, c, h, w = shape
    d = dcols.reshape(n, c, 9, ho, wo)
    dxp = np.zeros((n, c, h + 2, w + 2))
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky:ky + 2 * ho:2, kx:kx + 2 * wo:2] += d[:, :, ky * 3 + kx]
    return dxp[:, :, 1:-1, 1:-1]


def _out_size(n):
    return (n - 1) // 2 + 1


def critic_forward(critic, patches, want_cache=False):
    """Logits for a (N, s, s) patch batch; cache feeds critic_backward."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if not np.all(np.isfinite(x)):
        raise UsageError("critic input contains non-finite values")
    if min(x.shape[1], x.shape[2]) < 8:
        raise UsageError(f"patches of {x.shape[1]}x{x.shape[2]} are too small "
                         "for three stride-2 stages")
    v = critic.views()
    h = x[:, None]                       # (N, 1, s, s)
    cache = {"stages": []}
    for i, c_out in enumerate(CRITIC_CHANNELS):
        n, c, hh, ww = h.shape
        ho, wo = _out_size(hh), _out_size(ww)
        cols = _im2col(h, ho, wo)
        w2 = v[f"conv{i}.w"].reshape(c_out, c * 9)
        pre = np.einsum("oc,ncp->nop", w2, cols) + v[f"conv{i}.b"][None, :, None]
        act = np.where(pre > 0, pre, LEAK * pre)
        cache["stages"].append((h.shape, cols, pre, ho, wo))
        h = act.reshape(n, c_out, ho, wo)
    pooled = h.mean(axis=(2, 3))         # (N, 64)
    logits = pooled @ v["head.w"][:, 0] + v["head.b"][0]
    cache["pooled"] = pooled
    cache["final_shape"] = h.shape
    return (logits, cache) if want_cache else logits


def critic_backward(critic, cache, d_logits):
    """Parameter and input gradients for upstream logit gradients.

    Returns (grad_params, d_patches) with grad_params flat like critic.params.
    """
    v = critic.views()
    d_logits = np.asarray(d_logits, dtype=np.float64)
    g = {e.name: np.zeros(e.shape) for e in critic.layout}
    g["head.w"][:, 0] = cache["pooled"].T @ d_logits
    g["head.b"][0] = d_logits.sum()
    d_pooled = d_logits[:, None] * v["head.w"][None, :, 0]
    n, c_out, ho, wo = cache["final_shape"]
    dh = np.broadcast_to(d_pooled[:, :, None, None] / (ho * wo),
                         (n, c_out, ho, wo)).copy()
    for i in reversed(range(len(CRITIC_CHANNELS))):
        in_shape, cols, pre, ho, wo = cache["stages"][i]
        c_out = CRITIC_CHANNELS[i]
        dact = dh.reshape(n, c_out, ho * wo)
        dpre = dact * np.where(pre > 0, 1.0, LEAK)
        g[f"conv{i}.b"][:] = dpre.sum(axis=(0, 2))
        w2 = v[f"conv{i}.w"].reshape(c_out, -1)
        g[f"conv{i}.w"][:] = np.einsum("nop,ncp->oc", dpre, cols).reshape(g[f"conv{i}.w"].shape)
        dcols = np.einsum("oc,nop->ncp", w2, dpre)
        dh = _col2im(dcols, in_shape, ho, wo)
    grad = np.empty_like(critic.params)
    for e in critic.layout:
        grad[e.offset:e.offset + int(np.prod(e.shape))] = g[e.name].ravel()
    return grad, dh[:, 0]


def _sigmoid(z):
    # evaluated through exp of negative magnitudes only, so it never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def discriminate(critic, patch):
    """Probability the patch came from a measured projection."""
    logit = critic_forward(critic, patch)
    return float(_sigmoid(logit)[0])


def _probs(logits):
    return np.clip(_sigmoid(np.asarray(logits, dtype=np.float64)), _CLAMP, 1.0 - _CLAMP)


def gan_losses(critic, real, fake):
    """(L_D, L_G_adv) for a real and a generated patch batch.

    L_D = -[E log D(real) + E log(1 - D(fake))]; the generator term is the
    non-saturating form -E log D(fake).  Probabilities are clamped to
    [1e-7, 1 - 1e-7] before the logs so both losses stay finite.
    """
    if len(real) < 1 or len(fake) < 1:
        raise UsageError("gan_losses needs non-empty real and fake batches")
    p_real = _probs(critic_forward(critic, real.patches))
    p_fake = _probs(critic_forward(critic, fake.patches))
    l_d = -(float(np.mean(np.log(p_real))) + float(np.mean(np.log(1.0 - p_fake))))
    l_g = -float(np.mean(np.log(p_fake)))
    return l_d, l_g


def gan_losses_backward(critic, real, fake):
    """Losses plus the gradients training needs.

    Returns (L_D, L_G_adv, d_params_LD, d_fake_patches_LG): the critic's
    parameter gradient of L_D and the fake-patch pixel gradient of L_G_adv
    (the path back into the renderer).
    """
    if len(real) < 1 or len(fake) < 1:
        raise UsageError("gan_losses needs non-empty real and fake batches")
    zr, cr = critic_forward(critic, real.patches, want_cache=True)
    zf, cf = critic_forward(critic, fake.patches, want_cache=True)
    pr, pf = _probs(zr), _probs(zf)
    l_d = -(float(np.mean(np.log(pr))) + float(np.mean(np.log(1.0 - pf))))
    l_g = -float(np.mean(np.log(pf)))
    # d/dz of -log sigma(z) is sigma(z) - 1; of -log(1 - sigma(z)) is sigma(z)
    nr, nf = len(real), len(fake)
    g_real, _ = critic_backward(critic, cr, (pr - 1.0) / nr)
    g_fake, _ = critic_backward(critic, cf, pf / nf)
    d_params_ld = g_real + g_fake
    _, d_fake = critic_backward(critic, cf, (pf - 1.0) / nf)
    return l_d, l_g, d_params_ld, d_fake


def save_critic(path, critic, header_extra=None):
    header = {"kind": "critic",
              "channels": list(CRITIC_CHANNELS),
              "layout": [{"name": e.name, "shape": list(e.shape)} for e in critic.layout]}
    if header_extra:
        header.update(header_extra)
    write_checkpoint(path, header, [("params", critic.params)])


def load_critic(path):
    header, sections = read_checkpoint(path)
    if header.get("kind") != "critic":
        raise UsageError(f"checkpoint kind {header.get('kind')!r} is not a critic")
    return Critic(sections["params"]), header
