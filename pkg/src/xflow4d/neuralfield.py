"""Implicit 4D field: a coordinate network (x, t) -> (psi, u, p).

The network consumes normalized coordinates (x in [-1,1]^3, t in [0,1]),
expands them with sinusoidal features, runs a stack of residual blocks,
and reads out three heads: psi (tanh-squashed to [-1,1]), velocity u
(3 raw outputs) and pressure p (raw).  The optical pair (delta, beta)
is derived from psi through the material mixture law, never predicted
directly, so the render loss and the physics loss constrain the same
representation.

Everything is plain numpy on a flat float64 parameter vector with an
explicit layout manifest.  Reverse-mode gradients are hand-written
against cached activations; spacetime derivatives of the outputs are
taken by central finite differences of the network itself, which keeps
the training loop first-order in autodiff.
"""

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .core.config import ModelShape
from .core.storage import (domain_from_dict, domain_to_dict, materials_from_dict,
                           materials_to_dict, read_checkpoint, write_checkpoint)
from .errors import PoisonedModelError, TapeStateError, UsageError

DEFAULT_FD_STEP = 1.0 / 64.0


def feature_dim(shape):
    return 4 + 6 * shape.x_frequencies + 2 * shape.t_frequencies


def encode_features(points, shape):
    """Sinusoidal positional encoding; points is (N, 4) = (x, y, z, t)."""
    pts = np.asarray(points, dtype=np.float64)
    cols = [pts]
    x = pts[:, :3]
    t = pts[:, 3:4]
    for level in range(shape.x_frequencies):
        arg = (np.pi * 2.0 ** level) * x
        cols.append(np.sin(arg))
        cols.append(np.cos(arg))
    for level in range(shape.t_frequencies):
        arg = (np.pi * 2.0 ** level) * t
        cols.append(np.sin(arg))
        cols.append(np.cos(arg))
    return np.concatenate(cols, axis=1)


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple
    offset: int

    @property
    def count(self):
        return int(np.prod(self.shape))


def build_layout(shape):
    """Parameter layout manifest for a ModelShape, in storage order."""
    d, w = feature_dim(shape), shape.width
    entries = []
    offset = 0

    def add(name, shp):
        nonlocal offset
        entries.append(LayoutEntry(name, shp, offset))
        offset += int(np.prod(shp))

    add("in.w", (d, w))
    add("in.b", (w,))
    for i in range(shape.blocks):
        add(f"block{i}.w1", (w, w))
        add(f"block{i}.b1", (w,))
        add(f"block{i}.w2", (w, w))
        add(f"block{i}.b2", (w,))
    add("head_psi.w", (w, 1))
    add("head_psi.b", (1,))
    add("head_u.w", (w, 3))
    add("head_u.b", (3,))
    add("head_p.w", (w, 1))
    add("head_p.b", (1,))
    return tuple(entries), offset


def parameter_count(shape):
    return build_layout(shape)[1]


@dataclass(frozen=True)
class FieldModel:
    """Immutable parameter snapshot plus architecture and material pair."""

    shape: ModelShape
    params: np.ndarray
    materials: "object" = None   # MaterialPair; optional until training wires it

    def __post_init__(self):
        layout, total = build_layout(self.shape)
        p = np.asarray(self.params, dtype=np.float64)
        if p.ndim != 1 or p.size != total:
            raise UsageError(f"parameter vector length {p.size} != layout total {total}")
        if not np.all(np.isfinite(p)):
            raise PoisonedModelError("non-finite model parameter detected")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "layout", layout)

    def views(self, params=None):
        """Named read-only views into the flat vector."""
        p = self.params if params is None else params
        return {e.name: p[e.offset:e.offset + e.count].reshape(e.shape)
                for e in self.layout}

    def with_params(self, params):
        return replace(self, params=params)

    def evaluate(self, points):
        """Batch forward without caching: (N,4) -> (psi, u, p)."""
        out, _ = _forward(self, points, want_cache=False)
        return out


class GradientTape:
    """Flat gradient accumulator aligned with a model's parameter vector."""

    def __init__(self, model_or_size):
        n = model_or_size if isinstance(model_or_size, int) else model_or_size.params.size
        self.grad = np.zeros(n, dtype=np.float64)

    def zero(self):
        self.grad.fill(0.0)

    def add(self, other):
        g = other.grad if isinstance(other, GradientTape) else np.asarray(other)
        if g.shape != self.grad.shape:
            raise TapeStateError("gradient length mismatch")
        self.grad += g


def init_parameters(shape, seed, materials=None):
    """Seeded Glorot-uniform init; the psi head is scaled x0.1 so psi starts near 0."""
    layout, total = build_layout(shape)
    rng = np.random.default_rng(seed)
    params = np.zeros(total, dtype=np.float64)
    for e in layout:
        block = params[e.offset:e.offset + e.count].reshape(e.shape)
        if len(e.shape) == 2:
            fan_in, fan_out = e.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            block[...] = rng.uniform(-limit, limit, size=e.shape)
            if e.name == "head_psi.w":
                block *= 0.1
        # biases start at zero
    return FieldModel(shape, params, materials)


def _forward(model, points, want_cache):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise UsageError(f"expected points of shape (N, 4), got {pts.shape}")
    v = model.views()
    feats = encode_features(pts, model.shape)
    h = np.tanh(feats @ v["in.w"] + v["in.b"])
    cache = {"feats": feats, "h_in": h, "blocks": []} if want_cache else None
    for i in range(model.shape.blocks):
        s = np.tanh(h @ v[f"block{i}.w1"] + v[f"block{i}.b1"])
        if want_cache:
            cache["blocks"].append((h, s))
        h = h + s @ v[f"block{i}.w2"] + v[f"block{i}.b2"]
    psi = np.tanh((h @ v["head_psi.w"])[:, 0] + v["head_psi.b"][0])
    u = h @ v["head_u.w"] + v["head_u.b"]
    p = (h @ v["head_p.w"])[:, 0] + v["head_p.b"][0]
    if want_cache:
        cache["trunk_out"] = h
        cache["psi"] = psi
    return (psi, u, p), cache


def forward_batch(model, points, want_cache=False):
    """Forward over an (N, 4) batch of normalized points.

    Returns (psi, u, p) or ((psi, u, p), cache) when want_cache is set;
    the cache feeds backward().
    """
    out, cache = _forward(model, points, want_cache)
    return (out, cache) if want_cache else out


def forward(model, x_norm, t_norm):
    """Single-point forward returning (psi, u, p, delta, beta).

    Points slightly outside the normalized box are evaluated anyway
    (smooth extrapolation) but flagged with a warning.
    """
    x = np.asarray(x_norm, dtype=np.float64).reshape(3)
    if np.any(np.abs(x) > 1.0 + 1e-9) or not (-1e-9 <= t_norm <= 1.0 + 1e-9):
        warnings.warn("evaluating outside the normalized domain", stacklevel=2)
    pts = np.array([[x[0], x[1], x[2], float(t_norm)]])
    (psi, u, p), _ = _forward(model, pts, want_cache=False)
    if model.materials is not None:
        delta, beta = model.materials.refractive(psi[0])
    else:
        delta = beta = 0.0
    return float(psi[0]), tuple(float(c) for c in u[0]), float(p[0]), float(delta), float(beta)


def backward(model, tape, cache, d_psi=None, d_u=None, d_p=None):
    """Accumulate parameter gradients for upstream output gradients.

    d_psi: (N,), d_u: (N,3), d_p: (N,); any omitted term contributes 0.
    Accumulation is additive so micro-batches can share one tape.
    """
    if cache is None:
        raise TapeStateError("backward called without a cached forward pass")
    v = model.views()
    h = cache["trunk_out"]
    n, w = h.shape
    d_psi = np.zeros(n) if d_psi is None else np.asarray(d_psi, dtype=np.float64)
    d_u = np.zeros((n, 3)) if d_u is None else np.asarray(d_u, dtype=np.float64)
    d_p = np.zeros(n) if d_p is None else np.asarray(d_p, dtype=np.float64)

    g = {}
    d_raw = d_psi * (1.0 - cache["psi"] ** 2)   # through the tanh head
    g["head_psi.w"] = h.T @ d_raw[:, None]
    g["head_psi.b"] = np.array([d_raw.sum()])
    g["head_u.w"] = h.T @ d_u
    g["head_u.b"] = d_u.sum(axis=0)
    g["head_p.w"] = h.T @ d_p[:, None]
    g["head_p.b"] = np.array([d_p.sum()])

    gh = (d_raw[:, None] * v["head_psi.w"][:, 0]
          + d_u @ v["head_u.w"].T
          + d_p[:, None] * v["head_p.w"][:, 0])
    for i in reversed(range(model.shape.blocks)):
        h_in, s = cache["blocks"][i]
        g[f"block{i}.w2"] = s.T @ gh
        g[f"block{i}.b2"] = gh.sum(axis=0)
        ga = (gh @ v[f"block{i}.w2"].T) * (1.0 - s ** 2)
        g[f"block{i}.w1"] = h_in.T @ ga
        g[f"block{i}.b1"] = ga.sum(axis=0)
        gh = gh + ga @ v[f"block{i}.w1"].T   # skip path + block path
    gz = gh * (1.0 - cache["h_in"] ** 2)
    g["in.w"] = cache["feats"].T @ gz
    g["in.b"] = gz.sum(axis=0)

    for e in model.layout:
        tape.grad[e.offset:e.offset + e.count] += g[e.name].ravel()
    return tape


@dataclass
class SpacetimeDerivs:
    """First derivatives and Laplacians in normalized coordinates."""

    psi: np.ndarray          # (N,)
    u: np.ndarray            # (N, 3)
    p: np.ndarray            # (N,)
    dpsi_dx: np.ndarray      # (N, 3)
    dpsi_dt: np.ndarray      # (N,)
    du_dx: np.ndarray        # (N, 3, 3), [point, component i, axis j]
    du_dt: np.ndarray        # (N, 3)
    dp_dx: np.ndarray        # (N, 3)
    lap_psi: np.ndarray      # (N,)
    lap_u: np.ndarray        # (N, 3)


def stencil_points(points, h):
    """The 9 evaluation sites per point: center, then -h/+h along each of 4 axes.

    Returns an array of shape (9, N, 4).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    sites = np.empty((9, n, 4))
    sites[0] = pts
    k = 1
    for axis in range(4):
        for sign in (-1.0, 1.0):
            shifted = pts.copy()
            shifted[:, axis] += sign * h
            sites[k] = shifted
            k += 1
    return sites


def spacetime_derivatives(model, points, h=DEFAULT_FD_STEP):
    """Central-difference first derivatives and Laplacians of the field.

    model needs only an `evaluate((N,4)) -> (psi, u, p)` method, so
    analytic probes can stand in for a trained network.  One batched
    evaluation covers all 9 stencil sites.
    """
    if h <= 0:
        raise UsageError(f"fd step must be > 0, got {h}")
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    sites = stencil_points(pts, h).reshape(9 * n, 4)
    psi_all, u_all, p_all = model.evaluate(sites)
    psi = psi_all.reshape(9, n)
    u = u_all.reshape(9, n, 3)
    p = p_all.reshape(9, n)

    # site order: 0 center; 1,2 = x-/x+; 3,4 = y-/y+; 5,6 = z-/z+; 7,8 = t-/t+
    inv2h = 1.0 / (2.0 * h)
    invh2 = 1.0 / (h * h)
    dpsi = np.stack([(psi[2 * a + 2] - psi[2 * a + 1]) * inv2h for a in range(4)], axis=-1)
    du = np.stack([(u[2 * a + 2] - u[2 * a + 1]) * inv2h for a in range(4)], axis=-1)
    dp = np.stack([(p[2 * a + 2] - p[2 * a + 1]) * inv2h for a in range(3)], axis=-1)
    lap_psi = sum((psi[2 * a + 1] - 2.0 * psi[0] + psi[2 * a + 2]) for a in range(3)) * invh2
    lap_u = sum((u[2 * a + 1] - 2.0 * u[0] + u[2 * a + 2]) for a in range(3)) * invh2

    return SpacetimeDerivs(
        psi=psi[0], u=u[0], p=p[0],
        dpsi_dx=dpsi[:, :3], dpsi_dt=dpsi[:, 3],
        du_dx=du[:, :, :3], du_dt=du[:, :, 3],
        dp_dx=dp, lap_psi=lap_psi, lap_u=lap_u,
    )


class ModelSampler:
    """Adapts a FieldModel to the (delta, beta) sampler interface.

    Points are physical meters; anything outside the closed domain box
    samples as vacuum.  When built with keep_cache=True every evaluation
    is recorded so render gradients can flow back to the parameters.
    """

    def __init__(self, model, domain, keep_cache=False):
        if model.materials is None:
            raise UsageError("model has no material pair attached")
        self.model = model
        self.domain = domain
        self.keep_cache = keep_cache
        self.records = []

    def sample(self, points, t):
        pts = np.asarray(points, dtype=np.float64)
        half = np.asarray(self.domain.half_extent)
        inside = np.all(np.abs(pts) <= half, axis=1)
        delta = np.zeros(pts.shape[0])
        beta = np.zeros(pts.shape[0])
        if np.any(inside):
            t0, t1 = self.domain.time_span
            tn = (t - t0) / (t1 - t0)
            xn = pts[inside] / half
            batch = np.concatenate([xn, np.full((xn.shape[0], 1), tn)], axis=1)
            if self.keep_cache:
                (psi, _, _), cache = forward_batch(self.model, batch, want_cache=True)
                self.records.append((inside, cache))
            else:
                psi, _, _ = self.model.evaluate(batch)
            d, b = self.model.materials.refractive(psi)
            delta[inside] = d
            beta[inside] = b
        return delta, beta

    def clear(self):
        self.records = []

    def backward_beta(self, tape, upstream_per_call):
        """Push d(loss)/d(beta) for each recorded sample() call into the tape.

        upstream_per_call: list aligned with self.records, each an array
        over the full point set passed to the matching sample() call.
        beta depends on psi alone: beta = beta2 + (psi+1)/2*(beta1-beta2).
        """
        if len(upstream_per_call) != len(self.records):
            raise TapeStateError("upstream list does not match recorded calls")
        slope = self.model.materials.refractive_slope()[1]
        for (inside, cache), up in zip(self.records, upstream_per_call):
            d_beta = np.asarray(up, dtype=np.float64)[inside]
            backward(self.model, tape, cache, d_psi=d_beta * slope)
        return tape


def save_model(path, model, *, header_extra=None, sections_extra=None, domain=None):
    """Write a model checkpoint; trainer state rides along in extra sections."""
    header = {
        "kind": "field_model",
        "model": {"width": model.shape.width, "blocks": model.shape.blocks,
                  "x_frequencies": model.shape.x_frequencies,
                  "t_frequencies": model.shape.t_frequencies},
        "layout": [{"name": e.name, "shape": list(e.shape), "offset": e.offset}
                   for e in model.layout],
    }
    if model.materials is not None:
        header["materials"] = materials_to_dict(model.materials)
    if domain is not None:
        header["domain"] = domain_to_dict(domain)
    if header_extra:
        header.update(header_extra)
    sections = {"params": model.params}
    if sections_extra:
        sections.update(sections_extra)
    write_checkpoint(path, header, sections)


def load_model(path):
    """Read a checkpoint back into (model, header, sections)."""
    header, sections = read_checkpoint(path)
    if header.get("kind") != "field_model":
        raise UsageError(f"{path}: not a field-model checkpoint")
    m = header["model"]
    shape = ModelShape(m["width"], m["blocks"], m["x_frequencies"], m["t_frequencies"])
    materials = materials_from_dict(header["materials"]) if "materials" in header else None
    if "params" not in sections:
        raise UsageError(f"{path}: checkpoint has no params section")
    model = FieldModel(shape, sections["params"], materials)
    return model, header, sections


def checkpoint_domain(header):
    return domain_from_dict(header["domain"]) if "domain" in header else None
