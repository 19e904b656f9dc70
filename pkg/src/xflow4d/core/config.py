"""Run configuration: JSON document validation and the frozen RunConfig.

The document layout (all lengths in meters, times in seconds, the rest
non-dimensional):

    {
      "domain":      {extent_m, time_span_s, grid_shape, frame_count,
                      length_scale_m?, time_scale_s?},
      "materials":   {rho1, rho2, mu1, mu2, n1{delta,beta}, n2{delta,beta},
                      Re, We},
      "view_angles": [deg, ...],
      "detector":    {width, height, pixel_pitch_m, samples_per_ray,
                      energy_ev},
      "sim":         {droplet_radius, droplet_centers, impact_speed, dt,
                      steps_per_frame, interface_width?, mobility?, bc?},
      "training":    {epochs, rays_per_step, collocation_points, ...},
      "seeds":       {init, critic_init, ray, patch, angle, collocation,
                      jitter}
    }

Unknown keys anywhere are rejected with the offending key path; optional
training/seed keys are filled with defaults.  The returned RunConfig and
every sub-config are frozen.
"""

import json
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .types import DomainSpec, MaterialPair

DEFAULT_VIEW_ANGLES = (0.0, 23.8)

_TRAINING_DEFAULTS = {
    "epochs": 2000,
    "rays_per_step": 4096,
    "collocation_points": 2048,
    "patches_per_step": 16,
    "patch_size": 16,
    "learning_rate": 1e-4,
    "critic_learning_rate": 1e-4,
    "stage2_start_epoch": None,   # None -> 30% of epochs
    "random_angle_probability": 0.5,
    "pde_ramp_fraction": 0.1,
    "train_samples_per_ray": 64,
    "fd_step": 1.0 / 64.0,
    "checkpoint_every": 500,
    "critic_steps": 1,
}

_LOSS_WEIGHT_DEFAULTS = {"mse": 1.0, "gan": 0.1, "pde": 1.0}

_MODEL_DEFAULTS = {"width": 128, "blocks": 5, "x_frequencies": 6, "t_frequencies": 4}

_SEED_DEFAULTS = {
    "init": 1000,
    "critic_init": 1001,
    "ray": 1002,
    "patch": 1003,
    "angle": 1004,
    "collocation": 1005,
    "jitter": 1006,
}

_DETECTOR_DEFAULTS = {
    "width": 64,
    "height": 64,
    "pixel_pitch_m": 4e-6,
    "samples_per_ray": 256,
    "energy_ev": 10000.0,
}


@dataclass(frozen=True)
class ModelShape:
    width: int
    blocks: int
    x_frequencies: int
    t_frequencies: int


@dataclass(frozen=True)
class LossWeights:
    mse: float
    gan: float
    pde: float


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int
    rays_per_step: int
    collocation_points: int
    patches_per_step: int
    patch_size: int
    learning_rate: float
    critic_learning_rate: float
    loss_weights: LossWeights
    stage2_start_epoch: int
    random_angle_probability: float
    pde_ramp_fraction: float
    train_samples_per_ray: int
    fd_step: float
    checkpoint_every: int
    critic_steps: int
    model: ModelShape


@dataclass(frozen=True)
class Seeds:
    init: int
    critic_init: int
    ray: int
    patch: int
    angle: int
    collocation: int
    jitter: int


@dataclass(frozen=True)
class RunConfig:
    domain: DomainSpec
    materials: MaterialPair
    view_angles: tuple
    detector: "object"   # xray.DetectorSpec; typed loosely to keep core layering
    sim: "object"        # fluidsim.SimParams
    training: TrainingConfig
    seeds: Seeds


def _check_unknown(doc, path, allowed):
    for k in doc:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")


def _get(doc, path, key, required=True, default=None):
    if key not in doc:
        if required:
            raise ConfigError(f"{path}.{key}" if path else key, "missing required key")
        return default
    return doc[key]


def _number(value, path, *, positive=False, nonneg=False, lo=None, hi=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    v = float(value)
    if not np.isfinite(v):
        raise ConfigError(path, "must be finite")
    if positive and v <= 0:
        raise ConfigError(path, f"must be > 0, got {v}")
    if nonneg and v < 0:
        raise ConfigError(path, f"must be >= 0, got {v}")
    if lo is not None and v < lo:
        raise ConfigError(path, f"must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(path, f"must be <= {hi}, got {v}")
    return v


def _integer(value, path, *, lo=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(path, f"must be >= {lo}, got {value}")
    return int(value)


def _vector(value, path, n, *, positive=False):
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise ConfigError(path, f"expected a list of {n} numbers")
    return tuple(_number(v, f"{path}[{i}]", positive=positive) for i, v in enumerate(value))


def _index_pair(doc, path):
    _check_unknown(doc, path, {"delta", "beta"})
    return (
        _number(_get(doc, path, "delta"), f"{path}.delta", nonneg=True),
        _number(_get(doc, path, "beta"), f"{path}.beta", nonneg=True),
    )


def _validate_domain(doc):
    path = "domain"
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    _check_unknown(doc, path, {"extent_m", "time_span_s", "grid_shape", "frame_count",
                               "length_scale_m", "time_scale_s"})
    extent = _vector(_get(doc, path, "extent_m"), f"{path}.extent_m", 3, positive=True)
    span = _vector(_get(doc, path, "time_span_s"), f"{path}.time_span_s", 2)
    if span[1] <= span[0]:
        raise ConfigError(f"{path}.time_span_s", "end must exceed start")
    shape = tuple(
        _integer(v, f"{path}.grid_shape[{i}]", lo=4)
        for i, v in enumerate(_get(doc, path, "grid_shape"))
    ) if isinstance(doc.get("grid_shape"), (list, tuple)) and len(doc["grid_shape"]) == 3 else None
    if shape is None:
        raise ConfigError(f"{path}.grid_shape", "expected a list of 3 integers >= 4")
    frames = _integer(_get(doc, path, "frame_count"), f"{path}.frame_count", lo=2)
    ls = doc.get("length_scale_m")
    ts = doc.get("time_scale_s")
    if ls is not None:
        ls = _number(ls, f"{path}.length_scale_m", positive=True)
    if ts is not None:
        ts = _number(ts, f"{path}.time_scale_s", positive=True)
    return DomainSpec(extent, span, shape, frames, ls, ts)


def _validate_materials(doc):
    path = "materials"
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    _check_unknown(doc, path, {"rho1", "rho2", "mu1", "mu2", "n1", "n2", "Re", "We"})
    vals = {}
    for key in ("rho1", "rho2", "mu1", "mu2", "Re", "We"):
        vals[key] = _number(_get(doc, path, key), f"{path}.{key}", positive=True)
    n1 = _index_pair(_get(doc, path, "n1"), f"{path}.n1")
    n2 = _index_pair(_get(doc, path, "n2"), f"{path}.n2")
    return MaterialPair(vals["rho1"], vals["rho2"], vals["mu1"], vals["mu2"],
                        n1, n2, vals["Re"], vals["We"])


def _validate_detector(doc):
    from ..xray import DetectorSpec

    path = "detector"
    merged = dict(_DETECTOR_DEFAULTS)
    if doc is not None:
        if not isinstance(doc, dict):
            raise ConfigError(path, "expected an object")
        _check_unknown(doc, path, set(_DETECTOR_DEFAULTS))
        merged.update(doc)
    width = _integer(merged["width"], f"{path}.width", lo=8)
    height = _integer(merged["height"], f"{path}.height", lo=8)
    pitch = _number(merged["pixel_pitch_m"], f"{path}.pixel_pitch_m", positive=True)
    spr = _integer(merged["samples_per_ray"], f"{path}.samples_per_ray", lo=32)
    energy = _number(merged["energy_ev"], f"{path}.energy_ev", positive=True)
    return DetectorSpec(width, height, pitch, spr, energy)


def _validate_sim(doc, domain, materials):
    from ..fluidsim import SimParams

    path = "sim"
    h_sim = max(domain.cell_size_sim())
    defaults = {
        "droplet_radius": None,
        "droplet_centers": None,
        "impact_speed": 1.0,
        "dt": None,
        "steps_per_frame": 5,
        "interface_width": None,
        "mobility": None,
        "bc": "noslip",
    }
    merged = dict(defaults)
    if doc is not None:
        if not isinstance(doc, dict):
            raise ConfigError(path, "expected an object")
        _check_unknown(doc, path, set(defaults))
        merged.update(doc)

    half_min = min(domain.extent_sim()) / 2.0
    radius = merged["droplet_radius"]
    radius = (0.3 * half_min if radius is None
              else _number(radius, f"{path}.droplet_radius", positive=True))
    centers = merged["droplet_centers"]
    if centers is None:
        gap = 1.35 * radius
        centers = ((-gap, 0.0, 0.0), (gap, 0.0, 0.0))
    else:
        if not isinstance(centers, (list, tuple)) or len(centers) != 2:
            raise ConfigError(f"{path}.droplet_centers", "expected two 3-vectors")
        centers = tuple(_vector(c, f"{path}.droplet_centers[{i}]", 3)
                        for i, c in enumerate(centers))
    speed = _number(merged["impact_speed"], f"{path}.impact_speed", nonneg=True)
    spf = _integer(merged["steps_per_frame"], f"{path}.steps_per_frame", lo=1)
    dt = merged["dt"]
    if dt is None:
        # land exactly on frame times
        frame_dt_sim = (domain.duration / (domain.frame_count - 1)) / domain.time_scale
        dt = frame_dt_sim / spf
    else:
        dt = _number(dt, f"{path}.dt", positive=True)
    eps = merged["interface_width"]
    eps = 2.0 * h_sim if eps is None else _number(eps, f"{path}.interface_width", positive=True)
    if eps < 1.5 * h_sim:
        raise ConfigError(f"{path}.interface_width",
                          f"must be >= 1.5 grid spacings ({1.5 * h_sim:g}), got {eps:g}")
    mob = merged["mobility"]
    if mob is None:
        mob = eps * (speed if speed > 0 else 1.0)  # interface Peclet ~ 1
    else:
        mob = _number(mob, f"{path}.mobility", positive=True)
    bc = merged["bc"]
    if bc not in ("noslip", "periodic"):
        raise ConfigError(f"{path}.bc", f"must be 'noslip' or 'periodic', got {bc!r}")
    return SimParams(materials, radius, centers, speed, eps, mob, dt, spf, bc)


def _validate_training(doc):
    path = "training"
    merged = dict(_TRAINING_DEFAULTS)
    weights = dict(_LOSS_WEIGHT_DEFAULTS)
    model = dict(_MODEL_DEFAULTS)
    if doc is not None:
        if not isinstance(doc, dict):
            raise ConfigError(path, "expected an object")
        _check_unknown(doc, path, set(_TRAINING_DEFAULTS) | {"loss_weights", "model"})
        for k, v in doc.items():
            if k == "loss_weights":
                if not isinstance(v, dict):
                    raise ConfigError(f"{path}.loss_weights", "expected an object")
                _check_unknown(v, f"{path}.loss_weights", set(_LOSS_WEIGHT_DEFAULTS))
                weights.update(v)
            elif k == "model":
                if not isinstance(v, dict):
                    raise ConfigError(f"{path}.model", "expected an object")
                _check_unknown(v, f"{path}.model", set(_MODEL_DEFAULTS))
                model.update(v)
            else:
                merged[k] = v

    epochs = _integer(merged["epochs"], f"{path}.epochs", lo=1)
    stage2 = merged["stage2_start_epoch"]
    if stage2 is None:
        stage2 = max(1, int(round(0.3 * epochs)))
    else:
        stage2 = _integer(stage2, f"{path}.stage2_start_epoch", lo=0)
    lw = LossWeights(
        _number(weights["mse"], f"{path}.loss_weights.mse", nonneg=True),
        _number(weights["gan"], f"{path}.loss_weights.gan", nonneg=True),
        _number(weights["pde"], f"{path}.loss_weights.pde", nonneg=True),
    )
    shape = ModelShape(
        _integer(model["width"], f"{path}.model.width", lo=4),
        _integer(model["blocks"], f"{path}.model.blocks", lo=1),
        _integer(model["x_frequencies"], f"{path}.model.x_frequencies", lo=1),
        _integer(model["t_frequencies"], f"{path}.model.t_frequencies", lo=1),
    )
    return TrainingConfig(
        epochs=epochs,
        rays_per_step=_integer(merged["rays_per_step"], f"{path}.rays_per_step", lo=1),
        collocation_points=_integer(merged["collocation_points"],
                                    f"{path}.collocation_points", lo=1),
        patches_per_step=_integer(merged["patches_per_step"], f"{path}.patches_per_step", lo=1),
        patch_size=_integer(merged["patch_size"], f"{path}.patch_size", lo=4),
        learning_rate=_number(merged["learning_rate"], f"{path}.learning_rate", positive=True),
        critic_learning_rate=_number(merged["critic_learning_rate"],
                                     f"{path}.critic_learning_rate", positive=True),
        loss_weights=lw,
        stage2_start_epoch=stage2,
        random_angle_probability=_number(merged["random_angle_probability"],
                                         f"{path}.random_angle_probability", lo=0.0, hi=1.0),
        pde_ramp_fraction=_number(merged["pde_ramp_fraction"],
                                  f"{path}.pde_ramp_fraction", lo=0.0, hi=1.0),
        train_samples_per_ray=_integer(merged["train_samples_per_ray"],
                                       f"{path}.train_samples_per_ray", lo=4),
        fd_step=_number(merged["fd_step"], f"{path}.fd_step", positive=True),
        checkpoint_every=_integer(merged["checkpoint_every"], f"{path}.checkpoint_every", lo=1),
        critic_steps=_integer(merged["critic_steps"], f"{path}.critic_steps", lo=1),
        model=shape,
    )


def _validate_seeds(doc):
    path = "seeds"
    merged = dict(_SEED_DEFAULTS)
    if doc is not None:
        if not isinstance(doc, dict):
            raise ConfigError(path, "expected an object")
        _check_unknown(doc, path, set(_SEED_DEFAULTS))
        merged.update(doc)
    return Seeds(**{k: _integer(merged[k], f"{path}.{k}", lo=0) for k in _SEED_DEFAULTS})


def validate_config(doc):
    """Validate a parsed config document and return an immutable RunConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("", "config root must be an object")
    _check_unknown(doc, "", {"domain", "materials", "view_angles", "detector",
                             "sim", "training", "seeds"})
    domain = _validate_domain(_get(doc, "", "domain"))
    materials = _validate_materials(_get(doc, "", "materials"))
    raw_angles = doc.get("view_angles", list(DEFAULT_VIEW_ANGLES))
    if not isinstance(raw_angles, (list, tuple)) or len(raw_angles) == 0:
        raise ConfigError("view_angles", "expected a non-empty list of degrees")
    angles = tuple(_number(a, f"view_angles[{i}]") for i, a in enumerate(raw_angles))
    detector = _validate_detector(doc.get("detector"))
    sim = _validate_sim(doc.get("sim"), domain, materials)
    training = _validate_training(doc.get("training"))
    seeds = _validate_seeds(doc.get("seeds"))
    return RunConfig(domain, materials, angles, detector, sim, training, seeds)


def load_config(path):
    """Read a JSON config file and validate it."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from exc
    return validate_config(doc)


def config_to_dict(cfg):
    """Canonical plain-dict form of a RunConfig (for run-directory records)."""
    d = cfg.domain
    m = cfg.materials
    det = cfg.detector
    s = cfg.sim
    t = cfg.training
    return {
        "domain": {
            "extent_m": list(d.physical_extent),
            "time_span_s": list(d.time_span),
            "grid_shape": list(d.grid_shape),
            "frame_count": d.frame_count,
            "length_scale_m": d.length_scale,
            "time_scale_s": d.time_scale,
        },
        "materials": {
            "rho1": m.rho1, "rho2": m.rho2, "mu1": m.mu1, "mu2": m.mu2,
            "n1": {"delta": m.n1[0], "beta": m.n1[1]},
            "n2": {"delta": m.n2[0], "beta": m.n2[1]},
            "Re": m.Re, "We": m.We,
        },
        "view_angles": list(cfg.view_angles),
        "detector": {
            "width": det.width, "height": det.height,
            "pixel_pitch_m": det.pixel_pitch,
            "samples_per_ray": det.samples_per_ray,
            "energy_ev": det.energy_ev,
        },
        "sim": {
            "droplet_radius": s.droplet_radius,
            "droplet_centers": [list(c) for c in s.droplet_centers],
            "impact_speed": s.impact_speed,
            "interface_width": s.interface_width,
            "mobility": s.mobility,
            "dt": s.dt,
            "steps_per_frame": s.steps_per_frame,
            "bc": s.bc,
        },
        "training": {
            "epochs": t.epochs,
            "rays_per_step": t.rays_per_step,
            "collocation_points": t.collocation_points,
            "patches_per_step": t.patches_per_step,
            "patch_size": t.patch_size,
            "learning_rate": t.learning_rate,
            "critic_learning_rate": t.critic_learning_rate,
            "loss_weights": {"mse": t.loss_weights.mse, "gan": t.loss_weights.gan,
                             "pde": t.loss_weights.pde},
            "stage2_start_epoch": t.stage2_start_epoch,
            "random_angle_probability": t.random_angle_probability,
            "pde_ramp_fraction": t.pde_ramp_fraction,
            "train_samples_per_ray": t.train_samples_per_ray,
            "fd_step": t.fd_step,
            "checkpoint_every": t.checkpoint_every,
            "critic_steps": t.critic_steps,
            "model": {"width": t.model.width, "blocks": t.model.blocks,
                      "x_frequencies": t.model.x_frequencies,
                      "t_frequencies": t.model.t_frequencies},
        },
        "seeds": {k: getattr(cfg.seeds, k) for k in _SEED_DEFAULTS},
    }
