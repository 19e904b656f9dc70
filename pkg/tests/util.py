"""Small builders shared by the test modules."""

import copy
import json
import os

import numpy as np

from xflow4d.core.config import validate_config
from xflow4d.core.types import DomainSpec, FlowState, MaterialPair, Movie4D
from xflow4d.xray import DetectorSpec, ProjectionDataset, render_dataset

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

WATER_AIR = MaterialPair(1000.0, 1.0, 1e-3, 1e-5,
                         (1e-6, 1e-8), (1e-9, 1e-12), 200.0, 6.94)


def tiny_domain(n=16, frames=3):
    return DomainSpec((1e-3, 1e-3, 1e-3), (0.0, 2e-3), (n, n, n), frames,
                      length_scale=1e-3, time_scale=2e-3)


def tiny_detector(n=16, samples=64):
    # pitch sized so the detector spans the sqrt(2) rotation footprint
    return DetectorSpec(n, n, 1.45e-3 / n, samples, 1e4)


TINY_CONFIG = {
    "domain": {
        "extent_m": [1e-3, 1e-3, 1e-3],
        "time_span_s": [0.0, 2e-3],
        "grid_shape": [16, 16, 16],
        "frame_count": 3,
        "length_scale_m": 1e-3,
        "time_scale_s": 2e-3,
    },
    "materials": {
        "rho1": 1000.0, "rho2": 1.0, "mu1": 1e-3, "mu2": 1e-5,
        "n1": {"delta": 1e-6, "beta": 1e-8},
        "n2": {"delta": 1e-9, "beta": 1e-12},
        "Re": 20.0, "We": 100.0,
    },
    "view_angles": [0.0, 23.8],
    "detector": {
        "width": 16, "height": 16, "pixel_pitch_m": 6.25e-5,
        "samples_per_ray": 64, "energy_ev": 1e4,
    },
    "sim": {
        "impact_speed": 0.5, "steps_per_frame": 20,
        "droplet_radius": 0.1,
        "droplet_centers": [[-0.125, 0, 0], [0.125, 0, 0]],
    },
    "training": {
        "epochs": 6, "rays_per_step": 64, "collocation_points": 32,
        "patches_per_step": 2, "patch_size": 8,
        "learning_rate": 1e-3, "critic_learning_rate": 1e-3,
        "stage2_start_epoch": 2, "train_samples_per_ray": 32,
        "fd_step": 0.05, "checkpoint_every": 3,
        "model": {"width": 12, "blocks": 2,
                  "x_frequencies": 3, "t_frequencies": 2},
    },
}


def tiny_config(**training_overrides):
    doc = copy.deepcopy(TINY_CONFIG)
    doc["training"].update(training_overrides)
    return validate_config(doc)


def sphere_movie(domain, materials=WATER_AIR, radius_frac=0.55, drift=0.0):
    """Static (or slowly drifting) sharp sphere, one FlowState per frame."""
    half = 0.5 * domain.extent_sim()[0]
    r = radius_frac * half
    pts = domain.grid_points(units="sim").reshape(*domain.grid_shape, 3)
    zeros = np.zeros(domain.grid_shape)
    frames = []
    for t in domain.frame_times():
        cx = drift * (t - domain.time_span[0]) / (domain.time_span[1] - domain.time_span[0])
        d = np.sqrt((pts[..., 0] - cx) ** 2 + pts[..., 1] ** 2 + pts[..., 2] ** 2)
        psi = np.where(d <= r, 1.0, -1.0)
        frames.append(FlowState.from_arrays(psi, zeros, zeros, zeros, zeros,
                                            float(t), domain))
    return Movie4D(tuple(frames)), r


def sphere_dataset(path, domain=None, materials=WATER_AIR, angles=(0.0, 90.0)):
    """Render a static-sphere dataset to path; returns (dataset, movie, r_sim)."""
    domain = domain or tiny_domain()
    movie, r = sphere_movie(domain, materials)
    det = tiny_detector(domain.grid_shape[0])
    render_dataset(movie, materials, angles, det, str(path))
    return ProjectionDataset(str(path)), movie, r
