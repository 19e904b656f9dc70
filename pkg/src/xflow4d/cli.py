"""Command-line pipeline: simulate -> render -> train -> evaluate -> export.

Exit codes: 0 success, 2 configuration error (the offending key is named),
3 runtime failure.  With --json the only stdout line is a machine-readable
summary matching schemas/command_result.schema.json.
"""

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from .core.config import Seeds, load_config, config_to_dict
from .core.runtime import worker_count
from .core.storage import read_movie, write_movie, write_checkpoint
from .errors import ConfigError, XFlowError
from . import fluidsim, metrics, trainer, xray
from .neuralfield import ModelSampler, checkpoint_domain, load_model


def _parse_angles(raw):
    try:
        return tuple(float(v) for v in raw.split(","))
    except ValueError:
        raise ConfigError("--angles", f"expected comma-separated degrees, got {raw!r}")


def _parse_times(raw):
    try:
        return [float(v) for v in raw.split(",")]
    except ValueError:
        raise ConfigError("--times", f"expected comma-separated seconds, got {raw!r}")


def cmd_simulate(args):
    cfg = load_config(args.config)
    if args.stride is not None or args.from_movie is not None:
        if args.from_movie is None or args.stride is None:
            raise ConfigError("--stride", "--from-movie and --stride go together")
        movie = read_movie(args.from_movie)
        sub = movie.subsample(args.stride)
        if args.frames is not None and len(sub) != args.frames:
            raise ConfigError(
                "--frames", f"stride {args.stride} leaves {len(sub)} frames, "
                f"not {args.frames}")
        write_movie(sub, args.out)
        return {"path": args.out, "frames": len(sub),
                "dt_frame_s": sub.dt_frame,
                "derived_from": args.from_movie}
    movie = fluidsim.run_collision(cfg.sim, cfg.domain)
    write_movie(movie, args.out)
    return {"path": args.out, "frames": len(movie),
            "dt_frame_s": movie.dt_frame}


def cmd_render(args):
    cfg = load_config(args.config)
    movie = read_movie(args.movie)
    angles = _parse_angles(args.angles) if args.angles else cfg.view_angles
    xray.render_dataset(movie, cfg.materials, angles, cfg.detector, args.out)
    return {"path": args.out, "views": len(angles), "angles_deg": list(angles),
            "frames": len(movie)}


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, seeds=Seeds(*(args.seed + i for i in range(7))))
    dataset = xray.ProjectionDataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=1)
        fh.write("\n")
    state, ckpt = trainer.train(cfg, dataset, args.out, resume=args.resume)
    return {"path": args.out, "epochs": state.epoch, "final_checkpoint": ckpt,
            "log": os.path.join(args.out, "train.jsonl")}


def _seen_frame_indices(truth, dataset_path):
    ds = xray.ProjectionDataset(dataset_path)
    tol = 1e-9 * max(truth.spec.duration, 1e-300)
    seen = []
    for i, f in enumerate(truth.frames):
        if any(abs(f.t - t) <= tol for t in ds.times):
            seen.append(i)
    return seen


def cmd_evaluate(args):
    model, header, _ = load_model(args.ckpt)
    truth = read_movie(args.truth)
    indices = None
    if args.unseen_only:
        if args.dataset is None:
            raise ConfigError("--dataset",
                              "--unseen-only needs the training dataset to "
                              "know which frames were seen")
        seen = set(_seen_frame_indices(truth, args.dataset))
        indices = [i for i in range(len(truth)) if i not in seen]
        if not indices:
            raise ConfigError("--unseen-only", "every truth frame was seen")
    provenance = {"checkpoint": args.ckpt, "truth": args.truth}
    if args.dataset:
        provenance["dataset"] = args.dataset
    report, curves = metrics.evaluate_movie(model, truth, indices,
                                            provenance=provenance)
    path = metrics.write_report(report, curves, args.out)
    agg = report.to_dict()["aggregate"]
    return {"path": args.out, "report": path, "frames": len(report.frames),
            "mse_mean": agg["mse_mean"], "dssim_mean": agg["dssim_mean"],
            "resolution_mean": agg["resolution_mean"]}


def cmd_export(args):
    model, header, _ = load_model(args.ckpt)
    domain = checkpoint_domain(header)
    if domain is None:
        raise ConfigError("--ckpt", "checkpoint records no domain; cannot "
                          "place the export grid")
    if args.grid is not None:
        domain = dataclasses.replace(domain, grid_shape=(args.grid,) * 3)
    times = _parse_times(args.times) if args.times else [float(t) for t in
                                                         domain.frame_times()]
    t0, t1 = domain.time_span
    for t in times:
        if not (t0 <= t <= t1):
            raise ConfigError("--times", f"{t:g} outside the span "
                              f"[{t0:g}, {t1:g}]")
    os.makedirs(args.out, exist_ok=True)
    n = domain.grid_shape[0]
    det = xray.DetectorSpec(max(8, n), max(8, n),
                            max(domain.physical_extent) / max(8, n))
    sampler = ModelSampler(model, domain)
    entries = []
    for i, t in enumerate(times):
        vol = metrics.voxelize_model(model, domain, t)
        vp = os.path.join(args.out, f"volume_{i:03d}.bin")
        write_checkpoint(vp, {"kind": "volume", "t": t,
                              "grid": list(domain.grid_shape)}, {"psi": vol})
        img = xray.render_projection(sampler, 0.0, t, det, domain)
        pp = os.path.join(args.out, f"proj_{i:03d}.bin")
        write_checkpoint(pp, {"kind": "projection", "angle_deg": 0.0, "t": t},
                         {"transmission": img.transmission})
        entries.append({"t": t, "volume": os.path.basename(vp),
                        "projection": os.path.basename(pp)})
    manifest = {"kind": "export", "checkpoint": args.ckpt,
                "grid": list(domain.grid_shape), "times": times,
                "entries": entries}
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return {"path": args.out, "volumes": len(times),
            "grid": list(domain.grid_shape)}


def _build_parser():
    p = argparse.ArgumentParser(prog="xflow4d", description=__doc__)
    p.add_argument("--json", action="store_true",
                   help="print a machine-readable summary on stdout")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the collision solver")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--from-movie", dest="from_movie",
                   help="derive by subsampling an existing movie")
    s.add_argument("--stride", type=int)
    s.add_argument("--frames", type=int,
                   help="assert the derived frame count")
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("render", help="project a movie into a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--movie", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--angles", help="comma-separated view angles in degrees")
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("train", help="fit the neural field to a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--seed", type=int,
                   help="override every config seed from this base")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", help="score a checkpoint against a movie")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dataset", help="training dataset (for --unseen-only)")
    s.add_argument("--unseen-only", dest="unseen_only", action="store_true")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("export", help="voxelize a checkpoint for figures")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", type=int, help="cubic export grid side")
    s.add_argument("--times", help="comma-separated times in seconds")
    s.set_defaults(fn=cmd_export)
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    start = time.perf_counter()
    outputs = {}
    error = None
    code = 0
    try:
        worker_count()  # validates PIONIX_THREADS before any work
        outputs = args.fn(args)
    except ConfigError as exc:
        code = 2
        error = {"type": "ConfigError", "message": str(exc)}
        if getattr(exc, "key", ""):
            error["key"] = exc.key
    except (XFlowError, OSError, ValueError) as exc:
        code = 3
        error = {"type": type(exc).__name__, "message": str(exc)}
    result = {"command": args.command, "status": "ok" if code == 0 else "error",
              "exit_code": code, "outputs": outputs, "error": error,
              "elapsed_s": time.perf_counter() - start}
    if args.json:
        json.dump(result, sys.stdout, indent=1, default=float)
        sys.stdout.write("\n")
    elif code == 0:
        for k, v in outputs.items():
            print(f"{k}: {v}")
    if code != 0 and not args.json:
        msg = error["message"]
        if "key" in error:
            msg = f"{error['key']}: {msg}"
        print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
