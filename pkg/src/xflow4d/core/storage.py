"""On-disk containers: movie directories, projection datasets, checkpoints.

All binary payloads are little-endian, C order.  Manifests are JSON with
sorted keys so reruns diff cleanly.  A movie directory looks like

    movie/
      manifest.json
      psi_0000.bin  ux_0000.bin  uy_0000.bin  uz_0000.bin  p_0000.bin
      psi_0001.bin  ...

and a projection dataset like

    dataset/
      manifest.json
      proj_0_0000.bin   # view index, then frame index
      proj_1_0000.bin
      ...

A checkpoint is a single file: 8-byte magic, uint64 LE header length, a
UTF-8 JSON header, then the raw parameter sections the header declares.
"""

import json
import os

import numpy as np

from ..errors import UsageError
from .types import DomainSpec, FlowState, Movie4D, ScalarField3

CHECKPOINT_MAGIC = b"XF4DCKPT"

MOVIE_FIELDS = ("psi", "ux", "uy", "uz", "p")

_DTYPE_TAGS = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}


def _dtype_for(tag):
    if tag not in _DTYPE_TAGS:
        raise UsageError(f"unsupported dtype tag {tag!r}")
    return _DTYPE_TAGS[tag]


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"missing manifest: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed manifest {path}: {exc}")


def _manifest_get(doc, key, path):
    if key not in doc:
        raise UsageError(f"manifest {path} missing key {key!r}")
    return doc[key]


def _write_array(path, arr, dtype):
    arr.astype(dtype, copy=False).tofile(path)


def _read_array(path, dtype, shape):
    data = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise UsageError(f"{path}: expected {expected} values, found {data.size}")
    return data.reshape(shape).astype(np.float64)


def write_movie(movie, path, dtype="f32le"):
    """Write a Movie4D to a directory, creating it if needed."""
    dt = _dtype_for(dtype)
    os.makedirs(path, exist_ok=True)
    spec = movie.spec
    for i, frame in enumerate(movie.frames):
        arrays = {"psi": frame.psi.data, "ux": frame.u[0].data,
                  "uy": frame.u[1].data, "uz": frame.u[2].data,
                  "p": frame.p.data}
        for field in MOVIE_FIELDS:
            _write_array(os.path.join(path, f"{field}_{i:04d}.bin"), arrays[field], dt)
    manifest = {
        "kind": "movie",
        "dtype": dtype,
        "grid_shape": list(spec.grid_shape),
        "extent_m": list(spec.physical_extent),
        "time_span_s": list(spec.time_span),
        "length_scale_m": spec.length_scale,
        "time_scale_s": spec.time_scale,
        "frame_count": len(movie.frames),
        "frame_times_s": [float(t) for t in movie.times()],
        "fields": list(MOVIE_FIELDS),
    }
    _write_json(os.path.join(path, "manifest.json"), manifest)


def read_movie(path):
    """Load a movie directory back into a Movie4D."""
    mpath = os.path.join(path, "manifest.json")
    doc = _read_json(mpath)
    if doc.get("kind") != "movie":
        raise UsageError(f"{mpath}: not a movie manifest")
    dt = _dtype_for(_manifest_get(doc, "dtype", mpath))
    shape = tuple(_manifest_get(doc, "grid_shape", mpath))
    times = _manifest_get(doc, "frame_times_s", mpath)
    count = _manifest_get(doc, "frame_count", mpath)
    if len(times) != count:
        raise UsageError(f"{mpath}: frame_times_s length disagrees with frame_count")
    spec = DomainSpec(
        physical_extent=tuple(_manifest_get(doc, "extent_m", mpath)),
        time_span=tuple(_manifest_get(doc, "time_span_s", mpath)),
        grid_shape=shape,
        frame_count=count,
        length_scale=doc.get("length_scale_m"),
        time_scale=doc.get("time_scale_s"),
    )
    frames = []
    for i, t in enumerate(times):
        raw = {field: _read_array(os.path.join(path, f"{field}_{i:04d}.bin"), dt, shape)
               for field in MOVIE_FIELDS}
        # storage may quantize psi slightly past the [-1, 1] rails
        np.clip(raw["psi"], -1.0, 1.0, out=raw["psi"])
        frames.append(FlowState.from_arrays(raw["psi"], raw["ux"], raw["uy"], raw["uz"],
                                            raw["p"], float(t), spec))
    return Movie4D(tuple(frames))


def write_dataset(path, projections, view_angles_deg, frame_times_s, detector, domain):
    """Write rendered projections to a dataset directory.

    projections: nested sequence indexed [view][frame], each a float array
    of shape (height, width) holding transmission values in [0, 1].
    """
    os.makedirs(path, exist_ok=True)
    n_views = len(view_angles_deg)
    if len(projections) != n_views:
        raise UsageError("projections rows must match view_angles_deg")
    for v in range(n_views):
        if len(projections[v]) != len(frame_times_s):
            raise UsageError("projections columns must match frame_times_s")
        for f, img in enumerate(projections[v]):
            arr = np.asarray(img, dtype=np.float64)
            if arr.shape != (detector.height, detector.width):
                raise UsageError(
                    f"projection [{v}][{f}] shape {arr.shape} does not match detector")
            _write_array(os.path.join(path, f"proj_{v}_{f:04d}.bin"), arr, _DTYPE_TAGS["f32le"])
    manifest = {
        "kind": "projection_dataset",
        "dtype": "f32le",
        "view_angles_deg": [float(a) for a in view_angles_deg],
        "frame_times_s": [float(t) for t in frame_times_s],
        "detector": {
            "width": detector.width,
            "height": detector.height,
            "pixel_pitch_m": detector.pixel_pitch,
            "samples_per_ray": detector.samples_per_ray,
            "energy_ev": detector.energy_ev,
        },
        "domain": {
            "extent_m": list(domain.physical_extent),
            "time_span_s": list(domain.time_span),
            "grid_shape": list(domain.grid_shape),
            "frame_count": domain.frame_count,
            "length_scale_m": domain.length_scale,
            "time_scale_s": domain.time_scale,
        },
    }
    _write_json(os.path.join(path, "manifest.json"), manifest)


def read_dataset_manifest(path):
    """Parse a dataset manifest into (view_angles, frame_times, DetectorSpec, DomainSpec)."""
    from ..xray import DetectorSpec

    mpath = os.path.join(path, "manifest.json")
    doc = _read_json(mpath)
    if doc.get("kind") != "projection_dataset":
        raise UsageError(f"{mpath}: not a projection dataset manifest")
    angles = tuple(float(a) for a in _manifest_get(doc, "view_angles_deg", mpath))
    times = tuple(float(t) for t in _manifest_get(doc, "frame_times_s", mpath))
    det = _manifest_get(doc, "detector", mpath)
    detector = DetectorSpec(det["width"], det["height"], det["pixel_pitch_m"],
                            det["samples_per_ray"], det["energy_ev"])
    dom = _manifest_get(doc, "domain", mpath)
    domain = DomainSpec(
        physical_extent=tuple(dom["extent_m"]),
        time_span=tuple(dom["time_span_s"]),
        grid_shape=tuple(dom["grid_shape"]),
        frame_count=dom["frame_count"],
        length_scale=dom.get("length_scale_m"),
        time_scale=dom.get("time_scale_s"),
    )
    return angles, times, detector, domain


def read_projection(path, view, frame, detector):
    """Load one stored projection as float64 (height, width)."""
    fpath = os.path.join(path, f"proj_{view}_{frame:04d}.bin")
    return _read_array(fpath, _DTYPE_TAGS["f32le"], (detector.height, detector.width))


def domain_to_dict(spec):
    return {
        "extent_m": list(spec.physical_extent),
        "time_span_s": list(spec.time_span),
        "grid_shape": list(spec.grid_shape),
        "frame_count": spec.frame_count,
        "length_scale_m": spec.length_scale,
        "time_scale_s": spec.time_scale,
    }


def domain_from_dict(doc):
    return DomainSpec(
        physical_extent=tuple(doc["extent_m"]),
        time_span=tuple(doc["time_span_s"]),
        grid_shape=tuple(doc["grid_shape"]),
        frame_count=doc["frame_count"],
        length_scale=doc.get("length_scale_m"),
        time_scale=doc.get("time_scale_s"),
    )


def materials_to_dict(m):
    return {"rho1": m.rho1, "rho2": m.rho2, "mu1": m.mu1, "mu2": m.mu2,
            "n1": list(m.n1), "n2": list(m.n2), "Re": m.Re, "We": m.We}


def materials_from_dict(doc):
    from .types import MaterialPair

    return MaterialPair(doc["rho1"], doc["rho2"], doc["mu1"], doc["mu2"],
                        tuple(doc["n1"]), tuple(doc["n2"]), doc["Re"], doc["We"])


def write_checkpoint(path, header, sections):
    """Write a checkpoint file.

    header: JSON-serializable dict; a "sections" entry is filled in here.
    sections: ordered dict of name -> 1-D float64 array.
    """
    header = dict(header)
    header["sections"] = [
        {"name": name, "dtype": "f64le", "count": int(np.asarray(arr).size)}
        for name, arr in sections.items()
    ]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        for arr in sections.values():
            fh.write(np.ascontiguousarray(np.asarray(arr), dtype="<f8").tobytes())


def read_checkpoint(path):
    """Read a checkpoint file back into (header, {name: float64 array})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise UsageError(f"{path}: not a checkpoint file")
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        try:
            header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise UsageError(f"{path}: malformed checkpoint header: {exc}")
        sections = {}
        for sec in header.get("sections", []):
            count = int(sec["count"])
            data = np.frombuffer(fh.read(count * 8), dtype="<f8")
            if data.size != count:
                raise UsageError(f"{path}: truncated section {sec['name']!r}")
            sections[sec["name"]] = data.astype(np.float64)
    return header, sections
