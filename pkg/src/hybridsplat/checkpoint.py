"""Self-describing binary scene checkpoint.

Layout (little-endian)::

    8 bytes   magic b"HSPLATCK"
    uint32    format version
    uint64    header length n
    n bytes   UTF-8 JSON header: config, extent, plane segments, array manifest
    ...       raw array payloads at the manifest offsets (relative to payload start)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import SceneConfig
from .errors import FormatError
from .scene import FreeGaussians, HybridScene, PlaneGaussians, PlaneSegment, SphereGaussians

MAGIC = b"HSPLATCK"
VERSION = 1
_FAMILIES = {"free": FreeGaussians, "inlier": PlaneGaussians, "sky": SphereGaussians}


def save_scene(path, scene: HybridScene) -> None:
    manifest = []
    payload = []
    offset = 0
    for name, cls in _FAMILIES.items():
        fam = scene.family(name)
        for key in fam.array_fields:
            arr = np.ascontiguousarray(getattr(fam, key))
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            manifest.append({"family": name, "field": key, "dtype": arr.dtype.str,
                             "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
            payload.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "config": scene.config.to_dict(),
        "extent": scene.extent,
        "segments": [{"coefficients": s.coefficients.tolist(), "valid_range": list(s.valid_range)}
                     for s in scene.segments],
        "arrays": manifest,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for p in payload:
            fh.write(p)


def load_scene(path) -> HybridScene:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != MAGIC:
        raise FormatError(f"{path}: not a scene checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = 20 + hlen
    try:
        header = json.loads(data[20:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    arrays = {name: {} for name in _FAMILIES}
    for m in header["arrays"]:
        lo = start + m["offset"]
        if lo + m["nbytes"] > len(data):
            raise FormatError(f"{path}: truncated payload")
        arr = np.frombuffer(data, dtype=np.dtype(m["dtype"]), count=int(np.prod(m["shape"], dtype=np.int64)),
                            offset=lo).reshape(m["shape"])
        arrays[m["family"]][m["field"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    try:
        families = {name: cls(**arrays[name]) for name, cls in _FAMILIES.items()}
        config = SceneConfig(**header["config"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    segments = [PlaneSegment(np.asarray(s["coefficients"], dtype=np.float64), tuple(s["valid_range"]))
                for s in header["segments"]]
    scene = HybridScene(free=families["free"], sky=families["sky"], inlier=families["inlier"],
                        segments=segments, config=config, extent=float(header["extent"]))
    scene.check_invariants()
    return scene
