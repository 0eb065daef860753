"""Dataset and checkpoint files.

Dataset (directory)::

    scenes.jsonl   header line {"magic", "version", ...} then one JSON record per scene
    scenes.bin     b"GDNPTS\\0\\0" + u32 version, then little-endian float32 point arrays

Checkpoint (single file)::

    b"GDNCKPT\\0" | u32 version | u64 manifest length | manifest JSON | data

The manifest lists every tensor (name, shape, offset, nbytes) packed
contiguously as little-endian float64 plus a CRC32 of the data section.
All writes go to a temporary file that is atomically renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .geometry import check_rotation
from .model import AdamState, DenoiserConfig
from .scene import ObjectModel, SceneRecord, VirtualCamera

DATASET_MAGIC = "GDN-DATASET"
DATASET_VERSION = 1
POINTS_MAGIC = b"GDNPTS\0\0"
CKPT_MAGIC = b"GDNCKPT\0"
CKPT_VERSION = 1
_PTS_HEADER = len(POINTS_MAGIC) + 4
_CKPT_HEADER = len(CKPT_MAGIC) + 4 + 8


class DataError(Exception):
    pass


class IntegrityError(DataError):
    pass


class VersionError(DataError):
    pass


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# dataset -------------------------------------------------------------------


def write_dataset(directory, scenes, spec_dict=None):
    directory = Path(directory)
    blob = bytearray(POINTS_MAGIC + struct.pack("<I", DATASET_VERSION))
    lines = []
    for s in scenes:
        pts = np.ascontiguousarray(s.cloud, dtype="<f4")
        offset = len(blob)
        blob += pts.tobytes()
        grasps = np.concatenate([s.grasp_t, s.grasp_R.reshape(-1, 9)], axis=1)
        rec = {
            "object": s.object.to_dict(),
            "camera": s.camera.to_dict(),
            "cloud_ref": {"offset": offset, "length": int(pts.size), "shape": list(pts.shape)},
            "grasps": grasps.tolist(),
            "labels": [bool(x) for x in s.labels],
            "center": s.center.tolist(),
            "scale": float(s.scale),
        }
        lines.append(_dumps(rec))
    header = {
        "magic": DATASET_MAGIC,
        "version": DATASET_VERSION,
        "n_scenes": len(lines),
        "bin_bytes": len(blob),
        "spec": spec_dict or {},
    }
    text = "\n".join([_dumps(header)] + lines) + "\n"
    atomic_write(directory / "scenes.bin", bytes(blob))
    atomic_write(directory / "scenes.jsonl", text.encode())


def read_dataset(directory):
    directory = Path(directory)
    jpath, bpath = directory / "scenes.jsonl", directory / "scenes.bin"
    if not jpath.exists() or not bpath.exists():
        raise DataError(f"dataset not found in {directory} (need scenes.jsonl and scenes.bin)")
    lines = jpath.read_text().splitlines()
    if not lines:
        raise IntegrityError("dataset index is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"bad dataset header: {exc}") from exc
    if header.get("magic") != DATASET_MAGIC:
        raise IntegrityError("not a dataset index (bad magic)")
    if header.get("version") != DATASET_VERSION:
        raise VersionError(f"dataset version {header.get('version')} != {DATASET_VERSION}")
    blob = bpath.read_bytes()
    if blob[: len(POINTS_MAGIC)] != POINTS_MAGIC:
        raise IntegrityError("point file has bad magic")
    (bver,) = struct.unpack("<I", blob[len(POINTS_MAGIC) : _PTS_HEADER])
    if bver != DATASET_VERSION:
        raise VersionError(f"point file version {bver} != {DATASET_VERSION}")
    if len(blob) != header["bin_bytes"]:
        raise IntegrityError(f"point file has {len(blob)} bytes, index says {header['bin_bytes']}")
    if len(lines) - 1 != header["n_scenes"]:
        raise IntegrityError(f"index has {len(lines) - 1} records, header says {header['n_scenes']}")
    scenes = []
    for i, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
            ref = rec["cloud_ref"]
            off, length, shape = int(ref["offset"]), int(ref["length"]), tuple(ref["shape"])
            if off < _PTS_HEADER or off + 4 * length > len(blob) or int(np.prod(shape)) != length:
                raise IntegrityError(f"record {i}: cloud reference out of bounds")
            cloud = np.frombuffer(blob, dtype="<f4", count=length, offset=off).reshape(shape).copy()
            g = np.array(rec["grasps"], dtype=float).reshape(-1, 12)
            scenes.append(
                SceneRecord(
                    ObjectModel.from_dict(rec["object"]),
                    VirtualCamera.from_dict(rec["camera"]),
                    cloud,
                    np.array(rec["center"], dtype=float),
                    float(rec["scale"]),
                    g[:, :3].copy(),
                    g[:, 3:].reshape(-1, 3, 3).copy(),
                    np.array(rec["labels"], dtype=bool),
                )
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"record {i}: {exc}") from exc
    return scenes, header.get("spec", {})


# checkpoints ---------------------------------------------------------------


def write_checkpoint(path, params, config: DenoiserConfig, adam: AdamState | None = None, meta=None):
    tensors = dict(params)
    if adam is not None:
        for k in params:
            tensors[f"adam.m/{k}"] = adam.m[k]
            tensors[f"adam.v/{k}"] = adam.v[k]
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    data = b"".join(chunks)
    manifest = {
        "version": CKPT_VERSION,
        "model": {
            "d_p": config.d_p,
            "d_i": config.d_i,
            "d_G": config.d_G,
            "n_r": config.n_r,
            "encoder_widths": list(config.encoder_widths),
        },
        "tensors": entries,
        "data_bytes": len(data),
        "crc32": zlib.crc32(data),
        "adam_step": None if adam is None else adam.step,
        "meta": meta or {},
    }
    mbytes = _dumps(manifest).encode()
    atomic_write(path, CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(mbytes)) + mbytes + data)


def read_checkpoint(path):
    """Returns ``(params, config, adam_or_None, meta)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _CKPT_HEADER or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<IQ", raw[len(CKPT_MAGIC) : _CKPT_HEADER])
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version} != {CKPT_VERSION}")
    if _CKPT_HEADER + mlen > len(raw):
        raise IntegrityError("checkpoint truncated inside the manifest")
    try:
        manifest = json.loads(raw[_CKPT_HEADER : _CKPT_HEADER + mlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"checkpoint manifest unreadable: {exc}") from exc
    data = raw[_CKPT_HEADER + mlen :]
    if len(data) != manifest["data_bytes"]:
        raise IntegrityError(f"checkpoint data has {len(data)} bytes, manifest says {manifest['data_bytes']}")
    if zlib.crc32(data) != manifest["crc32"]:
        raise IntegrityError("checkpoint data checksum mismatch")
    tensors, expected = {}, 0
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 8
        if e["offset"] != expected or e["nbytes"] != n or e["offset"] + n > len(data):
            raise IntegrityError(f"checkpoint manifest entry {e['name']!r} inconsistent with layout")
        tensors[e["name"]] = np.frombuffer(data, dtype="<f8", count=n // 8, offset=e["offset"]).reshape(e["shape"]).copy()
        expected += n
    if expected != len(data):
        raise IntegrityError("checkpoint manifest does not cover the data section")
    config = DenoiserConfig(**manifest["model"])
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    adam = None
    if manifest.get("adam_step") is not None:
        adam = AdamState({k: tensors[f"adam.m/{k}"] for k in params}, {k: tensors[f"adam.v/{k}"] for k in params}, manifest["adam_step"])
    return params, config, adam, manifest.get("meta", {})


def validate_params(params, config):
    from .model import param_shapes

    shapes = param_shapes(config)
    if set(shapes) != set(params):
        raise IntegrityError("checkpoint tensors do not match the model layout")
    for k, shp in shapes.items():
        if params[k].shape != shp:
            raise IntegrityError(f"tensor {k!r} has shape {params[k].shape}, expected {shp}")


def write_grasps_csv(path, t, R):
    """World-frame grasps as ``tx,ty,tz,r11..r33`` rows (repr floats: lossless)."""
    rows = ["tx,ty,tz,r11,r12,r13,r21,r22,r23,r31,r32,r33"]
    for ti, Ri in zip(np.asarray(t, dtype=float), np.asarray(R, dtype=float)):
        rows.append(",".join(repr(float(x)) for x in np.concatenate([ti, Ri.reshape(9)])))
    atomic_write(path, ("\n".join(rows) + "\n").encode())


def read_grasps_csv(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"grasp file not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) <= 1:
        raise ValueError(f"{path}: no grasps")
    try:
        arr = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    except ValueError as exc:
        raise DataError(f"{path}: malformed row ({exc})") from exc
    if arr.ndim != 2 or arr.shape[1] != 12:
        raise DataError(f"{path}: expected 12 columns")
    R = arr[:, 3:].reshape(-1, 3, 3)
    try:
        check_rotation(R, tol=1e-5)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return arr[:, :3], R
