"""
On-disk formats.

Voxel grid (``.vox``)::

    16 bytes   magic b"OCCVOX-GRID\\x00v1\\x00\\x00"
    3 x u32    dims H, W, Z
    f64        resolution
    3 x f64    origin
    u32        payload kind code
    u32        payload width (0 for scalar cells)
    ...        cells, x-fastest, payload contiguous per cell

Raster (``.ras``)::

    8 bytes    magic b"OCCRAS1\\x00"
    u32 w, u32 h, u32 dtype code, u32 channels
    ...        channels x h x w values, then (depth only) an h x w u8 mask

Calibration (text): one ``key=value`` per line with keys K (9 floats,
row-major), R (9 floats), t (3 floats) and image_dims (2 ints).  Blank lines
and ``#`` comments are skipped.

Parameters: magic, u32 manifest length, UTF-8 JSON manifest listing
``name``/``shape``/``offset`` (in f64 elements), then the flat f64 blob.

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .grid import (PAYLOAD_DTYPES, CameraCalibration, DepthMap, GridSpec,
                   SegmentationMap, VoxelGrid)

GRID_MAGIC = b"OCCVOX-GRID\x00v1\x00\x00"
RASTER_MAGIC = b"OCCRAS1\x00"
PARAMS_MAGIC = b"OCCPAR1\x00"

_KIND_CODES = {"label": 1, "label16": 2, "bool": 3, "f32": 4, "f64": 5}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_GRID_HEADER = struct.Struct("<3I4d2I")

_RASTER_CODES = {"depth": 1, "label": 2, "f32": 3}
_RASTER_HEADER = struct.Struct("<4I")


def grid_to_bytes(grid: VoxelGrid) -> bytes:
    H, W, Z = grid.spec.dims
    width = 0 if grid.cells.ndim == 3 else grid.width
    header = _GRID_HEADER.pack(H, W, Z, grid.spec.resolution, *grid.spec.origin,
                               _KIND_CODES[grid.kind], width)
    payload = np.ascontiguousarray(grid.flat(), dtype=PAYLOAD_DTYPES[grid.kind])
    return GRID_MAGIC + header + payload.tobytes()


def grid_from_bytes(data: bytes) -> VoxelGrid:
    if data[:16] != GRID_MAGIC:
        raise FormatError("not a voxel grid file (bad magic)")
    end = 16 + _GRID_HEADER.size
    if len(data) < end:
        raise FormatError("truncated voxel grid header")
    H, W, Z, res, ox, oy, oz, code, width = _GRID_HEADER.unpack(data[16:end])
    if code not in _CODE_KINDS:
        raise FormatError(f"unknown payload kind code {code}")
    kind = _CODE_KINDS[code]
    dtype = PAYLOAD_DTYPES[kind]
    count = H * W * Z * max(width, 1)
    if len(data) - end != count * dtype.itemsize:
        raise FormatError("payload size does not match header")
    flat = np.frombuffer(data, dtype=dtype, offset=end, count=count)
    # rebuild the spec from dims so extent/res rounding cannot shift dims
    spec = GridSpec.from_dims((H, W, Z), res, (ox, oy, oz))
    if width == 0:
        return VoxelGrid.from_flat(spec, flat, kind)
    return VoxelGrid.from_flat(spec, flat.reshape(-1, width), kind, width)


def save_grid(path, grid: VoxelGrid) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def load_grid(path) -> VoxelGrid:
    return grid_from_bytes(Path(path).read_bytes())


def format_calibration(calib: CameraCalibration) -> str:
    def floats(a):
        return " ".join(repr(float(v)) for v in np.ravel(a))

    return (f"K={floats(calib.K)}\n"
            f"R={floats(calib.R)}\n"
            f"t={floats(calib.t)}\n"
            f"image_dims={calib.image_dims[0]} {calib.image_dims[1]}\n")


def parse_calibration(text: str) -> CameraCalibration:
    """Parse the ``key=value`` calibration format; missing keys are an error."""
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value.replace(",", " ").split()
    expected = {"K": 9, "R": 9, "t": 3, "image_dims": 2}
    missing = sorted(set(expected) - set(fields))
    if missing:
        raise FormatError(f"calibration missing keys: {', '.join(missing)}")
    for key, n in expected.items():
        if len(fields[key]) != n:
            raise FormatError(f"{key} needs {n} values, got {len(fields[key])}")
    try:
        return CameraCalibration(
            K=np.array(fields["K"], dtype=float).reshape(3, 3),
            R=np.array(fields["R"], dtype=float).reshape(3, 3),
            t=np.array(fields["t"], dtype=float),
            image_dims=tuple(int(v) for v in fields["image_dims"]),
        )
    except ValueError as exc:
        raise FormatError(f"bad calibration value: {exc}") from exc


def save_calibration(path, calib: CameraCalibration) -> None:
    Path(path).write_text(format_calibration(calib))


def load_calibration(path) -> CameraCalibration:
    return parse_calibration(Path(path).read_text())


def _raster_bytes(code, planes, mask=None) -> bytes:
    c, h, w = planes.shape
    out = RASTER_MAGIC + _RASTER_HEADER.pack(w, h, code, c) + planes.tobytes()
    if mask is not None:
        out += mask.astype("u1").tobytes()
    return out


def depth_to_bytes(depth: DepthMap) -> bytes:
    return _raster_bytes(_RASTER_CODES["depth"],
                         depth.values.astype("<f8")[None], depth.valid)


def segmentation_to_bytes(seg: SegmentationMap) -> bytes:
    if seg.labels.size and seg.labels.max() > 0xFFFF:
        raise FormatError("labels above 65535 cannot be stored")
    return _raster_bytes(_RASTER_CODES["label"], seg.labels.astype("<u2")[None])


def features_to_bytes(features: np.ndarray) -> bytes:
    """Multi-channel ``(C, h, w)`` float raster."""
    features = np.asarray(features)
    if features.ndim != 3:
        raise FormatError("feature raster must be (C, h, w)")
    return _raster_bytes(_RASTER_CODES["f32"], features.astype("<f4"))


def raster_from_bytes(data: bytes):
    """Decode any raster file into a DepthMap, SegmentationMap or ``(C, h, w)`` array."""
    if data[:8] != RASTER_MAGIC:
        raise FormatError("not a raster file (bad magic)")
    end = 8 + _RASTER_HEADER.size
    if len(data) < end:
        raise FormatError("truncated raster header")
    w, h, code, c = _RASTER_HEADER.unpack(data[8:end])
    dtype = {1: "<f8", 2: "<u2", 3: "<f4"}.get(code)
    if dtype is None:
        raise FormatError(f"unknown raster dtype code {code}")
    n = c * h * w
    size = n * np.dtype(dtype).itemsize
    mask_size = h * w if code == 1 else 0
    if len(data) - end != size + mask_size:
        raise FormatError("raster payload size does not match header")
    planes = np.frombuffer(data, dtype=dtype, offset=end, count=n).reshape(c, h, w)
    if code == 1:
        mask = np.frombuffer(data, dtype="u1", offset=end + size, count=h * w)
        return DepthMap(planes[0], mask.reshape(h, w).astype(bool))
    if code == 2:
        return SegmentationMap(planes[0].astype(np.int64))
    return planes.astype(np.float32)


def save_raster(path, raster) -> None:
    if isinstance(raster, DepthMap):
        data = depth_to_bytes(raster)
    elif isinstance(raster, SegmentationMap):
        data = segmentation_to_bytes(raster)
    else:
        data = features_to_bytes(raster)
    Path(path).write_bytes(data)


def load_raster(path):
    return raster_from_bytes(Path(path).read_bytes())


def params_to_bytes(params: dict) -> bytes:
    """Serialize a name -> array mapping; names are written in sorted order."""
    manifest, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.ravel().tobytes())
        offset += arr.size
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return PARAMS_MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def params_from_bytes(data: bytes) -> dict:
    if data[:8] != PARAMS_MAGIC:
        raise FormatError("not a parameter file (bad magic)")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        manifest = json.loads(data[12:12 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt manifest: {exc}") from exc
    blob = np.frombuffer(data, dtype="<f8", offset=12 + n)
    out = {}
    for entry in manifest:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > blob.size:
            raise FormatError(f"parameter {entry['name']} runs past the blob")
        out[entry["name"]] = blob[start:start + size].reshape(entry["shape"]).astype(np.float64)
    return out


def save_params(path, params: dict) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> dict:
    return params_from_bytes(Path(path).read_bytes())
