"""Minimal NIfTI-1 reader/writer (single-file ``.nii``/``.nii.gz`` and ``ni1`` pairs).

Only 3D, single-frame images of datatype uint8, int16 or float32 are accepted.
The orientation block of the header (qform/sform fields and intent name) is
kept as opaque bytes and written back verbatim.
"""
from __future__ import annotations

import gzip
import io
import os
from pathlib import Path

import numpy as np

from .volume import HOUNSFIELD, SegVolume, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: "u1", DT_INT16: "i2", DT_FLOAT32: "f4"}
_BITPIX = {DT_UINT8: 8, DT_INT16: 16, DT_FLOAT32: 32}

# offsets of the opaque orientation block: qform_code .. intent_name
_AFFINE_START, _AFFINE_END = 252, 344


class NiftiFormatError(ValueError):
    """Not a readable NIfTI-1 file."""


class UnsupportedDatatypeError(NiftiFormatError):
    pass


def _header_dtype(endian: str) -> np.dtype:
    return np.dtype([
        ("sizeof_hdr", endian + "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", endian + "i4"),
        ("session_error", endian + "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", endian + "i2", (8,)),
        ("intent_p1", endian + "f4"), ("intent_p2", endian + "f4"), ("intent_p3", endian + "f4"),
        ("intent_code", endian + "i2"), ("datatype", endian + "i2"), ("bitpix", endian + "i2"),
        ("slice_start", endian + "i2"), ("pixdim", endian + "f4", (8,)), ("vox_offset", endian + "f4"),
        ("scl_slope", endian + "f4"), ("scl_inter", endian + "f4"), ("slice_end", endian + "i2"),
        ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", endian + "f4"), ("cal_min", endian + "f4"),
        ("slice_duration", endian + "f4"), ("toffset", endian + "f4"), ("glmax", endian + "i4"),
        ("glmin", endian + "i4"), ("descrip", "S80"), ("aux_file", "S24"), ("orientation", "V92"),
        ("magic", "S4"),
    ])


assert _header_dtype("<").itemsize == HEADER_SIZE


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiFormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _parse_header(raw: bytes, path) -> np.void:
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: truncated header ({len(raw)} < {HEADER_SIZE} bytes)")
    for endian in "<>":
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype(endian))[0]
        if hdr["sizeof_hdr"] == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError(f"{path}: sizeof_hdr is not {HEADER_SIZE}")
    if hdr["magic"] not in (b"n+1", b"ni1"):
        raise NiftiFormatError(f"{path}: bad magic {hdr['magic']!r}, expected 'n+1' or 'ni1'")
    return hdr


def read_nifti(path, label_path=None) -> Volume | tuple[Volume, SegVolume]:
    """Load an image (and optionally its label map) reordered to (z, y, x).

    Returns the :class:`Volume` alone, or ``(Volume, SegVolume)`` when
    ``label_path`` is given.
    """
    volume = _load(Path(path), labels=False)
    if label_path is None:
        return volume
    seg = _load(Path(label_path), labels=True)
    seg.check_aligned(volume)
    return volume, seg


def read_labels(path) -> SegVolume:
    return _load(Path(path), labels=True)


def _load(path: Path, labels: bool):
    raw = _read_bytes(path)
    hdr = _parse_header(raw, path)
    endian = "<" if hdr.dtype["sizeof_hdr"].byteorder in "<=|" else ">"
    dim = [int(d) for d in hdr["dim"]]
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d > 1 for d in dim[4 : ndim + 1]):
        raise NiftiFormatError(f"{path}: only single-frame 3D images are supported (dim={dim[: ndim + 1]})")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) < 1:
        raise NiftiFormatError(f"{path}: non-positive image dimension {dim[1:4]}")
    code = int(hdr["datatype"])
    if code not in _DTYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported NIfTI datatype code {code}")
    pixdim = [float(p) for p in hdr["pixdim"][1:4]]
    if not all(p > 0 for p in pixdim):
        raise NiftiFormatError(f"{path}: pixdim must be positive, got {pixdim}")
    spacing = (pixdim[2], pixdim[1], pixdim[0])

    if hdr["magic"] == b"ni1":
        payload = _read_bytes(path.with_suffix(".img") if path.suffix != ".gz" else Path(str(path)[:-7] + ".img"))
        offset = int(hdr["vox_offset"])
    else:
        payload = raw
        offset = int(hdr["vox_offset"]) or VOX_OFFSET
    count = nx * ny * nz
    dtype = np.dtype(_DTYPES[code]).newbyteorder(endian)
    if len(payload) < offset + count * dtype.itemsize:
        raise NiftiFormatError(f"{path}: image data truncated")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(nz, ny, nx)
    affine = bytes(raw[_AFFINE_START:_AFFINE_END])

    if labels:
        return SegVolume(arr.astype(np.int64), spacing, affine)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    data = arr.astype(np.float32)
    if slope != 0 and np.isfinite(slope) and np.isfinite(inter) and (slope, inter) != (1.0, 0.0):
        data = (arr.astype(np.float64) * slope + inter).astype(np.float32)
    return Volume(data, spacing, HOUNSFIELD, affine)


def _default_affine(spacing) -> bytes:
    dz, dy, dx = spacing
    block = bytearray(_AFFINE_END - _AFFINE_START)
    # sform_code = 1 (scanner), srow_* diagonal with voxel sizes
    np.frombuffer(block, dtype="<i2", count=2)[:] = (0, 1)
    srow = np.zeros(12, dtype="<f4")
    srow[[0, 5, 10]] = (dx, dy, dz)
    block[280 - _AFFINE_START : 328 - _AFFINE_START] = srow.tobytes()
    return bytes(block)


def encode_nifti(obj: Volume | SegVolume, raw_dtype=None, scl=(1.0, 0.0)) -> bytes:
    """Serialize to single-file NIfTI-1 bytes (uncompressed).

    Volumes are stored as float32 and label maps as uint8 unless ``raw_dtype``
    overrides (uint8/int16/float32); ``scl`` sets scl_slope/scl_inter.
    """
    if isinstance(obj, SegVolume):
        data, code = obj.labels, DT_UINT8
    else:
        data, code = obj.data, DT_FLOAT32
    if raw_dtype is not None:
        code = {np.dtype(v): k for k, v in _DTYPES.items()}[np.dtype(raw_dtype)]
        data = np.asarray(data).astype(raw_dtype)
    nz, ny, nx = data.shape
    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [3, nx, ny, nz, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = _BITPIX[code]
    dz, dy, dx = obj.spacing
    hdr["pixdim"] = [1.0, dx, dy, dz, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"], hdr["scl_inter"] = scl
    hdr["xyzt_units"] = 2  # mm
    hdr["magic"] = b"n+1"
    hdr["orientation"] = np.void(obj.affine if obj.affine is not None else _default_affine(obj.spacing))
    body = np.ascontiguousarray(data, dtype=np.dtype(_DTYPES[code]).newbyteorder("<"))
    return hdr.tobytes() + bytes(4) + body.tobytes()


def write_nifti(obj: Volume | SegVolume, path, raw_dtype=None, scl=(1.0, 0.0)) -> None:
    """Write ``obj`` to ``path``; a ``.gz`` suffix gzips with a fixed timestamp."""
    path = Path(path)
    payload = encode_nifti(obj, raw_dtype, scl)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        buf = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(payload)
        payload = buf.getvalue()
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
