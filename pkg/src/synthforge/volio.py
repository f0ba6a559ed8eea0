"""Volume file I/O: NIfTI-1 and a dependency-free raw format.

NIfTI-1 files are written little-endian with a 348-byte header,
``vox_offset`` 352, identity affine in the srow fields, and datatype 16
(float32) for intensity images or 512 (uint16) for label maps.  The raw
format is a little-endian array file plus a JSON sidecar carrying dims,
element kind, byte order and a content digest.  Both formats round-trip
volumes bit-exactly.

Arrays are indexed ``[x, y, z]``; on disk the flat layout is x-fastest
(Fortran order), matching the NIfTI convention.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os

import numpy as np

from .errors import DataFormatError
from .voxel import INTENSITY_DTYPE, LABEL_DTYPE

RAW_SCHEMA_VERSION = 1

_HEADER_DTD = [
    ("sizeof_hdr", "<i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "<i4"),
    ("session_error", "<i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"),
    ("intent_p2", "<f4"),
    ("intent_p3", "<f4"),
    ("intent_code", "<i2"),
    ("datatype", "<i2"),
    ("bitpix", "<i2"),
    ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"),
    ("scl_slope", "<f4"),
    ("scl_inter", "<f4"),
    ("slice_end", "<i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "<f4"),
    ("cal_min", "<f4"),
    ("slice_duration", "<f4"),
    ("toffset", "<f4"),
    ("glmax", "<i4"),
    ("glmin", "<i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "<i2"),
    ("sform_code", "<i2"),
    ("quatern_b", "<f4"),
    ("quatern_c", "<f4"),
    ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"),
    ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)),
    ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
_HEADER_DTYPE = np.dtype(_HEADER_DTD)
assert _HEADER_DTYPE.itemsize == 348

# NIfTI datatype code -> numpy dtype (little-endian), for the types we read.
_DTYPE_OF_CODE = {
    2: "<u1",
    4: "<i2",
    8: "<i4",
    16: "<f4",
    64: "<f8",
    256: "<i1",
    512: "<u2",
    768: "<u4",
}

_LABEL_CODE = 512       # uint16
_INTENSITY_CODE = 16    # float32


def element_kind(vol: np.ndarray) -> str:
    """``"label"`` for uint16 volumes, ``"intensity"`` for float32."""
    if vol.dtype == LABEL_DTYPE:
        return "label"
    if vol.dtype == INTENSITY_DTYPE:
        return "intensity"
    raise DataFormatError(
        f"unsupported element kind {vol.dtype}; volumes must be uint16 labels or float32 intensities"
    )


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _data_digest(payload: bytes) -> str:
    return "sha256:" + hashlib.sha256(payload).hexdigest()


def _format_of_path(path: str) -> str:
    name = path.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    if name.endswith(".raw"):
        return "raw"
    raise DataFormatError(f"cannot infer volume format from {path!r} (.nii, .nii.gz or .raw)")


def _sidecar_path(path: str) -> str:
    return path[: -len(".raw")] + ".json"


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def _build_header(vol: np.ndarray) -> np.ndarray:
    kind = element_kind(vol)
    hdr = np.zeros((), dtype=_HEADER_DTYPE)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = vol.shape
    hdr["dim"] = dim
    hdr["datatype"] = _LABEL_CODE if kind == "label" else _INTENSITY_CODE
    hdr["bitpix"] = vol.dtype.itemsize * 8
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0:4] = 1.0
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = b"synthforge"
    hdr["sform_code"] = 1
    hdr["srow_x"] = (1.0, 0.0, 0.0, 0.0)
    hdr["srow_y"] = (0.0, 1.0, 0.0, 0.0)
    hdr["srow_z"] = (0.0, 0.0, 1.0, 0.0)
    hdr["magic"] = b"n+1\x00"
    return hdr


def _nifti_bytes(vol: np.ndarray) -> bytes:
    hdr = _build_header(vol)
    data = np.ascontiguousarray(vol).astype(vol.dtype.newbyteorder("<"), copy=False)
    return hdr.tobytes() + b"\x00" * 4 + data.ravel(order="F").tobytes()


def write_volume(vol: np.ndarray, path: str, fmt: str | None = None) -> None:
    """Write a volume to ``path``; format inferred from the suffix.

    ``.nii`` / ``.nii.gz`` write NIfTI-1 (gzipped for ``.gz``); ``.raw``
    writes the raw array plus its JSON sidecar.
    """
    if vol.ndim != 3:
        raise DataFormatError(f"expected a 3D volume, got shape {vol.shape}")
    kind = element_kind(vol)
    actual = _format_of_path(path)
    if fmt is not None and fmt != actual:
        raise DataFormatError(f"format {fmt!r} does not match path {path!r}")
    if actual == "nifti":
        blob = _nifti_bytes(vol)
        if path.lower().endswith(".gz"):
            # mtime pinned so identical volumes produce identical bytes
            blob = gzip.compress(blob, mtime=0)
        with open(path, "wb") as fh:
            fh.write(blob)
        return
    payload = (
        np.ascontiguousarray(vol)
        .astype(vol.dtype.newbyteorder("<"), copy=False)
        .ravel(order="F")
        .tobytes()
    )
    sidecar = {
        "schema_version": RAW_SCHEMA_VERSION,
        "dims": list(vol.shape),
        "element_kind": kind,
        "byte_order": "little",
        "digest": _data_digest(payload),
    }
    with open(path, "wb") as fh:
        fh.write(payload)
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------


def _read_nifti(path: str) -> np.ndarray:
    opener = gzip.open if path.lower().endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            blob = fh.read()
    except (OSError, gzip.BadGzipFile) as exc:
        raise DataFormatError(f"cannot read {path!r}: {exc}") from exc
    if len(blob) < 352:
        raise DataFormatError(f"{path!r} is too short to be a NIfTI-1 file")
    hdr = np.frombuffer(blob[:348], dtype=_HEADER_DTYPE)[0]
    swapped = False
    if hdr["sizeof_hdr"] != 348:
        hdr = np.frombuffer(blob[:348], dtype=_HEADER_DTYPE.newbyteorder(">"))[0]
        swapped = True
        if hdr["sizeof_hdr"] != 348:
            raise DataFormatError(f"{path!r}: bad sizeof_hdr, not a NIfTI-1 file")
    if bytes(hdr["magic"])[:3] not in (b"n+1", b"ni1"):
        raise DataFormatError(f"{path!r}: bad NIfTI magic {bytes(hdr['magic'])!r}")
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise DataFormatError(f"{path!r}: bad dim[0]={ndim}")
    shape = tuple(int(d) for d in hdr["dim"][1 : ndim + 1])
    extra = [d for d in shape[3:] if d != 1]
    if len(shape) > 3 and extra:
        raise DataFormatError(f"{path!r}: only 3D volumes are supported, got dims {shape}")
    shape3 = tuple(list(shape[:3]) + [1] * (3 - min(ndim, 3)))
    code = int(hdr["datatype"])
    if code not in _DTYPE_OF_CODE:
        raise DataFormatError(f"{path!r}: unsupported NIfTI datatype code {code}")
    dtype = np.dtype(_DTYPE_OF_CODE[code])
    if swapped:
        dtype = dtype.newbyteorder(">")
    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape3))
    end = offset + count * dtype.itemsize
    if end > len(blob):
        raise DataFormatError(f"{path!r}: truncated data section")
    flat = np.frombuffer(blob[offset:end], dtype=dtype)
    vol = flat.reshape(shape3, order="F")
    return np.ascontiguousarray(vol.astype(dtype.newbyteorder("="), copy=False))


def _read_raw(path: str) -> np.ndarray:
    sidecar_path = _sidecar_path(path)
    try:
        with open(sidecar_path, encoding="utf-8") as fh:
            sidecar = json.load(fh)
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"malformed sidecar {sidecar_path!r}: {exc}") from exc
    if sidecar.get("schema_version") != RAW_SCHEMA_VERSION:
        raise DataFormatError(f"{sidecar_path!r}: unsupported schema version")
    if sidecar.get("byte_order") != "little":
        raise DataFormatError(f"{sidecar_path!r}: unsupported byte order")
    if sidecar.get("digest") != _data_digest(payload):
        raise DataFormatError(f"{path!r}: content digest mismatch")
    kind = sidecar.get("element_kind")
    if kind == "label":
        dtype = np.dtype("<u2")
    elif kind == "intensity":
        dtype = np.dtype("<f4")
    else:
        raise DataFormatError(f"{sidecar_path!r}: unknown element kind {kind!r}")
    dims = tuple(int(d) for d in sidecar["dims"])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise DataFormatError(f"{path!r}: expected {expected} bytes, found {len(payload)}")
    vol = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    return np.ascontiguousarray(vol.astype(dtype.newbyteorder("="), copy=False))


def read_volume(path: str) -> np.ndarray:
    """Read a NIfTI-1 or raw volume written by :func:`write_volume`."""
    if not os.path.exists(path):
        raise DataFormatError(f"no such volume file: {path!r}")
    if _format_of_path(path) == "nifti":
        return _read_nifti(path)
    return _read_raw(path)
