"""Reading and writing volumes.

Two on-disk formats are supported, auto-detected by magic bytes:

* NIfTI-1 single file (``.nii``): 348-byte header, magic ``n+1\\0``,
  datatypes uint8 (2), int16 (4) and float32 (16), 3D or 4D with 3 channels.
* raw + sidecar: a UTF-8 ``key = value`` text file whose first line is
  :data:`SIDECAR_MAGIC`, pointing to a little-endian binary payload.

Everything outside that envelope is refused with an explicit error.
"""
from __future__ import annotations

import os
import struct
import warnings
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFileError,
    FormatError,
    InvalidLabelError,
    UnsupportedDatatypeError,
    WriteError,
)
from .volume import LabelVolume, ProbVolume, ScalarVolume, VolumeGeometry

NIFTI_MAGIC = b"n+1\x00"
SIDECAR_MAGIC = "# pulmovessel raw volume v1"
HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype (little-endian; swapped for BE files)
NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
DTYPE_NAMES = {"uint8": 2, "int16": 4, "float32": 16}
_CODE_TO_NAME = {v: k for k, v in DTYPE_NAMES.items()}


def detect_format(path) -> str:
    """Return ``"nifti"`` or ``"raw"`` from the file's magic bytes."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
    if len(head) >= HEADER_SIZE and head[344:348] == NIFTI_MAGIC:
        return "nifti"
    if head.startswith(SIDECAR_MAGIC.encode()):
        return "raw"
    raise FormatError(f"{path}: unrecognized magic bytes (expected NIfTI-1 'n+1' or raw sidecar)")


def read_volume(path, label: bool = False):
    """Load a volume from ``path``.

    4D payloads with three channels come back as :class:`ProbVolume`;
    otherwise a :class:`ScalarVolume`, or a :class:`LabelVolume` when
    ``label`` is true (integer datatypes with values in {0, 1, 2} only).
    """
    path = Path(path)
    if detect_format(path) == "nifti":
        arr, geometry, code, scaled = _read_nifti(path)
    else:
        arr, geometry, code = _read_raw(path)
        scaled = False

    if arr.ndim == 4:
        if label:
            raise InvalidLabelError(f"{path}: 4D payload cannot be read as labels")
        return ProbVolume(arr.astype(np.float64), geometry)
    if label:
        if code == 16 or scaled:
            raise InvalidLabelError(f"{path}: label volumes need an unscaled integer datatype")
        if arr.size and (arr.min() < 0 or arr.max() > 2):
            raise InvalidLabelError(
                f"{path}: values in [{arr.min()}, {arr.max()}] are not labels in {{0, 1, 2}}"
            )
        return LabelVolume(arr.astype(np.uint8), geometry)
    return ScalarVolume(arr.astype(np.float64), geometry)


def read_labels(path) -> LabelVolume:
    return read_volume(path, label=True)


def write_volume(volume, path, dtype: str | None = None) -> None:
    """Write ``volume``; ``.nii`` paths get NIfTI-1, anything else raw + sidecar.

    Labels are stored as uint8, scalars and probabilities as float32 unless
    ``dtype`` ("uint8", "int16", "float32") says otherwise.
    """
    path = Path(path)
    arr, code = _payload(volume, dtype)
    try:
        if path.suffix == ".nii":
            _write_nifti(path, arr, volume.geometry, code)
        else:
            _write_raw(path, arr, volume.geometry, code)
    except OSError as exc:
        raise WriteError(path, exc.strerror or exc) from exc


def _payload(volume, dtype):
    if isinstance(volume, LabelVolume):
        name = dtype or "uint8"
    elif isinstance(volume, (ScalarVolume, ProbVolume)):
        name = dtype or "float32"
    else:
        raise TypeError(f"cannot write {type(volume).__name__}")
    if name not in DTYPE_NAMES:
        raise UnsupportedDatatypeError(f"unsupported output datatype {name!r}")
    code = DTYPE_NAMES[name]
    target = NIFTI_DTYPES[code]
    data = volume.data
    if target.kind in "iu":
        info = np.iinfo(target)
        if data.size and (data.min() < info.min or data.max() > info.max or np.any(data != np.round(data))):
            raise UnsupportedDatatypeError(f"values do not fit losslessly in {name}")
    return data.astype(target), code


# ---------------------------------------------------------------------------
# NIfTI-1


def _read_nifti(path: Path):
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise CorruptFileError(f"{path}: truncated header")
    hdr = raw[:HEADER_SIZE]
    if struct.unpack("<i", hdr[:4])[0] == HEADER_SIZE:
        end = "<"
    elif struct.unpack(">i", hdr[:4])[0] == HEADER_SIZE:
        end = ">"
    else:
        raise CorruptFileError(f"{path}: sizeof_hdr is not 348")

    dim = struct.unpack(end + "8h", hdr[40:56])
    code = struct.unpack(end + "h", hdr[70:72])[0]
    pixdim = struct.unpack(end + "8f", hdr[76:108])
    vox_offset = int(struct.unpack(end + "f", hdr[108:112])[0])
    slope, inter = struct.unpack(end + "2f", hdr[112:120])
    qform_code, sform_code = struct.unpack(end + "2h", hdr[252:256])
    quatern = struct.unpack(end + "3f", hdr[256:268])
    qoffset = struct.unpack(end + "3f", hdr[268:280])
    srow = np.array(struct.unpack(end + "12f", hdr[280:328]), dtype=np.float64).reshape(3, 4)

    if code not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: NIfTI datatype code {code} is not supported")
    ndim = dim[0]
    if ndim not in (3, 4):
        raise UnsupportedDatatypeError(f"{path}: dim[0] = {ndim}, only 3D/4D volumes are supported")
    dims = tuple(int(d) for d in dim[1:4])
    channels = int(dim[4]) if ndim == 4 else 1
    if channels not in (1, 3):
        raise UnsupportedDatatypeError(f"{path}: 4D volumes must have 1 or 3 channels, got {channels}")
    if min(dims) < 1:
        raise CorruptFileError(f"{path}: non-positive dims {dims}")

    dtype = NIFTI_DTYPES[code].newbyteorder(end)
    n = dims[0] * dims[1] * dims[2] * channels
    expected = vox_offset + n * dtype.itemsize
    if vox_offset < HEADER_SIZE or len(raw) != expected:
        raise CorruptFileError(
            f"{path}: payload size mismatch (file has {len(raw)} bytes, header implies {expected})"
        )
    arr = np.frombuffer(raw, dtype=dtype, count=n, offset=vox_offset)
    shape = dims + ((channels,) if channels == 3 else ())
    arr = arr.reshape(shape, order="F").astype(dtype.newbyteorder("="))

    scaled = slope != 0 and not (slope == 1 and inter == 0)
    if scaled:
        arr = arr.astype(np.float64) * slope + inter

    if qform_code > 0:
        origin = qoffset
        if any(q != 0 for q in quatern):
            warnings.warn(f"{path}: qform rotation ignored, only the origin translation is used")
    elif sform_code > 0:
        origin = tuple(srow[:, 3])
        linear = srow[:, :3]
        if np.any(linear - np.diag(np.diag(linear))):
            warnings.warn(f"{path}: sform rotation/shear ignored, only the origin translation is used")
    else:
        origin = (0.0, 0.0, 0.0)
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    return arr, VolumeGeometry(dims, spacing, origin), code, scaled


def nifti_header(geometry: VolumeGeometry, code: int, channels: int = 1) -> bytes:
    """Build a little-endian NIfTI-1 header (plus the 4-byte empty extension)."""
    hdr = bytearray(VOX_OFFSET)
    dims = geometry.dims
    dim = [4 if channels > 1 else 3, *dims, channels, 1, 1, 1]
    pixdim = [1.0, *geometry.spacing, 1.0, 1.0, 1.0, 1.0]
    bitpix = NIFTI_DTYPES[code].itemsize * 8
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<b", hdr, 38, ord("r"))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 1, 1)  # qform_code, sform_code
    struct.pack_into("<3f", hdr, 256, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 268, *geometry.origin)
    sx, sy, sz = geometry.spacing
    ox, oy, oz = geometry.origin
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    hdr[344:348] = NIFTI_MAGIC
    return bytes(hdr)


def _write_nifti(path: Path, arr: np.ndarray, geometry: VolumeGeometry, code: int):
    channels = arr.shape[3] if arr.ndim == 4 else 1
    with open(path, "wb") as fh:
        fh.write(nifti_header(geometry, code, channels))
        fh.write(np.asfortranarray(arr).tobytes(order="F"))


# ---------------------------------------------------------------------------
# raw + sidecar


def _payload_path(sidecar: Path) -> Path:
    return sidecar.with_name(sidecar.name + ".raw")


def _write_raw(path: Path, arr: np.ndarray, geometry: VolumeGeometry, code: int):
    channels = arr.shape[3] if arr.ndim == 4 else 1
    payload = _payload_path(path)
    lines = [
        SIDECAR_MAGIC,
        f"dims = {' '.join(str(d) for d in geometry.dims)}",
        f"spacing = {' '.join(repr(s) for s in geometry.spacing)}",
        f"origin = {' '.join(repr(o) for o in geometry.origin)}",
        f"datatype = {_CODE_TO_NAME[code]}",
        f"channels = {channels}",
        "byteorder = little",
        f"payload = {payload.name}",
    ]
    with open(payload, "wb") as fh:
        fh.write(np.asfortranarray(arr).tobytes(order="F"))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sidecar(path) -> dict[str, str]:
    fields = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptFileError(f"{path}: malformed sidecar line {line!r}")
        fields[key.strip()] = value.strip()
    return fields


def _read_raw(path: Path):
    fields = read_sidecar(path)
    try:
        dims = tuple(int(v) for v in fields["dims"].split())
        spacing = tuple(float(v) for v in fields["spacing"].split())
        origin = tuple(float(v) for v in fields.get("origin", "0 0 0").split())
        name = fields["datatype"]
        channels = int(fields.get("channels", "1"))
        payload = path.with_name(fields["payload"])
    except (KeyError, ValueError) as exc:
        raise CorruptFileError(f"{path}: incomplete sidecar ({exc})") from exc
    if name not in DTYPE_NAMES:
        raise UnsupportedDatatypeError(f"{path}: datatype {name!r} is not supported")
    if fields.get("byteorder", "little") != "little":
        raise UnsupportedDatatypeError(f"{path}: only little-endian payloads are supported")
    if channels not in (1, 3):
        raise UnsupportedDatatypeError(f"{path}: channel count must be 1 or 3, got {channels}")
    code = DTYPE_NAMES[name]
    dtype = NIFTI_DTYPES[code]
    geometry = VolumeGeometry(dims, spacing, origin)
    raw = payload.read_bytes()
    n = geometry.size * channels
    if len(raw) != n * dtype.itemsize:
        raise CorruptFileError(
            f"{payload}: payload has {len(raw)} bytes, sidecar implies {n * dtype.itemsize}"
        )
    shape = dims + ((channels,) if channels == 3 else ())
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape, order="F").astype(dtype.newbyteorder("="))
    return arr, geometry, code


def output_path(directory, name: str) -> Path:
    os.makedirs(directory, exist_ok=True)
    return Path(directory) / name
