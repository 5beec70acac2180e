"""On-disk formats: PNG images, the ``UDAF`` array container and the ``UDAC``
checkpoint container.

UDAF layout (little endian)::

    b"UDAF" | u8 version | u8 kind (0 real, 1 complex) | u8 ndim
    | u32 dims[ndim] | f64 param | f64 payload (row-major; complex values
    interleaved as re, im)

``param`` carries the cutoff radius of a mask and is NaN for spectra.

UDAC layout (little endian)::

    b"UDAC" | u8 version | u32 header_len | header (UTF-8 JSON) | f32 payload

The JSON header holds ``architecture``, ``config``, ``extra`` and a
``tensors`` table of ``{"name", "dims", "trainable"}`` entries whose float32
payloads follow in table order.
"""
import json
import struct
from pathlib import Path

import cv2
import numpy as np

from .freq_ops import SpectralMask, SpectrumField

UDAF_MAGIC = b"UDAF"
UDAC_MAGIC = b"UDAC"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


# ----------------------------------------------------------------------- PNG

def write_png(path, image, bit_depth=8):
    """Write an (H, W, C) image in [0, 1] as an 8- or 16-bit PNG."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    top = 255 if bit_depth == 8 else 65535
    data = np.round(img * top).astype(np.uint8 if bit_depth == 8 else np.uint16)
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"could not write {path}")


def read_png(path):
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise OSError(f"could not read {path}")
    top = 65535.0 if data.dtype == np.uint16 else 255.0
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_BGR2RGB)
    else:
        data = data[:, :, None]
    return data.astype(np.float64) / top


# ---------------------------------------------------------------------- UDAF

def dumps_array(obj):
    if isinstance(obj, SpectrumField):
        arr, kind, param = obj.coeffs, 1, float("nan")
    elif isinstance(obj, SpectralMask):
        arr, kind, param = obj.weights, 0, obj.cutoff_radius
    else:
        arr = np.asarray(obj)
        kind = 1 if np.iscomplexobj(arr) else 0
        param = float("nan")
    head = UDAF_MAGIC + struct.pack("<BBB", FORMAT_VERSION, kind, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<d", param)
    if kind == 1:
        payload = np.stack([arr.real, arr.imag], axis=-1).astype("<f8")
    else:
        payload = arr.astype("<f8")
    return head + np.ascontiguousarray(payload).tobytes()


def loads_array(buf):
    """Inverse of :func:`dumps_array`; returns ``(array, param)``."""
    if buf[:4] != UDAF_MAGIC:
        raise FormatError("not a UDAF container (bad magic)")
    version, kind, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported UDAF version {version}")
    off = 7
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    (param,) = struct.unpack_from("<d", buf, off)
    off += 8
    count = int(np.prod(dims)) * (2 if kind == 1 else 1)
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=off)
    if kind == 1:
        flat = flat.reshape(-1, 2)
        arr = (flat[:, 0] + 1j * flat[:, 1]).reshape(dims)
    else:
        arr = flat.reshape(dims).astype(np.float64)
    return arr, param


def save_spectrum(path, field):
    Path(path).write_bytes(dumps_array(field))


def load_spectrum(path):
    arr, _ = loads_array(Path(path).read_bytes())
    return SpectrumField(arr)


def save_mask(path, mask):
    Path(path).write_bytes(dumps_array(mask))


def load_mask(path):
    arr, param = loads_array(Path(path).read_bytes())
    return SpectralMask(arr, param)


# ---------------------------------------------------------------------- UDAC

def save_checkpoint(path, tensors, trainable, architecture, config=None, extra=None):
    """Write named float32 tensors plus metadata.

    ``tensors`` maps name -> array-like; ``trainable`` maps name -> bool
    (missing names default to False).
    """
    table, chunks = [], []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        table.append({"name": name, "dims": list(arr.shape),
                      "trainable": bool(trainable.get(name, False))})
        chunks.append(arr.tobytes())
    header = json.dumps(
        {"architecture": architecture, "config": config or {}, "extra": extra or {},
         "tensors": table},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(UDAC_MAGIC + struct.pack("<BI", FORMAT_VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path):
    """Return ``(tensors, trainable, header)`` from a UDAC file."""
    buf = Path(path).read_bytes()
    if buf[:4] != UDAC_MAGIC:
        raise FormatError(f"{path}: not a UDAC checkpoint")
    version, hlen = struct.unpack_from("<BI", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported UDAC version {version}")
    header = json.loads(buf[9:9 + hlen].decode())
    off = 9 + hlen
    tensors, trainable = {}, {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["dims"])) if entry["dims"] else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(entry["dims"])
        off += 4 * count
        tensors[entry["name"]] = arr.astype(np.float32)
        trainable[entry["name"]] = entry["trainable"]
    return tensors, trainable, header
