"""Versioned binary model container.

Layout: magic, format version, JSON metadata (including the model kind),
named sections of 64-bit little-endian row-major arrays, and a CRC32
trailer over everything after the magic.  Loads reject bad magic, unknown
versions and checksum mismatches; saves are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import pathlib
import struct
import zlib
from typing import Dict, Tuple

import numpy as np

MAGIC = b"OCFLMODL"
FORMAT_VERSION = 1

_DTYPES = {0: "<f8", 1: "<i8"}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1}


class ContainerError(ValueError):
    """Model file is corrupt or not a model container."""


def pack_container(kind: str, arrays: Dict[str, np.ndarray],
                   meta: dict = None) -> bytes:
    meta = dict(meta or {})
    meta["kind"] = kind
    body = bytearray()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<I", len(meta_bytes)) + meta_bytes
    body += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float64)
        code = _DTYPE_CODES[arr.dtype]
        name_bytes = name.encode("utf-8")
        body += struct.pack("<H", len(name_bytes)) + name_bytes
        body += struct.pack("<BB", code, arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.astype(_DTYPES[code]).tobytes(order="C")
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return MAGIC + bytes(body) + struct.pack("<I", crc)


def unpack_container(blob: bytes) -> Tuple[str, Dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise ContainerError("not a model container (bad magic)")
    body = blob[len(MAGIC):-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContainerError("checksum mismatch (corrupt file)")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (meta_len,) = take("<I")
    meta = json.loads(body[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (n_sections,) = take("<I")
    arrays = {}
    for _ in range(n_sections):
        (name_len,) = take("<H")
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        dtype = np.dtype(_DTYPES[code])
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=off)
        off += count * dtype.itemsize
        arrays[name] = arr.reshape(shape).copy()
    kind = meta.pop("kind", "")
    return kind, arrays, meta


def save_container(path, kind: str, arrays: Dict[str, np.ndarray],
                   meta: dict = None) -> None:
    path = pathlib.Path(path)
    blob = pack_container(kind, arrays, meta)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_container(path) -> Tuple[str, Dict[str, np.ndarray], dict]:
    return unpack_container(pathlib.Path(path).read_bytes())


# --------------------------------------------------------------------------
# model-specific packers


def _rbm_arrays(prefix, p):
    out = {f"{prefix}weights": p.weights,
           f"{prefix}visible_bias": p.visible_bias,
           f"{prefix}hidden_bias": p.hidden_bias}
    if hasattr(p, "visible_sigma"):
        out[f"{prefix}visible_sigma"] = p.visible_sigma
    return out


def save_dbm(path, p, kind: str, meta: dict = None) -> None:
    arrays = {**_rbm_arrays("l1.", p.layer1), **_rbm_arrays("l2.", p.layer2)}
    save_container(path, kind, arrays, meta)


def _load_gaussian(arrays, prefix):
    from .rbm import GaussianRbmParams
    return GaussianRbmParams(arrays[f"{prefix}weights"],
                             arrays[f"{prefix}visible_bias"],
                             arrays[f"{prefix}visible_sigma"],
                             arrays[f"{prefix}hidden_bias"])


def _load_binary(arrays, prefix):
    from .rbm import BinaryRbmParams
    return BinaryRbmParams(arrays[f"{prefix}weights"],
                           arrays[f"{prefix}visible_bias"],
                           arrays[f"{prefix}hidden_bias"])


def load_dbm(path, cls=None):
    from . import dbm
    kind, arrays, meta = load_container(path)
    if cls is None:
        cls = {"shape-dbm": dbm.ShapeDbmParams,
               "texture-dbm": dbm.TextureDbmParams}.get(kind,
                                                        dbm.TwoLayerDbmParams)
    p = cls(_load_gaussian(arrays, "l1."), _load_binary(arrays, "l2."))
    return p, meta


def save_rdbm(path, p, meta: dict = None) -> None:
    arrays = {**_rbm_arrays("tex.l1.", p.texture_dbm.layer1),
              **_rbm_arrays("tex.l2.", p.texture_dbm.layer2),
              **_rbm_arrays("mask.", p.mask_rbm),
              "gating_gamma": p.gating_gamma,
              "observed_bias": p.observed_bias,
              "observed_sigma": p.observed_sigma}
    save_container(path, "rdbm", arrays, meta)


def load_rdbm(path):
    from .dbm import TextureDbmParams
    from .rdbm import RdbmParams
    kind, arrays, meta = load_container(path)
    if kind != "rdbm":
        raise ContainerError(f"expected an rdbm container, got {kind!r}")
    tex = TextureDbmParams(_load_gaussian(arrays, "tex.l1."),
                           _load_binary(arrays, "tex.l2."))
    p = RdbmParams(tex, _load_binary(arrays, "mask."),
                   arrays["gating_gamma"], arrays["observed_bias"],
                   arrays["observed_sigma"])
    return p, meta


def save_joint(path, p, meta: dict = None) -> None:
    save_container(path, "joint", {"weights_shape": p.weights_shape,
                                   "weights_texture": p.weights_texture,
                                   "hidden_bias": p.hidden_bias}, meta)


def load_joint(path):
    from .dbm import JointLayerParams
    kind, arrays, meta = load_container(path)
    if kind != "joint":
        raise ContainerError(f"expected a joint container, got {kind!r}")
    return JointLayerParams(arrays["weights_shape"],
                            arrays["weights_texture"],
                            arrays["hidden_bias"]), meta


def save_frame(path, frame, meta: dict = None) -> None:
    from .geometry import ReferenceFrame
    arrays = {"mean_shape": frame.mean_shape,
              "triangles": frame.triangles.astype(np.int64),
              "pixel_triangles": frame.pixel_triangles.astype(np.int64),
              "pixel_bary": frame.pixel_bary}
    meta = dict(meta or {})
    meta["resolution"] = list(frame.resolution)
    save_container(path, "frame", arrays, meta)


def load_frame(path):
    from .geometry import ReferenceFrame
    kind, arrays, meta = load_container(path)
    if kind != "frame":
        raise ContainerError(f"expected a frame container, got {kind!r}")
    frame = ReferenceFrame(arrays["mean_shape"],
                           arrays["triangles"].astype(np.intp),
                           arrays["pixel_triangles"].astype(np.intp),
                           arrays["pixel_bary"],
                           tuple(meta.pop("resolution")))
    return frame, meta


def save_standardizer(path, mean, std, meta: dict = None) -> None:
    save_container(path, "standardizer", {"mean": np.asarray(mean),
                                          "std": np.asarray(std)}, meta)


def load_standardizer(path):
    kind, arrays, meta = load_container(path)
    if kind != "standardizer":
        raise ContainerError(f"expected a standardizer, got {kind!r}")
    return arrays["mean"], arrays["std"], meta
