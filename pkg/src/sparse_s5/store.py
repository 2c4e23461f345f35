"""Single-file binary container for models, scales and integer checkpoints.

Layout (all integers little-endian)::

    b"SRNN" | u32 version | u64 manifest_len | manifest (UTF-8 JSON) | pad to 8
    blob*:  u64 payload_len | u32 crc32(payload) | u32 0 | payload | pad to 8

The manifest lists entries in blob order. Each entry names one tensor with
its role, dtype, shape and layout plus free-form metadata; floats that must
survive bit-exactly (scales) are written with ``float.hex``.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .s5 import ModelSpec, S5Model
from .tensors import Mask, SparseMatrix

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "StoreError",
    "BadMagicError",
    "VersionError",
    "CrcError",
    "ManifestError",
    "TensorBundle",
    "save",
    "load",
    "load_bundle",
    "save_file",
    "load_file",
]

MAGIC = b"SRNN"
FORMAT_VERSION = 1

_DTYPES = {"f32": "<f4", "i8": "i1", "i16": "<i2", "i32": "<i4"}
_CSR_VALUE = {"csr-i8": "i1", "csr-i16": "<i2"}


class StoreError(Exception):
    """Container cannot be read."""


class BadMagicError(StoreError):
    pass


class VersionError(StoreError):
    pass


class CrcError(StoreError):
    pass


class ManifestError(StoreError):
    pass


@dataclass
class TensorBundle:
    """Named arrays plus JSON-able metadata; the generic entity."""

    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# low-level encode/decode

def _pad8(n: int) -> int:
    return (-n) % 8


def _encode_array(a: np.ndarray) -> tuple[str, bytes]:
    tag = {("f", 4): "f32", ("i", 1): "i8", ("i", 2): "i16", ("i", 4): "i32"}.get((a.dtype.kind, a.dtype.itemsize))
    if tag is None:
        raise StoreError(f"unsupported dtype {a.dtype}")
    return tag, np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes()


def _encode_csr(m: SparseMatrix) -> tuple[str, bytes]:
    vdt = {np.dtype(np.int8): "csr-i8", np.dtype(np.int16): "csr-i16"}.get(m.values.dtype)
    if vdt is None:
        raise StoreError(f"CSR values must be int8 or int16, got {m.values.dtype}")
    payload = (np.asarray(m.row_offsets, "<i4").tobytes() + np.asarray(m.col_indices, "<i4").tobytes()
               + np.asarray(m.values, _CSR_VALUE[vdt]).tobytes())
    return vdt, payload


class _Writer:
    def __init__(self):
        self.entries: list[dict] = []
        self.blobs: list[bytes] = []

    def array(self, name: str, role: str, a, **meta):
        a = np.asarray(a)
        tag, payload = _encode_array(a)
        self.entries.append(dict(name=name, role=role, dtype=tag, shape=list(a.shape), layout="dense", meta=meta))
        self.blobs.append(payload)

    def mask(self, name: str, m: Mask, **meta):
        self.entries.append(dict(name=name, role="mask", dtype="bitmask", shape=[m.rows, m.cols],
                                 layout="packed-lsb", meta=meta))
        self.blobs.append(m.bits.tobytes())

    def csr(self, name: str, m: SparseMatrix, **meta):
        tag, payload = _encode_csr(m)
        self.entries.append(dict(name=name, role="weight", dtype=tag, shape=[m.rows, m.cols], layout="csr",
                                 meta=dict(meta, nnz=m.nnz)))
        self.blobs.append(payload)

    def finish(self, kind: str, header: dict) -> bytes:
        manifest = json.dumps({"kind": kind, "header": header, "entries": self.entries},
                              sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = bytearray(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(manifest)) + manifest)
        out += b"\0" * _pad8(len(out))
        for blob in self.blobs:
            out += struct.pack("<QII", len(blob), zlib.crc32(blob), 0) + blob
            out += b"\0" * _pad8(len(out))
        return bytes(out)


def _parse(data: bytes):
    if len(data) < 16 or data[:4] != MAGIC:
        raise BadMagicError("not an SRNN container (bad magic)")
    version, mlen = struct.unpack_from("<IQ", data, 4)
    if version > FORMAT_VERSION:
        raise VersionError(f"container version {version} is newer than supported {FORMAT_VERSION}")
    if version < 1:
        raise VersionError(f"invalid container version {version}")
    pos = 16
    if pos + mlen > len(data):
        raise ManifestError("manifest runs past end of data")
    try:
        manifest = json.loads(data[pos: pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    pos += mlen
    pos += _pad8(pos)
    blobs = []
    for entry in manifest.get("entries", []):
        if pos + 16 > len(data):
            raise ManifestError(f"manifest entry {entry.get('name')!r} has no blob")
        n, crc, _ = struct.unpack_from("<QII", data, pos)
        pos += 16
        if pos + n > len(data):
            raise ManifestError(f"blob for {entry.get('name')!r} runs past end of data")
        payload = data[pos: pos + n]
        if zlib.crc32(payload) != crc:
            raise CrcError(f"CRC mismatch in tensor {entry.get('name')!r}")
        blobs.append(payload)
        pos += n
        pos += _pad8(pos)
    if pos != len(data):
        raise ManifestError(f"{len(data) - pos} trailing bytes not described by the manifest")
    return manifest, blobs


def _decode(entry: dict, payload: bytes):
    dtype, shape = entry["dtype"], tuple(entry["shape"])
    if dtype in _DTYPES:
        a = np.frombuffer(payload, dtype=_DTYPES[dtype])
        if a.size != int(np.prod(shape, dtype=np.int64)):
            raise ManifestError(f"tensor {entry['name']!r}: payload size does not match shape")
        return a.reshape(shape).astype(a.dtype.newbyteorder("="))
    if dtype == "bitmask":
        return Mask(shape[0], shape[1], np.frombuffer(payload, dtype=np.uint8).copy())
    if dtype in _CSR_VALUE:
        rows, cols = shape
        nnz = entry["meta"]["nnz"]
        vsz = np.dtype(_CSR_VALUE[dtype]).itemsize
        if len(payload) != 4 * (rows + 1) + 4 * nnz + vsz * nnz:
            raise ManifestError(f"tensor {entry['name']!r}: CSR payload size mismatch")
        ro = np.frombuffer(payload, "<i4", rows + 1).astype(np.int64)
        ci = np.frombuffer(payload, "<i4", nnz, 4 * (rows + 1)).astype(np.int64)
        vals = np.frombuffer(payload, _CSR_VALUE[dtype], nnz, 4 * (rows + 1 + nnz))
        return SparseMatrix(rows, cols, ro, ci, vals.astype(vals.dtype.newbyteorder("=")))
    raise ManifestError(f"tensor {entry['name']!r}: unknown dtype {dtype!r}")


# ---------------------------------------------------------------------------
# entities

def _scales_header(scales) -> list:
    return [[s.site, s.bits, float(s.scale).hex(), float(s.absmax).hex(), bool(s.degenerate)] for s in scales.values()]


def _scales_from_header(rows):
    from .quantizer import QuantScale, ScaleSet

    out = ScaleSet()
    for site, bits, scale, absmax, degen in rows:
        out[site] = QuantScale(site, int(bits), float.fromhex(scale), float.fromhex(absmax), bool(degen))
    return out


def save(entity, *, scales=None) -> bytes:
    """Serialize an S5Model (optionally with scales), ScaleSet, FxpCheckpoint or TensorBundle."""
    from .fxp import FxpCheckpoint
    from .quantizer import ScaleSet

    w = _Writer()
    if isinstance(entity, S5Model):
        for name, a in entity.tensors().items():
            w.array(name, "weight", a)
        for name, m in sorted(entity.masks.items()):
            w.mask(name, m)
        header = {"spec": entity.spec.to_dict()}
        if scales is not None:
            header["scales"] = _scales_header(scales)
        return w.finish("model", header)
    if isinstance(entity, ScaleSet):
        return w.finish("scales", {"scales": _scales_header(entity)})
    if isinstance(entity, FxpCheckpoint):
        for name, a in entity.weights.items():
            w.array(name, "weight", a)
        for name, m in entity.csr.items():
            w.csr("csr:" + name, m)
        for i, lut in enumerate(entity.luts):
            w.array(f"layers.{i}.sigmoid_lut", "lut", lut.table, k=lut.k)
        for name, m in sorted(entity.masks.items()):
            w.mask(name, m)
        header = {
            "spec": entity.spec.to_dict(),
            "recipe": entity.recipe.to_dict(),
            "scales": _scales_header(entity.scales),
            "requant": {k: [q.m, q.r, q.src, q.dst] for k, q in entity.requant.items()},
        }
        return w.finish("fxp", header)
    if isinstance(entity, TensorBundle):
        for name, a in entity.tensors.items():
            w.array(name, "tensor", a)
        return w.finish("bundle", dict(entity.meta))
    raise TypeError(f"cannot save {type(entity).__name__}")


def load_bundle(data: bytes):
    """Parse a container; returns ``(entity, extras)``.

    ``extras`` carries optional sections, e.g. the scales stored alongside a
    float model.
    """
    from .fxp import FxpCheckpoint, Requantizer, SigmoidLut
    from .quantizer import QuantRecipe

    manifest, blobs = _parse(bytes(data))
    kind = manifest.get("kind")
    header = manifest.get("header", {})
    entries = manifest.get("entries", [])
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ManifestError("duplicate tensor names in manifest")
    dec = {e["name"]: _decode(e, b) for e, b in zip(entries, blobs)}
    roles = {e["name"]: e for e in entries}
    extras = {}
    if kind == "model":
        spec = ModelSpec.from_dict(header["spec"])
        masks = {n: v for n, v in dec.items() if roles[n]["role"] == "mask"}
        tensors = {n: v for n, v in dec.items() if roles[n]["role"] == "weight"}
        try:
            model = S5Model.from_tensors(spec, tensors, masks)
        except KeyError as exc:
            raise ManifestError(f"model container lacks tensor {exc}") from exc
        if "scales" in header:
            extras["scales"] = _scales_from_header(header["scales"])
        return model, extras
    if kind == "scales":
        return _scales_from_header(header["scales"]), extras
    if kind == "fxp":
        spec = ModelSpec.from_dict(header["spec"])
        r = header["recipe"]
        recipe = QuantRecipe(r["weight_bits"], r["lambda_bits"], r["act_bits"], dict(r["overrides"]))
        weights = {n: v for n, v in dec.items() if roles[n]["role"] == "weight" and roles[n]["layout"] == "dense"}
        csr = {n[4:]: v for n, v in dec.items() if roles[n]["layout"] == "csr"}
        luts = []
        for i in range(spec.depth):
            name = f"layers.{i}.sigmoid_lut"
            if name not in dec:
                raise ManifestError(f"fxp container lacks {name}")
            luts.append(SigmoidLut(int(roles[name]["meta"]["k"]), dec[name]))
        masks = {n: v for n, v in dec.items() if roles[n]["role"] == "mask"}
        rq = {k: Requantizer(int(m), int(s), src, dst) for k, (m, s, src, dst) in header["requant"].items()}
        ck = FxpCheckpoint(spec, recipe, _scales_from_header(header["scales"]), weights, csr, rq, tuple(luts), masks)
        return ck, extras
    if kind == "bundle":
        return TensorBundle(dec, dict(header)), extras
    raise ManifestError(f"unknown container kind {kind!r}")


def load(data: bytes):
    return load_bundle(data)[0]


def save_file(path, entity, **kw) -> None:
    Path(path).write_bytes(save(entity, **kw))


def load_file(path):
    return load_bundle(Path(path).read_bytes())
