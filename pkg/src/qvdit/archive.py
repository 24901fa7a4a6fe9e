"""Versioned binary parameter archive.

Layout::

    b"QVDA"                      magic
    uint32 LE                    format version
    uint64 LE                    header length in bytes
    header                       UTF-8 JSON, sorted keys, no whitespace
    payload                      float64 little-endian, arrays back to back

The header lists every array as ``{"name", "shape", "offset"}`` (offset in
float64 elements) plus free-form ``meta``. The encoding is canonical, so
``save(load(b)) == b`` and ``load(save(x)) == x`` bit for bit.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Linear, LayerQuantState, QuantState, ToyDiT
from .quant import QuantParams, QuantSpec
from .tqe import TqeParams

MAGIC = b"QVDA"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_LE_F64 = np.dtype("<f8")


class ArchiveError(ValueError):
    pass


class ArchiveVersionError(ArchiveError):
    pass


class ArchiveMismatch(ArchiveError):
    """Archive contents do not fit the model; the message names the layer."""


@dataclass
class Archive:
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Archive) or self.meta != other.meta or self.arrays.keys() != other.arrays.keys():
            return False
        return all(
            a.shape == other.arrays[k].shape and a.tobytes() == other.arrays[k].tobytes()
            for k, a in self.arrays.items()
        )


def encode(archive: Archive) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(archive.arrays):
        a = np.ascontiguousarray(archive.arrays[name], dtype=_LE_F64)
        entries.append({"name": name, "offset": offset, "shape": list(a.shape)})
        chunks.append(a.tobytes())
        offset += a.size
    header = {"arrays": entries, "format_version": FORMAT_VERSION, "meta": archive.meta}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def decode(data: bytes) -> Archive:
    if len(data) < _PREFIX.size:
        raise ArchiveError("archive truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ArchiveError(f"not a parameter archive (magic {magic!r})")
    if version > FORMAT_VERSION:
        raise ArchiveVersionError(
            f"archive format version {version} is newer than supported version {FORMAT_VERSION}"
        )
    if version < 1:
        raise ArchiveVersionError(f"invalid archive format version {version}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise ArchiveError("archive truncated inside header")
    header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    payload = np.frombuffer(data, dtype=_LE_F64, offset=start) if len(data) > start else np.empty(0)
    arrays = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + size > payload.size:
            raise ArchiveError(f"array {e['name']!r} runs past the end of the payload")
        arrays[e["name"]] = payload[e["offset"]: e["offset"] + size].astype(np.float64).reshape(e["shape"])
    return Archive(header["meta"], arrays)


def save(archive: Archive, path: str | Path) -> None:
    Path(path).write_bytes(encode(archive))


def load(path: str | Path) -> Archive:
    return decode(Path(path).read_bytes())


# -- quant state <-> archive -------------------------------------------------

def pack_state(qstate: QuantState, model: ToyDiT | None = None, meta: dict | None = None) -> Archive:
    layers = {}
    arrays: dict[str, np.ndarray] = {}
    for name, st in qstate.items():
        entry = {
            "a_bits": st.aspec.bits,
            "a_granularity": st.aspec.granularity,
            "w_bits": st.wspec.bits,
            "w_granularity": st.wspec.granularity,
            "has_wparams": st.wparams is not None,
            "has_tqe": st.tqe is not None,
        }
        if st.wparams is not None:
            for key in ("s", "z", "l", "u"):
                arrays[f"layers/{name}/w.{key}"] = getattr(st.wparams, key)
        if st.tqe is not None:
            entry["freeze_m"] = st.tqe.freeze_m
            for key in ("alpha", "beta", "m"):
                arrays[f"layers/{name}/tqe.{key}"] = getattr(st.tqe, key)
        layers[name] = entry
    full_meta = {"layers": layers, **(meta or {})}
    if model is not None:
        full_meta["model_dims"] = {n: [lin.d_out, lin.d_in] for n, lin in model.linears.items()}
        for n, lin in model.linears.items():
            arrays[f"model/{n}/weight"] = lin.weight
            arrays[f"model/{n}/bias"] = lin.bias
    return Archive(full_meta, arrays)


def unpack_state(archive: Archive, model: ToyDiT) -> QuantState:
    """Rebuild a quant state, checking every layer against ``model``'s dimensions."""
    layers = archive.meta.get("layers", {})
    missing = [n for n in model.layer_names if n not in layers]
    if missing:
        raise ArchiveMismatch(f"archive lacks layer {missing[0]!r}")
    extra = sorted(set(layers) - set(model.linears))
    if extra:
        raise ArchiveMismatch(f"archive has layer {extra[0]!r} that the model does not")
    n_frames = model.layout.frames
    state: QuantState = {}
    for name, lin in model.linears.items():
        e = layers[name]
        wspec = QuantSpec(e["w_bits"], e["w_granularity"])
        aspec = QuantSpec(e["a_bits"], e["a_granularity"])
        wparams = None
        if e["has_wparams"]:
            s, z, l, u = (archive.arrays[f"layers/{name}/w.{k}"] for k in "szlu")
            if s.shape != (lin.d_out,):
                raise ArchiveMismatch(
                    f"layer {name!r}: archive has {s.shape[0] if s.ndim else 1} weight channels, model has {lin.d_out}"
                )
            wparams = QuantParams(s, z, l, u, e["w_bits"])
        tqe = None
        if e["has_tqe"]:
            alpha, beta, m = (archive.arrays[f"layers/{name}/tqe.{k}"] for k in ("alpha", "beta", "m"))
            if alpha.shape != (lin.d_in,) or beta.shape != (lin.d_out,) or m.shape != (n_frames,):
                raise ArchiveMismatch(
                    f"layer {name!r}: TQE shapes alpha {alpha.shape}, beta {beta.shape}, m {m.shape} "
                    f"do not fit d_in={lin.d_in}, d_out={lin.d_out}, frames={n_frames}"
                )
            tqe = TqeParams(alpha, beta, m, bool(e.get("freeze_m", False)))
        state[name] = LayerQuantState(wspec, aspec, wparams, tqe)
    return state


def check_model_weights(archive: Archive, model: ToyDiT) -> None:
    """Raise if archived teacher weights differ from ``model``'s (dims first, then values)."""
    for name, lin in model.linears.items():
        key = f"model/{name}/weight"
        if key not in archive.arrays:
            continue
        w = archive.arrays[key]
        if w.shape != lin.weight.shape:
            raise ArchiveMismatch(f"layer {name!r}: archived weight {w.shape}, model weight {lin.weight.shape}")
        if w.tobytes() != lin.weight.tobytes() or archive.arrays[f"model/{name}/bias"].tobytes() != lin.bias.tobytes():
            raise ArchiveMismatch(f"layer {name!r}: archived teacher weights differ from the rebuilt model")


def model_from_archive(archive: Archive, model: ToyDiT) -> ToyDiT:
    """Copy of ``model`` carrying the archived weights."""
    linears = {}
    for name, lin in model.linears.items():
        w = archive.arrays[f"model/{name}/weight"]
        if w.shape != lin.weight.shape:
            raise ArchiveMismatch(f"layer {name!r}: archived weight {w.shape}, model weight {lin.weight.shape}")
        linears[name] = Linear(w.copy(), archive.arrays[f"model/{name}/bias"].copy())
    return ToyDiT(model.cfg, linears)
