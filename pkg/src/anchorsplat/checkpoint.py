"""Chunked little-endian checkpoint container.

Layout: magic ``CUSG``, u32 version, then chunks of (4-byte tag, u32 byte
length, payload). Readers skip tags they do not know. ``META`` (JSON) is
parsed first because it carries the dimensions the other chunks need.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from . import config as config_mod
from . import diffcore as dc
from .decoders import DecoderBank
from .membank import AdaptLayer, MemoryBank, bank_bytes, parse_bank
from .model import Model
from .scaffold import Camera, Scaffold, decode_anchors, encode_anchors

MAGIC = b"CUSG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _chunk(tag, payload):
    return tag + struct.pack("<I", len(payload)) + payload


def save(path, model, optimizer=None, iteration=0, rng_state=None):
    sc, dec = model.scaffold, model.decoders
    meta = {
        "config": model.cfg.to_dict(),
        "iteration": iteration,
        "seed": model.cfg.train.seed,
        "rng_state": rng_state,
        "cameras": [c.to_dict() for c in model.cameras],
        "train_views": model.train_views,
        "anchor_ids": sc.ids.tolist(),
        "next_id": sc.next_id,
        "bank_tags": list(model.bank.banks),
        "precision": np.dtype(sc.latents.data.dtype).name,
    }
    mlps = []
    for _, layers in dec.head_layers():
        mlps.append(struct.pack("<I", len(layers)))
        for w, b in layers:
            mlps += [_f32(w.data), _f32(b.data)]
    adpt = []
    for tag in model.bank.banks:
        layer = model.adapt[tag]
        adpt += [_f32(layer.proj.data), _f32(layer.w.data), _f32(layer.b.data)]
    chunks = [_chunk(b"ANCH", encode_anchors(sc)), _chunk(b"MLPS", b"".join(mlps)),
              _chunk(b"ADPT", b"".join(adpt)), _chunk(b"EMBD", _f32(model.embeds.data)),
              _chunk(b"BANK", bank_bytes(model.bank))]
    if sc.query_residual is not None:
        chunks.append(_chunk(b"QRES", _f32(sc.query_residual.data)))
    if optimizer is not None:
        opts = [struct.pack("<II", optimizer.step_count, len(optimizer.params))]
        for name, m, v in optimizer.state():
            t = name.encode()
            opts += [struct.pack("<B", len(t)) + t, struct.pack("<I", m.size), _f32(m), _f32(v)]
        chunks.append(_chunk(b"OPTS", b"".join(opts)))
    chunks.append(_chunk(b"META", json.dumps(meta, sort_keys=True).encode()))
    blob = MAGIC + struct.pack("<I", VERSION) + b"".join(chunks)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_chunks(buf):
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 8
    chunks = {}
    while off < len(buf):
        if off + 8 > len(buf):
            raise CheckpointError(f"truncated chunk header at byte {off}")
        tag = bytes(buf[off:off + 4])
        (n,) = struct.unpack_from("<I", buf, off + 4)
        if off + 8 + n > len(buf):
            raise CheckpointError(f"chunk {tag!r} at byte {off} truncated: needs {n} bytes")
        chunks[tag] = buf[off + 8:off + 8 + n]
        off += 8 + n
    return chunks


def _take(buf, off, count):
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return arr, off + 4 * count


def load(path, optimizer_factory=None):
    """Returns (model, optimizer or None, meta)."""
    with open(path, "rb") as fh:
        chunks = read_chunks(fh.read())
    if b"META" not in chunks:
        raise CheckpointError("checkpoint has no META chunk")
    meta = json.loads(chunks[b"META"].decode())
    cfg = config_mod.from_dict(meta["config"])
    s = cfg.scene
    dtype = np.dtype(meta.get("precision", "float32")).type
    with dc.precision(dtype):
        cells, lat, off, scr = decode_anchors(chunks[b"ANCH"], s.n_per_anchor, s.d_f)
        sc = Scaffold(s.voxel_size, s.n_per_anchor, cells,
                      dc.Param(lat, "anchor_latent", "latents"),
                      dc.Param(off, "anchor_offset", "offsets"),
                      dc.Param(scr, "anchor_scale", "scale_raw"),
                      np.asarray(meta["anchor_ids"], dtype=np.int64), d_f=s.d_f,
                      next_id=meta["next_id"])
        if b"QRES" in chunks:
            q = np.frombuffer(chunks[b"QRES"], dtype="<f4").reshape(len(sc), -1)
            sc.query_residual = dc.Param(q, "anchor_latent", "query_residual")
        dec = DecoderBank(np.random.default_rng(0), s.d_f, s.d_c, s.d_q, s.n_per_anchor)
        buf, o = chunks[b"MLPS"], 0
        for _, layers in dec.head_layers():
            (nl,) = struct.unpack_from("<I", buf, o)
            o += 4
            if nl != len(layers):
                raise CheckpointError("MLPS layer count mismatch")
            for w, b in layers:
                arr, o = _take(buf, o, w.data.size)
                w.assign(arr.reshape(w.shape))
                arr, o = _take(buf, o, b.data.size)
                b.assign(arr)
        parsed = parse_bank(bytes(chunks[b"BANK"]))
        bank = MemoryBank({t: parsed[t] for t in meta["bank_tags"]})
        adapt = {}
        buf, o = chunks[b"ADPT"], 0
        for tag, sub in bank.banks.items():
            layer = AdaptLayer(np.random.default_rng(0), tag, sub.dim, s.d_q)
            for p in layer.params():
                arr, o = _take(buf, o, p.data.size)
                p.assign(arr.reshape(p.shape))
            adapt[tag] = layer
        cams = [Camera.from_dict(c) for c in meta["cameras"]]
        embeds = dc.Param(np.frombuffer(chunks[b"EMBD"], dtype="<f4").reshape(len(cams), s.d_c),
                          "appearance_embed", "appearance")
        model = Model(cfg, sc, dec, embeds, bank, adapt, cams, meta["train_views"])
        opt = None
        if optimizer_factory is not None:
            opt = optimizer_factory(model)
            if b"OPTS" in chunks:
                buf = chunks[b"OPTS"]
                step, n = struct.unpack_from("<II", buf, 0)
                o = 8
                entries = []
                for _ in range(n):
                    ln = buf[o]
                    name = bytes(buf[o + 1:o + 1 + ln]).decode()
                    o += 1 + ln
                    (size,) = struct.unpack_from("<I", buf, o)
                    o += 4
                    m, o = _take(buf, o, size)
                    v, o = _take(buf, o, size)
                    entries.append((name, m, v))
                opt.load_state(entries, step)
    return model, opt, meta
