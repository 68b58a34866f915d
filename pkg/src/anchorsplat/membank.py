"""Scene-component memory bank: greedy construction and attention retrieval."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

BANK_MAGIC = b"CUSB"
BANK_VERSION = 1


class RetrievalError(RuntimeError):
    pass


class BankFormatError(ValueError):
    pass


@dataclass
class SubBank:
    tag: str
    entries: np.ndarray  # (K, D) unit rows
    gamma: float
    n_skipped: int = 0
    granularity: str = "pixel"

    @property
    def dim(self):
        return self.entries.shape[1]

    def __len__(self):
        return len(self.entries)


@dataclass
class MemoryBank:
    banks: dict = field(default_factory=dict)  # tag -> SubBank, insertion order kept
    frozen: bool = True

    def __getitem__(self, tag):
        return self.banks[tag]

    @property
    def tags(self):
        return list(self.banks)


def build_bank(raw, gamma, tag="", dim=None):
    """Sequential greedy scan: keep a vector iff its cosine similarity to every
    already-kept entry is below ``gamma``. Zero vectors are skipped."""
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return SubBank(tag, np.zeros((0, dim or 0)), gamma)
    raw = raw.reshape(len(raw), -1)
    norms = np.linalg.norm(raw, axis=1)
    zero = norms == 0
    unit = raw[~zero] / norms[~zero, None]
    kept = np.empty_like(unit)
    k = 0
    for r in unit:
        if k == 0 or (kept[:k] @ r).max() < gamma:
            kept[k] = r
            k += 1
    return SubBank(tag, kept[:k].copy(), gamma, int(zero.sum()))


def build_bank_fast(raw, gamma, tag=""):
    """Result-equivalent to ``build_bank`` for long streams with many repeats:
    exact duplicates of an already-seen vector can never be selected twice, so
    only first occurrences are scanned."""
    raw = np.asarray(raw, dtype=np.float64).reshape(len(raw), -1)
    _, first = np.unique(raw, axis=0, return_index=True)
    return build_bank(raw[np.sort(first)], gamma, tag)


class AdaptLayer:
    """Per-model query projector P_j (D_j x d_q) and adaptation W_adapt (D_j x D_j + bias)."""

    def __init__(self, rng, tag, dim, d_q):
        self.tag = tag
        self.dim = dim
        self.proj = dc.Param(rng.normal(0.0, 1.0 / np.sqrt(d_q), (dim, d_q)), "adapt_layer", f"{tag}.proj")
        self.w = dc.Param(np.eye(dim), "adapt_layer", f"{tag}.w_adapt")
        self.b = dc.Param(np.zeros(dim), "adapt_layer", f"{tag}.b_adapt")

    def params(self):
        return [self.proj, self.w, self.b]

    def size(self):
        return sum(p.data.size for p in self.params())


def attention_weights(q_hat, entries):
    """softmax(q_hat m_k / sqrt(D)) over entries, as a diffcore tensor."""
    d = entries.shape[1]
    m = dc.constant(np.ascontiguousarray(entries.T), dtype=q_hat.data.dtype)
    return dc.softmax_rows(dc.scale(dc.matmul(q_hat, m), 1.0 / np.sqrt(d)))


def attend(q_pred, sub, layer, return_weights=False):
    """Retrieve adapted features for rows of rendered queries (P, d_q) -> (P, D)."""
    if len(sub) == 0:
        raise RetrievalError(f"sub-bank {sub.tag!r} is empty")
    q_hat = dc.linear(q_pred, layer.proj)
    a = attention_weights(q_hat, sub.entries)
    f_tilde = dc.matmul(a, dc.constant(sub.entries, dtype=q_pred.data.dtype))
    f = dc.linear(f_tilde, layer.w, layer.b)
    return (f, a) if return_weights else f


# ---------------------------------------------------------------- file IO

def bank_bytes(bank):
    out = [BANK_MAGIC, struct.pack("<IH", BANK_VERSION, len(bank.banks))]
    for tag, sub in bank.banks.items():
        t = tag.encode("utf-8")
        out.append(struct.pack("<B", len(t)) + t)
        out.append(struct.pack("<IfI", sub.dim, sub.gamma, len(sub)))
        out.append(np.ascontiguousarray(sub.entries, dtype="<f4").tobytes())
    return b"".join(out)


def save_bank(path, bank):
    with open(path, "wb") as fh:
        fh.write(bank_bytes(bank))


def load_bank(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_bank(buf)


def _need(buf, off, n, what):
    if off + n > len(buf):
        raise BankFormatError(f"truncated bank at byte {off}: {what} needs {n} bytes, "
                              f"{len(buf) - off} available")


def parse_bank(buf):
    _need(buf, 0, 10, "header")
    if buf[:4] != BANK_MAGIC:
        raise BankFormatError(f"bad magic {buf[:4]!r} at byte 0")
    version, count = struct.unpack_from("<IH", buf, 4)
    if version != BANK_VERSION:
        raise BankFormatError(f"unsupported bank version {version} at byte 4")
    off = 10
    bank = MemoryBank()
    for _ in range(count):
        _need(buf, off, 1, "tag length")
        n = buf[off]
        _need(buf, off + 1, n, "tag")
        tag = buf[off + 1:off + 1 + n].decode("utf-8")
        off += 1 + n
        _need(buf, off, 12, "sub-bank header")
        dim, gamma, k = struct.unpack_from("<IfI", buf, off)
        off += 12
        _need(buf, off, 4 * dim * k, "entries")
        entries = np.frombuffer(buf, dtype="<f4", count=dim * k, offset=off).reshape(k, dim)
        off += 4 * dim * k
        bank.banks[tag] = SubBank(tag, entries.astype(np.float64), float(gamma))
    return bank
