"""Caption embeddings, corpus whitening and the TTEC cache format.

TTEC layout (little-endian)::

    b"TTEC" | u32 version=1 | u8 kind (0 raw, 1 whitened) | u32 d_txt | u64 count
    count × (u16 id_len | id bytes (UTF-8) | d_txt × f32)
    whitened only: d_txt × f64 mean | d_txt² × f64 inverse-sqrt covariance (row-major)
"""
import re
import struct
from dataclasses import dataclass

import numpy as np

from .kernels import fnv1a64
from .numerics.linalg import psd_inv_sqrt

MAGIC = b"TTEC"
VERSION = 1
KIND_RAW, KIND_WHITENED = 0, 1
DEFAULT_FLOOR = 1e-6
_HEADER = struct.Struct("<4sIBIQ")
_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


class CacheError(ValueError):
    """Base class for unreadable embedding caches."""


class BadMagicError(CacheError):
    pass


class VersionError(CacheError):
    pass


class DimensionError(CacheError):
    pass


class TruncatedError(CacheError):
    pass


@dataclass
class RawEmbeddingSet:
    dim: int
    ids: list
    vectors: np.ndarray  # (n, dim)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors).reshape(len(self.ids), self.dim)
        if not np.isfinite(self.vectors).all():
            raise ValueError("embeddings must be finite")

    def __len__(self):
        return len(self.ids)

    @property
    def rows(self):
        return dict(zip(self.ids, self.vectors))


@dataclass
class WhiteningStats:
    mean: np.ndarray
    inv_sqrt_cov: np.ndarray
    floor: float = DEFAULT_FLOOR


@dataclass
class WhitenedTargetSet:
    stats: WhiteningStats
    ids: list
    targets: np.ndarray  # (n, dim)

    @property
    def dim(self):
        return self.stats.mean.shape[0]

    def __len__(self):
        return len(self.ids)

    @property
    def rows(self):
        return dict(zip(self.ids, self.targets))

    def matrix_for(self, ids):
        """Targets stacked in the order of ``ids``; raises ``KeyError`` naming a missing id."""
        index = {k: i for i, k in enumerate(self.ids)}
        missing = [k for k in ids if k not in index]
        if missing:
            raise KeyError(f"no text target for sample id {missing[0]!r} ({len(missing)} missing)")
        return self.targets[[index[k] for k in ids]]


def tokenize(caption):
    return [t for t in _TOKEN_SPLIT.split(caption.lower()) if t]


def pseudo_encode(caption, d_txt, seed=0):
    """Hashed signed bag-of-tokens embedding, a frozen stand-in for a text encoder.

    Each token is hashed with FNV-1a 64 whose offset basis is XOR-ed with
    ``seed``; bucket ``h mod d_txt`` receives ``-1`` if bit 63 of ``h`` is set,
    else ``+1``.
    """
    if d_txt < 8:
        raise ValueError("d_txt must be at least 8")
    out = np.zeros(d_txt, dtype=np.float64)
    for tok in tokenize(caption):
        h = fnv1a64(tok.encode("utf-8"), int(seed) & 0xFFFFFFFFFFFFFFFF)
        out[h % d_txt] += -1.0 if h >> 63 else 1.0
    return out


def embed_captions(ids, captions, d_txt, seed=0):
    vecs = np.stack([pseudo_encode(c, d_txt, seed) for c in captions]) if captions else np.zeros((0, d_txt))
    return RawEmbeddingSet(d_txt, list(ids), vecs)


def fit_whitening(raw, floor=DEFAULT_FLOOR):
    """Empirical mean and ``psd_inv_sqrt`` of the 1/N covariance."""
    x = np.asarray(raw.vectors, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("whitening needs at least 2 samples")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = (xc.T @ xc) / x.shape[0]
    return WhiteningStats(mu, psd_inv_sqrt(cov, floor), floor)


def whiten(v, stats):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"vector dim {v.shape[-1]} != whitening dim {stats.mean.shape[0]}")
    return (v - stats.mean) @ stats.inv_sqrt_cov.T


def whiten_set(raw, stats):
    return WhitenedTargetSet(stats, list(raw.ids), whiten(raw.vectors, stats))


def build_targets(raw, train_ids=None, floor=DEFAULT_FLOOR):
    """Fit whitening on ``train_ids`` (default: everything) and whiten all rows."""
    fit_on = raw
    if train_ids is not None:
        keep = set(train_ids)
        mask = [i for i, k in enumerate(raw.ids) if k in keep]
        fit_on = RawEmbeddingSet(raw.dim, [raw.ids[i] for i in mask], raw.vectors[mask])
    return whiten_set(raw, fit_whitening(fit_on, floor))


# -- cache I/O ------------------------------------------------------------------

def save_cache(embeddings, path):
    whitened = isinstance(embeddings, WhitenedTargetSet)
    rows = embeddings.targets if whitened else embeddings.vectors
    dim = embeddings.dim
    parts = [_HEADER.pack(MAGIC, VERSION, KIND_WHITENED if whitened else KIND_RAW, dim, len(embeddings.ids))]
    rows32 = np.asarray(rows, dtype="<f4").reshape(len(embeddings.ids), dim)
    for sid, row in zip(embeddings.ids, rows32):
        b = sid.encode("utf-8")
        if len(b) > 0xFFFF:
            raise ValueError(f"sample id too long: {sid[:32]}...")
        parts.append(struct.pack("<H", len(b)))
        parts.append(b)
        parts.append(row.tobytes())
    if whitened:
        parts.append(np.asarray(embeddings.stats.mean, dtype="<f8").tobytes())
        parts.append(np.asarray(embeddings.stats.inv_sqrt_cov, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedError(f"cache truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def load_cache(path, expected_dim=None):
    """Read a TTEC file; returns a ``RawEmbeddingSet`` or ``WhitenedTargetSet``.

    Rows come back as float32 exactly as stored.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if len(r.data) >= 4 and r.data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a TTEC cache (magic {r.data[:4]!r})")
    magic, version, kind, dim, count = _HEADER.unpack(r.take(_HEADER.size))
    if version != VERSION:
        raise VersionError(f"{path}: unsupported TTEC version {version}")
    if kind not in (KIND_RAW, KIND_WHITENED):
        raise CacheError(f"{path}: unknown kind {kind}")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionError(f"{path}: d_txt {dim} != expected {expected_dim}")
    ids = []
    rows = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        (n,) = struct.unpack("<H", r.take(2))
        ids.append(r.take(n).decode("utf-8"))
        rows[i] = np.frombuffer(r.take(4 * dim), dtype="<f4")
    if kind == KIND_RAW:
        result = RawEmbeddingSet(dim, ids, rows)
    else:
        mean = np.frombuffer(r.take(8 * dim), dtype="<f8").copy()
        inv = np.frombuffer(r.take(8 * dim * dim), dtype="<f8").reshape(dim, dim).copy()
        result = WhitenedTargetSet(WhiteningStats(mean, inv), ids, rows)
    if r.pos != len(r.data):
        raise DimensionError(f"{path}: {len(r.data) - r.pos} trailing bytes; dimension mismatch?")
    return result
