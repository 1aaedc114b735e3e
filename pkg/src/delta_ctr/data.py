"""Categorical CTR data pipeline.

Reads header-bearing delimited text (tab or comma, auto-detected), builds
per-field vocabularies with a frequency threshold, encodes instances as
dense index rows, splits 8:1:1, and serves shuffled batches. A binary
cache format ("DLTA") avoids re-encoding between runs.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng

CACHE_MAGIC = b"DLTA"
CACHE_VERSION = 1

MISSING_TOKEN = "MISSING"


class DataError(ValueError):
    pass


@dataclass
class FieldSchema:
    name: str
    kind: str = "categorical"  # categorical | numeric-to-bucket


@dataclass
class Vocabulary:
    """Per-field token -> index maps; index 0 is reserved for OOV/rare."""

    maps: list[dict[str, int]]

    @property
    def sizes(self):
        return [len(m) + 1 for m in self.maps]

    def encode_token(self, field_i, token):
        return self.maps[field_i].get(token, 0)

    def to_json(self):
        return json.dumps({"maps": self.maps})

    @classmethod
    def from_json(cls, s):
        return cls(maps=json.loads(s)["maps"])


@dataclass
class Dataset:
    """Encoded instances: one int index per field plus a binary label."""

    schema: list[FieldSchema]
    indices: np.ndarray  # (N, n_fields) int32
    labels: np.ndarray  # (N,) uint8
    vocab_sizes: list[int]
    bayes_scores: np.ndarray | None = None  # synthetic data only
    informative_fields: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def n_fields(self):
        return self.indices.shape[1]

    def subset(self, idx):
        return Dataset(
            schema=self.schema,
            indices=self.indices[idx],
            labels=self.labels[idx],
            vocab_sizes=self.vocab_sizes,
            bayes_scores=None if self.bayes_scores is None else self.bayes_scores[idx],
            informative_fields=list(self.informative_fields),
        )


def bucketize_numeric(v):
    """Criteo-style squared-log bucketing of a numeric value into a token."""
    if v is None or (isinstance(v, str) and v.strip() == ""):
        return MISSING_TOKEN
    v = float(v)
    if math.isnan(v) or v < 0:
        return MISSING_TOKEN
    if v <= 2:
        return str(int(v))
    return str(int(math.floor(math.log(v) ** 2)))


def _detect_delimiter(header_line):
    return "\t" if "\t" in header_line else ","


def read_raw(path):
    """Parse a delimited file into (schema, label list, token rows).

    The header must contain a `label` column; every other column is a field.
    """
    with open(path, newline="") as f:
        first = f.readline()
        if not first:
            raise DataError(f"{path}: empty file")
        delim = _detect_delimiter(first)
        header = next(csv.reader([first], delimiter=delim))
        if "label" not in header:
            raise DataError(f"{path}: no 'label' column in header {header}")
        label_col = header.index("label")
        names = [h for i, h in enumerate(header) if i != label_col]
        schema = [FieldSchema(name) for name in names]
        labels, rows = [], []
        for lineno, row in enumerate(csv.reader(f, delimiter=delim), start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                y = int(float(row[label_col]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad label {row[label_col]!r}") from None
            if y not in (0, 1):
                raise DataError(f"{path}:{lineno}: label must be 0/1, got {y}")
            labels.append(y)
            rows.append([tok for i, tok in enumerate(row) if i != label_col])
    return schema, labels, rows


def build_vocab(rows, n_fields, min_freq=1):
    """Deterministic vocabulary: tokens sorted by frequency desc then
    lexicographic; tokens below min_freq fold to index 0."""
    if min_freq < 1:
        raise DataError(f"min_freq must be >= 1, got {min_freq}")
    counts = [dict() for _ in range(n_fields)]
    for row in rows:
        for i, tok in enumerate(row):
            counts[i][tok] = counts[i].get(tok, 0) + 1
    maps = []
    for c in counts:
        kept = sorted(
            (tok for tok, n in c.items() if n >= min_freq),
            key=lambda t: (-c[t], t),
        )
        maps.append({tok: j + 1 for j, tok in enumerate(kept)})
    return Vocabulary(maps=maps)


def encode(schema, labels, rows, vocab):
    n_fields = len(schema)
    indices = np.zeros((len(rows), n_fields), dtype=np.int32)
    for r, row in enumerate(rows):
        for i, tok in enumerate(row):
            if schema[i].kind == "numeric-to-bucket":
                tok = bucketize_numeric(tok)
            indices[r, i] = vocab.encode_token(i, tok)
    return Dataset(
        schema=schema,
        indices=indices,
        labels=np.asarray(labels, dtype=np.uint8),
        vocab_sizes=vocab.sizes,
    )


def split_dataset(d, seed):
    """Disjoint 8:1:1 cover, sizes within +-1, permutation fixed by seed."""
    n = len(d)
    if n < 10:
        raise DataError(f"need at least 10 instances to split, got {n}")
    perm = Rng(seed).split("split").permutation(n)
    n_val = round(n * 0.1)
    n_test = round(n * 0.1)
    n_train = n - n_val - n_test
    tr = perm[:n_train]
    va = perm[n_train : n_train + n_val]
    te = perm[n_train + n_val :]
    return d.subset(tr), d.subset(va), d.subset(te)


def batch_iter(d, batch_size, seed=0, shuffle=True):
    """Yield (indices, labels) batches covering the dataset exactly once."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(d)
    order = Rng(seed).split("batches").permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        sel = order[start : start + batch_size]
        yield d.indices[sel], d.labels[sel]


def generate_synthetic(n_fields, n_informative, vocab_size, n_rows, seed):
    """Planted-interaction dataset for end-to-end verification.

    Labels come from a logistic model over the first ``n_informative``
    fields only; the remaining fields are pure noise. Each informative
    (field, value) pair carries a latent scalar; the planted signal is the
    sum of pairwise products of those latents (for a single informative
    field, the latent itself). The Bayes-optimal score per instance is
    recorded so tests can compute the achievable-AUC ceiling.
    """
    if not 0 <= n_informative <= n_fields:
        raise DataError("n_informative must be in [0, n_fields]")
    rng = Rng(seed).split("synthetic")
    indices = rng.integers(1, vocab_size, (n_rows, n_fields)).astype(np.int32)
    logit = np.zeros(n_rows)
    if n_informative > 0:
        latents = rng.normal((n_informative, vocab_size))
        z = [latents[i, indices[:, i]] for i in range(n_informative)]
        if n_informative == 1:
            interaction = z[0]
        else:
            interaction = np.zeros(n_rows)
            for i in range(n_informative):
                for j in range(i + 1, n_informative):
                    interaction = interaction + z[i] * z[j]
        logit = 2.5 * interaction
    p = 1.0 / (1.0 + np.exp(-logit))
    labels = (rng.random((n_rows,)) < p).astype(np.uint8)
    schema = [FieldSchema(f"f{i}") for i in range(n_fields)]
    return Dataset(
        schema=schema,
        indices=indices,
        labels=labels,
        vocab_sizes=[vocab_size] * n_fields,
        bayes_scores=p,
        informative_fields=list(range(n_informative)),
    )


def save_cache(path, d, splits=None):
    """Binary cache: magic "DLTA", version u16, n_fields u16, vocab sizes
    u32 each, row count u64, then packed rows (n int32 indices, label u8,
    split tag u8)."""
    n, nf = d.indices.shape
    if splits is None:
        splits = np.zeros(n, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<HH", CACHE_VERSION, nf))
        f.write(struct.pack(f"<{nf}I", *d.vocab_sizes))
        f.write(struct.pack("<Q", n))
        for r in range(n):
            f.write(d.indices[r].astype("<i4").tobytes())
            f.write(struct.pack("<BB", int(d.labels[r]), int(splits[r])))


def load_cache(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CACHE_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        version, nf = struct.unpack("<HH", f.read(4))
        if version != CACHE_VERSION:
            raise DataError(f"{path}: unsupported cache version {version}")
        vocab_sizes = list(struct.unpack(f"<{nf}I", f.read(4 * nf)))
        (n,) = struct.unpack("<Q", f.read(8))
        indices = np.zeros((n, nf), dtype=np.int32)
        labels = np.zeros(n, dtype=np.uint8)
        splits = np.zeros(n, dtype=np.uint8)
        row_bytes = 4 * nf + 2
        for r in range(n):
            buf = f.read(row_bytes)
            indices[r] = np.frombuffer(buf[: 4 * nf], dtype="<i4")
            labels[r], splits[r] = buf[-2], buf[-1]
    d = Dataset(
        schema=[FieldSchema(f"f{i}") for i in range(nf)],
        indices=indices,
        labels=labels,
        vocab_sizes=vocab_sizes,
    )
    return d, splits
