"""Key-value translation memories and their binary file format.

A datastore holds one (context key, next-token) record per target token
of a parallel corpus, in corpus order then timestep order.  The on-disk
"FNDS" format is little-endian and bit-exact: a 16-byte header (magic,
version, dim, count) followed by fixed-size records.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from fednn.errors import BadMagicError, TruncatedStreamError, VersionMismatchError

MAGIC = b"FNDS"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")

# A token id is a plain unsigned 32-bit int; a key vector is a (d,)
# float32 array with finite entries.
KEY_DTYPE = np.dtype("<f4")
VALUE_DTYPE = np.dtype("<u4")


@dataclass(frozen=True)
class ParallelCorpus:
    """Sentence pairs of token ids over a shared vocabulary.

    Targets must be non-empty (they carry the trailing EOS token) and
    every id must be below ``vocab_size``.
    """

    pairs: tuple
    vocab_size: int
    domain: str = ""

    def __post_init__(self):
        object.__setattr__(
            self,
            "pairs",
            tuple((tuple(x), tuple(y)) for x, y in self.pairs),
        )
        for x, y in self.pairs:
            if len(y) == 0:
                raise ValueError("empty target sequence in corpus")
            for tok in x + y:
                if not 0 <= tok < self.vocab_size:
                    raise ValueError(
                        "token id %d out of range for vocab %d" % (tok, self.vocab_size)
                    )

    def __len__(self):
        return len(self.pairs)

    def target_token_count(self):
        return sum(len(y) for _, y in self.pairs)


@dataclass
class Datastore:
    """Ordered (key, value) memory records sharing one key dimension.

    ``provenance`` optionally tags each record with the client id that
    produced it; it exists only in memory for the privacy harness and is
    never serialized (equality ignores it accordingly).
    """

    dim: int
    keys: np.ndarray = None
    values: np.ndarray = None
    provenance: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.keys is None:
            self.keys = np.empty((0, self.dim), dtype=KEY_DTYPE)
        if self.values is None:
            self.values = np.empty(0, dtype=VALUE_DTYPE)
        self.keys = np.ascontiguousarray(self.keys, dtype=KEY_DTYPE)
        self.values = np.ascontiguousarray(self.values, dtype=VALUE_DTYPE)
        if self.keys.ndim != 2 or self.keys.shape[1] != self.dim:
            raise ValueError(
                "keys shape %r does not match dim %d" % (self.keys.shape, self.dim)
            )
        if self.values.shape != (self.keys.shape[0],):
            raise ValueError("values length does not match key count")

    def __len__(self):
        return self.keys.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Datastore):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.keys.shape == other.keys.shape
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
        )

    def records(self):
        """Iterate (key, token) pairs in store order."""
        for i in range(len(self)):
            yield self.keys[i], int(self.values[i])


def build_datastore(model, corpus: ParallelCorpus, provenance=None) -> Datastore:
    """One record per target token: (model context at step t, y_t).

    Record order is corpus order then timestep order; construction is
    deterministic given (model, corpus).
    """
    if model.vocab_size != corpus.vocab_size:
        raise ValueError(
            "model vocab %d != corpus vocab %d" % (model.vocab_size, corpus.vocab_size)
        )
    n = corpus.target_token_count()
    keys = np.empty((n, model.dim), dtype=KEY_DTYPE)
    values = np.empty(n, dtype=VALUE_DTYPE)
    i = 0
    for x, y in corpus.pairs:
        for t in range(len(y)):
            key = np.asarray(model.context(x, y[:t]), dtype=KEY_DTYPE)
            if key.shape != (model.dim,):
                raise ValueError(
                    "model context shape %r does not match dim %d"
                    % (key.shape, model.dim)
                )
            keys[i] = key
            values[i] = y[t]
            i += 1
    if n and not np.isfinite(keys).all():
        raise ValueError("model produced non-finite context values")
    prov = None
    if provenance is not None:
        prov = np.full(n, provenance, dtype=VALUE_DTYPE)
    return Datastore(dim=model.dim, keys=keys, values=values, provenance=prov)


def serialize_datastore(store: Datastore) -> bytes:
    """FNDS bytes: header + per-record (d float32 key, u32 token).

    Provenance tags are in-memory only and are dropped here.
    """
    header = HEADER.pack(MAGIC, FORMAT_VERSION, store.dim, len(store))
    if len(store) == 0:
        return header
    body = np.empty((len(store), store.dim + 1), dtype="<u4")
    body[:, : store.dim] = store.keys.astype(KEY_DTYPE).view("<u4")
    body[:, store.dim] = store.values
    return header + body.tobytes()


def deserialize_datastore(data: bytes) -> Datastore:
    if len(data) < HEADER.size:
        if data[:4] != MAGIC[: len(data)]:
            raise BadMagicError("not an FNDS stream")
        raise TruncatedStreamError("FNDS header truncated")
    magic, version, dim, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError("bad magic %r" % magic)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            "unsupported FNDS version %d (expected %d)" % (version, FORMAT_VERSION)
        )
    record_bytes = (dim + 1) * 4
    expected = HEADER.size + count * record_bytes
    if len(data) < expected:
        raise TruncatedStreamError(
            "FNDS stream has %d bytes, expected %d" % (len(data), expected)
        )
    raw = np.frombuffer(data, dtype="<u4", count=count * (dim + 1), offset=HEADER.size)
    raw = raw.reshape(count, dim + 1)
    keys = raw[:, :dim].copy().view(KEY_DTYPE)
    values = raw[:, dim].astype(VALUE_DTYPE)
    return Datastore(dim=dim, keys=keys, values=values)


def save_datastore(store: Datastore, path):
    with open(path, "wb") as f:
        f.write(serialize_datastore(store))


def load_datastore(path) -> Datastore:
    with open(path, "rb") as f:
        return deserialize_datastore(f.read())
