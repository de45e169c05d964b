"""Inverted-file product quantizer: key encoding and ADC search.

Keys are assigned to a coarse k-means centroid; the residual is encoded
per subspace against small codebooks.  Search ranks entries of the
probed coarse lists by asymmetric distance (raw query vs encoded key)
computed through per-query lookup tables.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from fednn import kernels
from fednn.errors import (
    BadMagicError,
    InsufficientSamplesError,
    TruncatedStreamError,
    VersionMismatchError,
)

PQ_MAGIC = b"FNPQ"
PQ_FORMAT_VERSION = 1
PQ_HEADER = struct.Struct("<4sIIIII")  # magic, version, d, m, bits, n_coarse


@dataclass(frozen=True)
class PQConfig:
    """Quantizer shape; defaults are desk scale."""

    n_coarse: int = 64
    m: int = 4
    bits: int = 4
    n_probe: int = 16
    kmeans_iters: int = 25
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ValueError("bits must be in 1..16")
        if self.n_coarse < 1 or self.m < 1:
            raise ValueError("n_coarse and m must be positive")
        if self.n_probe < 1 or self.n_probe > self.n_coarse:
            raise ValueError("n_probe must be in 1..n_coarse")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be positive")

    @property
    def codebook_size(self):
        return 1 << self.bits

    @classmethod
    def production_scale(cls, **overrides):
        """4096 coarse centroids, 64 probed lists; the deployment setting."""
        base = dict(n_coarse=4096, n_probe=64)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class EncodedKey:
    """Coarse centroid index plus one sub-code per subspace."""

    coarse_id: int
    subcodes: tuple

    def __post_init__(self):
        object.__setattr__(self, "subcodes", tuple(int(c) for c in self.subcodes))


@dataclass
class PQModel:
    """Trained coarse centroids and per-subspace codebooks."""

    coarse_centroids: np.ndarray  # (n_coarse, d) float32
    codebooks: np.ndarray  # (m, 2**bits, d // m) float32
    config: PQConfig

    def __post_init__(self):
        self.coarse_centroids = np.ascontiguousarray(
            self.coarse_centroids, dtype=np.float32
        )
        self.codebooks = np.ascontiguousarray(self.codebooks, dtype=np.float32)
        cfg = self.config
        if self.coarse_centroids.shape != (cfg.n_coarse, self.dim):
            raise ValueError("coarse centroid shape inconsistent with config")
        if self.codebooks.shape != (cfg.m, cfg.codebook_size, self.subdim):
            raise ValueError("codebook shape inconsistent with config")
        if not np.isfinite(self.coarse_centroids).all() or not np.isfinite(
            self.codebooks
        ).all():
            raise ValueError("non-finite centroids")

    @property
    def dim(self):
        return self.coarse_centroids.shape[1]

    @property
    def subdim(self):
        return self.dim // self.config.m


def kmeans_fit(points, k, iters, rng, collect_history=False):
    """Seeded k-means with k-means++ init and deterministic tie-breaks.

    Empty clusters are repaired by reseeding to the point farthest from
    its assigned centroid.  Returns (centroids, assignments) float64, or
    (centroids, assignments, history) with per-iteration centroid
    snapshots when ``collect_history`` is set.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n, d = points.shape
    if n < k:
        raise InsufficientSamplesError("%d points for %d clusters" % (n, k))
    centroids = _kmeans_pp_init(points, k, rng)
    history = []
    for _ in range(iters):
        assign, dist = kernels.nearest_centroid(points, centroids)
        assign, dist = _repair_empty_clusters(points, centroids, assign, dist, k)
        sums = np.zeros((k, d))
        np.add.at(sums, assign, points)
        counts = np.bincount(assign, minlength=k)
        mask = counts > 0
        new_centroids = centroids.copy()
        new_centroids[mask] = sums[mask] / counts[mask][:, None]
        centroids = new_centroids
        if collect_history:
            history.append(centroids.copy())
    assign, _ = kernels.nearest_centroid(points, centroids)
    if collect_history:
        return centroids, assign, history
    return centroids, assign


def _kmeans_pp_init(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    chosen_idx = {int(rng.integers(n))}
    centroids[0] = points[next(iter(chosen_idx))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # every point coincides with a chosen centroid; take the
            # first unchosen index to stay deterministic
            chosen = next((j for j in range(n) if j not in chosen_idx), 0)
        else:
            chosen = int(rng.choice(n, p=d2 / total))
        chosen_idx.add(chosen)
        centroids[i] = points[chosen]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _repair_empty_clusters(points, centroids, assign, dist, k):
    counts = np.bincount(assign, minlength=k)
    empties = np.flatnonzero(counts == 0)
    for cid in empties:
        # steal the point currently farthest from its centroid
        far = int(np.argmax(dist))
        centroids[cid] = points[far]
        assign[far] = cid
        dist[far] = 0.0
    return assign, dist


def kmeans_objective(points, centroids):
    """Total squared distance to nearest centroid (independent of fit)."""
    _, dist = kernels.nearest_centroid(
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(centroids, dtype=np.float64),
    )
    return float(dist.sum())


def train_pq(keys, config: PQConfig) -> PQModel:
    """Fit coarse centroids on the keys, sub-codebooks on the residuals.

    Deterministic given ``config.seed``; the sample must cover both the
    coarse and the sub-codebook cluster counts.
    """
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    if keys.ndim != 2:
        raise ValueError("keys must be a 2-D sample")
    n, d = keys.shape
    if d % config.m != 0:
        raise ValueError("dim %d not divisible by m=%d" % (d, config.m))
    if n < config.n_coarse or n < config.codebook_size:
        raise InsufficientSamplesError(
            "need at least %d samples, got %d"
            % (max(config.n_coarse, config.codebook_size), n)
        )
    if not np.isfinite(keys).all():
        raise ValueError("non-finite training keys")

    rng = np.random.default_rng(config.seed)
    coarse, assign = kmeans_fit(keys, config.n_coarse, config.kmeans_iters, rng)
    residuals = keys - coarse[assign]
    sub = d // config.m
    codebooks = np.empty((config.m, config.codebook_size, sub))
    for j in range(config.m):
        block = residuals[:, j * sub : (j + 1) * sub]
        codebooks[j], _ = kmeans_fit(
            block, config.codebook_size, config.kmeans_iters, rng
        )
    return PQModel(
        coarse_centroids=coarse.astype(np.float32),
        codebooks=codebooks.astype(np.float32),
        config=config,
    )


def encode_keys(model: PQModel, keys):
    """Vectorized encoding: (coarse ids u32 (n,), sub-codes u16 (n, m))."""
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[1] != model.dim:
        raise ValueError("keys shape %r does not match dim %d" % (keys.shape, model.dim))
    coarse = np.ascontiguousarray(model.coarse_centroids, dtype=np.float64)
    cid, _ = kernels.nearest_centroid(keys, coarse)
    residuals = keys - coarse[cid]
    m, sub = model.config.m, model.subdim
    codes = np.empty((keys.shape[0], m), dtype=np.uint16)
    for j in range(m):
        block = np.ascontiguousarray(residuals[:, j * sub : (j + 1) * sub])
        book = np.ascontiguousarray(model.codebooks[j], dtype=np.float64)
        codes[:, j], _ = kernels.nearest_centroid(block, book)
    return cid.astype(np.uint32), codes


def encode_key(model: PQModel, key) -> EncodedKey:
    """Encode one key; argmins break ties toward the lowest index."""
    key = np.asarray(key, dtype=np.float64)
    if key.shape != (model.dim,):
        raise ValueError("key shape %r does not match dim %d" % (key.shape, model.dim))
    cid, codes = encode_keys(model, key[None, :])
    return EncodedKey(int(cid[0]), tuple(int(c) for c in codes[0]))


def decode_key(model: PQModel, code: EncodedKey):
    """Lossy reconstruction: coarse centroid + concatenated codebook rows."""
    _check_code(model, code)
    recon = model.coarse_centroids[code.coarse_id].copy()
    sub = model.subdim
    for j, c in enumerate(code.subcodes):
        recon[j * sub : (j + 1) * sub] += model.codebooks[j, c]
    return recon


def decode_codes(model: PQModel, coarse_ids, codes):
    """Vectorized reconstruction of (n, d) float32 keys."""
    coarse_ids = np.asarray(coarse_ids)
    codes = np.asarray(codes)
    recon = model.coarse_centroids[coarse_ids].copy()
    sub = model.subdim
    for j in range(model.config.m):
        recon[:, j * sub : (j + 1) * sub] += model.codebooks[j, codes[:, j]]
    return recon


def residual_lut(model: PQModel, query, coarse_id: int):
    """Per-subspace table of squared distances from the query residual.

    ``lut[j, c]`` is the squared L2 distance between subspace j of
    (query - coarse centroid) and codebook entry c.
    """
    query = np.asarray(query, dtype=np.float64)
    r = query - model.coarse_centroids[coarse_id].astype(np.float64)
    subs = r.reshape(model.config.m, model.subdim)
    diff = model.codebooks.astype(np.float64) - subs[:, None, :]
    return np.einsum("mcd,mcd->mc", diff, diff)


def adc_distance(model: PQModel, query, code: EncodedKey) -> float:
    """Asymmetric squared L2 distance between a raw query and a code.

    Equals the exact squared distance to ``decode_key(model, code)`` up
    to float summation order.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (model.dim,):
        raise ValueError(
            "query shape %r does not match dim %d" % (query.shape, model.dim)
        )
    _check_code(model, code)
    lut = residual_lut(model, query, code.coarse_id)
    return float(lut[np.arange(model.config.m), code.subcodes].sum())


def _check_code(model, code):
    if not 0 <= code.coarse_id < model.config.n_coarse:
        raise ValueError("coarse id %d out of range" % code.coarse_id)
    if len(code.subcodes) != model.config.m:
        raise ValueError("expected %d subcodes" % model.config.m)
    for c in code.subcodes:
        if not 0 <= c < model.config.codebook_size:
            raise ValueError("subcode %d out of range" % c)


class PQIndex:
    """Searchable inverted lists of (encoded key, token) entries."""

    def __init__(self, model: PQModel):
        self.model = model
        n = model.config.n_coarse
        self._codes = [[] for _ in range(n)]
        self._values = [[] for _ in range(n)]
        self._order = [[] for _ in range(n)]
        self._total = 0
        self._packed = None

    def __len__(self):
        return self._total

    def add(self, code: EncodedKey, value: int):
        _check_code(self.model, code)
        cid = code.coarse_id
        self._codes[cid].append(code.subcodes)
        self._values[cid].append(int(value))
        self._order[cid].append(self._total)
        self._total += 1
        self._packed = None

    def _lists(self):
        # pack python lists into arrays once, after the last add
        if self._packed is None:
            m = self.model.config.m
            packed = []
            for cid in range(self.model.config.n_coarse):
                codes = np.asarray(self._codes[cid], dtype=np.uint16).reshape(-1, m)
                values = np.asarray(self._values[cid], dtype=np.uint32)
                order = np.asarray(self._order[cid], dtype=np.int64)
                packed.append((codes, values, order))
            self._packed = packed
        return self._packed


def build_index(model: PQModel, entries) -> PQIndex:
    """Index from an iterable of (EncodedKey, token) pairs."""
    index = PQIndex(model)
    for code, value in entries:
        index.add(code, value)
    return index


def build_index_arrays(model: PQModel, coarse_ids, codes, values) -> PQIndex:
    """Index from the vectorized ``encode_keys`` output."""
    index = PQIndex(model)
    coarse_ids = np.asarray(coarse_ids)
    codes = np.asarray(codes, dtype=np.uint16)
    values = np.asarray(values)
    order = np.arange(len(coarse_ids), dtype=np.int64)
    for cid in range(model.config.n_coarse):
        mask = coarse_ids == cid
        index._codes[cid] = list(map(tuple, codes[mask]))
        index._values[cid] = [int(v) for v in values[mask]]
        index._order[cid] = list(order[mask])
    index._total = len(coarse_ids)
    index._packed = None
    return index


def knn_search(index: PQIndex, query, k: int, n_probe: int = None):
    """Up to k nearest entries of the probed lists, ascending distance.

    Returns [(distance, token, EncodedKey), ...]; ties are broken by
    insertion order.  An empty index yields an empty list so callers can
    fall back to the base model.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    model = index.model
    cfg = model.config
    if n_probe is None:
        n_probe = cfg.n_probe
    if not 1 <= n_probe <= cfg.n_coarse:
        raise ValueError("n_probe must be in 1..n_coarse")
    if len(index) == 0:
        return []
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (model.dim,):
        raise ValueError(
            "query shape %r does not match dim %d" % (query.shape, model.dim)
        )

    coarse = model.coarse_centroids.astype(np.float64)
    diff = coarse - query
    coarse_d2 = np.einsum("cd,cd->c", diff, diff)
    probe = np.argsort(coarse_d2, kind="stable")[:n_probe]

    lists = index._lists()
    dists, values, orders, cids, rows = [], [], [], [], []
    for cid in probe:
        codes, vals, order = lists[cid]
        if codes.shape[0] == 0:
            continue
        lut = residual_lut(model, query, int(cid))
        d = kernels.adc_scan(lut, codes)
        dists.append(d)
        values.append(vals)
        orders.append(order)
        cids.append(np.full(len(vals), cid, dtype=np.int64))
        rows.append(codes)
    if not dists:
        return []
    dists = np.concatenate(dists)
    values = np.concatenate(values)
    orders = np.concatenate(orders)
    cids = np.concatenate(cids)
    rows = np.concatenate(rows)

    take = min(k, len(dists))
    ranked = np.lexsort((orders, dists))[:take]
    return [
        (
            float(dists[i]),
            int(values[i]),
            EncodedKey(int(cids[i]), tuple(int(c) for c in rows[i])),
        )
        for i in ranked
    ]


def serialize_pq(model: PQModel) -> bytes:
    """FNPQ bytes: header + coarse centroids + codebooks as float32."""
    cfg = model.config
    header = PQ_HEADER.pack(
        PQ_MAGIC, PQ_FORMAT_VERSION, model.dim, cfg.m, cfg.bits, cfg.n_coarse
    )
    return (
        header
        + model.coarse_centroids.astype("<f4").tobytes()
        + model.codebooks.astype("<f4").tobytes()
    )


def deserialize_pq(data: bytes, config: PQConfig = None) -> PQModel:
    """Parse FNPQ bytes; search parameters come from ``config`` if given."""
    if len(data) < PQ_HEADER.size:
        if data[:4] != PQ_MAGIC[: len(data)]:
            raise BadMagicError("not an FNPQ stream")
        raise TruncatedStreamError("FNPQ header truncated")
    magic, version, d, m, bits, n_coarse = PQ_HEADER.unpack_from(data)
    if magic != PQ_MAGIC:
        raise BadMagicError("bad magic %r" % magic)
    if version != PQ_FORMAT_VERSION:
        raise VersionMismatchError("unsupported FNPQ version %d" % version)
    if config is None:
        config = PQConfig(
            n_coarse=n_coarse, m=m, bits=bits, n_probe=min(16, n_coarse)
        )
    else:
        config = replace(config, n_coarse=n_coarse, m=m, bits=bits)
    coarse_n = n_coarse * d
    book_n = m * (1 << bits) * (d // m)
    expected = PQ_HEADER.size + 4 * (coarse_n + book_n)
    if len(data) < expected:
        raise TruncatedStreamError(
            "FNPQ stream has %d bytes, expected %d" % (len(data), expected)
        )
    coarse = np.frombuffer(data, dtype="<f4", count=coarse_n, offset=PQ_HEADER.size)
    books = np.frombuffer(
        data, dtype="<f4", count=book_n, offset=PQ_HEADER.size + 4 * coarse_n
    )
    return PQModel(
        coarse_centroids=coarse.reshape(n_coarse, d).copy(),
        codebooks=books.reshape(m, 1 << bits, d // m).copy(),
        config=config,
    )
