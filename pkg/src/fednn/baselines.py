"""Pluggable sequence models and the classic federated baselines.

ToyModel is a small trainable stand-in for a full translation model:
frozen random token embeddings feed a deterministic context vector and a
trainable linear softmax readout.  Synthetic domains share a seeded
Markov backbone over content tokens and differ by a per-domain target
vocabulary permutation, so held-out next-token prediction is learnable
in-domain and near chance across domains.
"""

import abc
import math
import struct
from dataclasses import dataclass

import numpy as np

from fednn import vocab
from fednn.errors import (
    BadMagicError,
    TruncatedStreamError,
    VersionMismatchError,
)
from fednn.federation import MB, MessageKind, SimNetwork, model_payload
from fednn.memstore import ParallelCorpus

TRACE_MAGIC = b"FNTR"
TRACE_FORMAT_VERSION = 1
TRACE_HEADER = struct.Struct("<4sIIII")  # magic, version, dim, vocab, count


class SequenceModel(abc.ABC):
    """Minimal contract the federation and retrieval stack relies on."""

    vocab_size: int
    dim: int

    @abc.abstractmethod
    def context(self, source, target_prefix):
        """Deterministic context vector used as a datastore key."""

    @abc.abstractmethod
    def next_token_dist(self, source, target_prefix):
        """Probability vector over the vocabulary; sums to 1."""

    @abc.abstractmethod
    def parameters(self):
        """Flat copy of the trainable parameters."""

    @abc.abstractmethod
    def set_parameters(self, params):
        """Load a flat parameter vector produced by ``parameters``."""

    @abc.abstractmethod
    def train_steps(self, corpus, steps, lr):
        """Run mini-batch gradient steps on the corpus."""


class ToyModel(SequenceModel):
    """Frozen unit-norm embeddings + trainable linear softmax readout.

    The context is the L2-normalized sum of the mean source embedding,
    0.5x the last target embedding and 0.25x the one before it; it does
    not depend on the trainable weights, so datastore keys are stable
    across training.
    """

    def __init__(self, vocab_size, dim, seed=0, batch_size=64):
        self.vocab_size = vocab_size
        self.dim = dim
        self.seed = seed
        self.batch_size = batch_size
        rng = np.random.default_rng([seed, 0xE])
        emb = rng.standard_normal((vocab_size, dim))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        self.embeddings = emb  # frozen
        self.W = np.zeros((dim, vocab_size))  # trainable readout
        self._rng = np.random.default_rng([seed, 0x7])

    def clone(self, seed=None):
        """Copy sharing the frozen embeddings; fresh batch rng when reseeded."""
        other = ToyModel.__new__(ToyModel)
        other.vocab_size = self.vocab_size
        other.dim = self.dim
        other.seed = self.seed if seed is None else seed
        other.batch_size = self.batch_size
        other.embeddings = self.embeddings
        other.W = self.W.copy()
        other._rng = np.random.default_rng([other.seed, 0x7])
        return other

    def context(self, source, target_prefix):
        if len(source):
            v = self.embeddings[list(source)].mean(axis=0)
        else:
            v = np.zeros(self.dim)
        if len(target_prefix) >= 1:
            v = v + 0.5 * self.embeddings[target_prefix[-1]]
        if len(target_prefix) >= 2:
            v = v + 0.25 * self.embeddings[target_prefix[-2]]
        norm = np.linalg.norm(v)
        if norm > 0:
            v = v / norm
        return v.astype(np.float32)

    def next_token_dist(self, source, target_prefix):
        ctx = self.context(source, target_prefix).astype(np.float64)
        return _softmax(self.W.T @ ctx)

    def parameters(self):
        return self.W.ravel().copy()

    def set_parameters(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.size != self.W.size:
            raise ValueError("parameter vector has wrong length")
        self.W = params.reshape(self.W.shape).copy()

    def corpus_positions(self, corpus: ParallelCorpus):
        """Precomputed (contexts, targets) for every corpus position.

        Contexts depend only on the frozen embeddings, so this is valid
        across training steps.
        """
        n = corpus.target_token_count()
        ctx = np.empty((n, self.dim))
        tgt = np.empty(n, dtype=np.int64)
        i = 0
        for x, y in corpus.pairs:
            for t in range(len(y)):
                ctx[i] = self.context(x, y[:t])
                tgt[i] = y[t]
                i += 1
        return ctx, tgt

    def train_steps(self, corpus, steps, lr):
        """Mini-batch gradient descent on next-token cross-entropy."""
        if steps <= 0 or len(corpus) == 0:
            return
        ctx, tgt = self.corpus_positions(corpus)
        n = len(tgt)
        batch = min(self.batch_size, n)
        for _ in range(steps):
            idx = self._rng.choice(n, size=batch, replace=False)
            c = ctx[idx]
            logits = c @ self.W
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(batch), tgt[idx]] -= 1.0
            self.W -= lr * (c.T @ p) / batch

    def mean_nll(self, corpus) -> float:
        """Mean next-token negative log-likelihood over the corpus."""
        ctx, tgt = self.corpus_positions(corpus)
        logits = ctx @ self.W
        logits -= logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(len(tgt)), tgt].mean())


class TraceModel(SequenceModel):
    """Replays externally produced (context, distribution) records.

    Positions are keyed by the exact (source, target prefix) pair of the
    corpus the trace was built against; the model is frozen.
    """

    def __init__(self, vocab_size, dim, table):
        self.vocab_size = vocab_size
        self.dim = dim
        self._table = table

    @classmethod
    def from_file(cls, path, corpus: ParallelCorpus):
        with open(path, "rb") as f:
            data = f.read()
        if len(data) < TRACE_HEADER.size:
            if data[:4] != TRACE_MAGIC[: len(data)]:
                raise BadMagicError("not an FNTR stream")
            raise TruncatedStreamError("FNTR header truncated")
        magic, version, dim, vocab_size, count = TRACE_HEADER.unpack_from(data)
        if magic != TRACE_MAGIC:
            raise BadMagicError("bad magic %r" % magic)
        if version != TRACE_FORMAT_VERSION:
            raise VersionMismatchError("unsupported FNTR version %d" % version)
        if count != corpus.target_token_count():
            raise ValueError(
                "trace has %d steps but corpus has %d target tokens"
                % (count, corpus.target_token_count())
            )
        step = dim + vocab_size
        floats = np.frombuffer(
            data, dtype="<f4", count=count * step, offset=TRACE_HEADER.size
        )
        if floats.size < count * step:
            raise TruncatedStreamError("FNTR records truncated")
        floats = floats.reshape(count, step)
        table = {}
        i = 0
        for x, y in corpus.pairs:
            for t in range(len(y)):
                table[(x, y[:t])] = (floats[i, :dim], floats[i, dim:])
                i += 1
        return cls(vocab_size, dim, table)

    def _lookup(self, source, target_prefix):
        key = (tuple(source), tuple(target_prefix))
        if key not in self._table:
            raise KeyError("position not present in trace")
        return self._table[key]

    def context(self, source, target_prefix):
        return np.asarray(self._lookup(source, target_prefix)[0], dtype=np.float32)

    def next_token_dist(self, source, target_prefix):
        dist = np.asarray(self._lookup(source, target_prefix)[1], dtype=np.float64)
        return dist / dist.sum()

    def parameters(self):
        return np.zeros(0)

    def set_parameters(self, params):
        raise NotImplementedError("trace models are frozen")

    def train_steps(self, corpus, steps, lr):
        raise NotImplementedError("trace models are frozen")


def write_trace(path, model, corpus: ParallelCorpus):
    """Record a model's per-position contexts and distributions to FNTR."""
    count = corpus.target_token_count()
    with open(path, "wb") as f:
        f.write(
            TRACE_HEADER.pack(
                TRACE_MAGIC, TRACE_FORMAT_VERSION, model.dim, model.vocab_size, count
            )
        )
        for x, y in corpus.pairs:
            for t in range(len(y)):
                ctx = np.asarray(model.context(x, y[:t]), dtype="<f4")
                dist = np.asarray(model.next_token_dist(x, y[:t]), dtype="<f4")
                f.write(ctx.tobytes() + dist.tobytes())


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


# ---------------------------------------------------------------------------
# synthetic domains


def domain_permutation(domain_id: int, seed: int, vocab_size: int):
    """Per-domain permutation of the content token ids."""
    ids = np.array(vocab.content_ids(vocab_size))
    rng = np.random.default_rng([seed, 0xD0, domain_id])
    return dict(zip(ids.tolist(), rng.permutation(ids).tolist()))


def _successor_table(seed: int, vocab_size: int, branch: int = 4):
    # Markov backbone shared by every domain built from the same seed:
    # each content token draws a fixed set of allowed successors
    ids = list(vocab.content_ids(vocab_size))
    rng = np.random.default_rng([seed, 0x5C])
    branch = min(branch, len(ids))
    return {t: rng.choice(ids, size=branch, replace=False) for t in ids}


def make_domain_corpus(
    domain_id: int,
    size: int,
    seed: int,
    vocab_size: int = 64,
    len_range=(3, 8),
) -> ParallelCorpus:
    """Synthetic domain: Markov-chain sources, permuted targets plus EOS."""
    if size < 0:
        raise ValueError("size must be >= 0")
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ValueError("invalid length range %r" % (len_range,))
    perm = domain_permutation(domain_id, seed, vocab_size)
    succ = _successor_table(seed, vocab_size)
    ids = list(vocab.content_ids(vocab_size))
    rng = np.random.default_rng([seed, 0xC0, domain_id])
    pairs = []
    for _ in range(size):
        n = int(rng.integers(lo, hi + 1))
        x = [int(rng.choice(ids))]
        for _ in range(n - 1):
            x.append(int(rng.choice(succ[x[-1]])))
        y = tuple(perm[t] for t in x) + (vocab.EOS_ID,)
        pairs.append((tuple(x), y))
    return ParallelCorpus(
        pairs=tuple(pairs), vocab_size=vocab_size, domain="domain-%d" % domain_id
    )


def save_corpus(corpus: ParallelCorpus, path):
    """UTF-8 lines "src ids<TAB>tgt ids" with space-separated integers."""
    with open(path, "w", encoding="utf-8") as f:
        for x, y in corpus.pairs:
            f.write(" ".join(map(str, x)) + "\t" + " ".join(map(str, y)) + "\n")


def load_corpus(path, vocab_size: int, domain: str = "") -> ParallelCorpus:
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            src, _, tgt = line.partition("\t")
            pairs.append(
                (
                    tuple(int(t) for t in src.split()),
                    tuple(int(t) for t in tgt.split()),
                )
            )
    return ParallelCorpus(pairs=tuple(pairs), vocab_size=vocab_size, domain=domain)


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class PartitionSpec:
    """How to split domain corpora across clients."""

    mode: str = "non_iid"  # non_iid | iid | alpha_mix | client_scale
    n_clients: int = 3
    alpha: float = 0.0
    beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("non_iid", "iid", "alpha_mix", "client_scale"):
            raise ValueError("unknown partition mode %r" % self.mode)
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must be in (0, 1]")


def _apportion(quotas, total: int):
    """Largest-remainder rounding of float quotas to integers summing to total.

    Fractional parts are rounded to 9 decimals before comparison so that
    float noise cannot flip ties; equal remainders go to the lowest index.
    """
    floors = [int(math.floor(q + 1e-9)) for q in quotas]
    shortfall = total - sum(floors)
    if shortfall < 0:
        raise ValueError("quotas exceed total")
    fracs = sorted(
        range(len(quotas)),
        key=lambda i: (-round(quotas[i] - floors[i], 9), i),
    )
    out = list(floors)
    for i in range(shortfall):
        out[fracs[i % len(quotas)]] += 1
    return out


def _subsample(pairs, fraction, rng):
    if fraction >= 1.0:
        return list(pairs)
    k = int(math.floor(fraction * len(pairs) + 1e-9))
    keep = np.sort(rng.permutation(len(pairs))[:k])
    return [pairs[i] for i in keep]


def partition(domains, spec: PartitionSpec):
    """Per-client corpora; disjoint, conserving every pair after beta."""
    rng = np.random.default_rng([spec.seed, 0xA])
    vocab_size = domains[0].vocab_size
    pools = [_subsample(c.pairs, spec.beta, rng) for c in domains]

    if spec.mode in ("non_iid", "alpha_mix") and spec.n_clients != len(domains):
        raise ValueError(
            "%s requires n_clients == number of domains" % spec.mode
        )

    if spec.mode == "non_iid" or (spec.mode == "alpha_mix" and spec.alpha == 0.0):
        out = pools
        labels = [c.domain for c in domains]
    elif spec.mode == "iid":
        mixed = [p for pool in pools for p in pool]
        order = rng.permutation(len(mixed))
        shares = _apportion(
            [len(mixed) / spec.n_clients] * spec.n_clients, len(mixed)
        )
        out, start = [], 0
        for s in shares:
            out.append([mixed[i] for i in order[start : start + s]])
            start += s
        labels = ["mixed"] * spec.n_clients
    elif spec.mode == "alpha_mix":
        total = sum(len(p) for p in pools)
        draws = _apportion(
            [spec.alpha * len(p) for p in pools], int(round(spec.alpha * total))
        )
        shared, remain = [], []
        for pool, k in zip(pools, draws):
            picked = set(np.sort(rng.permutation(len(pool))[:k]).tolist())
            shared.extend(pool[i] for i in sorted(picked))
            remain.append([p for i, p in enumerate(pool) if i not in picked])
        order = rng.permutation(len(shared))
        shares = _apportion(
            [len(shared) / spec.n_clients] * spec.n_clients, len(shared)
        )
        out, start = [], 0
        for c, s in enumerate(shares):
            mine = [shared[i] for i in order[start : start + s]]
            out.append(remain[c] + mine)
            start += s
        labels = [c.domain for c in domains]
    else:  # client_scale: split each domain evenly across its clients
        if spec.n_clients % len(domains) != 0:
            raise ValueError("client_scale needs n_clients divisible by domains")
        per = spec.n_clients // len(domains)
        out, labels = [], []
        for pool, corpus in zip(pools, domains):
            order = rng.permutation(len(pool))
            shares = _apportion([len(pool) / per] * per, len(pool))
            start = 0
            for s in shares:
                out.append([pool[i] for i in np.sort(order[start : start + s])])
                labels.append(corpus.domain)
                start += s

    return [
        ParallelCorpus(pairs=tuple(p), vocab_size=vocab_size, domain=lbl)
        for p, lbl in zip(out, labels)
    ]


# ---------------------------------------------------------------------------
# FedAvg and FT-Ensemble


def fedavg_aggregate(params, counts):
    """Data-size-weighted parameter average."""
    if len(params) == 0:
        raise ValueError("no parameter vectors to aggregate")
    if len(params) != len(counts):
        raise ValueError("parameters and counts differ in length")
    vectors = [np.asarray(p, dtype=np.float64) for p in params]
    length = vectors[0].size
    for v in vectors:
        if v.size != length:
            raise ValueError("parameter vectors differ in length")
    counts = np.asarray(counts, dtype=np.float64)
    if (counts <= 0).any():
        raise ValueError("counts must be positive")
    total = counts.sum()
    if total <= 0:
        raise ValueError("zero total count")
    out = np.zeros(length)
    for v, c in zip(vectors, counts):
        out += (c / total) * v
    return out


def fedavg_run(
    server_model,
    client_corpora,
    rounds: int,
    freq=1,
    include_server_data: bool = False,
    server_corpus: ParallelCorpus = None,
    local_steps: int = None,
    lr: float = 0.1,
    seed: int = 0,
    network: SimNetwork = None,
):
    """Multi-round parameter-averaging loop over the simulated network.

    ``freq`` is the number of local update rounds between aggregations;
    ``freq=None`` (or inf) trains all rounds locally and aggregates
    once.  Each sync costs one model download and one upload per client.
    Returns (global model, ledger).
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    sync_every = None if freq in (None, math.inf) else int(freq)
    if sync_every is not None and sync_every < 1:
        raise ValueError("freq must be >= 1 or None for train-to-convergence")
    if include_server_data and server_corpus is None:
        raise ValueError("include_server_data requires a server corpus")

    net = network if network is not None else SimNetwork()
    n_clients = len(client_corpora)
    global_model = server_model.clone(seed=seed)
    locals_ = [
        server_model.clone(seed=seed + 1000 * (i + 1)) for i in range(n_clients)
    ]
    server_local = server_model.clone(seed=seed + 7) if include_server_data else None

    def steps_for(corpus):
        if local_steps is not None:
            return local_steps
        # default: one pass over the corpus positions per round
        batch = max(1, min(global_model.batch_size, corpus.target_token_count()))
        return max(1, math.ceil(corpus.target_token_count() / batch))

    payload = model_payload(global_model)
    pending_upload = False
    for r in range(rounds):
        if sync_every is None:
            do_download = r == 0
        else:
            do_download = r % sync_every == 0
        if do_download:
            payload = model_payload(global_model)
            for i in range(n_clients):
                net.send(MessageKind.MODEL_AGGREGATE, 0, i + 1, payload)
                locals_[i].set_parameters(global_model.parameters())
            if server_local is not None:
                server_local.set_parameters(global_model.parameters())

        for i, corpus in enumerate(client_corpora):
            locals_[i].train_steps(corpus, steps_for(corpus), lr)
        if server_local is not None:
            server_local.train_steps(server_corpus, steps_for(server_corpus), lr)
        pending_upload = True

        do_aggregate = (
            r == rounds - 1
            if sync_every is None
            else ((r + 1) % sync_every == 0 or r == rounds - 1)
        )
        if do_aggregate and pending_upload:
            params, counts = [], []
            for i, corpus in enumerate(client_corpora):
                net.send(
                    MessageKind.MODEL_UPDATE, i + 1, 0, model_payload(locals_[i])
                )
                params.append(locals_[i].parameters())
                counts.append(max(1, len(corpus)))
            if server_local is not None:
                params.append(server_local.parameters())
                counts.append(max(1, len(server_corpus)))
            global_model.set_parameters(fedavg_aggregate(params, counts))
            pending_upload = False

    net.ledger.constants = {
        "M": len(payload),
        "N": n_clients,
        "R": rounds,
    }
    return global_model, net.ledger


def ft_ensemble_predict(models, source, target_prefix, mode="mean", counts=None):
    """Combine fine-tuned client models' next-token distributions."""
    if len(models) == 0:
        raise ValueError("no models to ensemble")
    vocab_size = models[0].vocab_size
    for m in models:
        if m.vocab_size != vocab_size:
            raise ValueError("models disagree on vocabulary size")
    dists = np.stack([m.next_token_dist(source, target_prefix) for m in models])
    if mode == "mean":
        return dists.mean(axis=0)
    if mode == "weighted":
        if counts is None or len(counts) != len(models):
            raise ValueError("weighted mode needs one count per model")
        w = np.asarray(counts, dtype=np.float64)
        if (w <= 0).any():
            raise ValueError("counts must be positive")
        w = w / w.sum()
        return (w[:, None] * dists).sum(axis=0)
    raise ValueError("unknown ensemble mode %r" % mode)
