"""One-round memorization protocol, simulated network and cost ledger.

The server broadcasts the base model and key-encryption model, each
client uploads its sealed encoded datastore, the server concatenates
and shuffles the sealed records (hiding provenance) and unicasts the
global store back, and each client decrypts an identical copy.  Every
payload that crosses the simulated wire is metered in a CostLedger,
which also evaluates the closed-form communication formulas.
"""

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from fednn import sealing
from fednn.errors import ProtocolError, TruncatedStreamError
from fednn.memstore import ParallelCorpus, build_datastore
from fednn.quantizer import EncodedKey, PQModel, encode_keys, serialize_pq

MB = 1024 * 1024


class MessageKind(IntEnum):
    BROADCAST_MODEL = 1
    BROADCAST_KE = 2
    UPLOAD_SEALED_STORE = 3
    BROADCAST_GLOBAL_STORE = 4
    MODEL_UPDATE = 5
    MODEL_AGGREGATE = 6


_FRAME = struct.Struct("<IBHH")  # length, kind, sender, receiver

SERVER_ID = 0


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: int
    receiver: int
    payload: bytes

    def to_bytes(self) -> bytes:
        body_len = 1 + 2 + 2 + len(self.payload)
        return (
            _FRAME.pack(body_len, int(self.kind), self.sender, self.receiver)
            + self.payload
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Message":
        if len(data) < _FRAME.size:
            raise TruncatedStreamError("message frame truncated")
        body_len, kind, sender, receiver = _FRAME.unpack_from(data)
        payload_len = body_len - 5
        if payload_len < 0 or len(data) < _FRAME.size + payload_len:
            raise TruncatedStreamError("message payload truncated")
        return cls(
            MessageKind(kind),
            sender,
            receiver,
            bytes(data[_FRAME.size : _FRAME.size + payload_len]),
        )


@dataclass
class CostLedger:
    """Per-message byte accounting plus the protocol's unit constants."""

    entries: list = field(default_factory=list)  # (kind, sender, receiver, nbytes)
    constants: dict = field(default_factory=dict)  # M, D (bytes), N, R

    def record(self, kind, sender, receiver, nbytes):
        if nbytes < 0:
            raise ValueError("negative payload size")
        self.entries.append((MessageKind(kind), sender, receiver, int(nbytes)))

    def total(self) -> int:
        return sum(e[3] for e in self.entries)

    def total_by_kind(self) -> dict:
        out = {}
        for kind, _, _, n in self.entries:
            out[kind] = out.get(kind, 0) + n
        return out

    def total_by_kind_sender(self) -> dict:
        out = {}
        for kind, sender, _, n in self.entries:
            key = (kind, sender)
            out[key] = out.get(key, 0) + n
        return out

    def count_by_kind(self) -> dict:
        out = {}
        for kind, _, _, _ in self.entries:
            out[kind] = out.get(kind, 0) + 1
        return out

    def messages_of(self, kind, sender=None, receiver=None):
        return [
            e
            for e in self.entries
            if e[0] == kind
            and (sender is None or e[1] == sender)
            and (receiver is None or e[2] == receiver)
        ]


class SimNetwork:
    """In-process deterministic message log standing in for a network.

    Delivery is synchronous and in send order; the full message list is
    retained so tests can scan the wire payloads.
    """

    def __init__(self, ledger: CostLedger = None):
        self.ledger = ledger if ledger is not None else CostLedger()
        self.messages = []

    def send(self, kind, sender, receiver, payload: bytes) -> Message:
        msg = Message(MessageKind(kind), sender, receiver, bytes(payload))
        self.messages.append(msg)
        self.ledger.record(kind, sender, receiver, len(msg.payload))
        return msg


@dataclass
class ServerState:
    """Server side of the protocol: trained base model + key encoder."""

    model: object
    pq_model: PQModel


@dataclass
class ClientState:
    """Client side: private corpus plus the shared content key pair."""

    client_id: int
    corpus: ParallelCorpus
    keypair: sealing.KeyPair

    def __post_init__(self):
        if self.client_id == SERVER_ID:
            raise ValueError("client id %d is reserved for the server" % SERVER_ID)


def model_payload(model) -> bytes:
    """Serialized trainable parameters as float32, for byte accounting."""
    return np.asarray(model.parameters(), dtype="<f4").tobytes()


def encoded_record_to_bytes(code: EncodedKey, value: int) -> bytes:
    """Plaintext wire form of one record: u32 coarse, m*u16 codes, u32 value."""
    return struct.pack(
        "<I%dHI" % len(code.subcodes), code.coarse_id, *code.subcodes, value
    )


def encoded_record_from_bytes(data: bytes, m: int):
    expected = 4 + 2 * m + 4
    if len(data) != expected:
        raise TruncatedStreamError(
            "encoded record has %d bytes, expected %d" % (len(data), expected)
        )
    parts = struct.unpack("<I%dHI" % m, data)
    return EncodedKey(parts[0], tuple(parts[1 : 1 + m])), parts[1 + m]


def encoded_store_to_bytes(records, m: int) -> bytes:
    """Canonical bytes of a decrypted global store, for identity checks."""
    out = [struct.pack("<II", len(records), m)]
    out.extend(encoded_record_to_bytes(code, value) for code, value in records)
    return b"".join(out)


def shuffle_v_encrypt(records, seed: int):
    """Seeded uniform permutation of the aggregated records.

    Hides which client contributed each record; the output carries no
    provenance.
    """
    records = list(records)
    perm = np.random.default_rng(seed).permutation(len(records))
    return [records[i] for i in perm]


def run_fednn_round(server: ServerState, clients, seed: int, network: SimNetwork = None):
    """Execute one memorization round; returns (per-client stores, ledger).

    Every client ends up with the same decrypted global store, a list of
    (EncodedKey, token) records.  The ledger holds one entry per payload
    plus the M/D/N/R constants for closed-form comparison.
    """
    net = network if network is not None else SimNetwork()
    pq = server.pq_model
    m = pq.config.m

    base_payload = model_payload(server.model)
    ke_payload = serialize_pq(pq)
    for client in clients:
        net.send(MessageKind.BROADCAST_MODEL, SERVER_ID, client.client_id, base_payload)
        net.send(MessageKind.BROADCAST_KE, SERVER_ID, client.client_id, ke_payload)

    uploads = []
    for client in clients:
        store = build_datastore(server.model, client.corpus)
        chunks = []
        if len(store):
            coarse_ids, codes = encode_keys(pq, store.keys)
            for i in range(len(store)):
                plain = encoded_record_to_bytes(
                    EncodedKey(int(coarse_ids[i]), tuple(int(c) for c in codes[i])),
                    int(store.values[i]),
                )
                chunks.append(
                    sealing.sealed_to_bytes(sealing.seal_record(client.keypair, plain))
                )
        payload = b"".join(chunks)
        net.send(MessageKind.UPLOAD_SEALED_STORE, client.client_id, SERVER_ID, payload)
        uploads.append(payload)

    # the server handles only sealed bytes: concatenate, shuffle, rebroadcast
    all_sealed = []
    for payload in uploads:
        all_sealed.extend(sealing.split_sealed_stream(payload))
    shuffled = shuffle_v_encrypt(all_sealed, seed)
    global_payload = b"".join(sealing.sealed_to_bytes(r) for r in shuffled)
    for client in clients:
        net.send(
            MessageKind.BROADCAST_GLOBAL_STORE,
            SERVER_ID,
            client.client_id,
            global_payload,
        )

    stores = {}
    for client in clients:
        records = []
        for i, rec in enumerate(sealing.split_sealed_stream(global_payload)):
            try:
                plain = sealing.open_record(client.keypair, rec)
            except Exception as exc:
                raise ProtocolError(
                    "client %d failed to decrypt global record %d: %s"
                    % (client.client_id, i, exc)
                ) from exc
            records.append(encoded_record_from_bytes(plain, m))
        stores[client.client_id] = records

    net.ledger.constants = {
        "M": len(base_payload) + len(ke_payload),
        "D": sum(len(p) for p in uploads),
        "N": len(clients),
        "R": 1,
    }
    return stores, net.ledger


def closed_form_comm(method: str, m_mb: float, n: int, r: int = None, d_mb: float = None):
    """Closed-form communication total in GB, rounded to 2 decimals."""
    if m_mb <= 0 or n <= 0:
        raise ValueError("m_mb and n must be positive")
    key = method.lower().replace("-", "_")
    if key == "fedavg":
        if r is None or r <= 0:
            raise ValueError("fedavg needs a positive round count")
        total_mb = m_mb * n * r * 2
    elif key == "ft_ensemble":
        total_mb = m_mb * n * (n + 1)
    elif key == "fednn":
        if d_mb is None or d_mb <= 0:
            raise ValueError("fednn needs a positive total datastore size")
        total_mb = m_mb * n + d_mb * (n - 1)
    else:
        raise ValueError("unknown method %r" % method)
    return round(total_mb / 1024.0, 2)


def ledger_report(ledger: CostLedger, method: str = None, m_mb=None, d_mb=None, n=None, r=None):
    """Structured totals plus the closed-form comparison when constants exist."""
    consts = ledger.constants
    if m_mb is None and "M" in consts:
        m_mb = consts["M"] / MB
    if d_mb is None and "D" in consts:
        d_mb = consts["D"] / MB
    if n is None:
        n = consts.get("N")
    if r is None:
        r = consts.get("R")
    total = ledger.total()
    report = {
        "method": method,
        "N": n,
        "M_mb": m_mb,
        "D_mb": d_mb,
        "R": r,
        "measured_bytes": total,
        "measured_gb": total / float(1024**3),
        "closed_form_gb": None,
        "by_kind": {k.name: v for k, v in sorted(ledger.total_by_kind().items())},
        "message_counts": {k.name: v for k, v in sorted(ledger.count_by_kind().items())},
    }
    if method is not None and m_mb is not None and n is not None:
        try:
            report["closed_form_gb"] = closed_form_comm(method, m_mb, n, r, d_mb)
        except ValueError:
            pass
    return report
