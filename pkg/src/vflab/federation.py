"""Party runtime: typed message bus, transcripts, and locality auditing.

The simulation is in-process but every cross-party payload goes through an
explicit serialization step, so the recorded byte counts are the bytes a real
transport would carry.  Two execution modes produce identical transcripts:
single-threaded lockstep (the reference) and one worker thread per party.
In both, messages posted during a step become visible only at the step
barrier, which pins the message order regardless of thread scheduling.
"""
from __future__ import annotations

import base64
import json
import queue
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .paillier import Ciphertext, PaillierPublicKey

BROADCAST = "*"
DEADLOCK_TIMEOUT = 30.0


class RoutingError(RuntimeError):
    """Message addressed to an unknown party."""


class DeadlockError(RuntimeError):
    """A party tried to receive a message nobody can ever send."""


class ProtocolViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# payload codec


class CodecError(ValueError):
    pass


def _encode_into(obj, out: list[bytes]) -> None:
    if obj is None:
        out.append(b"0")
    elif isinstance(obj, np.ndarray):
        dtype = obj.dtype.str.encode()
        arr = np.ascontiguousarray(obj)
        out.append(b"A" + struct.pack("<BB", len(dtype), arr.ndim) + dtype)
        out.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        out.append(arr.tobytes())
    elif isinstance(obj, bytes):
        out.append(b"B" + struct.pack("<q", len(obj)))
        out.append(obj)
    elif isinstance(obj, (list, tuple)):
        out.append(b"L" + struct.pack("<q", len(obj)))
        for item in obj:
            chunks: list[bytes] = []
            _encode_into(item, chunks)
            blob = b"".join(chunks)
            out.append(struct.pack("<q", len(blob)))
            out.append(blob)
    elif isinstance(obj, CipherBlock):
        out.append(
            b"C" + struct.pack("<BIq", obj.scale_bits, obj.width, len(obj.values))
        )
        out.append(b"".join(v.to_bytes(obj.width, "big") for v in obj.values))
    else:
        blob = json.dumps(obj, sort_keys=True).encode()
        out.append(b"J" + struct.pack("<q", len(blob)))
        out.append(blob)


def encode_payload(obj) -> bytes:
    chunks: list[bytes] = []
    _encode_into(obj, chunks)
    return b"".join(chunks)


def _decode_from(data: bytes, pos: int):
    tag = data[pos : pos + 1]
    pos += 1
    if tag == b"0":
        return None, pos
    if tag == b"A":
        dlen, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        dtype = np.dtype(data[pos : pos + dlen].decode())
        pos += dlen
        shape = struct.unpack_from(f"<{ndim}q", data, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape)
        return arr.copy(), pos + count * dtype.itemsize
    if tag == b"B":
        (length,) = struct.unpack_from("<q", data, pos)
        pos += 8
        return data[pos : pos + length], pos + length
    if tag == b"L":
        (count,) = struct.unpack_from("<q", data, pos)
        pos += 8
        items = []
        for _ in range(count):
            (length,) = struct.unpack_from("<q", data, pos)
            pos += 8
            item, _ = _decode_from(data[pos : pos + length], 0)
            items.append(item)
            pos += length
        return items, pos
    if tag == b"C":
        scale, width, count = struct.unpack_from("<BIq", data, pos)
        pos += struct.calcsize("<BIq")
        values = [
            int.from_bytes(data[pos + i * width : pos + (i + 1) * width], "big")
            for i in range(count)
        ]
        return CipherBlock(scale, width, values), pos + count * width
    if tag == b"J":
        (length,) = struct.unpack_from("<q", data, pos)
        pos += 8
        return json.loads(data[pos : pos + length].decode()), pos + length
    raise CodecError(f"unknown payload tag {tag!r}")


def decode_payload(data: bytes):
    obj, _ = _decode_from(data, 0)
    return obj


@dataclass
class CipherBlock:
    """A batch of serialized ciphertext values sharing one scale tag."""

    scale_bits: int
    width: int
    values: list[int]

    @classmethod
    def pack(cls, cts: list[Ciphertext]) -> "CipherBlock":
        if not cts:
            raise CodecError("cannot pack an empty ciphertext block")
        scale = cts[0].scale_bits
        width = (2 * cts[0].public.bit_length + 7) // 8
        if any(c.scale_bits != scale for c in cts):
            raise CodecError("mixed scales in one ciphertext block")
        return cls(scale, width, [c.value for c in cts])

    def unpack(self, public: PaillierPublicKey) -> list[Ciphertext]:
        return [Ciphertext(v, self.scale_bits, public) for v in self.values]


# ---------------------------------------------------------------------------
# messages and transcripts


@dataclass(frozen=True)
class Message:
    seq: int
    sender_seq: int
    sender: str
    receiver: str
    kind: str
    encoding: str  # plaintext | ciphertext | structural
    n_bytes: int
    timestamp: float
    payload: bytes | None = field(repr=False, default=None)

    def header(self) -> dict:
        return {
            "seq": self.seq,
            "sender_seq": self.sender_seq,
            "sender": self.sender,
            "receiver": self.receiver,
            "kind": self.kind,
            "encoding": self.encoding,
            "n_bytes": self.n_bytes,
            "timestamp": self.timestamp,
        }


@dataclass
class Transcript:
    """Ordered cross-party message log plus byte and timing accounting."""

    messages: list[Message] = field(default_factory=list)
    phase_seconds: dict[str, float] = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return sum(m.n_bytes for m in self.messages)

    def bytes_by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for m in self.messages:
            out[m.kind] = out.get(m.kind, 0) + m.n_bytes
        return out

    def bytes_by_direction(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for m in self.messages:
            key = f"{m.sender}->{m.receiver}"
            out[key] = out.get(key, 0) + m.n_bytes
        return out

    def summary(self) -> dict:
        return {
            "n_messages": len(self.messages),
            "total_bytes": self.total_bytes,
            "bytes_by_kind": self.bytes_by_kind(),
            "bytes_by_direction": self.bytes_by_direction(),
            "phase_seconds": dict(self.phase_seconds),
        }

    def to_jsonl(self, path, include_payloads: bool = False) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for m in self.messages:
                doc = m.header()
                if include_payloads and m.payload is not None:
                    doc["payload_b64"] = base64.b64encode(m.payload).decode()
                fh.write(json.dumps(doc) + "\n")

    def payload_bytes(self) -> list[bytes | None]:
        return [m.payload for m in self.messages]


# ---------------------------------------------------------------------------
# the bus


class _PartyWorker:
    """Dedicated thread executing one party's closures in submission order."""

    def __init__(self, party_id: str):
        self.tasks: queue.Queue = queue.Queue()
        self.thread = threading.Thread(target=self._loop, name=f"party-{party_id}", daemon=True)
        self.thread.start()

    def _loop(self):
        while True:
            item = self.tasks.get()
            if item is None:
                return
            fn, box = item
            try:
                box["result"] = fn()
            except BaseException as exc:  # propagated at the barrier
                box["error"] = exc
            finally:
                box["done"].set()

    def submit(self, fn):
        box = {"done": threading.Event()}
        self.tasks.put((fn, box))
        return box

    def stop(self):
        self.tasks.put(None)


class MessageBus:
    """Routes typed messages between registered parties and records them.

    ``mode`` selects lockstep (sequential) or threads (one worker per party)
    execution of :meth:`parallel_step`; both stage posts until the step
    barrier and commit them in party-id order, so transcripts match across
    modes.
    """

    def __init__(self, party_ids, mode: str = "lockstep", keep_payloads: bool = True):
        self.party_ids = list(party_ids)
        if len(set(self.party_ids)) != len(self.party_ids):
            raise RoutingError("duplicate party ids")
        if mode not in ("lockstep", "threads"):
            raise ValueError(f"unknown bus mode {mode!r}")
        self.mode = mode
        self.keep_payloads = keep_payloads
        self._inboxes: dict[str, deque] = {pid: deque() for pid in self.party_ids}
        self._messages: list[Message] = []
        self._phase_seconds: dict[str, float] = {}
        self._sender_seq: dict[str, int] = {pid: 0 for pid in self.party_ids}
        self._lock = threading.RLock()
        self._local = threading.local()
        self._staging: dict[str, list] | None = None
        self._workers: dict[str, _PartyWorker] = {}

    # -- posting and fetching

    def post(self, sender: str, receiver: str, kind: str, payload, encoding: str = "plaintext"):
        """Serialize and route a message; broadcast with receiver='*'."""
        if sender not in self._inboxes:
            raise RoutingError(f"unknown sender {sender!r}")
        if receiver != BROADCAST and receiver not in self._inboxes:
            raise RoutingError(f"unknown receiver {receiver!r}")
        t0 = time.perf_counter()
        data = encode_payload(payload)
        self._claim_phase("transfer", time.perf_counter() - t0)
        entry = (sender, receiver, kind, encoding, data)
        staged = getattr(self._local, "staged", None)
        if staged is not None:
            staged.append(entry)
        else:
            with self._lock:
                self._commit(entry)

    def _commit(self, entry) -> None:
        sender, receiver, kind, encoding, data = entry
        self._sender_seq[sender] += 1
        msg = Message(
            seq=len(self._messages),
            sender_seq=self._sender_seq[sender],
            sender=sender,
            receiver=receiver,
            kind=kind,
            encoding=encoding,
            n_bytes=len(data),
            timestamp=time.time(),
            payload=data if self.keep_payloads else None,
        )
        self._messages.append(msg)
        targets = [p for p in self.party_ids if p != sender] if receiver == BROADCAST else [receiver]
        for target in targets:
            self._inboxes[target].append((kind, data))

    def fetch(self, receiver: str, kind: str | None = None):
        """Pop the oldest message addressed to ``receiver`` and decode it.

        Raises :class:`DeadlockError` when the inbox is empty (or the head
        kind differs): posts only become visible at step barriers, so a
        missing message can never arrive while the caller waits.
        """
        with self._lock:
            inbox = self._inboxes.get(receiver)
            if inbox is None:
                raise RoutingError(f"unknown receiver {receiver!r}")
            if not inbox:
                raise DeadlockError(
                    f"{receiver} waiting for {kind or 'any'} but no message is pending; "
                    f"state: {self._state_dump()}"
                )
            head_kind, data = inbox[0]
            if kind is not None and head_kind != kind:
                raise DeadlockError(
                    f"{receiver} waiting for {kind!r} but head of inbox is {head_kind!r}; "
                    f"state: {self._state_dump()}"
                )
            inbox.popleft()
        t0 = time.perf_counter()
        obj = decode_payload(data)
        self._claim_phase("transfer", time.perf_counter() - t0)
        return obj

    def pending(self, receiver: str) -> int:
        with self._lock:
            return len(self._inboxes[receiver])

    def _state_dump(self) -> dict:
        return {pid: len(box) for pid, box in self._inboxes.items()}

    # -- phases

    def phase(self, name: str):
        return _PhaseScope(self, name)

    def _claim_phase(self, name: str, seconds: float) -> None:
        with self._lock:
            self._phase_seconds[name] = self._phase_seconds.get(name, 0.0) + seconds
        claimed = getattr(self._local, "claimed", None)
        if claimed is not None:
            self._local.claimed = claimed + seconds

    # -- stepped execution

    def parallel_step(self, tasks: dict):
        """Run one closure per party; posts commit at the barrier in id order.

        Returns {party_id: result}.  In threads mode each closure runs on its
        party's own worker thread; wall time still accrues to the 'compute'
        phase net of any inner encrypt/decrypt/transfer scopes.
        """
        order = [pid for pid in self.party_ids if pid in tasks]
        extra = set(tasks) - set(order)
        if extra:
            raise RoutingError(f"tasks for unknown parties: {sorted(extra)}")
        results: dict[str, object] = {}
        staged: dict[str, list] = {pid: [] for pid in order}

        def runner(pid):
            fn = tasks[pid]

            def run():
                self._local.staged = staged[pid]
                self._local.claimed = 0.0
                t0 = time.perf_counter()
                try:
                    return fn()
                finally:
                    elapsed = time.perf_counter() - t0
                    claimed = self._local.claimed
                    self._local.staged = None
                    self._local.claimed = None
                    with self._lock:
                        self._phase_seconds["compute"] = self._phase_seconds.get(
                            "compute", 0.0
                        ) + max(elapsed - claimed, 0.0)

            return run

        if self.mode == "lockstep":
            for pid in order:
                results[pid] = runner(pid)()
        else:
            boxes = {}
            for pid in order:
                worker = self._workers.get(pid)
                if worker is None:
                    worker = self._workers[pid] = _PartyWorker(pid)
                boxes[pid] = worker.submit(runner(pid))
            for pid in order:
                if not boxes[pid]["done"].wait(DEADLOCK_TIMEOUT):
                    raise DeadlockError(f"party {pid} did not reach the step barrier")
                if "error" in boxes[pid]:
                    raise boxes[pid]["error"]
                results[pid] = boxes[pid].get("result")
        with self._lock:
            for pid in order:
                for entry in staged[pid]:
                    self._commit(entry)
        return results

    def close(self) -> None:
        for worker in self._workers.values():
            worker.stop()
        self._workers.clear()

    def transcript(self) -> Transcript:
        return Transcript(list(self._messages), dict(self._phase_seconds))


class _PhaseScope:
    def __init__(self, bus: MessageBus, name: str):
        self.bus = bus
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.bus._claim_phase(self.name, time.perf_counter() - self.t0)
        return False


def run_protocol(parties, driver, mode: str = "lockstep", keep_payloads: bool = True):
    """Create a bus over ``parties``, run the protocol driver, return its
    result and the transcript.

    ``parties`` is a list of party ids or objects with a ``party_id``;
    ``driver(bus)`` performs the protocol.  An empty driver yields an empty
    transcript.
    """
    ids = [p if isinstance(p, str) else p.party_id for p in parties]
    bus = MessageBus(ids, mode=mode, keep_payloads=keep_payloads)
    try:
        result = driver(bus)
    finally:
        bus.close()
    return result, bus.transcript()


# ---------------------------------------------------------------------------
# locality auditing


@dataclass
class RuleResult:
    name: str
    passed: bool
    violations: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)


@dataclass
class LocalityReport:
    results: list[RuleResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "rules": [
                {
                    "name": r.name,
                    "passed": r.passed,
                    "violations": r.violations,
                    "flags": r.flags,
                }
                for r in self.results
            ],
        }


@dataclass(frozen=True)
class LocalityPolicy:
    """What each party may send: raw features stay home, labels stay at the
    label holder, and (under HE) gradient-bearing frames leave only as
    ciphertext."""

    label_holder: str
    label_derived_kinds: frozenset[str]
    required_ciphertext_kinds: frozenset[str] = frozenset()
    allowed_kinds_by_sender: dict | None = None

    @classmethod
    def fedtree(cls, active_party: str, he: bool) -> "LocalityPolicy":
        return cls(
            label_holder=active_party,
            label_derived_kinds=frozenset({"grads"}),
            required_ciphertext_kinds=frozenset({"grads", "hist"}) if he else frozenset(),
        )

    @classmethod
    def splitnn(cls, server: str, clients) -> "LocalityPolicy":
        return cls(
            label_holder=server,
            label_derived_kinds=frozenset({"cut-backward"}),
            allowed_kinds_by_sender={
                **{c: {"cut-forward"} for c in clients},
                server: {"batch-schedule", "cut-backward"},
            },
        )


FORBIDDEN_KINDS = ("raw-features", "labels")


def assert_locality(transcript: Transcript, policy: LocalityPolicy) -> LocalityReport:
    """Check every logged message against the locality policy."""
    confined = RuleResult("raw-data-confined", True)
    labels_rule = RuleResult("labels-confined", True)
    cipher_rule = RuleResult("he-ciphertext-only", True)
    kinds_rule = RuleResult("sender-kinds-allowed", True)

    for m in transcript.messages:
        where = f"msg #{m.seq} {m.sender}->{m.receiver} kind={m.kind}"
        if m.kind in FORBIDDEN_KINDS:
            confined.passed = False
            confined.violations.append(f"{where}: raw data crossed a party boundary")
        if m.kind in policy.label_derived_kinds:
            if m.sender != policy.label_holder:
                labels_rule.passed = False
                labels_rule.violations.append(
                    f"{where}: label-derived frame sent by non-holder"
                )
            if m.encoding == "plaintext" and m.kind not in policy.required_ciphertext_kinds:
                labels_rule.flags.append(f"{where}: label-derived frame is plaintext")
        if m.kind in policy.required_ciphertext_kinds and m.encoding != "ciphertext":
            cipher_rule.passed = False
            cipher_rule.violations.append(f"{where}: expected ciphertext, got {m.encoding}")
        if policy.allowed_kinds_by_sender is not None:
            allowed = policy.allowed_kinds_by_sender.get(m.sender)
            if allowed is not None and m.kind not in allowed:
                kinds_rule.passed = False
                kinds_rule.violations.append(f"{where}: kind not allowed for sender")

    results = [confined, labels_rule]
    if policy.required_ciphertext_kinds:
        results.append(cipher_rule)
    if policy.allowed_kinds_by_sender is not None:
        results.append(kinds_rule)
    return LocalityReport(results)
