"""Split neural network training: client bottom models, server top model.

Per batch: clients forward their feature slices, ship the intermediate cuts
to the server, the server merges them, finishes the forward pass, computes
the loss against its labels, backprops, returns each client its slice of the
cut gradient, and everyone applies an SGD step.  All cut tensors cross the
message bus and are recorded in the transcript.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .federation import MessageBus, Transcript, run_protocol

MERGE_OPS = ("concat", "sum", "average", "max", "min", "product")

SERVER = "server"


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class SplitNnTopology:
    """Bottom specs per client, the merge operation, and the server top spec."""

    bottom_specs: tuple[nn.MlpSpec, ...]
    top_spec: nn.MlpSpec
    merge: str = "concat"
    train: nn.TrainConfig = nn.TrainConfig()

    def __post_init__(self):
        if not self.bottom_specs:
            raise TopologyError("need at least one client bottom model")
        if self.merge not in MERGE_OPS:
            raise TopologyError(f"unknown merge op {self.merge!r}")
        widths = [spec.widths[-1] for spec in self.bottom_specs]
        if self.merge == "concat":
            expected = sum(widths)
        else:
            if len(set(widths)) != 1:
                raise TopologyError(
                    f"elementwise merge {self.merge!r} needs equal client output widths, got {widths}"
                )
            expected = widths[0]
        if self.top_spec.widths[0] != expected:
            raise TopologyError(
                f"top input width {self.top_spec.widths[0]} does not match merged width {expected}"
            )

    @property
    def n_clients(self) -> int:
        return len(self.bottom_specs)


def merge(cuts: list[np.ndarray], op: str) -> np.ndarray:
    """Combine client cuts: concatenation in client order, or elementwise."""
    if op == "concat":
        return np.concatenate(cuts, axis=1)
    shapes = {c.shape for c in cuts}
    if len(shapes) != 1:
        raise TopologyError(f"elementwise merge requires equal shapes, got {sorted(shapes)}")
    if op == "sum":
        return np.add.reduce(cuts)
    if op == "average":
        return np.add.reduce(cuts) / len(cuts)
    if op == "max":
        return np.maximum.reduce(cuts)
    if op == "min":
        return np.minimum.reduce(cuts)
    if op == "product":
        return np.multiply.reduce(cuts)
    raise TopologyError(f"unknown merge op {op!r}")


def merge_backward(upstream: np.ndarray, op: str, cuts: list[np.ndarray]) -> list[np.ndarray]:
    """Route the merged-output gradient back to per-client cut gradients.

    max/min send the gradient to the winning client per position (lowest
    client index on ties); product multiplies by the other clients' cuts.
    """
    k = len(cuts)
    if op == "concat":
        widths = [c.shape[1] for c in cuts]
        if upstream.shape[1] != sum(widths):
            raise TopologyError("upstream width does not match concatenated cuts")
        return list(np.split(upstream, np.cumsum(widths)[:-1], axis=1))
    if upstream.shape != cuts[0].shape:
        raise TopologyError("upstream shape does not match merged shape")
    if op == "sum":
        return [upstream.copy() for _ in range(k)]
    if op == "average":
        return [upstream / k for _ in range(k)]
    if op in ("max", "min"):
        stacked = np.stack(cuts)
        winner = stacked.argmax(axis=0) if op == "max" else stacked.argmin(axis=0)
        return [upstream * (winner == i) for i in range(k)]
    if op == "product":
        out = []
        for i in range(k):
            others = np.ones_like(upstream)
            for j in range(k):
                if j != i:
                    others = others * cuts[j]
            out.append(upstream * others)
        return out
    raise TopologyError(f"unknown merge op {op!r}")


def derive_client_specs(topo: SplitNnTopology, seed: int) -> tuple[list[nn.MlpSpec], nn.MlpSpec]:
    """Reseed every spec from the global seed so a run is one number away
    from reproducible."""
    seeds = np.random.SeedSequence(seed).generate_state(topo.n_clients + 1)
    bottoms = [
        replace(spec, seed=int(seeds[i])) for i, spec in enumerate(topo.bottom_specs)
    ]
    top = replace(topo.top_spec, seed=int(seeds[-1]))
    return bottoms, top


@dataclass
class SplitNnResult:
    bottoms: list[nn.MlpModel]
    top: nn.MlpModel
    epoch_losses: list[float]
    class_labels: tuple[int, ...]
    merge: str
    transcript: Transcript


class _Client:
    def __init__(self, party_id: str, x: np.ndarray, model: nn.MlpModel):
        self.party_id = party_id
        self.x = np.asarray(x, dtype=float)
        self.model = model
        self.schedule: list[np.ndarray] | None = None
        self.acts: list[np.ndarray] | None = None

    def receive_schedule(self, bus: MessageBus) -> None:
        self.schedule = [np.asarray(b, dtype=np.int64) for b in bus.fetch(self.party_id, "batch-schedule")]

    def forward_batch(self, bus: MessageBus, batch_index: int, batch_id: int) -> None:
        rows = self.schedule[batch_index]
        self.acts = nn.forward(self.model, self.x[rows])
        bus.post(self.party_id, SERVER, "cut-forward", [batch_id, self.acts[-1]])

    def backward_batch(self, bus: MessageBus, lr: float) -> None:
        _batch_id, grad = bus.fetch(self.party_id, "cut-backward")
        grads, _ = nn.backward(self.model, self.acts, grad)
        nn.sgd_step(self.model, grads, lr)
        self.acts = None


class _Server:
    def __init__(self, onehot: np.ndarray, model: nn.MlpModel, merge_op: str, client_ids):
        self.party_id = SERVER
        self.onehot = onehot
        self.model = model
        self.merge_op = merge_op
        self.client_ids = list(client_ids)

    def process_batch(self, bus: MessageBus, batch: np.ndarray, batch_id: int, lr: float) -> float:
        cuts = []
        for _cid in self.client_ids:
            got_id, cut = bus.fetch(self.party_id, "cut-forward")
            if got_id != batch_id:
                raise RuntimeError(f"batch misalignment: expected {batch_id}, got {got_id}")
            cuts.append(cut)
        merged = merge(cuts, self.merge_op)
        acts = nn.forward(self.model, merged)
        loss, dmargins = nn.cross_entropy(acts[-1], self.onehot[batch])
        if not np.isfinite(loss):
            raise nn.TrainingDiverged(f"non-finite loss in batch {batch_id}")
        grads, dmerged = nn.backward(self.model, acts, dmargins)
        for cid, grad in zip(self.client_ids, merge_backward(dmerged, self.merge_op, cuts)):
            bus.post(self.party_id, cid, "cut-backward", [batch_id, grad])
        nn.sgd_step(self.model, grads, lr)
        return loss


def train_splitnn(
    party_slices: list[np.ndarray],
    labels: np.ndarray,
    topo: SplitNnTopology,
    seed: int,
    bus_mode: str = "lockstep",
    keep_payloads: bool = True,
) -> SplitNnResult:
    """Run the split training protocol; only the server sees the labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(party_slices) != topo.n_clients:
        raise TopologyError(
            f"{len(party_slices)} feature slices for {topo.n_clients} clients"
        )
    n = len(labels)
    for i, x in enumerate(party_slices):
        if x.shape[0] != n:
            raise TopologyError(f"client {i} has {x.shape[0]} rows, labels have {n}")
        if x.shape[1] != topo.bottom_specs[i].widths[0]:
            raise TopologyError(
                f"client {i} slice width {x.shape[1]} does not match bottom spec "
                f"input {topo.bottom_specs[i].widths[0]}"
            )
    class_labels = tuple(int(c) for c in np.unique(labels))
    if topo.top_spec.widths[-1] != len(class_labels):
        raise TopologyError(
            f"top output width {topo.top_spec.widths[-1]} does not match "
            f"{len(class_labels)} classes"
        )

    bottom_specs, top_spec = derive_client_specs(topo, seed)
    client_ids = [f"client-{i}" for i in range(topo.n_clients)]
    clients = [
        _Client(cid, x, nn.MlpModel.init(spec))
        for cid, x, spec in zip(client_ids, party_slices, bottom_specs)
    ]
    server = _Server(nn.onehot_labels(labels, class_labels), nn.MlpModel.init(top_spec), topo.merge, client_ids)
    cfg = topo.train
    epoch_losses: list[float] = []

    def driver(bus: MessageBus):
        rng = np.random.default_rng(cfg.seed)
        batch_id = 0
        for _epoch in range(cfg.epochs):
            batches = nn.batch_schedule(n, cfg, rng)
            bus.parallel_step(
                {SERVER: lambda b=batches: bus.post(SERVER, "*", "batch-schedule", list(b), "structural")}
            )
            bus.parallel_step(
                {c.party_id: (lambda c=c: c.receive_schedule(bus)) for c in clients}
            )
            epoch_loss = 0.0
            for index, batch in enumerate(batches):
                my_id = batch_id
                bus.parallel_step(
                    {
                        c.party_id: (lambda c=c, i=index: c.forward_batch(bus, i, my_id))
                        for c in clients
                    }
                )
                loss = bus.parallel_step(
                    {SERVER: lambda b=batch: server.process_batch(bus, b, my_id, cfg.lr)}
                )[SERVER]
                bus.parallel_step(
                    {c.party_id: (lambda c=c: c.backward_batch(bus, cfg.lr)) for c in clients}
                )
                epoch_loss += loss * len(batch)
                batch_id += 1
            epoch_losses.append(epoch_loss / n if n else 0.0)

    _, transcript = run_protocol(client_ids + [SERVER], driver, mode=bus_mode, keep_payloads=keep_payloads)
    return SplitNnResult(
        [c.model for c in clients], server.model, epoch_losses, class_labels, topo.merge, transcript
    )


def split_forward(
    bottoms: list[nn.MlpModel], top: nn.MlpModel, merge_op: str, party_slices: list[np.ndarray]
) -> np.ndarray:
    """Forward pass of the assembled split model; returns margins."""
    cuts = [nn.forward(m, np.asarray(x, dtype=float))[-1] for m, x in zip(bottoms, party_slices)]
    return nn.forward(top, merge(cuts, merge_op))[-1]


def predict_splitnn(result: SplitNnResult, party_slices: list[np.ndarray]) -> np.ndarray:
    """Inference along the training forward path; argmax of the softmax."""
    n = party_slices[0].shape[0] if party_slices else 0
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    margins = split_forward(result.bottoms, result.top, result.merge, party_slices)
    labels = np.asarray(result.class_labels, dtype=np.int64)
    return labels[margins.argmax(axis=1)]
