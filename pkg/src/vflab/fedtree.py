"""Vertical FedTree: histogram-exchange GBDT across feature-partitioned parties.

The active party owns the labels, computes gradients each boosting round and
broadcasts them (Paillier-encrypted in HE mode).  Every party then computes
per-feature gradient/hessian histograms for the open tree nodes over its own
feature slice; the active party aggregates them in party order, picks the
best splits, and the owning parties broadcast left/right partition bits so
everyone can route samples for the next depth.  In plaintext mode the
resulting ensemble is bit-identical to centralized GBDT training on the
column-concatenated dataset.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import gmpy2
import numpy as np

from . import paillier
from .federation import CipherBlock, MessageBus, Transcript, run_protocol
from .gbdt import (
    GbdtModel,
    GbdtParams,
    Histogram,
    HistogramBuilder,
    SplitCandidates,
    TreeGrower,
    base_scores_for,
    propose_split_candidates,
    update_gradients,
)

MODE_PLAINTEXT = "plaintext"
MODE_PAILLIER = "paillier"


class FedTreeError(ValueError):
    pass


@dataclass(frozen=True)
class FedTreeConfig:
    params: GbdtParams = GbdtParams()
    mode: str = MODE_PLAINTEXT
    key_bits: int = 2048
    key_seed: int | None = None
    scale_bits: int = paillier.DEFAULT_SCALE_BITS
    active_party: int = 0
    bus_mode: str = "lockstep"
    keep_payloads: bool = True

    def __post_init__(self):
        if self.mode not in (MODE_PLAINTEXT, MODE_PAILLIER):
            raise FedTreeError(f"unknown mode {self.mode!r}")

    @property
    def he(self) -> bool:
        return self.mode == MODE_PAILLIER


@dataclass
class DistributedGbdtModel:
    """The trained ensemble plus the feature -> (party, slot) ownership map.

    Tree nodes reference global feature indices (party slices concatenated
    in party order), which is exactly the column order of the equivalent
    centralized dataset.
    """

    model: GbdtModel
    owner_of: list[tuple[int, int]]  # global feature index -> (party, slot)
    n_parties: int
    active_party: int

    def to_centralized(self) -> GbdtModel:
        return self.model


@dataclass
class FedTreeResult:
    model: DistributedGbdtModel
    transcript: Transcript


def _party_id(index: int) -> str:
    return f"party-{index}"


class _TreeParty:
    """One vendor: a feature slice, its candidates, and node-row tracking."""

    def __init__(self, index: int, values: np.ndarray):
        self.index = index
        self.party_id = _party_id(index)
        self.values = np.asarray(values)
        self.candidates = propose_split_candidates(self.values)
        self.builder = HistogramBuilder(self.values, self.candidates)
        self.node_rows: dict[int, np.ndarray] = {}
        self.g: np.ndarray | None = None  # plaintext gradients, when broadcast
        self.h: np.ndarray | None = None
        # HE state
        self.public: paillier.PaillierPublicKey | None = None
        self.enc_g: list[list] | None = None  # per class, per row mpz ciphertext values
        self.enc_h: list[list] | None = None
        self.scale_bits = paillier.DEFAULT_SCALE_BITS

    def reset_tree(self, n_rows: int) -> None:
        self.node_rows = {0: np.arange(n_rows, dtype=np.int64)}

    def receive_public_key(self, bus: MessageBus) -> None:
        doc = bus.fetch(self.party_id, "public-key")
        self.public = paillier.PaillierPublicKey(int(doc["n"]), int(doc["bits"]))
        self.scale_bits = int(doc["scale_bits"])

    def receive_grads_plain(self, bus: MessageBus) -> None:
        g, h = bus.fetch(self.party_id, "grads")
        self.g, self.h = g, h

    def receive_grads_encrypted(self, bus: MessageBus) -> None:
        blocks = bus.fetch(self.party_id, "grads")
        n_classes = len(blocks) // 2
        self.enc_g = [[gmpy2.mpz(v) for v in blocks[2 * k].values] for k in range(n_classes)]
        self.enc_h = [[gmpy2.mpz(v) for v in blocks[2 * k + 1].values] for k in range(n_classes)]

    def plain_hists(self, class_k: int) -> dict[int, Histogram]:
        g = np.ascontiguousarray(self.g[:, class_k])
        h = np.ascontiguousarray(self.h[:, class_k])
        return {nid: self.builder.node_hist(g, h, rows) for nid, rows in sorted(self.node_rows.items())}

    def encrypted_hists(self, class_k: int) -> dict[int, tuple[CipherBlock, CipherBlock, np.ndarray]]:
        """Per open node: homomorphic bin sums of [g] and [h], plain counts."""
        cand = self.candidates
        nsq = self.public.nsquare
        enc_g = self.enc_g[class_k]
        enc_h = self.enc_h[class_k]
        bin_idx = self.builder.bin_idx
        offsets = cand.offsets
        width = (2 * self.public.bit_length + 7) // 8
        out = {}
        for nid, rows in sorted(self.node_rows.items()):
            acc_g = [gmpy2.mpz(1)] * cand.total_bins
            acc_h = [gmpy2.mpz(1)] * cand.total_bins
            for j in range(cand.n_features):
                base = int(offsets[j])
                col = bin_idx[:, j]
                for s in rows:
                    b = base + col[s]
                    acc_g[b] = acc_g[b] * enc_g[s] % nsq
                    acc_h[b] = acc_h[b] * enc_h[s] % nsq
            counts = self.builder.node_hist(
                np.zeros(len(bin_idx)), np.zeros(len(bin_idx)), rows
            ).counts
            out[nid] = (
                CipherBlock(self.scale_bits, width, [int(v) for v in acc_g]),
                CipherBlock(self.scale_bits, width, [int(v) for v in acc_h]),
                counts,
            )
        return out

    def compute_masks(self, jobs) -> list:
        """jobs: (nid, slot, threshold, left, right) -> partition frames."""
        frames = []
        for nid, slot, threshold, left, right in jobs:
            rows = self.node_rows[nid]
            mask = self.values[rows, int(slot)] <= float(threshold)
            frames.append([int(nid), int(left), int(right), mask])
        return frames

    def apply_partitions(self, frames) -> None:
        children: dict[int, np.ndarray] = {}
        for nid, left, right, mask in frames:
            rows = self.node_rows[nid]
            mask = np.asarray(mask, dtype=bool)
            children[int(left)] = rows[mask]
            children[int(right)] = rows[~mask]
        # nodes that were not split this level are sealed leaves
        self.node_rows = children


def _global_candidates(per_party: list[SplitCandidates]) -> tuple[SplitCandidates, list[tuple[int, int]]]:
    owner_of: list[tuple[int, int]] = []
    for party, cand in enumerate(per_party):
        owner_of.extend((party, slot) for slot in range(cand.n_features))
    return SplitCandidates.concat(per_party), owner_of


def train_fedtree(
    party_slices: list[np.ndarray],
    labels: np.ndarray,
    cfg: FedTreeConfig,
) -> FedTreeResult:
    """Run the vertical training protocol over the message bus.

    ``party_slices[i]`` is party i's binned feature matrix; all parties see
    the same row order.  Labels live only at the active party.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if not party_slices:
        raise FedTreeError("need at least one party")
    for i, s in enumerate(party_slices):
        if s.shape[0] != n:
            raise FedTreeError(f"party {i} has {s.shape[0]} rows, labels have {n}")
    if not 0 <= cfg.active_party < len(party_slices):
        raise FedTreeError(f"active party index {cfg.active_party} out of range")

    parties = [_TreeParty(i, s) for i, s in enumerate(party_slices)]
    active = parties[cfg.active_party]
    passive = [p for p in parties if p.index != cfg.active_party]

    class_labels = tuple(int(c) for c in np.unique(labels))
    if len(class_labels) < 2:
        raise FedTreeError("training requires at least two classes")
    lookup = {c: i for i, c in enumerate(class_labels)}
    y_index = np.array([lookup[int(v)] for v in labels], dtype=np.int64)
    n_classes = len(class_labels)
    params = cfg.params

    keys: paillier.PaillierKeys | None = None
    state: dict = {}

    def driver(bus: MessageBus):
        nonlocal keys
        # --- setup: candidate exchange (and HE keys)
        def send_candidates(p: _TreeParty):
            bus.post(
                p.party_id,
                active.party_id,
                "candidates",
                [np.asarray(t) for t in p.candidates.thresholds],
            )

        bus.parallel_step({p.party_id: (lambda p=p: send_candidates(p)) for p in passive})

        def active_setup():
            nonlocal keys
            fetched = {}
            for p in passive:
                fetched[p.index] = SplitCandidates(bus.fetch(active.party_id, "candidates"))
            per_party = [
                active.candidates if p is active else fetched[p.index] for p in parties
            ]
            state["per_party_candidates"] = per_party
            state["candidates"], state["owner_of"] = _global_candidates(per_party)
            if cfg.he:
                with bus.phase("keygen"):
                    keys = paillier.keygen(cfg.key_bits, cfg.key_seed)
                bus.post(
                    active.party_id,
                    "*",
                    "public-key",
                    {"n": str(int(keys.public.n)), "bits": cfg.key_bits, "scale_bits": cfg.scale_bits},
                    "structural",
                )

        bus.parallel_step({active.party_id: active_setup})
        if cfg.he:
            bus.parallel_step(
                {p.party_id: (lambda p=p: p.receive_public_key(bus)) for p in passive}
            )

        candidates: SplitCandidates = state["candidates"]
        owner_of = state["owner_of"]
        per_party_candidates: list[SplitCandidates] = state["per_party_candidates"]

        base = base_scores_for(y_index, n_classes)
        scores = np.tile(base, (n, 1))
        trees: list[list] = []

        for _round in range(params.n_trees):
            # --- gradient broadcast
            def active_grads():
                g, h = update_gradients(y_index, scores)
                state["g"], state["h"] = g, h
                if not passive:
                    return
                if not cfg.he:
                    bus.post(active.party_id, "*", "grads", [g, h])
                    return
                blocks = []
                with bus.phase("encrypt"):
                    for k in range(n_classes):
                        for col in (g[:, k], h[:, k]):
                            cts = [keys.public.encrypt(float(v), cfg.scale_bits) for v in col]
                            blocks.append(CipherBlock.pack(cts))
                bus.post(active.party_id, "*", "grads", blocks, "ciphertext")

            bus.parallel_step({active.party_id: active_grads})
            if passive:
                receive = (
                    _TreeParty.receive_grads_encrypted if cfg.he else _TreeParty.receive_grads_plain
                )
                bus.parallel_step(
                    {p.party_id: (lambda p=p: receive(p, bus)) for p in passive}
                )

            round_trees = []
            for k in range(n_classes):
                g_k = np.ascontiguousarray(state["g"][:, k])
                h_k = np.ascontiguousarray(state["h"][:, k])
                for p in parties:
                    p.reset_tree(n)
                grower = TreeGrower(params, n, float(g_k.sum()), float(h_k.sum()))

                for _depth in range(params.max_depth):
                    if not grower.open:
                        break

                    # --- each party histograms its features for the open nodes
                    def passive_hists(p: _TreeParty):
                        if cfg.he:
                            hists = p.encrypted_hists(k)
                            payload = [
                                [nid, gb, hb, counts] for nid, (gb, hb, counts) in hists.items()
                            ]
                            bus.post(p.party_id, active.party_id, "hist", payload, "ciphertext")
                        else:
                            hists = p.plain_hists(k)
                            payload = [
                                [nid, hist.g, hist.h, hist.counts] for nid, hist in hists.items()
                            ]
                            bus.post(p.party_id, active.party_id, "hist", payload)

                    def active_hists():
                        return {
                            nid: active.builder.node_hist(g_k, h_k, rows)
                            for nid, rows in sorted(active.node_rows.items())
                        }

                    tasks = {p.party_id: (lambda p=p: passive_hists(p)) for p in passive}
                    tasks[active.party_id] = active_hists
                    own_hists = bus.parallel_step(tasks)[active.party_id]

                    # --- active: aggregate, decide, dispatch split jobs
                    def active_decide():
                        per_party_hists: dict[int, dict[int, Histogram]] = {
                            active.index: own_hists
                        }
                        for p in passive:
                            payload = bus.fetch(active.party_id, "hist")
                            offsets = per_party_candidates[p.index].offsets
                            decoded: dict[int, Histogram] = {}
                            for entry in payload:
                                if cfg.he:
                                    nid, gb, hb, counts = entry
                                    with bus.phase("decrypt"):
                                        g_arr = np.array(
                                            [
                                                keys.public.decode(
                                                    keys.private.raw_decrypt(v), gb.scale_bits
                                                )
                                                for v in gb.values
                                            ]
                                        )
                                        h_arr = np.array(
                                            [
                                                keys.public.decode(
                                                    keys.private.raw_decrypt(v), hb.scale_bits
                                                )
                                                for v in hb.values
                                            ]
                                        )
                                else:
                                    nid, g_arr, h_arr, counts = entry
                                decoded[int(nid)] = Histogram(offsets, g_arr, h_arr, counts)
                            per_party_hists[p.index] = decoded

                        merged = {
                            nid: Histogram.concat(
                                [per_party_hists[p.index][nid] for p in parties]
                            )
                            for nid in own_hists
                        }
                        pending = grower.decide_level(merged, candidates)
                        if not pending:
                            return {}
                        jobs: dict[int, list] = {}
                        next_id = grower.tree.n_nodes
                        for nid in sorted(pending):
                            split = pending[nid]
                            owner, slot = owner_of[split.feature]
                            left, right = next_id, next_id + 1
                            next_id += 2
                            jobs.setdefault(owner, []).append(
                                [nid, slot, split.threshold, left, right]
                            )
                        for owner, job_list in jobs.items():
                            if owner != active.index:
                                bus.post(
                                    active.party_id,
                                    _party_id(owner),
                                    "split-assign",
                                    job_list,
                                    "structural",
                                )
                        return jobs

                    jobs = bus.parallel_step({active.party_id: active_decide})[active.party_id]
                    if not jobs:
                        break

                    # --- owners compute and broadcast partition bits
                    def owner_partition(p: _TreeParty):
                        job_list = (
                            jobs[p.index]
                            if p.index == active.index
                            else bus.fetch(p.party_id, "split-assign")
                        )
                        frames = p.compute_masks(job_list)
                        if len(parties) > 1:
                            bus.post(p.party_id, "*", "partition", frames, "structural")

                    bus.parallel_step(
                        {
                            _party_id(owner): (lambda o=owner: owner_partition(parties[o]))
                            for owner in jobs
                        }
                    )

                    # --- everyone applies the partitions for the next depth
                    def apply_all(p: _TreeParty):
                        frames = []
                        for owner in sorted(jobs):
                            if owner == p.index:
                                frames.extend(p.compute_masks(jobs_by_owner_cache[p.index]))
                            else:
                                frames.extend(bus.fetch(p.party_id, "partition"))
                        p.apply_partitions(frames)
                        return frames

                    # owners already know their own frames; rebuild them locally
                    jobs_by_owner_cache = jobs

                    def apply_and_grow_active():
                        frames = apply_all(active)
                        masks = {int(nid): np.asarray(mask, dtype=bool) for nid, _l, _r, mask in frames}
                        expected = {}
                        next_id = grower.tree.n_nodes
                        for nid in sorted(grower.pending):
                            expected[nid] = (next_id, next_id + 1)
                            next_id += 2
                        for nid, left, right, _mask in frames:
                            if expected[int(nid)] != (int(left), int(right)):
                                raise FedTreeError("partition frame ids out of sync with grower")
                        grower.apply_masks(masks)

                    tasks = {
                        p.party_id: (lambda p=p: apply_all(p)) for p in parties if p is not active
                    }
                    tasks[active.party_id] = apply_and_grow_active
                    bus.parallel_step(tasks)

                grower.seal_remaining()
                scores[:, k] += params.eta * grower.row_values
                round_trees.append(grower.tree)
            trees.append(round_trees)

        state["model"] = GbdtModel(params, class_labels, base, trees)

    party_ids = [p.party_id for p in parties]
    _, transcript = run_protocol(
        party_ids, driver, mode=cfg.bus_mode, keep_payloads=cfg.keep_payloads
    )
    model = DistributedGbdtModel(
        state["model"], state["owner_of"], len(parties), cfg.active_party
    )
    return FedTreeResult(model, transcript)


def train_fedtree_he(
    party_slices: list[np.ndarray], labels: np.ndarray, cfg: FedTreeConfig
) -> FedTreeResult:
    """HE-mode convenience wrapper (mode forced to paillier)."""
    from dataclasses import replace

    return train_fedtree(party_slices, labels, replace(cfg, mode=MODE_PAILLIER))


def predict_federated(
    dist: DistributedGbdtModel,
    party_slices: list[np.ndarray],
    bus_mode: str = "lockstep",
    keep_payloads: bool = False,
) -> np.ndarray:
    """Distributed inference: each node comparison is answered by the
    feature's owning party; only the active party sees the margins."""
    if len(party_slices) != dist.n_parties:
        raise FedTreeError(f"{len(party_slices)} slices for {dist.n_parties} parties")
    n = party_slices[0].shape[0] if party_slices else 0
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    model = dist.model
    slices = [np.asarray(s) for s in party_slices]
    active_idx = dist.active_party
    party_ids = [_party_id(i) for i in range(dist.n_parties)]
    out: dict = {}

    def driver(bus: MessageBus):
        scores = np.tile(model.base_scores, (n, 1))
        for round_trees in model.trees:
            for k, tree in enumerate(round_trees):
                values = np.zeros(n)
                frontier = {0: np.arange(n, dtype=np.int64)}
                while frontier:
                    jobs: dict[int, list] = {}
                    next_frontier: dict[int, np.ndarray] = {}
                    for nid, rows in sorted(frontier.items()):
                        if not rows.size:
                            continue
                        f = tree.feature[nid]
                        if f < 0:
                            values[rows] = tree.value[nid]
                            continue
                        owner, slot = dist.owner_of[f]
                        jobs.setdefault(owner, []).append(
                            [nid, slot, tree.threshold[nid], rows]
                        )

                    def active_dispatch():
                        for owner, job_list in jobs.items():
                            if owner != active_idx:
                                bus.post(
                                    party_ids[active_idx],
                                    party_ids[owner],
                                    "route-request",
                                    [[nid, slot, thr, rows] for nid, slot, thr, rows in job_list],
                                    "structural",
                                )

                    bus.parallel_step({party_ids[active_idx]: active_dispatch})

                    def owner_answer(owner: int):
                        job_list = (
                            jobs[owner]
                            if owner == active_idx
                            else bus.fetch(party_ids[owner], "route-request")
                        )
                        masks = []
                        for nid, slot, thr, rows in job_list:
                            rows = np.asarray(rows, dtype=np.int64)
                            masks.append([int(nid), slices[owner][rows, int(slot)] <= float(thr)])
                        if owner != active_idx:
                            bus.post(
                                party_ids[owner],
                                party_ids[active_idx],
                                "route-bits",
                                masks,
                                "structural",
                            )
                        return masks

                    answers = bus.parallel_step(
                        {party_ids[o]: (lambda o=o: owner_answer(o)) for o in jobs}
                    )

                    def active_advance():
                        collected: dict[int, np.ndarray] = {}
                        for owner in sorted(jobs):
                            masks = (
                                answers[party_ids[owner]]
                                if owner == active_idx
                                else bus.fetch(party_ids[active_idx], "route-bits")
                            )
                            for nid, mask in masks:
                                collected[int(nid)] = np.asarray(mask, dtype=bool)
                        for nid, rows in sorted(frontier.items()):
                            if not rows.size or tree.feature[nid] < 0:
                                continue
                            mask = collected[nid]
                            next_frontier[tree.left[nid]] = rows[mask]
                            next_frontier[tree.right[nid]] = rows[~mask]

                    bus.parallel_step({party_ids[active_idx]: active_advance})
                    frontier = next_frontier
                scores[:, k] += model.params.eta * values
        out["labels"] = np.asarray(model.class_labels, dtype=np.int64)[scores.argmax(axis=1)]

    run_protocol(party_ids, driver, mode=bus_mode, keep_payloads=keep_payloads)
    return out["labels"]
