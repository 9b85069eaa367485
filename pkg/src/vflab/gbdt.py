"""Histogram-based gradient-boosted trees for multiclass classification.

Softmax cross-entropy objective, one regression tree per class per boosting
round, XGBoost-style second-order gain and leaf weights, depth-wise growth,
no subsampling.  The tree grower is level-ordered so the federated protocol
can drive the exact same construction from remotely computed histograms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit


class GbdtError(ValueError):
    pass


# Gradients are snapped to this fixed-point grid when they enter histograms,
# and bin sums accumulate as exact int64.  The homomorphic path encrypts the
# same quantized values, so decrypted sums equal plaintext sums bit for bit
# and split decisions cannot drift between modes.  int64 headroom caps rows
# per training set at ~16k (node sums stay below 2^62).
HIST_SCALE_BITS = 48
MAX_HIST_ROWS = 16000


@dataclass(frozen=True)
class GbdtParams:
    n_trees: int = 20
    max_depth: int = 5
    eta: float = 0.3
    lam: float = 1.0
    gamma: float = 0.0
    min_child: int = 1

    def to_json(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "eta": self.eta,
            "lam": self.lam,
            "gamma": self.gamma,
            "min_child": self.min_child,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GbdtParams":
        return cls(**doc)


class SplitCandidates:
    """Per-feature ordered split thresholds (midpoints of observed values)."""

    def __init__(self, thresholds):
        self.thresholds = tuple(np.asarray(t, dtype=float) for t in thresholds)
        n_bins = np.array([len(t) + 1 for t in self.thresholds], dtype=np.int64)
        self.offsets = np.zeros(len(n_bins) + 1, dtype=np.int64)
        np.cumsum(n_bins, out=self.offsets[1:])
        self.total_bins = int(self.offsets[-1])
        # Flat views for vectorized split search: per-bin feature id, the
        # threshold closing the bin, and whether the bin is interior (a bin
        # boundary that can act as a split point).
        self.bin_feature = np.repeat(np.arange(len(n_bins)), n_bins)
        interior = np.ones(self.total_bins, dtype=bool)
        interior[self.offsets[1:] - 1] = False
        self.interior = interior
        flat_thr = np.zeros(self.total_bins)
        flat_thr[interior] = np.concatenate(self.thresholds) if self.thresholds else []
        self.bin_threshold = flat_thr

    @property
    def n_features(self) -> int:
        return len(self.thresholds)

    def n_bins(self, feature: int) -> int:
        return len(self.thresholds[feature]) + 1

    @staticmethod
    def concat(parts: list["SplitCandidates"]) -> "SplitCandidates":
        merged: list[np.ndarray] = []
        for part in parts:
            merged.extend(part.thresholds)
        return SplitCandidates(merged)


def propose_split_candidates(values: np.ndarray) -> SplitCandidates:
    """Thresholds at midpoints between adjacent observed values per feature.

    A feature with a single distinct value gets an empty list.
    """
    values = np.asarray(values)
    out = []
    for j in range(values.shape[1]):
        distinct = np.unique(values[:, j])
        out.append((distinct[:-1] + distinct[1:]) / 2.0)
    return SplitCandidates(out)


def update_gradients(y_index: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax gradients: g = p - onehot(y), h = p(1-p), both (n, K).

    ``y_index`` holds 0-based class column indices.
    """
    if not np.isfinite(scores).all():
        raise GbdtError("non-finite margins passed to gradient update")
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    p = exp / exp.sum(axis=1, keepdims=True)
    g = p.copy()
    g[np.arange(len(y_index)), y_index] -= 1.0
    h = p * (1.0 - p)
    return g, h


@dataclass
class Histogram:
    """Per-bin sums of gradients/hessians plus counts, flat across features.

    ``offsets[j]:offsets[j+1]`` is feature j's bin range.
    """

    offsets: np.ndarray
    g: np.ndarray
    h: np.ndarray
    counts: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.offsets) - 1

    def feature_slice(self, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lo, hi = self.offsets[j], self.offsets[j + 1]
        return self.g[lo:hi], self.h[lo:hi], self.counts[lo:hi]

    def total(self) -> tuple[float, float, int]:
        """Node totals, read off the first feature (conservation)."""
        g, h, c = self.feature_slice(0)
        return float(g.sum()), float(h.sum()), int(c.sum())

    @staticmethod
    def concat(parts: list["Histogram"]) -> "Histogram":
        offsets = [np.zeros(1, dtype=np.int64)]
        base = 0
        for part in parts:
            offsets.append(part.offsets[1:] + base)
            base += part.offsets[-1]
        return Histogram(
            np.concatenate(offsets),
            np.concatenate([p.g for p in parts]),
            np.concatenate([p.h for p in parts]),
            np.concatenate([p.counts for p in parts]),
        )


@njit(cache=True, nogil=True)
def _hist_kernel(bin_idx, offsets, rows, g, h, out_g, out_h, out_c):
    # Feature-major, row-sequential accumulation: per-feature results are
    # bit-identical no matter which column subset the kernel runs on.
    for j in range(offsets.shape[0] - 1):
        base = offsets[j]
        for t in range(rows.shape[0]):
            s = rows[t]
            b = base + bin_idx[s, j]
            out_g[b] += g[s]
            out_h[b] += h[s]
            out_c[b] += 1


class HistogramBuilder:
    """Caches per-sample bin indices for fast repeated node histograms."""

    def __init__(self, values: np.ndarray, candidates: SplitCandidates):
        values = np.asarray(values)
        if values.shape[1] != candidates.n_features:
            raise GbdtError("candidate list does not match feature count")
        n, f = values.shape
        bin_idx = np.empty((n, f), dtype=np.uint8)
        for j in range(f):
            bin_idx[:, j] = np.searchsorted(candidates.thresholds[j], values[:, j], side="left")
        self.bin_idx = bin_idx
        self.candidates = candidates

    def node_hist(self, g: np.ndarray, h: np.ndarray, rows: np.ndarray) -> Histogram:
        cand = self.candidates
        out_g = np.zeros(cand.total_bins)
        out_h = np.zeros(cand.total_bins)
        out_c = np.zeros(cand.total_bins, dtype=np.int64)
        _hist_kernel(
            self.bin_idx,
            cand.offsets,
            np.asarray(rows, dtype=np.int64),
            np.ascontiguousarray(g),
            np.ascontiguousarray(h),
            out_g,
            out_h,
            out_c,
        )
        return Histogram(cand.offsets, out_g, out_h, out_c)


def compute_hist(
    g: np.ndarray,
    h: np.ndarray,
    rows: np.ndarray,
    values: np.ndarray,
    candidates: SplitCandidates,
) -> Histogram:
    """One-off node histogram over a feature submatrix."""
    return HistogramBuilder(values, candidates).node_hist(g, h, rows)


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float
    g_left: float
    h_left: float
    count_left: int


def _segment_cumsum(flat: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    total = np.cumsum(flat)
    starts = offsets[:-1]
    corrections = np.where(starts > 0, total[starts - 1], 0)
    return total - np.repeat(corrections, np.diff(offsets))


def best_split(
    hist: Histogram,
    candidates: SplitCandidates,
    lam: float,
    gamma: float,
    min_child: int,
) -> Split | None:
    """Pick the (feature, threshold) maximizing the second-order gain.

    Candidates leaving a child below ``min_child`` samples are skipped.
    Ties break toward the lowest feature index, then the lowest threshold.
    Returns None when no candidate has positive gain.
    """
    if candidates.total_bins == 0:
        return None
    g_tot, h_tot, n_tot = hist.total()
    # Conservation makes the per-feature totals equal the node totals, so
    # right-side sums derive from the node totals for every feature at once.
    gl = _segment_cumsum(hist.g, hist.offsets)
    hl = _segment_cumsum(hist.h, hist.offsets)
    cl = _segment_cumsum(hist.counts, hist.offsets)
    gr = g_tot - gl
    hr = h_tot - hl
    cr = n_tot - cl
    parent = g_tot * g_tot / (h_tot + lam)
    with np.errstate(invalid="ignore", divide="ignore"):
        gains = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent) - gamma
    gains = np.where(np.isnan(gains), -np.inf, gains)
    valid = candidates.interior & (cl >= min_child) & (cr >= min_child)
    if not valid.any():
        return None
    gains = np.where(valid, gains, -np.inf)
    best = int(np.argmax(gains))  # first max: lowest feature, lowest threshold
    if not gains[best] > 0:
        return None
    return Split(
        feature=int(candidates.bin_feature[best]),
        threshold=float(candidates.bin_threshold[best]),
        gain=float(gains[best]),
        g_left=float(gl[best]),
        h_left=float(hl[best]),
        count_left=int(cl[best]),
    )


@dataclass
class Tree:
    """A regression tree as parallel arrays; node 0 is the root.

    ``feature`` is -1 at leaves; children are node indices.
    """

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_values(self, values: np.ndarray) -> np.ndarray:
        """Route every row to its leaf and return the leaf weights."""
        n = values.shape[0]
        out = np.zeros(n)
        if not self.n_nodes:
            return out
        stack = [(0, np.arange(n, dtype=np.int64))]
        while stack:
            nid, rows = stack.pop()
            if not rows.size:
                continue
            if self.feature[nid] < 0:
                out[rows] = self.value[nid]
            else:
                mask = values[rows, self.feature[nid]] <= self.threshold[nid]
                stack.append((self.left[nid], rows[mask]))
                stack.append((self.right[nid], rows[~mask]))
        return out

    def to_json(self) -> dict:
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left,
            "right": self.right,
            "value": self.value,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Tree":
        return cls(
            list(doc["feature"]),
            [float(v) for v in doc["threshold"]],
            list(doc["left"]),
            list(doc["right"]),
            [float(v) for v in doc["value"]],
        )


class TreeGrower:
    """Level-order tree construction from node histograms.

    The driver (centralized fit or the federated active party) feeds it one
    level at a time: histograms for the open nodes, then left-masks for the
    nodes it decided to split.  Leaf weights are -G/(H+lam).
    """

    def __init__(self, params: GbdtParams, n_rows: int, g_total: float, h_total: float):
        self.params = params
        self.tree = Tree()
        root = self.tree.add_node()
        self.open: dict[int, np.ndarray] = {root: np.arange(n_rows, dtype=np.int64)}
        self.totals: dict[int, tuple[float, float]] = {root: (g_total, h_total)}
        self.pending: dict[int, Split] = {}
        self.row_values = np.zeros(n_rows)

    def open_nodes(self) -> list[tuple[int, np.ndarray]]:
        return sorted(self.open.items())

    def _seal_leaf(self, nid: int) -> None:
        g, h = self.totals[nid]
        w = -g / (h + self.params.lam)
        self.tree.value[nid] = w
        self.row_values[self.open.pop(nid)] = w

    def decide_level(self, hists: dict[int, Histogram], candidates: SplitCandidates) -> dict[int, Split]:
        """Choose splits for the open nodes; nodes without one become leaves."""
        self.pending = {}
        for nid, _rows in self.open_nodes():
            split = best_split(
                hists[nid], candidates, self.params.lam, self.params.gamma, self.params.min_child
            )
            if split is None:
                self._seal_leaf(nid)
            else:
                self.pending[nid] = split
        return dict(self.pending)

    def apply_masks(self, left_masks: dict[int, np.ndarray]) -> None:
        """Create children for each pending split from its left-row mask."""
        for nid in sorted(self.pending):
            split = self.pending[nid]
            rows = self.open.pop(nid)
            mask = np.asarray(left_masks[nid], dtype=bool)
            g, h = self.totals.pop(nid)
            left = self.tree.add_node()
            right = self.tree.add_node()
            self.tree.feature[nid] = split.feature
            self.tree.threshold[nid] = split.threshold
            self.tree.left[nid] = left
            self.tree.right[nid] = right
            self.open[left] = rows[mask]
            self.open[right] = rows[~mask]
            self.totals[left] = (split.g_left, split.h_left)
            self.totals[right] = (g - split.g_left, h - split.h_left)
        self.pending = {}

    def seal_remaining(self) -> None:
        for nid in sorted(self.open):
            self._seal_leaf(nid)


def _grow_tree_local(
    builder: HistogramBuilder,
    values: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    params: GbdtParams,
) -> tuple[Tree, np.ndarray]:
    grower = TreeGrower(params, len(g), float(g.sum()), float(h.sum()))
    for _depth in range(params.max_depth):
        if not grower.open:
            break
        hists = {nid: builder.node_hist(g, h, rows) for nid, rows in grower.open_nodes()}
        pending = grower.decide_level(hists, builder.candidates)
        if not pending:
            break
        masks = {
            nid: values[grower.open[nid], split.feature] <= split.threshold
            for nid, split in pending.items()
        }
        grower.apply_masks(masks)
    grower.seal_remaining()
    return grower.tree, grower.row_values


def base_scores_for(y_index: np.ndarray, n_classes: int) -> np.ndarray:
    """Laplace-smoothed log priors, so a zero-tree model predicts the
    majority class."""
    counts = np.bincount(y_index, minlength=n_classes).astype(float)
    return np.log((counts + 1.0) / (counts.sum() + n_classes))


@dataclass
class GbdtModel:
    params: GbdtParams
    class_labels: tuple[int, ...]
    base_scores: np.ndarray
    trees: list[list[Tree]]  # [round][class]

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)

    def predict_margins(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values)
        n = values.shape[0]
        scores = np.tile(self.base_scores, (n, 1))
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                scores[:, k] += self.params.eta * tree.leaf_values(values)
        return scores

    def predict_proba(self, values: np.ndarray) -> np.ndarray:
        scores = self.predict_margins(values)
        shifted = scores - scores.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)

    def predict(self, values: np.ndarray) -> np.ndarray:
        margins = self.predict_margins(values)
        labels = np.asarray(self.class_labels, dtype=np.int64)
        return labels[margins.argmax(axis=1)]

    def to_json(self) -> dict:
        return {
            "params": self.params.to_json(),
            "class_labels": list(self.class_labels),
            "base_scores": [float(b) for b in self.base_scores],
            "trees": [[t.to_json() for t in round_trees] for round_trees in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, doc: dict) -> "GbdtModel":
        return cls(
            GbdtParams.from_json(doc["params"]),
            tuple(doc["class_labels"]),
            np.array(doc["base_scores"]),
            [[Tree.from_json(t) for t in round_trees] for round_trees in doc["trees"]],
        )


def fit(dataset, params: GbdtParams) -> GbdtModel:
    """Train on a BinnedDataset (or anything with .values/.labels)."""
    return fit_arrays(dataset.values, dataset.labels, params)


def fit_arrays(values: np.ndarray, labels: np.ndarray, params: GbdtParams) -> GbdtModel:
    values = np.asarray(values)
    labels = np.asarray(labels, dtype=np.int64)
    class_labels = tuple(int(c) for c in np.unique(labels))
    if len(class_labels) < 2:
        raise GbdtError("training requires at least two classes")
    lookup = {c: i for i, c in enumerate(class_labels)}
    y_index = np.array([lookup[int(v)] for v in labels], dtype=np.int64)
    n_classes = len(class_labels)

    candidates = propose_split_candidates(values)
    builder = HistogramBuilder(values, candidates)
    base = base_scores_for(y_index, n_classes)
    scores = np.tile(base, (len(labels), 1))

    trees: list[list[Tree]] = []
    for _round in range(params.n_trees):
        g, h = update_gradients(y_index, scores)
        round_trees = []
        for k in range(n_classes):
            tree, row_values = _grow_tree_local(
                builder, values, np.ascontiguousarray(g[:, k]), np.ascontiguousarray(h[:, k]), params
            )
            round_trees.append(tree)
            scores[:, k] += params.eta * row_values
        trees.append(round_trees)
    return GbdtModel(params, class_labels, base, trees)


def log_loss(model: GbdtModel, values: np.ndarray, labels: np.ndarray) -> float:
    proba = model.predict_proba(values)
    lookup = {c: i for i, c in enumerate(model.class_labels)}
    idx = np.array([lookup[int(v)] for v in labels])
    picked = proba[np.arange(len(labels)), idx]
    return float(-np.log(np.clip(picked, 1e-15, None)).mean())
