"""Identification, verification and clustering protocols over unit-norm embeddings.

Similarity is always the cosine of l2-normalized vectors.  Thresholds at a
target FAR follow one rule everywhere (:func:`threshold_at_far`): the
smallest observed impostor score whose acceptance fraction does not exceed
the target, with scores equal to the threshold accepted.  When even the top
impostor score would exceed the budget, the threshold sits just above it.

Ranks are optimistic under ties: the true identity's rank is one plus the
number of identities scoring strictly higher.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .numerics import l2_normalize, similarity_matrix
from .pairing import make_split, probe_gallery_trial

log = logging.getLogger(__name__)

PROTOCOLS = ("classification", "closed", "open", "verification", "cluster")
# FAR points at which per-split ROC / DIR curves are averaged
FAR_GRID = np.unique(np.round(np.concatenate([np.logspace(-3, 0, 31)[:-1], [0.01]]), 12))


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # (N, D) unit rows
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.shape[0] != self.labels.shape[0]:
            raise ValueError("one label per embedding row required")
        if self.labels.size and not np.allclose(np.linalg.norm(self.vectors, axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("embedding rows must be unit-norm")

    def __len__(self) -> int:
        return self.labels.size

    @classmethod
    def from_features(cls, features, labels) -> "EmbeddingSet":
        return cls(l2_normalize(np.atleast_2d(features)), labels)

    def subset(self, indices) -> "EmbeddingSet":
        return EmbeddingSet(self.vectors[indices], self.labels[indices])


@dataclass
class EvalReport:
    protocol: str
    values: list[float]
    mean: float
    std: float
    curves: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    per_split: list[list[float]] = field(default_factory=list)

    @classmethod
    def aggregate(cls, protocol: str, per_split: list[list[float]], **kw) -> "EvalReport":
        values = [v for split in per_split for v in split]
        arr = np.asarray(values, dtype=np.float64)
        return cls(protocol, values, float(arr.mean()), float(arr.std()), per_split=per_split, **kw)

    def formatted(self) -> str:
        if self.protocol == "cluster":
            return f"{self.mean:.3f} ± {self.std:.3f}"
        return f"{100 * self.mean:.2f} ± {100 * self.std:.2f}"

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "metric": METRIC_NAMES[self.protocol],
            "mean": self.mean,
            "std": self.std,
            "summary": self.formatted(),
            "per_split": self.per_split,
            "config": self.config,
            "curves": {k: v.tolist() for k, v in self.curves.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


METRIC_NAMES = {
    "classification": "accuracy",
    "closed": "rank1",
    "open": "dir_at_far",
    "verification": "tar_at_far",
    "cluster": "nmi",
}


# -- thresholds ---------------------------------------------------------------


def threshold_at_far(negatives, far):
    """Acceptance threshold(s) for one FAR value or an array of them."""
    neg = np.asarray(negatives, dtype=np.float64).ravel()
    if neg.size == 0:
        raise ValueError("no impostor scores; FAR is undefined")
    fars = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if np.any((fars <= 0) | (fars >= 1)):
        raise ValueError("far must lie in (0, 1)")
    uniq = np.unique(neg)[::-1]  # descending
    # number of impostors scoring >= each unique value
    counts = np.searchsorted(np.sort(-neg), -uniq, side="right")
    allowed = np.floor(fars * neg.size + 1e-9)
    pos = np.searchsorted(counts, allowed, side="right") - 1
    above_max = np.nextafter(uniq[0], np.inf)
    tau = np.where(pos >= 0, uniq[np.maximum(pos, 0)], above_max)
    return float(tau[0]) if np.ndim(far) == 0 else tau


# -- closed-set identification -------------------------------------------------


def identity_scores(gallery: EmbeddingSet, probe: EmbeddingSet):
    """Per-identity score for every probe: max similarity over that identity's gallery images.

    Returns ``(identities, scores)`` with ``scores`` of shape ``(n_probe, n_ids)``.
    """
    if len(gallery) == 0 or len(probe) == 0:
        raise ValueError("gallery and probe must be non-empty")
    sims = similarity_matrix(probe.vectors, gallery.vectors)
    ids = np.unique(gallery.labels)
    scores = np.column_stack([sims[:, gallery.labels == c].max(axis=1) for c in ids])
    return ids, scores


def _true_rank(ids, scores, probe_labels) -> np.ndarray:
    col = np.searchsorted(ids, probe_labels)
    true = scores[np.arange(len(probe_labels)), col]
    return 1 + np.sum(scores > true[:, None], axis=1)


def closed_set_rank_k(gallery: EmbeddingSet, probe: EmbeddingSet, max_rank: int | None = None) -> np.ndarray:
    """CMC curve: entry ``k - 1`` is the Rank-k identification rate."""
    ids, scores = identity_scores(gallery, probe)
    missing = np.setdiff1d(np.unique(probe.labels), ids)
    if missing.size:
        raise ValueError(f"probe identities {missing.tolist()} are not enrolled; use the open-set protocol")
    max_rank = ids.size if max_rank is None else int(max_rank)
    ranks = _true_rank(ids, scores, probe.labels)
    return np.array([np.mean(ranks <= k) for k in range(1, max_rank + 1)])


# -- open-set identification ---------------------------------------------------


@dataclass
class OpenSetResult:
    dir: float
    threshold: float
    sweep: np.ndarray  # rows (far, dir), far ascending


def open_set_dir(gallery: EmbeddingSet, probe_known: EmbeddingSet, probe_unknown: EmbeddingSet,
                 far: float = 0.01) -> OpenSetResult:
    """Detection-and-identification rate at a target FAR.

    The threshold comes from the unknown probes' top gallery similarity.  A
    known probe counts when its top similarity clears the threshold and its
    true identity is ranked first.
    """
    if len(probe_unknown) == 0:
        raise ValueError("no unknown probes; FAR is undefined")
    overlap = np.intersect1d(np.unique(probe_unknown.labels), np.unique(gallery.labels))
    if overlap.size:
        raise ValueError(f"unknown probes include enrolled identities {overlap.tolist()}")
    unk = similarity_matrix(probe_unknown.vectors, gallery.vectors).max(axis=1)
    if len(probe_known):
        ids, scores = identity_scores(gallery, probe_known)
        if np.setdiff1d(np.unique(probe_known.labels), ids).size:
            raise ValueError("known probes must be enrolled in the gallery")
        top = scores.max(axis=1)
        hit = _true_rank(ids, scores, probe_known.labels) == 1
    else:
        top = np.empty(0)
        hit = np.empty(0, dtype=bool)
    tau = threshold_at_far(unk, far)
    dir_value = float(np.mean(hit & (top >= tau))) if top.size else 0.0

    # operating points reachable by the threshold rule: one per distinct unknown score
    cuts = np.unique(np.concatenate([unk, [np.nextafter(unk.max(), np.inf)]]))
    sweep = np.array([(np.mean(unk >= t), np.mean(hit & (top >= t)) if top.size else 0.0) for t in cuts])
    return OpenSetResult(dir_value, tau, _monotone_curve(sweep))


def _monotone_curve(points) -> np.ndarray:
    """Sort by x and keep the best y per distinct x."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    xs = np.unique(points[:, 0])
    ys = np.array([points[points[:, 0] == x, 1].max() for x in xs])
    return np.column_stack([xs, ys])


# -- verification ------------------------------------------------------------


def verification_scores(embeddings: EmbeddingSet):
    """Positive and per-class negative scores for every sample.

    Returns ``(positives, negatives, classes)``: ``positives[i]`` is the best
    similarity to another sample of the same class and ``negatives[i]`` holds
    the best similarity to each other class, in ascending class order.
    """
    classes, counts = np.unique(embeddings.labels, return_counts=True)
    singles = classes[counts < 2]
    if singles.size:
        raise ValueError(f"identities with a single sample cannot produce a positive score: {singles.tolist()}")
    if classes.size < 2:
        raise ValueError("verification needs at least 2 identities")
    sims = similarity_matrix(embeddings.vectors, embeddings.vectors)
    np.fill_diagonal(sims, -np.inf)
    per_class = np.column_stack([sims[:, embeddings.labels == c].max(axis=1) for c in classes])
    own = np.searchsorted(classes, embeddings.labels)
    rows = np.arange(len(embeddings))
    positives = per_class[rows, own]
    others = np.ones_like(per_class, dtype=bool)
    others[rows, own] = False
    negatives = per_class[others].reshape(len(embeddings), classes.size - 1)
    return positives, negatives, classes


@dataclass
class VerificationResult:
    tar: float
    threshold: float
    roc: np.ndarray  # rows (far, tar), far ascending


def roc_curve(positives, negatives) -> np.ndarray:
    """(FAR, TAR) at every impostor-score breakpoint, plus the all-reject point."""
    pos = np.asarray(positives, dtype=np.float64).ravel()
    neg = np.asarray(negatives, dtype=np.float64).ravel()
    cuts = np.unique(np.concatenate([neg, [np.nextafter(neg.max(), np.inf)]]))
    neg_sorted = np.sort(neg)
    pos_sorted = np.sort(pos)
    far = (neg.size - np.searchsorted(neg_sorted, cuts, side="left")) / neg.size
    tar = (pos.size - np.searchsorted(pos_sorted, cuts, side="left")) / pos.size
    return _monotone_curve(np.column_stack([far, tar]))


def tar_at_far(positives, negatives, far: float = 0.01) -> VerificationResult:
    pos = np.asarray(positives, dtype=np.float64).ravel()
    neg = np.asarray(negatives, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need non-empty positive and negative score lists")
    tau = threshold_at_far(neg, far)
    return VerificationResult(float(np.mean(pos >= tau)), tau, roc_curve(pos, neg))


def tar_on_grid(positives, negatives, fars) -> np.ndarray:
    pos = np.sort(np.asarray(positives, dtype=np.float64).ravel())
    taus = threshold_at_far(negatives, np.asarray(fars))
    return (pos.size - np.searchsorted(pos, taus, side="left")) / pos.size


# -- classification ------------------------------------------------------------


def classify_accuracy(train: EmbeddingSet, test: EmbeddingSet) -> float:
    """1-nearest-neighbour accuracy (cosine); ties go to the lowest train index."""
    if len(train) == 0 or len(test) == 0:
        raise ValueError("train and test sets must be non-empty")
    nearest = np.argmax(similarity_matrix(test.vectors, train.vectors), axis=1)
    return float(np.mean(train.labels[nearest] == test.labels))


# -- clustering ------------------------------------------------------------


def _kmeans_once(x, k, rng, max_iter=300):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[c] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[c]) ** 2, axis=1))

    assign = None
    for _ in range(max_iter):
        dist = np.sum(x ** 2, axis=1)[:, None] - 2 * x @ centers.T + np.sum(centers ** 2, axis=1)[None, :]
        new = np.argmin(dist, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = x[assign == c]
            if members.size:
                centers[c] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-fit point
                far_pt = np.argmax(dist[np.arange(n), assign])
                centers[c] = x[far_pt]
    inertia = float(np.sum((x - centers[assign]) ** 2))
    return assign, inertia


def kmeans(x, k: int, seed: int = 0, restarts: int = 10) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by inertia.

    Restart ``r`` uses seed ``seed + r``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= k <= x.shape[0]:
        raise ValueError(f"k={k} must lie in 1..{x.shape[0]}")
    best, best_inertia = None, np.inf
    for r in range(restarts):
        assign, inertia = _kmeans_once(x, k, np.random.default_rng(seed + r))
        if inertia < best_inertia:
            best, best_inertia = assign, inertia
    return best


def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def normalized_mutual_info(labels_true, labels_pred) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    _, t = np.unique(labels_true, return_inverse=True)
    _, p = np.unique(labels_pred, return_inverse=True)
    table = np.zeros((t.max() + 1, p.max() + 1))
    np.add.at(table, (t, p), 1.0)
    n = table.sum()
    h_t = _entropy(table.sum(axis=1))
    h_p = _entropy(table.sum(axis=0))
    if h_t == 0 and h_p == 0:
        return 1.0
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    mi = float(np.sum(table[nz] / n * np.log(table[nz] * n / outer[nz])))
    return float(np.clip(mi / ((h_t + h_p) / 2), 0.0, 1.0))


def kmeans_nmi(embeddings: EmbeddingSet, k: int | None = None, seed: int = 0, restarts: int = 10) -> float:
    k = np.unique(embeddings.labels).size if k is None else k
    if k > len(embeddings):
        raise ValueError(f"k={k} exceeds the number of embeddings ({len(embeddings)})")
    return normalized_mutual_info(embeddings.labels, kmeans(embeddings.vectors, k, seed, restarts))


# -- orchestration ------------------------------------------------------------


def split_kind_for(protocol: str) -> str:
    return "stratified" if protocol == "classification" else "identity"


class _Embedder:
    """Maps dataset rows to an EmbeddingSet for one split."""

    def __init__(self, dataset: Dataset, network=None, trainer=None):
        self.dataset = dataset
        self.network = network
        self.trainer = trainer

    def for_split(self, plan, split_index: int):
        from .model import embed

        net = self.network
        if self.trainer is not None:
            net = self.trainer(self.dataset.subset(plan.train_indices).relabeled(), plan, split_index)
        ds = self.dataset

        def make(idx):
            if net is None:
                return EmbeddingSet.from_features(ds.features[idx], ds.labels[idx])
            return EmbeddingSet(embed(net, ds.features[idx]), ds.labels[idx])

        return make


def run_protocol(dataset: Dataset, protocol: str, *, network=None, trainer=None, splits: int = 5,
                 trials: int = 100, far: float = 0.01, seed: int = 0, test_fraction: float = 0.2,
                 restarts: int = 10, max_rank: int | None = None) -> EvalReport:
    """Run one protocol over ``splits`` splits (and ``trials`` gallery draws where relevant).

    Embeddings come from ``trainer(train_set, plan, split_index)`` when given
    (a fresh model per split), else from the fixed ``network``, else from the
    raw features.  Split ``s`` uses seed ``seed + s``; trial ``t`` uses seed
    ``seed + 1000 + t``.  Mean and standard deviation are taken over all
    split/trial values.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    if splits < 1 or trials < 1:
        raise ValueError("splits and trials must be >= 1")
    embedder = _Embedder(dataset, network, trainer)
    kind = split_kind_for(protocol)
    per_split: list[list[float]] = []
    curve_sum = None

    for s in range(splits):
        plan = make_split(kind, dataset.labels, test_fraction, seed + s)
        make = embedder.for_split(plan, s)
        test = make(plan.test_indices)
        values: list[float] = []
        if protocol == "classification":
            values.append(classify_accuracy(make(plan.train_indices), test))
        elif protocol == "cluster":
            values.append(kmeans_nmi(test, seed=seed + s, restarts=restarts))
        elif protocol == "verification":
            pos, neg, _ = verification_scores(test)
            values.append(tar_at_far(pos, neg, far).tar)
            curve = tar_on_grid(pos, neg, FAR_GRID)
            curve_sum = curve if curve_sum is None else curve_sum + curve
        else:
            for t in range(trials):
                rng = np.random.default_rng(seed + 1000 + t)
                g_idx, p_idx = probe_gallery_trial(test.labels, rng, protocol)
                gallery, probe = test.subset(g_idx), test.subset(p_idx)
                if protocol == "closed":
                    cmc = closed_set_rank_k(gallery, probe, max_rank)
                    values.append(float(cmc[0]))
                    curve = cmc
                else:
                    known = np.isin(probe.labels, gallery.labels)
                    res = open_set_dir(gallery, probe.subset(np.flatnonzero(known)),
                                       probe.subset(np.flatnonzero(~known)), far)
                    values.append(res.dir)
                    curve = _dir_on_grid(res.sweep, FAR_GRID)
                curve_sum = curve if curve_sum is None else curve_sum + curve
        per_split.append(values)
        log.info("%s split %d: mean %.4f", protocol, s, float(np.mean(values)))

    curves = {}
    n_curves = splits * (trials if protocol in ("closed", "open") else 1)
    if protocol == "closed":
        avg = curve_sum / n_curves
        curves["cmc"] = np.column_stack([np.arange(1, avg.size + 1), avg])
    elif protocol == "open":
        curves["dir"] = np.column_stack([FAR_GRID, curve_sum / n_curves])
    elif protocol == "verification":
        curves["roc"] = np.column_stack([FAR_GRID, curve_sum / n_curves])

    config = {"splits": splits, "trials": trials if protocol in ("closed", "open") else 1, "far": far,
              "seed": seed, "test_fraction": test_fraction, "split_kind": kind,
              "embedding_source": "trained-per-split" if trainer else ("network" if network else "features")}
    if protocol == "cluster":
        config["restarts"] = restarts
    return EvalReport.aggregate(protocol, per_split, curves=curves, config=config)


def _dir_on_grid(sweep, fars) -> np.ndarray:
    """DIR achievable at FAR <= each grid point, read off a threshold sweep."""
    idx = np.searchsorted(sweep[:, 0], fars, side="right") - 1
    return np.where(idx >= 0, sweep[np.maximum(idx, 0), 1], 0.0)


def transfer_eval(network, dataset: Dataset, protocols=("closed", "open", "verification"),
                  **kwargs) -> dict[str, EvalReport]:
    """Evaluate a fixed network on another dataset's identity-split test sets."""
    if dataset.dim != network.config.input_dim:
        raise ValueError(f"dataset dim {dataset.dim} != network input dim {network.config.input_dim}")
    return {p: run_protocol(dataset, p, network=network, **kwargs) for p in protocols}
