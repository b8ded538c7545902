"""Pair mini-batches and the dataset splits used by every protocol.

Pair positions in a :class:`PairBatch` refer to slots of ``sample_indices``,
not to dataset rows, so a dataset sample drawn twice into one batch is still
two distinct batch members.  Similar pair ``t`` always occupies slots
``(2t, 2t + 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np


@dataclass(frozen=True)
class PairBatch:
    sample_indices: np.ndarray  # dataset rows, one per batch slot
    similar_pairs: np.ndarray  # (|C_s|, 2) slot pairs
    dissimilar_pairs: np.ndarray  # (|C_d|, 2) slot pairs, i < j

    def __len__(self) -> int:
        return len(self.sample_indices)


@dataclass(frozen=True)
class SplitPlan:
    train_indices: np.ndarray
    test_indices: np.ndarray
    split_kind: str  # "stratified" or "identity"
    seed: int


def _pairs_array(pairs) -> np.ndarray:
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def eligible_anchors(labels) -> np.ndarray:
    """Rows whose class has at least one other member."""
    labels = np.asarray(labels)
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return np.flatnonzero(counts[inverse] >= 2)


def pair_batch_from_anchors(labels, anchors, rng: np.random.Generator) -> PairBatch:
    """Attach a uniformly drawn same-class partner to each anchor.

    Dissimilar pairs are every unordered cross-label slot pair in the batch,
    listed in lexicographic slot order.
    """
    labels = np.asarray(labels)
    slots = []
    for a in anchors:
        mates = np.flatnonzero(labels == labels[a])
        mates = mates[mates != a]
        if mates.size == 0:
            raise ValueError(f"anchor {a} has no same-class partner")
        slots.extend((int(a), int(mates[rng.integers(mates.size)])))
    sample_indices = np.asarray(slots, dtype=np.int64)
    similar = [(2 * t, 2 * t + 1) for t in range(len(anchors))]
    batch_labels = labels[sample_indices]
    dissimilar = [(i, j) for i, j in combinations(range(len(slots)), 2) if batch_labels[i] != batch_labels[j]]
    return PairBatch(sample_indices, _pairs_array(similar), _pairs_array(dissimilar))


def build_pair_batch(labels, pairs_per_batch: int, rng: np.random.Generator) -> PairBatch:
    """Sample ``pairs_per_batch`` anchors and pair each with a same-class partner.

    Anchors come only from classes with two or more samples and are drawn
    without replacement when enough such samples exist.
    """
    if pairs_per_batch < 1:
        raise ValueError("pairs_per_batch must be >= 1")
    labels = getattr(labels, "labels", labels)
    pool = eligible_anchors(labels)
    if pool.size == 0:
        raise ValueError("no class has two or more samples; cannot form similar pairs")
    anchors = rng.choice(pool, size=pairs_per_batch, replace=pool.size < pairs_per_batch)
    return pair_batch_from_anchors(labels, anchors, rng)


def epoch_batches(labels, pairs_per_batch: int, rng: np.random.Generator) -> list[PairBatch]:
    """One pass over every eligible anchor in random order; the partial tail is dropped."""
    labels = getattr(labels, "labels", labels)
    pool = eligible_anchors(labels)
    if pool.size == 0:
        raise ValueError("no class has two or more samples; cannot form similar pairs")
    order = rng.permutation(pool)
    n_batches = order.size // pairs_per_batch
    return [
        pair_batch_from_anchors(labels, order[b * pairs_per_batch:(b + 1) * pairs_per_batch], rng)
        for b in range(n_batches)
    ]


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(labels, test_fraction: float, seed: int) -> SplitPlan:
    """Per-class random split; each class puts round(fraction * size) samples in test, at least 1."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    test = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            raise ValueError(f"class {c} has a single sample; stratified split needs >= 2")
        n_test = min(max(1, _round_half_up(test_fraction * members.size)), members.size - 1)
        test.extend(rng.choice(members, size=n_test, replace=False).tolist())
    test_idx = np.sort(np.asarray(test, dtype=np.int64))
    train_idx = np.setdiff1d(np.arange(labels.size), test_idx)
    return SplitPlan(train_idx, test_idx, "stratified", seed)


def identity_split(labels, test_fraction: float, seed: int) -> SplitPlan:
    """Hold out round(fraction * C) whole identities (at least 1, at most C - 1)."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if ids.size < 2:
        raise ValueError("identity split needs at least 2 identities")
    n_test = min(max(1, _round_half_up(test_fraction * ids.size)), ids.size - 1)
    rng = np.random.default_rng(seed)
    test_ids = rng.choice(ids, size=n_test, replace=False)
    mask = np.isin(labels, test_ids)
    return SplitPlan(np.flatnonzero(~mask), np.flatnonzero(mask), "identity", seed)


def make_split(kind: str, labels, test_fraction: float, seed: int) -> SplitPlan:
    if kind == "stratified":
        return stratified_split(labels, test_fraction, seed)
    if kind == "identity":
        return identity_split(labels, test_fraction, seed)
    raise ValueError(f"unknown split kind {kind!r}")


def unknown_identities(labels) -> np.ndarray:
    """Identities at odd ordinal positions (1st, 3rd, ...) of the sorted label set."""
    return np.unique(labels)[0::2]


def probe_gallery_trial(labels, rng: np.random.Generator, mode: str = "closed") -> tuple[np.ndarray, np.ndarray]:
    """Draw one gallery/probe partition of a test set.

    Every enrolled identity contributes one uniformly chosen image to the
    gallery and the rest of its images to the probe set.  In ``"open"`` mode
    the identities returned by :func:`unknown_identities` are not enrolled:
    all of their images become probes.

    Returns ``(gallery_indices, probe_indices)`` as sorted positions into
    ``labels``.
    """
    if mode not in ("closed", "open"):
        raise ValueError(f"mode must be 'closed' or 'open', got {mode!r}")
    labels = np.asarray(labels)
    unknown = set(unknown_identities(labels).tolist()) if mode == "open" else set()
    gallery, probe = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if c in unknown:
            probe.extend(members.tolist())
            continue
        if members.size < 2:
            raise ValueError(f"identity {c} has a single sample; it cannot be both enrolled and probed")
        pick = members[rng.integers(members.size)]
        gallery.append(int(pick))
        probe.extend(members[members != pick].tolist())
    return np.sort(np.asarray(gallery, dtype=np.int64)), np.sort(np.asarray(probe, dtype=np.int64))
