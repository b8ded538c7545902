"""Brute-force reference implementations used to check the vectorized code.

These deliberately use plain Python loops over explicit similarity tables and
exhaustive threshold sweeps; they share nothing with ``pfid.evaluation``
beyond the definitions they encode.
"""

import math


def dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def threshold_bruteforce(negatives, far):
    """Smallest observed impostor score whose acceptance fraction is <= far.

    When no observed score qualifies, the threshold sits just above the largest one.
    """
    n = len(negatives)
    best = math.nextafter(max(negatives), math.inf)
    for t in sorted(set(negatives)):
        accepted = sum(1 for s in negatives if s >= t)
        if accepted <= far * n + 1e-9 and t < best:
            best = t
    return best


def rank_of_truth(probe_vec, probe_label, gallery_vecs, gallery_labels):
    table = {}
    for g, lab in zip(gallery_vecs, gallery_labels):
        s = dot(probe_vec, g)
        table[lab] = max(table.get(lab, -math.inf), s)
    ordered = sorted(table.items(), key=lambda kv: -kv[1])
    true_score = table[probe_label]
    return 1 + sum(1 for lab, s in ordered if s > true_score)


def cmc_bruteforce(gallery_vecs, gallery_labels, probe_vecs, probe_labels, max_rank):
    ranks = [rank_of_truth(p, l, gallery_vecs, gallery_labels) for p, l in zip(probe_vecs, probe_labels)]
    return [sum(1 for r in ranks if r <= k) / len(ranks) for k in range(1, max_rank + 1)]


def dir_bruteforce(gallery_vecs, gallery_labels, known_vecs, known_labels, unknown_vecs, far):
    unk = [max(dot(u, g) for g in gallery_vecs) for u in unknown_vecs]
    tau = threshold_bruteforce(unk, far)
    hits = 0
    for p, lab in zip(known_vecs, known_labels):
        top = max(dot(p, g) for g in gallery_vecs)
        if top >= tau and rank_of_truth(p, lab, gallery_vecs, gallery_labels) == 1:
            hits += 1
    return hits / len(known_vecs)


def verification_bruteforce(vecs, labels):
    """Per-sample positive and list of negatives (ascending class order)."""
    classes = sorted(set(labels))
    positives, negatives = [], []
    for i, (v, lab) in enumerate(zip(vecs, labels)):
        best = {c: -math.inf for c in classes}
        for j, (w, lab2) in enumerate(zip(vecs, labels)):
            if i != j:
                best[lab2] = max(best[lab2], dot(v, w))
        positives.append(best[lab])
        negatives.append([best[c] for c in classes if c != lab])
    return positives, negatives


def tar_bruteforce(positives, negatives, far):
    tau = threshold_bruteforce(negatives, far)
    return sum(1 for s in positives if s >= tau) / len(positives)


def nn_accuracy_bruteforce(train_vecs, train_labels, test_vecs, test_labels):
    correct = 0
    for v, lab in zip(test_vecs, test_labels):
        best, best_lab = -math.inf, None
        for w, lab2 in zip(train_vecs, train_labels):
            s = dot(v, w)
            if s > best:
                best, best_lab = s, lab2
        correct += best_lab == lab
    return correct / len(test_vecs)


def max_rel_err(analytic, numeric, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), floor))
    return worst
