"""Labeled feature-vector datasets: synthetic identity generator and CSV ingestion.

Feature files are UTF-8 comma-separated values with one sample per row.  The
last column is an integer identity label and every preceding column is a
feature.  A header row is optional and recognised by a non-numeric first row.
Labels are remapped to dense ``1..K`` in order of first occurrence.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    features: np.ndarray  # (n, D) float64
    labels: np.ndarray  # (n,) int64 in 1..K
    num_classes: int
    # dense label -> original label, when loaded from a file
    label_map: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, D) with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.num_classes):
            raise ValueError(f"labels must lie in 1..{self.num_classes}")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes + 1)[1:]

    def subset(self, indices) -> "Dataset":
        """Rows ``indices`` with the original label space kept intact."""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes, dict(self.label_map))

    def relabeled(self) -> "Dataset":
        """Copy with labels compacted to ``1..K'`` (sorted order), for training on a subset."""
        uniq, dense = np.unique(self.labels, return_inverse=True)
        return Dataset(self.features.copy(), dense + 1, int(uniq.size))


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 40
    samples_per_identity: tuple[int, int] = (30, 100)
    feature_dim: int = 32
    nuisance_dim: int = 8
    nuisance_scale: float = 1.0
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.samples_per_identity
        if lo < 1 or hi < lo:
            raise ValueError(f"bad samples_per_identity range {self.samples_per_identity}")
        if not 0 <= self.nuisance_dim < self.feature_dim:
            raise ValueError("nuisance_dim must be < feature_dim")
        if self.num_identities < 1:
            raise ValueError("need at least one identity")
        if self.nuisance_scale < 0 or self.noise_scale < 0:
            raise ValueError("scales must be non-negative")


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Identities as sub-manifolds around random unit prototypes.

    All identities share one random ``nuisance_dim``-dimensional subspace
    (pose/lighting analogue).  A sample is its prototype, plus a Gaussian
    offset of scale ``nuisance_scale`` inside that subspace, plus isotropic
    Gaussian noise of scale ``noise_scale``.
    """
    rng = np.random.default_rng(config.seed)
    d, c = config.feature_dim, config.num_identities
    lo, hi = config.samples_per_identity
    prototypes = rng.standard_normal((c, d))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    basis, _ = np.linalg.qr(rng.standard_normal((d, max(config.nuisance_dim, 1))))
    basis = basis[:, :config.nuisance_dim]
    sizes = rng.integers(lo, hi + 1, size=c)

    feats, labels = [], []
    for ident in range(c):
        n = int(sizes[ident])
        coords = rng.standard_normal((n, config.nuisance_dim))
        noise = rng.standard_normal((n, d))
        x = prototypes[ident] + config.nuisance_scale * coords @ basis.T + config.noise_scale * noise
        feats.append(x)
        labels.append(np.full(n, ident + 1))
    return Dataset(np.vstack(feats), np.concatenate(labels), c)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_feature_file(path) -> Dataset:
    """Read a feature CSV; see the module docstring for the format."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(n, r) for n, r in enumerate(csv.reader(fh), start=1) if r and any(x.strip() for x in r)]
    if rows and not all(_is_number(x) for x in rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")

    width = len(rows[0][1])
    if width < 2:
        raise ValueError(f"{path}:{rows[0][0]}: need at least one feature column and a label column")
    feats = np.empty((len(rows), width - 1), dtype=np.float64)
    raw_labels = []
    for r, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            feats[r] = [float(x) for x in row[:-1]]
            label = float(row[-1])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-numeric field ({exc})") from None
        if not label.is_integer():
            raise ValueError(f"{path}:{lineno}: label {row[-1]!r} is not an integer")
        if not np.all(np.isfinite(feats[r])):
            raise ValueError(f"{path}:{lineno}: non-finite feature value")
        raw_labels.append(int(label))

    mapping: dict[int, int] = {}
    for lab in raw_labels:
        mapping.setdefault(lab, len(mapping) + 1)
    dense = np.array([mapping[lab] for lab in raw_labels], dtype=np.int64)
    return Dataset(feats, dense, len(mapping), {v: k for k, v in mapping.items()})


def format_feature_rows(dataset: Dataset, header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow([f"f{k}" for k in range(dataset.dim)] + ["label"])
    for x, lab in zip(dataset.features, dataset.labels):
        # repr round-trips float64 exactly
        writer.writerow([repr(float(v)) for v in x] + [int(dataset.label_map.get(int(lab), lab))])
    return buf.getvalue()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_feature_file(dataset: Dataset, path, header: bool = True) -> None:
    """Write ``dataset`` as a feature CSV, restoring original labels if a mapping is known."""
    atomic_write_text(path, format_feature_rows(dataset, header))


def format_label_mapping(dataset: Dataset) -> str:
    lines = ["original,dense"]
    lines += [f"{dataset.label_map[d]},{d}" for d in sorted(dataset.label_map)]
    return "\n".join(lines) + "\n"
