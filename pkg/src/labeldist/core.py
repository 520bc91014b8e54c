"""Sparse annotation data, label distributions and dataset splits.

Labels and ids are 1-based in files and on the command line, 0-based
everywhere inside the package. Conversion happens only in the readers and
writers at the bottom of this module.
"""

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SIMPLEX_TOL = 1e-9
KL_SMOOTHING = 1e-9


class ValidationError(ValueError):
    """Bad input data or configuration (CLI exit code 2)."""


def check_distribution(p, tol=SIMPLEX_TOL):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError("a label distribution must be a non-empty vector")
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ValidationError("label distribution has negative or non-finite entries")
    if abs(p.sum() - 1.0) > tol:
        raise ValidationError(f"label distribution sums to {p.sum():.12g}, not 1")
    return p


def is_distribution(p, tol=SIMPLEX_TOL, axis=-1):
    p = np.asarray(p, dtype=float)
    return bool(np.all(p >= 0) and np.all(np.abs(p.sum(axis=axis) - 1.0) <= tol))


@dataclass(frozen=True, eq=False)
class AnnotationMatrix:
    """The sparse item x annotator label matrix.

    ``items``, ``annotators`` and ``labels`` are parallel arrays, one entry per
    observed (item, annotator, label) triple, all 0-based.
    """

    num_items: int
    num_annotators: int
    num_labels: int
    items: np.ndarray
    annotators: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        items = np.asarray(self.items, dtype=np.int64).ravel()
        annotators = np.asarray(self.annotators, dtype=np.int64).ravel()
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if min(self.num_items, self.num_annotators, self.num_labels) < 1:
            raise ValidationError("M, N and P must all be positive")
        if not (items.size == annotators.size == labels.size):
            raise ValidationError("entry arrays have different lengths")
        if items.size == 0:
            raise ValidationError("annotation matrix has no entries")
        if items.min() < 0 or items.max() >= self.num_items:
            raise ValidationError("item index out of range")
        if annotators.min() < 0 or annotators.max() >= self.num_annotators:
            raise ValidationError("annotator index out of range")
        if labels.min() < 0 or labels.max() >= self.num_labels:
            raise ValidationError(f"label outside 1..{self.num_labels}")
        pair = items * self.num_annotators + annotators
        if np.unique(pair).size != pair.size:
            raise ValidationError("duplicate (item, annotator) entry")
        per_item = np.bincount(items, minlength=self.num_items)
        if np.any(per_item == 0):
            missing = np.flatnonzero(per_item == 0)[:5] + 1
            raise ValidationError(f"items without any label: {missing.tolist()}")
        # canonical order: by item, then annotator
        order = np.lexsort((annotators, items))
        for name, arr in (("items", items), ("annotators", annotators), ("labels", labels)):
            arr = arr[order]
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_entries(self):
        return self.items.size

    @property
    def shape(self):
        return self.num_items, self.num_annotators

    @cached_property
    def item_ptr(self):
        """CSR row pointer: entries of item m are ``item_ptr[m]:item_ptr[m+1]``."""
        counts = np.bincount(self.items, minlength=self.num_items)
        return np.concatenate([[0], np.cumsum(counts)])

    @cached_property
    def annotator_order(self):
        return np.argsort(self.annotators, kind="stable")

    @cached_property
    def annotator_ptr(self):
        counts = np.bincount(self.annotators, minlength=self.num_annotators)
        return np.concatenate([[0], np.cumsum(counts)])

    def entries_of_item(self, m):
        return np.arange(self.item_ptr[m], self.item_ptr[m + 1])

    def entries_of_annotator(self, n):
        return self.annotator_order[self.annotator_ptr[n]:self.annotator_ptr[n + 1]]

    @cached_property
    def label_counts(self):
        """M x P matrix of per-item label counts."""
        counts = np.zeros((self.num_items, self.num_labels))
        np.add.at(counts, (self.items, self.labels), 1.0)
        return counts

    def assignment_set(self):
        return set(zip(self.items.tolist(), self.annotators.tolist()))

    def label_slice(self, p):
        """A_p: the (item, annotator) pairs that received label p."""
        mask = self.labels == p
        return set(zip(self.items[mask].tolist(), self.annotators[mask].tolist()))

    def empirical_dists(self):
        counts = self.label_counts
        return counts / counts.sum(axis=1, keepdims=True)

    def annotator_dists(self):
        """Per-annotator label distribution; uniform for annotators with no labels."""
        counts = np.zeros((self.num_annotators, self.num_labels))
        np.add.at(counts, (self.annotators, self.labels), 1.0)
        totals = counts.sum(axis=1, keepdims=True)
        uniform = np.full_like(counts, 1.0 / self.num_labels)
        return np.where(totals > 0, counts / np.maximum(totals, 1.0), uniform)

    def subset(self, item_ids):
        """Restrict to ``item_ids`` (renumbered 0..len-1 in the given order).

        Annotator numbering is kept so that annotator clusters stay comparable.
        """
        item_ids = np.asarray(item_ids, dtype=np.int64)
        remap = np.full(self.num_items, -1, dtype=np.int64)
        remap[item_ids] = np.arange(item_ids.size)
        keep = remap[self.items] >= 0
        return AnnotationMatrix(item_ids.size, self.num_annotators, self.num_labels,
                                remap[self.items[keep]], self.annotators[keep],
                                self.labels[keep])


def empirical_dist(matrix, item):
    """Gold-standard label distribution of one item (fraction of each label)."""
    if not 0 <= item < matrix.num_items:
        raise ValidationError(f"item {item} out of range")
    counts = matrix.label_counts[item]
    total = counts.sum()
    if total == 0:
        raise ValidationError(f"undefined distribution: item {item} has no labels")
    return counts / total


def argmax_label(dist):
    # np.argmax returns the first maximum, i.e. the lowest label index on ties
    return int(np.argmax(np.asarray(dist)))


def smooth(q, eps=KL_SMOOTHING):
    q = np.asarray(q, dtype=float)
    return (1.0 - eps) * q + eps / q.shape[-1]


def kl_divergence(p, q, eps=KL_SMOOTHING):
    """KL(p || q) in nats; ``q`` is mixed with the uniform distribution at ``eps``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValidationError(f"length mismatch: {p.shape} vs {q.shape}")
    q = smooth(q, eps)
    pos = p > 0
    terms = np.zeros_like(p)
    terms[pos] = p[pos] * (np.log(p[pos]) - np.log(q[pos]))
    return float(max(terms.sum(axis=-1), 0.0)) if p.ndim == 1 else np.maximum(terms.sum(axis=-1), 0.0)


def mean_kl(pred, gold, eps=KL_SMOOTHING):
    return float(np.mean(kl_divergence(np.atleast_2d(pred), np.atleast_2d(gold), eps)))


def entropy(p):
    p = np.asarray(p, dtype=float)
    pos = p > 0
    return float(-(p[pos] * np.log(p[pos])).sum())


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    dev: np.ndarray
    test: np.ndarray
    features: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        parts = [np.asarray(getattr(self, k), dtype=np.int64) for k in ("train", "dev", "test")]
        for name, arr in zip(("train", "dev", "test"), parts):
            object.__setattr__(self, name, arr)
        allidx = np.concatenate(parts)
        if np.unique(allidx).size != allidx.size:
            raise ValidationError("train/dev/test splits overlap")
        if self.features is not None:
            feats = np.asarray(self.features, dtype=float)
            if feats.ndim != 2:
                raise ValidationError("features must be a 2-d array")
            object.__setattr__(self, "features", feats)
            if allidx.size != feats.shape[0] or (allidx.size and allidx.max() >= feats.shape[0]):
                raise ValidationError("splits must cover every item exactly once")

    @property
    def num_features(self):
        return None if self.features is None else self.features.shape[1]

    @classmethod
    def random(cls, num_items, fractions=(0.5, 0.25, 0.25), seed=0, features=None):
        rng = np.random.default_rng(seed)
        perm = rng.permutation(num_items)
        n_train = int(round(fractions[0] * num_items))
        n_dev = int(round(fractions[1] * num_items))
        return cls(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_dev]),
                   np.sort(perm[n_train + n_dev:]), features)


# ---------------------------------------------------------------- file I/O

def read_annotations(path, num_labels=None, num_items=None, num_annotators=None):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["item", "annotator", "label"]:
            raise ValidationError(f"{path}: header must be item,annotator,label")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((int(row["item"]), int(row["annotator"]), int(row["label"])))
            except (TypeError, ValueError):
                raise ValidationError(f"{path}:{lineno}: non-integer field") from None
    if not rows:
        raise ValidationError(f"{path}: no annotations")
    arr = np.array(rows, dtype=np.int64)
    if arr.min() < 1:
        raise ValidationError(f"{path}: ids and labels are 1-based")
    return AnnotationMatrix(num_items or int(arr[:, 0].max()),
                            num_annotators or int(arr[:, 1].max()),
                            num_labels or int(arr[:, 2].max()),
                            arr[:, 0] - 1, arr[:, 1] - 1, arr[:, 2] - 1)


def write_annotations(matrix, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item", "annotator", "label"])
        for m, n, p in zip(matrix.items, matrix.annotators, matrix.labels):
            writer.writerow([m + 1, n + 1, p + 1])


def read_features(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "item":
            raise ValidationError(f"{path}: header must start with 'item'")
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields")
            rows[int(row[0]) - 1] = [float(v) for v in row[1:]]
    if not rows:
        raise ValidationError(f"{path}: no feature rows")
    num_items = max(rows) + 1
    if sorted(rows) != list(range(num_items)):
        raise ValidationError(f"{path}: feature rows must cover items 1..{num_items}")
    return np.array([rows[m] for m in range(num_items)])


def write_features(features, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item"] + [f"f{j + 1}" for j in range(features.shape[1])])
        for m, row in enumerate(features):
            writer.writerow([m + 1] + [repr(float(v)) for v in row])


def read_splits(path, features=None):
    with open(path) as fh:
        obj = json.load(fh)
    try:
        parts = [np.asarray(obj[k], dtype=np.int64) - 1 for k in ("train", "dev", "test")]
    except KeyError as exc:
        raise ValidationError(f"{path}: missing split {exc}") from None
    return DatasetSplit(*parts, features=features)


def write_splits(split, path):
    obj = {k: (getattr(split, k) + 1).tolist() for k in ("train", "dev", "test")}
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def write_distributions(path, item_ids, dists, with_argmax=True):
    """Predictions / snapped-label CSV: ``item,p1..pP[,argmax]`` with 1-based ids."""
    dists = np.atleast_2d(dists)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["item"] + [f"p{j + 1}" for j in range(dists.shape[1])]
        writer.writerow(header + (["argmax"] if with_argmax else []))
        for m, row in zip(item_ids, dists):
            extra = [argmax_label(row) + 1] if with_argmax else []
            writer.writerow([int(m) + 1] + [repr(float(v)) for v in row] + extra)


def read_distributions(path):
    """Returns (0-based item ids, N x P array)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "item":
            raise ValidationError(f"{path}: header must start with 'item'")
        pcols = [i for i, h in enumerate(header) if h.startswith("p") and h[1:].isdigit()]
        ids, dists = [], []
        for row in reader:
            ids.append(int(row[0]) - 1)
            dists.append([float(row[i]) for i in pcols])
    return np.array(ids, dtype=np.int64), np.array(dists)
