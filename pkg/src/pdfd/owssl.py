"""Semi-supervised losses, pseudo-labels with distribution-aware selection,
K-means warm start and class prototypes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_tape
from .errors import DataError, UsageError
from .evaluation import hungarian_match


def one_hot(labels, num_classes) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``softmax(logits)`` against integer labels."""
    labels = np.asarray(labels, dtype=int)
    if logits.shape[0] == 0:
        raise UsageError("cross-entropy on an empty batch")
    target = Tensor._wrap(one_hot(labels, logits.shape[1]))
    return -(logits.log_softmax() * target).sum(axis=1).mean()


def supervised_loss(x, y, encoder, classifier) -> Tensor:
    if len(y) == 0:
        raise UsageError("supervised loss on an empty batch")
    return cross_entropy(classifier.logits(encoder(x)), y)


def unlabeled_loss(x_q, y_q, encoder, classifier) -> Tensor:
    """Cross-entropy on the selected pseudo-labelled instances; 0 when the selection is empty."""
    if len(y_q) == 0:
        return Tensor(0.0)
    return cross_entropy(classifier.logits(encoder(x_q)), y_q)


@dataclass
class PseudoLabels:
    """Cached soft predictions ``probs`` and their hardened argmax ``hard``."""

    probs: np.ndarray
    hard: np.ndarray = field(init=False)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.hard = self.probs.argmax(axis=1)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def onehot(self) -> np.ndarray:
        return one_hot(self.hard, self.probs.shape[1])


def predict_pseudo_labels(x_u, encoder, classifier, augment=None) -> PseudoLabels:
    x = np.asarray(x_u, dtype=np.float64)
    if augment is not None:
        x = augment(x)
    with no_tape():
        probs = classifier(encoder(x)).data
    return PseudoLabels(probs)


# ---------------------------------------------------------------------------
# K-means warm start


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def kmeans_pp_seed(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(x, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2 / total), rng.random(), side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
    return np.array(centers, dtype=np.float64)


def kmeans(x, k, rng, max_iter=100, tol=1e-6):
    """Lloyd's algorithm from k-means++ seeds.

    An empty cluster has its centroid re-seeded at the point farthest from
    its current centroid.  Returns ``(centroids, labels)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if k > x.shape[0]:
        raise UsageError(f"cannot form {k} clusters from {x.shape[0]} points")
    centers = kmeans_pp_seed(x, k, rng)
    labels = np.zeros(x.shape[0], dtype=int)
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(d2[np.arange(x.shape[0]), labels].argmax())
                new[j] = x[far]
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    labels = _sq_dists(x, centers).argmin(axis=1)
    return centers, labels


def map_clusters_to_classes(cluster_labeled, y_labeled, cluster_sizes, seen, novel):
    """Seen classes take the clusters that best match their labelled members
    (Hungarian on vote counts); the remaining clusters go to the novel ids in
    descending size order.  Returns ``mapping[cluster] = class``."""
    k = len(seen) + len(novel)
    votes = np.zeros((k, k))
    for c, y in zip(cluster_labeled, y_labeled):
        votes[c, seen.index(int(y))] += 1
    assign = hungarian_match(-votes)
    mapping = np.full(k, -1, dtype=int)
    for cluster, col in enumerate(assign.perm):
        if col < len(seen):
            mapping[cluster] = seen[col]
    rest = [c for c in range(k) if mapping[c] < 0]
    rest.sort(key=lambda c: (-cluster_sizes[c], c))
    for cluster, cls in zip(rest, sorted(novel)):
        mapping[cluster] = cls
    return mapping


def kmeans_init(feat_l, y_l, feat_u, seen, novel, rng, max_iter=100, tol=1e-6) -> np.ndarray:
    """Cluster labelled + unlabelled features into ``|Y|`` groups and return
    the class id assigned to every unlabelled instance."""
    seen, novel = list(seen), list(novel)
    feats = np.concatenate([np.asarray(feat_l), np.asarray(feat_u)], axis=0)
    _, labels = kmeans(feats, len(seen) + len(novel), rng, max_iter=max_iter, tol=tol)
    n_l = len(y_l)
    sizes = np.bincount(labels, minlength=len(seen) + len(novel))
    mapping = map_clusters_to_classes(labels[:n_l], y_l, sizes, seen, novel)
    return mapping[labels[n_l:]]


# ---------------------------------------------------------------------------
# distribution-aware selection


@dataclass
class Selection:
    confident: list  # per class: instance ids, most confident first
    n_min: int
    ids: np.ndarray  # selected instance ids, grouped by class
    labels: np.ndarray  # hard pseudo-label of each selected id

    @property
    def size(self) -> int:
        return int(self.ids.size)


def select_confident(probs, tau: float, balanced: bool = True) -> Selection:
    """Per-class confident sets ``max > tau`` and (when ``balanced``) the top
    ``N_m = min_c |C_c|`` of each.  With ``balanced=False`` every confident
    instance is kept (plain thresholding)."""
    probs = np.asarray(probs, dtype=np.float64)
    n, k = probs.shape
    conf = probs.max(axis=1)
    hard = probs.argmax(axis=1)
    confident = []
    for c in range(k):
        ids = np.flatnonzero((conf > tau) & (hard == c))
        order = np.lexsort((ids, -conf[ids]))
        confident.append(ids[order])
    n_min = min(len(c) for c in confident) if k else 0
    if balanced:
        chosen = [c[:n_min] for c in confident]
    else:
        chosen = confident
    ids = np.concatenate(chosen).astype(int) if chosen else np.zeros(0, dtype=int)
    return Selection(confident, int(n_min), ids, hard[ids])


# ---------------------------------------------------------------------------
# prototypes


@dataclass
class PrototypeMatrix:
    """Column ``c`` is the prototype of class ``c``; ``valid[c]`` is False for
    novel classes whose latest confident set was empty."""

    columns: np.ndarray  # (d, |Y|)
    valid: np.ndarray

    @classmethod
    def zeros(cls, d, num_classes):
        return cls(np.zeros((d, num_classes)), np.zeros(num_classes, dtype=bool))

    @property
    def num_classes(self):
        return self.columns.shape[1]

    def lookup(self, classes) -> np.ndarray:
        """Prompt rows ``P @ onehot(c)`` for each class id, shape ``(n, d)``."""
        return self.columns[:, np.asarray(classes, dtype=int)].T.copy()


def _mean_rows(f):
    # shifted by the first row so identical members reproduce it exactly
    return f[0] + (f - f[0]).mean(axis=0)


def compute_prototypes_seen(feat_l, y_l, seen) -> np.ndarray:
    """Class-conditional mean features of the labelled data, one row per seen class."""
    feat_l = np.asarray(feat_l, dtype=np.float64)
    y_l = np.asarray(y_l)
    out = np.empty((len(seen), feat_l.shape[1]))
    for i, s in enumerate(seen):
        members = y_l == s
        if not members.any():
            raise DataError(f"seen class {s} has no labelled instances")
        out[i] = _mean_rows(feat_l[members])
    return out


def compute_prototypes_novel(feat_u, probs, tau, novel, previous=None):
    """Mean features of confidently predicted unlabelled instances per novel class.

    Classes with an empty confident set keep their ``previous`` row (zeros if
    none) and are reported invalid.  Returns ``(rows, valid_mask)``.
    """
    feat_u = np.asarray(feat_u, dtype=np.float64)
    probs = np.asarray(probs)
    conf, hard = probs.max(axis=1), probs.argmax(axis=1)
    d = feat_u.shape[1]
    rows = np.zeros((len(novel), d)) if previous is None else np.array(previous, dtype=np.float64)
    valid = np.zeros(len(novel), dtype=bool)
    for i, n in enumerate(novel):
        members = (conf > tau) & (hard == n)
        if members.any():
            rows[i] = _mean_rows(feat_u[members])
            valid[i] = True
    return rows, valid


def assemble_prototype_matrix(seen_rows, novel_rows, novel_valid, seen, novel) -> PrototypeMatrix:
    seen, novel = list(seen), list(novel)
    k = len(seen) + len(novel)
    d = seen_rows.shape[1] if len(seen) else novel_rows.shape[1]
    cols = np.zeros((d, k))
    valid = np.zeros(k, dtype=bool)
    for i, s in enumerate(seen):
        cols[:, s] = seen_rows[i]
        valid[s] = True
    for i, n in enumerate(novel):
        cols[:, n] = novel_rows[i]
        valid[n] = bool(novel_valid[i])
    return PrototypeMatrix(cols, valid)


def refresh_prototypes(P: PrototypeMatrix, feat_l, y_l, feat_u, pseudo: PseudoLabels, tau, seen, novel):
    seen, novel = list(seen), list(novel)
    seen_rows = compute_prototypes_seen(feat_l, y_l, seen)
    prev = P.columns[:, novel].T if P is not None else None
    novel_rows, novel_valid = compute_prototypes_novel(feat_u, pseudo.probs, tau, novel, prev)
    return assemble_prototype_matrix(seen_rows, novel_rows, novel_valid, seen, novel)
