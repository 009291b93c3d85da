"""Hungarian class alignment and seen / unseen / all accuracy."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError

PROTOCOLS = ("seen-fixed", "all-matched")


@dataclass
class Assignment:
    perm: np.ndarray  # perm[row] = column
    cost: float


def _solve(c: np.ndarray):
    """Shortest-augmenting-path Hungarian method, O(n^3).  Returns ``perm``."""
    n = c.shape[0]
    inf = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[col] = row matched to col (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(cand.argmin()) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    perm = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    return perm


def _opt_cost(c):
    if c.shape[0] == 0:
        return 0.0
    perm = _solve(c)
    return float(c[np.arange(c.shape[0]), perm].sum())


def hungarian_match(cost) -> Assignment:
    """Minimum-cost perfect matching of a square cost matrix.

    Among optimal matchings the lexicographically smallest ``perm`` is
    returned: rows are fixed one at a time to the lowest column that still
    admits an optimal completion.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise UsageError(f"cost matrix must be square, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise UsageError("cost matrix contains non-finite entries")
    n = c.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=int), 0.0)
    best = _opt_cost(c)
    tol = 1e-9 * max(1.0, abs(best), float(np.abs(c).max()))
    perm = np.empty(n, dtype=int)
    rows = list(range(n))
    cols = list(range(n))
    fixed = 0.0
    for i in range(n):
        rest_rows = rows[1:]
        for j in cols:
            rest_cols = [x for x in cols if x != j]
            sub = c[np.ix_(rest_rows, rest_cols)]
            if fixed + c[i, j] + _opt_cost(sub) <= best + tol:
                perm[i] = j
                fixed += c[i, j]
                cols = rest_cols
                break
        rows = rest_rows
    return Assignment(perm, float(c[np.arange(n), perm].sum()))


# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    seen_acc: float
    unseen_acc: float
    all_acc: float
    per_class: np.ndarray
    confusion: np.ndarray  # rows: true class, columns: aligned prediction
    mapping: np.ndarray  # mapping[predicted id] = aligned id
    protocol: str

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "seen_acc": self.seen_acc,
            "unseen_acc": self.unseen_acc,
            "all_acc": self.all_acc,
            "per_class_acc": [float(v) for v in self.per_class],
            "confusion": self.confusion.astype(int).tolist(),
            "mapping": self.mapping.astype(int).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [
            f"protocol: {self.protocol}",
            f"{'Classes':<8} {'Accuracy (%)':>12}",
            f"{'Seen':<8} {100 * self.seen_acc:>12.1f}",
            f"{'Unseen':<8} {100 * self.unseen_acc:>12.1f}",
            f"{'All':<8} {100 * self.all_acc:>12.1f}",
        ]
        return "\n".join(lines) + "\n"


def _counts(pred, truth, rows, cols):
    m = np.zeros((len(rows), len(cols)))
    ri = {c: i for i, c in enumerate(rows)}
    ci = {c: i for i, c in enumerate(cols)}
    for p, t in zip(pred, truth):
        if p in ri and t in ci:
            m[ri[p], ci[t]] += 1
    return m


def align_predictions(pred, truth, seen, novel, protocol="seen-fixed") -> np.ndarray:
    """Map predicted class ids onto ground-truth ids.

    ``seen-fixed`` keeps seen ids and matches novel predicted ids to novel
    true ids; ``all-matched`` matches over every class.
    """
    if protocol not in PROTOCOLS:
        raise UsageError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    seen, novel = [int(s) for s in seen], [int(n) for n in novel]
    k = len(seen) + len(novel)
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    mapping = np.arange(k)
    group = novel if protocol == "seen-fixed" else seen + novel
    group = sorted(group)
    if group:
        m = _counts(pred, truth, group, group)
        assign = hungarian_match(-m)
        for r, c in enumerate(assign.perm):
            mapping[group[r]] = group[c]
    return mapping


def accuracy_report(pred, truth, seen, novel, protocol="seen-fixed") -> EvalReport:
    seen, novel = [int(s) for s in seen], [int(n) for n in novel]
    k = len(seen) + len(novel)
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if truth.size and (truth.min() < 0 or truth.max() >= k):
        raise DataError(f"test label outside the class set 0..{k - 1}")
    mapping = align_predictions(pred, truth, seen, novel, protocol)
    aligned = mapping[pred]
    conf = np.zeros((k, k))
    np.add.at(conf, (truth, aligned), 1)
    correct = np.diag(conf)
    support = conf.sum(axis=1)
    per_class = np.divide(correct, support, out=np.zeros(k), where=support > 0)

    def group_acc(ids):
        tot = support[ids].sum()
        return float(correct[ids].sum() / tot) if tot else 0.0

    return EvalReport(
        seen_acc=group_acc(seen),
        unseen_acc=group_acc(novel),
        all_acc=float(correct.sum() / support.sum()) if support.sum() else 0.0,
        per_class=per_class,
        confusion=conf,
        mapping=mapping,
        protocol=protocol,
    )


def evaluate(x, y, bundle, seen, novel, protocol="seen-fixed") -> EvalReport:
    """Predict ``argmax h(f(x))`` and score it after class alignment."""
    pred = bundle.predict_proba(x).argmax(axis=1)
    return accuracy_report(pred, y, seen, novel, protocol)
