"""Posterior-quality metrics against a ground-truth DAG.

All metrics treat a graph as its nonzero support and only look at ordered
off-diagonal pairs (j, k), meaning the directed edge j -> k.
"""
from dataclasses import dataclass
import csv
import json
import math

import numpy as np

from .errors import DegenerateTruth, DimensionMismatch, EmptySampleBag


@dataclass
class PosteriorSummary:
    """Edge probabilities and the sampled supports they came from.

    Attributes
    ----------
    edge_probs : ndarray, shape (p, p)
        Fraction of samples containing each edge; zero diagonal.
    samples : ndarray of bool, shape (L, p, p), or None
    """

    edge_probs: np.ndarray
    samples: np.ndarray | None = None

    @classmethod
    def from_samples(cls, samples):
        S = np.asarray(samples) != 0
        if S.ndim != 3 or S.shape[0] == 0:
            raise EmptySampleBag("need a non-empty (L, p, p) stack of samples")
        S = S.copy()
        idx = np.arange(S.shape[1])
        S[:, idx, idx] = False
        return cls(S.mean(axis=0), S)

    @property
    def p(self):
        return self.edge_probs.shape[0]


def _truth(summary, truth):
    T = np.asarray(truth) != 0
    if T.shape != summary.edge_probs.shape:
        raise DimensionMismatch(
            f"truth has shape {T.shape}, posterior has {summary.edge_probs.shape}")
    T = T.copy()
    np.fill_diagonal(T, False)
    return T


def _offdiag(p):
    return ~np.eye(p, dtype=bool)


def _samples(summary):
    if summary.samples is None or len(summary.samples) == 0:
        raise EmptySampleBag("this metric needs posterior samples")
    return np.asarray(summary.samples) != 0


def brier(summary, truth):
    """Sum over ordered pairs of (1[edge in truth] - p̂)^2, unnormalised."""
    T = _truth(summary, truth)
    off = _offdiag(summary.p)
    return float(np.sum((T[off].astype(float) - summary.edge_probs[off]) ** 2))


def shd(sample, truth):
    """Structural Hamming distance; a reversed edge counts once.

    Counts unordered node pairs whose edge state (none, j -> k, k -> j)
    differs between the two graphs.
    """
    A = np.asarray(sample) != 0
    B = np.asarray(truth) != 0
    if A.shape != B.shape:
        raise DimensionMismatch(f"shapes {A.shape} and {B.shape} differ")
    iu = np.triu_indices(A.shape[0], 1)
    fwd = A[iu] != B[iu]
    bwd = A.T[iu] != B.T[iu]
    return int(np.sum(fwd | bwd))


def f1(sample, truth):
    """F1 of directed-edge prediction; 0 for an empty sample against a non-empty truth."""
    A = np.asarray(sample) != 0
    B = np.asarray(truth) != 0
    off = _offdiag(A.shape[0])
    A, B = A & off, B & off
    denom = A.sum() + B.sum()
    if denom == 0:
        return 1.0
    return float(2 * np.sum(A & B) / denom)


def expected_shd(summary, truth):
    """Mean SHD over the posterior samples."""
    T = _truth(summary, truth)
    return float(np.mean([shd(S, T) for S in _samples(summary)]))


def expected_f1(summary, truth):
    """Mean F1 over the posterior samples."""
    T = _truth(summary, truth)
    return float(np.mean([f1(S, T) for S in _samples(summary)]))


def midranks(x):
    """1-based ranks with ties sharing the average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_from_scores(labels, scores):
    """Area under the ROC curve via the rank-sum statistic.

    Examples
    --------
    >>> auroc_from_scores([1, 0, 1, 0], [0.9, 0.8, 0.3, 0.1])
    0.75
    """
    y = np.asarray(labels).astype(bool)
    npos, nneg = int(y.sum()), int((~y).sum())
    if npos == 0 or nneg == 0:
        raise DegenerateTruth("need at least one positive and one negative pair")
    r = midranks(scores)
    return float((r[y].sum() - npos * (npos + 1) / 2) / (npos * nneg))


def auroc(summary, truth):
    """AUROC of scoring ordered pairs by p̂ against the true edges."""
    T = _truth(summary, truth)
    off = _offdiag(summary.p)
    return auroc_from_scores(T[off], summary.edge_probs[off])


def evaluate(summary, truth):
    """All four metrics as a dict; AUROC is NaN when the truth is degenerate."""
    out = {
        "brier": brier(summary, truth),
        "expected_shd": expected_shd(summary, truth),
        "expected_f1": expected_f1(summary, truth),
    }
    try:
        out["auroc"] = auroc(summary, truth)
    except DegenerateTruth:
        out["auroc"] = math.nan
    return out


def mean_stderr(values):
    """Mean and standard error (n - 1 denominator) of a sequence."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def aggregate(rows, group_keys, value_keys):
    """Group dict rows and report mean and stderr of each value.

    Returns a list of dicts with the group keys plus ``<value>_mean`` and
    ``<value>_stderr`` columns and a ``count``. Output order is sorted by the
    group key, so it does not depend on the order of ``rows``.
    """
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in group_keys), []).append(r)
    out = []
    for key in sorted(groups):
        members = groups[key]
        row = dict(zip(group_keys, key))
        row["count"] = len(members)
        for v in value_keys:
            row[v + "_mean"], row[v + "_stderr"] = mean_stderr([m[v] for m in members])
        out.append(row)
    return out


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_rows_csv(path, rows, header_comment=None):
    """Write dict rows to CSV, optionally behind a '#' comment line."""
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write("# " + header_comment + "\n")
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
