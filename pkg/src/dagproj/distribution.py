"""Distributions over DAGs induced by projecting a continuous base draw."""
from dataclasses import dataclass

import numpy as np

from .projection import (DEFAULT_THRESHOLD, PathSchedule, ProjectionResult, SparsityBudget,
                         _active_set, project_batch)


@dataclass
class BaseGaussian:
    """Independent Gaussians over the off-diagonal entries of W̃.

    Parameters
    ----------
    mean, scale : ndarray, shape (p, p)
        Diagonals are ignored; off-diagonal scales must be positive.
    seed : int
        Master seed. Sample i always uses the i-th child stream, so results
        do not depend on how many samples are drawn together.
    """

    mean: np.ndarray
    scale: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.mean = np.array(self.mean, dtype=np.float64)
        self.scale = np.array(self.scale, dtype=np.float64)
        if self.mean.ndim != 2 or self.mean.shape[0] != self.mean.shape[1]:
            raise ValueError("mean must be square")
        if self.scale.shape != self.mean.shape:
            raise ValueError("scale must have the same shape as mean")
        off = ~np.eye(self.p, dtype=bool)
        if not np.all(self.scale[off] > 0):
            raise ValueError("off-diagonal scales must be positive")

    @property
    def p(self):
        return self.mean.shape[0]

    @classmethod
    def standard(cls, p, seed=0):
        """Mean zero, scale one."""
        return cls(np.zeros((p, p)), np.ones((p, p)), seed)

    def draw(self, count):
        """Draw ``count`` matrices W̃, shape (count, p, p), zero diagonal."""
        streams = np.random.SeedSequence(self.seed).spawn(count)
        eps = np.stack([np.random.default_rng(s).standard_normal((self.p, self.p))
                        for s in streams])
        Wt = self.mean + self.scale * eps
        Wt[:, np.arange(self.p), np.arange(self.p)] = 0.0
        return Wt


@dataclass
class DagSample:
    """A projected draw and the matrix it came from."""

    graph: ProjectionResult
    pre_image: np.ndarray


class SampleBag(list):
    """List of :class:`DagSample` with a count of retried projections."""

    retries = 0


def sample_dag(base, budget=None, count=1, schedule=None, hard_threshold=DEFAULT_THRESHOLD,
               ensure_acyclic=True, refine=True, step_scale=1.0):
    """Draw ``count`` DAGs by projecting draws from ``base``.

    Returns
    -------
    SampleBag
        Every graph is exactly acyclic and inside the l1 ball. ``retries``
        counts projections that needed the fallback solver.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    budget = SparsityBudget.coerce(budget)
    Wt = base.draw(count)
    b = project_batch(Wt, budget, schedule or PathSchedule(), hard_threshold, ensure_acyclic,
                      refine, step_scale)
    bag = SampleBag()
    for i in range(count):
        W = b.projected[i]
        res = ProjectionResult(W, b.pre_threshold[i], _active_set(W), bool(b.binding[i]),
                               0.5 * float(np.sum((Wt[i] - W) ** 2)), b.refined,
                               int(b.iterations[i]))
        bag.append(DagSample(res, Wt[i]))
    bag.retries = b.retries
    return bag
