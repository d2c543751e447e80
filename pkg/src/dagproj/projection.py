"""Projection of a weighted graph onto sparse weighted DAGs.

The projection of W̃ is the nearest matrix (in Frobenius norm) whose support
is acyclic and whose l1 norm is at most lambda. It is computed in two steps:

1. a path-following solve of min_W mu/2 ||W̃ - W||^2 + h(W) for a decreasing
   sequence of mu, warm-started from W = 0, which drives W to a DAG;
2. a Euclidean projection onto the l1 ball, followed by a hard threshold.

By default the kept support is then refit exactly (``refine=True``): the
surviving entries are replaced by the l1-ball projection of W̃ restricted to
that support, which is the exact minimiser for the chosen DAG.
"""
from dataclasses import dataclass, field
from functools import lru_cache
import itertools
import math

import numpy as np

from . import _kernels
from .errors import DivergedInnerSolve, EmptyActiveSet, TooLarge
from .matrix import check_adjacency

INF = math.inf
DEFAULT_THRESHOLD = 0.1
BRUTE_FORCE_MAX_P = 5


@dataclass(frozen=True)
class PathSchedule:
    """Settings for the path-following acyclicity solve.

    Attributes
    ----------
    mu_initial : float
        Weight of the distance term in the first stage.
    decay : float
        Factor in (0, 1) applied to mu after each stage.
    stages : int
        Number of stages T.
    inner_max_iters : int
        Iteration cap per stage.
    inner_tolerance : float
        Stop a stage when the gradient max-norm falls below this.
    inner_step : float or None
        For ``"gradient"`` the learning rate (default 1/p, scaled by the
        caller's step scale). For ``"newton"`` the initial damping (default 1).
    inner_method : {"newton", "gradient"}
        ``"newton"`` scales the gradient by the diagonal of the Hessian and
        backtracks on a sufficient-decrease test; ``"gradient"`` is plain
        gradient descent that halves its step on leaving the domain.
    """

    mu_initial: float = 1.0
    decay: float = 0.5
    stages: int = 10
    inner_max_iters: int = 5000
    inner_tolerance: float = 1e-6
    inner_step: float | None = None
    inner_method: str = "newton"

    def __post_init__(self):
        if not self.mu_initial > 0:
            raise ValueError("mu_initial must be positive")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.stages < 1:
            raise ValueError("stages must be at least 1")
        if self.inner_max_iters < 1:
            raise ValueError("inner_max_iters must be positive")
        if not self.inner_tolerance > 0:
            raise ValueError("inner_tolerance must be positive")
        if self.inner_step is not None and not self.inner_step > 0:
            raise ValueError("inner_step must be positive")
        if self.inner_method not in ("newton", "gradient"):
            raise ValueError(f"unknown inner_method {self.inner_method!r}")

    def mus(self):
        return self.mu_initial * self.decay ** np.arange(self.stages, dtype=np.float64)

    def step_for(self, p, step_scale=1.0):
        if self.inner_step is not None:
            return float(self.inner_step)
        if self.inner_method == "newton":
            return 1.0
        return step_scale / p


@dataclass(frozen=True)
class SparsityBudget:
    """Radius of the l1 ball; ``math.inf`` means unconstrained."""

    lam: float = INF

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")

    @property
    def bounded(self):
        return math.isfinite(self.lam)

    def kernel_value(self):
        return float(self.lam) if self.bounded else -1.0

    @classmethod
    def coerce(cls, budget):
        if isinstance(budget, cls):
            return budget
        if budget is None:
            return cls()
        return cls(float(budget))


@dataclass
class ProjectionResult:
    """Output of :func:`project` or :func:`brute_force_project`.

    Attributes
    ----------
    projected : ndarray
        The acyclic, l1-feasible matrix W.
    pre_threshold : ndarray
        Output of the l1 step before hard thresholding.
    active_set : list of (int, int)
        Nonzero support of ``projected``.
    binding : bool
        Whether the l1 constraint is active.
    objective : float
        1/2 ||W̃ - W||_F^2.
    refined : bool
        Whether the kept support was refit exactly.
    iterations : int
        Inner iterations used by the path-following solve.
    """

    projected: np.ndarray
    pre_threshold: np.ndarray
    active_set: list
    binding: bool
    objective: float
    refined: bool = True
    iterations: int = 0


@dataclass
class ProjectionJacobian:
    """Derivatives of the projection at a solution.

    ``d_w_d_wtilde`` maps (j, k, q, r) to dW_jk / dW̃_qr and lists only the
    structurally nonzero entries; ``d_w_d_lambda`` is dense.
    """

    d_w_d_wtilde: dict
    d_w_d_lambda: np.ndarray
    p: int = field(default=0)

    def dense(self):
        """The full (p*p, p*p) Jacobian with row-major vectorization."""
        p = self.p
        J = np.zeros((p * p, p * p))
        for (j, k, q, r), v in self.d_w_d_wtilde.items():
            J[j * p + k, q * p + r] = v
        return J


@dataclass
class BatchProjection:
    """Arrays produced by :func:`project_batch` (leading axis = sample)."""

    projected: np.ndarray
    pre_threshold: np.ndarray
    binding: np.ndarray
    iterations: np.ndarray
    retries: int
    refined: bool


def _method_code(schedule):
    return _kernels.METHOD_NEWTON if schedule.inner_method == "newton" else _kernels.METHOD_GRADIENT


def acyclicity_project(W_tilde, schedule=None, step_scale=1.0):
    """Path-following solve that drives W̃ onto an acyclic matrix.

    Parameters
    ----------
    W_tilde : array_like, shape (p, p)
    schedule : PathSchedule, optional
    step_scale : float
        Numerator of the default gradient step ``step_scale / p``.

    Returns
    -------
    ndarray
        The last stage's iterate Ŵ. Its support is only numerically acyclic;
        the thresholding in :func:`project` makes it exact.

    Raises
    ------
    DivergedInnerSolve
        If backtracking cannot keep the iterate inside the domain.
    """
    schedule = schedule or PathSchedule()
    Wt = np.ascontiguousarray(check_adjacency(W_tilde, "W_tilde"))
    mus = schedule.mus()
    step = schedule.step_for(Wt.shape[0], step_scale)
    if schedule.inner_method == "newton":
        W, _, status = _kernels.newton_solve(
            Wt, mus, schedule.inner_tolerance, schedule.inner_max_iters, step)
    else:
        W, _, status = _kernels.gradient_solve(
            Wt, mus, step, schedule.inner_tolerance, schedule.inner_max_iters)
    if status != _kernels.OK:
        raise DivergedInnerSolve("inner solve left the domain and backtracking failed")
    return W


def l1_project(W_hat, budget=None):
    """Euclidean projection onto the l1 ball of radius lambda.

    Soft-thresholds every entry by the smallest theta >= 0 that makes the
    l1 norm at most lambda. Inputs already inside the ball are returned
    unchanged.

    Examples
    --------
    >>> l1_project([[0, 3], [1, 0]], 2.0)
    array([[0., 2.],
           [0., 0.]])
    """
    budget = SparsityBudget.coerce(budget)
    V = np.ascontiguousarray(np.asarray(W_hat, dtype=np.float64))
    out, _ = _kernels.l1_ball(V, budget.kernel_value())
    return out


def _active_set(W):
    return [(int(j), int(k)) for j, k in zip(*np.nonzero(W))]


def project_batch(W_tildes, budget=None, schedule=None, hard_threshold=DEFAULT_THRESHOLD,
                  ensure_acyclic=True, refine=True, step_scale=1.0):
    """Project a stack of matrices independently.

    Parameters
    ----------
    W_tildes : array_like, shape (L, p, p)
    budget : SparsityBudget or float, optional
    schedule : PathSchedule, optional
    hard_threshold : float
        Entries below this magnitude are zeroed after the l1 step.
    ensure_acyclic : bool
        Raise the threshold further when needed for an exactly acyclic
        support.
    refine : bool
        Refit the kept support exactly.
    step_scale : float
        Numerator of the default gradient step.

    Returns
    -------
    BatchProjection

    Notes
    -----
    Items are independent, so results do not depend on batch composition. A
    failed Newton solve is retried once with plain gradient descent.
    """
    budget = SparsityBudget.coerce(budget)
    schedule = schedule or PathSchedule()
    if hard_threshold < 0:
        raise ValueError("hard_threshold must be non-negative")
    Wts = np.ascontiguousarray(np.asarray(W_tildes, dtype=np.float64))
    if Wts.ndim != 3 or Wts.shape[1] != Wts.shape[2]:
        raise ValueError(f"expected shape (L, p, p), got {Wts.shape}")
    p = Wts.shape[1]
    mus = schedule.mus()
    Ws, pres, binding, iters, status = _kernels.project_batch(
        Wts, mus, schedule.inner_tolerance, schedule.inner_max_iters, _method_code(schedule),
        schedule.step_for(p, step_scale), budget.kernel_value(), float(hard_threshold),
        bool(ensure_acyclic), bool(refine))
    bad = np.flatnonzero(status != _kernels.OK)
    retries = 0
    if bad.size:
        retries = int(bad.size)
        fallback = PathSchedule(schedule.mu_initial, schedule.decay, schedule.stages,
                                schedule.inner_max_iters, schedule.inner_tolerance, None,
                                "gradient")
        W2, P2, B2, I2, S2 = _kernels.project_batch(
            np.ascontiguousarray(Wts[bad]), mus, schedule.inner_tolerance,
            schedule.inner_max_iters, _kernels.METHOD_GRADIENT, fallback.step_for(p, step_scale),
            budget.kernel_value(), float(hard_threshold), bool(ensure_acyclic), bool(refine))
        if np.any(S2 != _kernels.OK):
            raise DivergedInnerSolve(
                f"{int(np.sum(S2 != _kernels.OK))} of {len(Wts)} projections diverged after retry")
        Ws[bad], pres[bad], binding[bad], iters[bad] = W2, P2, B2, iters[bad] + I2
    return BatchProjection(Ws, pres, binding, iters, retries, bool(refine))


def project(W_tilde, budget=None, schedule=None, hard_threshold=DEFAULT_THRESHOLD,
            ensure_acyclic=True, refine=True, step_scale=1.0):
    """Project W̃ onto acyclic matrices inside the l1 ball.

    See :func:`project_batch` for the parameters.

    Returns
    -------
    ProjectionResult
        ``projected`` is exactly acyclic and satisfies ||W||_1 <= lambda.

    Examples
    --------
    >>> r = project([[0, 1.0], [0.2, 0]], hard_threshold=0.0)
    >>> r.active_set
    [(0, 1)]
    """
    Wt = check_adjacency(W_tilde, "W_tilde")
    b = project_batch(Wt[None], budget, schedule, hard_threshold, ensure_acyclic, refine,
                      step_scale)
    W = b.projected[0]
    return ProjectionResult(
        projected=W,
        pre_threshold=b.pre_threshold[0],
        active_set=_active_set(W),
        binding=bool(b.binding[0]),
        objective=0.5 * float(np.sum((Wt - W) ** 2)),
        refined=b.refined,
        iterations=int(b.iterations[0]),
    )


@lru_cache(maxsize=None)
def dag_supports(p):
    """All acyclic binary supports on p labelled nodes.

    Returns a read-only bool array of shape (m, p, p) in lexicographic order
    of the row-major vectorized supports (so index 0 is the empty graph).
    """
    if p > BRUTE_FORCE_MAX_P:
        raise TooLarge(f"enumeration is limited to p <= {BRUTE_FORCE_MAX_P}, got {p}")
    nbits = p * p
    codes = set()
    for order in itertools.permutations(range(p)):
        pos = [0] * p
        for rank, node in enumerate(order):
            pos[node] = rank
        bits = [j * p + k for j in range(p) for k in range(p) if pos[j] < pos[k]]
        weights = [1 << (nbits - 1 - b) for b in bits]
        for mask in range(1 << len(bits)):
            code = 0
            for i, w in enumerate(weights):
                if mask >> i & 1:
                    code |= w
            codes.add(code)
    ordered = sorted(codes)
    shifts = np.arange(nbits - 1, -1, -1, dtype=np.int64)
    arr = ((np.array(ordered, dtype=np.int64)[:, None] >> shifts) & 1).astype(bool)
    arr = arr.reshape(-1, p, p)
    arr.setflags(write=False)
    return arr


def _l1_rows(V, lam):
    """Row-wise l1-ball projection of V, shape (m, n). Returns (out, theta)."""
    if not math.isfinite(lam):
        return V.copy(), np.zeros(len(V))
    a = np.abs(V)
    total = a.sum(axis=1)
    v = -np.sort(-a, axis=1)
    cs = np.cumsum(v, axis=1)
    j = np.arange(1, V.shape[1] + 1)
    cond = v * j > cs - lam
    cond[:, 0] = True
    jmax = V.shape[1] - np.argmax(cond[:, ::-1], axis=1)
    theta = (cs[np.arange(len(V)), jmax - 1] - lam) / jmax
    theta = np.where(total <= lam, 0.0, theta)
    if lam == 0.0:
        theta = np.where(total > 0, a.max(axis=1), 0.0)
    out = np.sign(V) * np.maximum(a - theta[:, None], 0.0)
    return out, theta


def brute_force_project(W_tilde, budget=None):
    """Exact projection by enumerating every acyclic support (p <= 5).

    For each support S the convex problem min ||W̃ - S∘V||^2 s.t.
    ||V||_1 <= lambda is solved by an l1-ball projection of the masked
    entries. Ties go to the lexicographically smallest support.

    Raises
    ------
    TooLarge
        If p > 5.
    """
    budget = SparsityBudget.coerce(budget)
    Wt = check_adjacency(W_tilde, "W_tilde")
    p = Wt.shape[0]
    S = dag_supports(p)
    masked = (S * Wt).reshape(len(S), -1)
    cand, theta = _l1_rows(masked, budget.lam)
    obj = 0.5 * np.sum((Wt.reshape(1, -1) - cand) ** 2, axis=1)
    best = int(np.argmin(obj))
    W = cand[best].reshape(p, p)
    return ProjectionResult(
        projected=W,
        pre_threshold=W.copy(),
        active_set=_active_set(W),
        binding=bool(theta[best] > 0 or budget.lam == 0.0),
        objective=float(obj[best]),
        refined=True,
    )


def _active_count(W, pre, refined):
    if refined or pre is None:
        return int(np.count_nonzero(W))
    return int(np.count_nonzero(pre))


def projection_jacobian(result, budget=None):
    """Analytic derivatives of the projection at ``result``.

    On the active set A (nonzero entries of W), with s = sign(W):

    * binding l1 constraint: dW_jk/dW̃_qr = delta - s_qr s_jk / |A| and
      dW_jk/dlambda = s_jk / |A|;
    * otherwise: the identity on A and dW/dlambda = 0.

    Entries outside A have zero derivative. Hard thresholding is treated as
    transparent for the surviving entries; for unrefined results |A| counts
    the support before thresholding.

    Raises
    ------
    EmptyActiveSet
        If the constraint binds and A is empty (for instance lambda = 0). The
        derivative is then zero everywhere.
    """
    budget = SparsityBudget.coerce(budget)
    W = np.asarray(result.projected)
    p = W.shape[0]
    act = _active_set(W)
    binding = bool(result.binding) and budget.bounded
    if binding and not act:
        raise EmptyActiveSet("constraint binds with an empty active set")
    s = np.sign(W)
    dlam = np.zeros((p, p))
    entries = {}
    if binding:
        n = _active_count(W, result.pre_threshold, result.refined)
        for (j, k) in act:
            dlam[j, k] = s[j, k] / n
            for (q, r) in act:
                entries[(j, k, q, r)] = float((j, k) == (q, r)) - s[q, r] * s[j, k] / n
    else:
        for (j, k) in act:
            entries[(j, k, j, k)] = 1.0
    return ProjectionJacobian(entries, dlam, p)


def projection_vjp(projected, binding, G, active_count=None):
    """Pull a cotangent G on W back to W̃ through the projection.

    Parameters
    ----------
    projected : ndarray, shape (..., p, p)
    binding : bool or ndarray of bool, shape (...)
    G : ndarray, shape (..., p, p)
        Gradient of a scalar with respect to W.
    active_count : ndarray, optional
        |A| per item; defaults to the number of nonzero entries of W.

    Returns
    -------
    ndarray
        Gradient with respect to W̃, zero off the active set. Items whose
        constraint binds with an empty active set get a zero gradient.
    """
    W = np.asarray(projected)
    G = np.asarray(G)
    mask = W != 0
    s = np.sign(W)
    n = mask.sum(axis=(-2, -1)) if active_count is None else np.asarray(active_count)
    proj = np.sum(s * G, axis=(-2, -1))
    coef = np.where(np.asarray(binding) & (n > 0), proj / np.maximum(n, 1), 0.0)
    return np.where(mask, G - coef[..., None, None] * s, 0.0)
