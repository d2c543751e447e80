"""Mean-field variational inference for linear structural equation models.

The variational family is an independent Gaussian over the off-diagonal
entries of W̃. A sample W̃ = mean + scale * eps is projected to a DAG W, and
gradients reach the variational parameters through the analytic projection
Jacobian. Scales are parameterised as softplus(raw_scales).
"""
from dataclasses import asdict, dataclass, field
import hashlib
import json
import math

import numpy as np

from .errors import DimensionMismatch, NonFinite
from .metrics import PosteriorSummary
from .projection import (DEFAULT_THRESHOLD, PathSchedule, SparsityBudget, project_batch,
                         projection_vjp)

LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_FORMAT = "dagproj-checkpoint"
CHECKPOINT_VERSION = 1


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def offdiag_mask(p):
    return ~np.eye(p, dtype=bool)


def to_matrix(flat, p):
    """Place a flat vector of off-diagonal entries (row-major) into a p x p matrix."""
    M = np.zeros(np.shape(flat)[:-1] + (p, p))
    M[..., offdiag_mask(p)] = flat
    return M


def from_matrix(M):
    """Row-major off-diagonal entries of M, shape (..., p*p - p)."""
    M = np.asarray(M)
    return M[..., offdiag_mask(M.shape[-1])]


@dataclass
class MeanFieldGaussian:
    """Independent Gaussians with ``means`` and ``softplus(raw_scales)`` scales."""

    means: np.ndarray
    raw_scales: np.ndarray
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.means = np.array(self.means, dtype=np.float64).ravel()
        self.raw_scales = np.array(self.raw_scales, dtype=np.float64).ravel()
        if self.means.shape != self.raw_scales.shape:
            raise DimensionMismatch("means and raw_scales differ in length")

    @property
    def dim(self):
        return self.means.size

    @property
    def scales(self):
        return softplus(self.raw_scales)

    @classmethod
    def isotropic(cls, dim, mean=0.0, scale=1.0):
        """Every entry N(mean, scale^2)."""
        return cls(np.full(dim, float(mean)), np.full(dim, float(softplus_inverse(scale))))

    @classmethod
    def standard_prior(cls, p):
        """N(0, 1) over the p*p - p off-diagonal entries."""
        return cls.isotropic(p * p - p)

    def copy(self):
        return MeanFieldGaussian(self.means.copy(), self.raw_scales.copy())


@dataclass
class LinearSemLikelihood:
    """Gaussian linear SEM x = W^T x + eps with eps ~ N(0, noise_variance I)."""

    data: object
    noise_variance: float = 1.0

    def __post_init__(self):
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        X = _as_matrix(self.data)
        self.n, self.p = X.shape
        self.gram = X.T @ X
        self.trace = float(np.trace(self.gram))


@dataclass
class TrainConfig:
    """Optimizer and sampling settings shared by the linear and nonlinear fits."""

    learning_rate: float = 0.1
    samples_per_iter: int = 100
    max_iters: int = 2000
    elbo_patience: int = 100
    budget: SparsityBudget = field(default_factory=SparsityBudget)
    seed: int = 0
    noise_variance: float = 1.0
    hard_threshold: float = DEFAULT_THRESHOLD
    smoothing: float = 0.9
    refine: bool = True
    schedule: PathSchedule = field(default_factory=PathSchedule)

    def __post_init__(self):
        self.budget = SparsityBudget.coerce(self.budget)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.samples_per_iter < 1:
            raise ValueError("samples_per_iter must be at least 1")
        if self.max_iters < 0 or self.elbo_patience < 1:
            raise ValueError("max_iters must be >= 0 and elbo_patience >= 1")

    def as_dict(self):
        d = asdict(self)
        d["budget"] = _encode_lambda(self.budget.lam)
        return d

    def hash(self):
        return config_hash(self.as_dict())


def config_hash(obj):
    """Short SHA-256 of the canonical JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _as_matrix(data):
    X = getattr(data, "X", data)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"data must be an n x p matrix, got shape {X.shape}")
    return X


def log_likelihood(W, data, noise_variance=1.0):
    """Gaussian log-likelihood of the data under the linear SEM with weights W.

    Returns -(np/2) log(2 pi s2) - ||X - X W||_F^2 / (2 s2).
    """
    X = _as_matrix(data)
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (X.shape[1], X.shape[1]):
        raise DimensionMismatch(f"W has shape {W.shape}, data has {X.shape[1]} columns")
    n, p = X.shape
    R = X - X @ W
    return -0.5 * n * p * (LOG_2PI + math.log(noise_variance)) - np.sum(R * R) / (2 * noise_variance)


def _batch_loglik(W, lik):
    """Log-likelihood and its gradient for a stack of W, via the Gram matrix."""
    C = lik.gram
    s2 = lik.noise_variance
    CW = np.matmul(C, W)
    sq = lik.trace - 2.0 * np.sum(C * W, axis=(-2, -1)) + np.sum(W * CW, axis=(-2, -1))
    ll = -0.5 * lik.n * lik.p * (LOG_2PI + math.log(s2)) - sq / (2 * s2)
    grad = (C - CW) / s2
    return ll, grad


def kl_divergence(q, prior):
    """KL(q || prior) for independent Gaussians, summed over entries."""
    if q.dim != prior.dim:
        raise DimensionMismatch(f"q has {q.dim} entries, prior has {prior.dim}")
    sq, sp = q.scales, prior.scales
    r = (sq / sp) ** 2
    return float(0.5 * np.sum(r + ((q.means - prior.means) / sp) ** 2 - 1.0 - np.log(r)))


def kl_gradient(q, prior):
    """Gradient of the KL with respect to q.means and q.raw_scales."""
    sq, sp = q.scales, prior.scales
    gm = (q.means - prior.means) / sp ** 2
    gs = sq / sp ** 2 - 1.0 / sq
    return gm, gs * sigmoid(q.raw_scales)


def _project(Wt, config, step_scale=1.0):
    return project_batch(Wt, config.budget, config.schedule, config.hard_threshold, True,
                         config.refine, step_scale)


def _active_count(b):
    if b.refined:
        return None
    return np.count_nonzero(b.pre_threshold, axis=(-2, -1))


def elbo_and_gradient(q, prior, lik, config, eps):
    """Monte-Carlo ELBO and its gradient for the linear model.

    Parameters
    ----------
    eps : ndarray, shape (L, p, p)
        Standard-normal draws (the diagonal is ignored).

    Returns
    -------
    elbo : float
    grad_means, grad_raw : ndarray
    """
    p = lik.p
    if q.dim != p * p - p:
        raise DimensionMismatch(f"q has {q.dim} entries, expected {p * p - p}")
    M = to_matrix(q.means, p)
    S = to_matrix(q.scales, p)
    E = np.asarray(eps) * offdiag_mask(p)
    b = _project(M + S * E, config)
    ll, G = _batch_loglik(b.projected, lik)
    Gt = projection_vjp(b.projected, b.binding, G, _active_count(b))
    km, kr = kl_gradient(q, prior)
    gm = from_matrix(Gt.mean(axis=0)) - km
    gs = from_matrix((Gt * E).mean(axis=0))
    gr = gs * sigmoid(q.raw_scales) - kr
    return float(np.mean(ll)) - kl_divergence(q, prior), gm, gr


def estimate_elbo(q, prior, likelihood, config, eps=None):
    """Monte-Carlo estimate of the ELBO with ``config.samples_per_iter`` draws.

    ``eps`` fixes the standard-normal draws; otherwise they come from
    ``config.seed``.
    """
    p = likelihood.p
    if eps is None:
        rng = np.random.default_rng(config.seed)
        eps = rng.standard_normal((config.samples_per_iter, p, p))
    M = to_matrix(q.means, p)
    S = to_matrix(q.scales, p)
    b = _project(M + S * (eps * offdiag_mask(p)), config)
    ll, _ = _batch_loglik(b.projected, likelihood)
    return float(np.mean(ll)) - kl_divergence(q, prior)


class Adam:
    """Adam in ascent form over a list of arrays, updated in place."""

    def __init__(self, params, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(x) for x in params]
        self.v = [np.zeros_like(x) for x in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for x, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            x += self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def run_adam(q, grad_fn, config, log=None):
    """Shared training loop: Adam ascent with early stopping on a smoothed ELBO.

    ``grad_fn(q, rng)`` returns (elbo, grad_means, grad_raw). The returned
    q carries an ``info`` dict with the ELBO trace and iteration count.
    """
    q = q.copy()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    opt = Adam([q.means, q.raw_scales], lr=config.learning_rate)
    trace = []
    smooth = best = None
    stale = 0
    it = 0
    for it in range(1, config.max_iters + 1):
        elbo, gm, gr = grad_fn(q, rng)
        if not (np.isfinite(elbo) and np.all(np.isfinite(gm)) and np.all(np.isfinite(gr))):
            raise NonFinite(f"non-finite ELBO or gradient at iteration {it}", it,
                            {"means": q.means.copy(), "raw_scales": q.raw_scales.copy()})
        trace.append(elbo)
        opt.step([gm, gr])
        smooth = elbo if smooth is None else config.smoothing * smooth + (1 - config.smoothing) * elbo
        if best is None or smooth > best:
            best, stale = smooth, 0
        else:
            stale += 1
        if log is not None:
            log(it, elbo)
        if stale >= config.elbo_patience:
            break
    q.info = {"iterations": it, "elbo_trace": trace}
    return q


def fit(data, prior=None, config=None, log=None):
    """Fit the variational posterior for a linear SEM by stochastic ELBO ascent.

    Parameters
    ----------
    data : Dataset or ndarray, shape (n, p)
    prior : MeanFieldGaussian, optional
        Defaults to N(0, 1) on every off-diagonal entry. q starts here.
    config : TrainConfig, optional
    log : callable, optional
        Called as ``log(iteration, elbo)``.

    Returns
    -------
    MeanFieldGaussian
        With ``info["iterations"]`` and ``info["elbo_trace"]``.

    Raises
    ------
    NonFinite
        If the ELBO or a gradient stops being finite.
    """
    config = config or TrainConfig()
    lik = LinearSemLikelihood(data, config.noise_variance)
    if lik.n == 0:
        raise ValueError("data has no rows")
    p = lik.p
    prior = prior or MeanFieldGaussian.standard_prior(p)
    L = config.samples_per_iter

    def grad_fn(q, rng):
        return elbo_and_gradient(q, prior, lik, config, rng.standard_normal((L, p, p)))

    return run_adam(prior, grad_fn, config, log)


def sample_graphs(q, p, budget=None, count=100, seed=0, schedule=None,
                  hard_threshold=DEFAULT_THRESHOLD, refine=True):
    """Projected DAG samples from q, shape (count, p, p)."""
    from .distribution import BaseGaussian

    base = BaseGaussian(to_matrix(q.means, p), to_matrix(q.scales, p) + np.eye(p), seed)
    b = project_batch(base.draw(count), SparsityBudget.coerce(budget), schedule or PathSchedule(),
                      hard_threshold, True, refine)
    return b.projected


def posterior_summary(q, budget=None, count=100, seed=0, p=None, schedule=None,
                      hard_threshold=DEFAULT_THRESHOLD):
    """Draw ``count`` DAGs from q and tabulate edge frequencies.

    Returns
    -------
    PosteriorSummary
        ``samples`` holds the boolean supports; ``weights`` (an extra
        attribute) holds the weighted samples.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if p is None:
        p = int(round((1 + math.sqrt(1 + 4 * q.dim)) / 2))
    Ws = sample_graphs(q, p, budget, count, seed, schedule, hard_threshold)
    summary = PosteriorSummary.from_samples(Ws)
    summary.weights = Ws
    return summary


@dataclass
class LambdaSelection:
    """Outcome of the validation search over l1 radii."""

    best_lambda: float
    posterior: MeanFieldGaussian
    scores: list
    lambda_max: float


def split_rows(n, fraction=0.1, seed=0):
    """Random train/validation row split with round(fraction * n) validation rows."""
    n_val = int(math.floor(fraction * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def lambda_grid(lambda_max, count=10):
    """``count`` evenly spaced radii from 0 to ``lambda_max``."""
    return [float(x) for x in np.linspace(0.0, lambda_max, count)]


def select_lambda(data, prior=None, config=None, grid=None, grid_size=10, val_fraction=0.1,
                  eval_samples=100, fit_fn=None, score_fn=None, log=None):
    """Choose the l1 radius by held-out log-likelihood.

    Without an explicit ``grid``, an unconstrained fit sets ``lambda_max`` to
    the mean l1 norm of its posterior samples and the grid is ``grid_size``
    values from 0 to ``lambda_max``. Each candidate is fit on the training
    rows and scored by the mean validation log-likelihood over
    ``eval_samples`` posterior draws.

    ``fit_fn(train, prior, config)`` and ``score_fn(q, val, config, seed)``
    default to the linear model.
    """
    config = config or TrainConfig()
    X = _as_matrix(data)
    train_idx, val_idx = split_rows(len(X), val_fraction, config.seed)
    train, val = X[train_idx], X[val_idx]
    if len(val) == 0:
        val = train
    fit_fn = fit_fn or fit
    score_fn = score_fn or _linear_score
    lambda_max = math.nan
    fits = {}
    if grid is None:
        cfg = _with_budget(config, math.inf)
        q_inf = fit_fn(train, prior, cfg)
        fits[math.inf] = q_inf
        Ws = _posterior_weights(q_inf, cfg, eval_samples)
        lambda_max = float(np.mean(np.abs(Ws).sum(axis=(-2, -1))))
        grid = lambda_grid(lambda_max, grid_size)
    scores = []
    best = None
    for lam in grid:
        cfg = _with_budget(config, lam)
        q = fits.get(lam)
        if q is None:
            q = fit_fn(train, prior, cfg)
        score = score_fn(q, val, cfg, config.seed + 1)
        scores.append({"lambda": float(lam), "score": float(score),
                       "iterations": int(q.info.get("iterations", 0))})
        if log is not None:
            log(lam, score)
        if best is None or score > best[0]:
            best = (score, lam, q)
    return LambdaSelection(float(best[1]), best[2], scores, lambda_max)


def _with_budget(config, lam):
    d = {k: getattr(config, k) for k in config.__dataclass_fields__}
    d["budget"] = SparsityBudget(float(lam))
    return TrainConfig(**d)


def _posterior_weights(q, config, count):
    fn = q.info.get("sampler")
    if fn is not None:
        return fn(count, config)
    p = int(round((1 + math.sqrt(1 + 4 * q.dim)) / 2))
    return sample_graphs(q, p, config.budget, count, config.seed + 1, config.schedule,
                         config.hard_threshold, config.refine)


def _linear_score(q, val, config, seed, count=100):
    p = val.shape[1]
    Ws = sample_graphs(q, p, config.budget, count, seed, config.schedule, config.hard_threshold,
                       config.refine)
    return float(np.mean([log_likelihood(W, val, config.noise_variance) for W in Ws]))


def _encode_lambda(lam):
    return "inf" if math.isinf(lam) else float(lam)


def _decode_lambda(v):
    return math.inf if v == "inf" else float(v)


@dataclass
class Checkpoint:
    """Contents of a posterior checkpoint file."""

    posterior: MeanFieldGaussian
    budget: SparsityBudget
    seed: int
    config_hash: str
    p: int
    mode: str = "linear"
    architecture: dict | None = None
    prior: MeanFieldGaussian | None = None
    node_names: list | None = None
    config: dict | None = None


def save_checkpoint(path, ckpt):
    """Write a checkpoint as JSON.

    Layout: ``format``, ``version``, ``mode``, ``p``, ``architecture``,
    ``node_names``, ``budget`` (number or "inf"), ``seed``, ``config_hash``,
    ``config``, ``means``, ``raw_scales`` and optionally ``prior_means`` and
    ``prior_raw_scales``. Floats are written in shortest round-trip form, so
    loading reproduces every value bit for bit.
    """
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "mode": ckpt.mode,
        "p": int(ckpt.p),
        "architecture": ckpt.architecture,
        "node_names": ckpt.node_names,
        "budget": _encode_lambda(ckpt.budget.lam),
        "seed": int(ckpt.seed),
        "config_hash": ckpt.config_hash,
        "config": ckpt.config,
        "means": [float(x) for x in ckpt.posterior.means],
        "raw_scales": [float(x) for x in ckpt.posterior.raw_scales],
    }
    if ckpt.prior is not None:
        obj["prior_means"] = [float(x) for x in ckpt.prior.means]
        obj["prior_raw_scales"] = [float(x) for x in ckpt.prior.raw_scales]
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    """Read a file written by :func:`save_checkpoint`."""
    from .errors import ParseError

    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc.msg}", exc.lineno, exc.colno) from exc
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: not a checkpoint file")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {obj.get('version')}")
    prior = None
    if "prior_means" in obj:
        prior = MeanFieldGaussian(obj["prior_means"], obj["prior_raw_scales"])
    return Checkpoint(
        posterior=MeanFieldGaussian(obj["means"], obj["raw_scales"]),
        budget=SparsityBudget(_decode_lambda(obj["budget"])),
        seed=int(obj["seed"]),
        config_hash=obj["config_hash"],
        p=int(obj["p"]),
        mode=obj.get("mode", "linear"),
        architecture=obj.get("architecture"),
        prior=prior,
        node_names=obj.get("node_names"),
        config=obj.get("config"),
    )
