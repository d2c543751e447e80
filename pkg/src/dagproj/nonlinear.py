"""Nonlinear structural equation models built from per-node MLPs.

Node k is predicted by a one-hidden-layer ReLU network f_k whose first layer
has one weight row per input node j (row k is structurally absent). The
induced adjacency has entry (j, k) equal to the Euclidean norm of that row,
so j is a parent of k exactly when the row is nonzero.

Projecting a network onto DAGs projects its induced adjacency and rescales
each first-layer row to the projected norm; all other weights are copied.
"""
from dataclasses import dataclass
import math

import numpy as np

from .errors import DimensionMismatch
from .metrics import PosteriorSummary
from .projection import (DEFAULT_THRESHOLD, PathSchedule, SparsityBudget, project_batch,
                         projection_vjp)
from .variational import (LOG_2PI, MeanFieldGaussian, TrainConfig, _as_matrix, run_adam,
                          kl_divergence, kl_gradient, sigmoid)

DEFAULT_HIDDEN = 10
# numerator of the default gradient step 0.25 / p for network projections
STEP_SCALE = 0.25


@dataclass
class NodeNetwork:
    """Weights of p single-hidden-layer ReLU networks.

    Attributes
    ----------
    first : ndarray, shape (p, p, d)
        ``first[k, j]`` is the row of node k's first layer fed by x_j;
        ``first[k, k]`` is always zero.
    b1 : ndarray, shape (p, d)
        Hidden biases.
    w2 : ndarray, shape (p, d)
        Output weights.
    b2 : ndarray, shape (p,)
        Output biases.
    """

    first: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.first = np.array(self.first, dtype=np.float64)
        p, p2, d = self.first.shape
        if p != p2:
            raise DimensionMismatch("first layer must have shape (p, p, d)")
        self.first[np.arange(p), np.arange(p)] = 0.0
        self.b1 = np.array(self.b1, dtype=np.float64).reshape(p, d)
        self.w2 = np.array(self.w2, dtype=np.float64).reshape(p, d)
        self.b2 = np.array(self.b2, dtype=np.float64).reshape(p)

    @property
    def p(self):
        return self.first.shape[0]

    @property
    def hidden(self):
        return self.first.shape[2]

    @property
    def deeper_layers(self):
        """Everything the projection leaves alone."""
        return {"b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def zeros(cls, p, hidden=DEFAULT_HIDDEN):
        return cls(np.zeros((p, p, hidden)), np.zeros((p, hidden)), np.zeros((p, hidden)),
                   np.zeros(p))

    def architecture(self):
        return {"p": self.p, "hidden": self.hidden, "layers": [self.p, self.hidden, 1],
                "activation": "relu"}

    def copy(self):
        return NodeNetwork(self.first.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def parameter_count(p, hidden=DEFAULT_HIDDEN):
    return p * (p - 1) * hidden + 2 * p * hidden + p


def _first_mask(p):
    return ~np.eye(p, dtype=bool)


def unflatten(theta, p, hidden=DEFAULT_HIDDEN):
    """Split flat parameters, shape (..., D), into (first, b1, w2, b2) arrays."""
    theta = np.asarray(theta, dtype=np.float64)
    lead = theta.shape[:-1]
    nf = p * (p - 1) * hidden
    first = np.zeros(lead + (p, p, hidden))
    first[..., _first_mask(p), :] = theta[..., :nf].reshape(lead + (p * (p - 1), hidden))
    o = nf
    b1 = theta[..., o:o + p * hidden].reshape(lead + (p, hidden))
    o += p * hidden
    w2 = theta[..., o:o + p * hidden].reshape(lead + (p, hidden))
    o += p * hidden
    b2 = theta[..., o:o + p]
    return first, b1, w2, b2


def flatten(first, b1, w2, b2):
    """Inverse of :func:`unflatten`."""
    p = first.shape[-2]
    lead = first.shape[:-3]
    parts = [first[..., _first_mask(p), :].reshape(lead + (-1,)),
             b1.reshape(lead + (-1,)), w2.reshape(lead + (-1,)), b2.reshape(lead + (-1,))]
    return np.concatenate(parts, axis=-1)


def network_from_flat(theta, p, hidden=DEFAULT_HIDDEN):
    return NodeNetwork(*unflatten(theta, p, hidden))


def network_to_flat(net):
    return flatten(net.first, net.b1, net.w2, net.b2)


def _induced(first):
    # first[..., k, j, :] -> W[..., j, k]
    return np.swapaxes(np.sqrt(np.sum(first * first, axis=-1)), -1, -2)


def induced_adjacency(net):
    """Matrix of first-layer row norms: W[j, k] = ||first[k, j]||_2."""
    W = _induced(net.first)
    np.fill_diagonal(W, 0.0)
    return W


def _rescale(first_t, Wt, W):
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(Wt > 0, W / Wt, 0.0)
    return first_t * np.swapaxes(c, -1, -2)[..., None], c


def project_network(net_tilde, budget=None, schedule=None, hard_threshold=DEFAULT_THRESHOLD,
                    ensure_acyclic=True, refine=True, return_result=False):
    """Project a network so that its induced adjacency is a sparse DAG.

    Each first-layer row is multiplied by W_jk / W̃_jk, where W is the DAG
    projection of the induced adjacency W̃ (rows with W_jk = 0 become zero).
    Biases and output weights are copied unchanged.

    Returns
    -------
    NodeNetwork, or (NodeNetwork, BatchProjection) with ``return_result``.
    """
    Wt = induced_adjacency(net_tilde)
    b = project_batch(Wt[None], budget, schedule or PathSchedule(), hard_threshold,
                      ensure_acyclic, refine, STEP_SCALE)
    first, _ = _rescale(net_tilde.first, Wt, b.projected[0])
    out = NodeNetwork(first, net_tilde.b1.copy(), net_tilde.w2.copy(), net_tilde.b2.copy())
    return (out, b) if return_result else out


def _check_x(net, X):
    if X.shape[-1] != net.p:
        raise DimensionMismatch(f"input has {X.shape[-1]} coordinates, network has {net.p}")


def forward(net, x):
    """Evaluate f(x) for one p-vector or an (n, p) batch of rows."""
    X = np.asarray(x, dtype=np.float64)
    _check_x(net, X)
    Z = np.einsum("...j,kjh->...kh", X, net.first) + net.b1
    return np.einsum("...kh,kh->...k", np.maximum(Z, 0.0), net.w2) + net.b2


def nonlinear_log_likelihood(net, data, noise_variance=1.0):
    """Sum over rows of log N(x_i; f(x_i), noise_variance I)."""
    X = _as_matrix(data)
    _check_x(net, X)
    R = X - forward(net, X)
    n, p = X.shape
    return -0.5 * n * p * (LOG_2PI + math.log(noise_variance)) - np.sum(R * R) / (2 * noise_variance)


def _batch_loglik(first, b1, w2, b2, X, s2):
    """Log-likelihood of L networks and gradients with respect to their weights."""
    n, p = X.shape
    Z = np.einsum("ij,lkjh->likh", X, first) + b1[:, None]
    H = np.maximum(Z, 0.0)
    F = np.einsum("likh,lkh->lik", H, w2) + b2[:, None]
    R = (X - F) / s2
    ll = -0.5 * n * p * (LOG_2PI + math.log(s2)) - 0.5 * s2 * np.sum(R * R, axis=(1, 2))
    g_b2 = R.sum(axis=1)
    g_w2 = np.einsum("lik,likh->lkh", R, H)
    dZ = R[..., None] * w2[:, None] * (Z > 0)
    g_b1 = dZ.sum(axis=1)
    g_first = np.einsum("ij,likh->lkjh", X, dZ)
    idx = np.arange(p)
    g_first[:, idx, idx] = 0.0
    return ll, g_first, g_b1, g_w2, g_b2


def _project_stack(first_t, config):
    Wt = _induced(first_t)
    p = Wt.shape[-1]
    Wt[..., np.arange(p), np.arange(p)] = 0.0
    b = project_batch(Wt, config.budget, config.schedule, config.hard_threshold, True,
                      config.refine, STEP_SCALE)
    first, c = _rescale(first_t, Wt, b.projected)
    return Wt, b, first, c


def elbo_and_gradient(q, prior, X, config, eps, hidden=DEFAULT_HIDDEN):
    """Monte-Carlo ELBO over network weights and its gradient.

    The gradient with respect to a sampled first-layer row is
    c (g - (g.u) u) + (J^T a)_jk u, where u is the unit row, c = W/W̃, g the
    likelihood gradient on the projected row, a_jk = g.u and J the DAG
    projection Jacobian. Other weights pass straight through.
    """
    p = X.shape[1]
    theta_t = q.means + q.scales * eps
    first_t, b1, w2, b2 = unflatten(theta_t, p, hidden)
    Wt, b, first, c = _project_stack(first_t, config)
    ll, g_first, g_b1, g_w2, g_b2 = _batch_loglik(first, b1, w2, b2, X, config.noise_variance)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(Wt > 0, 1.0 / Wt, 0.0)
    u = first_t * np.swapaxes(inv, -1, -2)[..., None]
    a_kj = np.sum(g_first * u, axis=-1)
    a = np.swapaxes(a_kj, -1, -2)
    active = None if b.refined else np.count_nonzero(b.pre_threshold, axis=(-2, -1))
    Ga = projection_vjp(b.projected, b.binding, a, active)
    cT = np.swapaxes(c, -1, -2)[..., None]
    g_first_t = cT * (g_first - a_kj[..., None] * u) + np.swapaxes(Ga, -1, -2)[..., None] * u
    g_theta = flatten(g_first_t, g_b1, g_w2, g_b2)
    km, kr = kl_gradient(q, prior)
    gm = g_theta.mean(axis=0) - km
    gr = (g_theta * eps).mean(axis=0) * sigmoid(q.raw_scales) - kr
    return float(np.mean(ll)) - kl_divergence(q, prior), gm, gr


def estimate_elbo(q, prior, X, config, eps, hidden=DEFAULT_HIDDEN):
    """ELBO estimate for fixed standard-normal draws ``eps``, shape (L, D)."""
    X = _as_matrix(X)
    p = X.shape[1]
    first_t, b1, w2, b2 = unflatten(q.means + q.scales * eps, p, hidden)
    _, _, first, _ = _project_stack(first_t, config)
    ll = _batch_loglik(first, b1, w2, b2, X, config.noise_variance)[0]
    return float(np.mean(ll)) - kl_divergence(q, prior)


def initial_posterior(prior, p, hidden=DEFAULT_HIDDEN, seed=0):
    """Start from the prior, except deeper-layer means drawn from N(0, 1/hidden)."""
    q = prior.copy()
    nf = p * (p - 1) * hidden
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    q.means[nf:] = rng.normal(0.0, 1.0 / math.sqrt(hidden), q.dim - nf)
    return q


def fit_nonlinear(data, prior=None, config=None, hidden=DEFAULT_HIDDEN, log=None, init=None):
    """Fit a mean-field posterior over all network weights.

    Parameters
    ----------
    data : Dataset or ndarray, shape (n, p)
    prior : MeanFieldGaussian, optional
        Defaults to N(0, 1) on every weight and bias.
    config : TrainConfig, optional
    hidden : int
        Hidden width d.
    init : MeanFieldGaussian, optional
        Starting point; defaults to :func:`initial_posterior`.

    Returns
    -------
    MeanFieldGaussian
        ``info`` also records the architecture.
    """
    config = config or TrainConfig()
    X = _as_matrix(data)
    if len(X) == 0:
        raise ValueError("data has no rows")
    p = X.shape[1]
    D = parameter_count(p, hidden)
    prior = prior or MeanFieldGaussian.isotropic(D)
    if prior.dim != D:
        raise DimensionMismatch(f"prior has {prior.dim} entries, network needs {D}")
    q0 = init if init is not None else initial_posterior(prior, p, hidden, config.seed)
    L = config.samples_per_iter

    def grad_fn(q, rng):
        return elbo_and_gradient(q, prior, X, config, rng.standard_normal((L, D)), hidden)

    q = run_adam(q0, grad_fn, config, log)
    q.info["architecture"] = {"p": p, "hidden": hidden, "layers": [p, hidden, 1],
                              "activation": "relu"}
    q.info["sampler"] = lambda count, cfg: sample_adjacencies(q, p, hidden, cfg.budget, count,
                                                              cfg.seed + 1, cfg.schedule,
                                                              cfg.hard_threshold)
    return q


def sample_networks(q, p, hidden=DEFAULT_HIDDEN, budget=None, count=100, seed=0, schedule=None,
                    hard_threshold=DEFAULT_THRESHOLD):
    """Projected network draws from q.

    Returns (first, b1, w2, b2, W) stacks with a leading axis of ``count``;
    W holds the induced adjacencies.
    """
    streams = np.random.SeedSequence(seed).spawn(count)
    eps = np.stack([np.random.default_rng(s).standard_normal(q.dim) for s in streams])
    first_t, b1, w2, b2 = unflatten(q.means + q.scales * eps, p, hidden)
    cfg = TrainConfig(budget=SparsityBudget.coerce(budget), hard_threshold=hard_threshold,
                      schedule=schedule or PathSchedule())
    _, b, first, _ = _project_stack(first_t, cfg)
    return first, b1, w2, b2, b.projected


def sample_adjacencies(q, p, hidden=DEFAULT_HIDDEN, budget=None, count=100, seed=0,
                       schedule=None, hard_threshold=DEFAULT_THRESHOLD):
    return sample_networks(q, p, hidden, budget, count, seed, schedule, hard_threshold)[-1]


def nonlinear_posterior_summary(q, p, hidden=DEFAULT_HIDDEN, budget=None, count=100, seed=0,
                                schedule=None, hard_threshold=DEFAULT_THRESHOLD):
    """Edge frequencies of the induced adjacencies of projected network draws."""
    Ws = sample_adjacencies(q, p, hidden, budget, count, seed, schedule, hard_threshold)
    summary = PosteriorSummary.from_samples(Ws)
    summary.weights = Ws
    return summary


def nonlinear_score(q, val, config, seed, count=100, hidden=None):
    """Mean held-out log-likelihood over projected network draws."""
    p = val.shape[1]
    hidden = hidden or q.info.get("architecture", {}).get("hidden", DEFAULT_HIDDEN)
    first, b1, w2, b2, _ = sample_networks(q, p, hidden, config.budget, count, seed,
                                           config.schedule, config.hard_threshold)
    ll = _batch_loglik(first, b1, w2, b2, val, config.noise_variance)[0]
    return float(np.mean(ll))
