"""Weighted adjacency matrices and the log-det acyclicity function.

A weighted adjacency matrix is a square float array with zero diagonal;
entry ``W[j, k]`` is the weight of the edge j -> k. The acyclicity function

    h(W) = -log det(I - W∘W)

is defined on the set where the spectral radius of W∘W is below one, is
non-negative there and vanishes exactly on acyclic supports.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DimensionMismatch, NonFinite, OutsideDomain

SPECTRAL_ITERS = 100
SPECTRAL_MARGIN = 1e-6


def check_adjacency(W, name="W"):
    """Validate and return W as a float64 array with zero diagonal.

    Parameters
    ----------
    W : array_like, shape (p, p)

    Raises
    ------
    DimensionMismatch
        If W is not a non-empty square matrix.
    NonFinite
        If any entry is NaN or infinite.
    ValueError
        If a diagonal entry is nonzero.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] < 1:
        raise DimensionMismatch(f"{name} must be a non-empty square matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise NonFinite(f"{name} has non-finite entries")
    if np.any(np.diag(W) != 0.0):
        raise ValueError(f"{name} must have a zero diagonal")
    return W


def zero_diagonal(W):
    """Copy of W with the diagonal set to zero."""
    W = np.array(W, dtype=np.float64)
    np.fill_diagonal(W, 0.0)
    return W


def _factor(W):
    W = np.ascontiguousarray(check_adjacency(W))
    inv = np.empty_like(W)
    ok, logdet = _kernels.lu_inv_logdet(W, inv)
    if not ok:
        raise OutsideDomain("I - W∘W has a non-positive pivot; W is outside the domain")
    return W, inv, logdet


def acyclicity_value(W):
    """h(W) = -log det(I - W∘W).

    Parameters
    ----------
    W : array_like, shape (p, p)
        Zero-diagonal matrix inside the domain.

    Returns
    -------
    float
        Non-negative; exactly zero when the support of W is acyclic.

    Raises
    ------
    OutsideDomain
        If the unpivoted LU factorization of I - W∘W meets a non-positive
        pivot.

    Examples
    --------
    >>> acyclicity_value([[0, .5], [.5, 0]])  # doctest: +ELLIPSIS
    0.0645...
    """
    _, _, logdet = _factor(W)
    # log det <= 0 on the domain; guard against the sign of rounding noise
    return max(0.0, -logdet)


def acyclicity_gradient(W):
    """Gradient 2 (I - W∘W)^{-T} ∘ W of h; the diagonal is exactly zero."""
    W, inv, _ = _factor(W)
    G = 2.0 * inv.T * W
    np.fill_diagonal(G, 0.0)
    return G


def is_exactly_acyclic(W):
    """True iff the nonzero support of W has no directed cycle.

    Combinatorial check (topological sort); no floating tolerance is used, so
    any nonzero entry counts as an edge.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {W.shape}")
    return bool(_kernels.is_dag(np.ascontiguousarray(W)))


@dataclass(frozen=True)
class DomainCertificate:
    """Advisory estimate of membership in the domain of h."""

    in_domain: bool
    spectral_bound: float


def spectral_certificate(W, iters=SPECTRAL_ITERS, margin=SPECTRAL_MARGIN):
    """Estimate rho(W∘W) by power iteration.

    Parameters
    ----------
    W : array_like, shape (p, p)
    iters : int
        Number of power iterations.
    margin : float
        ``in_domain`` requires the bound to be below ``1 - margin``.

    Returns
    -------
    DomainCertificate

    Notes
    -----
    Advisory only: the factorization inside :func:`acyclicity_value` is the
    authoritative domain test. A = W∘W is nonnegative, so it is nilpotent
    (acyclic support, rho = 0) exactly when A^p 1 = 0. Otherwise the
    iteration runs on A + I, whose Perron root is rho + 1 and whose other
    eigenvalues are pulled away from it, and reports the Collatz-Wielandt
    bound max_i ((A + I) x)_i / x_i - 1, which never underestimates rho.
    """
    W = np.asarray(W, dtype=np.float64)
    A = W * W
    p = A.shape[0]
    x = np.ones(p)
    for _ in range(p):
        x = A @ x
        if not np.any(x):
            return DomainCertificate(True, 0.0)
    B = A + np.eye(p)
    x = np.ones(p)
    bound = np.inf
    for _ in range(iters):
        y = B @ x
        bound = np.max(y / x) - 1.0
        x = y / np.max(y)
    if not np.isfinite(bound):
        return DomainCertificate(False, float("inf"))
    return DomainCertificate(bool(bound < 1.0 - margin), float(bound))
