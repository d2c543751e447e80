"""Compiled inner loops for the acyclicity projection.

Everything here works on plain float64 arrays and returns status codes
instead of raising, so the Python layer decides how to report failures.
"""
import numba as nb
import numpy as np

OK = 0
DIVERGED = 1

METHOD_NEWTON = 0
METHOD_GRADIENT = 1


@nb.njit(cache=True)
def lu_inv_logdet(W, out):
    """Factor I - W∘W without pivoting and invert it.

    I - W∘W is a Z-matrix, which is a nonsingular M-matrix exactly when
    every pivot of the unpivoted LU factorization is positive. The
    factorization is therefore also the domain test.

    Returns
    -------
    ok : bool
        False if a non-positive pivot was met (``out`` is then garbage).
    logdet : float
        log det(I - W∘W) when ``ok``.
    """
    p = W.shape[0]
    A = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            A[i, j] = -W[i, j] * W[i, j]
        A[i, i] += 1.0
    ld = 0.0
    for k in range(p):
        piv = A[k, k]
        if not piv > 0.0:
            return False, 0.0
        ld += np.log(piv)
        for i in range(k + 1, p):
            A[i, k] /= piv
        for i in range(k + 1, p):
            lik = A[i, k]
            if lik != 0.0:
                for j in range(k + 1, p):
                    A[i, j] -= lik * A[k, j]
    for c in range(p):
        for i in range(p):
            s = 1.0 if i == c else 0.0
            for j in range(i):
                s -= A[i, j] * out[j, c]
            out[i, c] = s
        for i in range(p - 1, -1, -1):
            s = out[i, c]
            for j in range(i + 1, p):
                s -= A[i, j] * out[j, c]
            out[i, c] = s / A[i, i]
    return True, ld


@nb.njit(cache=True)
def _sqdist(A, B):
    s = 0.0
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            d = A[i, j] - B[i, j]
            s += d * d
    return s


@nb.njit(cache=True)
def newton_solve(Wt, mus, tol, maxit, alpha0):
    """Path-following with diagonally scaled steps and Armijo backtracking.

    Each stage minimises mu/2 ||W - Wt||^2 + h(W), warm-started from the
    previous stage, starting at W = 0. The step is the gradient divided by
    the diagonal of the Hessian, which stays positive inside the domain.
    """
    p = Wt.shape[0]
    W = np.zeros((p, p))
    Wn = np.zeros((p, p))
    G = np.zeros((p, p))
    D = np.ones((p, p))
    Minv = np.eye(p)
    Mn = np.zeros((p, p))
    total = 0
    ld = 0.0
    fn = 0.0
    ldn = 0.0
    for mu in mus:
        f = 0.5 * mu * _sqdist(W, Wt) - ld
        alpha = alpha0
        for it in range(maxit):
            gmax = 0.0
            dec = 0.0
            for i in range(p):
                for j in range(p):
                    if i == j:
                        G[i, j] = 0.0
                        D[i, j] = 1.0
                    else:
                        n = Minv[j, i]
                        w = W[i, j]
                        g = mu * (w - Wt[i, j]) + 2.0 * n * w
                        d = mu + 2.0 * n + 4.0 * w * w * n * n
                        G[i, j] = g
                        D[i, j] = d
                        dec += g * g / d
                        if abs(g) > gmax:
                            gmax = abs(g)
            if gmax < tol:
                break
            total += 1
            a = alpha
            while True:
                for i in range(p):
                    for j in range(p):
                        Wn[i, j] = W[i, j] - a * G[i, j] / D[i, j]
                ok, ldn = lu_inv_logdet(Wn, Mn)
                if ok:
                    fn = 0.5 * mu * _sqdist(Wn, Wt) - ldn
                    if fn <= f - 1e-4 * a * dec:
                        break
                a *= 0.5
                if a < 1e-12:
                    return W, total, DIVERGED
            alpha = min(alpha0, 2.0 * a)
            W, Wn = Wn, W
            Minv, Mn = Mn, Minv
            f = fn
            ld = ldn
    return W, total, OK


@nb.njit(cache=True)
def gradient_solve(Wt, mus, step, tol, maxit):
    """Path-following with fixed-step gradient descent.

    The step is halved whenever a trial point leaves the domain and is reset
    to ``step`` at the start of every stage.
    """
    p = Wt.shape[0]
    W = np.zeros((p, p))
    Wn = np.zeros((p, p))
    G = np.zeros((p, p))
    Minv = np.eye(p)
    Mn = np.zeros((p, p))
    total = 0
    for mu in mus:
        a = step
        for it in range(maxit):
            gmax = 0.0
            for i in range(p):
                for j in range(p):
                    if i == j:
                        G[i, j] = 0.0
                    else:
                        g = mu * (W[i, j] - Wt[i, j]) + 2.0 * Minv[j, i] * W[i, j]
                        G[i, j] = g
                        if abs(g) > gmax:
                            gmax = abs(g)
            if gmax < tol:
                break
            total += 1
            while True:
                for i in range(p):
                    for j in range(p):
                        Wn[i, j] = W[i, j] - a * G[i, j]
                ok, _ = lu_inv_logdet(Wn, Mn)
                if ok:
                    break
                a *= 0.5
                if a < 1e-12 * step:
                    return W, total, DIVERGED
            W, Wn = Wn, W
            Minv, Mn = Mn, Minv
    return W, total, OK


@nb.njit(cache=True)
def is_dag(W):
    """Kahn's algorithm on the nonzero support of W."""
    p = W.shape[0]
    indeg = np.zeros(p, np.int64)
    for i in range(p):
        for j in range(p):
            if i != j and W[i, j] != 0.0:
                indeg[j] += 1
    stack = np.empty(p, np.int64)
    top = 0
    for j in range(p):
        if indeg[j] == 0:
            stack[top] = j
            top += 1
    seen = 0
    while top > 0:
        top -= 1
        i = stack[top]
        seen += 1
        for j in range(p):
            if i != j and W[i, j] != 0.0:
                indeg[j] -= 1
                if indeg[j] == 0:
                    stack[top] = j
                    top += 1
    if seen < p:
        return False
    # self-loops are cycles too
    for i in range(p):
        if W[i, i] != 0.0:
            return False
    return True


@nb.njit(cache=True)
def l1_ball(V, lam):
    """Euclidean projection onto {||W||_1 <= lam}; lam < 0 means unbounded.

    Returns the projected array and the soft threshold theta.
    """
    out = V.copy()
    if lam < 0.0:
        return out, 0.0
    a = np.abs(V.ravel())
    total = a.sum()
    if total <= lam:
        return out, 0.0
    if lam == 0.0:
        out[:] = 0.0
        return out, a.max()
    v = np.sort(a)[::-1]
    # j = 1 always qualifies when lam > 0; seeding it keeps theta >= 0 when
    # lam is below the rounding error of v[0]
    cs = v[0]
    csmax = v[0]
    jmax = 1
    for j in range(1, v.shape[0]):
        cs += v[j]
        if v[j] * (j + 1) > cs - lam:
            jmax = j + 1
            csmax = cs
    theta = (csmax - lam) / jmax
    flat = out.ravel()
    for i in range(flat.shape[0]):
        x = flat[i]
        m = abs(x) - theta
        if m > 0.0:
            flat[i] = m if x > 0.0 else -m
        else:
            flat[i] = 0.0
    return out, theta


@nb.njit(cache=True)
def threshold(W, tau, ensure):
    """Zero entries with magnitude below tau.

    With ``ensure`` the cut is raised to the smallest level at which the
    support becomes acyclic (removing edges never creates a cycle, so a
    binary search over the sorted magnitudes finds it).
    """
    out = W.copy()
    p = W.shape[0]
    for i in range(p):
        for j in range(p):
            if abs(out[i, j]) < tau:
                out[i, j] = 0.0
    if not ensure or is_dag(out):
        return out
    mags = np.abs(out.ravel())
    vals = np.unique(mags[mags > 0.0])
    lo = 0
    hi = vals.shape[0] - 1
    trial = np.empty_like(out)
    while lo < hi:
        mid = (lo + hi) // 2
        for i in range(p):
            for j in range(p):
                trial[i, j] = out[i, j] if abs(out[i, j]) > vals[mid] else 0.0
        if is_dag(trial):
            hi = mid
        else:
            lo = mid + 1
    for i in range(p):
        for j in range(p):
            if abs(out[i, j]) <= vals[lo]:
                out[i, j] = 0.0
    return out


@nb.njit(cache=True)
def finish(Wt, What, lam, tau, ensure, refine):
    """l1 projection, thresholding and optional refit on the kept support.

    The refit replaces the kept entries by the exact solution of the convex
    problem restricted to that support, which is what the analytic Jacobian
    describes. Returns (W, pre_threshold, binding).
    """
    pre, theta = l1_ball(What, lam)
    W = threshold(pre, tau, ensure)
    if refine:
        p = W.shape[0]
        masked = np.empty_like(W)
        for _ in range(p * p + 1):
            for i in range(p):
                for j in range(p):
                    masked[i, j] = Wt[i, j] if W[i, j] != 0.0 else 0.0
            fit, theta = l1_ball(masked, lam)
            Wn = threshold(fit, tau, False)
            same = True
            for i in range(p):
                for j in range(p):
                    if (Wn[i, j] != 0.0) != (W[i, j] != 0.0):
                        same = False
            W = Wn
            if same:
                break
    binding = theta > 0.0 or lam == 0.0
    return W, pre, binding


@nb.njit(cache=True)
def project_batch(Wts, mus, tol, maxit, method, step, lam, tau, ensure, refine):
    """Project each Wts[l] independently; status[l] != OK marks a failure."""
    L, p, _ = Wts.shape
    Ws = np.empty_like(Wts)
    pres = np.empty_like(Wts)
    binding = np.zeros(L, np.bool_)
    iters = np.zeros(L, np.int64)
    status = np.zeros(L, np.int64)
    for l in range(L):
        if method == METHOD_NEWTON:
            What, n, st = newton_solve(Wts[l], mus, tol, maxit, step)
        else:
            What, n, st = gradient_solve(Wts[l], mus, step, tol, maxit)
        iters[l] = n
        status[l] = st
        if st != OK:
            Ws[l] = np.nan
            pres[l] = np.nan
            continue
        W, pre, b = finish(Wts[l], What, lam, tau, ensure, refine)
        Ws[l] = W
        pres[l] = pre
        binding[l] = b
    return Ws, pres, binding, iters, status
