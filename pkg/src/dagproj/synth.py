"""Synthetic graphs and structural equation data, plus dataset file I/O.

Graphs are oriented by a uniformly random node permutation, so they are
acyclic by construction. Edge weights are uniform on [-0.7, -0.3] U [0.3, 0.7].
"""
from dataclasses import dataclass, field
import csv
import json
import math
import os

import numpy as np

from .errors import CyclicInput, InfeasibleSpec, ParseError
from .nonlinear import DEFAULT_HIDDEN, NodeNetwork, forward, induced_adjacency, network_to_flat

WEIGHT_LOW, WEIGHT_HIGH = 0.3, 0.7
FAMILIES = ("erdos_renyi", "scale_free")
NOISES = ("gaussian", "exponential", "gumbel", "heteroscedastic_gaussian")


@dataclass(frozen=True)
class GraphSpec:
    """Random DAG with ``p`` nodes and exactly ``s`` edges."""

    p: int
    s: int
    family: str = "erdos_renyi"
    exponent: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.p < 1:
            raise InfeasibleSpec("p must be at least 1")
        if self.family not in FAMILIES:
            raise InfeasibleSpec(f"unknown graph family {self.family!r}")
        smax = self.p * (self.p - 1) // 2
        if not 0 <= self.s <= smax:
            raise InfeasibleSpec(f"s={self.s} edges impossible for p={self.p} (max {smax})")
        if self.family == "scale_free" and not self.exponent > 1:
            raise InfeasibleSpec("scale-free exponent must exceed 1")


@dataclass(frozen=True)
class NoiseSpec:
    """Additive noise family.

    ``gaussian`` uses ``scale`` as its standard deviation. ``exponential`` is
    Exponential(1) and ``gumbel`` is Gumbel(0, 1), both uncentred.
    ``heteroscedastic_gaussian`` draws one standard deviation per node from
    Uniform(2/3, 4/3), fixed across rows.
    """

    family: str = "gaussian"
    scale: float = 1.0

    def __post_init__(self):
        if self.family not in NOISES:
            raise InfeasibleSpec(f"unknown noise family {self.family!r}")
        if not self.scale > 0:
            raise InfeasibleSpec("noise scale must be positive")


@dataclass
class Dataset:
    """Observations plus whatever is known about how they were generated.

    Attributes
    ----------
    X : ndarray, shape (n, p)
    truth : ndarray, NodeNetwork or None
        Weighted adjacency (linear), generating network (nonlinear) or a 0/1
        adjacency read from an edge list.
    spec : dict
        Generation metadata.
    names : list of str
    """

    X: np.ndarray
    truth: object = None
    spec: dict = field(default_factory=dict)
    names: list | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.names is None:
            self.names = [f"X{j + 1}" for j in range(self.X.shape[1])]

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def truth_adjacency(self):
        """Ground-truth adjacency (weighted when available) or None."""
        if self.truth is None:
            return None
        if isinstance(self.truth, NodeNetwork):
            return induced_adjacency(self.truth)
        return np.asarray(self.truth, dtype=np.float64)

    def split(self, fraction=0.1, seed=0):
        """Train and validation datasets with round(fraction * n) validation rows."""
        from .variational import split_rows

        tr, va = split_rows(self.n, fraction, seed)
        return (Dataset(self.X[tr], self.truth, dict(self.spec), list(self.names)),
                Dataset(self.X[va], self.truth, dict(self.spec), list(self.names)))


def _weights(rng, size):
    mag = rng.uniform(WEIGHT_LOW, WEIGHT_HIGH, size)
    return np.where(rng.random(size) < 0.5, -mag, mag)


def _scale_free_pairs(p, s, exponent, rng):
    """Preferential attachment with an additive offset tuned to the exponent.

    Node i joins with k_i links to earlier nodes (about s/(p-1) each), chosen
    with probability proportional to max(degree + a, 0) + 1, where
    a = m (exponent - 3) is the offset that gives a degree exponent of
    ``exponent`` in the linear attachment model.
    """
    if s == 0:
        return []
    m = s / (p - 1)
    k = np.minimum(np.arange(p), int(s // (p - 1)))
    rem = s - int(k.sum())
    while rem > 0:
        for i in range(p - 1, 0, -1):
            if rem and k[i] < i:
                k[i] += 1
                rem -= 1
    a = m * (exponent - 3.0)
    deg = np.zeros(p)
    pairs = []
    for i in range(1, p):
        if k[i] == 0:
            continue
        w = np.maximum(deg[:i] + a, 0.0) + 1.0
        targets = rng.choice(i, size=int(k[i]), replace=False, p=w / w.sum())
        for t in targets:
            pairs.append((int(t), i))
            deg[t] += 1
        deg[i] += k[i]
    return pairs


def sample_graph(spec):
    """Random weighted DAG with exactly ``spec.s`` edges.

    Erdős–Rényi picks s unordered pairs uniformly; scale-free uses
    preferential attachment. Either way edges point from earlier to later
    nodes in a uniformly random permutation.
    """
    rng = np.random.default_rng(spec.seed)
    p = spec.p
    perm = rng.permutation(p)
    rank = np.empty(p, dtype=np.int64)
    rank[perm] = np.arange(p)
    if spec.family == "erdos_renyi":
        iu = np.triu_indices(p, 1)
        pick = rng.choice(len(iu[0]), size=spec.s, replace=False)
        pairs = list(zip(iu[0][pick], iu[1][pick]))
    else:
        pairs = _scale_free_pairs(p, spec.s, spec.exponent, rng)
    W = np.zeros((p, p))
    w = _weights(rng, len(pairs))
    for (a, b), v in zip(pairs, w):
        j, k = (a, b) if rank[a] < rank[b] else (b, a)
        W[j, k] = v
    return W


def topological_order(W):
    """A topological order of the support of W; raises CyclicInput on a cycle."""
    S = np.asarray(W) != 0
    p = S.shape[0]
    indeg = S.sum(axis=0).astype(int)
    ready = [j for j in range(p) if indeg[j] == 0]
    order = []
    while ready:
        j = ready.pop(0)
        order.append(j)
        for k in np.flatnonzero(S[j]):
            indeg[k] -= 1
            if indeg[k] == 0:
                ready.append(int(k))
    if len(order) < p or np.any(np.diag(S)):
        raise CyclicInput("graph has a directed cycle")
    return order


def sample_noise(noise, n, p, rng):
    """Noise matrix (n, p) and the per-node standard deviations used (or None)."""
    if noise.family == "gaussian":
        return noise.scale * rng.standard_normal((n, p)), None
    if noise.family == "exponential":
        return rng.exponential(1.0, (n, p)), None
    if noise.family == "gumbel":
        return rng.gumbel(0.0, 1.0, (n, p)), None
    sigma = rng.uniform(2.0 / 3.0, 4.0 / 3.0, p)
    return rng.standard_normal((n, p)) * sigma, sigma


def ancestral_linear(W, E):
    """Solve X = X W + E row-wise by substitution in topological order."""
    W = np.asarray(W, dtype=np.float64)
    X = np.zeros_like(np.asarray(E, dtype=np.float64))
    for k in topological_order(W):
        X[:, k] = X @ W[:, k] + E[:, k]
    return X


def simulate_linear(W, n, noise=None, seed=0):
    """n rows from x = W^T x + eps."""
    noise = noise or NoiseSpec()
    W = np.asarray(W, dtype=np.float64)
    topological_order(W)
    rng = np.random.default_rng(seed)
    E, sigma = sample_noise(noise, n, W.shape[0], rng)
    X = ancestral_linear(W, E)
    spec = {"model": "linear", "n": int(n), "noise": noise.family, "noise_scale": noise.scale,
            "seed": int(seed)}
    if sigma is not None:
        spec["noise_sigma"] = sigma.tolist()
    return Dataset(X, W.copy(), spec)


def make_network(W, hidden=DEFAULT_HIDDEN, seed=0):
    """Generator network whose parents follow the support of W.

    First-layer rows of parents and all output weights are uniform on
    [-0.7, -0.3] U [0.3, 0.7]; non-parent rows and all biases are zero.
    """
    S = np.asarray(W) != 0
    p = S.shape[0]
    rng = np.random.default_rng(seed)
    first = _weights(rng, (p, p, hidden)) * S.T[..., None]
    w2 = _weights(rng, (p, hidden))
    return NodeNetwork(first, np.zeros((p, hidden)), w2, np.zeros(p))


def ancestral_nonlinear(net, E):
    """Solve X = f(X) + E by substitution in topological order."""
    X = np.zeros_like(np.asarray(E, dtype=np.float64))
    for k in topological_order(induced_adjacency(net)):
        X[:, k] = forward(net, X)[:, k] + E[:, k]
    return X


def simulate_nonlinear(net, n, noise=None, seed=0):
    """n rows from x = f(x) + eps."""
    noise = noise or NoiseSpec()
    topological_order(induced_adjacency(net))
    rng = np.random.default_rng(seed)
    E, sigma = sample_noise(noise, n, net.p, rng)
    X = ancestral_nonlinear(net, E)
    spec = {"model": "nonlinear", "n": int(n), "noise": noise.family,
            "noise_scale": noise.scale, "seed": int(seed), "hidden": net.hidden}
    if sigma is not None:
        spec["noise_sigma"] = sigma.tolist()
    return Dataset(X, net, spec)


# ---- files -----------------------------------------------------------------

def _is_number(tok):
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _data_lines(path):
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (row[0].lstrip().startswith("#")) or all(not t.strip() for t in row):
                continue
            yield lineno, [t.strip() for t in row]


def read_matrix_csv(path):
    """Numeric CSV with optional header; '#' lines are skipped.

    Returns
    -------
    values : ndarray, shape (rows, cols)
    header : list of str or None
    """
    header = None
    rows = []
    width = None
    for lineno, row in _data_lines(path):
        if header is None and not rows and not all(_is_number(t) for t in row):
            header = row
            width = len(row)
            continue
        if width is None:
            width = len(row)
        if len(row) != width:
            raise ParseError(f"{path}: expected {width} fields, found {len(row)}", lineno)
        vals = []
        for c, tok in enumerate(row, start=1):
            try:
                v = float(tok)
            except ValueError:
                raise ParseError(f"{path}: non-numeric field {tok!r}", lineno, c) from None
            if not math.isfinite(v):
                raise ParseError(f"{path}: non-finite field {tok!r}", lineno, c)
            vals.append(v)
        rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.array(rows), header


def write_matrix_csv(path, M, header=None, comment=None):
    """Write a matrix with full float precision, behind an optional '#' line."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write("# " + comment + "\n")
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for row in np.atleast_2d(M):
            w.writerow([repr(float(x)) for x in row])


def read_edge_list(path, names):
    """0/1 adjacency from lines such as ``A->B`` or ``A→B``."""
    index = {nm: i for i, nm in enumerate(names)}
    p = len(names)
    A = np.zeros((p, p))
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            for arrow in ("->", "→"):
                if arrow in line:
                    a, b = (t.strip() for t in line.split(arrow, 1))
                    break
            else:
                raise ParseError(f"{path}: expected 'A->B'", lineno)
            for c, nm in ((1, a), (2, b)):
                if nm not in index:
                    raise ParseError(f"{path}: unknown node {nm!r}", lineno, c)
            if index[a] == index[b]:
                raise ParseError(f"{path}: self-loop on {a!r}", lineno)
            A[index[a], index[b]] = 1.0
    return A


def write_edge_list(path, W, names, comment=None):
    with open(path, "w") as fh:
        if comment:
            fh.write("# " + comment + "\n")
        for j, k in zip(*np.nonzero(np.asarray(W) != 0)):
            fh.write(f"{names[j]}->{names[k]}\n")


def load_external(path, edges=None):
    """Read an n x p observation CSV and an optional ground-truth edge list.

    A first line containing any non-numeric field is taken as the header;
    otherwise columns are named X1..Xp. Lines starting with '#' are ignored.

    Raises
    ------
    ParseError
        With the 1-based row and column of the offending field.
    """
    X, header = read_matrix_csv(path)
    names = header or [f"X{j + 1}" for j in range(X.shape[1])]
    truth = read_edge_list(edges, names) if edges else None
    return Dataset(X, truth, {"source": os.path.basename(str(path))}, names)


def save_dataset(ds, out_dir, metadata):
    """Write ``data.csv``, ``truth.txt`` (edge list) and ``meta.json``.

    ``metadata`` is merged into meta.json together with the generation spec
    and, for linear truths, the weighted adjacency.
    """
    os.makedirs(out_dir, exist_ok=True)
    tag = " ".join(f"{k}={metadata[k]}" for k in ("version", "config_hash", "seed")
                   if k in metadata)
    write_matrix_csv(os.path.join(out_dir, "data.csv"), ds.X, ds.names, tag)
    truth = ds.truth_adjacency()
    if truth is not None:
        write_edge_list(os.path.join(out_dir, "truth.txt"), truth, ds.names, tag)
    meta = dict(metadata)
    meta["spec"] = ds.spec
    meta["names"] = ds.names
    if isinstance(ds.truth, NodeNetwork):
        meta["truth_network"] = {"architecture": ds.truth.architecture(),
                                 "weights": network_to_flat(ds.truth).tolist()}
    elif truth is not None:
        meta["truth_weights"] = truth.tolist()
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
