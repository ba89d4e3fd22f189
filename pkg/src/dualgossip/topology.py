"""Communication graphs and their doubly stochastic mixing matrices.

Three graph families (fully connected, Erdos-Renyi, ring) are turned into
symmetric doubly stochastic weight matrices: Metropolis-Hastings weights
``1 / (1 + max(deg_i, deg_j))`` on general graphs, the uniform ``1/n`` matrix
on the complete graph. Alongside the weights we expose the contraction
constants that the convergence analysis is phrased in:

    p_min   = smallest strictly positive entry
    q       = (1 - p_min**n) ** (1/n)
    c_const = 2 * (1 + p_min**-n) / (1 - p_min**n)

A variant of ``c_const`` carrying an extra sqrt(2) factor exists; the
definition above is the one used throughout this package.
"""

from dataclasses import dataclass, field
import json

import numpy as np

from .errors import (
    ConstructionFailure,
    InvalidConfigError,
    InvalidTopologyError,
    NumericalFailure,
)

RING = "ring"
FULLY_CONNECTED = "fully_connected"
ERDOS_RENYI = "erdos_renyi"
KINDS = (RING, FULLY_CONNECTED, ERDOS_RENYI)

_ER_MAX_RESAMPLES = 1000
_STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True)
class Topology:
    """An undirected connected communication graph over ``n`` agents.

    ``edges`` holds sorted ``(i, j)`` pairs with ``i < j``; no self-loops.
    """

    kind: str
    n: int
    edges: tuple
    seed: int
    edge_prob: float | None = None

    def neighbors(self, i):
        return tuple(
            b if a == i else a for a, b in self.edges if i in (a, b)
        )

    def degree(self, i):
        return sum(1 for a, b in self.edges if i in (a, b))

    def to_json(self):
        """Serialize as ``{kind, n, edges, seed}`` for run reproducibility."""
        return json.dumps(
            {
                "kind": self.kind,
                "n": self.n,
                "edges": [list(e) for e in self.edges],
                "seed": self.seed,
            }
        )

    @staticmethod
    def from_json(text):
        raw = json.loads(text)
        return Topology(
            kind=raw["kind"],
            n=int(raw["n"]),
            edges=tuple(tuple(e) for e in raw["edges"]),
            seed=int(raw["seed"]),
        )


@dataclass(frozen=True)
class MixingMatrix:
    """Symmetric doubly stochastic weights plus contraction constants."""

    n: int
    weights: np.ndarray = field(repr=False)
    p_min: float
    q: float
    c_const: float

    def __post_init__(self):
        self.weights.setflags(write=False)


def _is_connected(n, edges):
    # Union-find; the test suite checks connectivity independently via BFS.
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    root = find(0)
    return all(find(i) == root for i in range(n))


def build_topology(kind, n, seed, edge_prob=None):
    """Build a connected graph of the requested kind.

    Erdos-Renyi graphs are sampled from ``seed`` and resampled (at most 1000
    times) until connected.
    """
    if n < 2:
        raise InvalidConfigError(f"need at least 2 agents, got {n}")
    if kind not in KINDS:
        raise InvalidConfigError(f"unknown topology kind {kind!r}")

    if kind == RING:
        # For n == 2 the cycle degenerates to the single edge {0, 1}.
        edges = sorted({tuple(sorted((i, (i + 1) % n))) for i in range(n)})
        return Topology(kind, n, tuple(edges), seed)

    if kind == FULLY_CONNECTED:
        edges = tuple((i, j) for i in range(n) for j in range(i + 1, n))
        return Topology(kind, n, edges, seed)

    if edge_prob is None or not 0.0 < edge_prob <= 1.0:
        raise InvalidConfigError(
            f"erdos_renyi needs edge_prob in (0, 1], got {edge_prob}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
    for _ in range(_ER_MAX_RESAMPLES):
        draws = rng.random((n, n))
        edges = tuple(
            (i, j)
            for i in range(n)
            for j in range(i + 1, n)
            if draws[i, j] < edge_prob
        )
        if _is_connected(n, edges):
            return Topology(kind, n, edges, seed, edge_prob=edge_prob)
    raise ConstructionFailure(
        f"no connected G({n}, {edge_prob}) sample in {_ER_MAX_RESAMPLES} tries"
    )


def build_mixing_matrix(topo):
    """Doubly stochastic weights for a connected topology.

    Fully connected graphs get the uniform matrix; everything else gets
    Metropolis-Hastings weights, whose diagonal remainder is always strictly
    positive.
    """
    n = topo.n
    if not _is_connected(n, topo.edges):
        raise InvalidTopologyError("mixing matrix requires a connected graph")

    if topo.kind == FULLY_CONNECTED:
        weights = np.full((n, n), 1.0 / n)
    else:
        weights = np.zeros((n, n))
        deg = [topo.degree(i) for i in range(n)]
        for i, j in topo.edges:
            w = 1.0 / (1.0 + max(deg[i], deg[j]))
            weights[i, j] = w
            weights[j, i] = w
        for i in range(n):
            weights[i, i] = 1.0 - weights[i].sum()

    p_min = float(weights[weights > 0.0].min())
    p_pow = p_min**n
    q = (1.0 - p_pow) ** (1.0 / n)
    if q >= 1.0:
        # p_min**n underflows below eps for larger n; the true q is strictly
        # inside (1 - eps, 1), so pin it to the nearest representable value.
        q = float(np.nextafter(1.0, 0.0))
    c_const = 2.0 * (1.0 + p_min ** (-n)) / (1.0 - p_pow)
    return MixingMatrix(n=n, weights=weights, p_min=p_min, q=q, c_const=c_const)


def metropolis_submatrix(topo, online):
    """Metropolis weights on the subgraph induced by ``online`` agents.

    Offline rows/columns are identity so the full matrix stays doubly
    stochastic; isolated online agents keep their own value. Used for gossip
    rounds with agent dropout.
    """
    n = topo.n
    online = np.asarray(online, dtype=bool)
    if online.shape != (n,):
        raise InvalidTopologyError("online mask length must equal agent count")
    sub_edges = [
        (i, j) for i, j in topo.edges if online[i] and online[j]
    ]
    deg = [0] * n
    for i, j in sub_edges:
        deg[i] += 1
        deg[j] += 1
    weights = np.eye(n)
    for i, j in sub_edges:
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        weights[i, j] = w
        weights[j, i] = w
        weights[i, i] -= w
        weights[j, j] -= w
    return weights


def spectral_gap(mixing, tol=1e-10, max_iters=10_000):
    """``1 - |lambda_2|`` via power iteration on the mean-deflated operator.

    The iteration applies ``x -> Px - mean(x) * 1`` and tracks the norm ratio
    (the Rayleigh estimate of ``|lambda_2|`` for a symmetric matrix). Raises
    NumericalFailure with the iteration count when the ratio does not settle.
    """
    p = mixing.weights
    n = mixing.n
    rng = np.random.default_rng(0x5EC7A1)
    x = rng.standard_normal(n)
    x -= x.mean()
    norm = np.linalg.norm(x)
    if norm == 0.0:
        return 1.0
    x /= norm

    ratio_prev = None
    for iteration in range(1, max_iters + 1):
        y = p @ x
        y -= y.mean()
        norm = np.linalg.norm(y)
        if norm < tol:
            return 1.0  # deflated operator is (numerically) zero: lambda_2 = 0
        ratio = norm
        x = y / norm
        if ratio_prev is not None and abs(ratio - ratio_prev) <= tol:
            return 1.0 - ratio
        ratio_prev = ratio
    raise NumericalFailure(
        f"power iteration did not converge in {max_iters} iterations",
        iterations=max_iters,
    )
