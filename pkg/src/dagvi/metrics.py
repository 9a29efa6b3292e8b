"""Structure-recovery and distributional metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import FrozenSet, Iterable, Optional, Tuple

import jax
import numpy as np

Edge = Tuple[int, int]

DEFAULT_THRESHOLD = 0.3


@dataclass(frozen=True)
class BinaryGraph:
    d: int
    edges: FrozenSet[Edge]

    def __init__(self, d: int, edges: Iterable[Edge] = ()):
        edges = frozenset((int(i), int(j)) for i, j in edges)
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if not (0 <= i < d and 0 <= j < d):
                raise ValueError(f"edge {(i, j)} out of range for d={d}")
        object.__setattr__(self, "d", int(d))
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_matrix(cls, a) -> "BinaryGraph":
        a = np.asarray(a)
        rows, cols = np.nonzero(a)
        return cls(a.shape[0], zip(rows.tolist(), cols.tolist()))

    def matrix(self) -> np.ndarray:
        out = np.zeros((self.d, self.d), dtype=np.int64)
        for i, j in self.edges:
            out[i, j] = 1
        return out

    def is_acyclic(self) -> bool:
        a = self.matrix()
        indeg = a.sum(0)
        stack = [v for v in range(self.d) if indeg[v] == 0]
        seen = 0
        while stack:
            v = stack.pop()
            seen += 1
            for w in np.flatnonzero(a[v]):
                indeg[w] -= 1
                if indeg[w] == 0:
                    stack.append(int(w))
        return seen == self.d

    def __len__(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class Cpdag:
    d: int
    directed: FrozenSet[Edge]
    undirected: FrozenSet[Edge]  # stored as (min, max)

    def status(self, i: int, j: int) -> str:
        """Status of the pair ``i < j``: none, undirected, forward or backward."""
        if (i, j) in self.directed:
            return "forward"
        if (j, i) in self.directed:
            return "backward"
        if (min(i, j), max(i, j)) in self.undirected:
            return "undirected"
        return "none"


def threshold_edges(w, threshold: float = DEFAULT_THRESHOLD) -> BinaryGraph:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    w = np.asarray(w, dtype=np.float64)
    mask = np.abs(w) > threshold
    np.fill_diagonal(mask, False)
    return BinaryGraph.from_matrix(mask)


def _check_dims(a: BinaryGraph, b: BinaryGraph) -> None:
    if a.d != b.d:
        raise ValueError(f"dimension mismatch: {a.d} vs {b.d}")


def shd(a: BinaryGraph, b: BinaryGraph) -> int:
    """Number of unordered pairs whose edge status differs (a flip costs 1)."""
    _check_dims(a, b)
    x, y = a.matrix(), b.matrix()
    # encode pair status as (forward, backward) per upper-triangle pair
    diff = (x != y) | (x.T != y.T)
    return int(np.triu(diff, 1).sum())


def _pairs_from(edges):
    return {(min(i, j), max(i, j)) for i, j in edges}


def dag_to_cpdag(g: BinaryGraph) -> Cpdag:
    """Compelled edges via v-structures plus Meek's orientation rules 1-3.

    Rules are applied to a fixed point, so the result does not depend on
    the order in which edges are visited.
    """
    if not g.is_acyclic():
        raise ValueError("graph has a cycle")
    d = g.d
    a = g.matrix()
    adj = (a | a.T).astype(bool)
    parents = [set(np.flatnonzero(a[:, j]).tolist()) for j in range(d)]

    directed = set()
    for j in range(d):
        ps = sorted(parents[j])
        for x in range(len(ps)):
            for y in range(x + 1, len(ps)):
                i, k = ps[x], ps[y]
                if not adj[i, k]:
                    directed.add((i, j))
                    directed.add((k, j))
    undirected = _pairs_from(g.edges) - _pairs_from(directed)

    def is_undirected(i, j):
        return (min(i, j), max(i, j)) in undirected

    def orient(i, j):
        undirected.discard((min(i, j), max(i, j)))
        directed.add((i, j))

    changed = True
    while changed:
        changed = False
        for pair in sorted(undirected):
            for i, j in (pair, pair[::-1]):
                if not is_undirected(i, j):
                    break
                # R1: k -> i - j with k, j non-adjacent
                r1 = any((k, i) in directed and not adj[k, j] and k != j for k in range(d))
                # R2: i -> k -> j
                r2 = any((i, k) in directed and (k, j) in directed for k in range(d))
                # R3: i - k1 -> j <- k2 - i, k1 and k2 non-adjacent
                ks = [k for k in range(d) if is_undirected(i, k) and (k, j) in directed]
                r3 = any(not adj[k1, k2] for x, k1 in enumerate(ks) for k2 in ks[x + 1:])
                if r1 or r2 or r3:
                    orient(i, j)
                    changed = True
                    break
    return Cpdag(d, frozenset(directed), frozenset(undirected))


def shd_c(a: BinaryGraph, b: BinaryGraph) -> int:
    """SHD between the CPDAGs of two DAGs; any pair-status difference costs 1."""
    _check_dims(a, b)
    ca, cb = dag_to_cpdag(a), dag_to_cpdag(b)
    return sum(ca.status(i, j) != cb.status(i, j)
               for i in range(a.d) for j in range(i + 1, a.d))


def expected_shd(posterior, truth: BinaryGraph, samples: int = 100,
                 threshold: float = DEFAULT_THRESHOLD, rng=None) -> float:
    """Mean SHD between thresholded posterior draws of ``W`` and ``truth``.

    ``posterior`` is a ``VariationalState`` or an array of adjacency draws.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    draws = posterior_draws(posterior, samples, rng)
    return float(np.mean([shd(threshold_edges(w, threshold), truth) for w in draws]))


def posterior_draws(posterior, samples: int, rng=None) -> np.ndarray:
    if isinstance(posterior, np.ndarray):
        return posterior[:samples]
    from dagvi.variational import posterior_adjacencies

    key = jax.random.key(0) if rng is None else rng
    if isinstance(key, (int, np.integer)):
        key = jax.random.key(int(key))
    return posterior_adjacencies(posterior, key, samples)


def classification_rates(pred: BinaryGraph, truth: BinaryGraph) -> Tuple[float, float, float]:
    """``(tpr, fpr, fdr)`` over ordered off-diagonal edge slots."""
    _check_dims(pred, truth)
    p, t = pred.edges, truth.edges
    tp = len(p & t)
    fp = len(p - t)
    positives = len(t)
    negatives = pred.d * (pred.d - 1) - positives
    tpr = tp / positives if positives else 0.0
    fpr = fp / negatives if negatives else 0.0
    fdr = fp / len(p) if p else 0.0
    return tpr, fpr, fdr


def wasserstein_1d(a, b, rng: Optional[np.random.Generator] = None) -> float:
    """W1 distance between two empirical samples.

    Samples of unequal length are resampled with replacement to the larger
    size before comparing sorted values.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be non-empty")
    if a.size != b.size:
        rng = np.random.default_rng(0) if rng is None else rng
        size = max(a.size, b.size)
        if a.size < size:
            a = rng.choice(a, size)
        else:
            b = rng.choice(b, size)
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
