"""Undirected graph container, edge-list ingestion, connectivity-preserving
train/test splitting and negative sampling."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

Pair = tuple[int, int]


class GraphError(ValueError):
    """Invalid graph input or an impossible sampling request."""


def _as_edge_array(edges) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return arr.reshape(-1, 2)


def _canonical(arr: np.ndarray) -> np.ndarray:
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    return np.stack([lo, hi], axis=1)


@dataclass(frozen=True, eq=False)
class Graph:
    """Simple undirected graph on nodes ``0..n_nodes-1``.

    ``edges`` is an ``(m, 2)`` int array with ``i < j`` per row, sorted
    lexicographically and free of duplicates. Use :meth:`from_pairs` to build
    one from arbitrary pairs.
    """

    n_nodes: int
    edges: np.ndarray
    _keys: np.ndarray = field(repr=False)
    _indptr: np.ndarray = field(repr=False)
    _indices: np.ndarray = field(repr=False)

    @classmethod
    def from_pairs(cls, n_nodes: int, pairs) -> "Graph":
        if n_nodes < 1:
            raise GraphError("graph needs at least one node")
        arr = _as_edge_array(pairs)
        if arr.size and (arr.min() < 0 or arr.max() >= n_nodes):
            raise GraphError(f"node index out of range for n_nodes={n_nodes}")
        arr = _canonical(arr)
        arr = arr[arr[:, 0] != arr[:, 1]]
        keys = np.unique(arr[:, 0] * n_nodes + arr[:, 1])
        edges = np.stack([keys // n_nodes, keys % n_nodes], axis=1)
        # CSR adjacency over the symmetrized edge set; neighbor lists sorted.
        src = np.concatenate([edges[:, 0], edges[:, 1]])
        dst = np.concatenate([edges[:, 1], edges[:, 0]])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        indptr = np.zeros(n_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n_nodes), out=indptr[1:])
        edges.setflags(write=False)
        keys.setflags(write=False)
        return cls(int(n_nodes), edges, keys, indptr, dst)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> np.ndarray:
        return self._indices[self._indptr[i]:self._indptr[i + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self._indptr)

    def has_edge(self, i: int, j: int) -> bool:
        nb = self.neighbors(i)
        k = np.searchsorted(nb, j)
        return bool(k < len(nb) and nb[k] == j)

    def contains_pairs(self, pairs) -> np.ndarray:
        """Vectorized membership test for an ``(k, 2)`` array of pairs."""
        arr = _canonical(_as_edge_array(pairs))
        return _isin_sorted(arr[:, 0] * self.n_nodes + arr[:, 1], self._keys)

    def edge_keys(self) -> np.ndarray:
        return self._keys

    @property
    def n_non_edges(self) -> int:
        return self.n_nodes * (self.n_nodes - 1) // 2 - self.n_edges

    def is_connected(self) -> bool:
        return n_components(self.n_nodes, self.edges) == 1


def _isin_sorted(keys: np.ndarray, sorted_keys: np.ndarray) -> np.ndarray:
    if len(sorted_keys) == 0:
        return np.zeros(len(keys), dtype=bool)
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return sorted_keys[pos] == keys


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def n_components(n_nodes: int, edges) -> int:
    uf = UnionFind(n_nodes)
    count = n_nodes
    for i, j in _as_edge_array(edges).tolist():
        if uf.union(i, j):
            count -= 1
    return count


# ---------------------------------------------------------------- ingestion

def load_edge_list(path, fmt: str = "whitespace") -> tuple[Graph, list[str]]:
    """Read an edge list and return the graph plus the index -> label map.

    Labels get dense indices in order of first appearance. Lines starting
    with ``#`` and blank lines are skipped; self-loops are dropped but their
    node still receives an index.
    """
    if fmt not in ("whitespace", "csv"):
        raise GraphError(f"unknown edge-list format {fmt!r}")
    index: dict[str, int] = {}
    pairs: list[Pair] = []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh) if fmt == "csv" else (line.split() for line in fh)
        for lineno, row in enumerate(rows, start=1):
            tokens = [t.strip() for t in row if t.strip()]
            if not tokens or tokens[0].startswith("#"):
                continue
            if len(tokens) != 2:
                raise GraphError(f"{path}:{lineno}: expected 2 node tokens, got {len(tokens)}")
            u, v = (index.setdefault(t, len(index)) for t in tokens)
            pairs.append((u, v))
    if not index:
        raise GraphError(f"{path}: empty graph")
    g = Graph.from_pairs(len(index), pairs)
    if g.n_edges == 0:
        raise GraphError(f"{path}: graph has no edges after dropping self-loops")
    return g, list(index)


# ---------------------------------------------------------------- sampling

_ENUMERATE_MAX_NODES = 2000


def sample_negatives(g: Graph, count: int, seed=None, exclude=None,
                     distinct: bool = False) -> np.ndarray:
    """Sample ``count`` uniform node pairs ``(i < j)`` that are not edges of
    ``g`` and not in ``exclude``.

    Pairs are i.i.d. (repeats allowed) unless ``distinct`` is set. ``seed`` may
    be an int or a ``numpy.random.Generator``. Dense small graphs fall back to
    enumerating the complement once rejection stops making progress.
    """
    rng = np.random.default_rng(seed)
    n = g.n_nodes
    if count < 0:
        raise GraphError("count must be nonnegative")
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    blocked = g.edge_keys()
    if exclude is not None and len(exclude):
        ex = _canonical(_as_edge_array(list(exclude) if isinstance(exclude, set) else exclude))
        blocked = np.union1d(blocked, ex[:, 0] * n + ex[:, 1])
    available = n * (n - 1) // 2 - len(blocked)
    if available <= 0:
        raise GraphError("graph has no non-edges to sample")
    if distinct and count > available:
        raise GraphError(f"requested {count} distinct non-edges, only {available} exist")

    out = np.empty(0, dtype=np.int64)
    drawn = accepted = 0
    while len(out) < count:
        need = count - len(out)
        batch = int(need * 1.2) + 16
        i = rng.integers(0, n, size=batch)
        j = rng.integers(0, n, size=batch)
        keep = i != j
        lo, hi = np.minimum(i[keep], j[keep]), np.maximum(i[keep], j[keep])
        keys = lo * n + hi
        keys = keys[~_isin_sorted(keys, blocked)]
        drawn += batch
        accepted += len(keys)
        if distinct:
            _, first = np.unique(keys, return_index=True)
            keys = keys[np.sort(first)]
            keys = keys[~np.isin(keys, out)]
        out = np.concatenate([out, keys[:need]])
        if drawn > 10_000 and accepted / drawn < 0.01 and len(out) < count:
            if n > _ENUMERATE_MAX_NODES:
                raise GraphError("graph too dense for rejection sampling of non-edges")
            out = _complement_draw(n, blocked, out, count, distinct, rng)
            break
    return np.stack([out // n, out % n], axis=1)


def _complement_draw(n, blocked, have, count, distinct, rng):
    iu, ju = np.triu_indices(n, k=1)
    comp = iu * n + ju
    comp = comp[~_isin_sorted(comp, blocked)]
    need = count - len(have)
    if distinct:
        comp = comp[~np.isin(comp, have)]
        extra = rng.choice(comp, size=need, replace=False)
    else:
        extra = rng.choice(comp, size=need, replace=True)
    return np.concatenate([have, extra])


# ---------------------------------------------------------------- splitting

@dataclass(frozen=True, eq=False)
class EdgeSplit:
    train_graph: Graph
    test_edges: np.ndarray
    test_non_edges: np.ndarray
    seed: int
    achieved_fraction: float
    requested_fraction: float
    pool_short: bool = False
    negatives_short: bool = False

    def to_json(self) -> dict:
        return {
            "n_nodes": self.train_graph.n_nodes,
            "train_edges": self.train_graph.edges.tolist(),
            "test_edges": self.test_edges.tolist(),
            "test_non_edges": self.test_non_edges.tolist(),
            "seed": self.seed,
            "achieved_fraction": self.achieved_fraction,
            "requested_fraction": self.requested_fraction,
            "pool_short": self.pool_short,
            "negatives_short": self.negatives_short,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EdgeSplit":
        n = int(payload["n_nodes"])
        return cls(
            train_graph=Graph.from_pairs(n, payload["train_edges"]),
            test_edges=_as_edge_array(payload["test_edges"]),
            test_non_edges=_as_edge_array(payload["test_non_edges"]),
            seed=int(payload["seed"]),
            achieved_fraction=float(payload["achieved_fraction"]),
            requested_fraction=float(payload.get("requested_fraction", payload["achieved_fraction"])),
            pool_short=bool(payload.get("pool_short", False)),
            negatives_short=bool(payload.get("negatives_short", False)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EdgeSplit":
        return cls.from_json(json.loads(Path(path).read_text()))


def random_spanning_tree(g: Graph, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask over ``g.edges`` marking a Kruskal tree built from a
    uniformly shuffled edge order."""
    order = rng.permutation(g.n_edges)
    uf = UnionFind(g.n_nodes)
    in_tree = np.zeros(g.n_edges, dtype=bool)
    edges = g.edges.tolist()
    for e in order.tolist():
        i, j = edges[e]
        if uf.union(i, j):
            in_tree[e] = True
    return in_tree


def split_edges(g: Graph, holdout_fraction: float = 0.5, seed: int = 0) -> EdgeSplit:
    """Hold out ``floor(holdout_fraction * |E|)`` edges while keeping the
    training graph connected, plus as many distinct non-edges of ``g``."""
    if not 0.0 < holdout_fraction < 1.0:
        raise GraphError("holdout_fraction must lie in (0, 1)")
    request = int(np.floor(holdout_fraction * g.n_edges))
    if request < 1:
        raise GraphError("holdout request rounds to zero edges")
    if not g.is_connected():
        raise GraphError("input graph is disconnected")

    rng = np.random.default_rng(seed)
    in_tree = random_spanning_tree(g, rng)
    pool = np.flatnonzero(~in_tree)
    short = len(pool) < request
    if short:
        logger.warning("only %d non-tree edges available, %d requested", len(pool), request)
        removed = pool
    else:
        removed = np.sort(rng.choice(pool, size=request, replace=False))
    mask = np.zeros(g.n_edges, dtype=bool)
    mask[removed] = True

    test_edges = g.edges[mask]
    train = Graph.from_pairs(g.n_nodes, g.edges[~mask])
    n_neg = min(len(test_edges), g.n_non_edges)
    if n_neg < len(test_edges):
        logger.warning("graph has only %d non-edges, %d requested", n_neg, len(test_edges))
    negatives = sample_negatives(g, n_neg, seed=rng, distinct=True) if n_neg else np.empty((0, 2), np.int64)
    return EdgeSplit(
        train_graph=train,
        test_edges=test_edges,
        test_non_edges=negatives,
        seed=int(seed),
        achieved_fraction=len(test_edges) / g.n_edges,
        requested_fraction=float(holdout_fraction),
        pool_short=bool(short),
        negatives_short=bool(n_neg < len(test_edges)),
    )


# ---------------------------------------------------------------- synthetic

def stochastic_block_model(sizes, p_in: float, p_out: float, seed=None) -> tuple[Graph, np.ndarray]:
    """Planted-partition graph; returns the graph and the block label per node."""
    rng = np.random.default_rng(seed)
    blocks = np.repeat(np.arange(len(sizes)), sizes)
    n = len(blocks)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(blocks[iu] == blocks[ju], p_in, p_out)
    hit = rng.random(len(iu)) < prob
    return Graph.from_pairs(n, np.stack([iu[hit], ju[hit]], axis=1)), blocks
