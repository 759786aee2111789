"""Homogeneous graph views, seeded subgraph sampling, and graph serialization.

A HomoGraph keeps one node per circuit node with a type code (net 0,
device 1, pin 2), CSR adjacency built from structural edges only, and an
origin map back to the source graph.  Candidate coupling edges never enter
the adjacency.
"""

from __future__ import annotations

import json

import numpy as np
import scipy.sparse as sp

from . import _binio
from ._errors import ContractError, GraphFormatError
from .netlist import _NODE_CODE

_HOMO_MAGIC = b"CGL1"
_HOMO_VERSION = 1


class HomoGraph:
    """Undirected homogeneous graph with type codes and CSR adjacency."""

    def __init__(self, x, indptr, indices, origin=None):
        self.x = np.asarray(x, dtype=np.int64)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        if origin is None:
            origin = np.arange(len(self.x), dtype=np.int64)
        self.origin = np.asarray(origin, dtype=np.int64)

    @property
    def n(self):
        return len(self.x)

    @property
    def degrees(self):
        return np.diff(self.indptr)

    def neighbors(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @property
    def types(self):
        return self.x

    @staticmethod
    def from_edges(x, pairs, origin=None):
        """Build from an iterable of undirected (i, j) pairs, deduplicated."""
        x = np.asarray(x, dtype=np.int64)
        n = len(x)
        seen = set()
        half = []
        for i, j in pairs:
            if not (0 <= i < n and 0 <= j < n):
                raise ContractError(f"edge ({i}, {j}) references a missing node")
            if i == j:
                raise ContractError("self loops are not allowed")
            key = (min(i, j), max(i, j))
            if key in seen:
                continue
            seen.add(key)
            half.append(key)
        counts = np.zeros(n, dtype=np.int64)
        for i, j in half:
            counts[i] += 1
            counts[j] += 1
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        indices = np.zeros(int(indptr[-1]), dtype=np.int64)
        cursor = indptr[:-1].copy()
        for i, j in half:
            indices[cursor[i]] = j
            cursor[i] += 1
            indices[cursor[j]] = i
            cursor[j] += 1
        g = HomoGraph(x, indptr, indices, origin)
        for i in range(n):
            row = g.neighbors(i)
            row.sort()
        return g

    def validate(self):
        n = self.n
        if len(self.indptr) != n + 1 or self.indptr[0] != 0:
            raise ContractError("malformed adjacency index")
        if np.any(np.diff(self.indptr) < 0) or self.indptr[-1] != len(self.indices):
            raise ContractError("malformed adjacency index")
        if n and not np.isin(self.x, (0, 1, 2)).all():
            raise ContractError("type codes must be 0, 1, or 2")
        if len(self.origin) != n:
            raise ContractError("origin map length mismatch")
        pairs = set()
        for i in range(n):
            row = self.neighbors(i)
            if len(row) and (row.min() < 0 or row.max() >= n):
                raise ContractError(f"row {i} references a missing node")
            if np.any(np.diff(row) <= 0):
                raise ContractError(f"row {i} is not strictly sorted")
            if np.any(row == i):
                raise ContractError(f"row {i} contains a self loop")
            for j in row:
                pairs.add((i, int(j)))
        for i, j in pairs:
            if (j, i) not in pairs:
                raise ContractError(f"adjacency asymmetric at ({i}, {j})")
        return self

    def mean_operator(self):
        """Sparse row-normalized adjacency D^-1 A; zero rows for isolated nodes."""
        deg = self.degrees.astype(np.float64)
        scale = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        data = np.repeat(scale, self.degrees)
        return sp.csr_matrix((data, self.indices, self.indptr),
                             shape=(self.n, self.n))

    def __eq__(self, other):
        if not isinstance(other, HomoGraph):
            return NotImplemented
        return (np.array_equal(self.x, other.x)
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.origin, other.origin))

    __hash__ = None

    def __repr__(self):
        return f"HomoGraph(n={self.n}, edges={len(self.indices) // 2})"

    # ---- serialization ----

    def to_bytes(self):
        sections = []
        w = _binio.ByteWriter()
        w.u32(self.n)
        sections.append(w.getvalue())
        w = _binio.ByteWriter()
        for code in self.x:
            w.u8(int(code))
        sections.append(w.getvalue())
        w = _binio.ByteWriter()
        w.u32(len(self.indices))
        for v in self.indptr:
            w.u32(int(v))
        for v in self.indices:
            w.u32(int(v))
        sections.append(w.getvalue())
        w = _binio.ByteWriter()
        for v in self.origin:
            w.u32(int(v))
        sections.append(w.getvalue())
        out = _binio.ByteWriter()
        for s in sections:
            out.u32(len(s))
            out.raw(s)
        return _binio.frame(_HOMO_MAGIC, _HOMO_VERSION, out.getvalue())

    @staticmethod
    def from_bytes(data):
        version, payload = _binio.unframe(data, _HOMO_MAGIC)
        if version != _HOMO_VERSION:
            raise GraphFormatError(f"unsupported graph version {version}", offset=4)
        outer = _binio.ByteReader(payload, base=8)
        r = outer.sub(outer.u32("section length"), "count section")
        n = r.u32("node count")
        r.expect_end()
        r = outer.sub(outer.u32("section length"), "type section")
        x = np.array([r.u8("type code") for _ in range(n)], dtype=np.int64)
        r.expect_end()
        r = outer.sub(outer.u32("section length"), "adjacency section")
        nnz = r.u32("edge count")
        indptr = np.array([r.u32("indptr") for _ in range(n + 1)], dtype=np.int64)
        indices = np.array([r.u32("index") for _ in range(nnz)], dtype=np.int64)
        r.expect_end()
        r = outer.sub(outer.u32("section length"), "origin section")
        origin = np.array([r.u32("origin") for _ in range(n)], dtype=np.int64)
        r.expect_end()
        outer.expect_end()
        return HomoGraph(x, indptr, indices, origin).validate()

    def to_json_dict(self):
        return {
            "version": _HOMO_VERSION,
            "n": self.n,
            "x": self.x.tolist(),
            "adj": [self.neighbors(i).tolist() for i in range(self.n)],
            "origin": self.origin.tolist(),
        }

    def to_json(self, indent=None):
        separators = (",", ":") if indent is None else None
        return json.dumps(self.to_json_dict(), indent=indent, separators=separators)

    @staticmethod
    def from_json_dict(doc):
        try:
            if doc["version"] != _HOMO_VERSION:
                raise GraphFormatError(f"unsupported graph version {doc['version']!r}")
            x = doc["x"]
            adj = doc["adj"]
            origin = doc["origin"]
            if len(adj) != doc["n"] or len(x) != doc["n"]:
                raise GraphFormatError("inconsistent node counts")
            indptr = np.zeros(len(adj) + 1, dtype=np.int64)
            indices = []
            for i, row in enumerate(adj):
                indices.extend(int(v) for v in row)
                indptr[i + 1] = len(indices)
        except GraphFormatError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"malformed graph document: {exc}") from None
        return HomoGraph(x, indptr, np.array(indices, dtype=np.int64), origin).validate()

    @staticmethod
    def from_json(text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"invalid json: {exc}") from None
        return HomoGraph.from_json_dict(doc)


def homogenize(g):
    """One homogeneous node per circuit node; structural edges only."""
    x = np.array([_NODE_CODE[nd.kind] for nd in g.nodes], dtype=np.int64)
    pairs = [(e.a, e.b) for e in g.struct_edges]
    return HomoGraph.from_edges(x, pairs).validate()


class Subgraph:
    """Induced subgraph around 1 or 2 anchor nodes, with a local index map."""

    def __init__(self, node_ids, anchors, x, indptr, indices):
        self.node_ids = np.asarray(node_ids, dtype=np.int64)
        self.anchors = tuple(int(a) for a in anchors)
        self.x = np.asarray(x, dtype=np.int64)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.local_of = {int(v): i for i, v in enumerate(self.node_ids)}

    @property
    def n(self):
        return len(self.node_ids)

    @property
    def types(self):
        return self.x

    @property
    def degrees(self):
        return np.diff(self.indptr)

    def neighbors(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @property
    def anchor_locals(self):
        return tuple(self.local_of[a] for a in self.anchors)

    def mean_operator(self):
        deg = self.degrees.astype(np.float64)
        scale = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        data = np.repeat(scale, self.degrees)
        return sp.csr_matrix((data, self.indices, self.indptr),
                             shape=(self.n, self.n))


def _induce(g, node_ids, anchors):
    node_ids = np.array(sorted(node_ids), dtype=np.int64)
    local = {int(v): i for i, v in enumerate(node_ids)}
    indptr = np.zeros(len(node_ids) + 1, dtype=np.int64)
    indices = []
    for i, gid in enumerate(node_ids):
        row = [local[int(j)] for j in g.neighbors(int(gid)) if int(j) in local]
        indices.extend(row)
        indptr[i + 1] = len(indices)
    x = g.x[node_ids]
    return Subgraph(node_ids, anchors, x, indptr, np.array(indices, dtype=np.int64))


def _sample_bfs(g, anchors, hops, fanout, seed):
    if hops < 0:
        raise ContractError("hops must be nonnegative")
    if fanout < 1:
        raise ContractError("fanout must be at least 1")
    for a in anchors:
        if not 0 <= a < g.n:
            raise ContractError(f"anchor id {a} out of range")
    rng = np.random.default_rng(np.random.PCG64(seed))
    selected = set(int(a) for a in anchors)
    frontier = sorted(selected)
    for _ in range(hops):
        next_frontier = []
        for node in frontier:
            candidates = [int(j) for j in g.neighbors(node) if int(j) not in selected]
            if len(candidates) > fanout:
                picks = rng.choice(len(candidates), size=fanout, replace=False)
                chosen = [candidates[k] for k in sorted(picks)]
            else:
                chosen = candidates
            for j in chosen:
                selected.add(j)
                next_frontier.append(j)
        frontier = next_frontier
    return _induce(g, selected, anchors)


def sample_link_subgraph(g, anchor_pair, hops, fanout, seed):
    """Seeded BFS ball around an edge's two endpoints."""
    u, v = anchor_pair
    return _sample_bfs(g, (int(u), int(v)), hops, fanout, seed)


def sample_node_subgraph(g, anchor, hops, fanout, seed):
    """Seeded BFS ball around one node."""
    return _sample_bfs(g, (int(anchor),), hops, fanout, seed)
