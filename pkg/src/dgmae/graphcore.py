"""Sparse undirected graphs, normalized operators, homophily metrics, synthetic data and file I/O."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class GraphError(ValueError):
    """Base error for graph construction and graph files. ``code`` names the failure."""

    code = "graph_error"


class MalformedHeaderError(GraphError):
    code = "malformed_header"


class MalformedBodyError(GraphError):
    code = "malformed_body"


class IndexOutOfRangeError(GraphError):
    code = "index_out_of_range"


class AsymmetricEdgeError(GraphError):
    code = "asymmetric_edge"


class DuplicateEdgeError(GraphError):
    code = "duplicate_edge"


class SelfLoopError(GraphError):
    code = "self_loop"


class InfeasibleSpecError(GraphError):
    code = "infeasible_spec"


class ZeroNormWarning(UserWarning):
    pass


class Graph:
    """Immutable undirected graph stored in compressed sparse row form.

    Every undirected edge is materialized as two arcs. Row ``i`` of the CSR
    structure lists the neighbors ``N(i)`` in increasing order.
    """

    __slots__ = ("n", "indptr", "indices", "degree", "_dst", "_src")

    def __init__(self, n: int, indptr: np.ndarray, indices: np.ndarray):
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        if indptr.shape != (n + 1,) or indptr[0] != 0 or indptr[-1] != indices.size:
            raise GraphError("inconsistent CSR arrays")
        if indices.size and (indices.min() < 0 or indices.max() >= n):
            raise IndexOutOfRangeError("neighbor index out of range")
        dst = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))
        if np.any(dst == indices):
            raise SelfLoopError("self-loops are not allowed")
        keys = dst * n + indices
        if np.unique(keys).size != keys.size:
            raise DuplicateEdgeError("duplicate edges")
        rev = np.sort(indices * n + dst)
        if not np.array_equal(np.sort(keys), rev):
            raise AsymmetricEdgeError("adjacency is not symmetric")
        for arr in (indptr, indices, dst):
            arr.setflags(write=False)
        self.n = int(n)
        self.indptr = indptr
        self.indices = indices
        self._dst = dst
        self._src = indices
        degree = np.diff(indptr)
        degree.setflags(write=False)
        self.degree = degree

    @classmethod
    def from_edges(cls, n: int, edges) -> "Graph":
        """Build from undirected pairs, each listed once in either orientation."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise IndexOutOfRangeError("edge endpoint out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise SelfLoopError("self-loops are not allowed")
        lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
        if np.unique(lo * n + hi).size != lo.size:
            raise DuplicateEdgeError("duplicate undirected edge")
        rows = np.concatenate([lo, hi])
        cols = np.concatenate([hi, lo])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return cls(n, indptr, cols)

    @property
    def num_arcs(self) -> int:
        return int(self.indices.size)

    @property
    def num_edges(self) -> int:
        return self.num_arcs // 2

    def arcs(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed arcs as ``(dst, src)``: arc ``k`` carries a message from ``src[k]`` into ``dst[k]``."""
        return self._dst, self._src

    def edge_list(self) -> np.ndarray:
        """Undirected edges ``(u, v)`` with ``u < v``, sorted."""
        keep = self._dst < self._src
        return np.stack([self._dst[keep], self._src[keep]], axis=1)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        a[self._dst, self._src] = 1.0
        return a

    def permute(self, perm) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        e = self.edge_list()
        return Graph.from_edges(self.n, perm[e])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def __hash__(self):
        return hash((self.n, self.indices.tobytes()))

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, edges={self.num_edges})"


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    C: int
    h: float
    avg_degree: float
    feature_dim: int
    class_sep: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.h <= 1.0:
            raise InfeasibleSpecError("h must lie in [0, 1]")
        if self.C < 1 or self.n < self.C:
            raise InfeasibleSpecError("need n >= C >= 1")
        if self.avg_degree <= 0:
            raise InfeasibleSpecError("avg_degree must be positive")
        if self.class_sep < 0:
            raise InfeasibleSpecError("class_sep must be non-negative")
        if self.feature_dim < self.C:
            raise InfeasibleSpecError("feature_dim must be at least C to separate class means")


def _check_features(g: Graph, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != g.n:
        raise ValueError(f"feature matrix must have {g.n} rows, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite entries")
    return X


def _arc_norm(g: Graph) -> np.ndarray:
    dst, src = g.arcs()
    deg = g.degree.astype(np.float64)
    return 1.0 / np.sqrt(deg[dst] * deg[src])


def sym_norm_adjacency_apply(g: Graph, X) -> np.ndarray:
    """Return ``D^{-1/2} A D^{-1/2} X``; isolated nodes get zero rows."""
    X = _check_features(g, X)
    dst, src = g.arcs()
    out = np.zeros_like(X)
    np.add.at(out, dst, X[src] * _arc_norm(g)[:, None])
    return out


def laplacian_discrepancy(g: Graph, X) -> np.ndarray:
    """High-pass filtered features ``(I - D^{-1/2} A D^{-1/2}) X``.

    An isolated node keeps its own row since its neighbor sum is empty.
    """
    X = _check_features(g, X)
    return X - sym_norm_adjacency_apply(g, X)


def edge_homophily(g: Graph, y) -> float:
    y = np.asarray(y)
    if y.shape != (g.n,):
        raise ValueError(f"labels must have length {g.n}")
    if g.num_edges == 0:
        raise ValueError("edge homophily is undefined on a graph without edges")
    e = g.edge_list()
    return float(np.mean(y[e[:, 0]] == y[e[:, 1]]))


def local_feature_homophily(g: Graph, X) -> float:
    """Mean over nodes of the average cosine similarity to neighbors.

    Degree-0 nodes contribute 0. A cosine involving a zero-norm row is
    counted as 0 and reported through a :class:`ZeroNormWarning`.
    """
    X = _check_features(g, X)
    dst, src = g.arcs()
    norms = np.linalg.norm(X, axis=1)
    denom = norms[dst] * norms[src]
    dots = np.einsum("ij,ij->i", X[dst], X[src])
    zero = denom == 0
    cos = np.where(zero, 0.0, dots / np.where(zero, 1.0, denom))
    n_zero = int(zero.sum())
    if n_zero:
        warnings.warn(f"{n_zero} arcs touch zero-norm feature rows; counted as 0", ZeroNormWarning, stacklevel=2)
    per_node = np.zeros(g.n)
    np.add.at(per_node, dst, cos)
    deg = g.degree
    per_node = np.where(deg > 0, per_node / np.maximum(deg, 1), 0.0)
    return float(per_node.mean()) if g.n else 0.0


def generate_synthetic(spec: SyntheticSpec) -> tuple[Graph, np.ndarray, np.ndarray]:
    """Homophily-controlled random graph with Gaussian-mixture features.

    Labels are assigned round-robin. Each edge attempt picks ``u`` uniformly,
    then ``v`` from ``u``'s class with probability ``h`` and from another class
    otherwise (another class uniformly, then a member uniformly);
    self-loops and repeats are skipped. Class means sit on scaled
    coordinate axes so any two are exactly ``class_sep`` apart.
    """
    n, C, h = spec.n, spec.C, spec.h
    y = np.arange(n, dtype=np.int64) % C
    members = [np.flatnonzero(y == c) for c in range(C)]
    if h < 1.0 and C == 1:
        raise InfeasibleSpecError("cross-class edges requested but only one class exists")
    if h > 0.0 and all(m.size < 2 for m in members):
        raise InfeasibleSpecError("same-class edges requested but every class is a singleton")

    rng = np.random.default_rng(spec.seed)
    attempts = math.ceil(n * spec.avg_degree / 2)
    seen: set[tuple[int, int]] = set()
    edges = []
    for _ in range(attempts):
        u = int(rng.integers(n))
        cu = int(y[u])
        if rng.random() < h:
            pool = members[cu]
            if pool.size < 2:
                continue
            v = int(pool[rng.integers(pool.size)])
        else:
            c = int(rng.integers(C - 1))
            c = c if c < cu else c + 1
            v = int(members[c][rng.integers(members[c].size)])
        if u == v:
            continue
        key = (u, v) if u < v else (v, u)
        if key in seen:
            continue
        seen.add(key)
        edges.append(key)
    g = Graph.from_edges(n, np.array(edges, dtype=np.int64).reshape(-1, 2))

    means = np.zeros((C, spec.feature_dim))
    means[np.arange(C), np.arange(C)] = spec.class_sep / math.sqrt(2.0)
    X = means[y] + rng.standard_normal((n, spec.feature_dim))
    return g, X, y


def save_graph(path, g: Graph, X, y=None, num_classes: int | None = None) -> None:
    """Write the text graph format: header, feature rows, optional labels, ``edges``, pairs."""
    X = _check_features(g, X)
    if y is not None:
        y = np.asarray(y, dtype=np.int64)
        c = int(num_classes if num_classes is not None else y.max() + 1)
        c = max(c, 1)
    else:
        c = 0
    lines = [f"n={g.n} d={X.shape[1]} c={c}"]
    lines.extend(" ".join(repr(v) for v in row) for row in X.tolist())
    if c:
        lines.extend(str(int(v)) for v in y)
    lines.append("edges")
    lines.extend(f"{u} {v}" for u, v in g.edge_list().tolist())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int, int]:
    fields = {}
    for tok in line.split():
        key, sep, val = tok.partition("=")
        if not sep or key in fields:
            raise MalformedHeaderError(f"bad header token {tok!r}")
        try:
            fields[key] = int(val)
        except ValueError:
            raise MalformedHeaderError(f"non-integer header value {tok!r}") from None
    if set(fields) != {"n", "d", "c"}:
        raise MalformedHeaderError("header must be 'n=<int> d=<int> c=<int>'")
    n, d, c = fields["n"], fields["d"], fields["c"]
    if n < 0 or d < 1 or c < 0:
        raise MalformedHeaderError("header values out of range")
    return n, d, c


def load_graph(path) -> tuple[Graph, np.ndarray, np.ndarray | None]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise MalformedHeaderError("empty file")
    n, d, c = _parse_header(lines[0])
    pos = 1
    try:
        X = np.array([[float(t) for t in lines[pos + i].split()] for i in range(n)], dtype=np.float64).reshape(n, d)
    except (IndexError, ValueError):
        raise MalformedBodyError(f"expected {n} feature rows of width {d}") from None
    if not np.all(np.isfinite(X)):
        raise MalformedBodyError("non-finite feature value")
    pos += n
    y = None
    if c:
        try:
            y = np.array([int(lines[pos + i]) for i in range(n)], dtype=np.int64)
        except (IndexError, ValueError):
            raise MalformedBodyError(f"expected {n} label lines") from None
        if y.min(initial=0) < 0 or y.max(initial=0) >= c:
            raise IndexOutOfRangeError("label outside [0, c)")
        pos += n
    if pos >= len(lines) or lines[pos].strip() != "edges":
        raise MalformedBodyError("missing 'edges' sentinel")
    pairs = []
    for lineno, line in enumerate(lines[pos + 1 :], start=pos + 2):
        if not line.strip():
            continue
        toks = line.split()
        if len(toks) != 2:
            raise MalformedBodyError(f"line {lineno}: expected 'u v'")
        try:
            u, v = int(toks[0]), int(toks[1])
        except ValueError:
            raise MalformedBodyError(f"line {lineno}: non-integer endpoint") from None
        if not (0 <= u < n and 0 <= v < n):
            raise IndexOutOfRangeError(f"line {lineno}: index out of range ({u}, {v}) for n={n}")
        if u == v:
            raise SelfLoopError(f"line {lineno}: self-loop on {u}")
        if u > v:
            raise AsymmetricEdgeError(f"line {lineno}: edges must be listed once with u < v")
        pairs.append((u, v))
    g = Graph.from_edges(n, np.array(pairs, dtype=np.int64).reshape(-1, 2))
    return g, X, y
