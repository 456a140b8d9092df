"""Directed-graph representation, synthetic graph families, and recovery metrics.

Adjacency convention used throughout the package: a graph over variables
``0..m-1`` is an ``(m, m)`` boolean matrix ``a`` with ``a[i, j] = True`` iff
variable ``j`` is a direct parent (cause) of variable ``i``.  An edge written
``i -> j`` therefore sets ``a[j, i]``.  Diagonals are always False.
"""

from __future__ import annotations

import numpy as np

SYNTHETIC_KINDS = ("chain", "bidiag", "jungle", "collider", "full", "tree",
                   "fork", "confounder")

EPS_CE = 1e-8


class CycleError(ValueError):
    """Raised when an operation that needs a DAG receives a cyclic graph."""


class DegenerateMetricError(ValueError):
    """Raised when a ranking metric is undefined (no edges or no non-edges)."""


def _empty(m: int) -> np.ndarray:
    return np.zeros((m, m), dtype=bool)


def _add_edge(a: np.ndarray, src: int, dst: int) -> None:
    a[dst, src] = True


def gen_synthetic(kind: str, m: int) -> np.ndarray:
    """Build the canonical DAG of a named synthetic family over m nodes.

    Nodes are emitted in topological order.  Families:

    * ``chain``      0 -> 1 -> ... -> m-1
    * ``bidiag``     chain plus all 2-hop edges i -> i+2
    * ``tree``       balanced binary tree, parent(i) = (i-1)//2
    * ``jungle``     tree plus an edge from each node's grandparent
    * ``collider``   every node 0..m-2 points into node m-1
    * ``full``       all edges i -> j for i < j
    * ``fork``       node 0 points into every other node
    * ``confounder`` the 3-node triangle 0 -> 1, 0 -> 2, 1 -> 2 (m = 3 only)
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown graph family {kind!r}")
    min_m = 3 if kind in ("jungle", "tree", "fork", "confounder") else 2
    if m < min_m:
        raise ValueError(f"family {kind!r} needs m >= {min_m}, got {m}")
    if kind == "confounder" and m != 3:
        raise ValueError(f"family 'confounder' is defined for m = 3 only, got {m}")

    a = _empty(m)
    if kind == "chain":
        for i in range(m - 1):
            _add_edge(a, i, i + 1)
    elif kind == "bidiag":
        for i in range(m - 1):
            _add_edge(a, i, i + 1)
        for i in range(m - 2):
            _add_edge(a, i, i + 2)
    elif kind in ("tree", "jungle"):
        for i in range(1, m):
            _add_edge(a, (i - 1) // 2, i)
        if kind == "jungle":
            for i in range(3, m):
                grandparent = ((i - 1) // 2 - 1) // 2
                _add_edge(a, grandparent, i)
    elif kind == "collider":
        for i in range(m - 1):
            _add_edge(a, i, m - 1)
    elif kind == "full":
        for i in range(m):
            for j in range(i + 1, m):
                _add_edge(a, i, j)
    elif kind == "fork":
        for i in range(1, m):
            _add_edge(a, 0, i)
    elif kind == "confounder":
        _add_edge(a, 0, 1)
        _add_edge(a, 0, 2)
        _add_edge(a, 1, 2)
    return a


def parse_graph_name(name: str) -> tuple[str, int]:
    """Split a compact graph name like ``chain3`` into ``("chain", 3)``."""
    kind = name.rstrip("0123456789")
    digits = name[len(kind):]
    if kind not in SYNTHETIC_KINDS or not digits:
        raise ValueError(f"cannot parse graph name {name!r}")
    return kind, int(digits)


def check_adjacency(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    if a.dtype != bool:
        a = a.astype(bool)
    if np.diag(a).any():
        raise ValueError("adjacency has a self-loop on the diagonal")
    return a


def is_dag(a: np.ndarray) -> bool:
    a = check_adjacency(a)
    try:
        topo_order(a)
    except CycleError:
        return False
    return True


def topo_order(a: np.ndarray) -> list[int]:
    """Topological order (parents before children), lowest index first.

    Raises CycleError naming one concrete cycle if the graph is cyclic.
    """
    a = check_adjacency(a)
    m = a.shape[0]
    indegree = a.sum(axis=1).astype(int)  # row i counts parents of i
    ready = sorted(np.flatnonzero(indegree == 0).tolist())
    order: list[int] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        children = np.flatnonzero(a[:, node])
        for child in children:
            indegree[child] -= 1
            if indegree[child] == 0:
                # keep deterministic lowest-index-first emission
                lo = 0
                while lo < len(ready) and ready[lo] < child:
                    lo += 1
                ready.insert(lo, int(child))
    if len(order) < m:
        raise CycleError(f"graph is cyclic: contains cycle {_find_cycle(a)}")
    return order


def _find_cycle(a: np.ndarray) -> list[int]:
    """Return one directed cycle (node list, first == last) from a cyclic graph."""
    m = a.shape[0]
    color = [0] * m  # 0 unvisited, 1 on stack, 2 done
    stack: list[int] = []

    def visit(u: int) -> list[int] | None:
        color[u] = 1
        stack.append(u)
        for v in np.flatnonzero(a[:, u]):  # children of u
            v = int(v)
            if color[v] == 1:
                return stack[stack.index(v):] + [v]
            if color[v] == 0:
                found = visit(v)
                if found is not None:
                    return found
        color[u] = 2
        stack.pop()
        return None

    for start in range(m):
        if color[start] == 0:
            cycle = visit(start)
            if cycle is not None:
                return cycle
    raise AssertionError("no cycle found in graph reported cyclic")


def _check_same_m(a: np.ndarray, b: np.ndarray) -> int:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a.shape[0]


def shd(pred: np.ndarray, truth: np.ndarray, mode: str = "reversal_is_one") -> int:
    """Structural Hamming distance between two directed graphs.

    ``reversal_is_one`` counts each missing, extra, or reversed edge once;
    ``directed_hamming`` counts differing off-diagonal entries, so a
    reversed edge costs 2.
    """
    pred = check_adjacency(pred)
    truth = check_adjacency(truth)
    _check_same_m(pred, truth)
    diff = pred != truth
    hamming = int(diff.sum())
    if mode == "directed_hamming":
        return hamming
    if mode != "reversal_is_one":
        raise ValueError(f"unknown shd mode {mode!r}")
    # entry (i, j) flags a reversed pair exactly once: pred has the edge
    # j->i where truth has i->j; hamming counted both flipped cells.
    reversed_pairs = pred & ~truth & truth.T & ~pred.T
    return hamming - int(reversed_pairs.sum())


def off_diagonal_mask(m: int) -> np.ndarray:
    return ~np.eye(m, dtype=bool)


def auroc(scores: np.ndarray, truth: np.ndarray) -> float:
    """Probability a random true-edge entry outscores a random non-edge entry.

    Exact Mann-Whitney U statistic over off-diagonal entries, ties counted
    one half.  Undefined (raises) when the truth has no edges or no
    non-edges off the diagonal.
    """
    scores = np.asarray(scores, dtype=float)
    truth = check_adjacency(truth)
    m = _check_same_m(scores, truth)
    off = off_diagonal_mask(m)
    s = scores[off]
    t = truth[off]
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateMetricError(
            f"auroc undefined: truth has {n_pos} edges and {n_neg} non-edges")
    ranks = _average_ranks(s)
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average rank of their group."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=float)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def edge_cross_entropy(scores: np.ndarray, truth: np.ndarray) -> float:
    """Mean binary cross-entropy of edge scores against the true adjacency.

    Scores are clipped into [EPS_CE, 1 - EPS_CE] before taking logs; the
    mean runs over all off-diagonal entries.
    """
    scores = np.asarray(scores, dtype=float)
    truth = check_adjacency(truth)
    m = _check_same_m(scores, truth)
    off = off_diagonal_mask(m)
    s = np.clip(scores[off], EPS_CE, 1.0 - EPS_CE)
    t = truth[off].astype(float)
    return float(np.mean(-(t * np.log(s) + (1.0 - t) * np.log1p(-s))))


def edges(a: np.ndarray) -> list[tuple[int, int]]:
    """List directed edges as (src, dst) pairs, sorted."""
    a = check_adjacency(a)
    dst, src = np.nonzero(a)
    return sorted(zip(src.tolist(), dst.tolist()))


def adjacency_from_edges(m: int, edge_list) -> np.ndarray:
    a = _empty(m)
    for src, dst in edge_list:
        if src == dst:
            raise ValueError(f"self-loop {src} -> {dst}")
        _add_edge(a, src, dst)
    return a


def format_edge_list(a: np.ndarray) -> str:
    """Render a graph in the edge-list text format (`# m=<M>` header)."""
    lines = [f"# m={a.shape[0]}"]
    lines += [f"{src} -> {dst}" for src, dst in edges(a)]
    return "\n".join(lines) + "\n"


def parse_edge_list(text: str) -> np.ndarray:
    m = None
    pairs: list[tuple[int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("m="):
                m = int(body[2:])
            continue
        try:
            src_s, arrow, dst_s = line.split()
            if arrow != "->":
                raise ValueError
            pairs.append((int(src_s), int(dst_s)))
        except ValueError:
            raise ValueError(f"line {lineno}: expected 'i -> j', got {raw!r}") from None
    if m is None:
        raise ValueError("missing '# m=<M>' header")
    return adjacency_from_edges(m, pairs)
