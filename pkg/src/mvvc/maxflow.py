"""Augmenting-path max-flow with search-tree reuse (Boykov-Kolmogorov).

The graph lives in flat arrays (CSR arcs grouped by tail node) so the
solver can be compiled with numba.  Terminal links are stored as one signed
residual per node: positive means residual capacity from the source,
negative means residual capacity to the sink.
"""

from __future__ import annotations

import numba
import numpy as np

_FREE, _SOURCE, _SINK = 0, 1, 2
_TERMINAL, _ORPHAN, _NONE = -1, -2, -3
_INF_D = 1 << 40


@numba.njit(cache=True)
def _bk_maxflow(first, head, rev, cap, tr_cap):
    n = tr_cap.shape[0]
    tree = np.zeros(n, np.int8)
    parent = np.full(n, _NONE, np.int64)
    ts = np.zeros(n, np.int64)
    dist = np.zeros(n, np.int64)
    in_q = np.zeros(n, np.bool_)
    queue = np.empty(n + 1, np.int64)   # circular FIFO of active nodes
    q_head = 0
    q_len = 0
    orphans = np.empty(n + 1, np.int64)
    flow = 0.0

    for v in range(n):
        if tr_cap[v] > 0:
            tree[v] = _SOURCE
        elif tr_cap[v] < 0:
            tree[v] = _SINK
        else:
            continue
        parent[v] = _TERMINAL
        dist[v] = 1
        queue[(q_head + q_len) % (n + 1)] = v
        q_len += 1
        in_q[v] = True

    time = 0
    while True:
        # ---- growth ----
        mid = -1
        while q_len > 0:
            a = queue[q_head]
            if tree[a] == _FREE:
                q_head = (q_head + 1) % (n + 1)
                q_len -= 1
                in_q[a] = False
                continue
            ta = tree[a]
            for e in range(first[a], first[a + 1]):
                if ta == _SOURCE:
                    if cap[e] <= 0:
                        continue
                elif cap[rev[e]] <= 0:
                    continue
                b = head[e]
                if tree[b] == _FREE:
                    tree[b] = ta
                    parent[b] = rev[e]
                    ts[b] = ts[a]
                    dist[b] = dist[a] + 1
                    if not in_q[b]:
                        queue[(q_head + q_len) % (n + 1)] = b
                        q_len += 1
                        in_q[b] = True
                elif tree[b] != ta:
                    mid = e if ta == _SOURCE else rev[e]
                    break
                elif ts[b] <= ts[a] and dist[b] > dist[a]:
                    parent[b] = rev[e]
                    ts[b] = ts[a]
                    dist[b] = dist[a] + 1
            if mid >= 0:
                break
            q_head = (q_head + 1) % (n + 1)
            q_len -= 1
            in_q[a] = False
        if mid < 0:
            break
        time += 1

        # ---- augmentation ----
        i = head[rev[mid]]   # source-tree endpoint
        j = head[mid]        # sink-tree endpoint
        bn = cap[mid]
        v = i
        while parent[v] != _TERMINAL:
            e = parent[v]
            if cap[rev[e]] < bn:
                bn = cap[rev[e]]
            v = head[e]
        if tr_cap[v] < bn:
            bn = tr_cap[v]
        v = j
        while parent[v] != _TERMINAL:
            e = parent[v]
            if cap[e] < bn:
                bn = cap[e]
            v = head[e]
        if -tr_cap[v] < bn:
            bn = -tr_cap[v]

        cap[mid] -= bn
        cap[rev[mid]] += bn
        n_orph = 0
        v = i
        while parent[v] != _TERMINAL:
            e = parent[v]
            cap[rev[e]] -= bn
            cap[e] += bn
            nxt = head[e]
            if cap[rev[e]] <= 0:
                parent[v] = _ORPHAN
                orphans[n_orph] = v
                n_orph += 1
            v = nxt
        tr_cap[v] -= bn
        if tr_cap[v] <= 0:
            parent[v] = _ORPHAN
            orphans[n_orph] = v
            n_orph += 1
        v = j
        while parent[v] != _TERMINAL:
            e = parent[v]
            cap[e] -= bn
            cap[rev[e]] += bn
            nxt = head[e]
            if cap[e] <= 0:
                parent[v] = _ORPHAN
                orphans[n_orph] = v
                n_orph += 1
            v = nxt
        tr_cap[v] += bn
        if tr_cap[v] >= 0:
            parent[v] = _ORPHAN
            orphans[n_orph] = v
            n_orph += 1
        flow += bn

        # ---- adoption (LIFO over orphans) ----
        while n_orph > 0:
            n_orph -= 1
            o = orphans[n_orph]
            to = tree[o]
            best_e = -1
            best_d = _INF_D
            for e in range(first[o], first[o + 1]):
                b = head[e]
                if tree[b] != to:
                    continue
                if to == _SOURCE:
                    if cap[rev[e]] <= 0:
                        continue
                elif cap[e] <= 0:
                    continue
                d = 0
                u = b
                ok = False
                while True:
                    if ts[u] == time:
                        d += dist[u]
                        ok = True
                        break
                    pe = parent[u]
                    d += 1
                    if pe == _TERMINAL:
                        ts[u] = time
                        dist[u] = 1
                        ok = True
                        break
                    if pe < 0:
                        break
                    u = head[pe]
                if ok:
                    if d < best_d:
                        best_e = e
                        best_d = d
                    u = b
                    dd = d
                    while ts[u] != time:
                        ts[u] = time
                        dist[u] = dd
                        dd -= 1
                        u = head[parent[u]]
            if best_e >= 0:
                parent[o] = best_e
                ts[o] = time
                dist[o] = best_d + 1
                continue
            ts[o] = 0
            for e in range(first[o], first[o + 1]):
                b = head[e]
                if tree[b] != to:
                    continue
                pb = parent[b]
                if pb == _NONE:
                    continue
                if to == _SOURCE:
                    res = cap[rev[e]]
                else:
                    res = cap[e]
                if res > 0 and not in_q[b]:
                    queue[(q_head + q_len) % (n + 1)] = b
                    q_len += 1
                    in_q[b] = True
                if pb >= 0 and head[pb] == o:
                    parent[b] = _ORPHAN
                    orphans[n_orph] = b
                    n_orph += 1
            tree[o] = _FREE
            parent[o] = _NONE
    return flow, tree


def build_csr(n_nodes: int, tails: np.ndarray, heads: np.ndarray):
    """Arc layout for undirected pairs ``(tails[k], heads[k])``.

    Each pair yields a forward arc ``p -> q`` and a reverse arc ``q -> p``.
    Returns ``(first, head, rev, fwd, bwd)`` where ``fwd[k]``/``bwd[k]`` are
    the CSR positions of pair ``k``'s forward/reverse arcs.
    """
    tails = np.asarray(tails, dtype=np.int64)
    heads = np.asarray(heads, dtype=np.int64)
    m = len(tails)
    arc_tail = np.concatenate([tails, heads])
    arc_head = np.concatenate([heads, tails])
    order = np.argsort(arc_tail, kind="stable")
    pos = np.empty(2 * m, dtype=np.int64)
    pos[order] = np.arange(2 * m)
    head = arc_head[order]
    fwd = pos[:m]
    bwd = pos[m:]
    rev = np.empty(2 * m, dtype=np.int64)
    rev[fwd] = bwd
    rev[bwd] = fwd
    counts = np.bincount(arc_tail, minlength=n_nodes)
    first = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=first[1:])
    return first, head, rev, fwd, bwd


class Graph:
    """Small convenience wrapper in the style of the usual maxflow bindings.

    >>> g = Graph(2)
    >>> g.add_tedge(0, 5, 0); g.add_tedge(1, 0, 5); g.add_edge(0, 1, 3, 0)
    >>> g.maxflow()
    3.0
    """

    def __init__(self, n_nodes: int):
        self.n = int(n_nodes)
        self._tails: list[int] = []
        self._heads: list[int] = []
        self._cap: list[float] = []
        self._rcap: list[float] = []
        self.tr_cap = np.zeros(self.n)
        self._tree = None
        self.flow_offset = 0.0

    def add_edge(self, p: int, q: int, cap: float, rev_cap: float = 0.0) -> None:
        if p == q:
            raise ValueError("self loops are not allowed")
        if cap < 0 or rev_cap < 0:
            raise ValueError("capacities must be non-negative")
        self._tails.append(p)
        self._heads.append(q)
        self._cap.append(cap)
        self._rcap.append(rev_cap)

    def add_tedge(self, p: int, cap_source: float, cap_sink: float) -> None:
        if cap_source < 0 or cap_sink < 0:
            raise ValueError("capacities must be non-negative")
        # flow through s -> p -> t is forced; keep only the difference
        self.flow_offset += min(cap_source, cap_sink)
        self.tr_cap[p] += cap_source - cap_sink

    def maxflow(self) -> float:
        first, head, rev, fwd, bwd = build_csr(self.n, np.array(self._tails, dtype=np.int64),
                                               np.array(self._heads, dtype=np.int64))
        cap = np.zeros(len(head))
        cap[fwd] = self._cap
        cap[bwd] = self._rcap
        flow, tree = _bk_maxflow(first, head, rev, cap, self.tr_cap.copy())
        self._tree = tree
        return float(flow + self.flow_offset)

    def segment(self, p: int) -> int:
        """0 if ``p`` ends on the source side of the minimum cut, else 1."""
        if self._tree is None:
            raise RuntimeError("call maxflow() first")
        return 0 if self._tree[p] == _SOURCE else 1

    def segments(self) -> np.ndarray:
        if self._tree is None:
            raise RuntimeError("call maxflow() first")
        return (self._tree != _SOURCE).astype(np.int8)


def maxflow_arrays(first, head, rev, cap, tr_cap):
    """Run the solver on prebuilt arrays (mutated in place).

    Returns ``(flow, sink_side)`` where ``sink_side`` is a boolean per node.
    """
    flow, tree = _bk_maxflow(first, head, rev, cap, tr_cap)
    return float(flow), tree != _SOURCE
