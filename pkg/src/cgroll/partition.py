"""Multilevel graph partitioner for grouping bonded atoms into beads.

Each molecule (connected unit of the bond graph) is partitioned independently
into round(size / target) groups, so no group ever spans molecules. A group
count is realized by recursive bisection; each bisection runs the classic
multilevel scheme: heavy-edge-matching coarsening, greedy graph growing on the
coarsest graph (multistart), then boundary FM refinement at every uncoarsening
level. Bisection side sizes are forced exact at the finest level, which keeps
every molecule's group sizes within {floor(n/k), ceil(n/k)}.

Edge weights are the bond multiplicities (unit weights for simple topologies);
ties in matching, growing, and refinement break toward the lowest node index
after a seeded shuffle, making results reproducible for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graphcore import FineTopology


@dataclass(frozen=True)
class PartitionResult:
    assignment: np.ndarray   # (N,) dense group ids, 0..n_groups-1
    n_groups: int
    cut_edges: int


def group_size_histogram(assignment) -> dict[int, int]:
    """Histogram {group size: number of groups}."""
    _, counts = np.unique(np.asarray(assignment), return_counts=True)
    hist: dict[int, int] = {}
    for c in counts:
        hist[int(c)] = hist.get(int(c), 0) + 1
    return hist


def _balanced_sizes(n: int, k: int) -> list[int]:
    base, rem = divmod(n, k)
    return [base + 1] * rem + [base] * (k - rem)


class _Graph:
    """Small weighted graph; adjacency as one dict per node."""

    def __init__(self, n, node_w, adj):
        self.n = n
        self.node_w = node_w            # int array
        self.adj = adj                  # list[dict[int, int]]

    @classmethod
    def from_edges(cls, n, edges):
        adj = [dict() for _ in range(n)]
        for u, v, w in edges:
            if u == v:
                continue
            adj[u][v] = adj[u].get(v, 0) + w
            adj[v][u] = adj[v].get(u, 0) + w
        return cls(n, np.ones(n, dtype=np.int64), adj)

    def subgraph(self, nodes):
        """Induced subgraph; returns (graph, local->original index list)."""
        local = {u: i for i, u in enumerate(nodes)}
        adj = [dict() for _ in nodes]
        for u in nodes:
            lu = local[u]
            for v, w in self.adj[u].items():
                lv = local.get(v)
                if lv is not None:
                    adj[lu][lv] = w
        return _Graph(len(nodes), self.node_w[np.asarray(nodes)], adj), list(nodes)


def _heavy_edge_matching(g: _Graph, rng: np.random.Generator):
    """One coarsening level; returns (coarse graph, fine->coarse map) or None."""
    order = np.arange(g.n)
    rng.shuffle(order)
    cmap = np.full(g.n, -1, dtype=np.int64)
    n_coarse = 0
    for u in order:
        if cmap[u] >= 0:
            continue
        best_v, best_w = -1, 0
        for v, w in g.adj[u].items():
            if cmap[v] >= 0:
                continue
            if w > best_w or (w == best_w and (best_v == -1 or v < best_v)):
                best_v, best_w = v, w
        cmap[u] = n_coarse
        if best_v >= 0:
            cmap[best_v] = n_coarse
        n_coarse += 1
    if n_coarse == g.n:
        return None
    node_w = np.zeros(n_coarse, dtype=np.int64)
    for u in range(g.n):
        node_w[cmap[u]] += g.node_w[u]
    adj = [dict() for _ in range(n_coarse)]
    for u in range(g.n):
        cu = cmap[u]
        for v, w in g.adj[u].items():
            if v <= u:
                continue
            cv = cmap[v]
            if cu == cv:
                continue
            adj[cu][cv] = adj[cu].get(cv, 0) + w
            adj[cv][cu] = adj[cv].get(cu, 0) + w
    return _Graph(n_coarse, node_w, adj), cmap


def _cut_weight(g: _Graph, side) -> int:
    cut = 0
    for u in range(g.n):
        if not side[u]:
            continue
        for v, w in g.adj[u].items():
            if not side[v]:
                cut += w
    return cut


def _grow_region(g: _Graph, w_target: int, start: int):
    """Greedy graph growing: BFS-like region growth maximizing internal weight."""
    side = np.zeros(g.n, dtype=bool)
    conn = np.zeros(g.n, dtype=np.int64)   # edge weight into the region
    degw = np.array([sum(g.adj[u].values()) for u in range(g.n)], dtype=np.int64)
    side[start] = True
    total = int(g.node_w[start])
    for v, w in g.adj[start].items():
        conn[v] += w
    while total < w_target:
        best, best_gain = -1, None
        for u in range(g.n):
            if side[u] or conn[u] == 0:
                continue
            gain = 2 * conn[u] - degw[u]
            if best_gain is None or gain > best_gain:
                best, best_gain = u, gain
        if best < 0:
            # region ran out of frontier (disconnected piece): take lowest index
            rest = np.nonzero(~side)[0]
            if rest.size == 0:
                break
            best = int(rest[0])
        side[best] = True
        total += int(g.node_w[best])
        for v, w in g.adj[best].items():
            conn[v] += w
    return side


def _fm_refine(g: _Graph, side, w_target: int, slack: int, max_passes: int = 8):
    """Boundary FM passes; keeps the best (|imbalance|, cut) prefix of each pass."""
    side = side.copy()
    w1 = int(g.node_w[side].sum())
    cut = _cut_weight(g, side)
    for _ in range(max_passes):
        gains = np.zeros(g.n, dtype=np.int64)
        for u in range(g.n):
            ext = sum(w for v, w in g.adj[u].items() if side[v] != side[u])
            gains[u] = 2 * ext - sum(g.adj[u].values())  # ext - int
        locked = np.zeros(g.n, dtype=bool)
        moves = []
        best = (abs(w1 - w_target), cut, 0)
        cur_w1, cur_cut = w1, cut
        trial_side = side.copy()
        while True:
            imb = cur_w1 - w_target
            best_u, best_gain = -1, None
            for u in range(g.n):
                if locked[u]:
                    continue
                delta = -int(g.node_w[u]) if trial_side[u] else int(g.node_w[u])
                new_imb = imb + delta
                if abs(new_imb) > abs(imb) and abs(new_imb) > slack:
                    continue
                if best_gain is None or gains[u] > best_gain:
                    best_u, best_gain = u, int(gains[u])
            if best_u < 0:
                break
            u = best_u
            cur_cut -= int(gains[u])
            cur_w1 += -int(g.node_w[u]) if trial_side[u] else int(g.node_w[u])
            trial_side[u] = ~trial_side[u]
            locked[u] = True
            for v, w in g.adj[u].items():
                if trial_side[v] == trial_side[u]:
                    gains[v] -= 2 * w
                else:
                    gains[v] += 2 * w
            moves.append(u)
            state = (abs(cur_w1 - w_target), cur_cut, len(moves))
            if state[:2] < best[:2]:
                best = state
        if best[2] == 0:
            break
        for u in moves[: best[2]]:
            side[u] = ~side[u]
        w1_new = int(g.node_w[side].sum())
        cut_new = _cut_weight(g, side)
        if (abs(w1_new - w_target), cut_new) >= (abs(w1 - w_target), cut):
            # undo: pass did not improve
            for u in moves[: best[2]]:
                side[u] = ~side[u]
            break
        w1, cut = w1_new, cut_new
    return side


def _force_exact(g: _Graph, side, w_target: int):
    """Move best-gain nodes from the heavy side until sizes are exact.

    Only called at the finest level where node weights are 1, so exactness is
    always reachable.
    """
    side = side.copy()
    w1 = int(g.node_w[side].sum())
    while w1 != w_target:
        from_a = w1 > w_target
        best_u, best_gain = -1, None
        for u in range(g.n):
            if side[u] != from_a:
                continue
            ext = sum(w for v, w in g.adj[u].items() if side[v] != side[u])
            gain = 2 * ext - sum(g.adj[u].values())
            if best_gain is None or gain > best_gain:
                best_u, best_gain = u, gain
        side[best_u] = ~side[best_u]
        w1 += -1 if from_a else 1
    return side


def _bisect(g: _Graph, n1: int, rng: np.random.Generator, slack: int):
    """Split g's nodes into sides of fine-node weight exactly (n1, rest)."""
    if n1 <= 0:
        return np.zeros(g.n, dtype=bool)
    total = int(g.node_w.sum())
    if n1 >= total:
        return np.ones(g.n, dtype=bool)

    # multilevel coarsening
    levels = []
    cur = g
    while cur.n > 48:
        res = _heavy_edge_matching(cur, rng)
        if res is None or res[0].n > 0.95 * cur.n:
            break
        coarse, cmap = res
        levels.append((cur, cmap))
        cur = coarse

    # multistart greedy growing + refinement on the coarsest graph
    if cur.n <= 16:
        starts = list(range(cur.n))
    else:
        starts = sorted(rng.choice(cur.n, size=8, replace=False).tolist())
    best_side, best_score = None, None
    coarse_slack = max(slack, int(cur.node_w.max()))
    for s in starts:
        side = _grow_region(cur, n1, s)
        side = _fm_refine(cur, side, n1, coarse_slack)
        score = (abs(int(cur.node_w[side].sum()) - n1), _cut_weight(cur, side))
        if best_score is None or score < best_score:
            best_side, best_score = side, score

    # uncoarsen with refinement at each level
    side = best_side
    for fine, cmap in reversed(levels):
        side = side[cmap]
        lvl_slack = max(slack, int(fine.node_w.max()))
        side = _fm_refine(fine, side, n1, lvl_slack)

    side = _fm_refine(g, side, n1, max(1, slack))
    side = _force_exact(g, side, n1)
    side = _fm_refine(g, side, n1, 1)
    side = _force_exact(g, side, n1)
    return side


def _split_recursive(g: _Graph, orig, sizes, rng, slack, out, next_group):
    if len(sizes) == 1:
        for u in orig:
            out[u] = next_group
        return next_group + 1
    k1 = len(sizes) // 2
    n1 = sum(sizes[:k1])
    side = _bisect(g, n1, rng, slack)
    nodes_a = [i for i in range(g.n) if side[i]]
    nodes_b = [i for i in range(g.n) if not side[i]]
    ga, orig_a = g.subgraph(nodes_a)
    gb, orig_b = g.subgraph(nodes_b)
    next_group = _split_recursive(ga, [orig[i] for i in nodes_a], sizes[:k1], rng, slack,
                                  out, next_group)
    next_group = _split_recursive(gb, [orig[i] for i in nodes_b], sizes[k1:], rng, slack,
                                  out, next_group)
    return next_group


def partition_graph(topology: FineTopology, target_group_size: int, seed: int = 0,
                    balance_eps: float = 0.1, strict: bool = False) -> PartitionResult:
    """Partition the bond graph into groups of about target_group_size atoms.

    Groups never span molecules. Each molecule of size n gets
    max(1, round(n / target_group_size)) groups with sizes that differ by at
    most one atom. Deterministic for fixed inputs and seed.
    """
    if target_group_size < 1:
        raise ConfigError(f"target_group_size must be >= 1, got {target_group_size}")
    n = topology.n_atoms
    mol = topology.molecule_ids
    if strict:
        largest = max(np.bincount(mol)) if n else 0
        if target_group_size > largest:
            raise ConfigError(
                f"target_group_size {target_group_size} exceeds the largest molecule ({largest} atoms)"
            )
    graph = _Graph.from_edges(n, [(int(i), int(j), 1) for i, j in topology.bonds])
    assignment = np.full(n, -1, dtype=np.int64)
    slack = max(1, int(np.floor(balance_eps * target_group_size)))
    next_group = 0
    for m in np.unique(mol):
        nodes = np.nonzero(mol == m)[0].tolist()
        size = len(nodes)
        k = max(1, int(np.floor(size / target_group_size + 0.5)))
        sizes = _balanced_sizes(size, k)
        sub, orig = graph.subgraph(nodes)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(m)])))
        next_group = _split_recursive(sub, orig, sizes, rng, slack, assignment, next_group)
    cut = 0
    for i, j in topology.bonds:
        if assignment[i] != assignment[j]:
            cut += 1
    return PartitionResult(assignment=assignment, n_groups=next_group, cut_edges=int(cut))
