"""Undirected connectivity graph with dependence distances.

The directed dependence graph is closed with Floyd-Warshall; two nodes are
connected when either reaches the other, and the distance is the shortest
directed path length (the minimum over the two directions when both exist).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dependence import DependenceGraph


class ClosureError(Exception):
    pass


@dataclass
class ConnectivityGraph:
    n_nodes: int
    #: dense symmetric distance matrix; 0 means "not connected" (D >= 1 on edges)
    dist: np.ndarray

    def connected(self, u: int, v: int) -> bool:
        return u != v and self.dist[u, v] > 0

    def distance(self, u: int, v: int) -> int:
        return int(self.dist[u, v])

    def edges(self) -> list[tuple[int, int, int]]:
        out = []
        for u in range(self.n_nodes):
            for v in range(u + 1, self.n_nodes):
                if self.dist[u, v] > 0:
                    out.append((u, v, int(self.dist[u, v])))
        return out

    def neighbors(self, u: int) -> list[int]:
        return [v for v in range(self.n_nodes) if self.connected(u, v)]

    def to_dict(self) -> dict:
        return {"nodes": self.n_nodes, "edges": [[u, v, d] for u, v, d in self.edges()]}

    @classmethod
    def from_dict(cls, d: dict) -> "ConnectivityGraph":
        dist = np.zeros((d["nodes"], d["nodes"]), dtype=np.int32)
        for u, v, w in d["edges"]:
            dist[u, v] = dist[v, u] = w
        return cls(n_nodes=d["nodes"], dist=dist)


def connectivity(dep: DependenceGraph, node_cap: int = 512) -> ConnectivityGraph:
    """All-pairs shortest directed path lengths, folded to undirected edges."""
    n = dep.n_nodes
    if n > node_cap:
        raise ClosureError(
            f"{n} nodes exceed the closure cap of {node_cap}; truncate the "
            "function upstream (tokenizer max_len) before building masks")
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for u, v in dep.directed_pairs():
        if u != v:
            d[u, v] = 1.0
    for k in range(n):
        np.minimum(d, d[:, k:k + 1] + d[k:k + 1, :], out=d)
    sym = np.minimum(d, d.T)
    np.fill_diagonal(sym, np.inf)
    dist = np.where(np.isfinite(sym), sym, 0.0).astype(np.int32)
    return ConnectivityGraph(n_nodes=n, dist=dist)
