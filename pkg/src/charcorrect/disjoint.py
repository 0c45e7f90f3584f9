"""Disjoint-set forest with path halving and union by size."""

from __future__ import annotations


class DisjointSet:
    def __init__(self, n: int = 0):
        self.parent = list(range(n))
        self.size = [1] * n

    def add(self) -> int:
        self.parent.append(len(self.parent))
        self.size.append(1)
        return len(self.parent) - 1

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra

    def groups(self) -> list[list[int]]:
        """Members of each set, sets ordered by their smallest member."""
        by_root: dict[int, list[int]] = {}
        for x in range(len(self.parent)):
            by_root.setdefault(self.find(x), []).append(x)
        return sorted(by_root.values(), key=lambda g: g[0])


def link_components(n: int, linked) -> list[list[int]]:
    """Connected components of the graph on ``range(n)`` with edge predicate ``linked(i, j)``."""
    ds = DisjointSet(n)
    for i in range(n):
        for j in range(i + 1, n):
            if linked(i, j):
                ds.union(i, j)
    return ds.groups()
