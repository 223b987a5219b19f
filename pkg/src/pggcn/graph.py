"""Skeleton topology and normalized adjacency partitions."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DataError

# Kinect v2 body model as used by the NTU RGB+D toolbox, 1-based joint ids:
#  1 base of spine   2 middle of spine  3 neck            4 head
#  5 left shoulder   6 left elbow       7 left wrist      8 left hand
#  9 right shoulder 10 right elbow     11 right wrist    12 right hand
# 13 left hip       14 left knee       15 left ankle     16 left foot
# 17 right hip      18 right knee      19 right ankle    20 right foot
# 21 spine shoulder 22 left hand tip   23 left thumb     24 right hand tip
# 25 right thumb
NTU_EDGES_1BASED = (
    (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
    (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14),
    (16, 15), (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8),
    (24, 25), (25, 12),
)
NTU_NUM_JOINTS = 25
NTU_CENTER_JOINT = 1  # middle of spine, 0-based


@dataclass(frozen=True)
class SkeletonGraph:
    num_joints: int
    edges: tuple
    center_joint: int = 0
    partitions: int = 3

    def __post_init__(self):
        n = self.num_joints
        if n < 1:
            raise ConfigurationError("graph needs at least one joint")
        if self.partitions not in (1, 3):
            raise ConfigurationError("partitions must be 1 (uniform) or 3 (spatial)")
        if not 0 <= self.center_joint < n:
            raise ConfigurationError(f"center joint {self.center_joint} out of range")
        seen = set()
        canon = []
        for i, j in self.edges:
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n):
                raise ConfigurationError(f"edge ({i}, {j}) out of range for {n} joints")
            if i == j:
                raise ConfigurationError(f"self-loop at joint {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ConfigurationError(f"duplicate edge {key}")
            seen.add(key)
            canon.append((i, j))
        object.__setattr__(self, "edges", tuple(canon))

    @classmethod
    def from_edges(cls, num_joints, edges, center_joint=0, partitions=3,
                   allow_disconnected=False):
        g = cls(num_joints, tuple(edges), center_joint, partitions)
        if not allow_disconnected and not g.is_connected():
            raise ConfigurationError("skeleton graph is not connected")
        return g

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_joints, self.num_joints))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def neighbors(self):
        nb = [[] for _ in range(self.num_joints)]
        for i, j in self.edges:
            nb[i].append(j)
            nb[j].append(i)
        return [sorted(x) for x in nb]

    def hop_distance(self) -> np.ndarray:
        """BFS hop count from the center joint; unreachable joints get -1."""
        hops = np.full(self.num_joints, -1, dtype=np.int64)
        hops[self.center_joint] = 0
        queue = deque([self.center_joint])
        nb = self.neighbors()
        while queue:
            u = queue.popleft()
            for v in nb[u]:
                if hops[v] < 0:
                    hops[v] = hops[u] + 1
                    queue.append(v)
        return hops

    def is_connected(self) -> bool:
        return bool((self.hop_distance() >= 0).all())

    def parents(self) -> np.ndarray:
        """Parent of each joint on the BFS tree rooted at the center joint.

        The center joint (and any unreachable joint) is its own parent.  Ties
        between equally close neighbours go to the lowest index.
        """
        hops = self.hop_distance()
        nb = self.neighbors()
        parent = np.arange(self.num_joints)
        for v in range(self.num_joints):
            if hops[v] <= 0:
                continue
            parent[v] = min(u for u in nb[v] if hops[u] == hops[v] - 1)
        return parent

    def permuted(self, perm) -> "SkeletonGraph":
        """Relabel joints so that old joint ``perm[k]`` becomes new joint ``k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        edges = tuple((int(inv[i]), int(inv[j])) for i, j in self.edges)
        return SkeletonGraph(self.num_joints, edges, int(inv[self.center_joint]),
                             self.partitions)


def build_ntu_graph(partitions=3) -> SkeletonGraph:
    edges = tuple((i - 1, j - 1) for i, j in NTU_EDGES_1BASED)
    return SkeletonGraph.from_edges(NTU_NUM_JOINTS, edges, NTU_CENTER_JOINT, partitions)


def chain_graph(num_joints, center_joint=0, partitions=3) -> SkeletonGraph:
    edges = tuple((i, i + 1) for i in range(num_joints - 1))
    return SkeletonGraph.from_edges(num_joints, edges, center_joint, partitions)


def normalized_adjacency(g: SkeletonGraph) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a = g.adjacency() + np.eye(g.num_joints)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return d[:, None] * a * d[None, :]


def normalize_adjacency(g: SkeletonGraph) -> np.ndarray:
    """Partitioned normalized adjacency, shape ``[K, N, N]``.

    With ``K = 3`` the entry ``(i, j)`` of the normalized matrix goes to the
    root subset when joints ``i`` and ``j`` are equally far from the center,
    to the centripetal subset when ``j`` is closer than ``i`` and to the
    centrifugal subset otherwise.  The subsets sum to the full matrix.
    """
    a_hat = normalized_adjacency(g)
    if g.partitions == 1:
        return a_hat[None].copy()
    hops = g.hop_distance().astype(float)
    hops[hops < 0] = np.inf
    hi = hops[:, None]
    hj = hops[None, :]
    same = (hi == hj) | np.eye(g.num_joints, dtype=bool)
    closer = (hj < hi) & ~same
    farther = ~same & ~closer
    return np.stack([a_hat * same, a_hat * closer, a_hat * farther])


def read_graph_file(path, center_joint=0, partitions=3) -> SkeletonGraph:
    """Parse ``N`` on the first line followed by ``i j`` edge lines (0-based)."""
    with open(path) as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise DataError(f"{path}: empty graph file")
    try:
        n = int(lines[0])
        edges = []
        for ln in lines[1:]:
            i, j = ln.split()
            edges.append((int(i), int(j)))
    except ValueError as exc:
        raise DataError(f"{path}: malformed graph file ({exc})") from None
    return SkeletonGraph.from_edges(n, edges, center_joint, partitions)


def write_graph_file(path, g: SkeletonGraph) -> None:
    with open(path, "w") as fh:
        fh.write(f"{g.num_joints}\n")
        for i, j in g.edges:
            fh.write(f"{i} {j}\n")
