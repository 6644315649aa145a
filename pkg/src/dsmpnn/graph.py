"""Sampled graph kernels: node sampling, radius neighbours, edge capping, edge features."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


@dataclass
class PointSet:
    """Nodes of one simulation sample.

    ``static_feats`` are never rewritten by the model; ``dynamic_feats`` seed
    the dynamic edge channels and are replaced by decoder output after each hop.
    ``static_edge_channels`` picks the static columns that also enter edge features.
    """

    coords: np.ndarray
    static_feats: np.ndarray
    dynamic_feats: np.ndarray
    targets: np.ndarray
    static_edge_channels: tuple[int, ...] = ()

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        n = self.coords.shape[0]
        if n < 1 or self.coords.ndim != 2 or self.coords.shape[1] not in (2, 3):
            raise ValueError(f"coords must be N×d with N≥1, d∈{{2,3}}; got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ValueError("coords must be finite")
        self.static_feats = np.asarray(self.static_feats).reshape(n, -1)
        self.dynamic_feats = np.asarray(self.dynamic_feats).reshape(n, -1)
        self.targets = np.asarray(self.targets).reshape(n, -1)
        if self.dynamic_feats.shape[1] < 1 or self.dynamic_feats.shape[1] != self.targets.shape[1]:
            raise ValueError("dynamic_feats and targets must share a channel count ≥ 1")

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def d_out(self) -> int:
        return self.targets.shape[1]

    @property
    def edge_dim(self) -> int:
        return self.dim + len(self.static_edge_channels) + self.d_out

    def node_inputs(self) -> np.ndarray:
        """Encoder input: coordinates followed by static channels."""
        return np.concatenate([self.coords, self.static_feats], axis=1)


@dataclass
class SampledGraph:
    """Graph kernel over sampled centers.

    ``centers`` are global node ids; ``src``/``dst`` index positions in
    ``centers`` (edge ``dst <- src`` carries the neighbour ``src`` into the
    kernel of center ``dst``). Edges are sorted by (dst, global id of src).
    """

    centers: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_feats: np.ndarray
    per_center_degree: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.per_center_degree is None:
            self.per_center_degree = np.bincount(self.dst, minlength=len(self.centers))

    @property
    def n_centers(self) -> int:
        return len(self.centers)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def global_edges(self) -> np.ndarray:
        """(i, j) pairs in global node ids, i the center."""
        return np.stack([self.centers[self.dst], self.centers[self.src]], axis=1)


def sample_nodes(ps: PointSet | int, s: int, rng_seed) -> np.ndarray:
    """Uniform sample of ``min(s, N)`` node ids without replacement, sorted."""
    if s < 1:
        raise ValueError("s must be ≥ 1")
    n = ps if isinstance(ps, (int, np.integer)) else ps.n_nodes
    rng = np.random.default_rng(rng_seed)
    return np.sort(rng.choice(n, size=min(s, n), replace=False))


def build_radius_edges(coords: np.ndarray, centers, r: float, n_query: int | None = None) -> list[np.ndarray]:
    """Neighbour lists (positions into ``centers``) within Euclidean radius ``r``.

    Uses uniform binning with cell size ``r``; each list is sorted by the
    global id of the neighbour and excludes the center itself. With
    ``n_query`` only the first ``n_query`` centers get lists (the rest
    still serve as neighbours).
    """
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    centers = np.asarray(centers, dtype=np.int64)
    pts = np.asarray(coords, dtype=np.float64)[centers]
    m = len(centers)
    n_query = m if n_query is None else n_query
    adjacency: list[np.ndarray] = [np.empty(0, dtype=np.int64) for _ in range(n_query)]
    if m == 0:
        return adjacency
    d = pts.shape[1]
    cell = np.floor((pts - pts.min(axis=0)) / r).astype(np.int64)
    buckets: dict[tuple, np.ndarray] = {}
    order = np.lexsort(cell.T[::-1])
    keys = [tuple(c) for c in cell[order]]
    start = 0
    for k in range(1, m + 1):
        if k == m or keys[k] != keys[start]:
            buckets[keys[start]] = order[start:k]
            start = k
    r2 = r * r
    offsets = list(itertools.product((-1, 0, 1), repeat=d))
    for key, members in buckets.items():
        members = members[members < n_query]
        if not len(members):
            continue
        cand = [buckets[nb] for off in offsets
                if (nb := tuple(a + b for a, b in zip(key, off))) in buckets]
        cand = np.concatenate(cand)
        diff = pts[members][:, None, :] - pts[cand][None, :, :]
        close = np.einsum("ijk,ijk->ij", diff, diff) <= r2
        for row, i in enumerate(members):
            nbrs = cand[close[row]]
            nbrs = nbrs[nbrs != i]
            adjacency[i] = nbrs[np.argsort(centers[nbrs], kind="stable")]
    return adjacency


def brute_force_radius_edges(coords: np.ndarray, centers, r: float) -> set[tuple[int, int]]:
    """All-pairs reference: set of (center position, neighbour position)."""
    pts = np.asarray(coords, dtype=np.float64)[np.asarray(centers)]
    out = set()
    for i in range(len(pts)):
        for j in range(len(pts)):
            if i != j and float(np.sum((pts[i] - pts[j]) ** 2)) <= r * r:
                out.add((i, j))
    return out


def cap_edges(adjacency: list[np.ndarray], n_e: int, rng_seed, centers=None) -> tuple[np.ndarray, np.ndarray]:
    """Keep at most ``n_e`` uniformly chosen neighbours per center.

    Randomness is keyed on (seed, global center id), so two ranks holding the
    same complete neighbourhood draw the same subset. Returns ``(src, dst)``
    as position arrays.
    """
    if n_e < 1:
        raise ValueError("n_e must be ≥ 1")
    if centers is None:
        centers = np.arange(len(adjacency))
    seed_key = _seed_words(rng_seed)
    srcs, dsts = [], []
    for pos, nbrs in enumerate(adjacency):
        if len(nbrs) > n_e:
            rng = np.random.default_rng(seed_key + [int(centers[pos])])
            keep = np.sort(rng.choice(len(nbrs), size=n_e, replace=False))
            nbrs = nbrs[keep]
        srcs.append(nbrs)
        dsts.append(np.full(len(nbrs), pos, dtype=np.int64))
    if not srcs:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(srcs).astype(np.int64), np.concatenate(dsts)


def _seed_words(seed) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def build_edge_features(ps: PointSet, centers, src, dst, dynamic=None) -> np.ndarray:
    """Rows ``concat(Δcoords, Δstatic edge channels, Δdynamic)`` with Δ = center − neighbour.

    ``dynamic`` overrides ``ps.dynamic_feats`` (rows indexed like ``ps``).
    """
    centers = np.asarray(centers)
    gi = centers[dst]
    gj = centers[src]
    dyn = ps.dynamic_feats if dynamic is None else dynamic
    blocks = [ps.coords[gi] - ps.coords[gj]]
    if ps.static_edge_channels:
        st = ps.static_feats[:, list(ps.static_edge_channels)]
        blocks.append(st[gi] - st[gj])
    blocks.append(dyn[gi] - dyn[gj])
    return np.concatenate(blocks, axis=1)


def update_edge_features(edge_feats: np.ndarray, src, dst, decoded: np.ndarray) -> np.ndarray:
    """Overwrite the trailing dynamic block with ``decoded[dst] − decoded[src]``.

    ``decoded`` is indexed by center position.
    """
    d_out = decoded.shape[1]
    out = np.array(edge_feats, copy=True)
    out[:, out.shape[1] - d_out:] = decoded[dst] - decoded[src]
    return out


def build_graph(ps: PointSet, centers, r: float, n_e: int, rng_seed, n_query: int | None = None) -> SampledGraph:
    """Radius search, capping and featurisation over ``centers``.

    ``n_query`` limits kernels to the leading centers (a rank's interior).
    """
    centers = np.asarray(centers, dtype=np.int64)
    adjacency = build_radius_edges(ps.coords, centers, r, n_query)
    src, dst = cap_edges(adjacency, n_e, rng_seed, centers=centers)
    feats = build_edge_features(ps, centers, src, dst)
    return SampledGraph(centers=centers, src=src, dst=dst, edge_feats=feats,
                        per_center_degree=np.bincount(dst, minlength=len(centers)))
