"""Recursive coordinate bisection with extended overlap (halo) regions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SubdomainBox:
    lo: np.ndarray
    hi: np.ndarray
    rank: int
    # per axis: True where the low/high face borders another subdomain
    internal_lo: tuple[bool, ...] = ()
    internal_hi: tuple[bool, ...] = ()

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    def extended(self, l: float) -> tuple[np.ndarray, np.ndarray]:
        # slack keeps points at exactly distance l from a face inside under rounding
        ext = l * (1 + 1e-9)
        lo = self.lo - ext * np.asarray(self.internal_lo, dtype=float)
        hi = self.hi + ext * np.asarray(self.internal_hi, dtype=float)
        return lo, hi

    def contains_extended(self, pts: np.ndarray, l: float) -> np.ndarray:
        lo, hi = self.extended(l)
        return np.all((pts >= lo) & (pts <= hi), axis=1)


@dataclass
class RankView:
    """Local row layout of one rank and the positions it sends/receives."""

    rank: int
    local_ids: np.ndarray
    n_interior: int
    send_pos: dict[int, np.ndarray]
    recv_pos: dict[int, np.ndarray]

    @property
    def interior_pos(self) -> np.ndarray:
        return np.arange(self.n_interior)

    @property
    def halo_pos(self) -> np.ndarray:
        return np.arange(self.n_interior, len(self.local_ids))


@dataclass
class PartitionPlan:
    """Ownership and exchange lists over the sampled centers.

    Ids are positions into the array of sampled centers the plan was built
    from. ``exchange_lists[(p, q)]`` holds the ids ``p`` sends to ``q``.
    """

    boxes: list[SubdomainBox]
    overlap: float
    owner: np.ndarray
    interior_ids: list[np.ndarray]
    halo_ids: list[np.ndarray]
    exchange_lists: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def n_proc(self) -> int:
        return len(self.boxes)

    def local_ids(self, rank: int) -> np.ndarray:
        """Interior ids followed by halo ids: the row order used on ``rank``."""
        return np.concatenate([self.interior_ids[rank], self.halo_ids[rank]])

    def local_positions(self, rank: int, ids) -> np.ndarray:
        loc = self.local_ids(rank)
        lookup = {int(g): k for k, g in enumerate(loc)}
        return np.array([lookup[int(g)] for g in ids], dtype=np.int64)

    def rank_view(self, rank: int) -> RankView:
        loc = self.local_ids(rank)
        lookup = np.full(len(self.owner), -1, dtype=np.int64)
        lookup[loc] = np.arange(len(loc))
        send = {q: lookup[self.exchange_lists[(rank, q)]] for q in range(self.n_proc) if q != rank}
        recv = {p: lookup[self.exchange_lists[(p, rank)]] for p in range(self.n_proc) if p != rank}
        return RankView(rank, loc, len(self.interior_ids[rank]), send, recv)

    def halo_count(self) -> int:
        return int(sum(len(h) for h in self.halo_ids))


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bisect(pts, idx, lo, hi, internal_lo, internal_hi, parts, out, flat):
    if parts == 1:
        out.append((lo, hi, internal_lo, internal_hi))
        return
    # degenerate axes were padded to unit width; never cut along them
    axis = int(np.argmax(np.where(flat, -1.0, hi - lo)))
    split = float(np.median(pts[idx, axis])) if len(idx) else float((lo[axis] + hi[axis]) / 2)
    # keep both halves non-degenerate
    split = min(max(split, lo[axis]), hi[axis])
    if split <= lo[axis] or split >= hi[axis]:
        split = float((lo[axis] + hi[axis]) / 2)
    left = idx[pts[idx, axis] <= split]
    right = idx[pts[idx, axis] > split]
    hi_left = hi.copy()
    hi_left[axis] = split
    lo_right = lo.copy()
    lo_right[axis] = split
    ihi = list(internal_hi)
    ihi[axis] = True
    ilo = list(internal_lo)
    ilo[axis] = True
    _bisect(pts, left, lo, hi_left, internal_lo, tuple(ihi), parts // 2, out, flat)
    _bisect(pts, right, lo_right, hi, tuple(ilo), internal_hi, parts // 2, out, flat)


def decompose(coords: np.ndarray, n_proc: int, l: float) -> PartitionPlan:
    """Split along the longest axis at the median, recursively, into ``n_proc`` boxes.

    Each box is then extended by ``l`` on internal faces to define its halo.
    """
    pts = np.asarray(coords, dtype=np.float64)
    if not _is_power_of_two(n_proc):
        raise ValueError(f"n_proc must be a power of two, got {n_proc}")
    if l < 0:
        raise ValueError("overlap length must be ≥ 0")
    if n_proc > len(pts):
        raise ValueError(f"n_proc={n_proc} exceeds the {len(pts)} sampled centers")
    d = pts.shape[1]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    flat = hi <= lo
    hi = np.where(flat, lo + 1.0, hi)
    raw: list = []
    _bisect(pts, np.arange(len(pts)), lo, hi, (False,) * d, (False,) * d, n_proc, raw, flat)
    boxes = [SubdomainBox(lo=b[0], hi=b[1], rank=k, internal_lo=b[2], internal_hi=b[3])
             for k, b in enumerate(raw)]
    owner = np.full(len(pts), -1, dtype=np.int64)
    for box in boxes:
        free = (owner < 0) & box.contains(pts)
        owner[free] = box.rank
    if (owner < 0).any():
        raise AssertionError("bisection boxes do not cover all sampled centers")
    interior = [np.flatnonzero(owner == k) for k in range(n_proc)]
    halo = []
    exchange: dict[tuple[int, int], np.ndarray] = {}
    for q, box in enumerate(boxes):
        inside = box.contains_extended(pts, l)
        halo.append(np.flatnonzero(inside & (owner != q)))
        for p in range(n_proc):
            if p != q:
                exchange[(p, q)] = np.flatnonzero(inside & (owner == p))
    return PartitionPlan(boxes=boxes, overlap=l, owner=owner,
                         interior_ids=interior, halo_ids=halo, exchange_lists=exchange)


def classify(coords: np.ndarray, plan: PartitionPlan, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Interior (owned, lowest-rank tie-break) and halo ids of ``coords`` for ``rank``."""
    pts = np.asarray(coords, dtype=np.float64)
    owner = np.full(len(pts), -1, dtype=np.int64)
    for box in plan.boxes:
        free = (owner < 0) & box.contains(pts)
        owner[free] = box.rank
    box = plan.boxes[rank]
    interior = np.flatnonzero(owner == rank)
    halo = np.flatnonzero(box.contains_extended(pts, plan.overlap) & (owner != rank))
    return interior, halo


def kernel_completeness_check(plan: PartitionPlan, edges: np.ndarray, r: float | None = None) -> bool:
    """True iff every edge (i, j) with ``i`` interior to a rank has ``j`` available there.

    ``edges`` is an E×2 array of (center id, neighbour id) in plan ids.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    for q in range(plan.n_proc):
        avail = np.zeros(len(plan.owner), dtype=bool)
        avail[plan.interior_ids[q]] = True
        avail[plan.halo_ids[q]] = True
        mine = plan.owner[edges[:, 0]] == q
        if not avail[edges[mine, 1]].all():
            return False
    return True
