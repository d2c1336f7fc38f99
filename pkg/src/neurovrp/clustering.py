"""Polar-proximity clustering and the sparse within-cluster attention it drives.

Customers are scored by a mix of normalized angle and radius around the
depot, sorted, and chunked into fixed-size clusters over several rounds.
Attention is then computed independently inside each cluster (plus the
depot, which joins every cluster), giving O(n) attention pairs instead of
O(n^2).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, masked_softmax, matmul, reshape, swapaxes, take


@dataclass
class PolarCoords:
    """Polar coordinates of customers relative to the depot."""
    r: np.ndarray
    theta: np.ndarray        # in [0, 2*pi)
    r_bar: np.ndarray        # normalized to [0, 1]
    theta_bar: np.ndarray    # theta / 2*pi


@dataclass
class ClusterIndex:
    """Per-round, per-cluster customer index lists with padding provenance.

    `rounds[r]` is an int array of shape (n_clusters, M) holding global node
    indices (customers are 1..n); padded slots hold the depot index 0 and
    are flagged in `padding[r]`.
    """
    rounds: list[np.ndarray]
    padding: list[np.ndarray]
    alpha_values: list[float]
    smoothed: list[bool]
    n_customers: int
    cluster_size: int

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    def to_json(self) -> str:
        return json.dumps({
            "n_customers": self.n_customers,
            "cluster_size": self.cluster_size,
            "alpha_values": self.alpha_values,
            "smoothed": self.smoothed,
            "rounds": [r.tolist() for r in self.rounds],
            "padding": [p.tolist() for p in self.padding],
        })


def to_polar(coords: np.ndarray, depot: np.ndarray) -> PolarCoords:
    """Transform customer locations to polar coordinates around the depot.

    A customer coincident with the depot gets r=0, theta=0. If all radii
    are equal, r_bar is all zeros.
    """
    coords = np.asarray(coords, dtype=np.float64)
    depot = np.asarray(depot, dtype=np.float64)
    delta = coords - depot
    r = np.hypot(delta[:, 0], delta[:, 1])
    theta = np.arctan2(delta[:, 1], delta[:, 0])
    theta = np.where(r == 0.0, 0.0, np.mod(theta, 2.0 * np.pi))
    r_min, r_max = r.min(), r.max()
    if r_max > r_min:
        r_bar = (r - r_min) / (r_max - r_min)
    else:
        r_bar = np.zeros_like(r)
    return PolarCoords(r=r, theta=theta, r_bar=r_bar, theta_bar=theta / (2.0 * np.pi))


def partition_score(polar: PolarCoords, alpha: float) -> np.ndarray:
    """Score mixing angular and radial proximity: alpha*theta_bar + (1-alpha)*r_bar."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * polar.theta_bar + (1.0 - alpha) * polar.r_bar


def alpha_schedule(rounds: int) -> list[float]:
    """Evenly spaced mixing coefficients t/(R-1); a single round uses [0.0]."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if rounds == 1:
        return [0.0]
    return [t / (rounds - 1) for t in range(rounds)]


def smooth_shift(sorted_indices: np.ndarray, cluster_size: int) -> np.ndarray:
    """Rotate the score-sorted index list left by floor(M/2) positions."""
    shift = cluster_size // 2
    return np.roll(np.asarray(sorted_indices), -shift)


def build_cluster_index(coords: np.ndarray, depot: np.ndarray,
                        cluster_size: int, rounds: int,
                        smoothing: bool) -> ClusterIndex:
    """Build the multi-round cluster partition for one instance.

    Customers are sorted by partition score (stable, ties by index) and
    chunked into consecutive groups of `cluster_size`; the last group is
    padded with the depot index. With smoothing on, each round also emits
    a boundary-shifted variant, doubling the round count.
    """
    if cluster_size < 1:
        raise ValueError("cluster_size must be >= 1")
    polar = to_polar(coords, depot)
    n = len(polar.r)
    n_clusters = math.ceil(n / cluster_size)
    padded_len = n_clusters * cluster_size

    round_lists: list[np.ndarray] = []
    pad_lists: list[np.ndarray] = []
    alphas: list[float] = []
    smoothed_flags: list[bool] = []

    for alpha in alpha_schedule(rounds):
        scores = partition_score(polar, alpha)
        order = np.argsort(scores, kind="stable")  # ties stay by index
        variants = [(order, False)]
        if smoothing:
            variants.append((smooth_shift(order, cluster_size), True))
        for variant, is_smoothed in variants:
            node_ids = variant + 1  # customers are global nodes 1..n
            padded = np.zeros(padded_len, dtype=np.int64)
            padded[:n] = node_ids
            pad_mask = np.zeros(padded_len, dtype=bool)
            pad_mask[n:] = True
            round_lists.append(padded.reshape(n_clusters, cluster_size))
            pad_lists.append(pad_mask.reshape(n_clusters, cluster_size))
            alphas.append(alpha)
            smoothed_flags.append(is_smoothed)

    return ClusterIndex(rounds=round_lists, padding=pad_lists,
                        alpha_values=alphas, smoothed=smoothed_flags,
                        n_customers=n, cluster_size=cluster_size)


def attention_pair_count(index: ClusterIndex) -> int:
    """Attention pair count by formula: (#rounds) * ceil(n/M) * M^2."""
    n_clusters = math.ceil(index.n_customers / index.cluster_size)
    return index.n_rounds * n_clusters * index.cluster_size ** 2


def measured_pair_count(index: ClusterIndex) -> int:
    """Same count obtained by iterating the built index."""
    return sum(
        sum(cluster.shape[0] ** 2 for cluster in rnd)
        for rnd in index.rounds
    )


@dataclass
class AttentionParams:
    """Multi-head projection weights for one attention block."""
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int


def _combine_matrix(index: ClusterIndex, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat member-index array and the averaging matrix mapping slot outputs
    back to node rows.

    Each cluster is its M member slots plus an appended depot slot. Padding
    slots are excluded from attention entirely; customer outputs average over
    rounds, the depot output averages over all its appearances.
    """
    slot_nodes = []
    slot_allowed = []
    for members, pads in zip(index.rounds, index.padding):
        for c in range(members.shape[0]):
            slot_nodes.extend(members[c].tolist() + [0])
            slot_allowed.extend((~pads[c]).tolist() + [True])
    slot_nodes = np.array(slot_nodes, dtype=np.int64)
    slot_allowed = np.array(slot_allowed, dtype=bool)

    combine = np.zeros((n_nodes, len(slot_nodes)))
    for s, (node, ok) in enumerate(zip(slot_nodes, slot_allowed)):
        if ok:
            combine[node, s] = 1.0
    row_sums = combine.sum(axis=1, keepdims=True)
    combine /= np.where(row_sums == 0.0, 1.0, row_sums)
    return slot_nodes, combine


def clustered_attention(h: Tensor, index: ClusterIndex,
                        params: AttentionParams) -> Tensor:
    """Scaled dot-product multi-head attention within each cluster.

    `h` has one row per node (depot first, then customers). The depot row
    joins every cluster as an extra query/key/value so all nodes can attend
    to it; padding slots are masked out. Outputs from the multiple rounds
    are combined by arithmetic mean per node.
    """
    n_nodes, d = h.shape
    if params.wq.shape[0] != d:
        raise ValueError("embedding dim does not match attention params")
    heads = params.heads
    dh = d // heads
    m1 = index.cluster_size + 1  # members + appended depot

    slot_nodes, combine = _combine_matrix(index, n_nodes)
    n_groups = len(slot_nodes) // m1

    allowed = []
    for pads in index.padding:
        for c in range(pads.shape[0]):
            allowed.extend((~pads[c]).tolist() + [True])
    allowed = np.array(allowed, dtype=bool).reshape(n_groups, m1)

    hc = reshape(take(h, slot_nodes, axis=0), (n_groups, m1, d))

    def split_heads(x: Tensor) -> Tensor:
        return swapaxes(reshape(x, (n_groups, m1, heads, dh)), 1, 2)

    q = split_heads(matmul(hc, params.wq))
    k = split_heads(matmul(hc, params.wk))
    v = split_heads(matmul(hc, params.wv))

    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    key_mask = allowed[:, None, None, :]
    attn = masked_softmax(scores, key_mask, axis=-1)
    out = matmul(attn, v)                                   # (g, heads, m1, dh)
    out = reshape(swapaxes(out, 1, 2), (n_groups * m1, d))
    out = matmul(out, params.wo)
    return matmul(Tensor(combine), out)
