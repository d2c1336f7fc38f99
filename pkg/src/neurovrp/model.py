"""Dual-stream policy model: clustered-attention node encoder, residual
edge embeddings with a static transition heatmap, and the sequential
decoder that fuses both logit paths.

All forward functions operate on a batch of instances that share
(variant, n, optional-node count); batching across instances and rollouts
keeps the op count small enough for CPU training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .clustering import AttentionParams, build_cluster_index, clustered_attention
from .instances import Instance, Variant, build_distance_matrix
from .tensor import Tensor

LOGIT_CLIP = 10.0   # C in C*tanh(.) logit clipping, POMO convention


@dataclass
class ModelConfig:
    variant: Variant = Variant.VRP
    d: int = 16
    heads: int = 2
    layers: int = 2
    ff: int = 64
    edge_dim: int = 8
    k_neighbors: int | None = None   # None: all other nodes
    cluster_size: int | None = None  # None: full attention in one group
    rounds: int = 1
    smoothing: bool = False

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.edge_dim > self.d:
            raise ValueError("edge_dim must not exceed d")

    @classmethod
    def full_scale(cls, variant: Variant = Variant.VRP) -> "ModelConfig":
        return cls(variant=variant, d=128, heads=8, layers=6, ff=512,
                   edge_dim=32, k_neighbors=50)


def customer_feature_dim(variant: Variant) -> int:
    return 6 if variant == Variant.VRPTW else 3


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """All trainable tensors, uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    d, ff, de = config.d, config.ff, config.edge_dim
    hidden = 8 * de
    p: dict[str, Tensor] = {}

    def w(name, rows, cols=None):
        scale = 1.0 / math.sqrt(rows)
        shape = (rows, cols) if cols is not None else (rows,)
        p[name] = Tensor(rng.uniform(-scale, scale, size=shape),
                        requires_grad=True)

    def b(name, size):
        p[name] = Tensor(np.zeros(size), requires_grad=True)

    w("enc.in.depot.w", 2, d); b("enc.in.depot.b", d)
    cfd = customer_feature_dim(config.variant)
    w("enc.in.cust.w", cfd, d); b("enc.in.cust.b", d)

    for i in range(config.layers):
        for name in ("wq", "wk", "wv", "wo"):
            w(f"enc.l{i}.attn.{name}", d, d)
        w(f"enc.l{i}.ff.w1", d, ff); b(f"enc.l{i}.ff.b1", ff)
        w(f"enc.l{i}.ff.w2", ff, d); b(f"enc.l{i}.ff.b2", d)
        for j in (1, 2):
            p[f"enc.l{i}.norm{j}.scale"] = Tensor(np.ones(d), requires_grad=True)
            p[f"enc.l{i}.norm{j}.shift"] = Tensor(np.zeros(d), requires_grad=True)

    if config.variant in (Variant.EVRPCS, Variant.VRPRS):
        w("opt.in.w", 2, d); b("opt.in.b", d)
        for name in ("wq", "wk", "wv", "wo"):
            w(f"opt.attn.{name}", d, d)
        w("opt.fuse.wq", d, d)
        w("opt.fuse.wk", d, d)
        w("opt.fuse.wv", d, d)
        p["opt.fuse.gate"] = Tensor(np.zeros(()), requires_grad=True)

    w("edge.in.w", 3, de); b("edge.in.b", de)
    w("edge.red_src.w", d, de); b("edge.red_src.b", de)
    w("edge.red_dst.w", d, de); b("edge.red_dst.b", de)
    for name in ("w1", "w2", "w3"):
        w(f"edge.{name}", de, de)
    p["edge.norm.scale"] = Tensor(np.ones(de), requires_grad=True)
    p["edge.norm.shift"] = Tensor(np.zeros(de), requires_grad=True)
    w("edge.mlp.w1", de, hidden); b("edge.mlp.b1", hidden)
    w("edge.mlp.w2", hidden, hidden); b("edge.mlp.b2", hidden)
    w("edge.mlp.w3", hidden, 1); b("edge.mlp.b3", 1)

    w("dec.ctx.w", d + 2, d)
    for name in ("wk_g", "wv_g", "wo_g", "wk_l"):
        w(f"dec.{name}", d, d)

    return p


def param_count(params: dict[str, Tensor]) -> dict[str, int]:
    """Per-module and total parameter counts, keyed by name prefix."""
    groups: dict[str, int] = {}
    for name, t in params.items():
        prefix = name.split(".")[0]
        groups[prefix] = groups.get(prefix, 0) + t.size
    groups["total"] = sum(t.size for t in params.values())
    return groups


# -- encoder ------------------------------------------------------------

def node_features(batch: list[Instance]) -> tuple[np.ndarray, np.ndarray]:
    """Depot features (B, 2) and customer features (B, n, cfd)."""
    variant = batch[0].variant
    depot = np.stack([inst.depot for inst in batch])
    feats = []
    for inst in batch:
        f = [inst.customers[:, 0], inst.customers[:, 1],
             inst.demands / inst.capacity]
        if variant == Variant.VRPTW:
            tw = inst.time_windows
            f += [tw.earliest / tw.horizon, tw.latest / tw.horizon,
                  tw.service / tw.horizon]
        feats.append(np.stack(f, axis=1))
    return depot, np.stack(feats)


def _dense_attention(h: Tensor, params: dict[str, Tensor], layer: int,
                     heads: int) -> Tensor:
    """Full multi-head self-attention over all nodes, batched (B, N, d)."""
    bsz, n, d = h.shape
    dh = d // heads

    def split(x):
        return T.swapaxes(T.reshape(x, (bsz, n, heads, dh)), 1, 2)

    q = split(h @ params[f"enc.l{layer}.attn.wq"])
    k = split(h @ params[f"enc.l{layer}.attn.wk"])
    v = split(h @ params[f"enc.l{layer}.attn.wv"])
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = T.masked_softmax(scores, np.ones(scores.shape, dtype=bool))
    out = T.reshape(T.swapaxes(attn @ v, 1, 2), (bsz, n, d))
    return out @ params[f"enc.l{layer}.attn.wo"]


def _encoder_layer(h: Tensor, params: dict[str, Tensor], layer: int,
                   config: ModelConfig,
                   cluster_indices: list | None) -> Tensor:
    if cluster_indices is None:
        att = _dense_attention(h, params, layer, config.heads)
    else:
        ap = AttentionParams(wq=params[f"enc.l{layer}.attn.wq"],
                             wk=params[f"enc.l{layer}.attn.wk"],
                             wv=params[f"enc.l{layer}.attn.wv"],
                             wo=params[f"enc.l{layer}.attn.wo"],
                             heads=config.heads)
        rows = [clustered_attention(T.reshape(
            T.take(h, np.array([b]), axis=0), h.shape[1:]), idx, ap)
            for b, idx in enumerate(cluster_indices)]
        att = T.reshape(T.concat(rows, axis=0),
                        (len(rows),) + rows[0].shape)
    h = h + att
    h = T.norm_affine(h, params[f"enc.l{layer}.norm1.scale"],
                      params[f"enc.l{layer}.norm1.shift"], axis=-2)
    ff = T.silu(h @ params[f"enc.l{layer}.ff.w1"] + params[f"enc.l{layer}.ff.b1"])
    ff = ff @ params[f"enc.l{layer}.ff.w2"] + params[f"enc.l{layer}.ff.b2"]
    h = h + ff
    return T.norm_affine(h, params[f"enc.l{layer}.norm2.scale"],
                         params[f"enc.l{layer}.norm2.shift"], axis=-2)


def encode(batch: list[Instance], params: dict[str, Tensor],
           config: ModelConfig) -> Tensor:
    """Embed depot + customers through the layered encoder: (B, n+1, d)."""
    if batch[0].variant != config.variant:
        raise ValueError("instance variant does not match model config")
    depot_xy, cust_feats = node_features(batch)
    depot_h = Tensor(depot_xy) @ params["enc.in.depot.w"] + params["enc.in.depot.b"]
    cust_h = Tensor(cust_feats) @ params["enc.in.cust.w"] + params["enc.in.cust.b"]
    h = T.concat([T.reshape(depot_h, (len(batch), 1, config.d)), cust_h], axis=1)

    cluster_indices = None
    if config.cluster_size is not None:
        cluster_indices = [
            build_cluster_index(inst.customers, inst.depot,
                                config.cluster_size, config.rounds,
                                config.smoothing)
            for inst in batch]

    for layer in range(config.layers):
        h = _encoder_layer(h, params, layer, config, cluster_indices)
    return h


# -- optional-node pathway ----------------------------------------------

def gumbel_tau(epoch: int, start: float = 1.0, decay: float = 0.99,
               floor: float = 0.2) -> float:
    """Annealing schedule for the optional-node fusion temperature."""
    return max(floor, start * decay ** epoch)


def encode_optional(batch: list[Instance], params: dict[str, Tensor],
                    config: ModelConfig) -> Tensor:
    """Self-attention embeddings of the optional nodes: (B, f, d)."""
    if config.variant not in (Variant.EVRPCS, Variant.VRPRS):
        raise ValueError("variant has no optional nodes")
    coords = np.stack([inst.optional_nodes for inst in batch])
    h = Tensor(coords) @ params["opt.in.w"] + params["opt.in.b"]
    bsz, f, d = h.shape
    heads = config.heads
    dh = d // heads

    def split(x):
        return T.swapaxes(T.reshape(x, (bsz, f, heads, dh)), 1, 2)

    q = split(h @ params["opt.attn.wq"])
    k = split(h @ params["opt.attn.wk"])
    v = split(h @ params["opt.attn.wv"])
    attn = T.masked_softmax((q @ T.swapaxes(k, -1, -2)) * (1 / math.sqrt(dh)),
                            np.ones((bsz, heads, f, f), dtype=bool))
    out = T.reshape(T.swapaxes(attn @ v, 1, 2), (bsz, f, d))
    return out @ params["opt.attn.wo"]


def fuse_optional(h: Tensor, h_opt: Tensor, params: dict[str, Tensor],
                  tau: float, noise: np.ndarray | None = None) -> Tensor:
    """Blend optional-facility context into customer embeddings.

    Each customer forms Gumbel-Softmax weights over the optional nodes at
    temperature tau (noise supplied externally for determinism; None means
    zero noise) and adds the weighted facility value through a scalar gate
    initialized at zero.
    """
    bsz, n1, d = h.shape
    f = h_opt.shape[1]
    cust = T.take(h, np.arange(1, n1), axis=1)
    logits = (cust @ params["opt.fuse.wq"]) @ \
        T.swapaxes(h_opt @ params["opt.fuse.wk"], -1, -2) * (1 / math.sqrt(d))
    if noise is not None:
        logits = logits + Tensor(noise)
    weights = T.masked_softmax(logits * (1.0 / tau),
                               np.ones((bsz, n1 - 1, f), dtype=bool))
    blended = weights @ (h_opt @ params["opt.fuse.wv"])
    cust = cust + params["opt.fuse.gate"] * blended
    depot = T.take(h, np.array([0]), axis=1)
    return T.concat([depot, cust], axis=1)


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + 1e-20) + 1e-20)


# -- edge module and heatmap --------------------------------------------

@dataclass
class EdgeSet:
    """K-nearest-neighbor directed edges among depot + customers."""
    neighbors: np.ndarray   # (B, N, K) target node index
    features: np.ndarray    # (B, N, K, 3): forward, reverse, difference

    @property
    def k(self) -> int:
        return self.neighbors.shape[2]


def build_edge_set(batch: list[Instance], config: ModelConfig) -> EdgeSet:
    """Edges over depot+customers only; optional nodes do not participate."""
    n_dc = 1 + batch[0].n_customers
    k = config.k_neighbors or (n_dc - 1)
    k = min(k, n_dc - 1)
    nbrs, feats = [], []
    for inst in batch:
        d = build_distance_matrix(inst).values[:n_dc, :n_dc]
        order = np.argsort(d + np.eye(n_dc) * 1e9, axis=1, kind="stable")
        nb = order[:, :k]
        fwd = np.take_along_axis(d, nb, axis=1)
        rev = d.T[np.arange(n_dc)[:, None], nb]
        nbrs.append(nb)
        feats.append(np.stack([fwd, rev, fwd - rev], axis=-1))
    return EdgeSet(neighbors=np.stack(nbrs), features=np.stack(feats))


def edge_embed(h: Tensor, edges: EdgeSet, params: dict[str, Tensor]) -> Tensor:
    """Residual-fused edge embeddings: (B, N, K, d_e).

    h covers depot + customers only ((B, N, d)).
    """
    bsz, n_dc, d = h.shape
    k = edges.k
    x_e = Tensor(edges.features) @ params["edge.in.w"] + params["edge.in.b"]
    src = h @ params["edge.red_src.w"] + params["edge.red_src.b"]
    dst = h @ params["edge.red_dst.w"] + params["edge.red_dst.b"]
    flat_idx = (np.arange(bsz)[:, None, None] * n_dc + edges.neighbors).ravel()
    de = x_e.shape[-1]
    dst_g = T.reshape(T.take(T.reshape(dst, (bsz * n_dc, de)), flat_idx, axis=0),
                      (bsz, n_dc, k, de))
    src_b = T.reshape(src, (bsz, n_dc, 1, de))
    pre = src_b @ params["edge.w1"] + dst_g @ params["edge.w2"] \
        + x_e @ params["edge.w3"]
    pre = T.reshape(pre, (bsz, n_dc * k, de))
    pre = T.norm_affine(pre, params["edge.norm.scale"],
                        params["edge.norm.shift"], axis=-2)
    return x_e + T.silu(T.reshape(pre, (bsz, n_dc, k, de)))


def heatmap(h_e: Tensor, edges: EdgeSet, params: dict[str, Tensor]) -> Tensor:
    """Static transition-preference matrix: tanh(MLP(edge)) on stored edges,
    zero for pairs outside the kNN edge set: (B, N, N)."""
    bsz, n_dc, k, de = h_e.shape
    x = T.silu(h_e @ params["edge.mlp.w1"] + params["edge.mlp.b1"])
    x = T.silu(x @ params["edge.mlp.w2"] + params["edge.mlp.b2"])
    vals = T.tanh(x @ params["edge.mlp.w3"] + params["edge.mlp.b3"])
    vals = T.reshape(vals, (bsz, n_dc, k))
    b_idx = np.arange(bsz)[:, None, None]
    i_idx = np.arange(n_dc)[None, :, None]
    flat = (b_idx * n_dc * n_dc + i_idx * n_dc + edges.neighbors).ravel()
    return T.scatter(vals, flat, (bsz, n_dc, n_dc))


# -- decoder ------------------------------------------------------------

@dataclass
class DecodeCache:
    """Per-instance projections computed once before stepping."""
    h_nodes: Tensor      # (B, N_total, d) embeddings incl. optional nodes
    k_glimpse: Tensor
    v_glimpse: Tensor
    k_logit: Tensor
    heat: Tensor | None  # (B, N_dc, N_dc)
    n_dc: int


def build_decode_cache(h_dc: Tensor, h_opt: Tensor | None,
                       heat: Tensor | None,
                       params: dict[str, Tensor]) -> DecodeCache:
    h_nodes = h_dc if h_opt is None else T.concat([h_dc, h_opt], axis=1)
    return DecodeCache(
        h_nodes=h_nodes,
        k_glimpse=h_nodes @ params["dec.wk_g"],
        v_glimpse=h_nodes @ params["dec.wv_g"],
        k_logit=h_nodes @ params["dec.wk_l"],
        heat=heat,
        n_dc=h_dc.shape[1],
    )


@dataclass
class ExpandedCache:
    """DecodeCache broadcast to per-trajectory rows, built once per rollout."""
    traj_instance: np.ndarray
    h_flat: Tensor       # (B*N, d) for current-node gathers
    k_g: Tensor          # (T, heads, N, dh)
    v_g: Tensor          # (T, heads, N, dh)
    k_l: Tensor          # (T, N, d)
    heat_flat: Tensor | None   # (B*N_dc, N_dc)
    n_dc: int
    n_total: int


def expand_cache(cache: DecodeCache, traj_instance: np.ndarray,
                 config: ModelConfig) -> ExpandedCache:
    """Replicate instance-level projections onto trajectory rows.

    The trajectory-to-instance map never changes during a rollout, so
    this gather happens once instead of once per step.
    """
    bsz, n_total, d = cache.h_nodes.shape
    t_cnt = len(traj_instance)
    heads = config.heads
    dh = d // heads

    def split_t(x):
        x = T.take(x, traj_instance, axis=0)
        return T.swapaxes(T.reshape(x, (t_cnt, n_total, heads, dh)), 1, 2)

    return ExpandedCache(
        traj_instance=traj_instance,
        h_flat=T.reshape(cache.h_nodes, (bsz * n_total, d)),
        k_g=split_t(cache.k_glimpse),
        v_g=split_t(cache.v_glimpse),
        k_l=T.take(cache.k_logit, traj_instance, axis=0),
        heat_flat=None if cache.heat is None
        else T.reshape(cache.heat, (bsz * cache.n_dc, cache.n_dc)),
        n_dc=cache.n_dc,
        n_total=n_total,
    )


def decode_step(cache: ExpandedCache, params: dict[str, Tensor],
                config: ModelConfig, current: np.ndarray,
                cap_frac: np.ndarray, xi: np.ndarray, allowed: np.ndarray,
                opt_term: np.ndarray | None = None) -> Tensor:
    """One decoding step for T trajectories: probabilities (T, N_total).

    cap_frac is the remaining-capacity fraction c_t and xi the normalized
    variant-specific resource/time feature (zero where unused). opt_term
    holds the resource-driven heatmap stand-in for optional-node columns.
    """
    n_total = cache.n_total
    d = config.d
    t_cnt = len(current)
    heads = config.heads
    dh = d // heads
    traj_instance = cache.traj_instance

    flat_idx = traj_instance * n_total + current
    h_t = T.take(cache.h_flat, flat_idx, axis=0)
    ctx = T.concat([h_t, Tensor(cap_frac[:, None]), Tensor(xi[:, None])], axis=1)
    q = ctx @ params["dec.ctx.w"]

    qh = T.reshape(q, (t_cnt, heads, 1, dh))
    scores = (qh @ T.swapaxes(cache.k_g, -1, -2)) * (1 / math.sqrt(dh))
    attn = T.masked_softmax(scores, allowed[:, None, None, :])
    glimpse = T.reshape(T.swapaxes(attn @ cache.v_g, 1, 2), (t_cnt, d))
    q2 = glimpse @ params["dec.wo_g"]

    logits = T.reshape(T.reshape(q2, (t_cnt, 1, d))
                       @ T.swapaxes(cache.k_l, -1, -2), (t_cnt, n_total))
    logits = T.tanh(logits * (1 / math.sqrt(d))) * LOGIT_CLIP

    if cache.heat_flat is not None:
        n_dc = cache.n_dc
        on_dc = current < n_dc
        safe_cur = np.where(on_dc, current, 0)
        rows = T.take(cache.heat_flat, traj_instance * n_dc + safe_cur, axis=0)
        rows = rows * Tensor(on_dc.astype(float)[:, None])
        if n_total > n_dc:
            pad = Tensor(np.zeros((t_cnt, n_total - n_dc)))
            rows = T.concat([rows, pad], axis=1)
        logits = logits + rows
    if opt_term is not None:
        logits = logits + Tensor(opt_term)

    return T.masked_softmax(logits, allowed)
