"""Forward structure of the discrepancy-aware masked graph autoencoder.

Encoder and decoder are graph-attention layers running over the graph's arcs
plus one self-loop per node. Attention logits use the split form
``LeakyReLU(a_dst . W h_i + a_src . W h_j)`` for the arc ``j -> i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorad as ad
from .graphcore import Graph
from .tensorad import Tensor


@dataclass(frozen=True)
class MaskPlan:
    masked: np.ndarray
    seed: int | None = None

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())

    @property
    def n_unmasked(self) -> int:
        return int(self.masked.size - self.masked.sum())


@dataclass(frozen=True)
class EdgeSelectionMask:
    """Boolean selection per directed arc, aligned with ``Graph.arcs()``."""

    m: np.ndarray
    seed: int | None = None


@dataclass(frozen=True)
class AttentionWeights:
    """Head-averaged attention per graph arc (self-loops excluded), detached."""

    w: np.ndarray


@dataclass
class GatLayerParams:
    W: Tensor  # in_dim x (heads * out_dim)
    attn_src: Tensor  # heads x out_dim
    attn_dst: Tensor  # heads x out_dim
    W_res: Tensor  # in_dim x out_dim, residual projection of the node's own input
    heads: int
    concat: bool
    leaky_slope: float = 0.2

    @property
    def out_per_head(self) -> int:
        return self.attn_src.shape[1]

    @property
    def out_dim(self) -> int:
        return self.out_per_head * self.heads if self.concat else self.out_per_head

    def tensors(self) -> list[Tensor]:
        return [self.W, self.attn_src, self.attn_dst, self.W_res]


@dataclass
class ModelParams:
    encoder_layers: list[GatLayerParams]
    enc_dec_bridge: Tensor
    decoder_layer: GatLayerParams
    proj_W1: Tensor
    proj_b1: Tensor
    proj_W2: Tensor
    proj_b2: Tensor

    def tensors(self) -> list[Tensor]:
        """All learnable tensors in declaration order (the checkpoint order)."""
        out: list[Tensor] = []
        for layer in self.encoder_layers:
            out.extend(layer.tensors())
        out.append(self.enc_dec_bridge)
        out.extend(self.decoder_layer.tensors())
        out.extend([self.proj_W1, self.proj_b1, self.proj_W2, self.proj_b2])
        return out

    @property
    def hidden_dim(self) -> int:
        return self.encoder_layers[-1].out_dim

    @property
    def in_dim(self) -> int:
        return self.encoder_layers[0].W.shape[0]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _gat_layer(rng, in_dim: int, out_per_head: int, heads: int, concat: bool) -> GatLayerParams:
    out_dim = out_per_head * heads if concat else out_per_head
    return GatLayerParams(
        W=_glorot(rng, in_dim, out_per_head * heads, (in_dim, out_per_head * heads)),
        attn_src=_glorot(rng, out_per_head, 1, (heads, out_per_head)),
        attn_dst=_glorot(rng, out_per_head, 1, (heads, out_per_head)),
        W_res=_glorot(rng, in_dim, out_dim, (in_dim, out_dim)),
        heads=heads,
        concat=concat,
    )


def init_params(in_dim: int, hidden_dim: int, heads: int = 4, num_layers: int = 2, seed: int = 0) -> ModelParams:
    """Glorot-initialized parameters.

    Hidden encoder layers use ``hidden_dim // heads`` units per head and
    concatenate; the last encoder layer uses ``hidden_dim`` units per head and
    averages heads. The decoder is single-headed, mapping back to ``in_dim``.
    """
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    if heads < 1:
        raise ValueError("heads must be >= 1")
    if num_layers > 1 and hidden_dim % heads:
        raise ValueError("hidden_dim must be divisible by heads")
    rng = np.random.default_rng(seed)
    layers = []
    dim = in_dim
    for _ in range(num_layers - 1):
        layers.append(_gat_layer(rng, dim, hidden_dim // heads, heads, concat=True))
        dim = hidden_dim
    layers.append(_gat_layer(rng, dim, hidden_dim, heads, concat=False))
    return ModelParams(
        encoder_layers=layers,
        enc_dec_bridge=_glorot(rng, hidden_dim, hidden_dim, (hidden_dim, hidden_dim)),
        decoder_layer=_gat_layer(rng, hidden_dim, in_dim, 1, concat=False),
        proj_W1=_glorot(rng, hidden_dim, hidden_dim, (hidden_dim, hidden_dim)),
        proj_b1=Tensor(np.zeros((1, hidden_dim)), requires_grad=True),
        proj_W2=_glorot(rng, hidden_dim, in_dim, (hidden_dim, in_dim)),
        proj_b2=Tensor(np.zeros((1, in_dim)), requires_grad=True),
    )


def params_from_arrays(arrays: list[np.ndarray]) -> ModelParams:
    """Rebuild :class:`ModelParams` from blocks in declaration order, inferring the architecture."""
    if len(arrays) < 13 or (len(arrays) - 9) % 4:
        raise ValueError(f"unexpected parameter block count {len(arrays)}")
    n_layers = (len(arrays) - 9) // 4

    def t(a):
        return Tensor(np.array(a, dtype=np.float64), requires_grad=True)

    layers = []
    for k in range(n_layers):
        W, a_s, a_d, W_res = arrays[4 * k : 4 * k + 4]
        layers.append(GatLayerParams(t(W), t(a_s), t(a_d), t(W_res), heads=a_s.shape[0], concat=k < n_layers - 1))
    rest = arrays[4 * n_layers :]
    dec = GatLayerParams(t(rest[1]), t(rest[2]), t(rest[3]), t(rest[4]), heads=rest[2].shape[0], concat=False)
    return ModelParams(layers, t(rest[0]), dec, t(rest[5]), t(rest[6]), t(rest[7]), t(rest[8]))


class ArcIndex:
    """Arc arrays with one self-loop per node appended after the graph arcs."""

    __slots__ = ("n", "dst", "src", "n_graph_arcs")

    def __init__(self, g: Graph):
        gd, gs = g.arcs()
        loops = np.arange(g.n, dtype=np.int64)
        self.n = g.n
        self.dst = np.concatenate([gd, loops])
        self.src = np.concatenate([gs, loops])
        self.n_graph_arcs = gd.size


_arc_cache: dict[int, tuple[Graph, ArcIndex]] = {}


def arc_index(g: Graph) -> ArcIndex:
    hit = _arc_cache.get(id(g))
    if hit is None or hit[0] is not g:
        hit = (g, ArcIndex(g))
        if len(_arc_cache) > 64:
            _arc_cache.clear()
        _arc_cache[id(g)] = hit
    return hit[1]


def sample_mask(n: int, mask_ratio: float, seed: int | np.random.Generator) -> MaskPlan:
    """Mask each node independently with probability ``mask_ratio``."""
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError("mask_ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    masked = rng.random(n) < mask_ratio
    masked.setflags(write=False)
    return MaskPlan(masked, seed if isinstance(seed, (int, np.integer)) else None)


def apply_mask(X, plan: MaskPlan) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if plan.masked.shape != (X.shape[0],):
        raise ValueError("mask length does not match row count")
    out = X.copy()
    out[plan.masked] = 0.0
    return out


def _col(attn: Tensor, h: int) -> Tensor:
    return ad.transpose(ad.slice_rows(attn, h, h + 1))


def gat_layer(layer: GatLayerParams, x, arcs: ArcIndex) -> tuple[Tensor, np.ndarray]:
    """One attention layer; returns the output and per-head attention (arcs x heads)."""
    x = ad.as_tensor(x)
    if x.shape[0] != arcs.n or x.shape[1] != layer.W.shape[0]:
        raise ValueError(f"layer expects input ({arcs.n}, {layer.W.shape[0]}), got {x.shape}")
    wh = ad.matmul(x, layer.W)
    f = layer.out_per_head
    outs, attn = [], []
    for h in range(layer.heads):
        wh_h = ad.slice_cols(wh, h * f, (h + 1) * f) if layer.heads > 1 else wh
        s_src = ad.matmul(wh_h, _col(layer.attn_src, h))
        s_dst = ad.matmul(wh_h, _col(layer.attn_dst, h))
        logits = ad.leaky_relu(
            ad.add(ad.gather_rows(s_dst, arcs.dst), ad.gather_rows(s_src, arcs.src)), layer.leaky_slope
        )
        w = ad.segment_softmax(logits, arcs.dst, arcs.n)
        attn.append(w.value[:, 0])
        outs.append(ad.arc_aggregate(w, wh_h, arcs.dst, arcs.src, arcs.n))
    if layer.heads == 1:
        out = outs[0]
    elif layer.concat:
        out = ad.concat_cols(outs)
    else:
        out = outs[0]
        for o in outs[1:]:
            out = ad.add(out, o)
        out = ad.scale(out, 1.0 / layer.heads)
    out = ad.add(out, ad.matmul(x, layer.W_res))
    return out, np.stack(attn, axis=1)


def encode(params: ModelParams, x_in, g: Graph) -> tuple[Tensor, AttentionWeights]:
    """Run the encoder stack; ELU follows every layer, including the last.

    The returned attention comes from the last layer, averaged over heads,
    restricted to the graph's own arcs (self-loops dropped) and detached.
    """
    arcs = arc_index(g)
    h = ad.as_tensor(x_in)
    if h.shape[0] != g.n:
        raise ValueError(f"input must have {g.n} rows, got {h.shape[0]}")
    attn = None
    for layer in params.encoder_layers:
        h, attn = gat_layer(layer, h, arcs)
        h = ad.elu(h)
    w = attn[: arcs.n_graph_arcs].mean(axis=1)
    return h, AttentionWeights(w)


def decode(params: ModelParams, h_masked, g: Graph) -> Tensor:
    """Bridge the masked-pass code through a linear map, then one attention layer back to feature space."""
    bridged = ad.matmul(h_masked, params.enc_dec_bridge)
    out, _ = gat_layer(params.decoder_layer, bridged, arc_index(g))
    return out


def project(params: ModelParams, h) -> Tensor:
    """Two-layer MLP with ELU in between; maps hidden codes to feature space."""
    z = ad.elu(ad.add(ad.matmul(h, params.proj_W1), params.proj_b1))
    return ad.add(ad.matmul(z, params.proj_W2), params.proj_b2)


def selection_probabilities(attn: AttentionWeights, p_c: float, p_tau: float) -> np.ndarray:
    return np.minimum((1.0 - attn.w) * p_c, p_tau)


def select_discrepancy_edges(attn: AttentionWeights, p_c: float, p_tau: float, seed) -> EdgeSelectionMask:
    """Keep arc ``j -> i`` with probability ``min((1 - w_ij) * p_c, p_tau)``, independently per arc."""
    if not 0.0 <= p_c <= 1.0:
        raise ValueError("p_c must lie in [0, 1]")
    if not 0.0 < p_tau <= 1.0:
        raise ValueError("p_tau must lie in (0, 1]")
    p = selection_probabilities(attn, p_c, p_tau)
    rng = np.random.default_rng(seed)
    m = rng.random(p.size) < p
    m.setflags(write=False)
    return EdgeSelectionMask(m, seed if isinstance(seed, (int, np.integer)) else None)


def masked_discrepancy_target(X, g: Graph, m: EdgeSelectionMask | np.ndarray) -> np.ndarray:
    """Selected-edge discrepancy target on row-normalized features.

    ``x_i^D = sum_j m_ij (x_i - x_j) / sqrt(d_i d_j)`` with the degrees of the
    full graph, regardless of how many arcs were selected.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != g.n:
        raise ValueError(f"features must have {g.n} rows")
    sel = np.asarray(m.m if isinstance(m, EdgeSelectionMask) else m, dtype=bool)
    if sel.shape != (g.num_arcs,):
        raise ValueError("selection must cover every arc")
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    Xn = X / np.maximum(norms, 1e-12)
    dst, src = g.arcs()
    dst, src = dst[sel], src[sel]
    deg = g.degree.astype(np.float64)
    coef = 1.0 / np.sqrt(deg[dst] * deg[src])
    out = np.zeros_like(Xn)
    np.add.at(out, dst, (Xn[dst] - Xn[src]) * coef[:, None])
    return out


def embedding_discrepancy(z, z_hat) -> Tensor:
    z, z_hat = ad.as_tensor(z), ad.as_tensor(z_hat)
    if z.shape != z_hat.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z_hat.shape}")
    return ad.sub(z, z_hat)
