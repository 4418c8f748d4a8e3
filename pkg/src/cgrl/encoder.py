"""Graph encoders: relational mean-aggregation GCN, multi-head update, and GAT.

All layers consume a :class:`Structure`, a tensor view of a graph's edges.
Messages travel ``src -> dst``. Self-loops are implicit: a node always
attends to / aggregates itself with weight one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ParameterError, ShapeError
from .graph_data import Graph

ENCODER_KINDS = ("gcn", "gat")


@dataclass(frozen=True)
class Structure:
    """Edge tensors for message passing, with precomputed GCN normalizers.

    ``inv_count[e]`` is ``1 / |N_dst^r|`` for edge ``e`` with relation ``r``;
    ``self_count[i]`` is the number of relations under which node ``i`` has
    neighbors (one for isolated nodes), the multiplicity of the self term.
    """

    num_nodes: int
    src: Tensor
    dst: Tensor
    relation: Tensor
    weight: Tensor
    inv_count: Tensor
    self_count: Tensor

    @classmethod
    def from_graph(cls, g: Graph, dtype: torch.dtype = torch.float32) -> "Structure":
        src = torch.tensor(g.edge_index[0], dtype=torch.long)
        dst = torch.tensor(g.edge_index[1], dtype=torch.long)
        rel = torch.tensor(g.edge_relation, dtype=torch.long)
        n, r = g.num_nodes, max(g.num_relations, 1)
        counts = torch.zeros(n * r, dtype=dtype)
        key = dst * r + rel
        counts.index_add_(0, key, torch.ones(key.numel(), dtype=dtype))
        inv = 1.0 / counts[key] if key.numel() else torch.zeros(0, dtype=dtype)
        self_count = (counts.view(n, r) > 0).sum(1).clamp(min=1).to(dtype)
        return cls(
            num_nodes=n,
            src=src,
            dst=dst,
            relation=rel,
            weight=torch.tensor(g.edge_weight, dtype=dtype),
            inv_count=inv,
            self_count=self_count,
        )

    @property
    def num_edges(self) -> int:
        return int(self.src.numel())

    def with_weight(self, weight: Tensor) -> "Structure":
        if weight.shape != (self.num_edges,):
            raise ShapeError(f"edge weight must have shape ({self.num_edges},), got {tuple(weight.shape)}")
        return replace(self, weight=weight)

    def drop_edges(self, keep: Tensor) -> "Structure":
        """Structure restricted to the edges where the boolean ``keep`` holds.

        Neighborhood sizes are recounted on the surviving edges.
        """
        idx = torch.nonzero(keep, as_tuple=False).view(-1)
        src, dst, rel = self.src[idx], self.dst[idx], self.relation[idx]
        r = int(self.relation.max().item()) + 1 if self.num_edges else 1
        dtype = self.weight.dtype
        counts = torch.zeros(self.num_nodes * r, dtype=dtype)
        key = dst * r + rel
        counts.index_add_(0, key, torch.ones(key.numel(), dtype=dtype))
        inv = 1.0 / counts[key] if key.numel() else torch.zeros(0, dtype=dtype)
        self_count = (counts.view(self.num_nodes, r) > 0).sum(1).clamp(min=1).to(dtype)
        return Structure(self.num_nodes, src, dst, rel, self.weight[idx], inv, self_count)


def as_structure(g: Graph | Structure, dtype: torch.dtype = torch.float32) -> Structure:
    return g if isinstance(g, Structure) else Structure.from_graph(g, dtype)


def gcn_layer(
    h: Tensor,
    g: Graph | Structure,
    w_agg: Tensor,
    w_update: Tensor,
    bias: Tensor | None = None,
    edge_weight: Tensor | None = None,
    self_weight: float = 1.0,
) -> Tensor:
    """Relational mean aggregation followed by the update map.

    Row ``i`` of the result is::

        W_update( sum_r sum_{j in N_i^r} (w_ij W_agg h_j + w_ii W_agg h_i) / |N_i^r| )

    Weights act on the right (``h @ w_agg``). Isolated nodes keep only their
    self term.
    """
    s = as_structure(g, h.dtype)
    if h.dim() != 2 or h.shape[0] != s.num_nodes:
        raise ShapeError(f"h must be ({s.num_nodes}, d), got {tuple(h.shape)}")
    if w_agg.shape[0] != h.shape[1] or w_update.shape[0] != w_agg.shape[1]:
        raise ShapeError(
            f"weight chain {tuple(h.shape)} @ {tuple(w_agg.shape)} @ {tuple(w_update.shape)} is inconsistent"
        )
    w = s.weight if edge_weight is None else edge_weight
    a = h @ w_agg
    agg = self_weight * s.self_count.unsqueeze(1) * a
    if s.num_edges:
        coef = (w * s.inv_count).unsqueeze(1)
        agg = agg.index_add(0, s.dst, coef * a[s.src])
    out = agg @ w_update
    if bias is not None:
        out = out + bias
    return out


def multi_head_update(h: Tensor, head_weights: Sequence[Tensor]) -> Tensor:
    """Split the last dimension into ``len(head_weights)`` chunks and map each.

    Returns ``concat(h^1 W^1, ..., h^N W^N)``.
    """
    n = len(head_weights)
    if n == 0 or h.shape[-1] % n:
        raise ShapeError(f"feature dim {h.shape[-1]} is not divisible into {n} heads")
    chunks = torch.split(h, h.shape[-1] // n, dim=-1)
    for k, (c, w) in enumerate(zip(chunks, head_weights)):
        if w.shape[0] != c.shape[-1]:
            raise ShapeError(f"head {k}: weight rows {w.shape[0]} != chunk width {c.shape[-1]}")
    return torch.cat([c @ w for c, w in zip(chunks, head_weights)], dim=-1)


class GCNLayer(nn.Module):
    """``gcn_layer`` followed by a per-head update, heads concatenated."""

    def __init__(self, in_dim: int, out_dim: int, num_heads: int):
        super().__init__()
        if out_dim % num_heads:
            raise ShapeError(f"out_dim {out_dim} not divisible by num_heads {num_heads}")
        d = out_dim // num_heads
        self.w_agg = nn.Parameter(torch.empty(in_dim, out_dim))
        self.w_update = nn.Parameter(torch.empty(out_dim, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        self.heads = nn.ParameterList([nn.Parameter(torch.empty(d, d)) for _ in range(num_heads)])
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.xavier_uniform_(self.w_agg)
        nn.init.xavier_uniform_(self.w_update)
        for w in self.heads:
            nn.init.xavier_uniform_(w)
        nn.init.zeros_(self.bias)

    def forward(self, h: Tensor, s: Structure, edge_weight: Tensor | None = None) -> Tensor:
        out = gcn_layer(h, s, self.w_agg, self.w_update, edge_weight=edge_weight)
        return multi_head_update(out, list(self.heads)) + self.bias


class GATLayer(nn.Module):
    """Additive single-layer graph attention.

    Edge weights enter the attention softmax multiplicatively,
    ``alpha_ij ∝ w_ij exp(e_ij)``, so weight 0 is exactly edge removal and
    weight 1 is plain attention. The implicit self-loop has weight one.
    """

    def __init__(self, in_dim: int, out_dim: int, num_heads: int, concat: bool, negative_slope: float = 0.2):
        super().__init__()
        self.num_heads = num_heads
        self.out_dim = out_dim
        self.concat = concat
        self.negative_slope = negative_slope
        self.lin = nn.Parameter(torch.empty(in_dim, num_heads * out_dim))
        self.att_src = nn.Parameter(torch.empty(num_heads, out_dim))
        self.att_dst = nn.Parameter(torch.empty(num_heads, out_dim))
        self.bias = nn.Parameter(torch.zeros(num_heads * out_dim if concat else out_dim))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.xavier_uniform_(self.lin)
        bound = math.sqrt(6.0 / (1 + self.out_dim))
        nn.init.uniform_(self.att_src, -bound, bound)
        nn.init.uniform_(self.att_dst, -bound, bound)
        nn.init.zeros_(self.bias)

    def attention(self, h: Tensor, s: Structure, edge_weight: Tensor | None = None):
        """Return ``(z, alpha_edge, alpha_self)``; rows of attention sum to one."""
        if h.dim() != 2 or h.shape[0] != s.num_nodes or h.shape[1] != self.lin.shape[0]:
            raise ShapeError(f"GAT input must be ({s.num_nodes}, {self.lin.shape[0]}), got {tuple(h.shape)}")
        n, heads = s.num_nodes, self.num_heads
        z = (h @ self.lin).view(n, heads, self.out_dim)
        a_src = (z * self.att_src).sum(-1)
        a_dst = (z * self.att_dst).sum(-1)
        e_self = F.leaky_relu(a_src + a_dst, self.negative_slope)
        e_edge = F.leaky_relu(a_src[s.src] + a_dst[s.dst], self.negative_slope)

        # per-destination max for a stable softmax; shift-invariant so no gradient needed
        with torch.no_grad():
            m = e_self.clone()
            if s.num_edges:
                m = m.scatter_reduce(0, s.dst.unsqueeze(1).expand_as(e_edge), e_edge, "amax", include_self=True)
        w = s.weight if edge_weight is None else edge_weight
        num_self = torch.exp(e_self - m)
        num_edge = w.unsqueeze(1) * torch.exp(e_edge - m[s.dst])
        denom = num_self.index_add(0, s.dst, num_edge) if s.num_edges else num_self
        return z, num_edge / denom[s.dst], num_self / denom

    def forward(self, h: Tensor, s: Structure, edge_weight: Tensor | None = None) -> Tensor:
        z, alpha_e, alpha_s = self.attention(h, s, edge_weight)
        out = alpha_s.unsqueeze(-1) * z
        if s.num_edges:
            out = out.index_add(0, s.dst, alpha_e.unsqueeze(-1) * z[s.src])
        out = out.reshape(s.num_nodes, -1) if self.concat else out.mean(1)
        return out + self.bias


def zero_aware_dropout(h: Tensor, p: float, training: bool = True) -> Tensor:
    """Inverted dropout that only draws masks for nonzero entries.

    Dropping a zero changes nothing, so on sparse inputs (bag-of-words
    features) this matches ``F.dropout`` in distribution at a fraction of the
    cost. Mostly-dense inputs fall through to ``F.dropout``.
    """
    if not training or p == 0.0:
        return h
    nz = h.detach().nonzero(as_tuple=True)
    if nz[0].numel() * 4 > h.numel():
        return F.dropout(h, p, True)
    keep = (torch.rand(nz[0].numel(), dtype=h.dtype, device=h.device) >= p).to(h.dtype) / (1.0 - p)
    scale = torch.zeros_like(h, requires_grad=False)
    scale[nz] = keep
    return h * scale


class Encoder(nn.Module):
    """Stack of GCN or GAT layers with GELU between layers and input dropout.

    Hidden GAT layers concatenate ``num_heads`` heads of width
    ``hidden_dim // num_heads``; the last GAT layer averages heads of width
    ``hidden_dim``. The output always has ``hidden_dim`` columns.
    """

    def __init__(
        self,
        in_dim: int,
        hidden_dim: int = 128,
        num_layers: int = 2,
        num_heads: int = 4,
        dropout: float = 0.2,
        kind: str = "gat",
    ):
        super().__init__()
        if kind not in ENCODER_KINDS:
            raise ParameterError(f"unknown encoder kind '{kind}', expected one of {ENCODER_KINDS}")
        if num_layers < 1:
            raise ParameterError("num_layers must be >= 1")
        if hidden_dim % num_heads:
            raise ShapeError(f"hidden_dim {hidden_dim} not divisible by num_heads {num_heads}")
        self.kind = kind
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.dropout = dropout
        self.layers = nn.ModuleList()
        dims = [in_dim] + [hidden_dim] * num_layers
        for l in range(num_layers):
            last = l == num_layers - 1
            if kind == "gcn":
                self.layers.append(GCNLayer(dims[l], hidden_dim, num_heads))
            else:
                width = hidden_dim if last else hidden_dim // num_heads
                self.layers.append(GATLayer(dims[l], width, num_heads, concat=not last))

    @property
    def layer_input_dims(self) -> list[int]:
        return [self.in_dim] + [self.hidden_dim] * (self.num_layers - 1)

    def layer_forward(self, l: int, h: Tensor, s: Structure, edge_weight: Tensor | None = None) -> Tensor:
        """Dropout, layer ``l``, then GELU unless ``l`` is the last layer."""
        h = zero_aware_dropout(h, self.dropout, self.training)
        h = self.layers[l](h, s, edge_weight)
        if l < self.num_layers - 1:
            h = F.gelu(h)
        return h

    def forward_from(self, h: Tensor, s: Structure, start: int) -> Tensor:
        for l in range(start, self.num_layers):
            h = self.layer_forward(l, h, s)
        return h

    def forward(self, x: Tensor, s: Structure, delta: Tensor | None = None, return_first: bool = False):
        """Encode ``x``; ``delta`` is added to the first layer's output.

        With ``return_first`` also returns that first-layer output (before
        ``delta``), which the adversarial view reuses.
        """
        h1 = self.layer_forward(0, x, s)
        if delta is not None and delta.shape != h1.shape:
            raise ShapeError(f"delta shape {tuple(delta.shape)} != first hidden output {tuple(h1.shape)}")
        h = h1 if delta is None else h1 + delta
        out = self.forward_from(h, s, 1)
        return (out, h1) if return_first else out


def encode(g_view: Graph | Structure, x: Tensor, params: Encoder, delta: Tensor | None = None) -> Tensor:
    s = as_structure(g_view, x.dtype)
    if x.shape[0] != s.num_nodes:
        raise ShapeError(f"x has {x.shape[0]} rows, graph has {s.num_nodes} nodes")
    return params(x, s, delta)


def classify(e: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine head ``e @ weight + bias`` with ``weight`` of shape (hidden, classes)."""
    if e.dim() != 2 or weight.dim() != 2 or e.shape[1] != weight.shape[0]:
        raise ShapeError(f"cannot apply head {tuple(weight.shape)} to embeddings {tuple(e.shape)}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} != ({weight.shape[1]},)")
    out = e @ weight
    return out if bias is None else out + bias


@dataclass
class EmbeddingBundle:
    """Node embeddings of the original, node-masked, edge-perturbed and adversarial views."""

    E: Tensor
    E_ND: Tensor
    E_ED: Tensor
    E_adv: Tensor | None = None

    def __post_init__(self):
        for name in ("E_ND", "E_ED", "E_adv"):
            t = getattr(self, name)
            if t is not None and t.shape != self.E.shape:
                raise ShapeError(f"{name} shape {tuple(t.shape)} != E shape {tuple(self.E.shape)}")
