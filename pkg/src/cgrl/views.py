"""Learnable augmented views.

* :func:`gumbel_softmax` relaxes categorical sampling; :func:`relaxed_keep`
  specializes it to keep/drop with ``pi_keep = sigmoid(logit)``.
* :func:`compute_view_logits` maps embeddings to per-node and per-edge logits.
* :func:`node_mask_view` blends each node with a random-walk summary of its
  neighborhood, ``keep * x + (1 - keep) * walk_mean``.
* :func:`edge_perturb_view` scales edge weights by their keep values.
* :func:`adversarial_delta` runs L-inf projected gradient ascent on a
  hidden-layer perturbation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .encoder import Structure, as_structure
from .errors import ParameterError, ShapeError
from .graph_data import Graph


@dataclass
class ViewLogits:
    node_logits: Tensor | None = None
    edge_logits: Tensor | None = None
    node_keep: Tensor | None = None
    edge_keep: Tensor | None = None
    gumbel_temperature: float = 0.5


@dataclass
class AdvPerturbation:
    delta: Tensor
    epsilon: float
    steps: int
    step_size: float
    init: Tensor | None = None
    objective_trace: list[float] = field(default_factory=list)


# ------------------------------------------------------------------ gumbel


def gumbel_softmax(logits: Tensor, tau: float, noise: Tensor) -> Tensor:
    """Concrete relaxation over the last dimension.

    ``logits`` are log class probabilities ``log(pi)`` (any constant shift is
    harmless) and ``noise`` holds uniform(0, 1) draws of the same shape,
    turned into Gumbel noise by ``-log(-log(u))``.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if noise.shape != logits.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != logits shape {tuple(logits.shape)}")
    if torch.any(noise <= 0) or torch.any(noise >= 1):
        raise ParameterError("uniform noise entries must lie strictly inside (0, 1)")
    g = -torch.log(-torch.log(noise))
    return torch.softmax((logits + g) / tau, dim=-1)


def uniform_noise(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> Tensor:
    """Uniform draws bounded away from 0 and 1 so Gumbel noise stays finite."""
    tiny = torch.finfo(dtype).tiny
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return u.clamp(min=tiny, max=1.0 - torch.finfo(dtype).eps)


def relaxed_keep(logits: Tensor, tau: float, noise: Tensor) -> Tensor:
    """Relaxed Bernoulli keep indicator, the ``keep`` coordinate of a 2-way concrete draw.

    ``noise`` has shape ``logits.shape + (2,)``.
    """
    two_way = torch.stack([F.logsigmoid(logits), F.logsigmoid(-logits)], dim=-1)
    return gumbel_softmax(two_way, tau, noise)[..., 0]


# ------------------------------------------------------------------ logits


class ViewGenerator(nn.Module):
    """Per-layer linear maps producing node and edge keep logits.

    Biases start at ``log((1 - mask_rate) / mask_rate)`` and weights near zero,
    so the initial keep probability is close to ``1 - mask_rate``.
    """

    def __init__(self, layer_dims: list[int], mask_rate: float = 0.5):
        super().__init__()
        if not 0.0 < mask_rate < 1.0:
            raise ParameterError(f"mask rate must be in (0, 1), got {mask_rate}")
        self.node_maps = nn.ModuleList(nn.Linear(d, 1) for d in layer_dims)
        self.edge_maps = nn.ModuleList(nn.Linear(2 * d, 1) for d in layer_dims)
        init_bias = float(np.log((1.0 - mask_rate) / mask_rate))
        for lin in list(self.node_maps) + list(self.edge_maps):
            nn.init.normal_(lin.weight, std=0.01)
            nn.init.constant_(lin.bias, init_bias)


def compute_view_logits(
    e_prev: Tensor,
    g: Graph | Structure,
    node_map: nn.Linear | None,
    edge_map: nn.Linear | None,
) -> ViewLogits:
    """``node_logit_i = node_map(e_i)``, ``edge_logit_ij = edge_map([e_i; e_j])``.

    Edge ``(i, j)`` is ``(src, dst)``. The concatenation is never materialized:
    the edge map's weight is split into its source and destination halves.
    """
    s = as_structure(g, e_prev.dtype)
    if e_prev.dim() != 2 or e_prev.shape[0] != s.num_nodes:
        raise ShapeError(f"embeddings must be ({s.num_nodes}, d), got {tuple(e_prev.shape)}")
    out = ViewLogits()
    d = e_prev.shape[1]
    if node_map is not None:
        if node_map.in_features != d:
            raise ShapeError(f"node map expects {node_map.in_features} inputs, embeddings have {d}")
        out.node_logits = node_map(e_prev).squeeze(-1)
    if edge_map is not None:
        if edge_map.in_features != 2 * d:
            raise ShapeError(f"edge map expects {edge_map.in_features} inputs, need {2 * d}")
        w = edge_map.weight.squeeze(0)
        a = e_prev @ w[:d]
        b = e_prev @ w[d:]
        out.edge_logits = a[s.src] + b[s.dst] + edge_map.bias
    return out


# ------------------------------------------------------------------ node masking


@dataclass(frozen=True)
class WalkSummary:
    """Sparse row-stochastic matrix ``P``: ``(P @ x)_i`` is node ``i``'s walk mean."""

    rows: Tensor
    cols: Tensor
    vals: Tensor
    num_nodes: int

    def apply(self, x: Tensor) -> Tensor:
        p = torch.sparse_coo_tensor(
            torch.stack([self.rows, self.cols]), self.vals.to(x.dtype), (self.num_nodes, self.num_nodes),
            check_invariants=False,
        )
        return torch.sparse.mm(p, x)

    def dense(self) -> Tensor:
        p = torch.zeros(self.num_nodes, self.num_nodes, dtype=torch.float64)
        p.index_put_((self.rows, self.cols), self.vals.double(), accumulate=True)
        return p


def random_walk_summary(
    g: Graph | Structure,
    walk_len: int,
    num_walks: int,
    rng: np.random.Generator | int,
) -> WalkSummary:
    """Visit frequencies of ``num_walks`` uniform random walks of ``walk_len`` steps per node.

    Walks follow out-edges. Visits to the start node are excluded; a node
    whose walks visit nothing else (no out-neighbors) maps to itself. A walk
    that reaches a node without out-edges stops there.
    """
    if walk_len < 1:
        raise ParameterError("walk_len must be >= 1")
    if num_walks < 1:
        raise ParameterError("num_walks must be >= 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if isinstance(g, Graph):
        n, src, dst = g.num_nodes, g.edge_index[0], g.edge_index[1]
    else:
        n, src, dst = g.num_nodes, g.src.numpy(), g.dst.numpy()

    order = np.argsort(src, kind="stable")
    indices = dst[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    deg = np.diff(indptr)

    starts = np.repeat(np.arange(n), num_walks)
    cur = starts.copy()
    alive = deg[cur] > 0
    visit_rows, visit_cols = [], []
    for _ in range(walk_len):
        d = deg[cur]
        alive &= d > 0
        offs = np.floor(rng.random(cur.size) * np.maximum(d, 1)).astype(np.int64)
        nxt = indices[np.minimum(indptr[cur] + offs, max(indices.size - 1, 0))] if indices.size else cur
        cur = np.where(alive, nxt, cur)
        take = alive & (cur != starts)
        visit_rows.append(starts[take])
        visit_cols.append(cur[take])

    rows = np.concatenate(visit_rows) if visit_rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(visit_cols) if visit_cols else np.zeros(0, dtype=np.int64)
    if rows.size:
        key = rows * n + cols
        uniq, counts = np.unique(key, return_counts=True)
        rows, cols = uniq // n, uniq % n
    else:
        counts = np.zeros(0, dtype=np.int64)
    totals = np.bincount(rows, weights=counts, minlength=n)
    lonely = np.flatnonzero(totals == 0)
    rows = np.concatenate([rows, lonely])
    cols = np.concatenate([cols, lonely])
    vals = np.concatenate([counts / np.maximum(totals[rows[: counts.size]], 1), np.ones(lonely.size)])
    return WalkSummary(
        rows=torch.as_tensor(rows, dtype=torch.long),
        cols=torch.as_tensor(cols, dtype=torch.long),
        vals=torch.as_tensor(vals, dtype=torch.float64),
        num_nodes=n,
    )


def blend_with_walks(x: Tensor, keep: Tensor, walks: WalkSummary) -> Tensor:
    if keep.shape != (x.shape[0],):
        raise ShapeError(f"keep must have shape ({x.shape[0]},), got {tuple(keep.shape)}")
    k = keep.unsqueeze(1)
    return k * x + (1.0 - k) * walks.apply(x)


def node_mask_view(
    g: Graph,
    keep: Tensor,
    walk_len: int = 4,
    num_walks: int = 5,
    seed: int = 0,
    x: Tensor | None = None,
) -> Tensor:
    """Masked feature matrix of the node-masking view (node and edge sets unchanged)."""
    if walk_len == 0:
        raise ParameterError("walk_len must be >= 1")
    if torch.any(keep < 0) or torch.any(keep > 1):
        raise ParameterError("keep values must lie in [0, 1]")
    if x is None:
        x = torch.tensor(g.features, dtype=keep.dtype if keep.is_floating_point() else torch.float32)
    walks = random_walk_summary(g, walk_len, num_walks, seed)
    return blend_with_walks(x, keep, walks)


# ------------------------------------------------------------------ edge perturbation


def edge_perturb_view(g: Graph | Structure, keep: Tensor, hard: bool = False) -> Structure:
    """Edge view with weights ``w_ij * keep_ij``; ``hard`` removes edges with keep < 0.5."""
    s = as_structure(g, keep.dtype if keep.is_floating_point() else torch.float32)
    if keep.shape != (s.num_edges,):
        raise ShapeError(f"keep must have shape ({s.num_edges},), got {tuple(keep.shape)}")
    if torch.any(keep < 0) or torch.any(keep > 1):
        raise ParameterError("keep values must lie in [0, 1]")
    if hard:
        return s.drop_edges(keep >= 0.5)
    return s.with_weight(s.weight.to(keep.dtype) * keep)


# ------------------------------------------------------------------ adversarial


def _ball_radius(epsilon: float, dtype: torch.dtype) -> float:
    """Largest value representable in ``dtype`` that does not exceed ``epsilon``.

    Clamping at ``epsilon`` itself would round it to the nearest float of
    ``dtype``, which may lie just outside the ball.
    """
    r = torch.tensor(epsilon, dtype=dtype)
    if float(r) > epsilon:
        r = torch.nextafter(r, torch.zeros((), dtype=dtype))
    return float(r)


def adversarial_delta(
    objective: Callable[[Tensor], Tensor],
    shape: tuple[int, ...],
    epsilon: float = 0.01,
    steps: int = 3,
    step_size: float | None = None,
    seed: int | torch.Generator = 0,
    init_std: float | None = None,
    dtype: torch.dtype = torch.float32,
    record_final: bool = True,
) -> AdvPerturbation:
    """Projected sign-gradient ascent of ``objective(delta)`` over ``||delta||_inf <= epsilon``.

    ``objective`` maps a perturbation of the first hidden layer to the
    adversarial contrastive loss with every other input held fixed. Gradients
    are taken with respect to ``delta`` only, so no parameter ``.grad`` is
    touched. ``delta`` starts as Gaussian noise (std ``init_std``, default
    ``epsilon / 2``) clipped to the ball. ``objective_trace`` holds the value
    before each step, plus the value at the returned ``delta`` when
    ``record_final`` is set.
    """
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    step_size = epsilon / 2 if step_size is None else step_size
    if step_size < 0:
        raise ParameterError("step_size must be >= 0")
    init_std = epsilon / 2 if init_std is None else init_std
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))

    bound = _ball_radius(epsilon, dtype)
    delta = (torch.randn(shape, generator=gen, dtype=dtype) * init_std).clamp(-bound, bound)
    init = delta.clone()
    trace = []
    for _ in range(steps):
        d = delta.clone().requires_grad_(True)
        value = objective(d)
        (grad,) = torch.autograd.grad(value, d)
        trace.append(float(value.detach()))
        delta = (delta + step_size * grad.sign()).clamp(-bound, bound)
        assert float(delta.abs().max()) <= epsilon, "projection left the epsilon ball"
    if record_final:
        with torch.no_grad():
            trace.append(float(objective(delta)))
    return AdvPerturbation(delta=delta, epsilon=epsilon, steps=steps, step_size=step_size, init=init, objective_trace=trace)
