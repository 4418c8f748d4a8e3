"""Joint training of encoder, view generators and classifier, plus experiment drivers."""
from __future__ import annotations

import copy
import dataclasses
import itertools
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .encoder import EmbeddingBundle, Encoder, Structure, classify
from .errors import DivergenceError, ParameterError
from .graph_data import Graph, inject_edge_noise, normalize_features, symmetrize
from .objectives import (
    LossBreakdown,
    adversarial_cl_loss,
    cross_entropy,
    infonce_mi,
    l2_penalty,
    recon_loss,
    total_loss,
)
from .views import (
    ViewGenerator,
    ViewLogits,
    WalkSummary,
    adversarial_delta,
    blend_with_walks,
    compute_view_logits,
    random_walk_summary,
    relaxed_keep,
    uniform_noise,
)

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class AdvConfig:
    epsilon: float = 0.01
    steps: int = 3
    step_size: float = 0.005


@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 0.005
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0
    lam: float = 1e-4
    tau_gumbel: float = 0.5
    tau_cl: float = 0.5
    mask_init_rate: float = 0.5
    adv: AdvConfig = field(default_factory=AdvConfig)
    encoder_kind: str = "gat"
    hidden_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    dropout: float = 0.2
    schedule: str = "cosine"
    warmup_epochs: int = 100
    seed: int = 0
    mi_direction: str = "compress"
    recon_weight: float = 1.0
    walk_len: int = 4
    num_walks: int = 5
    use_nd: bool = True
    use_ed: bool = True
    use_ib: bool = True
    symmetric: bool = True
    normalize_features: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.adv, dict):
            self.adv = AdvConfig(**self.adv)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        for name in ("learning_rate", "tau_gumbel", "tau_cl"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not 0.0 < self.mask_init_rate < 1.0:
            raise ParameterError("mask_init_rate must be in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must be in [0, 1)")
        if self.adv.epsilon <= 0 or self.adv.steps < 1 or self.adv.step_size < 0:
            raise ParameterError("adv needs epsilon > 0, steps >= 1, step_size >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ParameterError(f"unknown schedule '{self.schedule}'")
        if self.dtype not in _DTYPES:
            raise ParameterError(f"dtype must be one of {sorted(_DTYPES)}")
        if min(self.beta, self.gamma, self.lam, self.recon_weight) < 0:
            raise ParameterError("loss weights must be nonnegative")
        if self.warmup_epochs < 0:
            raise ParameterError("warmup_epochs must be >= 0")

    @property
    def effective_beta(self) -> float:
        return self.beta if self.use_ib else 0.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ParameterError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        if "lam" in changes:
            changes["lambda"] = changes.pop("lam")
        d.update(changes)
        return TrainConfig.from_dict(d)


@dataclass
class RunMetrics:
    per_epoch: list[dict]
    final: dict
    seed: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"config": self.config, "seed": self.seed, "per_epoch": self.per_epoch, "final": self.final}

    def loss_trace(self, key: str = "total") -> list[float]:
        return [row[key] for row in self.per_epoch]


# ----------------------------------------------------------------------- model


class CGRLModel(nn.Module):
    """Encoder, per-layer view generators and a classification head shared by all views."""

    def __init__(self, in_dim: int, num_classes: int, config: TrainConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(
            in_dim,
            hidden_dim=config.hidden_dim,
            num_layers=config.num_layers,
            num_heads=config.num_heads,
            dropout=config.dropout,
            kind=config.encoder_kind,
        )
        self.views = ViewGenerator(self.encoder.layer_input_dims, config.mask_init_rate)
        self.head = nn.Linear(config.hidden_dim, num_classes)

    def logits(self, e: Tensor) -> Tensor:
        return classify(e, self.head.weight.T, self.head.bias)

    def active_parameters(self) -> list[Tensor]:
        """Parameters that take part in the objective under the current view flags."""
        params = list(self.encoder.parameters()) + list(self.head.parameters())
        if self.config.use_nd:
            params += list(self.views.node_maps.parameters())
        if self.config.use_ed:
            params += list(self.views.edge_maps.parameters())
        return params

    def node_masked(self, x, s, walks, noise, tau, logit_shift=None):
        """Node-masking view: at each layer blend nodes with walk summaries by learned keep."""
        enc, h, logs = self.encoder, x, []
        for l in range(enc.num_layers):
            vl = compute_view_logits(h, s, self.views.node_maps[l], None)
            if logit_shift is not None:
                vl.node_logits = vl.node_logits + logit_shift[l]
            vl.node_keep = relaxed_keep(vl.node_logits, tau, noise[l])
            vl.gumbel_temperature = tau
            h = enc.layer_forward(l, blend_with_walks(h, vl.node_keep, walks), s)
            logs.append(vl)
        return h, logs

    def edge_perturbed(self, x, s, noise, tau, logit_shift=None):
        """Edge-perturbation view: at each layer scale edge weights by learned keep."""
        enc, h, logs = self.encoder, x, []
        for l in range(enc.num_layers):
            vl = compute_view_logits(h, s, None, self.views.edge_maps[l])
            if logit_shift is not None:
                vl.edge_logits = vl.edge_logits + logit_shift[l]
            vl.edge_keep = relaxed_keep(vl.edge_logits, tau, noise[l])
            vl.gumbel_temperature = tau
            h = enc.layer_forward(l, h, s, s.weight * vl.edge_keep)
            logs.append(vl)
        return h, logs


@dataclass
class GraphTensors:
    """Model-ready tensors of a (preprocessed) graph."""

    graph: Graph
    x: Tensor
    s: Structure
    labels: Tensor
    idx: dict[str, Tensor]


def prepare_graph(g: Graph, config: TrainConfig) -> GraphTensors:
    if config.symmetric:
        g = symmetrize(g)
    # sum normalization only makes sense for nonnegative (count-like) features
    if config.normalize_features and not np.any(g.features < 0):
        g = normalize_features(g)
    dtype = _DTYPES[config.dtype]
    return GraphTensors(
        graph=g,
        x=torch.tensor(g.features, dtype=dtype),
        s=Structure.from_graph(g, dtype),
        labels=torch.tensor(g.labels, dtype=torch.long),
        idx={k: torch.tensor(v, dtype=torch.long) for k, v in g.splits.items()},
    )


def build_model(config: TrainConfig, in_dim: int, num_classes: int) -> CGRLModel:
    """Seed the global torch RNG with ``config.seed`` and build a fresh model."""
    torch.manual_seed(config.seed)
    return CGRLModel(in_dim, num_classes, config).to(_DTYPES[config.dtype])


# ----------------------------------------------------------------------- one step


@dataclass
class StepNoise:
    """All randomness of one training step except dropout."""

    node: list[Tensor] | None
    edge: list[Tensor] | None
    walks: WalkSummary | None
    adv_generator: torch.Generator | None = None


def sample_step_noise(
    model: CGRLModel,
    data: GraphTensors,
    gen: torch.Generator,
    np_rng: np.random.Generator,
) -> StepNoise:
    cfg, n, e = model.config, data.s.num_nodes, data.s.num_edges
    dtype = data.x.dtype
    layers = model.encoder.num_layers
    node = [uniform_noise((n, 2), gen, dtype) for _ in range(layers)] if cfg.use_nd else None
    walks = random_walk_summary(data.s, cfg.walk_len, cfg.num_walks, np_rng) if cfg.use_nd else None
    edge = [uniform_noise((e, 2), gen, dtype) for _ in range(layers)] if cfg.use_ed else None
    return StepNoise(node=node, edge=edge, walks=walks, adv_generator=gen)


def _adv_active(cfg: TrainConfig) -> bool:
    return cfg.gamma > 0 and (cfg.use_nd or cfg.use_ed)


def compute_losses(
    model: CGRLModel,
    data: GraphTensors,
    noise: StepNoise,
    delta: Tensor | None = None,
    logit_shift: dict | None = None,
) -> tuple[LossBreakdown, EmbeddingBundle]:
    """Forward every view and assemble the loss breakdown (with ``total``).

    If the adversarial term is active and ``delta`` is None, a perturbation is
    found by projected gradient ascent first. ``logit_shift`` (``{"node": [...],
    "edge": [...]}``, one tensor per layer) offsets the view logits; it exists
    so gradients with respect to the logits can be probed.
    """
    cfg = model.config
    x, s, y, train_idx = data.x, data.s, data.labels, data.idx["train"]
    shift = logit_shift or {}
    zero = x.new_zeros(())

    e, h1 = model.encoder(x, s, return_first=True)
    e_nd = e_ed = e
    if cfg.use_nd:
        e_nd, _ = model.node_masked(x, s, noise.walks, noise.node, cfg.tau_gumbel, shift.get("node"))
    if cfg.use_ed:
        e_ed, _ = model.edge_perturbed(x, s, noise.edge, cfg.tau_gumbel, shift.get("edge"))

    parts = LossBreakdown()
    parts.cls = cross_entropy(model.logits(e), y, train_idx)
    parts.cls_nd = cross_entropy(model.logits(e_nd), y, train_idx) if cfg.use_nd else zero
    parts.cls_ed = cross_entropy(model.logits(e_ed), y, train_idx) if cfg.use_ed else zero
    beta = cfg.effective_beta
    parts.mi_nd = infonce_mi(e, e_nd, cfg.tau_cl) if (cfg.use_nd and beta) else zero
    parts.mi_ed = infonce_mi(e, e_ed, cfg.tau_cl) if (cfg.use_ed and beta) else zero
    parts.recon = recon_loss(e, e_nd, e_ed) if (cfg.use_nd or cfg.use_ed) else zero

    e_adv = None
    parts.adv = zero
    if _adv_active(cfg):
        anchors = [v for v, on in ((e_nd, cfg.use_nd), (e_ed, cfg.use_ed)) if on]

        def adv_loss(views, e_adv_):
            if len(views) == 2:
                return adversarial_cl_loss(views[0], views[1], e_adv_, cfg.tau_cl)
            return -infonce_mi(views[0], e_adv_, cfg.tau_cl)

        if delta is None:
            fixed = [v.detach() for v in anchors]
            h1_fixed = h1.detach()
            enc = model.encoder

            def objective(d):
                was = enc.training
                enc.eval()
                try:
                    return adv_loss(fixed, enc.forward_from(h1_fixed + d, s, 1))
                finally:
                    enc.train(was)

            gen = noise.adv_generator or torch.Generator().manual_seed(cfg.seed)
            pert = adversarial_delta(
                objective, tuple(h1.shape), cfg.adv.epsilon, cfg.adv.steps, cfg.adv.step_size, gen, dtype=x.dtype,
                record_final=False,
            )
            delta = pert.delta
        e_adv = model.encoder.forward_from(h1 + delta, s, 1)
        parts.adv = adv_loss(anchors, e_adv)

    parts.l2 = l2_penalty(model.active_parameters())
    total_loss(
        parts,
        alpha=cfg.alpha,
        beta=beta,
        gamma=cfg.gamma if _adv_active(cfg) else 0.0,
        lam=cfg.lam,
        mi_direction=cfg.mi_direction,
        recon_weight=cfg.recon_weight,
    )
    parts.weights["tau_cl"] = cfg.tau_cl
    return parts, EmbeddingBundle(E=e, E_ND=e_nd, E_ED=e_ed, E_adv=e_adv)


# ----------------------------------------------------------------------- training


def lr_factor(epoch: int, epochs: int, warmup: int, schedule: str = "cosine") -> float:
    """Linear warmup over ``warmup`` epochs, then cosine decay to zero at ``epochs``."""
    if schedule == "constant":
        return 1.0
    if epoch < warmup:
        return (epoch + 1) / warmup
    span = max(epochs - warmup, 1)
    return 0.5 * (1.0 + math.cos(math.pi * (epoch - warmup) / span))


def _long(v) -> Tensor:
    return v.long() if isinstance(v, Tensor) else torch.tensor(np.asarray(v), dtype=torch.long)


def accuracy(logits: Tensor, labels, idx) -> float:
    """Fraction of ``idx`` nodes whose argmax logit equals the label."""
    idx = _long(idx)
    if idx.numel() == 0:
        raise ParameterError("accuracy needs a nonempty split")
    pred = logits[idx].argmax(dim=1)
    return float((pred == _long(labels)[idx]).double().mean())


@torch.no_grad()
def clean_logits(model: CGRLModel, data: GraphTensors) -> Tensor:
    was = model.training
    model.eval()
    try:
        return model.logits(model.encoder(data.x, data.s))
    finally:
        model.train(was)


def _split_idx(g: Graph, split) -> np.ndarray:
    if isinstance(split, str):
        if split not in g.splits:
            raise ParameterError(f"unknown split '{split}'")
        return g.splits[split]
    return np.asarray(split, dtype=np.int64)


def evaluate(model: CGRLModel, g: Graph | GraphTensors, split="test") -> float:
    """Accuracy on ``split`` (a split name or node ids) using the clean original view."""
    data = g if isinstance(g, GraphTensors) else prepare_graph(g, model.config)
    idx = _split_idx(data.graph, split)
    if len(idx) == 0:
        raise ParameterError("cannot evaluate on an empty split")
    return accuracy(clean_logits(model, data), data.labels, idx)


def train(config: TrainConfig, g: Graph) -> tuple[CGRLModel, RunMetrics]:
    """Train a model end to end; the returned model is the best-validation snapshot."""
    config.validate()
    if g.splits["train"].size == 0:
        raise ParameterError("training split is empty")
    if g.splits["val"].size == 0:
        raise ParameterError("validation split is empty")

    data = prepare_graph(g, config)
    model = build_model(config, g.feat_dim, g.num_classes)
    gen = torch.Generator().manual_seed(config.seed)
    np_rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda ep: lr_factor(ep, config.epochs, config.warmup_epochs, config.schedule)
    )

    best_val = evaluate(model, data, "val")
    best_epoch = 0
    best_state = copy.deepcopy(model.state_dict())
    per_epoch = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        noise = sample_step_noise(model, data, gen, np_rng)
        parts, _ = compute_losses(model, data, noise)
        bad = parts.nonfinite()
        if bad:
            raise DivergenceError(bad, epoch)
        opt.zero_grad()
        parts.total.backward()
        opt.step()
        sched.step()

        val_acc = evaluate(model, data, "val")
        row = {"epoch": epoch, **{k: float(getattr(parts, k).detach()) for k in LossBreakdown.COMPONENTS}, "val_acc": val_acc}
        per_epoch.append(row)
        if val_acc > best_val:
            best_val, best_epoch = val_acc, epoch
            best_state = copy.deepcopy(model.state_dict())
        if epoch % 50 == 0:
            log.debug("epoch %d total %.4f val %.4f", epoch, row["total"], val_acc)

    model.load_state_dict(best_state)
    model.eval()
    test_acc = evaluate(model, data, "test")
    final = {
        "test_acc": test_acc,
        "test_accuracy": test_acc,
        "best_val_acc": best_val,
        "best_val_epoch": best_epoch,
    }
    return model, RunMetrics(per_epoch=per_epoch, final=final, seed=config.seed, config=config.to_dict())


# ----------------------------------------------------------------------- persistence


def save_model(model: CGRLModel, path: str | Path) -> Path:
    path = Path(path)
    torch.save(
        {
            "config": model.config.to_dict(),
            "in_dim": model.encoder.in_dim,
            "num_classes": model.head.out_features,
            "state": model.state_dict(),
        },
        path,
    )
    return path


def load_model(path: str | Path) -> CGRLModel:
    blob = torch.load(Path(path), weights_only=False)
    cfg = TrainConfig.from_dict(blob["config"])
    model = CGRLModel(blob["in_dim"], blob["num_classes"], cfg).to(_DTYPES[cfg.dtype])
    model.load_state_dict(blob["state"])
    model.eval()
    return model


@torch.no_grad()
def embeddings(model: CGRLModel, g: Graph) -> Tensor:
    data = prepare_graph(g, model.config)
    was = model.training
    model.eval()
    try:
        return model.encoder(data.x, data.s)
    finally:
        model.train(was)


def export_embeddings(model: CGRLModel, g: Graph, out: str | Path) -> Path:
    """Write ``node_id<TAB>label<TAB>h_1..h_d`` rows of clean-view embeddings."""
    out = Path(out)
    e = embeddings(model, g).to(torch.float32).numpy()
    lines = []
    for i, (label, row) in enumerate(zip(g.labels.tolist(), e)):
        lines.append("\t".join([str(i), str(label)] + [f"{v:.9g}" for v in row.tolist()]))
    try:
        out.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IOError(f"cannot write embeddings to {out}: {exc}") from exc
    return out


# ----------------------------------------------------------------------- experiment drivers


def _run_trial(args) -> float:
    cfg_dict, g = args
    torch.set_num_threads(1)
    _, metrics = train(TrainConfig.from_dict(cfg_dict), g)
    return metrics.final["test_acc"]


def run_trials(tasks: Sequence[tuple[TrainConfig, Graph]], jobs: int = 1) -> list[float]:
    """Test accuracy of each ``(config, graph)`` task; ``jobs > 1`` uses worker processes."""
    payload = [(c.to_dict(), g) for c, g in tasks]
    if jobs <= 1 or len(payload) <= 1:
        return [_run_trial(p) for p in payload]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_trial, payload))


def _summary(accs: list[float]) -> dict:
    return {
        "mean": statistics.fmean(accs),
        "std": statistics.pstdev(accs) if len(accs) > 1 else 0.0,
        "accs": accs,
    }


ALL_FLAGS = list(itertools.product((False, True), repeat=3))


def ablate(
    config: TrainConfig,
    g: Graph,
    flags: Iterable[tuple[bool, bool, bool]] | None = None,
    seeds: Sequence[int] = (0, 1, 2),
    jobs: int = 1,
) -> list[dict]:
    """Accuracy per ``(use_nd, use_ed, use_ib)`` cell; the full 2^3 grid by default."""
    cells = ALL_FLAGS if flags is None else [tuple(bool(v) for v in f) for f in flags]
    if len(seeds) < 1:
        raise ParameterError("need at least one seed")
    tasks = []
    for nd, ed, ib in cells:
        for seed in seeds:
            tasks.append((config.replace(use_nd=nd, use_ed=ed, use_ib=ib, seed=seed), g))
    accs = run_trials(tasks, jobs)
    rows, k = [], len(seeds)
    for c, (nd, ed, ib) in enumerate(cells):
        rows.append({"use_nd": nd, "use_ed": ed, "use_ib": ib, "seeds": list(seeds), **_summary(accs[c * k : (c + 1) * k])})
    return rows


def noise_sweep(
    config: TrainConfig,
    g: Graph,
    rates: Sequence[float],
    seeds: Sequence[int] = (0, 1, 2),
    control_beta: float = 0.0,
    jobs: int = 1,
) -> dict:
    """Accuracy versus edge-noise rate for the configured beta and a ``control_beta`` series.

    Each (rate, seed) pair trains on the same noisy graph in both series.
    """
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ParameterError(f"noise rate {r} outside [0, 1]")
    series = {"beta": config.beta, "control": control_beta}
    tasks = []
    for r in rates:
        for seed in seeds:
            noisy = inject_edge_noise(g, r, seed)
            for b in series.values():
                tasks.append((config.replace(beta=b, seed=seed), noisy))
    accs = run_trials(tasks, jobs)
    out = {name: [] for name in series}
    i = 0
    per_rate: dict[float, dict[str, list[float]]] = {}
    for r in rates:
        bucket = per_rate.setdefault(r, {name: [] for name in series})
        for _ in seeds:
            for name in series:
                bucket[name].append(accs[i])
                i += 1
    for r in rates:
        for name in series:
            out[name].append({"rate": r, **_summary(per_rate[r][name])})
    return {"betas": series, "seeds": list(seeds), "curves": out}


def hyperparam_sweep(
    config: TrainConfig,
    g: Graph,
    alphas: Sequence[float],
    betas: Sequence[float],
    seeds: Sequence[int] = (0, 1, 2),
    jobs: int = 1,
) -> dict:
    """Accuracy surface over the full ``alphas x betas`` grid."""
    if not alphas or not betas:
        raise ParameterError("alpha and beta grids must be nonempty")
    tasks = [
        (config.replace(alpha=a, beta=b, seed=s), g) for a in alphas for b in betas for s in seeds
    ]
    accs = iter(run_trials(tasks, jobs))
    cells = []
    for a in alphas:
        for b in betas:
            cells.append({"alpha": a, "beta": b, **_summary([next(accs) for _ in seeds])})
    return {"alphas": list(alphas), "betas": list(betas), "seeds": list(seeds), "cells": cells}


def write_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")
    return path
