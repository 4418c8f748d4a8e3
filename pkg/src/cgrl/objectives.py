"""Loss components and the combined training objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ParameterError, ShapeError

MI_DIRECTIONS = ("compress", "align")


def _index(mask, n: int) -> Tensor | None:
    if mask is None:
        return None
    idx = torch.as_tensor(mask)
    if idx.dtype == torch.bool:
        if idx.shape != (n,):
            raise ShapeError(f"boolean mask must have shape ({n},)")
        idx = torch.nonzero(idx, as_tuple=False).view(-1)
    return idx.long().view(-1)


def cross_entropy(logits: Tensor, labels: Tensor, mask) -> Tensor:
    """Mean negative log-likelihood of the true class over the masked nodes."""
    idx = _index(mask, logits.shape[0])
    if idx is None or idx.numel() == 0:
        raise ParameterError("cross_entropy needs a nonempty node mask")
    labels = torch.as_tensor(labels, dtype=torch.long)
    return F.cross_entropy(logits[idx], labels[idx])


def infonce_mi(e: Tensor, e_tilde: Tensor, tau_cl: float = 0.5, mask=None) -> Tensor:
    """InfoNCE estimate between two views of the same nodes.

    For each anchor ``i`` (all nodes, or those in ``mask``) this is the log
    softmax probability that row ``i`` of ``e_tilde`` is picked out of all
    rows of ``e_tilde`` by cosine similarity to row ``i`` of ``e``, at
    temperature ``tau_cl``; the mean over anchors is returned. Always <= 0.
    """
    if e.shape != e_tilde.shape or e.dim() != 2:
        raise ShapeError(f"view shapes differ: {tuple(e.shape)} vs {tuple(e_tilde.shape)}")
    if not tau_cl > 0:
        raise ParameterError(f"tau_cl must be positive, got {tau_cl}")
    n = e.shape[0]
    idx = _index(mask, n)
    if idx is None:
        idx = torch.arange(n)
    if idx.numel() == 0:
        raise ParameterError("infonce_mi needs at least one anchor node")
    a = F.normalize(e[idx], dim=1, eps=1e-12) / tau_cl
    b = F.normalize(e_tilde, dim=1, eps=1e-12)
    logp = torch.log_softmax(a @ b.T, dim=1)
    return logp[torch.arange(idx.numel()), idx].mean()


def recon_loss(e: Tensor, e_nd: Tensor, e_ed: Tensor) -> Tensor:
    """``(||E - E_ND||_F^2 + ||E - E_ED||_F^2) / (2N)``."""
    if e.shape != e_nd.shape or e.shape != e_ed.shape:
        raise ShapeError(f"shapes differ: {tuple(e.shape)}, {tuple(e_nd.shape)}, {tuple(e_ed.shape)}")
    n = e.shape[0]
    return ((e - e_nd).pow(2).sum() + (e - e_ed).pow(2).sum()) / (2 * n)


def adversarial_cl_loss(e_nd: Tensor, e_ed: Tensor, e_adv: Tensor, tau_cl: float = 0.5, mask=None) -> Tensor:
    """``-infonce_mi(E_ND, E_adv) - infonce_mi(E_ED, E_adv)``; nonnegative."""
    if not (e_nd.shape == e_ed.shape == e_adv.shape):
        raise ShapeError(f"shapes differ: {tuple(e_nd.shape)}, {tuple(e_ed.shape)}, {tuple(e_adv.shape)}")
    return -infonce_mi(e_nd, e_adv, tau_cl, mask) - infonce_mi(e_ed, e_adv, tau_cl, mask)


def l2_penalty(params: Iterable[Tensor]) -> Tensor:
    terms = [p.pow(2).sum() for p in params]
    return torch.stack(terms).sum() if terms else torch.zeros(())


@dataclass
class LossBreakdown:
    """Every component of the objective. Values may be tensors or floats."""

    cls: object = 0.0
    cls_nd: object = 0.0
    cls_ed: object = 0.0
    mi_nd: object = 0.0
    mi_ed: object = 0.0
    adv: object = 0.0
    recon: object = 0.0
    l2: object = 0.0
    total: object = 0.0
    weights: dict = field(default_factory=dict)

    COMPONENTS = ("cls", "cls_nd", "cls_ed", "mi_nd", "mi_ed", "adv", "recon", "l2", "total")

    def as_floats(self) -> dict:
        out = {k: float(getattr(self, k)) for k in self.COMPONENTS}
        out["weights"] = dict(self.weights)
        return out

    def nonfinite(self) -> str | None:
        """Name of the first non-finite component, if any."""
        for k in self.COMPONENTS:
            v = getattr(self, k)
            v = float(v.detach()) if isinstance(v, Tensor) else float(v)
            if v != v or v in (float("inf"), float("-inf")):
                return k
        return None


def total_loss(
    parts: LossBreakdown,
    alpha: float = 0.5,
    beta: float = 0.5,
    gamma: float = 1.0,
    lam: float = 1e-4,
    mi_direction: str = "compress",
    recon_weight: float = 1.0,
):
    """Weighted sum of the components; also stored in ``parts.total``.

    ``cls + alpha*cls_nd + (1-alpha)*cls_ed + s*beta*(mi_nd + mi_ed)
    + gamma*adv + recon_weight*recon + lam*l2`` with ``s = +1`` for
    ``compress`` and ``-1`` for ``align``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    if mi_direction not in MI_DIRECTIONS:
        raise ParameterError(f"mi_direction must be one of {MI_DIRECTIONS}")
    sign = 1.0 if mi_direction == "compress" else -1.0
    total = (
        parts.cls
        + alpha * parts.cls_nd
        + (1.0 - alpha) * parts.cls_ed
        + sign * beta * (parts.mi_nd + parts.mi_ed)
        + gamma * parts.adv
        + recon_weight * parts.recon
        + lam * parts.l2
    )
    parts.total = total
    parts.weights = {
        "alpha": alpha,
        "beta": beta,
        "gamma": gamma,
        "lambda": lam,
        "mi_direction": mi_direction,
        "recon_weight": recon_weight,
    }
    return total

