"""
Loss Module for CLIPin Desk
Inter-modal and intra-modal cosine alignment losses, symmetric InfoNCE, and
their weighted combination under fixed or learnable weights.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, NamedTuple, Optional, Tuple, Union

import torch
import torch.nn.functional as F

from config.config import WEIGHTING_SCHEMES, AblationFlags
from core.errors import BatchTooSmall, MissingComponent, NonPositiveTau, ShapeMismatch
from core.numerics import Tensor, l2_normalize

logger = logging.getLogger(__name__)

# makes each two-direction cosine sum non-negative under learnable weighting
COSINE_OFFSET = 2.0


def _negative_cosine(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape or pred.dim() != 2:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} must match as [B, d]")
    return -(l2_normalize(pred) * l2_normalize(target.detach())).sum(dim=1).mean()


def inter_modal_loss(u: Tensor, v: Tensor, u_tgt: Tensor, v_tgt: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Cross-modal regression of each online prediction onto the other modality's target.

    Args:
        u (Tensor): Image-side inter prediction [B, d]
        v (Tensor): Text-side inter prediction [B, d]
        u_tgt (Tensor): Image target features [B, d] (no gradient)
        v_tgt (Tensor): Text target features [B, d] (no gradient)

    Returns:
        tuple: (L_inter_I2T, L_inter_T2I), each the batch mean of -cos(pred, target)

    Raises:
        ZeroNormRow: If any row has zero norm
    """
    return _negative_cosine(u, v_tgt), _negative_cosine(v, u_tgt)


def intra_modal_loss(u_intra: Tensor, v_intra: Tensor, u_tgt: Tensor, v_tgt: Tensor) -> Tuple[Tensor, Tensor]:
    """Same-modality regression: (-cos(u_intra, u_tgt), -cos(v_intra, v_tgt)), batch means."""
    return _negative_cosine(u_intra, u_tgt), _negative_cosine(v_intra, v_tgt)


def info_nce_loss(u_cl: Tensor, v_cl: Tensor, tau: Union[float, Tensor]) -> Tuple[Tensor, Tensor]:
    """
    Symmetric InfoNCE over the B x B cosine-similarity matrix, diagonal positives.

    Args:
        u_cl (Tensor): Image contrastive embeddings [B, d]
        v_cl (Tensor): Text contrastive embeddings [B, d]
        tau (float or Tensor): Temperature

    Returns:
        tuple: (L_CL_I2T, L_CL_T2I), each a mean cross-entropy over the batch

    Raises:
        BatchTooSmall: If B < 2
        NonPositiveTau: If tau <= 0
    """
    if u_cl.shape != v_cl.shape or u_cl.dim() != 2:
        raise ShapeMismatch(f"contrastive features {tuple(u_cl.shape)} and {tuple(v_cl.shape)} must match as [B, d]")
    batch = u_cl.shape[0]
    if batch < 2:
        raise BatchTooSmall(f"InfoNCE needs at least 2 pairs, got {batch}")
    if float(tau) <= 0:
        raise NonPositiveTau(f"temperature must be > 0, got {float(tau)}")
    logits = l2_normalize(u_cl) @ l2_normalize(v_cl).T / tau
    labels = torch.arange(batch)
    return F.cross_entropy(logits, labels), F.cross_entropy(logits.T, labels)


class LossTerms(NamedTuple):
    """Per-direction loss tensors of one step; disabled terms are None."""

    l_cl_i2t: Tensor
    l_cl_t2i: Tensor
    l_inter_i2t: Optional[Tensor] = None
    l_inter_t2i: Optional[Tensor] = None
    l_intra_i: Optional[Tensor] = None
    l_intra_t: Optional[Tensor] = None


@dataclass
class LossBreakdown:
    l_cl_i2t: float
    l_cl_t2i: float
    l_inter_i2t: Optional[float]
    l_inter_t2i: Optional[float]
    l_intra_i: Optional[float]
    l_intra_t: Optional[float]
    lambda_inter: float
    lambda_intra: float
    total: float

    def to_row(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def loss_weights(weighting: str, s_inter: Tensor, s_intra: Tensor) -> Tuple[Tensor, Tensor]:
    """(lambda_inter, lambda_intra): constant 1.0 when fixed, exp(-s) when learnable."""
    if weighting == "fixed":
        one = torch.ones((), dtype=s_inter.dtype)
        return one, one
    if weighting == "learnable":
        return torch.exp(-s_inter), torch.exp(-s_intra)
    raise ValueError(f"weighting must be one of {WEIGHTING_SCHEMES}, got {weighting!r}")


def total_loss(parts: LossTerms, weighting: str, s_inter: Tensor, s_intra: Tensor,
               flags: Optional[AblationFlags] = None) -> Tensor:
    """
    Combine the objectives.

    fixed:     L = L_CL + L_inter + L_intra
    learnable: L = L_CL + exp(-s_inter)(L_inter + 2) + exp(-s_intra)(L_intra + 2) + s_inter + s_intra

    Terms switched off by ``flags`` contribute nothing, regularizer included.

    Raises:
        MissingComponent: If an enabled term was not supplied
    """
    flags = flags or AblationFlags()
    if parts.l_cl_i2t is None or parts.l_cl_t2i is None:
        raise MissingComponent("contrastive loss terms are required")
    lam_inter, lam_intra = loss_weights(weighting, s_inter, s_intra)
    total = parts.l_cl_i2t + parts.l_cl_t2i
    for enabled, name, pair, lam, s in (
        (flags.use_inter, "inter", (parts.l_inter_i2t, parts.l_inter_t2i), lam_inter, s_inter),
        (flags.use_intra, "intra", (parts.l_intra_i, parts.l_intra_t), lam_intra, s_intra),
    ):
        if not enabled:
            continue
        if pair[0] is None or pair[1] is None:
            raise MissingComponent(f"{name}-modal loss is enabled but was not supplied")
        term = pair[0] + pair[1]
        if weighting == "learnable":
            total = total + lam * (term + COSINE_OFFSET) + s
        else:
            total = total + lam * term
    return total


def breakdown(parts: LossTerms, total: Tensor, weighting: str, s_inter: Tensor, s_intra: Tensor) -> LossBreakdown:
    """Detach a step's loss tensors into a LossBreakdown."""
    lam_inter, lam_intra = loss_weights(weighting, s_inter.detach(), s_intra.detach())

    def _f(t: Optional[Tensor]) -> Optional[float]:
        return None if t is None else float(t.detach())

    return LossBreakdown(
        l_cl_i2t=_f(parts.l_cl_i2t),
        l_cl_t2i=_f(parts.l_cl_t2i),
        l_inter_i2t=_f(parts.l_inter_i2t),
        l_inter_t2i=_f(parts.l_inter_t2i),
        l_intra_i=_f(parts.l_intra_i),
        l_intra_t=_f(parts.l_intra_t),
        lambda_inter=float(lam_inter),
        lambda_intra=float(lam_intra),
        total=float(total.detach()),
    )


def recompose_total(b: LossBreakdown, weighting: str, s_inter: float = 0.0, s_intra: float = 0.0) -> float:
    """Recompute the combined scalar from a LossBreakdown's parts."""
    total = b.l_cl_i2t + b.l_cl_t2i
    for pair, lam, s in (((b.l_inter_i2t, b.l_inter_t2i), b.lambda_inter, s_inter),
                         ((b.l_intra_i, b.l_intra_t), b.lambda_intra, s_intra)):
        if pair[0] is None:
            continue
        term = pair[0] + pair[1]
        total += lam * (term + COSINE_OFFSET) + s if weighting == "learnable" else lam * term
    return total
