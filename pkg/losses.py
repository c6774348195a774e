"""
HSCL Losses
Sample-to-sample, sample-to-prototype and normal-to-abnormal contrastive
objectives, soft weighting of unlabeled views and the weighted total.

All functions are pure given an explicit generator and differentiable
through torch autograd.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, NamedTuple, Union

import torch

from core import (
    NORM_EPS, SampleStatus, WeightVector, HSCLConfig, PrototypeBank, HSCLError,
    NumericalError, DegenerateEmbeddingError, AnchorWithoutPositivesError,
    LossDivergenceError, max_similarity,
)


Prototypes = Union[PrototypeBank, torch.Tensor]


@dataclass
class LossBreakdown:
    """Per-step loss parts and their weighted total"""
    l_ss: float
    l_sp: float
    l_na: float
    total: float
    n_sampled_positives: int = 0
    skipped_na: bool = False
    objective: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def to_row(self) -> dict:
        return {
            'l_ss': self.l_ss,
            'l_sp': self.l_sp,
            'l_na': self.l_na,
            'total': self.total,
            'n_sampled_positives': self.n_sampled_positives,
            'skipped_na': self.skipped_na,
        }


class NormalToAbnormalResult(NamedTuple):
    loss: torch.Tensor
    n_pairs: int
    skipped: bool


def _matrix(V: Prototypes) -> torch.Tensor:
    return V.V if isinstance(V, PrototypeBank) else V


def _unit_rows(Z: torch.Tensor) -> torch.Tensor:
    norms = Z.norm(dim=1, keepdim=True)
    if Z.shape[0] and bool((norms < NORM_EPS).any()):
        raise DegenerateEmbeddingError("degenerate embedding")
    return Z / norms


# ==================== SAMPLE-TO-SAMPLE ====================

def info_nce(anchor_idx: int, Z: torch.Tensor, P_row: torch.Tensor, N_row: torch.Tensor,
             tau: float, n_norm: int = 1) -> torch.Tensor:
    """
    InfoNCE term of a single anchor.

    -(1/n_norm) * log( sum_P exp(sim/tau) / sum_{P u N} exp(sim/tau) ),
    evaluated with logsumexp so the max is subtracted before exponentiating.
    """
    if not bool(P_row.any()):
        raise AnchorWithoutPositivesError("anchor without positives")
    if tau <= 0 or n_norm < 1:
        raise NumericalError("tau must be > 0 and n_norm >= 1")
    z = _unit_rows(Z)
    logits = (z @ z[anchor_idx]) / tau
    pos = torch.logsumexp(logits[P_row], dim=0)
    den = torch.logsumexp(logits[P_row | N_row], dim=0)
    return (den - pos) / n_norm


def info_nce_rows(Z: torch.Tensor, P: torch.Tensor, N: torch.Tensor, tau: float) -> torch.Tensor:
    """Vectorised InfoNCE: one loss per anchor row"""
    if not bool(P.any(dim=1).all()):
        raise AnchorWithoutPositivesError("anchor without positives")
    z = _unit_rows(Z)
    logits = (z @ z.t()) / tau
    neg_inf = float('-inf')
    pos = torch.logsumexp(logits.masked_fill(~P, neg_inf), dim=1)
    den = torch.logsumexp(logits.masked_fill(~(P | N), neg_inf), dim=1)
    return den - pos


def sample_to_sample_loss(Z: torch.Tensor, P: torch.Tensor, N: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean InfoNCE over every view of the augmented batch"""
    return info_nce_rows(Z, P, N, tau).mean()


# ==================== SAMPLE-TO-PROTOTYPE ====================

def soft_weights(Z_nu: torch.Tensor, status: torch.Tensor, V: Prototypes,
                 w_delta: float = 0.4) -> WeightVector:
    """
    Soft normality weights for normal-labeled and unlabeled views.

    Labeled normals are pinned to 1; unlabeled views get
    (max_k z^T V_k + 1) / 2. The result carries no gradient.
    """
    status = torch.as_tensor(status)
    if bool((status == SampleStatus.ABNORMAL_LABELED).any()):
        raise HSCLError("soft weights are defined only over normal and unlabeled views")
    with torch.no_grad():
        m = max_similarity(Z_nu.detach(), _matrix(V).detach())
        w = ((m + 1.0) / 2.0).clamp(0.0, 1.0)
        w = torch.where(status.to(w.device) == SampleStatus.NORMAL_LABELED, torch.ones_like(w), w)
    return WeightVector(w=w, w_delta=w_delta)


def sample_to_prototype_loss(Z_nu: torch.Tensor, Z_a: torch.Tensor, w: WeightVector, V: Prototypes,
                             positive_term: bool = True, negative_term: bool = True) -> torch.Tensor:
    """
    Weighted sample-to-prototype loss.

    sum_i w_i (1 - max_k z_i^T V_k)^2 / ||w||_1 pulls normal and likely-normal
    views onto their closest prototype; mean_j [max_k z_j^T V_k]_+^2 pushes
    labeled anomalies to non-positive similarity. The second term is omitted
    for an empty Z_a.

    Args:
        Z_nu: [N_nu, D] embeddings of normal-labeled and unlabeled views
        Z_a: [N_a, D] embeddings of abnormal views (may be empty)
        w: soft weights aligned with Z_nu (gradient-stopped)
        V: prototype bank or raw [D, K] matrix
        positive_term / negative_term: ablation switches for the two terms
    """
    Vm = _matrix(V)
    loss = Vm.new_zeros(())
    if positive_term:
        weights = w.w.detach().to(Z_nu.dtype)
        l1 = weights.abs().sum()
        if weights.numel() == 0 or float(l1) <= 0:
            raise NumericalError("all-zero weights")
        residual = 1.0 - max_similarity(Z_nu, Vm)
        loss = loss + (weights * residual.pow(2)).sum() / l1
    if negative_term and Z_a.shape[0] > 0:
        m_a = max_similarity(Z_a, Vm)
        loss = loss + m_a.clamp_min(0.0).pow(2).mean()
    return loss


# ==================== NORMAL-TO-ABNORMAL ====================

def sampling_distribution(w: WeightVector) -> Optional[torch.Tensor]:
    """
    Contamination-resistant sampling distribution over normal ∪ unlabeled views.

    Entries at or below w_delta get zero mass, the rest are proportional to
    their weight. Returns None when nothing survives the threshold.
    """
    keep = w.w > w.w_delta
    if not bool(keep.any()):
        return None
    masked = torch.where(keep, w.w, torch.zeros_like(w.w))
    return masked / masked.sum()


def normal_to_abnormal_loss(Z_nu: torch.Tensor, Z_a: torch.Tensor, p: Optional[torch.Tensor],
                            tau: float, n_pairs: int,
                            generator: Optional[torch.Generator] = None) -> NormalToAbnormalResult:
    """
    InfoNCE between sampled likely-normal pairs, with every abnormal view as negative.

    Each pair (anchor, positive) is drawn from p without replacement; the
    indices are not differentiable, the selected embeddings are.
    Skips (loss 0) when there are no abnormal views or p supports fewer
    than two views.
    """
    zero = Z_nu.new_zeros(())
    if p is None or Z_a.shape[0] == 0 or int((p > 0).sum()) < 2:
        return NormalToAbnormalResult(zero, 0, True)
    zn = _unit_rows(Z_nu)
    za = _unit_rows(Z_a)
    probs = p.detach().to(torch.float64).cpu()
    terms = []
    for _ in range(max(1, n_pairs)):
        anchor, positive = torch.multinomial(probs, 2, replacement=False, generator=generator).tolist()
        anchor_z = zn[anchor]
        pos_logit = (anchor_z @ zn[positive]) / tau
        neg_logits = (za @ anchor_z) / tau
        den = torch.logsumexp(torch.cat([pos_logit.view(1), neg_logits]), dim=0)
        terms.append(den - pos_logit)
    return NormalToAbnormalResult(torch.stack(terms).mean(), len(terms), False)


# ==================== TOTAL ====================

def total_loss(l_ss, l_sp, l_na, config: HSCLConfig, n_sampled_positives: int = 0,
               skipped_na: bool = False) -> LossBreakdown:
    """
    Weighted total l_ss + lambda1 * l_sp + lambda2 * l_na.

    Parts may be floats or scalar tensors; with tensors the differentiable
    total is kept on ``LossBreakdown.objective``.

    Raises:
        LossDivergenceError: if any part is NaN or infinite
    """
    parts = {'l_ss': l_ss, 'l_sp': l_sp, 'l_na': l_na}
    values = {name: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for name, v in parts.items()}
    for name, value in values.items():
        if not math.isfinite(value):
            raise LossDivergenceError(f"loss divergence in {name}",
                                      diagnostics={'part': name, **values})
    objective = l_ss + config.lambda1 * l_sp + config.lambda2 * l_na
    total = float(objective.detach()) if isinstance(objective, torch.Tensor) else float(objective)
    if not math.isfinite(total):
        raise LossDivergenceError("loss divergence in total", diagnostics={'part': 'total', **values})
    return LossBreakdown(
        l_ss=values['l_ss'],
        l_sp=values['l_sp'],
        l_na=0.0 if skipped_na else values['l_na'],
        total=total,
        n_sampled_positives=n_sampled_positives,
        skipped_na=skipped_na,
        objective=objective if isinstance(objective, torch.Tensor) else None,
    )
