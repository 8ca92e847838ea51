"""Training loss terms: focal interest-map alignment, soft (KL) and hard
(NLL) assignment alignment, smooth-L1 disparity, and their weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .correspondence import MatchGT
from .decoders import Assignment
from .errors import ConfigError, ContractError
from .stereonet import DisparityPrediction

LOG_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_intra: float = 100.0
    lambda_cross_soft: float = 0.5
    lambda_cross_hard: float = 0.5

    def __post_init__(self):
        for name in ("lambda_intra", "lambda_cross_soft", "lambda_cross_hard"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def _as_labels(teacher, like: torch.Tensor) -> torch.Tensor:
    labels = getattr(teacher, "labels", teacher)
    if not torch.is_tensor(labels):
        labels = torch.as_tensor(labels)
    return labels.to(dtype=like.dtype, device=like.device)


def _focal(logits: torch.Tensor, targets: torch.Tensor, alpha: float, gamma: float):
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    pt = torch.exp(-bce)
    alpha_t = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    return (alpha_t * (1.0 - pt) ** gamma * bce).mean()


def focal_intra_loss(logits_l, logits_r, teacher_l, teacher_r,
                     alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Binary focal loss against teacher interest labels, averaged per view
    and then 1/2 left + 1/2 right."""
    labels_l = _as_labels(teacher_l, logits_l)
    labels_r = _as_labels(teacher_r, logits_r)
    if logits_l.shape != labels_l.shape or logits_r.shape != labels_r.shape:
        raise ContractError(
            f"logit/label shapes disagree: {tuple(logits_l.shape)} vs "
            f"{tuple(labels_l.shape)}, {tuple(logits_r.shape)} vs {tuple(labels_r.shape)}")
    return 0.5 * _focal(logits_l, labels_l, alpha, gamma) \
        + 0.5 * _focal(logits_r, labels_r, alpha, gamma)


def _as_matrix(p) -> torch.Tensor:
    mat = p.matrix if isinstance(p, Assignment) else p
    if not torch.is_tensor(mat):
        mat = torch.as_tensor(mat)
    if mat.dim() != 2 or mat.shape[0] < 2 or mat.shape[1] < 2:
        raise ContractError(f"assignment must be (m+1)x(n+1), got {tuple(mat.shape)}")
    return mat


def _kl_lines(ref: torch.Tensor, pred: torch.Tensor, eps: float, reverse: bool):
    """Per-line KL after L1 normalization; lines with an all-zero reference
    are skipped (contribute 0) and counted."""
    ref_sum = ref.sum(dim=1, keepdim=True)
    pred_sum = pred.sum(dim=1, keepdim=True)
    ref_n = ref / (ref_sum + eps)
    pred_n = pred / (pred_sum + eps)
    if reverse:
        kl = pred_n * (torch.log(pred_n + eps) - torch.log(ref_n + eps))
    else:
        kl = ref_n * (torch.log(ref_n + eps) - torch.log(pred_n + eps))
    alive = (ref_sum[:, 0] > 0).to(kl.dtype)
    return (kl.sum(dim=1) * alive).sum(), int((ref_sum[:, 0] <= 0).sum())


def soft_cross_loss(p_pred, p_ref, eps: float = LOG_EPS, reverse: bool = False,
                    return_stats: bool = False):
    """KL alignment of the predicted assignment to a reference assignment.

    Rows 1..m are L1-normalized over their n+1 entries and columns 1..n over
    their m+1 entries; the dustbin row/column never gets its own term. The
    default direction is KL(reference || prediction); `reverse` flips it.
    """
    pred = _as_matrix(p_pred)
    ref = _as_matrix(p_ref).to(dtype=pred.dtype, device=pred.device)
    if pred.shape != ref.shape:
        raise ContractError(f"assignment shapes differ: {tuple(pred.shape)} vs {tuple(ref.shape)}")
    m, n = pred.shape[0] - 1, pred.shape[1] - 1
    row_sum, skipped_rows = _kl_lines(ref[:m], pred[:m], eps, reverse)
    col_sum, skipped_cols = _kl_lines(ref[:, :n].T, pred[:, :n].T, eps, reverse)
    loss = row_sum / m + col_sum / n
    if return_stats:
        return loss, {"skipped_rows": skipped_rows, "skipped_cols": skipped_cols}
    return loss


def hard_cross_loss(p_pred, gt: MatchGT, eps: float = LOG_EPS) -> torch.Tensor:
    """Negative log-likelihood balanced over matched pairs and the two
    unmatched sets; excluded points contribute nothing. Empty sets drop
    their term instead of producing NaN."""
    pred = _as_matrix(p_pred)
    m, n = pred.shape[0] - 1, pred.shape[1] - 1
    for i, j in gt.pairs:
        if not (0 <= i < m and 0 <= j < n):
            raise ContractError(f"pair ({i},{j}) outside assignment of size ({m},{n})")
    if any(not 0 <= i < m for i in gt.unmatched_l) \
            or any(not 0 <= j < n for j in gt.unmatched_r):
        raise ContractError("unmatched index outside assignment bounds")
    loss = pred.new_zeros(())
    if gt.pairs:
        ii = torch.tensor([i for i, _ in gt.pairs], device=pred.device)
        jj = torch.tensor([j for _, j in gt.pairs], device=pred.device)
        loss = loss - torch.log(pred[ii, jj] + eps).mean()
    if gt.unmatched_l:
        ii = torch.tensor(sorted(gt.unmatched_l), device=pred.device)
        loss = loss - torch.log(pred[ii, n] + eps).mean()
    if gt.unmatched_r:
        jj = torch.tensor(sorted(gt.unmatched_r), device=pred.device)
        loss = loss - torch.log(pred[m, jj] + eps).mean()
    return loss


def _masked_smooth_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor,
                      beta: float):
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ContractError(
            f"disparity shapes disagree: {tuple(pred.shape)}, {tuple(target.shape)}, "
            f"{tuple(mask.shape)}")
    if not mask.any():
        return pred.sum() * 0.0
    return F.smooth_l1_loss(pred[mask], target[mask], beta=beta, reduction="mean")


def disparity_loss(pred, gt_disparity, valid_mask, aux_weight: float = 0.3,
                   beta: float = 1.0) -> torch.Tensor:
    """Smooth-L1 over valid pixels; a DisparityPrediction additionally
    contributes its auxiliary (raw-volume) head scaled by aux_weight."""
    gt = gt_disparity if torch.is_tensor(gt_disparity) else torch.as_tensor(gt_disparity)
    mask = valid_mask if torch.is_tensor(valid_mask) else torch.as_tensor(valid_mask)
    mask = mask.to(torch.bool)
    if isinstance(pred, DisparityPrediction):
        gt = gt.to(pred.disp.dtype)
        main = _masked_smooth_l1(pred.disp, gt, mask, beta)
        aux = _masked_smooth_l1(pred.disp_aux, gt, mask, beta)
        return main + aux_weight * aux
    gt = gt.to(pred.dtype)
    return _masked_smooth_l1(pred, gt, mask, beta)


def total_loss(disp_term, intra_term, soft_term, hard_term, weights: LossWeights):
    return (disp_term
            + weights.lambda_intra * intra_term
            + weights.lambda_cross_soft * soft_term
            + weights.lambda_cross_hard * hard_term)
