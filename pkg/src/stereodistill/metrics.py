"""Disparity evaluation metrics with occlusion splits.

EPE is the mean absolute disparity error over valid pixels. The >3px rate
counts errors strictly larger than 3 px; D1 additionally requires relative
error strictly greater than 5%. Occ/noc EPEs restrict to valid pixels with
and without the occlusion flag. Aggregation pools pixels over the whole
dataset, so it is order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class Metrics:
    epe: float = 0.0
    err_gt_3px: float = 0.0
    d1: float = 0.0
    epe_noc: float = 0.0
    epe_occ: float = 0.0
    n_valid: int = 0
    n_noc: int = 0
    n_occ: int = 0
    per_sample: list = field(default_factory=list)


def sample_error_sums(pred, gt, valid, occ) -> dict:
    """Per-sample error sums and counts used for pixel-pooled aggregation."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    occ = np.asarray(occ, dtype=bool)
    if not (pred.shape == gt.shape == valid.shape == occ.shape):
        raise ContractError(
            f"metric input shapes disagree: {pred.shape}, {gt.shape}, "
            f"{valid.shape}, {occ.shape}")
    err = np.abs(pred - gt)
    noc = valid & ~occ
    occv = valid & occ
    rel_bad = (err > 3.0) & (err > 0.05 * gt)
    return {
        "err_sum": float(err[valid].sum()),
        "err_sum_noc": float(err[noc].sum()),
        "err_sum_occ": float(err[occv].sum()),
        "n_gt3": int((err[valid] > 3.0).sum()),
        "n_d1": int(rel_bad[valid].sum()),
        "n_valid": int(valid.sum()),
        "n_noc": int(noc.sum()),
        "n_occ": int(occv.sum()),
    }


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def aggregate_metrics(rows: list[dict], sample_ids=None) -> Metrics:
    metrics = Metrics()
    total = {k: 0 for k in ("err_sum", "err_sum_noc", "err_sum_occ", "n_gt3",
                            "n_d1", "n_valid", "n_noc", "n_occ")}
    ids = sample_ids if sample_ids is not None else range(len(rows))
    for sid, row in zip(ids, rows):
        for key in total:
            total[key] += row[key]
        metrics.per_sample.append({
            "sample": sid,
            "epe": _ratio(row["err_sum"], row["n_valid"]),
            "err_gt_3px": _ratio(row["n_gt3"], row["n_valid"]),
            "d1": _ratio(row["n_d1"], row["n_valid"]),
            "epe_noc": _ratio(row["err_sum_noc"], row["n_noc"]),
            "epe_occ": _ratio(row["err_sum_occ"], row["n_occ"]),
            "n_valid": row["n_valid"],
        })
    metrics.epe = _ratio(total["err_sum"], total["n_valid"])
    metrics.err_gt_3px = _ratio(total["n_gt3"], total["n_valid"])
    metrics.d1 = _ratio(total["n_d1"], total["n_valid"])
    metrics.epe_noc = _ratio(total["err_sum_noc"], total["n_noc"])
    metrics.epe_occ = _ratio(total["err_sum_occ"], total["n_occ"])
    metrics.n_valid = total["n_valid"]
    metrics.n_noc = total["n_noc"]
    metrics.n_occ = total["n_occ"]
    return metrics


def compute_metrics(pred, gt, valid, occ) -> Metrics:
    """Metrics for a single prediction (convenience wrapper)."""
    return aggregate_metrics([sample_error_sums(pred, gt, valid, occ)])
