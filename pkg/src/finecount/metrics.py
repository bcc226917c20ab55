"""Counting and segmentation evaluation metrics.

Counting errors compare spatial sums, so predictions and ground truth
may live at different resolutions. Segmentation accuracy and recall are
computed on aligned grids over non-background ground-truth pixels only;
precision is deliberately not reported because false negatives carry
negligible density mass.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class EvalReport:
    mae_per_category: list[float]
    cmae: float
    omae: float
    seg_accuracy: float
    seg_recall_per_category: list[float]
    n_images: int

    def to_dict(self) -> dict:
        return {"mae_per_category": self.mae_per_category, "cmae": self.cmae,
                "omae": self.omae, "seg_accuracy": self.seg_accuracy,
                "seg_recall_per_category": self.seg_recall_per_category,
                "n_images": self.n_images}

    def table(self) -> str:
        lines = [f"images evaluated      {self.n_images}"]
        for j, v in enumerate(self.mae_per_category, start=1):
            lines.append(f"MAE category {j}        {v:.3f}")
        lines.append(f"CMAE                  {self.cmae:.3f}")
        lines.append(f"OMAE                  {self.omae:.3f}")
        lines.append(f"seg accuracy          {self.seg_accuracy:.4f}")
        for j, v in enumerate(self.seg_recall_per_category, start=1):
            lines.append(f"seg recall category {j} {v:.4f}")
        return "\n".join(lines)


def mae_per_category(pred_maps, gt_maps) -> np.ndarray:
    """Mean absolute count error per category.

    Both arguments are sequences (one entry per image) of (k, h, w)
    arrays; resolutions may differ between prediction and ground truth
    because only spatial sums are compared.
    """
    if len(pred_maps) != len(gt_maps):
        raise ValueError(f"{len(pred_maps)} predictions vs {len(gt_maps)} targets")
    if len(pred_maps) == 0:
        raise ValueError("cannot evaluate zero images")
    pred_sums = np.array([[m.sum() for m in maps] for maps in pred_maps])
    gt_sums = np.array([[m.sum() for m in maps] for maps in gt_maps])
    if pred_sums.shape[1] != gt_sums.shape[1]:
        raise ValueError("category counts differ between prediction and target")
    return np.abs(pred_sums - gt_sums).mean(axis=0)


def cmae(mae: np.ndarray) -> float:
    """Category-averaged mean absolute error."""
    mae = np.asarray(mae, dtype=np.float64)
    if mae.size == 0:
        raise ValueError("need at least one category")
    return float(mae.mean())


def omae(pred_overall, gt_maps) -> float:
    """Mean absolute error of the overall (category-summed) count."""
    if len(pred_overall) != len(gt_maps):
        raise ValueError(f"{len(pred_overall)} predictions vs {len(gt_maps)} targets")
    if len(pred_overall) == 0:
        raise ValueError("cannot evaluate zero images")
    errors = [abs(float(np.sum(p)) - float(np.sum(g)))
              for p, g in zip(pred_overall, gt_maps)]
    return float(np.mean(errors))


def segmentation_metrics(pred_seg, gt_seg, k: int):
    """(accuracy, recall per category) over non-background GT pixels.

    A pixel counts as correct when the argmax over predicted category
    channels 1..k matches the argmax over GT category channels; ties
    break toward the lowest index. Returns NaN accuracy (with a warning)
    when no image has any non-background pixel.
    """
    if len(pred_seg) != len(gt_seg):
        raise ValueError(f"{len(pred_seg)} predictions vs {len(gt_seg)} targets")
    correct = 0
    evaluated = 0
    per_cat_correct = np.zeros(k, dtype=np.int64)
    per_cat_total = np.zeros(k, dtype=np.int64)
    for p, g in zip(pred_seg, gt_seg):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"segmentation shapes differ: {p.shape} vs {g.shape}")
        fg = g[-1] == 0
        if not fg.any():
            continue
        pred_lab = p[:k].argmax(axis=0)[fg]
        gt_lab = g[:k].argmax(axis=0)[fg]
        hits = pred_lab == gt_lab
        correct += int(hits.sum())
        evaluated += int(fg.sum())
        for j in range(k):
            sel = gt_lab == j
            per_cat_total[j] += int(sel.sum())
            per_cat_correct[j] += int(hits[sel].sum())
    if evaluated == 0:
        warnings.warn("no non-background ground-truth pixels; "
                      "segmentation accuracy is undefined")
        return float("nan"), np.full(k, np.nan)
    recalls = np.where(per_cat_total > 0, per_cat_correct / np.maximum(per_cat_total, 1),
                       np.nan)
    return correct / evaluated, recalls


def build_report(pred_fine, pred_overall, pred_seg, gt_fine, gt_seg, k: int) -> EvalReport:
    """Assemble the full evaluation report; seg entries may be None."""
    mae = mae_per_category(pred_fine, gt_fine)
    overall = omae(pred_overall, gt_fine)
    if pred_seg is None:
        acc, recalls = float("nan"), np.full(k, np.nan)
    else:
        acc, recalls = segmentation_metrics(pred_seg, gt_seg, k)
    return EvalReport(mae_per_category=[float(v) for v in mae],
                      cmae=cmae(mae), omae=overall, seg_accuracy=float(acc),
                      seg_recall_per_category=[float(v) for v in recalls],
                      n_images=len(pred_fine))
