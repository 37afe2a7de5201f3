import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from medpy.metric import binary
from sklearn.metrics import roc_auc_score

import config

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("DICE", "AUC", "Jac", "Prec", "Rec", "ASSD")
GRANULARITY = "Dice/Jac/Prec/Rec/ASSD: per-slice mean at threshold h; AUC: pooled pixels"


def _binary_pair(pred, gt) -> tuple:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape.")
    return pred, gt


def dice(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both are empty."""
    pred, gt = _binary_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def jaccard(pred, gt) -> Optional[float]:
    pred, gt = _binary_pair(pred, gt)
    union = int((pred | gt).sum())
    return int((pred & gt).sum()) / union if union else None


def precision(pred, gt) -> Optional[float]:
    pred, gt = _binary_pair(pred, gt)
    n_pred = int(pred.sum())
    return int((pred & gt).sum()) / n_pred if n_pred else None


def recall(pred, gt) -> Optional[float]:
    pred, gt = _binary_pair(pred, gt)
    n_gt = int(gt.sum())
    return int((pred & gt).sum()) / n_gt if n_gt else None


def assd(pred, gt) -> Optional[float]:
    """Average symmetric surface distance in pixels; undefined when either set is empty."""
    pred, gt = _binary_pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    return float(binary.assd(pred, gt, connectivity=1))


def auc(scores: Sequence, gts: Sequence) -> Optional[float]:
    """Pixel-pooled ROC-AUC; ties count half."""
    if isinstance(scores, np.ndarray) or not isinstance(scores, (list, tuple)):
        scores, gts = [scores], [gts]
    values = np.concatenate([np.ravel(np.asarray(s, dtype=np.float64)) for s in scores])
    labels = np.concatenate([np.ravel(np.asarray(g, dtype=bool)) for g in gts])
    if values.shape != labels.shape:
        raise ValueError(f"{values.size} scores for {labels.size} ground-truth pixels.")
    if labels.all() or not labels.any():
        return None
    return float(roc_auc_score(labels, values))


def mean_dice(scores: Sequence[np.ndarray], gts: Sequence[np.ndarray], h: float) -> float:
    return float(np.mean([dice(s > h, g) for s, g in zip(scores, gts)]))


def threshold_grid(
    scores: Sequence[np.ndarray],
    points: int = config.THRESHOLD_SWEEP_POINTS,
    percentiles: tuple = config.THRESHOLD_PERCENTILES,
) -> np.ndarray:
    pooled = np.concatenate([np.ravel(np.asarray(s, dtype=np.float64)) for s in scores])
    lo, hi = np.percentile(pooled, percentiles)
    return np.linspace(lo, hi, points)


def select_threshold(
    scores: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    points: int = config.THRESHOLD_SWEEP_POINTS,
    percentiles: tuple = config.THRESHOLD_PERCENTILES,
) -> float:
    """Sweep point maximizing mean per-slice Dice of (score > h); ties go to the smallest h."""
    if not scores or len(scores) != len(gts):
        raise ValueError(f"Need matching non-empty score and ground-truth lists, got {len(scores)} and {len(gts)}.")
    scores = [np.asarray(s, dtype=np.float64) for s in scores]
    gts = [np.asarray(g, dtype=bool) for g in gts]
    best_h, best = None, -1.0
    for h in threshold_grid(scores, points, percentiles):
        d = mean_dice(scores, gts, h)
        if d > best:
            best_h, best = float(h), d
    logger.info("Selected threshold %.6g (validation Dice %.4f)", best_h, best)
    return best_h


@dataclass
class MetricsReport:
    method: str
    dice: Optional[float]
    auc: Optional[float]
    jaccard: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    assd: Optional[float]
    threshold: float
    threshold_source: str
    n_slices: int
    exclusions: dict = field(default_factory=dict)
    granularity: str = GRANULARITY
    config: dict = field(default_factory=dict)

    def row(self) -> dict:
        return dict(zip(REPORT_COLUMNS, (self.dice, self.auc, self.jaccard, self.precision, self.recall, self.assd)))

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_defined(values: list) -> tuple:
    defined = [v for v in values if v is not None]
    return (float(np.mean(defined)) if defined else None), len(values) - len(defined)


def evaluate(
    scores: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    threshold: float,
    method: str,
    threshold_source: str = "fixed",
    config_echo: Optional[dict] = None,
) -> MetricsReport:
    """All metrics for one method at threshold h."""
    if len(scores) != len(gts):
        raise ValueError(f"{len(scores)} score maps for {len(gts)} ground-truth masks.")
    scores = [np.asarray(s, dtype=np.float64) for s in scores]
    gts = [np.asarray(g, dtype=bool) for g in gts]
    preds = [s > threshold for s in scores]
    per_slice = {
        "dice": [dice(p, g) for p, g in zip(preds, gts)],
        "jaccard": [jaccard(p, g) for p, g in zip(preds, gts)],
        "precision": [precision(p, g) for p, g in zip(preds, gts)],
        "recall": [recall(p, g) for p, g in zip(preds, gts)],
        "assd": [assd(p, g) for p, g in zip(preds, gts)],
    }
    means, exclusions = {}, {}
    for name, values in per_slice.items():
        means[name], exclusions[name] = _mean_defined(values)
    pooled_auc = auc(scores, gts) if scores else None
    exclusions["auc"] = 0 if pooled_auc is not None else 1
    if any(exclusions.values()):
        logger.info("Undefined metric values excluded from averages: %s", exclusions)
    return MetricsReport(
        method=method,
        auc=pooled_auc,
        threshold=float(threshold),
        threshold_source=threshold_source,
        n_slices=len(scores),
        exclusions=exclusions,
        config=config_echo or {},
        **means,
    )


def write_report(report: MetricsReport, csv_path: Union[str, Path], json_path: Union[str, Path]) -> None:
    """Add (or replace) the method's row in the CSV table and write the JSON summary."""
    csv_path, json_path = Path(csv_path), Path(json_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    row = pd.DataFrame([report.row()], index=pd.Index([report.method], name="Method"), columns=list(REPORT_COLUMNS))
    if csv_path.exists():
        table = pd.read_csv(csv_path, index_col="Method")
        table = pd.concat([table.drop(index=report.method, errors="ignore"), row])
    else:
        table = row
    table.to_csv(csv_path, float_format="%.4f")
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Report row %r written to %s", report.method, csv_path)
