"""Threshold-free open-set metrics, closed-set accuracy and report export.

Open scores follow one polarity everywhere: higher means more likely to be
an unknown-class sample. Unknown samples are the positives for AUROC and
FPR95 unless ``positive="known"`` is requested.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .datasets import UNKNOWN


def _nonempty(name, values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    return a


def auroc(scores_known, scores_unknown) -> float:
    """P(random unknown scores above random known), ties counted one half.

    Mann-Whitney rank statistic over the pooled scores.
    """
    k = _nonempty("scores_known", scores_known)
    u = _nonempty("scores_unknown", scores_unknown)
    ranks = rankdata(np.concatenate([k, u]))
    r_u = ranks[k.size :].sum()
    return float((r_u - u.size * (u.size + 1) / 2.0) / (u.size * k.size))


def roc_curve(scores_known, scores_unknown):
    """(fpr, tpr) at every distinct threshold, unknown = positive, ``>=`` rule."""
    k = _nonempty("scores_known", scores_known)
    u = _nonempty("scores_unknown", scores_unknown)
    thresholds = np.unique(np.concatenate([k, u]))[::-1]
    ks, us = np.sort(k), np.sort(u)
    fpr = (k.size - np.searchsorted(ks, thresholds, side="left")) / k.size
    tpr = (u.size - np.searchsorted(us, thresholds, side="left")) / u.size
    return np.concatenate([[0.0], fpr]), np.concatenate([[0.0], tpr])


def auroc_trapezoid(scores_known, scores_unknown) -> float:
    fpr, tpr = roc_curve(scores_known, scores_unknown)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def fpr_at_tpr(scores_known, scores_unknown, tpr_target: float = 0.95, positive: str = "unknown") -> float:
    """False-positive rate at the most stringent threshold reaching ``tpr_target``.

    With unknowns as positives the threshold is the ceil(target * n)-th
    largest unknown score and the result is the fraction of known scores
    at or above it. ``positive="known"`` flips the roles (known samples
    detected by low scores).
    """
    if not 0 < tpr_target <= 1:
        raise ValueError("tpr_target must lie in (0, 1]")
    k = _nonempty("scores_known", scores_known)
    u = _nonempty("scores_unknown", scores_unknown)
    if positive == "known":
        pos, neg = -k, -u
    elif positive == "unknown":
        pos, neg = u, k
    else:
        raise ValueError(f"positive must be 'unknown' or 'known', got {positive!r}")
    need = max(1, math.ceil(tpr_target * pos.size - 1e-9))
    tau = np.sort(pos)[::-1][need - 1]
    return float(np.mean(neg >= tau))


def closed_acc(predictions, labels, class_ids=None) -> float:
    """Mean over classes of per-class top-1 accuracy.

    Classes in ``class_ids`` without any sample are skipped with a warning.
    """
    pred = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if y.size == 0:
        raise ValueError("empty evaluation pool")
    if pred.shape != y.shape:
        raise ValueError(f"{pred.size} predictions for {y.size} labels")
    classes = np.unique(y) if class_ids is None else np.asarray(class_ids).reshape(-1)
    accs = []
    for c in classes:
        mask = y == c
        if not mask.any():
            warnings.warn(f"class {int(c)} has no test samples; excluded from accuracy", stacklevel=2)
            continue
        accs.append(np.mean(pred[mask] == c))
    if not accs:
        raise ValueError("no evaluated class has samples")
    return float(np.mean(accs))


def openness(n_unseen_classes: int, n_unknown_classes: int) -> float:
    if n_unseen_classes <= 0:
        raise ValueError("openness is undefined without unseen classes")
    if n_unknown_classes < 0:
        raise ValueError("n_unknown_classes must be >= 0")
    return 1.0 - math.sqrt(n_unseen_classes / (n_unseen_classes + n_unknown_classes))


@dataclass
class MetricsReport:
    method: str
    acc: float
    auroc: float
    fpr95: float
    openness: float
    n_unseen_samples: int
    n_unknown_samples: int
    histogram: dict
    seed: int | None = None
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def score_histogram(scores, groups, bins=20) -> dict:
    scores = np.asarray(scores, dtype=np.float64)
    groups = np.asarray(groups)
    edges = np.histogram_bin_edges(scores, bins=bins)
    counts = {}
    for g in sorted(set(groups.tolist())):
        counts[g] = np.histogram(scores[groups == g], bins=edges)[0].astype(int).tolist()
    return {"edges": edges.tolist(), "counts": counts}


def make_report(
    scored,
    truth,
    groups=None,
    *,
    method: str = "",
    bins: int = 20,
    n_unseen_classes: int | None = None,
    n_unknown_classes: int | None = None,
    seed: int | None = None,
    config_hash: str = "",
    outdir=None,
    fpr_positive: str = "unknown",
) -> MetricsReport:
    """Score a batch of predictions against ground truth.

    ``truth`` holds a class id per row, ``UNKNOWN`` (-1) for unknown rows.
    ``groups`` optionally names each row's group (seen/unseen/unknown); by
    default known rows are "unseen". With ``outdir`` the per-sample CSV,
    histogram JSON and report JSON are written there.
    """
    truth = np.asarray(truth).reshape(-1)
    scores = np.asarray(scored.scores, dtype=np.float64)
    pred = np.asarray(scored.predicted)
    if scores.size != truth.size:
        raise ValueError(f"{scores.size} scores for {truth.size} truth labels")
    if groups is None:
        groups = np.where(truth == UNKNOWN, "unknown", "unseen")
    groups = np.asarray(groups)
    is_unknown = truth == UNKNOWN
    missing = [g for g, present in (("known", (~is_unknown).any()), ("unknown", is_unknown.any())) if not present]
    if missing:
        raise ValueError(f"report needs both groups; missing: {missing}")

    known_mask = ~is_unknown
    unseen_mask = groups == "unseen"
    acc_mask = unseen_mask if unseen_mask.any() else known_mask
    acc = closed_acc(pred[acc_mask], truth[acc_mask])
    n_u = n_unseen_classes if n_unseen_classes is not None else len(np.unique(truth[known_mask]))
    report = MetricsReport(
        method=method,
        acc=acc,
        auroc=auroc(scores[known_mask], scores[is_unknown]),
        fpr95=fpr_at_tpr(scores[known_mask], scores[is_unknown], 0.95, positive=fpr_positive),
        openness=openness(n_u, n_unknown_classes) if n_unknown_classes is not None else float("nan"),
        n_unseen_samples=int(known_mask.sum()),
        n_unknown_samples=int(is_unknown.sum()),
        histogram=score_histogram(scores, groups, bins),
        seed=seed,
        config_hash=config_hash,
    )
    if outdir is not None:
        write_report(report, scores, groups, pred, outdir)
    return report


def write_report(report: MetricsReport, scores, groups, predicted, outdir) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    stem = report.method or "report"
    with open(out / f"{stem}_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "score", "group", "predicted_class"])
        for i, (s, g, p) in enumerate(zip(scores, groups, predicted)):
            w.writerow([i, repr(float(s)), g, int(p)])
    (out / f"{stem}_histogram.json").write_text(json.dumps(report.histogram, indent=2))
    (out / f"{stem}_report.json").write_text(json.dumps(report.to_dict(), indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


METRICS = ("acc", "auroc", "fpr95")


def aggregate(reports) -> dict:
    """Mean and population std of each metric across runs of one method."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    out = {"method": reports[0].method, "n_runs": len(reports), "seeds": [r.seed for r in reports]}
    for m in METRICS:
        vals = np.array([getattr(r, m) for r in reports], dtype=np.float64)
        out[m] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
