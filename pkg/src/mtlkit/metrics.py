"""Challenge metrics: per-dimension CCC, UAR, MAE, and the composite H-Mean.

The composite is 3 / (1/CCC + 1/UAR + MAE), the harmonic mean of
(CCC, UAR, 1/MAE). It rewards high agreement and recall and low error.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, StructuralError


def ccc(pred, gold) -> float:
    """Concordance correlation: 2*cov / (var_x + var_y + (mean_x - mean_y)^2).

    Population (1/N) moments. Returns 0 when the denominator is 0 (either
    sequence constant and means equal): constant predictions are a reachable
    model state and should score, not crash.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gold, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise StructuralError(f"ccc: expects 1-d sequences, got ranks {x.ndim},{y.ndim}")
    if x.shape[0] != y.shape[0]:
        raise StructuralError(f"ccc: length mismatch {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise StructuralError("ccc: needs at least 2 points")
    mx, my = x.mean(), y.mean()
    cov = ((x - mx) * (y - my)).mean()
    denom = x.var() + y.var() + (mx - my) ** 2
    if denom == 0.0:
        return 0.0
    return float(2.0 * cov / denom)


def mean_ccc(pred, gold) -> float:
    """Arithmetic mean of per-dimension CCCs over the trailing axis."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gold, dtype=np.float64)
    if x.shape != y.shape:
        raise StructuralError(f"mean_ccc: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise StructuralError(f"mean_ccc: expects N x D arrays, got rank {x.ndim}")
    return float(np.mean([ccc(x[:, d], y[:, d]) for d in range(x.shape[1])]))


def uar(pred_labels, gold_labels, n_classes: int) -> float:
    """Unweighted average recall: mean over classes of per-class recall."""
    p = np.asarray(pred_labels)
    g = np.asarray(gold_labels)
    if p.shape != g.shape or p.ndim != 1:
        raise StructuralError(f"uar: label shape mismatch {p.shape} vs {g.shape}")
    if n_classes < 2:
        raise StructuralError(f"uar: n_classes must be >= 2, got {n_classes}")
    for name, arr in (("pred", p), ("gold", g)):
        if arr.size == 0 or arr.min() < 0 or arr.max() >= n_classes:
            raise StructuralError(f"uar: {name} labels outside [0, {n_classes})")
    recalls = []
    for c in range(n_classes):
        mask = g == c
        if not mask.any():
            raise DomainError(f"uar: class {c} absent from gold, recall undefined")
        recalls.append(float((p[mask] == c).mean()))
    return float(np.mean(recalls))


def mae(pred, gold) -> float:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gold, dtype=np.float64)
    if x.shape != y.shape:
        raise StructuralError(f"mae: length mismatch {x.shape} vs {y.shape}")
    return float(np.abs(x - y).mean())


def hmean(emo_ccc: float, cou_uar: float, age_mae: float) -> float:
    """3 / (1/emo_ccc + 1/cou_uar + age_mae); all inputs must be positive."""
    if emo_ccc <= 0 or cou_uar <= 0 or age_mae <= 0:
        raise DomainError(
            f"hmean: inputs must be positive, got ({emo_ccc}, {cou_uar}, {age_mae})"
        )
    return 3.0 / (1.0 / emo_ccc + 1.0 / cou_uar + age_mae)


@dataclass(frozen=True)
class MetricsReport:
    emo_ccc: float
    cou_uar: float
    age_mae: float
    h_mean: float

    @classmethod
    def from_components(cls, emo_ccc: float, cou_uar: float, age_mae: float):
        """Assemble a report; h_mean is NaN when any component is nonpositive
        (untrained models can land there) rather than refusing to report."""
        if emo_ccc > 0 and cou_uar > 0 and age_mae > 0:
            h = hmean(emo_ccc, cou_uar, age_mae)
        else:
            h = float("nan")
        return cls(float(emo_ccc), float(cou_uar), float(age_mae), h)

    def as_dict(self):
        def jsonable(v):
            return None if math.isnan(v) else v
        return {
            "emo_ccc": jsonable(self.emo_ccc),
            "cou_uar": jsonable(self.cou_uar),
            "age_mae": jsonable(self.age_mae),
            "h_mean": jsonable(self.h_mean),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict())

    @classmethod
    def from_dict(cls, d):
        def num(v):
            return float("nan") if v is None else float(v)
        return cls(num(d["emo_ccc"]), num(d["cou_uar"]), num(d["age_mae"]), num(d["h_mean"]))
