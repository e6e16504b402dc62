"""Grounding metrics: IoU, precision at IoU thresholds, meanIoU and cumIoU.

A prediction counts as correct at threshold tau when its IoU with the ground
truth is strictly greater than tau. Scores are percentages.
"""

import json
import math
from dataclasses import dataclass, field

from .errors import InputError

THRESHOLDS = (0.5, 0.7, 0.9)
COLUMNS = ("Pr@0.5", "Pr@0.7", "Pr@0.9", "meanIoU", "cumIoU")


@dataclass(frozen=True)
class BBox:
    """Corner-format box in pixels."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        coords = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(c) for c in coords):
            raise InputError(f"box has non-finite coordinates: {coords}")
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise InputError(f"degenerate box (need xmin < xmax and ymin < ymax): {coords}")

    @property
    def area(self):
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def as_list(self):
        return [self.xmin, self.ymin, self.xmax, self.ymax]

    @classmethod
    def from_list(cls, values):
        if len(values) != 4:
            raise InputError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    image_id: str
    query: str
    gt: BBox
    pred: BBox
    category: str = None


def intersection_union(a, b):
    """Intersection and union areas of two boxes; touching edges intersect in 0."""
    iw = max(0.0, min(a.xmax, b.xmax) - max(a.xmin, b.xmin))
    ih = max(0.0, min(a.ymax, b.ymax) - max(a.ymin, b.ymin))
    inter = iw * ih
    return inter, a.area + b.area - inter


def iou(a, b):
    for box in (a, b):
        if not isinstance(box, BBox):
            raise InputError(f"iou expects BBox values, got {type(box).__name__}")
    inter, union = intersection_union(a, b)
    return inter / union


def _check(records):
    records = list(records)
    if not records:
        raise InputError("metrics need at least one record")
    return records


def precision_at(records, tau):
    records = _check(records)
    if not 0.0 < tau < 1.0:
        raise InputError(f"threshold must lie in (0, 1), got {tau}")
    hits = sum(1 for r in records if iou(r.gt, r.pred) > tau)
    return 100.0 * hits / len(records)


def mean_iou(records):
    records = _check(records)
    return 100.0 * sum(iou(r.gt, r.pred) for r in records) / len(records)


def cum_iou(records):
    records = _check(records)
    inter = union = 0.0
    for r in records:
        i, u = intersection_union(r.gt, r.pred)
        inter += i
        union += u
    return 100.0 * inter / union


@dataclass(frozen=True)
class MetricsReport:
    pr_at: dict
    mean_iou: float
    cum_iou: float
    n_pairs: int
    per_category: dict = field(default_factory=dict)

    def row(self):
        return [self.pr_at[t] for t in THRESHOLDS] + [self.mean_iou, self.cum_iou]

    def to_dict(self):
        d = {
            "n_pairs": self.n_pairs,
            "pr_at": {str(t): v for t, v in self.pr_at.items()},
            "mean_iou": self.mean_iou,
            "cum_iou": self.cum_iou,
        }
        if self.per_category:
            d["per_category"] = {k: v.to_dict() for k, v in self.per_category.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            pr_at={float(t): v for t, v in d["pr_at"].items()},
            mean_iou=d["mean_iou"],
            cum_iou=d["cum_iou"],
            n_pairs=d["n_pairs"],
            per_category={k: cls.from_dict(v) for k, v in d.get("per_category", {}).items()},
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render(self, name="Model"):
        """Plain-text table in the usual column order, values to 2 decimals."""
        rows = [(name, self)] + [(f"  {k}", v) for k, v in sorted(self.per_category.items())]
        width = max(len("Methods"), *(len(n) for n, _ in rows))
        head = f"{'Methods':<{width}} | " + " | ".join(f"{c:>7}" for c in COLUMNS)
        lines = [head, "-" * len(head)]
        for n, rep in rows:
            lines.append(f"{n:<{width}} | " + " | ".join(f"{v:>7.2f}" for v in rep.row()))
        return "\n".join(lines) + "\n"


def _summarise(records):
    return MetricsReport(
        pr_at={t: precision_at(records, t) for t in THRESHOLDS},
        mean_iou=mean_iou(records),
        cum_iou=cum_iou(records),
        n_pairs=len(records),
    )


def report(records):
    """All five grounding metrics; per-category reports when records carry categories."""
    records = _check(records)
    ids = [r.pair_id for r in records]
    if len(set(ids)) != len(ids):
        raise InputError("pair_id values must be unique within a record set")
    base = _summarise(records)
    groups = {}
    for r in records:
        if r.category is not None:
            groups.setdefault(r.category, []).append(r)
    if not groups:
        return base
    return MetricsReport(base.pr_at, base.mean_iou, base.cum_iou, base.n_pairs,
                         per_category={k: _summarise(v) for k, v in groups.items()})
