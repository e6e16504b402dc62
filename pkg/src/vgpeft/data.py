"""Annotation and prediction files, plus a synthetic referring-expression generator.

Files are UTF-8 JSON Lines, one self-contained object per line. Boxes are
serialised as ``[xmin, ymin, xmax, ymax]`` in pixels. Readers reject invalid
data; nothing is clamped or repaired.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, JoinError, ParseError, SpecError, ValidationError
from .metrics import BBox, PairRecord

POSITIONS = ("left", "right", "top", "bottom", "middle")
DEFAULT_CLASSES = ("airplane", "ship", "storage tank", "harbor", "vehicle")


@dataclass
class AnnotationRecord:
    pair_id: str
    image_id: str
    width: float
    height: float
    query: str
    bbox: BBox
    category: str = None
    patches: np.ndarray = None

    def validate(self):
        ident = f"pair {self.pair_id!r}"
        if not isinstance(self.pair_id, str) or not self.pair_id:
            raise ValidationError("pair_id must be a non-empty string")
        if not isinstance(self.query, str) or not self.query.strip():
            raise ValidationError(f"{ident}: query must be non-empty")
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(f"{ident}: width/height must be positive")
        b = self.bbox
        if not (0 <= b.xmin and b.xmax <= self.width and 0 <= b.ymin and b.ymax <= self.height):
            raise ValidationError(
                f"{ident}: bbox {b.as_list()} outside image {self.width}x{self.height}")
        if self.patches is not None:
            p = np.asarray(self.patches)
            if p.ndim != 2 or not np.all(np.isfinite(p)):
                raise ValidationError(f"{ident}: patches must be a finite 2-D feature block")
        return self

    def to_dict(self):
        d = {
            "pair_id": self.pair_id,
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "query": self.query,
            "bbox": self.bbox.as_list(),
        }
        if self.category is not None:
            d["category"] = self.category
        if self.patches is not None:
            d["patches"] = np.asarray(self.patches, dtype=np.float64).tolist()
        return d

    def norm_box(self):
        """Ground truth as normalised (cx, cy, w, h)."""
        b = self.bbox
        return np.array([
            (b.xmin + b.xmax) / 2 / self.width,
            (b.ymin + b.ymax) / 2 / self.height,
            (b.xmax - b.xmin) / self.width,
            (b.ymax - b.ymin) / self.height,
        ])


_REQUIRED = ("pair_id", "image_id", "width", "height", "query", "bbox")


def _record_from_dict(d):
    missing = [k for k in _REQUIRED if k not in d]
    if missing:
        raise ParseError(f"missing fields {missing}")
    try:
        bbox = BBox.from_list(d["bbox"])
    except (TypeError, ValueError) as e:
        raise ValidationError(f"pair {d['pair_id']!r}: invalid bbox: {e}") from None
    patches = d.get("patches")
    if patches is not None:
        try:
            patches = np.asarray(patches, dtype=np.float64)
        except (TypeError, ValueError):
            raise ValidationError(f"pair {d['pair_id']!r}: patches are not a numeric array") from None
    return AnnotationRecord(
        pair_id=d["pair_id"], image_id=d["image_id"], width=d["width"], height=d["height"],
        query=d["query"], bbox=bbox, category=d.get("category"), patches=patches,
    ).validate()


def _iter_json_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"malformed JSON: {e.msg}", lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("each line must hold a JSON object", lineno)
            yield lineno, obj


def load_annotations(path):
    records, seen = [], set()
    for lineno, obj in _iter_json_lines(path):
        try:
            rec = _record_from_dict(obj)
        except ParseError as e:
            raise ParseError(str(e), lineno) from None
        if rec.pair_id in seen:
            raise ValidationError(f"duplicate pair_id {rec.pair_id!r} (line {lineno})")
        seen.add(rec.pair_id)
        records.append(rec)
    return records


def write_annotations(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# predictions


def write_predictions(predictions, path):
    """``predictions`` is an iterable of (pair_id, BBox)."""
    predictions = list(predictions)
    ids = [pid for pid, _ in predictions]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate prediction pair_ids: {dupes}")
    with open(path, "w", encoding="utf-8") as fh:
        for pid, box in predictions:
            fh.write(json.dumps({"pair_id": pid, "bbox": box.as_list()}) + "\n")


def load_predictions(path):
    out, seen = [], set()
    for lineno, obj in _iter_json_lines(path):
        if "pair_id" not in obj or "bbox" not in obj:
            raise ParseError("prediction needs pair_id and bbox", lineno)
        pid = obj["pair_id"]
        if pid in seen:
            raise ValidationError(f"duplicate prediction for pair {pid!r} (line {lineno})")
        seen.add(pid)
        try:
            box = BBox.from_list(obj["bbox"])
        except (TypeError, ValueError) as e:
            raise ValidationError(f"pair {pid!r}: invalid bbox: {e}") from None
        out.append((pid, box))
    return out


def join_predictions(annotations, predictions):
    """Pair each annotation with its prediction; every id must appear on both sides."""
    by_id = dict(predictions)
    ann_ids = {a.pair_id for a in annotations}
    orphans = sorted(set(by_id) - ann_ids)
    missing = sorted(ann_ids - set(by_id))
    if orphans or missing:
        parts = []
        if orphans:
            parts.append(f"predictions for unknown pairs: {orphans}")
        if missing:
            parts.append(f"annotated pairs without predictions: {missing}")
        raise JoinError("; ".join(parts), missing=missing, orphans=orphans)
    return [PairRecord(a.pair_id, a.image_id, a.query, a.bbox, by_id[a.pair_id], a.category)
            for a in annotations]


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int
    seed: int = 0
    grid: int = 8
    classes: tuple = DEFAULT_CLASSES
    positions: tuple = POSITIONS
    distractors: tuple = (2, 4)  # inclusive count range
    patch_dim: int = 16
    cell_px: int = 16
    noise: float = 0.1
    same_class_distractor: bool = False

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "positions", tuple(self.positions))
        object.__setattr__(self, "distractors", tuple(self.distractors))
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise SpecError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.grid < 1:
            raise SpecError(f"grid must be >= 1, got {self.grid}")
        if not self.classes or not self.positions:
            raise SpecError("need at least one class and one position")
        if len(self.classes) < 2 and len(self.positions) < 2:
            raise SpecError("need at least 2 classes or 2 positions for discriminative queries")
        if len(set(self.classes)) != len(self.classes):
            raise SpecError("class names must be distinct")
        unknown = set(self.positions) - set(POSITIONS)
        if unknown:
            raise SpecError(f"unknown positions {sorted(unknown)}; choose from {POSITIONS}")
        lo, hi = self.distractors
        if not 0 <= lo <= hi:
            raise SpecError(f"distractor range must satisfy 0 <= lo <= hi, got {self.distractors}")
        if len(self.classes) > self.patch_dim:
            raise SpecError(f"{len(self.classes)} classes need patch_dim >= {len(self.classes)}")
        if self.noise < 0 or self.cell_px < 1:
            raise SpecError("noise must be >= 0 and cell_px >= 1")


def in_region(position, row, col, grid):
    band = max(1, grid // 3)
    if position == "left":
        return col < band
    if position == "right":
        return col >= grid - band
    if position == "top":
        return row < band
    if position == "bottom":
        return row >= grid - band
    if position == "middle":
        return band <= row < grid - band and band <= col < grid - band
    raise ValueError(f"unknown position {position!r}")


def query_for(cls, position):
    return f"the {cls} on the {position}"


@dataclass
class Scene:
    record: AnnotationRecord
    objects: list = field(default_factory=list)  # [(class, row, col)], target first
    target_position: str = ""


def _cells(grid):
    return [(r, c) for r in range(grid) for c in range(grid)]


def _check_satisfiable(spec):
    cells = _cells(spec.grid)
    for pos in spec.positions:
        if not any(in_region(pos, r, c, spec.grid) for r, c in cells):
            raise GenerationError(f"position {pos!r} has no cells on a {spec.grid}x{spec.grid} grid")
    if 1 + spec.distractors[1] > len(cells):
        raise GenerationError(
            f"{1 + spec.distractors[1]} objects cannot fit on {len(cells)} cells")


def generate_scenes(spec):
    """Deterministic scenes with one uniquely described target each."""
    _check_satisfiable(spec)
    rng = np.random.default_rng(spec.seed)
    g, cells = spec.grid, _cells(spec.grid)
    size = g * spec.cell_px
    scenes = []
    for i in range(spec.n_samples):
        cls = spec.classes[rng.integers(len(spec.classes))]
        pos = spec.positions[rng.integers(len(spec.positions))]
        region = [rc for rc in cells if in_region(pos, *rc, g)]
        target = region[rng.integers(len(region))]
        objects = [(cls, *target)]
        occupied = {target}
        for k in range(int(rng.integers(spec.distractors[0], spec.distractors[1] + 1))):
            if k == 0 and spec.same_class_distractor:
                dcls = cls
            else:
                dcls = spec.classes[rng.integers(len(spec.classes))]
            free = [rc for rc in cells if rc not in occupied
                    and not (dcls == cls and in_region(pos, *rc, g))]
            if not free:
                raise GenerationError(
                    f"sample {i}: no cell left for a {dcls!r} distractor that keeps the query unique")
            cell = free[rng.integers(len(free))]
            occupied.add(cell)
            objects.append((dcls, *cell))

        patches = rng.standard_normal((g * g, spec.patch_dim)) * spec.noise
        for ocls, r, c in objects:
            patches[r * g + c, spec.classes.index(ocls)] += 1.0
        r, c = target
        cp = spec.cell_px
        record = AnnotationRecord(
            pair_id=f"syn{spec.seed}-{i:05d}",
            image_id=f"img{spec.seed}-{i:05d}",
            width=float(size), height=float(size),
            query=query_for(cls, pos),
            bbox=BBox(float(c * cp), float(r * cp), float((c + 1) * cp), float((r + 1) * cp)),
            category=cls,
            patches=patches,
        ).validate()
        scenes.append(Scene(record, objects, pos))
    return scenes


def generate_synthetic(spec):
    return [s.record for s in generate_scenes(spec)]


def split_records(records, test_fraction=0.2, seed=0):
    """Partition records by pair_id into (train, test) with no overlap."""
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError(f"test_fraction must be in [0, 1], got {test_fraction}")
    ids = sorted({r.pair_id for r in records})
    if len(ids) != len(records):
        raise ValidationError("pair_ids must be unique before splitting")
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_test = int(math.floor(len(ids) * test_fraction + 0.5))
    test_ids = {ids[j] for j in perm[:n_test]}
    train = [r for r in records if r.pair_id not in test_ids]
    test = [r for r in records if r.pair_id in test_ids]
    return train, test

