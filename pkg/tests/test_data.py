import json
import re

import numpy as np
import pytest

from vgpeft.data import (
    AnnotationRecord,
    POSITIONS,
    SyntheticSpec,
    generate_scenes,
    generate_synthetic,
    in_region,
    join_predictions,
    load_annotations,
    load_predictions,
    split_records,
    write_annotations,
    write_predictions,
)
from vgpeft.errors import GenerationError, JoinError, ParseError, SpecError, ValidationError
from vgpeft.metrics import BBox

QUERY = re.compile(r"^the (.+) on the (left|right|top|bottom|middle)$")


def make_record(pid="p1", **kw):
    fields = dict(pair_id=pid, image_id="i1", width=100.0, height=80.0,
                  query="the ship on the left", bbox=BBox(10, 20, 30, 40), category="ship")
    fields.update(kw)
    return AnnotationRecord(**fields)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def resolve_referents(record, spec):
    """Objects decoded from the patch features that satisfy the query predicate."""
    cls, pos = QUERY.match(record.query).groups()
    k = spec.classes.index(cls)
    g = spec.grid
    hits = []
    for cell, feat in enumerate(np.asarray(record.patches)):
        present = feat[: len(spec.classes)] > 0.5
        r, c = divmod(cell, g)
        if present[k] and in_region(pos, r, c, g):
            hits.append((r, c))
    return hits


class TestAnnotationFiles:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        assert load_annotations(path) == []

    def test_round_trip(self, tmp_path):
        records = [make_record("a"), make_record("b", category=None, query="ünïcode ship"),
                   make_record("c", patches=np.arange(6.0).reshape(2, 3) / 7)]
        path = tmp_path / "ann.jsonl"
        write_annotations(records, path)
        loaded = load_annotations(path)
        assert [r.pair_id for r in loaded] == ["a", "b", "c"]
        for a, b in zip(records, loaded):
            assert a.to_dict() == b.to_dict()
        np.testing.assert_array_equal(loaded[2].patches, records[2].patches)

    def test_box_out_of_bounds(self, tmp_path):
        rec = make_record().to_dict()
        rec["bbox"] = [10, 20, 130, 40]
        path = write_lines(tmp_path / "a.jsonl", [json.dumps(rec)])
        with pytest.raises(ValidationError, match="p1"):
            load_annotations(path)

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = write_lines(tmp_path / "a.jsonl", [json.dumps(make_record().to_dict()), "{oops"])
        with pytest.raises(ParseError, match="line 2"):
            load_annotations(path)

    def test_missing_field(self, tmp_path):
        rec = make_record().to_dict()
        del rec["query"]
        path = write_lines(tmp_path / "a.jsonl", [json.dumps(rec)])
        with pytest.raises(ParseError, match="line 1.*query"):
            load_annotations(path)

    def test_non_object_line(self, tmp_path):
        with pytest.raises(ParseError):
            load_annotations(write_lines(tmp_path / "a.jsonl", ["[1, 2]"]))

    def test_duplicate_pair_id(self, tmp_path):
        line = json.dumps(make_record().to_dict())
        with pytest.raises(ValidationError, match="duplicate"):
            load_annotations(write_lines(tmp_path / "a.jsonl", [line, line]))

    @pytest.mark.parametrize("kw", [dict(query="  "), dict(width=0.0), dict(pair_id="")])
    def test_invalid_records(self, kw):
        with pytest.raises(ValidationError):
            make_record(**kw).validate()

    def test_degenerate_box_in_file(self, tmp_path):
        rec = make_record().to_dict()
        rec["bbox"] = [30, 20, 10, 40]
        with pytest.raises(ValidationError):
            load_annotations(write_lines(tmp_path / "a.jsonl", [json.dumps(rec)]))

    def test_boxes_are_not_clamped(self, tmp_path):
        rec = make_record().to_dict()
        rec["bbox"] = [-0.5, 20, 30, 40]
        with pytest.raises(ValidationError):
            load_annotations(write_lines(tmp_path / "a.jsonl", [json.dumps(rec)]))

    def test_norm_box(self):
        np.testing.assert_allclose(make_record().norm_box(), [0.2, 0.375, 0.2, 0.25])


class TestPredictionFiles:
    def test_round_trip_full_precision(self, tmp_path):
        rng = np.random.default_rng(0)
        preds = []
        for i in range(100):
            x0, y0 = rng.uniform(0, 50, 2)
            w, h = rng.uniform(1e-3, 50, 2)
            preds.append((f"p{i}", BBox(x0, y0, x0 + w, y0 + h)))
        path = tmp_path / "pred.jsonl"
        write_predictions(preds, path)
        assert load_predictions(path) == preds

    def test_duplicate_on_write(self, tmp_path):
        b = BBox(0, 0, 1, 1)
        with pytest.raises(ValidationError):
            write_predictions([("a", b), ("a", b)], tmp_path / "p.jsonl")

    def test_duplicate_on_load(self, tmp_path):
        line = json.dumps({"pair_id": "a", "bbox": [0, 0, 1, 1]})
        with pytest.raises(ValidationError):
            load_predictions(write_lines(tmp_path / "p.jsonl", [line, line]))

    def test_join(self):
        anns = [make_record("a"), make_record("b")]
        preds = [("b", BBox(0, 0, 5, 5)), ("a", BBox(10, 20, 30, 40))]
        joined = join_predictions(anns, preds)
        assert [r.pair_id for r in joined] == ["a", "b"]
        assert joined[0].pred == joined[0].gt
        assert joined[0].category == "ship"

    def test_join_orphan(self):
        with pytest.raises(JoinError) as exc:
            join_predictions([make_record("a")], [("a", BBox(0, 0, 1, 1)), ("zz", BBox(0, 0, 1, 1))])
        assert exc.value.orphans == ["zz"]

    def test_join_missing(self):
        with pytest.raises(JoinError) as exc:
            join_predictions([make_record("a"), make_record("b")], [("a", BBox(0, 0, 1, 1))])
        assert exc.value.missing == ["b"]
        assert "b" in str(exc.value)


class TestSyntheticSpec:
    @pytest.mark.parametrize("kw", [dict(n_samples=0), dict(n_samples=5, grid=0),
                                    dict(n_samples=5, classes=("ship",), positions=("left",)),
                                    dict(n_samples=5, positions=("upper",)),
                                    dict(n_samples=5, distractors=(3, 1)),
                                    dict(n_samples=5, classes=tuple(f"c{i}" for i in range(17)))])
    def test_invalid(self, kw):
        with pytest.raises(SpecError):
            SyntheticSpec(**kw)

    def test_unsatisfiable_grid(self):
        with pytest.raises(GenerationError):
            generate_synthetic(SyntheticSpec(n_samples=3, grid=2, distractors=(4, 4)))

    def test_no_room_for_unique_referent(self):
        spec = SyntheticSpec(n_samples=20, grid=3, classes=("ship", "vehicle"),
                             positions=("left", "right"), distractors=(8, 8))
        with pytest.raises(GenerationError):
            generate_synthetic(spec)


@pytest.fixture(scope="module")
def spec():
    return SyntheticSpec(n_samples=300, seed=7)


@pytest.fixture(scope="module")
def records(spec):
    return generate_synthetic(spec)


class TestGenerator:
    def test_deterministic(self, spec, records):
        again = generate_synthetic(spec)
        for a, b in zip(records, again):
            assert a.to_dict() == b.to_dict()

    def test_query_template(self, records, spec):
        for r in records:
            m = QUERY.match(r.query)
            assert m and m.group(1) in spec.classes and m.group(2) in POSITIONS
            assert r.category == m.group(1)

    def test_unique_referent_from_features(self, records, spec):
        cp = spec.cell_px
        for r in records:
            hits = resolve_referents(r, spec)
            assert len(hits) == 1, r.pair_id
            row, col = hits[0]
            assert r.bbox == BBox(col * cp, row * cp, (col + 1) * cp, (row + 1) * cp)

    def test_unique_referent_from_scene(self, spec):
        for scene in generate_scenes(SyntheticSpec(n_samples=100, seed=3)):
            cls, pos = QUERY.match(scene.record.query).groups()
            matches = [o for o in scene.objects if o[0] == cls and in_region(pos, o[1], o[2], spec.grid)]
            assert matches == [scene.objects[0]]

    def test_features_and_noise(self, records, spec):
        p = np.asarray(records[0].patches)
        assert p.shape == (spec.grid ** 2, spec.patch_dim)
        background = p[:, len(spec.classes):]
        assert abs(background.std() - spec.noise) < 0.02

    def test_distractor_count(self, spec):
        for scene in generate_scenes(SyntheticSpec(n_samples=50, seed=1)):
            assert 2 <= len(scene.objects) - 1 <= 4

    def test_image_geometry(self, records, spec):
        assert all(r.width == r.height == spec.grid * spec.cell_px for r in records)

    def test_disjoint_seeds_give_disjoint_sets(self):
        a = generate_synthetic(SyntheticSpec(n_samples=50, seed=1))
        b = generate_synthetic(SyntheticSpec(n_samples=50, seed=2))
        assert not {r.pair_id for r in a} & {r.pair_id for r in b}
        assert not any(np.array_equal(x.patches, y.patches) for x in a for y in b)


class TestRegions:
    def test_bands_on_default_grid(self):
        cells = {p: [(r, c) for r in range(8) for c in range(8) if in_region(p, r, c, 8)] for p in POSITIONS}
        assert all(c < 2 for _, c in cells["left"])
        assert all(r >= 6 for r, _ in cells["bottom"])
        assert len(cells["middle"]) == 16

    def test_unknown_position(self):
        with pytest.raises(ValueError):
            in_region("upper", 0, 0, 8)


class TestSplit:
    def test_partition(self, synth_train):
        train, test = split_records(synth_train, 0.25, seed=3)
        ids_train, ids_test = {r.pair_id for r in train}, {r.pair_id for r in test}
        assert not ids_train & ids_test
        assert ids_train | ids_test == {r.pair_id for r in synth_train}
        assert len(test) == 16

    def test_deterministic(self, synth_train):
        a = split_records(synth_train, 0.5, seed=1)
        b = split_records(synth_train, 0.5, seed=1)
        assert [r.pair_id for r in a[1]] == [r.pair_id for r in b[1]]

    def test_bad_fraction(self, synth_train):
        with pytest.raises(ValueError):
            split_records(synth_train, 1.5)
