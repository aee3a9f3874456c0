import json
from collections import Counter

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from renal_edl.data import (
    SubjectRecord,
    class_counts,
    generate_synthetic_cohort,
    largest_remainder,
    load_manifest,
    stratified_kfold,
    write_manifest,
)
from renal_edl.detection import merge_slices
from renal_edl.errors import ConfigurationError, ValidationError


def records_with_counts(counts):
    recs = []
    for label, n in enumerate(counts):
        recs += [SubjectRecord(f"c{label}-{i:04d}", label, None) for i in range(n)]
    return recs


def write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


class TestManifest:
    def test_well_formed(self, tmp_path):
        write_lines(tmp_path / "m.jsonl", [
            {"id": "a", "label": 0, "volume_path": "v/a.json", "boxes_path": "b/a.csv"},
            {"id": "b", "label": 2, "volume_path": "v/b.json", "boxes_path": None},
            {"id": "c", "label": 1, "volume_path": "v/c.json", "age": 61},
        ])
        recs = load_manifest(tmp_path / "m.jsonl")
        assert [r.id for r in recs] == ["a", "b", "c"]
        assert recs[0].volume_path == tmp_path / "v/a.json" and recs[0].boxes_path == tmp_path / "b/a.csv"
        assert recs[1].boxes_path is None and recs[2].extra == {"age": 61}

    def test_duplicate_id_named(self, tmp_path):
        write_lines(tmp_path / "m.jsonl", [
            {"id": "dup7", "label": 0, "volume_path": "x"},
            {"id": "dup7", "label": 1, "volume_path": "y"},
        ])
        with pytest.raises(ValidationError, match="dup7"):
            load_manifest(tmp_path / "m.jsonl")

    def test_label_out_of_range_names_record(self, tmp_path):
        write_lines(tmp_path / "m.jsonl", [{"id": "ok", "label": 0, "volume_path": "x"},
                                           {"id": "case-9", "label": "4", "volume_path": "y"}])
        with pytest.raises(ValidationError, match="case-9"):
            load_manifest(tmp_path / "m.jsonl")

    @pytest.mark.parametrize("line", ["{not json", "[1, 2]", '{"id": "a", "label": 0}'])
    def test_parse_errors(self, tmp_path, line):
        (tmp_path / "m.jsonl").write_text(line + "\n")
        with pytest.raises(ValidationError, match=":1:"):
            load_manifest(tmp_path / "m.jsonl")

    def test_write_read_round_trip(self, tmp_path):
        recs = [SubjectRecord("s1", 1, tmp_path / "vol/s1.json", tmp_path / "box/s1.csv", {"site": "A"})]
        write_manifest(recs, tmp_path / "m.jsonl")
        assert '"volume_path": "vol/s1.json"' in (tmp_path / "m.jsonl").read_text()
        back = load_manifest(tmp_path / "m.jsonl")
        assert back == recs and back[0].extra == {"site": "A"}


class TestClassCounts:
    def test_empty(self):
        assert class_counts([]).tolist() == [0, 0, 0]

    def test_labels(self):
        assert class_counts([0, 0, 1, 2, 2, 2]).tolist() == [2, 1, 3]

    def test_center_one_manifest(self, tmp_path):
        rows = [{"id": r.id, "label": r.label, "volume_path": f"{r.id}.json"} for r in records_with_counts((395, 167, 106))]
        write_lines(tmp_path / "center1.jsonl", rows)
        assert class_counts(load_manifest(tmp_path / "center1.jsonl")).tolist() == [395, 167, 106]


class TestStratifiedKFold:
    def check_partition(self, recs, folds):
        ids = {r.id for r in recs}
        vals = [set(f.validation_ids) for f in folds]
        assert set().union(*vals) == ids and sum(map(len, vals)) == len(ids)
        for f in folds:
            assert not set(f.train_ids) & set(f.validation_ids)
            assert set(f.train_ids) | set(f.validation_ids) == ids
        label = {r.id: r.label for r in recs}
        for c in range(3):
            per_fold = [sum(label[i] == c for i in v) for v in vals]
            assert max(per_fold) - min(per_fold) <= 1

    def test_ten_records(self):
        recs = records_with_counts((6, 2, 2))
        folds = stratified_kfold(recs, 5, seed=3, strict=False)
        self.check_partition(recs, folds)
        label = {r.id: r.label for r in recs}
        for f in folds:
            assert len(f.validation_ids) == 2
            c = Counter(label[i] for i in f.validation_ids)
            assert c[0] in (1, 2) and c[1] in (0, 1) and c[2] in (0, 1)

    def test_clinical_size(self):
        recs = records_with_counts((395, 167, 106))
        folds = stratified_kfold(recs, 5, seed=0)
        self.check_partition(recs, folds)
        assert {len(f.validation_ids) for f in folds} <= {133, 134}
        assert sum(len(f.validation_ids) for f in folds) == 668

    @pytest.mark.parametrize("seed", range(20))
    def test_invariants_random_counts(self, seed):
        rng = np.random.default_rng(seed)
        recs = records_with_counts(rng.integers(5, 60, 3))
        k = int(rng.integers(2, 6))
        self.check_partition(recs, stratified_kfold(recs, k, seed))

    def test_relaxed_mode_needs_k_records(self):
        with pytest.raises(ConfigurationError):
            stratified_kfold(records_with_counts((2, 1, 1)), 5, strict=False)

    def test_deterministic(self):
        recs = records_with_counts((20, 7, 9))
        assert stratified_kfold(recs, 5, 11) == stratified_kfold(recs, 5, 11)
        assert stratified_kfold(recs, 5, 11) != stratified_kfold(recs, 5, 12)

    def test_small_class_reports_counts(self):
        with pytest.raises(ConfigurationError, match=r"\[6, 2, 2\]"):
            stratified_kfold(records_with_counts((6, 2, 2)), 5)
        with pytest.raises(ConfigurationError, match=r"\[6, 1, 3\]"):
            stratified_kfold(records_with_counts((6, 1, 3)), 5)


class TestSynthetic:
    def test_counts(self):
        assert largest_remainder(100, (0.59, 0.16, 0.25)).tolist() == [59, 16, 25]
        subs = generate_synthetic_cohort(100, (0.59, 0.16, 0.25), "easy", 16, seed=7)
        assert Counter(s.label for s in subs) == {0: 59, 1: 16, 2: 25}
        assert len({s.id for s in subs}) == 100

    @pytest.mark.parametrize("n", [15, 17, 101, 668, 1001])
    def test_largest_remainder_sums(self, n):
        p = np.random.default_rng(n).dirichlet([1, 1, 1])
        counts = largest_remainder(n, p)
        assert counts.sum() == n and np.all(np.abs(counts - n * p) < 1)

    @pytest.mark.parametrize("kwargs", [dict(n=10), dict(proportions=(0.5, 0.6, -0.1)), dict(difficulty="trivial")])
    def test_invalid(self, kwargs):
        args = dict(n=30, proportions=(0.59, 0.16, 0.25), difficulty="easy", side=16, seed=0) | kwargs
        with pytest.raises(ValidationError):
            generate_synthetic_cohort(**args)

    def test_bitwise_reproducible(self):
        a = generate_synthetic_cohort(20, (0.59, 0.16, 0.25), "medium", 16, seed=3)
        b = generate_synthetic_cohort(20, (0.59, 0.16, 0.25), "medium", 16, seed=3)
        for x, y in zip(a, b):
            assert x.id == y.id and x.label == y.label and x.boxes == y.boxes
            assert x.volume.values.tobytes() == y.volume.values.tobytes()
        c = generate_synthetic_cohort(20, (0.59, 0.16, 0.25), "medium", 16, seed=4)
        assert a[0].volume.values.tobytes() != c[0].volume.values.tobytes()

    def test_volume_geometry(self):
        s = generate_synthetic_cohort(15, (0.59, 0.16, 0.25), "easy", 32, seed=0)[0]
        assert s.volume.dims == (32, 32, 16) and s.volume.spacing_mm == (1.0, 1.0, 2.0)
        assert s.boxes and len({b.slice_z for b in s.boxes}) == len(s.boxes)

    def test_easy_cohort_linearly_separable(self):
        subs = generate_synthetic_cohort(300, (0.59, 0.16, 0.25), "easy", 32, seed=1)
        feats = []
        for s in subs:
            box = merge_slices(s.boxes)
            (x0, y0, z0), (x1, y1, z1) = box.min_voxel, box.max_voxel
            inside = s.volume.values[z0 : z1 + 1, int(y0) : int(y1) + 1, int(x0) : int(x1) + 1]
            feats.append([inside.mean(), (x1 - x0 + y1 - y0) / 4.0])
        y = [s.label for s in subs]
        probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=1000))
        assert cross_val_score(probe, np.array(feats), y, cv=5).mean() >= 0.95
