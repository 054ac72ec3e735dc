import csv

import numpy as np
import pytest

import ctxforest as cf
from ctxforest.errors import ValidationError
from ctxforest.eval import (ABLATION_CONFIGS, CSV_COLUMNS, EvalReport,
                            ablation, ablation_table, config_hash, load_case)
from ctxforest.features import CLASS_NAMES, CLASS_PALETTE


def label_vol(bits, cls=1, dims=(4, 1, 1), spacing=(1, 1, 1), origin=(0, 0, 0)):
    labels = np.where(np.asarray(bits, dtype=bool), np.uint8(cls), np.uint8(0))
    return cf.LabelVolume(dims, spacing, origin, labels, CLASS_PALETTE)


class TestDsc:
    def test_hand_values(self):
        assert cf.dsc(label_vol([1, 1, 0, 0]), label_vol([0, 1, 1, 0]), 1) == 0.5
        assert cf.dsc(label_vol([1, 1, 1, 1]), label_vol([1, 1, 1, 1]), 1) == 1.0
        assert cf.dsc(label_vol([1, 0, 0, 0]), label_vol([0, 0, 0, 1]), 1) == 0.0
        # 2|A∩B|/(|A|+|B|) with |A|=3, |B|=1, overlap 1
        assert cf.dsc(label_vol([1, 1, 1, 0]), label_vol([1, 0, 0, 0]), 1) \
            == pytest.approx(0.5)

    def test_empty_conventions(self):
        empty = label_vol([0, 0, 0, 0])
        assert cf.dsc(empty, empty, 1) == 1.0
        assert cf.dsc(empty, label_vol([1, 0, 0, 0]), 1) == 0.0
        assert cf.dsc(label_vol([1, 0, 0, 0]), empty, 1) == 0.0

    def test_classes_scored_independently(self):
        pred = label_vol([1, 1, 0, 0], cls=2)
        gt = label_vol([1, 1, 0, 0], cls=3)
        assert cf.dsc(pred, gt, 2) == 0.0
        assert cf.dsc(pred, gt, 1) == 1.0  # both empty for class 1

    def test_geometry_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            cf.dsc(label_vol([1, 0, 0, 0]),
                   label_vol([1, 0, 0, 0], origin=(1, 0, 0)), 1)


class TestPipelineConfig:
    def test_roundtrip_and_defaults(self):
        cfg = cf.PipelineConfig(forest=cf.ForestConfig(num_trees=3),
                                use_graphcut=False)
        back = cf.PipelineConfig.from_dict(cfg.to_dict())
        assert back == cfg
        # omitted sections fall back to defaults
        partial = cf.PipelineConfig.from_dict({"forest": {"num_trees": 9}})
        assert partial.forest.num_trees == 9
        assert partial.cascade == cf.CascadeConfig()
        assert partial.use_graphcut

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValidationError):
            cf.PipelineConfig.from_dict({"forests": {}})
        with pytest.raises(ValidationError):
            cf.PipelineConfig.from_dict({"forest": {"trees": 5}})

    def test_lambda_alias_accepted(self):
        cfg = cf.PipelineConfig.from_dict({"energy": {"lambda": 2.25}})
        assert cfg.energy.lam == 2.25

    def test_config_hash(self):
        a = cf.PipelineConfig()
        b = cf.PipelineConfig(use_graphcut=False)
        ha, hb = config_hash(a), config_hash(b)
        assert len(ha) == 12 and int(ha, 16) >= 0
        assert ha != hb
        assert config_hash(cf.PipelineConfig()) == ha


class TestFolds:
    def test_partition_properties(self):
        plan = cf.make_folds(range(10), 3, seed=4)
        assert len(plan.folds) == 3
        sizes = [len(f) for f in plan.folds]
        assert sizes == sorted(sizes, reverse=True)
        assert sum(sizes) == 10
        flat = sorted(s for f in plan.folds for s in f)
        assert flat == list(range(10))
        for f in plan.folds:
            assert f == sorted(f)

    def test_deterministic_and_seed_sensitive(self):
        a = cf.make_folds(range(12), 3, seed=1)
        b = cf.make_folds(range(12), 3, seed=1)
        c = cf.make_folds(range(12), 3, seed=2)
        assert a.folds == b.folds
        assert a.folds != c.folds
        assert a.digest() == b.digest()
        assert len(a.digest()) == 12

    def test_duplicates_collapse(self):
        plan = cf.make_folds([3, 1, 3, 2, 1, 0], 2, seed=0)
        assert sorted(s for f in plan.folds for s in f) == [0, 1, 2, 3]

    def test_fold_of(self):
        plan = cf.make_folds(range(6), 2, seed=0)
        for f, members in enumerate(plan.folds):
            for s in members:
                assert plan.fold_of(s) == f
        with pytest.raises(ValidationError):
            plan.fold_of(99)

    def test_validation(self):
        with pytest.raises(ValidationError):
            cf.make_folds(range(5), 1, seed=0)
        with pytest.raises(ValidationError):
            cf.make_folds(range(2), 3, seed=0)


class TestLoadCases:
    def test_cases_are_keyed_by_volume_path(self, mini_cases):
        rows, feat, cases = mini_cases
        assert set(cases) == {r.volume_path for r in rows}
        ctx, gt = cases[rows[0].volume_path]
        assert isinstance(ctx, cf.FeatureContext)
        assert isinstance(gt, cf.LabelVolume)
        assert ctx.volume.dims == gt.dims
        assert ctx.cfg == feat

    def test_load_case_matches_files(self, mini_cases):
        rows, feat, cases = mini_cases
        ctx, gt = load_case(rows[1], feat)
        ref_ctx, ref_gt = cases[rows[1].volume_path]
        np.testing.assert_array_equal(ctx.volume.data, ref_ctx.volume.data)
        np.testing.assert_array_equal(gt.labels, ref_gt.labels)
        np.testing.assert_array_equal(ctx.band, ref_ctx.band)


def synthetic_rows():
    rows = []
    vals = {("femoral_cartilage", 0): [0.8, 0.9], ("femoral_cartilage", 1): [0.7],
            ("tibial_cartilage", 0): [0.6, 0.8], ("tibial_cartilage", 1): [0.5],
            ("patellar_cartilage", 0): [1.0, 0.4], ("patellar_cartilage", 1): [0.9]}
    for (cls, fold), ds in vals.items():
        for i, d in enumerate(ds):
            rows.append({"fold": fold, "subject": fold * 10 + i,
                         "volume": f"s{fold}{i}_v0", "class": cls, "dsc": d,
                         "config_hash": "abc123def456"})
    return rows


class TestEvalReport:
    def test_aggregates(self):
        rep = EvalReport(synthetic_rows())
        assert rep.class_values("femoral_cartilage") == [0.8, 0.9, 0.7]
        assert rep.mean_dsc("femoral_cartilage") == pytest.approx(0.8)
        assert rep.mean_dsc("femoral_cartilage", fold=0) == pytest.approx(0.85)
        assert rep.std_dsc("femoral_cartilage") == pytest.approx(
            float(np.std([0.8, 0.9, 0.7], ddof=1)))
        assert rep.folds() == [0, 1]
        assert rep.mean_dsc() == pytest.approx(np.mean([0.8, 0.9, 0.7, 0.6, 0.8,
                                                        0.5, 1.0, 0.4, 0.9]))
        with pytest.raises(ValidationError):
            rep.mean_dsc("femoral_cartilage", fold=7)

    def test_std_of_singleton_is_zero(self):
        rep = EvalReport(synthetic_rows())
        assert rep.std_dsc("femoral_cartilage", fold=1) == 0.0

    def test_csv_roundtrips_dsc_exactly(self, tmp_path):
        rows = synthetic_rows()
        rows[0]["dsc"] = 2.0 / 3.0  # not representable in short decimal
        rep = EvalReport(rows)
        p = tmp_path / "report.csv"
        rep.to_csv(p)
        with open(p, newline="") as fh:
            got = list(csv.reader(fh))
        assert got[0] == CSV_COLUMNS
        assert len(got) == len(rows) + 1
        assert float(got[1][4]) == rows[0]["dsc"]

    def test_format_text(self):
        rep = EvalReport(synthetic_rows(),
                         feature_frequency=np.arange(34).reshape(2, 17))
        text = rep.format_text()
        for cls in CLASS_NAMES[1:]:
            assert cls in text
        assert "fold 0:" in text and "fold 1:" in text
        assert "pass 0:" in text and "pass 1:" in text


def mini_pipeline_config(feat, use_graphcut=False, num_passes=2):
    return cf.PipelineConfig(
        features=feat,
        forest=cf.ForestConfig(num_trees=2, max_depth=6),
        cascade=cf.CascadeConfig(num_passes=num_passes,
                                 samples_per_class_per_volume=150),
        energy=cf.EnergyParams(),
        use_graphcut=use_graphcut)


class TestCrossValidate:
    def test_grouped_rows_and_hashes(self, mini_cases):
        rows, feat, cases = mini_cases
        cfg = mini_pipeline_config(feat)
        rep = cf.cross_validate(rows, cfg, k=2, seed=0, cases=cases)
        # 2 folds x 2 held-out volumes x 3 classes
        assert len(rep.rows) == 12
        chash = config_hash(cfg)
        plan = cf.make_folds([r.subject_id for r in rows], 2, seed=0)
        for r in rep.rows:
            assert r["config_hash"] == chash
            assert 0.0 <= r["dsc"] <= 1.0
            assert plan.fold_of(r["subject"]) == r["fold"]
            assert r["volume"].startswith("s") and "_v" in r["volume"]
        assert rep.fold_digest == plan.digest()
        assert rep.feature_frequency.shape == (2, 17)
        # every subject is scored in exactly one fold
        by_subject = {}
        for r in rep.rows:
            by_subject.setdefault(r["subject"], set()).add(r["fold"])
        assert all(len(f) == 1 for f in by_subject.values())

    def test_deterministic(self, mini_cases):
        rows, feat, cases = mini_cases
        cfg = mini_pipeline_config(feat)
        a = cf.cross_validate(rows, cfg, k=2, seed=0, cases=cases)
        b = cf.cross_validate(rows, cfg, k=2, seed=0, cases=cases)
        assert a.rows == b.rows

    def test_graphcut_path(self, mini_cases):
        rows, feat, cases = mini_cases
        cfg = mini_pipeline_config(feat, use_graphcut=True)
        rep = cf.cross_validate(rows, cfg, k=2, seed=0, cases=cases)
        assert len(rep.rows) == 12
        assert all(0.0 <= r["dsc"] <= 1.0 for r in rep.rows)


class TestAblation:
    def test_variants_and_slicing(self, mini_cases):
        rows, feat, cases = mini_cases
        cfg = mini_pipeline_config(feat)
        reports = ablation(rows, cfg, k=2, seed=0, cases=cases)
        assert set(reports) == set(ABLATION_CONFIGS)
        hashes = set()
        for name in ABLATION_CONFIGS:
            rep = reports[name]
            assert len(rep.rows) == 12
            hashes.add(rep.rows[0]["config_hash"])
        assert len(hashes) == len(ABLATION_CONFIGS)

        # slicing a 3-pass cascade must reproduce a dedicated 2-pass run
        direct = cf.cross_validate(rows, mini_pipeline_config(feat, num_passes=2),
                                   k=2, seed=0, cases=cases)
        sliced = reports["2pass_LM"]
        key = lambda r: (r["fold"], r["subject"], r["volume"], r["class"])
        got = {key(r): r["dsc"] for r in sliced.rows}
        want = {key(r): r["dsc"] for r in direct.rows}
        assert got == want

        table = ablation_table(reports)
        lines = table.strip().split("\n")
        assert len(lines) == 1 + len(ABLATION_CONFIGS)
        for name in ABLATION_CONFIGS:
            assert any(line.startswith(name) for line in lines)
