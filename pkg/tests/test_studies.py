"""Study configuration, runner bookkeeping and report emission (tiny runs)."""

import csv
import json

import numpy as np
import pytest

from conunetr import studies
from conunetr.studies import (
    ReportRow,
    RunCache,
    StudyConfig,
    StudyError,
    StudyReport,
    cohort_label,
    emit_report,
    load_study_config,
    run_study,
)

QUICK = dict(preset="tiny", epochs=1, repetitions=2, batch_size=4)


class TestConfig:
    def test_kind_defaults(self):
        cfg = StudyConfig("ablation")
        assert [v["name"] for v in cfg.variants] == ["none", "embedding", "embedding+spatial", "token", "token+spatial"]
        assert cfg.seeds == [0, 1, 2] and cfg.train_cohorts == [[0, 1, 2]]
        assert StudyConfig("cross_mutation").test_mutation == 1

    @pytest.mark.parametrize(
        "kw,message",
        [
            (dict(kind="survey"), "study kind"),
            (dict(kind="individual", repetitions=0), "repetitions"),
            (dict(kind="individual", seeds=[1]), "1 seeds given for 3"),
            (dict(kind="individual", variants=[{"name": "a"}, {"name": "a"}]), "duplicate"),
            (dict(kind="individual", variants=[{"name": "a", "depth": 3}]), "bad variant"),
            (dict(kind="individual", train_cohorts=[[]]), "non-empty"),
        ],
    )
    def test_invalid(self, kw, message):
        with pytest.raises(StudyError, match=message):
            StudyConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(StudyError, match="colour"):
            StudyConfig.from_dict({"kind": "joint", "colour": 1})

    def test_bad_variant_arch(self):
        with pytest.raises(StudyError, match="architecture"):
            studies.Variant("x", arch="resnet").model_config("tiny", 0)

    def test_load_file(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({"kind": "individual", "epochs": 5}))
        assert load_study_config(path).epochs == 5
        path.write_text("{")
        with pytest.raises(StudyError):
            load_study_config(path)

    def test_dataset_size_follows_preset(self):
        assert StudyConfig("joint", preset="tiny").dataset_config().img_size == 64


class TestRows:
    def test_mean_and_sample_sd(self):
        row = ReportRow("v", "c", "E13.5", [0.5, 0.7, 0.9])
        assert row.mean_dice == pytest.approx(0.7)
        assert row.sd == pytest.approx(0.2)

    def test_single_run_sd_zero(self):
        assert ReportRow("v", "c", "a", [0.4]).sd == 0.0

    def test_failed(self):
        row = ReportRow("v", "c", "a", [0.4], status="failed")
        assert row.mean_dice is None and row.sd is None

    def test_labels(self):
        assert cohort_label([0, 1, 2]) == "E13.5+E14.5+E15.5"
        assert cohort_label([1], 2) == "E14.5/n=2"


class TestRunner:
    def test_individual_grid_and_cache_reuse(self, small_data):
        cache = RunCache()
        cfg = StudyConfig("individual", train_cohorts=[[0], [2]], test_ages=[0, 2], **QUICK)
        report = run_study(cfg, small_data, cache)
        assert cache.trained == 4
        assert len(report.rows) == 4
        cell = report.cell("age_token", "E13.5", "E15.5")
        assert cell.n_runs == 2 and 0.0 <= cell.mean_dice <= 1.0
        again = run_study(cfg, small_data, cache)
        assert cache.trained == 4
        assert [r.runs for r in again.rows] == [r.runs for r in report.rows]

    def test_cache_ignores_display_name(self, small_data):
        cache = RunCache()
        base = dict(train_cohorts=[[0, 2]], test_ages=[0], **QUICK)
        run_study(StudyConfig("joint", **base), small_data, cache)
        run_study(StudyConfig("ablation", variants=[{"name": "token+spatial"}], **base), small_data, cache)
        assert cache.trained == 2

    def test_unseen_test_age_uses_nearest_token(self, small_data):
        cfg = StudyConfig("cross_mutation", train_cohorts=[[0, 2]], test_ages=[1], **QUICK)
        report = run_study(cfg, small_data)
        assert report.rows[0].test_age == "E14.5" and report.rows[0].n_runs == 2

    def test_missing_cohort(self, small_data):
        with pytest.raises(StudyError, match="no training volumes"):
            run_study(StudyConfig("individual", train_cohorts=[[1]], test_ages=[0], **QUICK), small_data)
        with pytest.raises(StudyError, match="no test volumes"):
            run_study(StudyConfig("individual", train_cohorts=[[0]], test_ages=[3], **QUICK), small_data)

    def test_failed_cell_is_reported(self, small_data, monkeypatch):
        real = studies._train_run

        def flaky(cfg, variant, *args):
            if variant.conditioning_mode == "none":
                raise FloatingPointError("diverged")
            return real(cfg, variant, *args)

        monkeypatch.setattr(studies, "_train_run", flaky)
        cfg = StudyConfig("ablation", variants=[{"name": "none", "conditioning_mode": "none"}, {"name": "token"}],
                          train_cohorts=[[0]], test_ages=[0], **QUICK)
        report = run_study(cfg, small_data)
        assert report.cell("none", "E13.5", "E13.5").status == "failed"
        assert report.cell("token", "E13.5", "E13.5").status == "ok"

    def test_data_scaling_series(self, small_data, tmp_path):
        cfg = StudyConfig("data_scaling", train_cohorts=[[0, 2]], test_ages=[0, 2], volume_counts=[1], **QUICK)
        report = run_study(cfg, small_data)
        assert [row.train_cohort for row in report.rows] == ["E13.5+E15.5/n=1"] * 2
        paths = emit_report(report, tmp_path)
        rows = list(csv.reader(paths[1].open()))
        assert rows[0] == ["variant", "train_volumes", "mean_dice"] and rows[1][1] == "1"


class TestEmit:
    def test_csv_layout(self, tmp_path):
        report = StudyReport("grid", "individual", [
            ReportRow("age_token", "E13.5", "E13.5", [0.8, 0.6]),
            ReportRow("none", "E13.5", "E13.5", [], status="failed"),
        ])
        (path,) = emit_report(report, tmp_path / "out")
        lines = path.read_text().splitlines()
        assert lines[0] == "variant,train_cohort,test_age,mean_dice,sd,n_runs,status"
        assert lines[1] == f"age_token,E13.5,E13.5,0.700000,{np.std([0.8, 0.6], ddof=1):.6f},2,ok"
        assert lines[2] == "none,E13.5,E13.5,,,0,failed"

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError, match="cannot write report"):
            emit_report(StudyReport("x", "joint", []), blocker / "sub")
