import dataclasses
import io

import numpy as np
import pytest
import torch

from pathfusion.checkpoint import load_checkpoint, save_checkpoint
from pathfusion.config import RunConfig, SynthConfig
from pathfusion.ingest import AccessAudit
from pathfusion.synth import generate_cohort
from pathfusion import pipeline


@pytest.fixture(scope="module")
def cohort24():
    return generate_cohort(SynthConfig(n_cases=24, seed=9))


@pytest.fixture(scope="module")
def small_cfg():
    return RunConfig(task="diagnosis", epochs=2, batch_size=4, embed_dim=32, n_heads=2, seed=11)


@pytest.fixture(scope="module")
def trained(cohort24, small_cfg):
    teacher = pipeline.train_teacher(cohort24, small_cfg)
    warm = pipeline.warmup_student(cohort24, small_cfg)
    distilled = pipeline.distill_student(cohort24, teacher, warm, small_cfg)
    return teacher, warm, distilled


class TestFolds:
    def test_split_structure(self):
        ids = [f"c{i}" for i in range(20)]
        folds = pipeline.make_folds(ids, n_folds=3, seed=0, val_fraction=0.25)
        assert len(folds) == 3
        all_test = [cid for f in folds for cid in f.test_ids]
        assert sorted(all_test) == sorted(ids)
        for fold in folds:
            assert not set(fold.test_ids) & set(fold.train_ids)
            assert not set(fold.test_ids) & set(fold.val_ids)
            assert not set(fold.train_ids) & set(fold.val_ids)
            assert sorted(fold.train_ids + fold.val_ids + fold.test_ids) == sorted(ids)

    def test_deterministic(self):
        ids = [f"c{i}" for i in range(17)]
        a = pipeline.make_folds(ids, 3, seed=5, val_fraction=0.25)
        b = pipeline.make_folds(ids, 3, seed=5, val_fraction=0.25)
        assert [f.train_ids for f in a] == [f.train_ids for f in b]

    def test_too_many_folds_rejected(self):
        with pytest.raises(pipeline.PipelineError):
            pipeline.make_folds(["a", "b"], 3, 0, 0.25)


class TestPreprocessing:
    def test_fit_uses_training_cases_only(self, cohort24, small_cfg):
        audit = AccessAudit()
        folds = pipeline.make_folds([c.case_id for c in cohort24.cases], 3, small_cfg.seed, 0.25)
        split = folds[0]
        prep = pipeline.fit_preprocessing(cohort24, split.train_ids, small_cfg, audit)
        assert len(prep["hvg_idx"]) == int(np.ceil(0.30 * 128))
        assert prep["tumor_genes"] and prep["tme_genes"]
        for event in ("fit_hvg", "fit_zscore"):
            fitted = audit.case_ids(event)
            assert fitted == set(split.train_ids)
            assert not fitted & set(split.test_ids)

    def test_hvg_subsets_respect_partition(self, cohort24, small_cfg):
        audit = AccessAudit()
        split = pipeline.make_folds([c.case_id for c in cohort24.cases], 3, 0, 0.25)[0]
        prep = pipeline.fit_preprocessing(cohort24, split.train_ids, small_cfg, audit)
        tumor_set = set(int(i) for i in cohort24.tumor_idx)
        assert all(g in tumor_set for g in prep["tumor_genes"])
        assert not any(g in tumor_set for g in prep["tme_genes"])


class TestTeacherTraining:
    def test_loss_decreases_on_fixed_seed(self):
        cohort16 = generate_cohort(SynthConfig(n_cases=16, seed=3))
        cfg = RunConfig(task="diagnosis", epochs=1, batch_size=2, embed_dim=32, n_heads=2, seed=1, lr=3e-3)
        ckpt = pipeline.train_teacher(cohort16, cfg)
        losses = ckpt.train_log["loss"]
        assert len(losses) >= 2
        assert losses[-1] < losses[0]

    def test_deterministic_checkpoints(self, cohort24, small_cfg, tmp_path):
        a = pipeline.train_teacher(cohort24, small_cfg)
        b = pipeline.train_teacher(cohort24, small_cfg)
        pa = save_checkpoint(a, tmp_path / "a.ckpt")
        pb = save_checkpoint(b, tmp_path / "b.ckpt")
        assert pa.read_bytes() == pb.read_bytes()

    def test_huge_dev_lambda_shrinks_diagonal_variance(self):
        cohort16 = generate_cohort(SynthConfig(n_cases=16, seed=3))
        cfg = RunConfig(
            task="diagnosis", epochs=3, batch_size=4, embed_dim=32, n_heads=2, seed=5, dev_lambda=1e6
        )
        ckpt = pipeline.train_teacher(cohort16, cfg)
        var = ckpt.train_log["diag_var"]
        assert var[-1] < var[0]

    def test_nan_loss_aborts_with_batch_ids(self):
        cohort16 = generate_cohort(SynthConfig(n_cases=16, seed=3))
        cfg = RunConfig(task="diagnosis", epochs=4, batch_size=2, embed_dim=32, n_heads=2, seed=5, lr=1e12)
        with pytest.raises(pipeline.PipelineError, match="case"):
            pipeline.train_teacher(cohort16, cfg)

    def test_survival_task_trains(self, cohort24):
        cfg = RunConfig(task="survival", epochs=1, batch_size=4, embed_dim=32, n_heads=2, seed=2)
        ckpt = pipeline.train_teacher(cohort24, cfg)
        report = pipeline.evaluate(ckpt, cohort24, "multimodal")
        assert "cindex" in report.values


class TestStudentStages:
    def test_warmup_deterministic(self, cohort24, small_cfg, tmp_path):
        a = pipeline.warmup_student(cohort24, small_cfg)
        b = pipeline.warmup_student(cohort24, small_cfg)
        assert save_checkpoint(a, tmp_path / "a.ckpt").read_bytes() == save_checkpoint(
            b, tmp_path / "b.ckpt"
        ).read_bytes()

    def test_zero_weight_distill_equals_warmup_continuation(self, cohort24, small_cfg, trained):
        teacher, warm, _ = trained
        zero = dataclasses.replace(small_cfg, w_kl=0.0, w_mse=0.0)
        distilled = pipeline.distill_student(cohort24, teacher, warm, zero)
        continued = pipeline.warmup_student(cohort24, small_cfg, init_params=warm.params)
        assert distilled.train_log["loss"] == continued.train_log["loss"]
        assert distilled.train_log["task"] == continued.train_log["task"]

    def test_distillation_reduces_representation_mse(self, cohort24, small_cfg, trained):
        teacher, warm, _ = trained
        cfg = dataclasses.replace(small_cfg, epochs=3)
        distilled = pipeline.distill_student(cohort24, teacher, warm, cfg)
        mse = distilled.train_log["mse"]
        assert mse[-1] < mse[0]

    def test_mismatched_hvg_indices_rejected(self, cohort24, small_cfg, trained):
        _, warm, _ = trained
        other = dataclasses.replace(small_cfg, hvg_fraction=0.5)
        bad_teacher = pipeline.train_teacher(cohort24, other)
        with pytest.raises(pipeline.PipelineError, match="HVG"):
            pipeline.distill_student(cohort24, bad_teacher, warm, small_cfg)

    def test_stage_validation(self, cohort24, small_cfg, trained):
        teacher, warm, _ = trained
        with pytest.raises(pipeline.PipelineError):
            pipeline.distill_student(cohort24, warm, warm, small_cfg)
        with pytest.raises(pipeline.PipelineError):
            pipeline.distill_student(cohort24, teacher, teacher, small_cfg)


class TestEvaluate:
    def test_setting_stage_matrix(self, cohort24, trained):
        teacher, warm, distilled = trained
        assert pipeline.evaluate(teacher, cohort24, "multimodal").setting == "multimodal"
        assert pipeline.evaluate(warm, cohort24, "unimodal").setting == "unimodal"
        assert pipeline.evaluate(distilled, cohort24, "missing_modality").n_cases == 8
        assert pipeline.evaluate(distilled, cohort24, "unimodal").task == "diagnosis"
        with pytest.raises(pipeline.PipelineError):
            pipeline.evaluate(warm, cohort24, "multimodal")
        with pytest.raises(pipeline.PipelineError):
            pipeline.evaluate(teacher, cohort24, "unimodal")
        with pytest.raises(pipeline.PipelineError):
            pipeline.evaluate(warm, cohort24, "missing_modality")
        with pytest.raises(pipeline.PipelineError):
            pipeline.evaluate(teacher, cohort24, "bogus")

    def test_evaluates_held_out_fold_only(self, cohort24, trained):
        teacher, _, _ = trained
        report = pipeline.evaluate(teacher, cohort24, "multimodal")
        assert report.n_cases == len(teacher.preprocessing["test_ids"])

    def test_checkpoint_round_trip_preserves_metrics(self, cohort24, trained, tmp_path):
        teacher, _, _ = trained
        before = pipeline.evaluate(teacher, cohort24, "multimodal").values
        loaded = load_checkpoint(save_checkpoint(teacher, tmp_path / "t.ckpt"))
        after = pipeline.evaluate(loaded, cohort24, "multimodal").values
        assert before == after


class TestClusterExport:
    def test_rows_and_summary(self, cohort24, trained):
        _, _, distilled = trained
        rows, summary = pipeline.cluster_export(distilled, cohort24)
        test_ids = set(distilled.preprocessing["test_ids"])
        assert {r["case_id"] for r in rows} == test_ids
        per_case = 8 * 8
        assert len(rows) == per_case * len(test_ids)
        assert all(r["label"] in ("T", "E") for r in rows)
        assert all(0 <= r["cluster"] < 8 for r in rows)
        assert set(summary["dice"]) == test_ids
        assert 0.0 <= summary["mean_dice"] <= 1.0

    def test_requires_distilled_checkpoint(self, cohort24, trained):
        teacher, warm, _ = trained
        for ckpt in (teacher, warm):
            with pytest.raises(pipeline.PipelineError):
                pipeline.cluster_export(ckpt, cohort24)


class TestGradcheck:
    def test_unknown_module_rejected(self):
        with pytest.raises(pipeline.PipelineError):
            pipeline.gradcheck("nope")

    def test_single_module_selector(self):
        result = pipeline.gradcheck("ce")
        assert set(result) == {"ce"}
        assert result["ce"] < 1e-4
