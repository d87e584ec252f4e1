import csv

import pytest

from argan.cli import main
from argan.data import load_manifest


def overrides(work_dir, extra=()):
    base = [
        f"paths.work_dir={work_dir}",
        "data.toy_side=32",
        "data.toy_train_counts=plain_healthy:3,striped_healthy:3,plain_diseased:2,striped_diseased:2",
        "data.toy_test_per_class=2",
        "data.target_per_class=3",
        "gan.epochs=1",
        "gan.decay_start_epoch=1",
        "gan.image_size=32",
        "gan.gen_blocks=1",
        "gan.gen_width=4",
        "gan.pool_size=4",
        "gan.checkpoint_every=1",
        "aug.out_side=32",
        "aug.elastic_grid=4",
        "clf.epochs=1",
        "clf.batch_size=4",
    ]
    return base + list(extra)


def run(work_dir, *args, extra=()):
    argv = []
    for item in overrides(work_dir, extra):
        argv += ["-o", item]
    return main(argv + list(args))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full toy pipeline shared by the assertion tests below."""
    work = tmp_path_factory.mktemp("pipeline")
    for stage in (
        ["prepare"],
        ["train-gan"],
        ["augment", "classic"],
        ["augment", "synthetic"],
        ["train-classifier", "X"],
        ["train-classifier", "X_plus_XC"],
        ["evaluate", "X"],
        ["evaluate", "X_plus_XC"],
        ["report"],
    ):
        code = run(work, *stage)
        assert code == 0, f"stage {stage} exited {code}"
    return work


class TestPipelineArtifacts:
    def test_prepare_outputs(self, pipeline):
        x = load_manifest(pipeline / "manifests" / "X.csv")
        assert len(x.records) == 3 + 3 + 2 + 2 + 4 * 2
        assert (pipeline / "dist_X.csv").is_file()
        dom_a = load_manifest(pipeline / "manifests" / "domain_A.csv")
        dom_b = load_manifest(pipeline / "manifests" / "domain_B.csv")
        assert len(dom_a.records) == 6 and len(dom_b.records) == 4

    def test_gan_artifacts(self, pipeline):
        assert (pipeline / "gan" / "latest.pt").is_file()
        rows = list(csv.DictReader(open(pipeline / "gan" / "loss_history.csv")))
        assert len(rows) == 6  # 1 epoch x max(|A|,|B|) steps

    def test_classic_instance_balanced(self, pipeline):
        inst = load_manifest(pipeline / "manifests" / "X_plus_XC.csv", instance_tag="X_plus_XC")
        train = [r for r in inst.records if r.split == "train"]
        counts = {}
        for r in train:
            counts[r.class_label] = counts.get(r.class_label, 0) + 1
        assert counts == {label: 3 for label in inst.label_set}
        added = [r for r in train if r.origin != "real"]
        assert added and all(r.origin == "classic_aug" for r in added)

    def test_synthetic_instance_provenance(self, pipeline):
        inst = load_manifest(pipeline / "manifests" / "X_plus_XS.csv", instance_tag="X_plus_XS")
        added = [r for r in inst.records if r.origin != "real"]
        assert added and all(r.origin == "synthetic" for r in added)
        diseased = [r for r in added if r.class_label.endswith("diseased")]
        assert len(diseased) == len(added) == 2

    def test_frozen_majority_classes_identical_across_instances(self, pipeline):
        base = load_manifest(pipeline / "manifests" / "X.csv", instance_tag="X")
        for tag in ("X_plus_XC", "X_plus_XS"):
            inst = load_manifest(pipeline / "manifests" / f"{tag}.csv", instance_tag=tag)
            for label in ("plain_healthy", "striped_healthy"):
                base_paths = {r.path for r in base.records if r.class_label == label}
                inst_paths = {r.path for r in inst.records if r.class_label == label}
                assert base_paths == inst_paths

    def test_classifier_artifacts(self, pipeline):
        for tag in ("X", "X_plus_XC"):
            assert (pipeline / f"clf_{tag}" / "model.pt").is_file()
            history = (pipeline / f"clf_{tag}" / "history.csv").read_text().splitlines()
            assert history[0] == "epoch,train_loss,train_accuracy"
            assert len(history) == 2  # header + 1 epoch

    def test_eval_artifacts(self, pipeline):
        lines = (pipeline / "eval" / "X.csv").read_text().splitlines()
        assert lines[0] == "label,tp,fp,precision"
        assert lines[-1].startswith("total_accuracy")
        assert (pipeline / "eval" / "X_confusion.csv").is_file()

    def test_report_bundle(self, pipeline):
        report = pipeline / "report"
        assert (report / "precision_accuracy.csv").is_file()
        assert (report / "tp_change.csv").is_file()
        assert (report / "generative_metrics.csv").is_file()
        reference = (report / "reference_values.csv").read_text()
        assert "80.9 -> 86.1 (+5.2)" in reference

    def test_report_headline_columns(self, pipeline):
        header = (
            (pipeline / "report" / "precision_accuracy.csv").read_text().splitlines()[0]
        )
        assert header.split(",")[0] == "label"
        assert "precision_X" in header


class TestPrepareIdempotent:
    def test_identical_files_on_rerun(self, tmp_path):
        work = tmp_path / "idem"
        assert run(work, "prepare") == 0
        first = (work / "manifests" / "X.csv").read_bytes()
        assert run(work, "prepare") == 0
        assert (work / "manifests" / "X.csv").read_bytes() == first


class TestLamZero:
    def test_arl_column_all_zero(self, tmp_path):
        work = tmp_path / "lam0"
        assert run(work, "prepare") == 0
        assert run(work, "train-gan", extra=["gan.lam=0"]) == 0
        rows = list(csv.DictReader(open(work / "gan" / "loss_history.csv")))
        assert rows and all(float(r["arl"]) == 0.0 for r in rows)


class TestExitCodes:
    def test_unknown_config_key_is_validation_error(self, tmp_path):
        assert run(tmp_path, "prepare", extra=["gan.lamda=1"]) == 2

    def test_missing_manifest_setting_is_validation_error(self, tmp_path):
        assert run(tmp_path, "prepare", extra=["data.toy=false"]) == 2

    def test_missing_data_root_is_runtime_error(self, tmp_path):
        extra = ["data.toy=false", "data.manifest=x.csv",
                 f"paths.data_root={tmp_path}/nope"]
        assert run(tmp_path, "prepare", extra=extra) == 1

    def test_synthetic_without_checkpoint_is_runtime_error(self, tmp_path):
        work = tmp_path / "nockpt"
        assert run(work, "prepare") == 0
        assert run(work, "augment", "synthetic") == 1

    def test_report_without_eval_is_runtime_error(self, tmp_path):
        work = tmp_path / "noeval"
        assert run(work, "prepare") == 0
        assert run(work, "report") == 1

    def test_train_gan_without_prepare_is_runtime_error(self, tmp_path):
        assert run(tmp_path / "fresh", "train-gan") == 1
