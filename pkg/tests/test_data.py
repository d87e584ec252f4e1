import hashlib
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from argan import data
from argan.data import (
    DatasetManifest,
    ImageRecord,
    ManifestError,
    balance_plan,
    build_instance,
    class_distribution,
    load_batch,
    load_manifest,
    make_toy_domains,
    save_manifest,
)

HEADER = "path,label,domain,split,origin"

FIG3_CLASSES = [
    "nutritional_excess",
    "powdery_mildew",
    "gray_mold",
    "plague",
    "canker",
    "whitefly",
    "leaf_mold",
    "low_temperature",
    "miner",
]


def write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestLoadManifest:
    def test_empty_manifest(self, tmp_path):
        m = load_manifest(write(tmp_path / "m.csv", [HEADER]))
        assert len(m.records) == 0
        assert m.label_set == []

    def test_three_rows(self, tmp_path):
        m = load_manifest(
            write(
                tmp_path / "m.csv",
                [HEADER, "p1,a,A,train,real", "p2,a,A,train,real", "p3,b,B,train,real"],
            )
        )
        assert m.label_set == ["a", "b"]
        assert class_distribution(m) == {"a": 2, "b": 1}

    def test_nine_disease_classes(self, tmp_path):
        lines = [HEADER] + [f"p{i},{c},A,train,real" for i, c in enumerate(FIG3_CLASSES)]
        m = load_manifest(write(tmp_path / "m.csv", lines))
        assert len(m.label_set) == 9

    def test_declared_label_order(self, tmp_path):
        lines = ["# labels: b;a", HEADER, "p1,a,A,train,real"]
        m = load_manifest(write(tmp_path / "m.csv", lines))
        assert m.label_set == ["b", "a"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.csv")

    def test_malformed_row_reports_line_number(self, tmp_path):
        path = write(tmp_path / "m.csv", [HEADER, "p1,a,A,train"])
        with pytest.raises(ManifestError, match=":2"):
            load_manifest(path)

    def test_unknown_domain_token(self, tmp_path):
        path = write(tmp_path / "m.csv", [HEADER, "p1,a,Q,train,real"])
        with pytest.raises(ManifestError, match="domain"):
            load_manifest(path)

    def test_roundtrip(self, tmp_path):
        m = DatasetManifest(
            [ImageRecord("p1", "a"), ImageRecord("p2", "b", domain="B", split="test")],
            ["a", "b"],
        )
        save_manifest(m, tmp_path / "out.csv")
        back = load_manifest(tmp_path / "out.csv")
        assert back.records == m.records
        assert back.label_set == m.label_set


class TestClassDistribution:
    def test_empty(self):
        m = DatasetManifest([], ["a"])
        assert class_distribution(m) == {"a": 0}

    def test_counting(self):
        m = DatasetManifest(
            [ImageRecord("p1", "a"), ImageRecord("p2", "a"), ImageRecord("p3", "b")],
            ["a", "b"],
        )
        assert class_distribution(m) == {"a": 2, "b": 1}

    def test_four_classes_against_enumeration_oracle(self):
        sizes = {"c1": 100, "c2": 50, "c3": 10, "c4": 5}
        records = [
            ImageRecord(f"{label}_{i}", label)
            for label, n in sizes.items()
            for i in range(n)
        ]
        m = DatasetManifest(records, list(sizes))
        oracle = Counter(r.class_label for r in records)
        assert class_distribution(m) == dict(oracle) == sizes


class TestBalancePlan:
    def test_already_balanced(self):
        assert balance_plan({"a": 10, "b": 10}, 10, set()) == {"a": 0, "b": 0}

    def test_arithmetic(self):
        assert balance_plan({"a": 10, "b": 4}, 10, set()) == {"a": 0, "b": 6}

    def test_frozen_class_untouched(self):
        assert balance_plan({"a": 100, "b": 4}, 10, {"a"}) == {"a": 0, "b": 6}

    def test_unknown_frozen_class(self):
        with pytest.raises(ValueError, match="frozen"):
            balance_plan({"a": 1}, 5, {"zz"})

    def test_over_target_clamped_to_zero(self):
        assert balance_plan({"a": 20}, 10, set()) == {"a": 0}


class TestBuildInstance:
    def base(self):
        return DatasetManifest(
            [ImageRecord(f"p{i}", "a" if i < 3 else "b") for i in range(5)], ["a", "b"], "X"
        )

    def test_identity(self):
        base = self.base()
        out = build_instance(base, [], "X_plus_XS")
        assert out.records == base.records
        assert out.instance_tag == "X_plus_XS"
        assert base.instance_tag == "X"

    def test_union_counts(self):
        base = self.base()
        adds = [ImageRecord(f"s{i}", "b", origin="synthetic") for i in range(3)]
        out = build_instance(base, adds, "X_plus_XS")
        assert len(out.records) == 8
        assert class_distribution(out)["b"] == class_distribution(base)["b"] + 3

    def test_frozen_class_counts_equal_across_instances(self):
        base = DatasetManifest(
            [ImageRecord("p1", "leaf_mold"), ImageRecord("p2", "miner")],
            ["leaf_mold", "miner"],
            "X",
        )
        adds = [ImageRecord("s1", "miner", origin="classic_aug")]
        out = build_instance(base, adds, "X_plus_XC")
        assert class_distribution(out)["leaf_mold"] == class_distribution(base)["leaf_mold"]

    def test_real_origin_addition_rejected(self):
        with pytest.raises(ManifestError, match="origin"):
            build_instance(self.base(), [ImageRecord("s1", "b", origin="real")], "X_plus_XS")

    def test_label_outside_base_rejected(self):
        with pytest.raises(ManifestError, match="label"):
            build_instance(self.base(), [ImageRecord("s1", "z", origin="synthetic")], "custom")

    @given(
        base_labels=st.lists(st.sampled_from("abc"), max_size=20),
        add_labels=st.lists(st.sampled_from("abc"), max_size=20),
    )
    @settings(max_examples=50, deadline=None)
    def test_distribution_is_additive(self, base_labels, add_labels):
        base = DatasetManifest(
            [ImageRecord(f"p{i}", l) for i, l in enumerate(base_labels)], list("abc")
        )
        adds = [ImageRecord(f"s{i}", l, origin="synthetic") for i, l in enumerate(add_labels)]
        out = build_instance(base, adds, "custom")
        dist_base = class_distribution(base)
        dist_out = class_distribution(out)
        for label in "abc":
            assert dist_out[label] == dist_base[label] + add_labels.count(label)
        assert sum(dist_out.values()) == len(out.records)


def file_hashes(manifest):
    return [hashlib.sha256(Path(r.path).read_bytes()).hexdigest() for r in manifest.records]


class TestToyDomains:
    def test_shape_contract(self, tmp_path):
        ma, mb = make_toy_domains(1, 4, 64, tmp_path)
        assert len(ma.records) == len(mb.records) == 4
        batch = load_batch(ma.records, 64)
        assert batch.shape == (4, 3, 64, 64)
        assert batch.min() >= -1.0 and batch.max() <= 1.0

    def test_determinism(self, tmp_path):
        ma1, _ = make_toy_domains(1, 2, 32, tmp_path / "r1")
        ma2, _ = make_toy_domains(1, 2, 32, tmp_path / "r2")
        assert file_hashes(ma1) == file_hashes(ma2)

    def test_seed_changes_images(self, tmp_path):
        ma1, _ = make_toy_domains(1, 2, 32, tmp_path / "s1")
        ma2, _ = make_toy_domains(2, 2, 32, tmp_path / "s2")
        assert file_hashes(ma1) != file_hashes(ma2)

    def test_side_must_be_multiple_of_four(self, tmp_path):
        with pytest.raises(ValueError):
            make_toy_domains(1, 1, 30, tmp_path)


class TestLoadBatch:
    def save(self, path, arr):
        Image.fromarray(arr).save(path)
        return ImageRecord(str(path), "a")

    def test_identity_resize_exact_remap(self, tmp_path):
        arr = (np.random.default_rng(0).random((16, 16, 3)) * 255).astype(np.uint8)
        rec = self.save(tmp_path / "x.png", arr)
        out = load_batch([rec], 16)
        expect = torch.from_numpy(arr.astype(np.float32).transpose(2, 0, 1)) / 255.0 * 2 - 1
        assert torch.allclose(out[0], expect, atol=1e-6)

    def test_constant_128_remap(self, tmp_path):
        rec = self.save(tmp_path / "c.png", np.full((8, 8, 3), 128, dtype=np.uint8))
        out = load_batch([rec], 8)
        assert torch.allclose(out, torch.full_like(out, 2 * 128 / 255 - 1), atol=1e-6)

    def test_downsize_shape(self, tmp_path):
        arr = (np.random.default_rng(1).random((64, 64, 3)) * 255).astype(np.uint8)
        rec = self.save(tmp_path / "big.png", arr)
        assert load_batch([rec], 32).shape == (1, 3, 32, 32)

    def test_range_and_finiteness(self, tmp_path):
        arr = (np.random.default_rng(2).random((48, 48, 3)) * 255).astype(np.uint8)
        rec = self.save(tmp_path / "r.png", arr)
        out = load_batch([rec], 32)
        assert torch.isfinite(out).all()
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_unreadable_file(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(IOError):
            load_batch([ImageRecord(str(bad), "a")], 8)
