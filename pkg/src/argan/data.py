"""Dataset manifests, class accounting, balancing plans and toy data.

A manifest is a CSV-ish text file, one record per line:

    # labels: healthy;diseased        (optional, fixes label order)
    path,label,domain,split,origin
    imgs/0001.png,healthy,A,train,real

Domains are the two translation sides (A, B); origin tracks whether a record
is real, classically augmented or synthesized by the translator.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

DOMAINS = ("A", "B")
SPLITS = ("train", "test")
ORIGINS = ("real", "classic_aug", "synthetic")
INSTANCE_TAGS = ("X", "X_plus_XC", "X_plus_XS", "custom")

MANIFEST_HEADER = "path,label,domain,split,origin"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    path: str
    class_label: str
    domain: str = "A"
    split: str = "train"
    origin: str = "real"

    def __post_init__(self):
        if not self.path:
            raise ManifestError("record path must be non-empty")
        if self.domain not in DOMAINS:
            raise ManifestError(f"unknown domain {self.domain!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        if self.origin not in ORIGINS:
            raise ManifestError(f"unknown origin {self.origin!r}")


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    label_set: list[str]
    instance_tag: str = "custom"

    def __post_init__(self):
        if self.instance_tag not in INSTANCE_TAGS:
            raise ManifestError(f"unknown instance tag {self.instance_tag!r}")
        known = set(self.label_set)
        for r in self.records:
            if r.class_label not in known:
                raise ManifestError(
                    f"record label {r.class_label!r} not in label set {self.label_set}"
                )
        if self.instance_tag == "X":
            for r in self.records:
                if r.origin != "real":
                    raise ManifestError("instance X may only contain real records")

    def __len__(self):
        return len(self.records)

    def subset(self, split: str | None = None, domain: str | None = None) -> list[ImageRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if domain is not None:
            out = [r for r in out if r.domain == domain]
        return out


ClassDistribution = dict[str, int]


def load_manifest(path: str | os.PathLike, instance_tag: str = "custom") -> DatasetManifest:
    """Parse a manifest file. Malformed rows are reported with their line number."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest file not found: {path}")
    declared_labels: list[str] | None = None
    records: list[ImageRecord] = []
    header_seen = False
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("labels:"):
                    labels = body[len("labels:"):].strip()
                    declared_labels = [l for l in labels.split(";") if l]
                continue
            if not header_seen:
                if line != MANIFEST_HEADER:
                    raise ManifestError(
                        f"{path}:{lineno}: expected header {MANIFEST_HEADER!r}, got {line!r}"
                    )
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ManifestError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            try:
                records.append(ImageRecord(*[p.strip() for p in parts]))
            except ManifestError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from e
    if not header_seen:
        raise ManifestError(f"{path}: missing header line {MANIFEST_HEADER!r}")
    label_set = declared_labels if declared_labels is not None else sorted(
        {r.class_label for r in records}
    )
    return DatasetManifest(records=records, label_set=list(label_set), instance_tag=instance_tag)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# labels: {';'.join(manifest.label_set)}\n")
        f.write(MANIFEST_HEADER + "\n")
        for r in manifest.records:
            f.write(f"{r.path},{r.class_label},{r.domain},{r.split},{r.origin}\n")


def class_distribution(manifest: DatasetManifest) -> ClassDistribution:
    counts = {label: 0 for label in manifest.label_set}
    for r in manifest.records:
        counts[r.class_label] += 1
    return counts


def balance_plan(
    dist: ClassDistribution, target_per_class: int, frozen: set[str] = frozenset()
) -> dict[str, int]:
    """How many augmented images each class needs to reach ``target_per_class``.

    Frozen classes are left untouched regardless of their count; classes
    already above target get 0.
    """
    if target_per_class <= 0:
        raise ValueError("target_per_class must be positive")
    unknown = set(frozen) - set(dist)
    if unknown:
        raise ValueError(f"frozen classes not in distribution: {sorted(unknown)}")
    plan = {}
    for label, count in dist.items():
        plan[label] = 0 if label in frozen else max(0, target_per_class - count)
    return plan


def build_instance(
    base: DatasetManifest, additions: Sequence[ImageRecord], tag: str
) -> DatasetManifest:
    """Union of the base records and augmented additions under a new tag."""
    known = set(base.label_set)
    for r in additions:
        if r.origin == "real":
            raise ManifestError("additions must carry a non-real origin")
        if r.class_label not in known:
            raise ManifestError(f"addition label {r.class_label!r} not in base label set")
    return DatasetManifest(
        records=list(base.records) + list(additions),
        label_set=list(base.label_set),
        instance_tag=tag,
    )


# ---------------------------------------------------------------------------
# procedural toy data
# ---------------------------------------------------------------------------

TOY_CLASSES = ("plain_healthy", "striped_healthy", "plain_diseased", "striped_diseased")


def _toy_image(rng: np.random.Generator, side: int, striped: bool, diseased: bool) -> np.ndarray:
    """One toy sample: a textured disk, optionally overlaid with speckle lesions."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    u, v = xx / side, yy / side
    base = np.empty((side, side, 3), dtype=np.float64)
    # soft background gradient with per-image colour jitter
    c0 = rng.uniform(0.15, 0.35, size=3)
    c1 = rng.uniform(0.45, 0.65, size=3)
    for ch in range(3):
        base[..., ch] = c0[ch] + (c1[ch] - c0[ch]) * v
    if striped:
        freq = rng.uniform(6.0, 9.0)
        phase = rng.uniform(0, 2 * np.pi)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + phase)
        base[..., 1] = 0.55 * base[..., 1] + 0.45 * stripes
    # foreground disk (greenish, leaf-like)
    cx = 0.5 + rng.uniform(-0.08, 0.08)
    cy = 0.5 + rng.uniform(-0.08, 0.08)
    radius = side * rng.uniform(0.28, 0.36)
    dist2 = (xx - cx * side) ** 2 + (yy - cy * side) ** 2
    inside = dist2 <= radius**2
    disk = np.array([0.20, 0.62, 0.25]) + rng.uniform(-0.05, 0.05, size=3)
    tex = 0.06 * np.sin(2 * np.pi * 3.0 * v + rng.uniform(0, 2 * np.pi))
    for ch in range(3):
        base[..., ch] = np.where(inside, disk[ch] + tex, base[..., ch])
    if striped:
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * 5.0 * u)
        base[..., 0] = np.where(inside, base[..., 0] * (0.7 + 0.3 * stripes), base[..., 0])
    if diseased:
        # global chlorotic tint: warmer reds, suppressed blues
        base[..., 0] = 0.70 * base[..., 0] + 0.30
        base[..., 2] *= 0.45
        n_spots = rng.integers(12, 24)
        spot_r = max(1.5, side / 28.0)
        for _ in range(n_spots):
            ang = rng.uniform(0, 2 * np.pi)
            rad = radius * np.sqrt(rng.uniform(0, 0.9))
            sx = cx * side + rad * np.cos(ang)
            sy = cy * side + rad * np.sin(ang)
            d2 = (xx - sx) ** 2 + (yy - sy) ** 2
            spot = d2 <= spot_r**2
            colour = np.array([0.95, 0.9, 0.2]) + rng.uniform(-0.05, 0.05, size=3)
            for ch in range(3):
                base[..., ch] = np.where(spot & inside, colour[ch], base[..., ch])
    return (np.clip(base, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def _write_toy(rng, side, striped, diseased, path: Path) -> None:
    Image.fromarray(_toy_image(rng, side, striped, diseased)).save(path)


def make_toy_domains(
    seed: int, n_per_domain: int, side: int, out_dir: str | os.PathLike
) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic healthy (A) / diseased (B) toy domains written as PNGs."""
    if side % 4 != 0:
        raise ValueError("side must be a multiple of 4")
    if n_per_domain <= 0:
        raise ValueError("n_per_domain must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = []
    for domain, diseased, label in (("A", False, "healthy"), ("B", True, "diseased")):
        records = []
        for i in range(n_per_domain):
            rng = np.random.default_rng(np.random.SeedSequence([seed, ord(domain), i]))
            striped = i % 2 == 1
            path = out_dir / f"toy_{domain}_{i:04d}.png"
            _write_toy(rng, side, striped, diseased, path)
            records.append(ImageRecord(str(path), label, domain=domain, split="train"))
        manifests.append(DatasetManifest(records, [label], instance_tag="custom"))
    return manifests[0], manifests[1]


def make_toy_classification(
    seed: int,
    counts: Mapping[str, int],
    side: int,
    out_dir: str | os.PathLike,
    split: str = "train",
) -> DatasetManifest:
    """Toy 4-class manifest (texture x health) with the given per-class counts."""
    if side % 4 != 0:
        raise ValueError("side must be a multiple of 4")
    unknown = set(counts) - set(TOY_CLASSES)
    if unknown:
        raise ValueError(f"unknown toy classes: {sorted(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for label in TOY_CLASSES:
        striped = label.startswith("striped")
        diseased = label.endswith("diseased")
        domain = "B" if diseased else "A"
        for i in range(counts.get(label, 0)):
            label_key = zlib.crc32(label.encode()) & 0x7FFFFFFF
            rng = np.random.default_rng(np.random.SeedSequence([seed, label_key, i]))
            path = out_dir / f"toy_{label}_{split}_{i:04d}.png"
            _write_toy(rng, side, striped, diseased, path)
            records.append(ImageRecord(str(path), label, domain=domain, split=split))
    return DatasetManifest(records, list(TOY_CLASSES), instance_tag="X")


# ---------------------------------------------------------------------------
# image loading
# ---------------------------------------------------------------------------


def load_batch(records: Sequence[ImageRecord], resize_to: int) -> torch.Tensor:
    """Load records as a (b, 3, s, s) float tensor in [-1, 1], bicubic-resized."""
    if resize_to <= 0:
        raise ValueError("resize_to must be positive")
    arrays = []
    for r in records:
        try:
            img = Image.open(r.path).convert("RGB")
        except Exception as e:
            raise IOError(f"cannot read image {r.path}: {e}") from e
        if img.size != (resize_to, resize_to):
            img = img.resize((resize_to, resize_to), Image.BICUBIC)
        a = np.asarray(img, dtype=np.float32) / 255.0
        arrays.append(a.transpose(2, 0, 1))
    if not arrays:
        return torch.zeros((0, 3, resize_to, resize_to))
    batch = torch.from_numpy(np.stack(arrays))
    return batch * 2.0 - 1.0


def batch_to_images(batch: torch.Tensor) -> list[np.ndarray]:
    """Map network output in [-1, 1] back to HxWx3 uint8 arrays."""
    out = []
    for t in batch.detach().cpu():
        a = ((t.clamp(-1, 1) + 1.0) * 0.5 * 255.0).round().to(torch.uint8)
        out.append(a.numpy().transpose(1, 2, 0))
    return out
