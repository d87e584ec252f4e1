"""Generative-quality metrics: Fréchet distance between embedded feature
distributions, segmentation score arithmetic (per-pixel accuracy, per-class
accuracy, mean class IoU) and an adapter for an external aesthetic scorer.

The default embedding is the package's own feature-extraction network (last
tap, globally average-pooled); an externally computed embedding matrix can be
supplied instead via ``FeatureSet``.
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import linalg

from .networks import FeatureExtractor


@dataclass
class FeatureSet:
    features: np.ndarray  # (n, d)
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass
class SegPair:
    predicted: np.ndarray
    truth: np.ndarray
    n_labels: int

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted)
        self.truth = np.asarray(self.truth)
        if self.predicted.shape != self.truth.shape:
            raise ValueError("predicted/truth shapes differ")
        for name, arr in (("predicted", self.predicted), ("truth", self.truth)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_labels):
                raise ValueError(f"{name} labels out of [0, {self.n_labels})")


def extract_features(
    extractor: FeatureExtractor,
    tap: int,
    images: torch.Tensor,
    batch_size: int = 16,
    source: str = "feature-extractor",
) -> FeatureSet:
    """One d-vector per image: globally average-pooled activation magnitudes
    from the given tap.  Magnitudes (|a| rather than a) are pooled because the
    taps are instance-normalized, so their raw spatial means are ~0 for every
    image and carry no information."""
    n_taps = len(extractor.blocks)
    if not (-n_taps <= tap < n_taps):
        raise IndexError(f"tap {tap} out of range for {n_taps} taps")
    rows = []
    extractor.eval()
    with torch.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            taps = extractor.taps(images[lo : lo + batch_size])
            rows.append(taps[tap].abs().mean(dim=(2, 3)).double().numpy())
    feats = np.concatenate(rows, axis=0) if rows else np.zeros((0, 0))
    return FeatureSet(feats, source=source)


def _mean_cov(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    return mu, np.atleast_2d(cov)


def fid(x: FeatureSet, y: FeatureSet, eig_clip: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of the two feature sets.

    ||mu_x - mu_y||^2 + Tr(Sx + Sy - 2 (Sx Sy)^{1/2}), with the matrix square
    root taken of the symmetrically stabilized product and small negative
    eigenvalues clipped to zero.
    """
    if x.d != y.d:
        raise ValueError(f"feature dimensions differ: {x.d} vs {y.d}")
    if x.n < 2 or y.n < 2:
        raise ValueError("need at least 2 samples per side for covariance")
    mu_x, sig_x = _mean_cov(x.features)
    mu_y, sig_y = _mean_cov(y.features)
    if not (np.all(np.isfinite(sig_x)) and np.all(np.isfinite(sig_y))):
        raise ValueError("non-finite covariance statistics")
    diff = mu_x - mu_y
    # sqrt of sqrt(Sx) Sy sqrt(Sx): symmetric, same eigenvalues as Sx Sy
    sqrt_x = _psd_sqrt(sig_x)
    inner = sqrt_x @ sig_y @ sqrt_x
    eigvals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = np.sqrt(np.clip(eigvals, 0.0, None)).sum()
    value = diff @ diff + np.trace(sig_x) + np.trace(sig_y) - 2.0 * trace_sqrt
    return float(max(value, 0.0))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def seg_scores(pairs: Sequence[SegPair]) -> tuple[float, float, float]:
    """(per-pixel accuracy, per-class accuracy, mean class IoU) over all pairs.

    Per-class accuracy is the one-vs-rest pixel accuracy of each label
    (a pixel counts as correct for label c when ``pred==c`` and ``truth==c``
    agree), averaged over labels present in the truth. IoU averages over
    labels present in either map.
    """
    if not pairs:
        raise ValueError("no segmentation pairs")
    n_labels = pairs[0].n_labels
    if any(p.n_labels != n_labels for p in pairs):
        raise ValueError("inconsistent n_labels across pairs")
    correct = total = 0
    truth_count = np.zeros(n_labels, dtype=np.int64)
    correct_count = np.zeros(n_labels, dtype=np.int64)
    pred_count = np.zeros(n_labels, dtype=np.int64)
    for p in pairs:
        match = p.predicted == p.truth
        correct += int(match.sum())
        total += p.truth.size
        truth_count += np.bincount(p.truth.ravel(), minlength=n_labels)
        pred_count += np.bincount(p.predicted.ravel(), minlength=n_labels)
        correct_count += np.bincount(p.truth.ravel()[match.ravel()], minlength=n_labels)
    ppa = correct / total
    present_truth = truth_count > 0
    binary_correct = total - pred_count - truth_count + 2 * correct_count
    pca = float(np.mean(binary_correct[present_truth] / total))
    union = truth_count + pred_count - correct_count
    present_any = union > 0
    class_iou = float(np.mean(correct_count[present_any] / union[present_any]))
    return ppa, pca, class_iou


def nima_score(
    scorer: Callable[[str], float] | str, images: Sequence[str]
) -> tuple[float, float]:
    """Mean and population standard deviation of an external per-image scorer.

    ``scorer`` is either a callable taking an image path, or a shell command
    invoked per image and expected to print one decimal score.
    """
    scores = []
    for path in images:
        try:
            if callable(scorer):
                scores.append(float(scorer(path)))
            else:
                out = subprocess.run(
                    [*scorer.split(), str(path)], capture_output=True, text=True, check=True
                )
                scores.append(float(out.stdout.strip().splitlines()[-1]))
        except Exception as e:
            raise RuntimeError(f"external scorer failed on {path}: {e}") from e
    if not scores:
        raise ValueError("no images to score")
    arr = np.asarray(scores, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))
