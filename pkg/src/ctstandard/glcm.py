"""Gray-level co-occurrence matrices, texture features and the relative-error table."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .dicomio import read_dicom_file, to_hu

FEATURES = ("dissimilarity", "contrast", "homogeneity", "energy", "correlation")
QUANT_RANGE = (-1000.0, 900.0)
DEFAULT_LEVELS = 32
DEFAULT_OFFSETS: Tuple[Tuple[int, int], ...] = ((0, 1), (1, 0))


class EmptyImageError(ValueError):
    pass


class PairingError(ValueError):
    pass


@dataclass
class GlcmMatrix:
    p: np.ndarray
    offsets: Tuple[Tuple[int, int], ...]
    symmetric: bool

    @property
    def levels(self) -> int:
        return self.p.shape[0]


@dataclass
class GlcmFeatures:
    dissimilarity: float
    contrast: float
    homogeneity: float
    energy: float
    correlation: Optional[float]  # None when either marginal has zero variance

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def quantize(hu: np.ndarray, levels: int = DEFAULT_LEVELS, hu_range: Tuple[float, float] = QUANT_RANGE) -> np.ndarray:
    """Uniform bins over ``hu_range``; values outside are clamped to the end bins."""
    lo, hi = hu_range
    width = (hi - lo) / levels
    q = np.floor((np.asarray(hu, dtype=np.float64) - lo) / width)
    return np.clip(q, 0, levels - 1).astype(np.int64)


def glcm_matrix(
    img: np.ndarray,
    levels: int = DEFAULT_LEVELS,
    offsets: Sequence[Tuple[int, int]] = DEFAULT_OFFSETS,
    symmetric: bool = True,
    quantized: bool = False,
) -> GlcmMatrix:
    """Normalised co-occurrence matrix accumulated over ``offsets``.

    ``img`` holds HU values unless ``quantized`` is set, in which case it
    already holds bin indices in ``[0, levels)``.
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("GLCM needs a 2-D image")
    if quantized:
        q = img.astype(np.int64)
        if q.size and (q.min() < 0 or q.max() >= levels):
            raise ValueError("bin index outside [0, levels)")
    else:
        q = quantize(img, levels)
    rows, cols = q.shape
    counts = np.zeros(levels * levels, dtype=np.float64)
    for dr, dc in offsets:
        r0, r1 = max(0, -dr), min(rows, rows - dr)
        c0, c1 = max(0, -dc), min(cols, cols - dc)
        if r1 <= r0 or c1 <= c0:
            continue
        a = q[r0:r1, c0:c1]
        b = q[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        counts += np.bincount((a * levels + b).ravel(), minlength=levels * levels)
    p = counts.reshape(levels, levels)
    if symmetric:
        p = p + p.T
    total = p.sum()
    if total == 0:
        raise EmptyImageError("image has no pixel pairs at the requested offsets")
    return GlcmMatrix(p / total, tuple(tuple(o) for o in offsets), symmetric)


def glcm_features(m: GlcmMatrix) -> GlcmFeatures:
    p = m.p
    n = p.shape[0]
    i, j = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    diff = i - j
    contrast = float((p * diff ** 2).sum())
    dissimilarity = float((p * np.abs(diff)).sum())
    homogeneity = float((p / (1.0 + diff ** 2)).sum())
    energy = float(np.sqrt((p ** 2).sum()))
    mu_i, mu_j = float((p * i).sum()), float((p * j).sum())
    sd_i = float(np.sqrt((p * (i - mu_i) ** 2).sum()))
    sd_j = float(np.sqrt((p * (j - mu_j) ** 2).sum()))
    if sd_i * sd_j <= 1e-15:
        correlation = None
    else:
        correlation = float((p * (i - mu_i) * (j - mu_j)).sum() / (sd_i * sd_j))
    return GlcmFeatures(dissimilarity, contrast, homogeneity, energy, correlation)


def image_features(hu: np.ndarray, levels: int = DEFAULT_LEVELS,
                   offsets: Sequence[Tuple[int, int]] = DEFAULT_OFFSETS, symmetric: bool = True) -> GlcmFeatures:
    return glcm_features(glcm_matrix(hu, levels, offsets, symmetric))


def absolute_error(f_syn: float, f_target: float) -> float:
    """``|f_syn - f_target| / f_target``; the denominator keeps its sign."""
    if f_target == 0:
        raise ZeroDivisionError("target feature value is zero")
    return abs(f_syn - f_target) / f_target


@dataclass
class ErrorSummary:
    """Mean relative error per feature plus the number of skipped pairs per feature."""

    errors: Dict[str, float]
    skipped: Dict[str, int]
    pairs: int


def feature_errors(
    syn_images: Iterable[np.ndarray],
    target_images: Iterable[np.ndarray],
    levels: int = DEFAULT_LEVELS,
    offsets: Sequence[Tuple[int, int]] = DEFAULT_OFFSETS,
    symmetric: bool = True,
) -> ErrorSummary:
    """Average the per-image relative error of each feature over paired images.

    Pairs where a feature is undefined (correlation of a flat image) or where
    the target value is zero are skipped for that feature and counted.
    """
    sums = {f: 0.0 for f in FEATURES}
    counts = {f: 0 for f in FEATURES}
    skipped = {f: 0 for f in FEATURES}
    n = 0
    for syn, tgt in zip(syn_images, target_images):
        n += 1
        fs = image_features(syn, levels, offsets, symmetric).as_dict()
        ft = image_features(tgt, levels, offsets, symmetric).as_dict()
        for name in FEATURES:
            a, b = fs[name], ft[name]
            if a is None or b is None or b == 0:
                skipped[name] += 1
                continue
            sums[name] += absolute_error(a, b)
            counts[name] += 1
    errors = {f: (sums[f] / counts[f] if counts[f] else float("nan")) for f in FEATURES}
    return ErrorSummary(errors, skipped, n)


def _dcm_names(directory) -> List[str]:
    if not os.path.isdir(directory):
        raise PairingError(f"{directory} is not a directory")
    return sorted(n for n in os.listdir(directory) if n.lower().endswith(".dcm"))


def evaluate_dataset(
    syn_dirs: Mapping[str, str] | str,
    target_dir: str,
    levels: int = DEFAULT_LEVELS,
    offsets: Sequence[Tuple[int, int]] = DEFAULT_OFFSETS,
    symmetric: bool = True,
) -> Dict[str, ErrorSummary]:
    """Per-method error summaries for directories of ``.dcm`` files paired by name."""
    if isinstance(syn_dirs, (str, os.PathLike)):
        syn_dirs = {"synthesized": str(syn_dirs)}
    target_names = _dcm_names(target_dir)
    if not target_names:
        raise PairingError(f"no .dcm files in {target_dir}")
    out = {}
    for label, directory in syn_dirs.items():
        names = _dcm_names(directory)
        missing = sorted(set(target_names) ^ set(names))
        if missing:
            raise PairingError(f"{label}: unmatched files {missing}")
        syn = (to_hu(read_dicom_file(os.path.join(directory, n))) for n in names)
        tgt = (to_hu(read_dicom_file(os.path.join(target_dir, n))) for n in names)
        out[label] = feature_errors(syn, tgt, levels, offsets, symmetric)
    return out


def write_error_table(path, summaries: Mapping[str, ErrorSummary]) -> None:
    """CSV with one row per feature and one column per method, then skip counts."""
    labels = list(summaries)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", *labels, *[f"{lab}_skipped" for lab in labels]])
        for name in FEATURES:
            w.writerow(
                [name]
                + [f"{summaries[lab].errors[name]:.6f}" for lab in labels]
                + [summaries[lab].skipped[name] for lab in labels]
            )


def read_error_table(path) -> Dict[str, Dict[str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    labels = [h for h in header[1:] if not h.endswith("_skipped")]
    table = {lab: {} for lab in labels}
    for row in rows[1:]:
        for k, lab in enumerate(labels, start=1):
            table[lab][row[0]] = float(row[k])
    return table
