"""Slice reconstruction from synthesized patches.

Per slice: sample soft-tissue windows, synthesize each with the generator,
keep the ones every critic calls real, map them back to HU, fuse them by
per-pixel mean on the soft-tissue mask, then look for seams along patch
borders and re-fuse with cropped borders where one shows up. Pixels outside
the mask are copied from the input.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff.tensor import Tensor
from .dicomio import DicomSlice, read_dicom_file, slice_from_hu, to_hu, write_dicom_file
from .gan import REAL, Verdict, verdict_from_prob
from .patches import (
    Patch,
    PatchExhaustedError,
    normalize_patch,
    resize_bilinear,
    sample_slice_boxes,
    slice_rng,
    soft_tissue_mask,
)

VARIANTS = ("straightforward", "overlap", "realfake", "full")


class DegeneratePatchError(ValueError):
    """A synthesized patch is constant, so its HU range cannot be recovered."""


class CoverageError(RuntimeError):
    def __init__(self, pixels: np.ndarray):
        self.pixels = pixels
        preview = ", ".join(f"({r},{c})" for r, c in pixels[:8])
        more = f" and {len(pixels) - 8} more" if len(pixels) > 8 else ""
        super().__init__(f"{len(pixels)} soft-tissue pixels have no contributing patch: {preview}{more}")


class IrreparableError(RuntimeError):
    pass


class SliceError(RuntimeError):
    """Stage failure annotated with the slice it happened on."""

    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"slice {index}: {type(cause).__name__}: {cause}")


# --- gray to HU ------------------------------------------------------------------

def hu_denormalize(gray, hu_max: float, hu_min: float, drop_min_offset: bool = False) -> np.ndarray:
    """Stretch a gray patch so its own min/max land on ``hu_min``/``hu_max``.

    ``drop_min_offset`` drops the ``+ hu_min`` offset, which maps the darkest pixel to 0 HU.
    """
    g = np.asarray(gray.gray if isinstance(gray, Patch) else gray, dtype=np.float64)
    if not hu_max > hu_min:
        raise ValueError(f"need hu_max > hu_min, got [{hu_min}, {hu_max}]")
    lo, hi = float(g.min()), float(g.max())
    if hi == lo:
        raise DegeneratePatchError("synthesized patch is constant")
    out = (g - lo) / (hi - lo) * (hu_max - hu_min)
    return out if drop_min_offset else out + hu_min


def hu_denormalize_array(gray: np.ndarray, hu_min: float, hu_max: float) -> np.ndarray:
    """Like :func:`hu_denormalize` but falls back to the midpoint for constant patches."""
    try:
        return hu_denormalize(gray, hu_max, hu_min)
    except DegeneratePatchError:
        return np.full(np.shape(gray), 0.5 * (hu_min + hu_max))


# --- qualification ----------------------------------------------------------------

@dataclass
class QualifiedPatch:
    patch: Patch  # gray holds the synthesized image
    verdict: Verdict
    p_real: float


def _real_prob(critic, gray: np.ndarray) -> np.ndarray:
    batch = np.asarray(gray, dtype=np.float64)[:, None]
    return critic(Tensor(batch.astype(critic.dtype, copy=False))).prob.data[:, REAL].astype(np.float64)


def qualify_patches(critics, synthesized: Sequence[Patch]) -> Tuple[List[QualifiedPatch], int]:
    """Keep patches that every critic calls real; undecided counts as discarded."""
    if not isinstance(critics, (list, tuple)):
        critics = [critics]
    if not synthesized:
        return [], 0
    kept: List[QualifiedPatch] = []
    by_size: Dict[Tuple[int, int], List[int]] = {}
    for i, p in enumerate(synthesized):
        by_size.setdefault(p.gray.shape, []).append(i)
    p_min = np.ones(len(synthesized))
    for idx in by_size.values():
        stack = np.stack([synthesized[i].gray for i in idx])
        for d in critics:
            p_min[idx] = np.minimum(p_min[idx], _real_prob(d, stack))
    for p, pr in zip(synthesized, p_min):
        v = verdict_from_prob(float(pr))
        if v is Verdict.REAL:
            kept.append(QualifiedPatch(p, v, float(pr)))
    return kept, len(synthesized) - len(kept)


# --- fusion -----------------------------------------------------------------------

@dataclass
class Placed:
    """An HU block placed at ``(row, col)`` on the slice; blocks may be non-square after cropping."""

    row: int
    col: int
    hu: np.ndarray

    @property
    def box(self) -> Tuple[int, int, int, int]:
        h, w = self.hu.shape
        return self.row, self.row + h, self.col, self.col + w

    def key(self):
        return (self.row, self.col, self.hu.shape, self.hu.tobytes())


@dataclass
class FusionCanvas:
    total: np.ndarray
    count: np.ndarray

    @classmethod
    def empty(cls, shape) -> "FusionCanvas":
        return cls(np.zeros(shape, dtype=np.float64), np.zeros(shape, dtype=np.int64))

    def add(self, p: Placed) -> None:
        r0, r1, c0, c1 = p.box
        if r0 < 0 or c0 < 0 or r1 > self.total.shape[0] or c1 > self.total.shape[1]:
            raise ValueError(f"patch at ({p.row},{p.col}) leaves the canvas")
        self.total[r0:r1, c0:c1] += p.hu
        self.count[r0:r1, c0:c1] += 1

    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.total / np.maximum(self.count, 1), np.nan)


def accumulate(placed: Sequence[Placed], shape) -> FusionCanvas:
    """Sum blocks in a canonical order so the float result ignores list order."""
    canvas = FusionCanvas.empty(shape)
    for p in sorted(placed, key=Placed.key):
        canvas.add(p)
    return canvas


def fuse_patches(placed: Sequence[Placed], mask: np.ndarray, original: np.ndarray,
                 fallback: Optional[Sequence[Placed]] = None) -> Tuple[np.ndarray, int]:
    """Per-pixel mean on ``mask``; other pixels come from ``original``.

    Mask pixels no block reaches are filled from ``fallback`` blocks when
    given. Returns the fused slice and the number of fallback-filled pixels;
    raises :class:`CoverageError` if mask pixels remain uncovered.
    """
    original = np.asarray(original, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    canvas = accumulate(placed, original.shape)
    fused = original.copy()
    covered = mask & (canvas.count > 0)
    fused[covered] = canvas.total[covered] / canvas.count[covered]
    holes = mask & (canvas.count == 0)
    filled = 0
    if holes.any() and fallback:
        extra = accumulate(fallback, original.shape)
        fill = holes & (extra.count > 0)
        fused[fill] = extra.total[fill] / extra.count[fill]
        filled = int(fill.sum())
        holes &= ~fill
    if holes.any():
        raise CoverageError(np.argwhere(holes))
    return fused, filled


# --- box artifacts ----------------------------------------------------------------

SIDES = ("top", "bottom", "left", "right")


@dataclass
class Seam:
    patch: int
    side: str
    gradient: float


@dataclass
class SeamReport:
    flagged: List[Seam]
    threshold: float
    median_gradient: float
    missing: np.ndarray  # [k, 2] coordinates of NaN pixels

    @property
    def clean(self) -> bool:
        return not self.flagged and len(self.missing) == 0


def _pairs(a: np.ndarray, b: np.ndarray, ma: np.ndarray, mb: np.ndarray) -> np.ndarray:
    ok = ma & mb & np.isfinite(a) & np.isfinite(b)
    return np.abs(a - b)[ok]


def _seam_pairs(img: np.ndarray, mask: np.ndarray, box, side: str) -> Optional[np.ndarray]:
    r0, r1, c0, c1 = box
    rows, cols = img.shape
    if side == "top" and r0 > 0:
        return _pairs(img[r0 - 1, c0:c1], img[r0, c0:c1], mask[r0 - 1, c0:c1], mask[r0, c0:c1])
    if side == "bottom" and r1 < rows:
        return _pairs(img[r1 - 1, c0:c1], img[r1, c0:c1], mask[r1 - 1, c0:c1], mask[r1, c0:c1])
    if side == "left" and c0 > 0:
        return _pairs(img[r0:r1, c0 - 1], img[r0:r1, c0], mask[r0:r1, c0 - 1], mask[r0:r1, c0])
    if side == "right" and c1 < cols:
        return _pairs(img[r0:r1, c1 - 1], img[r0:r1, c1], mask[r0:r1, c1 - 1], mask[r0:r1, c1])
    return None


def detect_box_artifacts(fused: np.ndarray, layout: Sequence, mask: Optional[np.ndarray] = None,
                         factor: float = 3.0) -> SeamReport:
    """Flag patch-border segments whose mean cross-border jump exceeds ``factor`` times
    the median in-patch neighbour difference; also list NaN pixels.

    ``layout`` holds :class:`Placed` blocks or ``(row, col, size)`` squares.
    """
    img = np.asarray(fused, dtype=np.float64)
    mask = np.ones(img.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    boxes = []
    for b in layout:
        if isinstance(b, Placed):
            boxes.append(b.box)
        else:
            r, c, s = b
            boxes.append((r, r + s, c, c + s))
    inner = []
    for r0, r1, c0, c1 in boxes:
        blk, m = img[r0:r1, c0:c1], mask[r0:r1, c0:c1]
        inner.append(_pairs(blk[:, 1:], blk[:, :-1], m[:, 1:], m[:, :-1]))
        inner.append(_pairs(blk[1:], blk[:-1], m[1:], m[:-1]))
    inner_all = np.concatenate(inner) if inner else np.zeros(0)
    median = float(np.median(inner_all)) if inner_all.size else 0.0
    threshold = factor * median
    flagged = []
    for i, box in enumerate(boxes):
        for side in SIDES:
            diffs = _seam_pairs(img, mask, box, side)
            if diffs is None or diffs.size == 0:
                continue
            grad = float(diffs.mean())
            if grad > threshold:
                flagged.append(Seam(i, side, grad))
    return SeamReport(flagged, threshold, median, np.argwhere(~np.isfinite(img)))


def _crop(p: Placed, side: str, px: int) -> Optional[Placed]:
    h, w = p.hu.shape
    if (side in ("top", "bottom") and h <= 2 * px) or (side in ("left", "right") and w <= 2 * px):
        return None
    if side == "top":
        return Placed(p.row + px, p.col, p.hu[px:])
    if side == "bottom":
        return Placed(p.row, p.col, p.hu[:-px])
    if side == "left":
        return Placed(p.row, p.col + px, p.hu[:, px:])
    return Placed(p.row, p.col, p.hu[:, :-px])


@dataclass
class RepairResult:
    fused: np.ndarray
    placed: List[Placed]
    repaired: int
    residual: List[Seam]
    iterations: int


def repair_and_reintegrate(report: SeamReport, placed: Sequence[Placed], mask: np.ndarray,
                           original: np.ndarray, crop: int = 2, max_iter: int = 3,
                           factor: float = 3.0, fallback: Optional[Sequence[Placed]] = None) -> RepairResult:
    """Crop ``crop`` border pixels from each block on its flagged sides and fuse again.

    Repeats detection at most ``max_iter`` times. Raises :class:`IrreparableError`
    when a crop would leave soft-tissue pixels without any contributing block.
    """
    placed = list(placed)
    mask = np.asarray(mask, dtype=bool)
    fused, _ = fuse_patches(placed, mask, original, fallback)
    repaired, iterations = 0, 0
    while report.flagged and iterations < max_iter:
        iterations += 1
        new = list(placed)
        for seam in report.flagged:
            cropped = _crop(new[seam.patch], seam.side, crop)
            if cropped is None:
                raise IrreparableError(f"patch {seam.patch} is too small to crop its {seam.side} border")
            new[seam.patch] = cropped
        try:
            fused, _ = fuse_patches(new, mask, original, fallback)
        except CoverageError as exc:
            raise IrreparableError(f"cropping flagged borders uncovers soft tissue: {exc}") from None
        repaired += len(report.flagged)
        placed = new
        report = detect_box_artifacts(fused, placed, mask, factor)
    return RepairResult(fused, placed, repaired, report.flagged, iterations)


# --- per-slice pipeline -----------------------------------------------------------

@dataclass
class ReconstructConfig:
    variant: str = "full"
    size_range: Tuple[int, int] = (64, 64)
    seed: int = 0
    seam_factor: float = 3.0
    crop: int = 2
    max_repairs: int = 3
    drop_min_offset: bool = False
    batch_size: int = 32
    threads: int = 1
    standard_label: str = "BL64-sim"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        lo, hi = self.size_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad size range {self.size_range}")
        if self.seam_factor <= 0 or self.crop < 1 or self.max_repairs < 0 or self.threads < 1:
            raise ValueError("seam_factor, crop, max_repairs and threads must be positive")


@dataclass
class SliceReport:
    slice: int
    variant: str
    patches: int = 0
    qualified: int = 0
    discarded: int = 0
    degenerate: int = 0
    fallback_pixels: int = 0
    uncoverable_pixels: int = 0
    seams_flagged: int = 0
    seams_repaired: int = 0
    residual_seams: int = 0
    missing_pixels: int = 0
    seconds: float = 0.0
    notes: List[str] = field(default_factory=list)


def _synthesize(g, windows: List[np.ndarray], batch_size: int) -> List[np.ndarray]:
    """Run ``g`` on gray windows, resizing to and from its input size when needed."""
    net = getattr(g, "in_size", None)
    outs: List[Optional[np.ndarray]] = [None] * len(windows)
    groups: Dict[int, List[int]] = {}
    for i, w in enumerate(windows):
        groups.setdefault(net or w.shape[0], []).append(i)
    for size, idx in groups.items():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s : s + batch_size]
            batch = np.stack([resize_bilinear(windows[i], size) if windows[i].shape[0] != size else windows[i]
                              for i in chunk])[:, None]
            res = g(Tensor(batch.astype(g.dtype, copy=False)))[0].data[:, 0].astype(np.float64)
            for i, r in zip(chunk, res):
                side = windows[i].shape[0]
                outs[i] = resize_bilinear(r, side) if side != size else r
    return outs  # type: ignore[return-value]


def grid_boxes(shape: Tuple[int, int], size: int) -> List[Tuple[int, int, int]]:
    rows, cols = shape

    def starts(n):
        s = list(range(0, max(n - size, 0) + 1, size))
        if s[-1] + size < n:
            s.append(n - size)
        return s

    return [(r, c, size) for r in starts(rows) for c in starts(cols)]


def reconstruct_slice(hu: np.ndarray, g, critics, config: ReconstructConfig, index: int = 0) -> Tuple[np.ndarray, SliceReport]:
    """Standardize one HU slice with the configured pipeline variant."""
    t0 = time.perf_counter()
    hu = np.asarray(hu, dtype=np.float64)
    rep = SliceReport(index, config.variant)
    mask = soft_tissue_mask(hu)
    to_hu_patch = (lambda gray, lo, hi: hu_denormalize(gray, hi, lo, config.drop_min_offset))

    if config.variant == "straightforward":
        size = min(config.size_range[1], *hu.shape)
        boxes = [b for b in grid_boxes(hu.shape, size)
                 if hu[b[0]:b[0] + size, b[1]:b[1] + size].max() > hu[b[0]:b[0] + size, b[1]:b[1] + size].min()]
    else:
        try:
            sampling = sample_slice_boxes(hu, tuple(config.size_range), slice_rng(config.seed, index), cover=True)
            boxes = sampling.boxes
            rep.uncoverable_pixels = int(sampling.uncoverable.sum())
        except PatchExhaustedError:
            boxes = []
    if not boxes:
        rep.notes.append("no patches")
        rep.seconds = time.perf_counter() - t0
        return hu.copy(), rep

    patches = [normalize_patch(hu[r:r + s, c:c + s], float(hu[r:r + s, c:c + s].min()),
                               float(hu[r:r + s, c:c + s].max()), (index, r, c)) for r, c, s in boxes]
    rep.patches = len(patches)
    synth = _synthesize(g, [p.gray.astype(np.float64) for p in patches], config.batch_size)
    synthesized = [Patch(p.origin, p.size, out, p.hu_min, p.hu_max, p.source_protocol) for p, out in zip(patches, synth)]

    def place(ps: Sequence[Patch]) -> List[Placed]:
        out = []
        for p in ps:
            try:
                out.append(Placed(p.origin[1], p.origin[2], to_hu_patch(p.gray, p.hu_min, p.hu_max)))
            except DegeneratePatchError:
                rep.degenerate += 1
        return out

    if config.variant == "straightforward":
        fused = hu.copy()
        for p in place(synthesized):
            r0, r1, c0, c1 = p.box
            m = mask[r0:r1, c0:c1]
            fused[r0:r1, c0:c1][m] = p.hu[m]
        rep.qualified = len(synthesized)
    else:
        fallback: List[Placed] = []
        if config.variant in ("realfake", "full"):
            qualified, rep.discarded = qualify_patches(critics, synthesized)
            keep = {id(q.patch) for q in qualified}
            chosen = [q.patch for q in qualified]
            fallback = place([p for p in synthesized if id(p) not in keep])
        else:
            chosen = list(synthesized)
        rep.qualified = len(chosen)
        placed = place(chosen)
        # soft tissue nobody could cover keeps its input value
        fuse_mask = mask.copy()
        if rep.uncoverable_pixels:
            fuse_mask &= ~sampling.uncoverable
        fused, rep.fallback_pixels = fuse_patches(placed, fuse_mask, hu, fallback)
        if config.variant == "full":
            report = detect_box_artifacts(fused, placed, fuse_mask, config.seam_factor)
            rep.seams_flagged = len(report.flagged)
            if report.flagged:
                try:
                    res = repair_and_reintegrate(report, placed, fuse_mask, hu, config.crop,
                                                 config.max_repairs, config.seam_factor, fallback)
                    fused = res.fused
                    rep.seams_repaired, rep.residual_seams = res.repaired, len(res.residual)
                    rep.fallback_pixels = fuse_patches(res.placed, fuse_mask, hu, fallback)[1]
                except IrreparableError as exc:
                    rep.residual_seams = len(report.flagged)
                    rep.notes.append(f"repair skipped: {exc}")
    rep.missing_pixels = int((~np.isfinite(fused)).sum())
    rep.seconds = time.perf_counter() - t0
    return fused, rep


def _output_slice(src: DicomSlice, hu: np.ndarray, label: str) -> DicomSlice:
    return slice_from_hu(hu, label, src.slice_thickness_mm, src.rescale_slope, src.rescale_intercept)


def reconstruct_volume(slices: Sequence[DicomSlice], g, critics, config: ReconstructConfig):
    """Standardize a list of DICOM slices; returns output slices and per-slice reports."""

    def work(item):
        k, s = item
        try:
            fused, rep = reconstruct_slice(to_hu(s), g, critics, config, k)
            lo = s.rescale_intercept
            hi = lo + 65535 * s.rescale_slope
            return _output_slice(s, np.clip(fused, lo, hi), config.standard_label), rep
        except Exception as exc:  # annotate with the slice index
            raise SliceError(k, exc) from exc

    items = list(enumerate(slices))
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]
    return [r[0] for r in results], [r[1] for r in results]


def report_record(rep: SliceReport) -> Dict:
    return asdict(rep)


def reconstruct_dicom(in_dir, out_dir, g, critics, config: ReconstructConfig, report_path=None) -> List[SliceReport]:
    """Standardize every ``.dcm`` file of ``in_dir`` into ``out_dir`` under the same names."""
    names = sorted(n for n in os.listdir(in_dir) if n.lower().endswith(".dcm"))
    if not names:
        raise FileNotFoundError(f"no .dcm files in {in_dir}")
    slices = [read_dicom_file(os.path.join(in_dir, n)) for n in names]
    outs, reports = reconstruct_volume(slices, g, critics, config)
    os.makedirs(out_dir, exist_ok=True)
    for name, s in zip(names, outs):
        write_dicom_file(os.path.join(out_dir, name), s)
    if report_path is None:
        report_path = os.path.join(out_dir, "report.jsonl")
    with open(report_path, "w") as fh:
        for name, rep in zip(names, reports):
            rec = report_record(rep)
            rec["file"] = name
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return reports
