"""Soft-tissue patch sampling, grayscale normalisation and the patch cache format."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .dicomio import Volume

SOFT_TISSUE_RANGE = (-1000.0, 900.0)
MIN_TISSUE_FRACTION = 0.7
MIN_OVERLAP_FRACTION = 0.5
PATCH_CACHE_MAGIC = b"STPC"


class PatchExhaustedError(RuntimeError):
    """No qualifying patch could be drawn within the draw budget."""


class DegenerateRangeError(ValueError):
    pass


@dataclass
class Patch:
    origin: Tuple[int, int, int]  # slice, row, col
    size: int
    gray: np.ndarray
    hu_min: float
    hu_max: float
    source_protocol: str = ""

    def window(self) -> Tuple[slice, slice]:
        _, r, c = self.origin
        return slice(r, r + self.size), slice(c, c + self.size)


def soft_tissue_mask(hu: np.ndarray) -> np.ndarray:
    lo, hi = SOFT_TISSUE_RANGE
    hu = np.asarray(hu)
    return (hu >= lo) & (hu <= hi)


def is_soft_tissue_patch(window: np.ndarray, min_fraction: float = MIN_TISSUE_FRACTION) -> bool:
    window = np.asarray(window)
    inside = int(soft_tissue_mask(window).sum())
    # exact comparison for ratios like 70/100
    return inside * 1_000_000 >= round(min_fraction * 1_000_000) * window.size


def resize_bilinear(img: np.ndarray, out_size: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape == (out_size, out_size):
        return img.copy()
    zoom = (out_size / img.shape[0], out_size / img.shape[1])
    return ndimage.zoom(img, zoom, order=1, mode="nearest", grid_mode=False)


def normalize_patch(
    hu_window: np.ndarray,
    hu_min: float,
    hu_max: float,
    origin: Tuple[int, int, int] = (0, 0, 0),
    out_size: Optional[int] = None,
    protocol: str = "",
) -> Patch:
    """Map HU to ``[0, 1]`` gray using ``(hu - hu_min) / (hu_max - hu_min)``, clipped."""
    if not hu_max > hu_min:
        raise DegenerateRangeError(f"degenerate HU range [{hu_min}, {hu_max}]")
    hu_window = np.asarray(hu_window, dtype=np.float64)
    gray = np.clip((hu_window - hu_min) / (hu_max - hu_min), 0.0, 1.0)
    if out_size is not None:
        gray = np.clip(resize_bilinear(gray, out_size), 0.0, 1.0)
    return Patch(
        origin=tuple(int(v) for v in origin),
        size=int(hu_window.shape[0]),
        gray=gray.astype(np.float32),
        hu_min=float(hu_min),
        hu_max=float(hu_max),
        source_protocol=protocol,
    )


def overlap_fractions(boxes: Sequence[Tuple[int, int, int]], shape: Tuple[int, int]) -> np.ndarray:
    """For each square ``(row, col, size)`` the share of its pixels also covered by another box."""
    count = np.zeros(shape, dtype=np.int32)
    for r, c, s in boxes:
        count[r : r + s, c : c + s] += 1
    return np.array([(count[r : r + s, c : c + s] >= 2).mean() for r, c, s in boxes])


def _prune_overlap(boxes: List[Tuple[int, int, int]], shape, min_overlap: float) -> List[Tuple[int, int, int]]:
    boxes = list(boxes)
    while boxes:
        fr = overlap_fractions(boxes, shape)
        if fr.min() >= min_overlap:
            break
        boxes.pop(int(np.argmin(fr)))
    return boxes


@dataclass
class SliceSampling:
    boxes: List[Tuple[int, int, int]]
    uncoverable: np.ndarray  # mask pixels no qualifying window could reach
    draws: int


def sample_slice_boxes(
    hu: np.ndarray,
    size_range: Tuple[int, int],
    rng: np.random.Generator,
    min_patches: int = 2,
    cover: bool = False,
    min_overlap: float = MIN_OVERLAP_FRACTION,
    min_tissue: float = MIN_TISSUE_FRACTION,
    max_draws: int = 20000,
    target_attempts: int = 24,
) -> SliceSampling:
    """Draw soft-tissue windows on one slice until the overlap rule holds.

    With ``cover`` the draw also continues until every soft-tissue pixel lies
    in some window (pixels for which no qualifying window exists are reported
    as uncoverable). Draws alternate between uniform positions and windows
    placed over a pixel that still lacks coverage or overlap.
    """
    hu = np.asarray(hu)
    rows, cols = hu.shape
    lo, hi = int(size_range[0]), int(size_range[1])
    if not (1 <= lo <= hi <= min(rows, cols)):
        raise ValueError(f"size range {size_range} does not fit a {rows}x{cols} slice")
    tissue = soft_tissue_mask(hu)
    # integral image for fast window tissue fractions
    integral = np.pad(tissue.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))

    def qualifies(r: int, c: int, s: int) -> bool:
        inside = integral[r + s, c + s] - integral[r, c + s] - integral[r + s, c] + integral[r, c]
        if inside * 1_000_000 < round(min_tissue * 1_000_000) * s * s:
            return False
        win = hu[r : r + s, c : c + s]
        return bool(win.max() > win.min())

    boxes: List[Tuple[int, int, int]] = []
    count = np.zeros((rows, cols), dtype=np.int32)
    uncoverable = np.zeros((rows, cols), dtype=bool)
    failures = np.zeros((rows, cols), dtype=np.int32)
    draws = 0

    def deficits() -> np.ndarray:
        need = np.zeros((rows, cols), dtype=bool)
        if cover:
            need |= tissue & (count == 0) & ~uncoverable
        if len(boxes) >= 1:
            for r, c, s in boxes:
                block = count[r : r + s, c : c + s]
                if (block >= 2).mean() < min_overlap:
                    need[r : r + s, c : c + s] |= block == 1
        return need

    while draws < max_draws:
        need = deficits()
        done = len(boxes) >= min_patches and not need.any()
        if done:
            break
        s = int(rng.integers(lo, hi + 1))
        targeted = need.any() and (draws % 2 == 1 or cover)
        if targeted:
            cand = np.flatnonzero(need)
            pix = int(cand[rng.integers(len(cand))])
            pr, pc = divmod(pix, cols)
            accepted = False
            for _ in range(target_attempts):
                draws += 1
                r = int(rng.integers(max(0, pr - s + 1), min(pr, rows - s) + 1))
                c = int(rng.integers(max(0, pc - s + 1), min(pc, cols - s) + 1))
                if qualifies(r, c, s):
                    boxes.append((r, c, s))
                    count[r : r + s, c : c + s] += 1
                    accepted = True
                    break
            if not accepted:
                failures[pr, pc] += 1
                if count[pr, pc] == 0 and failures[pr, pc] >= 2:
                    uncoverable[pr, pc] = True
                elif failures[pr, pc] >= 4:
                    # pixel cannot gain overlap; give up on the owning windows
                    boxes = [b for b in boxes if not (b[0] <= pr < b[0] + b[2] and b[1] <= pc < b[1] + b[2])]
                    count[:] = 0
                    for r, c, s2 in boxes:
                        count[r : r + s2, c : c + s2] += 1
                    failures[pr, pc] = 0
                    uncoverable[pr, pc] = count[pr, pc] == 0
        else:
            draws += 1
            r = int(rng.integers(0, rows - s + 1))
            c = int(rng.integers(0, cols - s + 1))
            if qualifies(r, c, s):
                boxes.append((r, c, s))
                count[r : r + s, c : c + s] += 1

    boxes = _prune_overlap(boxes, (rows, cols), min_overlap)
    if not boxes:
        raise PatchExhaustedError(f"no soft-tissue patch satisfying the rules after {draws} draws")
    if cover:
        covered = np.zeros((rows, cols), dtype=bool)
        for r, c, s in boxes:
            covered[r : r + s, c : c + s] = True
        uncoverable = tissue & ~covered
    return SliceSampling(boxes, uncoverable, draws)


def slice_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), 0x5A]))


def _cut(hu: np.ndarray, box, slice_index: int, out_size: Optional[int], protocol: str) -> Patch:
    r, c, s = box
    win = hu[r : r + s, c : c + s]
    return normalize_patch(win, float(win.min()), float(win.max()), (slice_index, r, c), out_size, protocol)


def sample_patches(
    volume: Volume,
    size_range: Tuple[int, int] = (32, 64),
    rng_seed: int = 0,
    out_size: int = 64,
    min_patches: int = 2,
    slices: Optional[Sequence[int]] = None,
) -> List[Patch]:
    """Soft-tissue patches from every slice, each satisfying the overlap rule within its slice.

    Patches are normalised by their own window's HU range and resized to
    ``out_size``. Raises :class:`PatchExhaustedError` if no slice yields any.
    """
    patches: List[Patch] = []
    indices = range(volume.shape[0]) if slices is None else slices
    for k in indices:
        try:
            sampling = sample_slice_boxes(volume.hu[k], size_range, slice_rng(rng_seed, k), min_patches)
        except PatchExhaustedError:
            continue
        patches.extend(_cut(volume.hu[k], b, k, out_size, volume.kernel_label) for b in sampling.boxes)
    if not patches:
        raise PatchExhaustedError("volume contains no qualifying soft-tissue patch")
    return patches


def sample_patch_pairs(
    standard: Volume,
    nonstandard: Volume,
    size_range: Tuple[int, int] = (32, 64),
    rng_seed: int = 0,
    out_size: int = 64,
    min_patches: int = 2,
) -> Tuple[List[Patch], List[Patch]]:
    """Pixel-aligned ``(x', x)`` patch lists cut at identical origins.

    Windows are chosen on the non-standard volume, the one available at
    inference time.
    """
    if standard.shape != nonstandard.shape:
        raise ValueError("paired volumes must share a shape")
    src = sample_patches(nonstandard, size_range, rng_seed, out_size, min_patches)
    tgt = []
    for p in src:
        k, r, c = p.origin
        tgt.append(_cut(standard.hu[k], (r, c, p.size), k, out_size, standard.kernel_label))
    return src, tgt


def augment_pair(a: np.ndarray, b: np.ndarray, rng: np.random.Generator, max_shift: int = 4):
    """Same random 90-degree rotation and integer shift (edge padded) for both images."""
    k = int(rng.integers(4))
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))

    def apply(img):
        img = np.rot90(img, k, axes=(-2, -1))
        if dy or dx:
            pad = [(0, 0)] * (img.ndim - 2) + [(max_shift, max_shift), (max_shift, max_shift)]
            padded = np.pad(img, pad, mode="edge")
            h, w = img.shape[-2:]
            img = padded[..., max_shift - dy : max_shift - dy + h, max_shift - dx : max_shift - dx + w]
        return np.ascontiguousarray(img)

    return apply(a), apply(b)


# --- patch cache ------------------------------------------------------------------

def dump_patch_cache(patches: Sequence[Patch]) -> bytes:
    """``STPC | u32 count | per patch: u32 slice,row,col | u32 size | f32 hu_min,hu_max |
    u32 len + protocol bytes | u32 gray side | f32 gray payload``, little endian."""
    buf = io.BytesIO()
    buf.write(PATCH_CACHE_MAGIC)
    buf.write(struct.pack("<I", len(patches)))
    for p in patches:
        proto = p.source_protocol.encode("utf-8")
        side = p.gray.shape[0]
        buf.write(struct.pack("<4I2f", *p.origin, p.size, p.hu_min, p.hu_max))
        buf.write(struct.pack("<I", len(proto)) + proto)
        buf.write(struct.pack("<I", side))
        buf.write(np.asarray(p.gray, dtype="<f4").tobytes())
    return buf.getvalue()


def parse_patch_cache(data: bytes) -> List[Patch]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError("truncated patch cache")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4) != PATCH_CACHE_MAGIC:
        raise ValueError("not a patch cache (bad magic)")
    (count,) = struct.unpack("<I", take(4))
    patches = []
    for _ in range(count):
        k, r, c, size, hmin, hmax = struct.unpack("<4I2f", take(24))
        (n,) = struct.unpack("<I", take(4))
        proto = take(n).decode("utf-8")
        (side,) = struct.unpack("<I", take(4))
        gray = np.frombuffer(take(4 * side * side), dtype="<f4").reshape(side, side).astype(np.float32)
        patches.append(Patch((k, r, c), size, gray, float(hmin), float(hmax), proto))
    return patches


def write_patch_cache(path, patches: Sequence[Patch]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_patch_cache(patches))


def read_patch_cache(path) -> List[Patch]:
    with open(path, "rb") as fh:
        return parse_patch_cache(fh.read())


def write_pair_cache(path, source: Sequence[Patch], target: Sequence[Patch]) -> None:
    """Aligned ``(x', x)`` lists stored as one cache: all sources, then all targets."""
    if len(source) != len(target):
        raise ValueError("pair lists differ in length")
    write_patch_cache(path, list(source) + list(target))


def read_pair_cache(path) -> Tuple[List[Patch], List[Patch]]:
    patches = read_patch_cache(path)
    if len(patches) % 2:
        raise ValueError("pair cache holds an odd number of patches")
    half = len(patches) // 2
    src, tgt = patches[:half], patches[half:]
    for a, b in zip(src, tgt):
        if a.origin != b.origin or a.size != b.size:
            raise ValueError(f"pair cache misaligned at origin {a.origin}")
    return src, tgt
