"""Synthetic CT phantoms and simulated reconstruction kernels.

A latent "truth" volume (air, a textured soft-tissue body, dense blobs and a
small bone rod) is turned into protocol-specific volumes by a point-spread
blur, an unsharp-mask gain and additive Gaussian noise. Paired volumes made
from the same truth are pixel aligned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .dicomio import HU_MAX, HU_MIN, Volume

AIR_HU = -1000.0
BONE_HU = 1200.0
MIN_VOXELS = 32 ** 3
MIN_SIDE = 32

Size = Union[int, Sequence[int]]


def _gaussian_psf(sigma: float, radius: int) -> np.ndarray:
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    psf = np.outer(g, g)
    return psf / psf.sum()


@dataclass
class ProtocolSim:
    """A simulated reconstruction kernel."""

    name: str
    psf: np.ndarray = field(repr=False)
    noise_sigma: float = 0.0
    sharpen_gain: float = 0.0

    def __post_init__(self):
        self.psf = np.asarray(self.psf, dtype=np.float64)
        if self.psf.ndim != 2:
            raise ValueError("psf must be a 2-D filter")
        if abs(self.psf.sum() - 1.0) > 1e-9:
            raise ValueError(f"psf must sum to 1 (got {self.psf.sum():.12f})")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def identity_protocol(name: str = "identity") -> ProtocolSim:
    return ProtocolSim(name, np.ones((1, 1)), 0.0, 0.0)


def default_protocols() -> Dict[str, ProtocolSim]:
    mild = _gaussian_psf(0.5, 1)
    return {
        "BL64-sim": ProtocolSim("BL64-sim", mild, noise_sigma=12.0, sharpen_gain=0.0),
        "BR40-sim": ProtocolSim("BR40-sim", _gaussian_psf(1.2, 2), noise_sigma=4.0, sharpen_gain=0.0),
        "BL57-sim": ProtocolSim("BL57-sim", mild, noise_sigma=20.0, sharpen_gain=0.5),
    }


PROTOCOLS = default_protocols()
STANDARD_PROTOCOL = "BL64-sim"


def get_protocol(name: str) -> ProtocolSim:
    try:
        return PROTOCOLS[name]
    except KeyError:
        valid = ", ".join(sorted(PROTOCOLS))
        raise ValueError(f"unknown protocol {name!r}; valid names: {valid}") from None


def parse_size(size: Size) -> Tuple[int, int, int]:
    """``64`` -> ``(64, 64, 64)``; ``(16, 128, 128)`` or ``"16x128x128"`` as depth, rows, cols."""
    if isinstance(size, str):
        parts = [int(p) for p in size.lower().split("x")]
        size = parts[0] if len(parts) == 1 else parts
    if isinstance(size, (int, np.integer)):
        dims = (int(size),) * 3
    else:
        dims = tuple(int(s) for s in size)
    if len(dims) != 3:
        raise ValueError(f"size needs one or three dimensions, got {size!r}")
    return dims  # type: ignore[return-value]


def generate_phantom_volume(
    seed: int,
    size: Size = (16, 128, 128),
    n_blobs: int = 3,
    bone: bool = True,
    texture_hu: float = 35.0,
) -> Volume:
    """Latent ground-truth phantom, deterministic in ``seed``."""
    depth, rows, cols = parse_size(size)
    if min(depth, rows, cols) < 1 or rows < MIN_SIDE or cols < MIN_SIDE or depth * rows * cols < MIN_VOXELS:
        raise ValueError(
            f"phantom size {depth}x{rows}x{cols} too small: need rows, cols >= {MIN_SIDE} "
            f"and at least {MIN_VOXELS} voxels"
        )
    if n_blobs < 1:
        raise ValueError("n_blobs must be >= 1")
    rng = np.random.default_rng(seed)

    z = np.linspace(-1.0, 1.0, depth)[:, None, None] if depth > 1 else np.zeros((1, 1, 1))
    y = np.linspace(-1.0, 1.0, rows)[None, :, None]
    x = np.linspace(-1.0, 1.0, cols)[None, None, :]

    ay, ax = rng.uniform(0.62, 0.72), rng.uniform(0.78, 0.88)
    taper = 1.0 - 0.08 * z ** 2
    body = (y / (ay * taper)) ** 2 + (x / (ax * taper)) ** 2 <= 1.0

    fine = ndimage.gaussian_filter(rng.standard_normal((depth, rows, cols)), sigma=(0.6, 0.8, 0.8))
    fine /= fine.std() + 1e-12
    coarse = ndimage.gaussian_filter(rng.standard_normal((depth, rows, cols)), sigma=(2.0, 8.0, 8.0))
    coarse /= coarse.std() + 1e-12
    tissue = np.clip(10.0 + texture_hu * fine + 25.0 * coarse, -100.0, 100.0)

    hu = np.full((depth, rows, cols), AIR_HU)
    hu[body] = tissue[body]

    for _ in range(n_blobs):
        r = rng.uniform(0.08, 0.16)
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0.0, 0.5)
        cy, cx = rad * ay * np.sin(ang), rad * ax * np.cos(ang)
        cz = rng.uniform(-0.5, 0.5)
        rz = rng.uniform(0.4, 0.9)
        level = rng.uniform(180.0, 320.0)
        blob = ((y - cy) / r) ** 2 + ((x - cx) / (r * rng.uniform(0.8, 1.25))) ** 2 + ((z - cz) / rz) ** 2 <= 1.0
        blob &= body
        values = np.clip(level + 0.6 * texture_hu * fine, 100.0, 400.0)
        hu[blob] = values[blob]

    if bone:
        by, bx = 0.7 * ay, 0.0
        rod = ((y - by) / 0.05) ** 2 + ((x - bx) / 0.05) ** 2 <= 1.0
        hu[np.broadcast_to(rod, hu.shape)] = BONE_HU

    return Volume(hu, kernel_label="truth", slice_thickness_mm=1.0)


def _slice_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def apply_protocol_slice(hu: np.ndarray, sim: ProtocolSim, seed: int, index: int) -> np.ndarray:
    hu = np.asarray(hu, dtype=np.float64)
    blurred = ndimage.convolve(hu, sim.psf, mode="nearest")
    out = blurred + sim.sharpen_gain * (hu - blurred) if sim.sharpen_gain else blurred
    if sim.noise_sigma > 0:
        out = out + _slice_rng(seed, index).normal(0.0, sim.noise_sigma, size=hu.shape)
    return np.clip(out, HU_MIN, HU_MAX)


def apply_protocol(truth: Volume, sim: ProtocolSim, seed: int) -> Volume:
    """Simulate acquisition of ``truth`` with ``sim``; slice ``i`` draws noise from ``(seed, i)``."""
    out = np.stack([apply_protocol_slice(s, sim, seed, i) for i, s in enumerate(truth.hu)])
    return Volume(out, kernel_label=sim.name, slice_thickness_mm=truth.slice_thickness_mm)


def protocol_seed(seed: int, name: str) -> int:
    """Stable per-protocol noise seed so paired volumes get independent noise."""
    return int(np.random.SeedSequence([int(seed), *name.encode("ascii")]).generate_state(1)[0])


def total_variation(hu: np.ndarray) -> float:
    hu = np.asarray(hu, dtype=np.float64)
    return float(np.abs(np.diff(hu, axis=-1)).sum() + np.abs(np.diff(hu, axis=-2)).sum())
