"""Render one phantom under two simulated protocols and look at the texture gap.

Run: python3 demos/phantom_tour.py
"""

import numpy as np

from ctstandard.benchmark import phantom_pair
from ctstandard.glcm import FEATURES, feature_errors, image_features
from ctstandard.patches import sample_patch_pairs, soft_tissue_mask
from ctstandard.phantom import default_protocols

print("protocols:", ", ".join(default_protocols()))
std, non = phantom_pair(seed=7, shape=(4, 128, 128), standard="BL64-sim", nonstandard="BR40-sim")
mid = std.hu.shape[0] // 2
mask = soft_tissue_mask(std.hu[mid])
print(f"slice {mid}: {mask.mean():.0%} of pixels are soft tissue")

for label, vol in (("standard BL64-sim", std), ("non-standard BR40-sim", non)):
    f = image_features(vol.hu[mid]).as_dict()
    print(f"{label:>22}: " + "  ".join(f"{k[:4]}={v:.3f}" for k, v in f.items()))

errs = feature_errors(list(non.hu), list(std.hu)).errors
print("input error vs standard: " + "  ".join(f"{k[:4]}={errs[k]:.3f}" for k in FEATURES))

src, tgt = sample_patch_pairs(std, non, (32, 64), rng_seed=0)
sizes = np.array([p.size for p in src])
print(f"{len(src)} aligned patch pairs, window sides {sizes.min()}..{sizes.max()}")
print("first pair origin", src[0].origin, "HU window", (round(src[0].hu_min), round(src[0].hu_max)))
