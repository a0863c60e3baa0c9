"""Print the phantom benchmark tables (trains on first use, then reads the cache).

Run: python3 -u demos/benchmark_report.py [cache_dir]
"""

import sys

from ctstandard.benchmark import ablation_wins, improvement, latent_phase_stats, run_benchmark
from ctstandard.glcm import FEATURES
from ctstandard.reconstruct import VARIANTS
from ctstandard.trainer import read_telemetry

res = run_benchmark(cache_dir=sys.argv[1] if len(sys.argv) > 1 else None, say=print)
head = f"{'':>20}" + "".join(f"{f[:11]:>12}" for f in FEATURES)
print("\nwhole-slice GLCM error vs standard rendering")
print(head)
print(f"{'raw input':>20}" + "".join(f"{res.input_errors[f]:12.4f}" for f in FEATURES))
for name, rec in res.training.items():
    tag = f"{name} (aborted)" if rec.aborted else name
    print(f"{tag:>20}" + "".join(f"{rec.test_errors[f]:12.4f}" for f in FEATURES))
print("\npipeline variants (full-loss model)")
for variant in VARIANTS:
    errs = res.reconstruction[variant]
    print(f"{variant:>20}" + "".join(f"{errs[f]:12.4f}" for f in FEATURES))
print("\nfull beats both ablations:", {f: w for f, w in ablation_wins(res).items()})
print("improvement over input:", {f: f"{v:+.0%}" for f, v in improvement(res).items()})
share, drift, n = latent_phase_stats(read_telemetry(res.telemetry_path))
print(f"latent loss fell in {share:.0%} of {n} trained G-phases; max D-phase drift {drift:.2%}")
