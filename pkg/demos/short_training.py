"""A few minutes of adversarial training on phantom patches, with telemetry.

Shows the alternating D/G phases and the latent loss staying put while the
generator is frozen.

Run: python3 -u demos/short_training.py
"""

from ctstandard.benchmark import BenchmarkSpec, pair_set
from ctstandard.trainer import D_PHASE, TrainConfig, TrainingAborted, phase_segments, train

spec = BenchmarkSpec(train_seeds=(0, 1), val_seeds=(50,))
cfg = TrainConfig(seed=1, lr=3e-4, lr_d=2e-4, theta_g=0.75, theta_d=0.6, t_max=200, max_epochs=3,
                  gen_channels=(4, 8, 16, 16, 16, 16, 16), critic_channels=(4, 8, 16, 16))
spec.train = cfg
train_pairs, val_pairs = pair_set(spec, spec.train_seeds), pair_set(spec, spec.val_seeds)
print(f"{len(train_pairs)} training pairs, {len(val_pairs)} validation pairs")

try:
    res = train(cfg, train_pairs, val_pairs,
                progress=lambda e, errs: print(f"epoch {e}: " + " ".join(f"{k[:4]}={v:.3f}" for k, v in errs.items())))
except TrainingAborted as exc:
    # critics that can no longer separate real from fake end the run; keep the best finished epoch
    print("aborted:", exc)
    if exc.best is None:
        raise
    res = exc.best
print(f"best epoch {res.best_epoch} of {res.epochs_run}, {res.rollbacks} rollbacks")
for seg in phase_segments(res.telemetry):
    lat = [r["loss_lat"] for r in seg]
    kind = "D" if seg[0]["phase"] == D_PHASE else "G"
    end = "rolled back" if seg[-1]["rollback"] else "advanced"
    print(f"  epoch {seg[0]['epoch']} {kind}: {len(seg) - 1:3d} steps, latent {lat[0]:.3f} -> {lat[-1]:.3f}, {end}")
