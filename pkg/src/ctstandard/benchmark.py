"""Phantom benchmark shared by the acceptance suite and the demo scripts.

A fixed set of phantom seeds is rendered with the standard and a non-standard
protocol. Three training variants (full loss, no latent term, no feature term)
are fitted on patch pairs, and held-out volumes are standardized with each of
the four reconstruction variants. All GLCM errors are measured on whole slices
against the standard rendering of the same phantom.

Results are cached as JSON plus checkpoints under a directory keyed by a hash of
the benchmark settings, so repeated runs only pay for training once.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .dicomio import HU_MAX, HU_MIN
from .gan import unpack_models
from .glcm import FEATURES, feature_errors
from .patches import sample_patch_pairs
from .phantom import STANDARD_PROTOCOL, Volume, apply_protocol, generate_phantom_volume, get_protocol, protocol_seed
from .reconstruct import VARIANTS, ReconstructConfig, reconstruct_slice
from .trainer import PairSet, TrainConfig, read_telemetry, train, write_telemetry

log = logging.getLogger(__name__)

TRAIN_VARIANTS: Dict[str, Dict[str, float]] = {
    "full": {},
    "no_latent": {"lambda2": 0.0},
    "no_feature": {"lambda1": 0.0},
}


def default_train_config() -> TrainConfig:
    """Desk-scale training settings used by the benchmark."""
    return TrainConfig(
        seed=1,
        lr=3e-4,
        lr_d=2e-4,
        theta_g=0.75,
        theta_d=0.6,
        t_max=200,
        max_epochs=30,
        gen_channels=(8, 16, 32, 32, 32, 32, 32),
        critic_channels=(8, 16, 32, 32),
    )


@dataclass
class BenchmarkSpec:
    train_seeds: Tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    val_seeds: Tuple[int, ...] = (50,)
    test_seeds: Tuple[int, ...] = (100, 101)
    volume: Tuple[int, int, int] = (8, 128, 128)
    test_volume: Tuple[int, int, int] = (4, 128, 128)
    patch_range: Tuple[int, int] = (64, 64)
    standard: str = STANDARD_PROTOCOL
    nonstandard: str = "BR40-sim"
    train: TrainConfig = field(default_factory=default_train_config)
    recon_seed: int = 0
    revision: int = 2  # bump when training or reconstruction behaviour changes, to retire old caches

    def key(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def phantom_pair(seed: int, shape, standard: str, nonstandard: str) -> Tuple[Volume, Volume]:
    """Standard and non-standard renderings of one phantom, quantized as a DICOM round trip would."""
    truth = generate_phantom_volume(seed, shape)
    out = []
    for name in (standard, nonstandard):
        v = apply_protocol(truth, get_protocol(name), protocol_seed(seed, name))
        v.hu = np.clip(np.rint(v.hu), HU_MIN, HU_MAX)
        out.append(v)
    return out[0], out[1]


def pair_set(spec: BenchmarkSpec, seeds: Sequence[int]) -> PairSet:
    src, tgt = [], []
    for seed in seeds:
        std, non = phantom_pair(seed, spec.volume, spec.standard, spec.nonstandard)
        a, b = sample_patch_pairs(std, non, spec.patch_range, rng_seed=seed, out_size=spec.train.net_size)
        src += a
        tgt += b
    return PairSet.from_patches(src, tgt)


def test_slices(spec: BenchmarkSpec) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """``(inputs, targets)`` HU slices of the held-out phantoms."""
    inputs, targets = [], []
    for seed in spec.test_seeds:
        std, non = phantom_pair(seed, spec.test_volume, spec.standard, spec.nonstandard)
        inputs += list(non.hu)
        targets += list(std.hu)
    return inputs, targets


def slice_errors(outputs: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> Dict[str, float]:
    return feature_errors(outputs, targets).errors


def standardize_slices(inputs, g, critics, variant: str, seed: int = 0, size_range=(64, 64)) -> List[np.ndarray]:
    cfg = ReconstructConfig(variant=variant, size_range=tuple(size_range), seed=seed)
    out = []
    for k, hu in enumerate(inputs):
        fused, _ = reconstruct_slice(hu, g, critics, cfg, k)
        out.append(np.clip(np.rint(fused), HU_MIN, HU_MAX))
    return out


@dataclass
class TrainRecord:
    name: str
    seconds: float
    epochs_run: int
    best_epoch: int
    rollbacks: int
    validation: List[Dict[str, float]]
    test_errors: Dict[str, float]  # full pipeline on the test slices
    aborted: Optional[str] = None


@dataclass
class BenchmarkResult:
    key: str
    input_errors: Dict[str, float]
    training: Dict[str, TrainRecord]
    reconstruction: Dict[str, Dict[str, float]]  # pipeline variant -> errors, full-loss model
    telemetry_path: str

    def telemetry(self) -> List[Dict]:
        return read_telemetry(self.telemetry_path)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchmarkResult":
        raw = json.loads(text)
        raw["training"] = {k: TrainRecord(**v) for k, v in raw["training"].items()}
        return cls(**raw)


def default_cache_dir() -> str:
    return os.environ.get("CTSTANDARD_BENCH_DIR", os.path.join(os.getcwd(), ".bench-cache"))


def _train_one(spec: BenchmarkSpec, name: str, train_pairs, val_pairs, inputs, targets, out_dir, say):
    cfg = spec.train.replace(**TRAIN_VARIANTS[name])
    t0 = time.perf_counter()
    from .trainer import TrainingAborted

    aborted = None
    try:
        res = train(cfg, train_pairs, val_pairs,
                    progress=lambda e, errs: say(f"  {name} epoch {e}: " + " ".join(f"{k[:4]}={v:.3f}" for k, v in errs.items())))
    except TrainingAborted as exc:
        seconds = time.perf_counter() - t0
        write_telemetry(os.path.join(out_dir, f"{name}.telemetry.csv"), exc.telemetry)
        say(f"  {name} aborted after {seconds:.0f}s: {exc}")
        if exc.best is None:
            return TrainRecord(name, seconds, 0, 0, 0, [], {f: float("nan") for f in FEATURES}, str(exc)), None
        res, aborted = exc.best, str(exc)  # keep the best completed epoch
    seconds = time.perf_counter() - t0
    save_checkpoint(os.path.join(out_dir, f"{name}.ckpt"), res.checkpoint)
    write_telemetry(os.path.join(out_dir, f"{name}.telemetry.csv"), res.telemetry)
    outs = standardize_slices(inputs, res.generator, res.critics, "full", spec.recon_seed, spec.patch_range)
    errs = slice_errors(outs, targets)
    say(f"  {name}: {seconds:.0f}s, {res.epochs_run} epochs, test " + " ".join(f"{k[:4]}={v:.3f}" for k, v in errs.items()))
    rec = TrainRecord(name, seconds, res.epochs_run, res.best_epoch, res.rollbacks, res.validation, errs, aborted)
    return rec, res


def run_benchmark(spec: Optional[BenchmarkSpec] = None, cache_dir: Optional[str] = None,
                  say: Callable[[str], None] = log.info, refresh: bool = False) -> BenchmarkResult:
    """Train the three loss variants and score the four pipeline variants, reusing a cached run if present."""
    spec = spec or BenchmarkSpec()
    out_dir = os.path.join(cache_dir or default_cache_dir(), spec.key())
    summary = os.path.join(out_dir, "result.json")
    if not refresh and os.path.isfile(summary):
        with open(summary) as fh:
            return BenchmarkResult.from_json(fh.read())
    os.makedirs(out_dir, exist_ok=True)

    train_pairs, val_pairs = pair_set(spec, spec.train_seeds), pair_set(spec, spec.val_seeds)
    inputs, targets = test_slices(spec)
    input_errors = slice_errors(inputs, targets)
    say(f"{len(train_pairs)} training pairs, {len(inputs)} test slices; input error "
        + " ".join(f"{k[:4]}={v:.3f}" for k, v in input_errors.items()))

    training, full = {}, None
    for name in TRAIN_VARIANTS:
        rec, res = _train_one(spec, name, train_pairs, val_pairs, inputs, targets, out_dir, say)
        training[name] = rec
        if name == "full":
            full = res

    recon: Dict[str, Dict[str, float]] = {}
    if full is not None:
        for variant in VARIANTS:
            outs = standardize_slices(inputs, full.generator, full.critics, variant, spec.recon_seed, spec.patch_range)
            recon[variant] = slice_errors(outs, targets)
            say(f"  pipeline {variant}: " + " ".join(f"{k[:4]}={v:.3f}" for k, v in recon[variant].items()))
    result = BenchmarkResult(spec.key(), input_errors, training, recon,
                             os.path.join(out_dir, "full.telemetry.csv"))
    with open(summary, "w") as fh:
        fh.write(result.to_json())
    return result


def load_models(result: BenchmarkResult, name: str = "full"):
    path = os.path.join(os.path.dirname(result.telemetry_path), f"{name}.ckpt")
    return unpack_models(load_checkpoint(path))


# --- criteria ---------------------------------------------------------------------

def ablation_wins(result: BenchmarkResult) -> Dict[str, bool]:
    """Per feature: full-loss error strictly below both ablations."""
    full = result.training["full"].test_errors
    others = [result.training[n].test_errors for n in TRAIN_VARIANTS if n != "full"]
    return {f: all(full[f] < o[f] for o in others) for f in FEATURES}


def pipeline_monotone(result: BenchmarkResult, feature: str = "contrast") -> bool:
    vals = [result.reconstruction[v][feature] for v in VARIANTS]
    return all(a > b for a, b in zip(vals, vals[1:]))


def improvement(result: BenchmarkResult, variant: str = "full") -> Dict[str, float]:
    """Relative error reduction per feature against the raw input (0.3 = 30% lower)."""
    errs = result.reconstruction[variant]
    return {f: 1.0 - errs[f] / result.input_errors[f] for f in FEATURES}


def latent_phase_stats(rows: Sequence[Dict]) -> Tuple[float, float, int]:
    """Share of trained G-phases whose latent loss fell, worst relative drift inside a D-phase, G-phases counted.

    G-phases that advanced before any update (a single telemetry row) are not counted.
    """
    from .trainer import D_PHASE, G_PHASE, phase_segments

    falls, counted, drift = 0, 0, 0.0
    for seg in phase_segments(rows):
        lat = [float(r["loss_lat"]) for r in seg]
        if seg[0]["phase"] == G_PHASE and len(seg) > 1:
            counted += 1
            falls += lat[-1] < lat[0]
        elif seg[0]["phase"] == D_PHASE and lat[0]:
            drift = max(drift, max(abs(v - lat[0]) for v in lat) / abs(lat[0]))
    return (falls / counted if counted else float("nan")), drift, counted
