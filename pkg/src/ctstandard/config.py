"""Plain-text ``key = value`` run configuration.

One flat namespace covers sampling, training, reconstruction and evaluation so
a single file can drive every command. Lines starting with ``#`` are comments.
Every value is converted to the declared type and range-checked when loaded.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, Iterable, Mapping, Optional, Tuple

from .reconstruct import VARIANTS, ReconstructConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Unknown key, unparsable value or value outside its documented range."""


def _opt(check: Callable[[Any], bool], doc: str, **kw):
    return field(metadata={"check": check, "doc": doc}, **kw)


def _unit(v) -> bool:
    return 0.0 <= v <= 1.0


def _pos(v) -> bool:
    return v > 0


@dataclass
class RunConfig:
    seed: int = _opt(lambda v: v >= 0, "master seed for sampling, init and shuffling", default=0)
    # training
    lr: float = _opt(_pos, "generator learning rate", default=1e-4)
    lr_d: Optional[float] = _opt(lambda v: v is None or v > 0, "critic learning rate (none = lr)", default=None)
    momentum: float = _opt(lambda v: 0.0 <= v < 1.0, "SGD momentum in [0,1)", default=0.5)
    lambda1: float = _opt(_unit, "feature-loss weight in [0,1]", default=0.5)
    lambda2: float = _opt(_unit, "latent-loss weight in [0,1]", default=0.5)
    lambda3: float = _opt(_unit, "L1 weight in [0,1]", default=0.5)
    clip_c: float = _opt(_pos, "critic weight clip bound", default=0.01)
    cls_weight: float = _opt(lambda v: v >= 0, "weight of the real/fake cross-entropy term", default=1.0)
    theta_g: float = _opt(lambda v: 0.0 <= v <= 2.0, "fooling rate that ends a G-phase", default=0.6)
    theta_d: float = _opt(lambda v: 0.0 <= v <= 2.0, "critic accuracy that ends a D-phase", default=0.7)
    t_max: int = _opt(lambda v: v >= 1, "step cap per phase", default=200)
    max_epochs: int = _opt(lambda v: v >= 0, "epoch cap", default=100)
    max_rollbacks: int = _opt(lambda v: v >= 1, "consecutive rollbacks that abort training", default=5)
    plateau_epochs: int = _opt(lambda v: v >= 1, "epochs without validation gain before stopping", default=5)
    n_generators: int = _opt(lambda v: v >= 1, "generator copies", default=2)
    n_critics: int = _opt(lambda v: v >= 1, "critic copies", default=2)
    batch_size: int = _opt(lambda v: v >= 1, "patches per training step", default=8)
    probe_size: int = _opt(lambda v: v >= 1, "fixed pairs used for latent telemetry", default=8)
    gen_channels: Tuple[int, ...] = _opt(
        lambda v: len(v) == 7 and min(v) >= 1, "generator channel plan (7 ints)", default=(16, 32, 64, 64, 64, 64, 64)
    )
    critic_channels: Tuple[int, ...] = _opt(
        lambda v: len(v) == 4 and min(v) >= 1, "critic hidden channels (4 ints)", default=(16, 32, 64, 64)
    )
    augment: bool = _opt(lambda v: True, "random 90-degree rotations and shifts", default=True)
    # patches
    net_size: int = _opt(lambda v: v >= 8, "network input side in pixels", default=64)
    patch_min: int = _opt(lambda v: v >= 4, "smallest sampled patch side", default=32)
    patch_max: int = _opt(lambda v: v >= 4, "largest sampled patch side", default=64)
    min_patches: int = _opt(lambda v: v >= 2, "patches required per slice", default=2)
    # reconstruction
    variant: str = _opt(lambda v: v in VARIANTS, "pipeline variant: " + ", ".join(VARIANTS), default="full")
    seam_factor: float = _opt(_pos, "seam flag threshold as a multiple of the median gradient", default=3.0)
    crop: int = _opt(lambda v: v >= 1, "border pixels cropped during repair", default=2)
    max_repairs: int = _opt(lambda v: v >= 0, "repair iterations", default=3)
    drop_min_offset: bool = _opt(lambda v: True, "map gray back to HU without the +MIN shift", default=False)
    recon_batch: int = _opt(lambda v: v >= 1, "patches per generator call during reconstruction", default=32)
    # evaluation
    glcm_levels: int = _opt(lambda v: v >= 2, "GLCM gray levels", default=32)
    threads: int = _opt(lambda v: v >= 1, "worker cap", default=1)

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not f.metadata["check"](value):
                raise ConfigError(f"{f.name} = {value!r} is out of range ({f.metadata['doc']})")
        if self.patch_min > self.patch_max:
            raise ConfigError(f"patch_min {self.patch_min} exceeds patch_max {self.patch_max}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        try:
            return TrainConfig(**{k: v for k, v in self.as_dict().items() if k in names})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def reconstruct_config(self) -> ReconstructConfig:
        return ReconstructConfig(
            variant=self.variant,
            size_range=(self.patch_min, self.patch_max),
            seed=self.seed,
            seam_factor=self.seam_factor,
            crop=self.crop,
            max_repairs=self.max_repairs,
            drop_min_offset=self.drop_min_offset,
            batch_size=self.recon_batch,
            threads=self.threads,
        )

    def as_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.as_dict().items())


def _kind(f: dataclasses.Field) -> str:
    return str(f.type).replace("typing.", "")


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def convert(name: str, raw: str) -> Any:
    """Parse ``raw`` as the declared type of field ``name``."""
    spec = {f.name: f for f in fields(RunConfig)}
    if name not in spec:
        raise ConfigError(f"unknown key {name!r}")
    kind = _kind(spec[name])
    text = raw.strip()
    try:
        if kind.startswith("Optional"):
            return None if text.lower() in ("", "none") else float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("Tuple"):
            return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str) -> Dict[str, str]:
    """Raw ``key -> value`` strings; later duplicates win."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_config(raw: Mapping[str, str] = (), overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    values = {k: convert(k, v) for k, v in dict(raw).items()}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        values[k] = convert(k, v) if isinstance(v, str) else v
    return RunConfig(**values)


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    raw: Dict[str, str] = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return build_config(raw, overrides)


def parse_assignments(items: Iterable[str]) -> Dict[str, str]:
    """``["lr=0.01", "seed=3"]`` from ``--set`` flags."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = v
    return out


def field_docs() -> Dict[str, Tuple[str, Any]]:
    return {f.name: (f.metadata["doc"], f.default) for f in fields(RunConfig)}
