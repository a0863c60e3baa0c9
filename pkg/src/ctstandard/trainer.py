"""Phase-alternating GAN training with multiple competing copies and rollback.

Training alternates a D-phase (generators frozen, critics train until their
real/fake accuracy reaches ``theta_d``) and a G-phase (critics frozen,
generators train until every copy fools every critic on a ``theta_g``
share of a batch). A phase that exhausts ``t_max`` steps restores the
snapshot taken at its start and runs again; too many consecutive rollbacks
abort the run.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import SGD, Tape, backward
from .gan import (
    REAL,
    Critic,
    Generator,
    LossWeights,
    Verdict,
    clip_weights,
    classification_loss,
    critic_terms,
    generator_terms,
    latent_loss,
    pack_models,
    verdict_from_prob,
)
from .autodiff import functional as F
from .autodiff.tensor import Tensor
from .glcm import FEATURES, feature_errors
from .patches import Patch, augment_pair
from .reconstruct import hu_denormalize_array

log = logging.getLogger(__name__)

D_PHASE, G_PHASE = "D-phase", "G-phase"
ADVANCED, ROLLED_BACK = "advanced", "rolled_back"
CALIBRATION_MOMENTUM = 0.0  # weight of the old score statistics at each D step
TELEMETRY_COLUMNS = ("step", "epoch", "phase", "loss_adv_g", "loss_adv_d", "loss_lat", "loss_feat", "fool_rate", "rollback")


class DataExhaustedError(RuntimeError):
    """The batch stream ended in the middle of a phase."""


class TrainingAborted(RuntimeError):
    """A phase rolled back too many times in a row.

    ``telemetry`` holds the log so far and ``best`` the best completed epoch
    as a :class:`TrainResult` (None when no epoch finished).
    """

    def __init__(self, message: str, telemetry: Optional[List[Dict]] = None, best: Optional["TrainResult"] = None):
        super().__init__(message)
        self.telemetry = telemetry or []
        self.best = best


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-4
    lr_d: Optional[float] = None  # critic learning rate; None reuses lr
    momentum: float = 0.5
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 0.5
    clip_c: float = 0.01
    cls_weight: float = 1.0
    theta_g: float = 0.6
    theta_d: float = 0.7
    t_max: int = 200
    max_epochs: int = 100
    max_rollbacks: int = 5
    plateau_epochs: int = 5
    n_generators: int = 2
    n_critics: int = 2
    batch_size: int = 8
    probe_size: int = 8
    net_size: int = 64
    gen_channels: Tuple[int, ...] = (16, 32, 64, 64, 64, 64, 64)
    critic_channels: Tuple[int, ...] = (16, 32, 64, 64)
    augment: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            ("lr", self.lr > 0),
            ("lr_d", self.lr_d is None or self.lr_d > 0),
            ("momentum", 0 <= self.momentum < 1),
            ("cls_weight", self.cls_weight >= 0),
            ("theta_g", 0 <= self.theta_g),
            ("theta_d", 0 <= self.theta_d),
            ("t_max", self.t_max >= 1),
            ("max_epochs", self.max_epochs >= 0),
            ("max_rollbacks", self.max_rollbacks >= 1),
            ("plateau_epochs", self.plateau_epochs >= 1),
            ("n_generators", self.n_generators >= 1),
            ("n_critics", self.n_critics >= 1),
            ("batch_size", self.batch_size >= 1),
            ("probe_size", self.probe_size >= 1),
            ("net_size", self.net_size >= 4),
            ("gen_channels", len(self.gen_channels) == 7 and min(self.gen_channels) >= 1),
            ("critic_channels", len(self.critic_channels) == 4 and min(self.critic_channels) >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid {name}: {getattr(self, name)!r}")
        self.weights  # validates lambdas and clip bound

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.clip_c)

    def replace(self, **changes) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return TrainConfig(**values)


# --- data -------------------------------------------------------------------------

@dataclass
class PairSet:
    """Aligned gray patches: ``source`` is non-standard ``x'``, ``target`` standard ``x``."""

    source: np.ndarray  # [N, S, S]
    target: np.ndarray
    source_range: np.ndarray  # [N, 2] hu_min, hu_max
    target_range: np.ndarray

    def __post_init__(self):
        if self.source.shape != self.target.shape or self.source.ndim != 3:
            raise ValueError("source and target must be matching [N, S, S] stacks")
        if len(self.source) == 0:
            raise ValueError("empty pair set")

    def __len__(self) -> int:
        return len(self.source)

    @classmethod
    def from_patches(cls, source: Sequence[Patch], target: Sequence[Patch]) -> "PairSet":
        if len(source) != len(target):
            raise ValueError("patch lists differ in length")
        for a, b in zip(source, target):
            if a.origin != b.origin or a.size != b.size:
                raise ValueError(f"unaligned pair at origin {a.origin} / {b.origin}")
        return cls(
            np.stack([p.gray for p in source]).astype(np.float32),
            np.stack([p.gray for p in target]).astype(np.float32),
            np.array([(p.hu_min, p.hu_max) for p in source], dtype=np.float64),
            np.array([(p.hu_min, p.hu_max) for p in target], dtype=np.float64),
        )

    def subset(self, idx) -> "PairSet":
        return PairSet(self.source[idx], self.target[idx], self.source_range[idx], self.target_range[idx])


class PairStream:
    """Endless (or ``max_batches``-bounded) stream of augmented ``(x', x)`` batches."""

    def __init__(self, pairs: PairSet, batch_size: int, seed: int, augment: bool = True,
                 max_batches: Optional[int] = None):
        self.pairs = pairs
        self.batch_size = batch_size
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB47C]))
        self.augment = augment
        self.max_batches = max_batches
        self.served = 0

    def __iter__(self) -> "PairStream":
        return self

    def __next__(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.max_batches is not None and self.served >= self.max_batches:
            raise StopIteration
        self.served += 1
        idx = self.rng.integers(len(self.pairs), size=self.batch_size)
        xp, x = self.pairs.source[idx], self.pairs.target[idx]
        if self.augment:
            xp, x = augment_pair(xp, x, self.rng)
        return xp[:, None].astype(np.float32), x[:, None].astype(np.float32)


def _next_batch(stream: Iterator) -> Tuple[np.ndarray, np.ndarray]:
    try:
        return next(stream)
    except StopIteration:
        raise DataExhaustedError("data stream ended mid-phase") from None


# --- population and phase state ---------------------------------------------------

@dataclass
class Population:
    generators: List[Generator]
    critics: List[Critic]
    lr: float = 1e-4
    momentum: float = 0.5
    lr_d: Optional[float] = None
    g_opts: List[SGD] = field(default_factory=list)
    d_opts: List[SGD] = field(default_factory=list)

    def __post_init__(self):
        if not self.generators or not self.critics:
            raise ValueError("population needs at least one generator and one critic")
        if not self.g_opts:
            self.g_opts = [SGD(g.parameters(), self.lr, self.momentum) for g in self.generators]
        if not self.d_opts:
            lr_d = self.lr if self.lr_d is None else self.lr_d
            self.d_opts = [SGD(d.parameters(), lr_d, self.momentum) for d in self.critics]

    @classmethod
    def create(cls, config: TrainConfig) -> "Population":
        seeds = np.random.SeedSequence(config.seed).generate_state(config.n_generators + config.n_critics)
        gens = [Generator(config.gen_channels, config.net_size, seed=int(s)) for s in seeds[: config.n_generators]]
        crits = [Critic(config.critic_channels, config.net_size, seed=int(s), clip_c=config.clip_c) for s in seeds[config.n_generators :]]
        return cls(gens, crits, config.lr, config.momentum, config.lr_d)

    def snapshot(self, which: str) -> Dict:
        nets, opts = (self.generators, self.g_opts) if which == "G" else (self.critics, self.d_opts)
        return {
            "which": which,
            "params": [n.state_dict() for n in nets],
            "velocity": [o.state() for o in opts],
        }

    def restore(self, snap: Dict) -> None:
        nets, opts = (self.generators, self.g_opts) if snap["which"] == "G" else (self.critics, self.d_opts)
        for n, s in zip(nets, snap["params"]):
            n.load_state_dict(s)
        for o, v in zip(opts, snap["velocity"]):
            o.load_state(v)

    def checksums(self, which: str) -> List[str]:
        nets = self.generators if which == "G" else self.critics
        return [n.checksum() for n in nets]


@dataclass
class PhaseState:
    phase: str = D_PHASE
    step: int = 0
    t_max: int = 200
    theta_g: float = 0.6
    theta_d: float = 0.7
    epoch: int = 0
    max_epochs: int = 100
    snapshot: Optional[Dict] = field(default=None, repr=False)

    def __post_init__(self):
        if self.phase not in (D_PHASE, G_PHASE):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.step > self.t_max or self.epoch > self.max_epochs:
            raise ValueError("phase counters out of range")


@dataclass
class PhaseContext:
    """What the phase runners need besides the state machine itself."""

    weights: LossWeights = field(default_factory=LossWeights)
    cls_weight: float = 1.0
    probe: Optional[Tuple[np.ndarray, np.ndarray]] = None
    telemetry: List[Dict] = field(default_factory=list)
    global_step: int = 0


# --- evaluation helpers -----------------------------------------------------------

def _real_probs(d, img: np.ndarray) -> np.ndarray:
    out = d(Tensor(img.astype(d.dtype, copy=False)))
    return out.prob.data[:, REAL]


def _all_real(probs: Sequence[np.ndarray]) -> np.ndarray:
    ok = np.ones(len(probs[0]), dtype=bool)
    for p in probs:
        ok &= np.array([verdict_from_prob(float(v)) is Verdict.REAL for v in p])
    return ok


def fooling_rate(g, critics: Sequence, batch) -> float:
    """Share of synthesized patches judged real by every critic."""
    x_prime = np.asarray(batch, dtype=np.float64)
    if x_prime.ndim == 3:
        x_prime = x_prime[:, None]
    out, _ = g(Tensor(x_prime.astype(g.dtype, copy=False)))
    return float(_all_real([_real_probs(d, out.data) for d in critics]).mean())


def critic_accuracy(d, real: np.ndarray, fakes: Sequence[np.ndarray]) -> float:
    """Argmax accuracy over a real batch and every fake batch."""
    hits = [(_real_probs(d, real) >= 0.5)]
    hits += [(_real_probs(d, f) < 0.5) for f in fakes]
    return float(np.concatenate(hits).mean())


def probe_latent(generators: Sequence[Generator], probe) -> float:
    xp, x = probe
    vals = []
    for g in generators:
        _, z_gx = g.encode(Tensor(xp.astype(g.dtype, copy=False)))
        _, z_x = g.encode(Tensor(x.astype(g.dtype, copy=False)))
        vals.append(latent_loss(z_x, z_gx).item())
    return float(np.mean(vals))


def _row(ctx: PhaseContext, state: PhaseState, **values) -> None:
    row = {"step": ctx.global_step, "epoch": state.epoch, "phase": state.phase}
    row.update(values)
    row.setdefault("rollback", 0)
    ctx.telemetry.append(row)
    ctx.global_step += 1


def _begin(state: PhaseState, population: Population, phase: str) -> None:
    state.phase = phase
    state.step = 0
    state.snapshot = population.snapshot("D" if phase == D_PHASE else "G")


def _rollback(state: PhaseState, population: Population, ctx: PhaseContext) -> str:
    population.restore(state.snapshot)
    ctx.telemetry[-1]["rollback"] = 1
    log.info("%s epoch %d rolled back after %d steps", state.phase, state.epoch, state.step)
    return ROLLED_BACK


# --- phases -----------------------------------------------------------------------

def run_d_phase(state: PhaseState, population: Population, stream: Iterator,
                ctx: Optional[PhaseContext] = None) -> str:
    """Train the critics with generators frozen; ``advanced`` once every critic reaches ``theta_d``."""
    ctx = ctx or PhaseContext()
    _begin(state, population, D_PHASE)
    gens, crits = population.generators, population.critics
    lat = probe_latent(gens, ctx.probe) if ctx.probe is not None else float("nan")
    while True:
        xp, x = _next_batch(stream)
        fakes = [g(Tensor(xp.astype(g.dtype, copy=False)))[0].data for g in gens]
        accs, adv_d, feats, adv_g, fool_probs = [], [], [], [], [[] for _ in gens]
        grads = []
        for k, (d, opt) in enumerate(zip(crits, population.d_opts)):
            mine = (state.step + k) % len(gens)
            with Tape() as tape:
                terms = critic_terms(d, x, fakes[mine], ctx.weights)
                loss = terms.total
                if ctx.cls_weight:
                    loss = F.add(loss, F.mul(classification_loss(terms.real, terms.fake), ctx.cls_weight))
            grads.append((tape, loss))
            # refresh the score statistics on this batch before judging the critic
            raw_real, raw_fake = terms.real.raw.data, terms.fake.raw.data
            d.calibrate(np.concatenate([raw_real, raw_fake]), momentum=CALIBRATION_MOMENTUM)
            hits = [d.real_prob_from_raw(raw_real) >= 0.5]
            for j, f in enumerate(fakes):
                pf = d.real_prob_from_raw(raw_fake) if j == mine else _real_probs(d, f)
                hits.append(pf < 0.5)
                fool_probs[j].append(pf)
                if j == mine:
                    adv_g.append(-float(terms.fake.score.data.mean()))
            accs.append(float(np.concatenate(hits).mean()))
            adv_d.append(terms.adversarial.item())
            feats.append(terms.feature.item())
        fool = float(np.mean([_all_real(p).mean() for p in fool_probs]))
        _row(ctx, state, loss_adv_g=float(np.mean(adv_g)), loss_adv_d=float(np.mean(adv_d)),
             loss_lat=lat, loss_feat=float(np.mean(feats)), fool_rate=fool)
        log.debug("D step %d accuracy %s", state.step, accs)
        if min(accs) >= state.theta_d:
            log.info("%s epoch %d advanced after %d steps", state.phase, state.epoch, state.step)
            return ADVANCED
        if state.step >= state.t_max:
            return _rollback(state, population, ctx)
        for (tape, loss), d, opt in zip(grads, crits, population.d_opts):
            opt.step(backward(loss, tape))
            clip_weights(d, ctx.weights.clip_c)
        state.step += 1


def run_g_phase(state: PhaseState, population: Population, stream: Iterator,
                ctx: Optional[PhaseContext] = None) -> str:
    """Train the generators with critics frozen; ``advanced`` once every copy fools every critic."""
    ctx = ctx or PhaseContext()
    _begin(state, population, G_PHASE)
    gens, crits = population.generators, population.critics
    flags = [[t.requires_grad for t in d.parameters()] for d in crits]
    for d in crits:
        for t in d.parameters():
            t.requires_grad = False
    try:
        while True:
            xp, x = _next_batch(stream)
            lat = probe_latent(gens, ctx.probe) if ctx.probe is not None else float("nan")
            rates, adv_g, adv_d, feats, grads = [], [], [], [], []
            reals = [d(Tensor(x.astype(d.dtype, copy=False))) for d in crits]
            for i, g in enumerate(gens):
                mine = (state.step + i) % len(crits)
                with Tape() as tape:
                    terms = generator_terms(g, crits[mine], x, xp, ctx.weights)
                grads.append((tape, terms.total))
                out = terms.output.data
                probs = []
                for k, (d, real) in enumerate(zip(crits, reals)):
                    fake = d(Tensor(out))
                    probs.append(fake.prob.data[:, REAL])
                    if k == mine:
                        adv_g.append(terms.adversarial.item())
                        adv_d.append(-(float(real.score.data.mean()) - float(fake.score.data.mean())))
                        feats.append(float(np.abs(fake.features.data - real.features.data).mean()))
                rates.append(float(_all_real(probs).mean()))
            _row(ctx, state, loss_adv_g=float(np.mean(adv_g)), loss_adv_d=float(np.mean(adv_d)),
                 loss_lat=lat, loss_feat=float(np.mean(feats)), fool_rate=float(np.mean(rates)))
            log.debug("G step %d fooling %s", state.step, rates)
            if min(rates) >= state.theta_g:
                log.info("%s epoch %d advanced after %d steps", state.phase, state.epoch, state.step)
                return ADVANCED
            if state.step >= state.t_max:
                return _rollback(state, population, ctx)
            for (tape, loss), opt in zip(grads, population.g_opts):
                opt.step(backward(loss, tape))
            state.step += 1
    finally:
        for d, fl in zip(crits, flags):
            for t, f in zip(d.parameters(), fl):
                t.requires_grad = f


# --- validation -------------------------------------------------------------------

def synthesize_hu(g, pairs: PairSet, batch_size: int = 16) -> np.ndarray:
    """Generator output on ``pairs.source`` mapped back to HU with each source patch's range."""
    outs = []
    for start in range(0, len(pairs), batch_size):
        xp = pairs.source[start : start + batch_size, None].astype(g.dtype)
        outs.append(g(Tensor(xp))[0].data[:, 0])
    gray = np.concatenate(outs).astype(np.float64)
    return np.stack([hu_denormalize_array(p, lo, hi) for p, (lo, hi) in zip(gray, pairs.source_range)])


def pairs_hu(gray: np.ndarray, ranges: np.ndarray) -> np.ndarray:
    lo, hi = ranges[:, 0, None, None], ranges[:, 1, None, None]
    return gray.astype(np.float64) * (hi - lo) + lo


def validation_errors(g, pairs: PairSet) -> Dict[str, float]:
    """Mean GLCM relative error per feature between synthesized and target patches."""
    syn = synthesize_hu(g, pairs)
    tgt = pairs_hu(pairs.target, pairs.target_range)
    return feature_errors(syn, tgt).errors


def mean_error(errors: Dict[str, float]) -> float:
    vals = [v for v in errors.values() if np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("inf")


# --- full run ---------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Dict[str, np.ndarray]
    telemetry: List[Dict]
    validation: List[Dict[str, float]]  # per epoch, errors of the best copy
    epochs_run: int
    best_epoch: int
    rollbacks: int
    generator: Generator
    critics: List[Critic]


def train(config: TrainConfig, train_pairs: PairSet, val_pairs: Optional[PairSet] = None,
          stream: Optional[Iterator] = None, progress: Optional[Callable[[int, Dict[str, float]], None]] = None) -> TrainResult:
    """Run D-phase / G-phase epochs until ``max_epochs`` or a validation plateau.

    The checkpoint holds the generator copy with the lowest mean validation
    GLCM error seen so far, together with the critics of that epoch.
    """
    config.validate()
    population = Population.create(config)
    stream = stream if stream is not None else PairStream(train_pairs, config.batch_size, config.seed, config.augment)
    probe_idx = np.random.default_rng(np.random.SeedSequence([config.seed, 0x9B0])).choice(
        len(train_pairs), size=min(config.probe_size, len(train_pairs)), replace=False)
    probe = (train_pairs.source[probe_idx, None], train_pairs.target[probe_idx, None])
    ctx = PhaseContext(config.weights, config.cls_weight, probe)
    state = PhaseState(D_PHASE, 0, config.t_max, config.theta_g, config.theta_d, 0, config.max_epochs)
    val_pairs = val_pairs if val_pairs is not None else train_pairs

    best = (float("inf"), 0, population.generators[0].copy(), [d.copy() for d in population.critics])
    history: List[Dict[str, float]] = []
    total_rollbacks = 0
    epochs_run = 0
    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        for runner in (run_d_phase, run_g_phase):
            consecutive = 0
            while runner(state, population, stream, ctx) == ROLLED_BACK:
                consecutive += 1
                total_rollbacks += 1
                if consecutive >= config.max_rollbacks:
                    partial = None
                    if epochs_run:
                        _, best_epoch, g_best, d_best = best
                        partial = TrainResult(pack_models(g_best, d_best), ctx.telemetry, history, epochs_run,
                                              best_epoch, total_rollbacks, g_best, d_best)
                    raise TrainingAborted(
                        f"{state.phase} of epoch {epoch} rolled back {consecutive} times in a row "
                        f"(theta_g={state.theta_g}, theta_d={state.theta_d}, t_max={state.t_max})",
                        ctx.telemetry, partial,
                    )
        epochs_run = epoch
        scored = [(mean_error(e), i, e) for i, e in
                  ((i, validation_errors(g, val_pairs)) for i, g in enumerate(population.generators))]
        score, idx, errs = min(scored, key=lambda t: (t[0], t[1]))
        history.append(errs)
        if progress is not None:
            progress(epoch, errs)
        log.info("epoch %d: mean validation error %.4f (copy %d)", epoch, score, idx)
        if score < best[0]:
            best = (score, epoch, population.generators[idx].copy(), [d.copy() for d in population.critics])
        elif epoch - best[1] >= config.plateau_epochs:
            break
    _, best_epoch, g_best, d_best = best
    return TrainResult(pack_models(g_best, d_best), ctx.telemetry, history, epochs_run, best_epoch,
                       total_rollbacks, g_best, d_best)


def telemetry_csv(rows: Sequence[Dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TELEMETRY_COLUMNS)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], (int, str)) else f"{r[c]:.8g}" for c in TELEMETRY_COLUMNS])
    return buf.getvalue()


def write_telemetry(path, rows: Sequence[Dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(telemetry_csv(rows))


def read_telemetry(path) -> List[Dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            row = {k: float(v) for k, v in r.items() if k not in ("phase",)}
            for k in ("step", "epoch", "rollback"):
                row[k] = int(row[k])
            row["phase"] = r["phase"]
            out.append(row)
        return out


def phase_segments(rows: Sequence[Dict]) -> List[List[Dict]]:
    """Split telemetry into runs of consecutive rows sharing a phase attempt."""
    segs: List[List[Dict]] = []
    for r in rows:
        if segs and segs[-1][-1]["phase"] == r["phase"] and segs[-1][-1]["epoch"] == r["epoch"] \
                and not segs[-1][-1]["rollback"]:
            segs[-1].append(r)
        else:
            segs.append([r])
    return segs
