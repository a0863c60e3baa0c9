"""U-Net generator, two-headed convolutional critic and the GAN loss terms.

Generator: seven encoder convolutions (4x4, stride 2, leaky ReLU) halve the
patch until it is 1x1; remaining encoder layers are 1x1 convolutions at the
bottleneck. Seven transposed convolutions mirror them, and decoder layer
``7 - i`` also receives encoder layer ``i``'s output by channel
concatenation. A logistic output keeps the synthesized patch in ``[0, 1]``.

Critic: four downsampling convolutions, then a fifth layer producing a map
whose standardized spatial mean is the Wasserstein score ``f``. The penultimate map is the
feature space used by the feature loss. A softmax head turns the score into
a real/fake probability through a fixed temperature and a learned threshold. Each
critic convolution multiplies its clipped weights by a fixed gain so the
score keeps unit scale under weight clipping.
"""

from __future__ import annotations

import contextlib
import enum
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .autodiff.tensor import ShapeError

DEFAULT_GENERATOR_CHANNELS = (16, 32, 64, 64, 64, 64, 64)
DEFAULT_CRITIC_CHANNELS = (16, 32, 64, 64)
LEAK = 0.2
INPUT_EPS = 1e-4  # keeps the input logit finite
REAL, FAKE = 0, 1  # softmax class order


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 0.5
    clip_c: float = 0.01

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if not self.clip_c > 0:
            raise ValueError("clip_c must be positive")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    padding: int
    transpose: bool = False


class Network:
    """Named parameter container shared by the generator and the critic."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()  # state that is not trained

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = (set(self.params) | set(self.buffers)) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters: {sorted(missing)}")
        for k, b in self.buffers.items():
            b[...] = state[k]
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ShapeError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data[...] = state[k]

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, t in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        for k, b in self.buffers.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "Network":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    @contextlib.contextmanager
    def frozen(self) -> Iterator["Network"]:
        """Temporarily stop parameters from requiring gradients."""
        flags = [t.requires_grad for t in self.params.values()]
        for t in self.params.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for t, f in zip(self.params.values(), flags):
                t.requires_grad = f


def _conv(x: Tensor, spec: LayerSpec, w: Tensor, b: Tensor, gain: float = 1.0) -> Tensor:
    op = F.conv2d_transpose if spec.transpose else F.conv2d
    if gain != 1.0:
        w = F.mul(w, gain)
    return F.add_channel_bias(op(x, w, spec.stride, spec.padding), b)


def _fan_in(spec: LayerSpec) -> int:
    # a stride-s transposed conv feeds each output pixel from (k/s)^2 taps per channel
    taps = spec.kernel * spec.kernel // (spec.stride * spec.stride if spec.transpose else 1)
    return spec.in_ch * max(taps, 1)


def _kaiming_bound(spec: LayerSpec) -> float:
    return float(np.sqrt(6.0 / ((1.0 + LEAK ** 2) * _fan_in(spec))))


def _init(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


class Generator(Network):
    def __init__(
        self,
        channels: Sequence[int] = DEFAULT_GENERATOR_CHANNELS,
        in_size: int = 64,
        seed: int = 0,
        dtype=np.float32,
        init_scale: Optional[float] = None,
    ):
        super().__init__(dtype)
        channels = tuple(int(c) for c in channels)
        if len(channels) != 7:
            raise ValueError("generator needs a 7-entry channel plan")
        self.channels = channels
        self.in_size = int(in_size)
        rng = np.random.default_rng(seed)

        self.encoder: List[LayerSpec] = []
        size = self.in_size
        in_ch = 1
        for i, out_ch in enumerate(channels, start=1):
            if size > 1:
                spec = LayerSpec(f"enc{i}", in_ch, out_ch, 4, 2, 1)
                size = F.conv_output_size(size, 4, 2, 1)
            else:
                spec = LayerSpec(f"enc{i}", in_ch, out_ch, 1, 1, 0)
            self.encoder.append(spec)
            in_ch = out_ch
        if size < 1:
            raise ValueError(f"input size {in_size} collapses to nothing")
        self.bottleneck_size = size

        self.decoder: List[LayerSpec] = []
        for j in range(7):
            mirror = self.encoder[6 - j]
            in_ch = channels[6] if j == 0 else 2 * channels[6 - j]
            out_ch = channels[5 - j] if j < 6 else 1
            if mirror.stride == 2:
                spec = LayerSpec(f"dec{j}", in_ch, out_ch, 4, 2, 1, transpose=True)
            else:
                spec = LayerSpec(f"dec{j}", in_ch, out_ch, 1, 1, 0, transpose=True)
            self.decoder.append(spec)

        # uniform init; the default bound keeps activation scale through leaky ReLUs.
        # The last decoder layer starts at zero so an untrained generator is the identity.
        for spec in self.encoder + self.decoder:
            bound = init_scale if init_scale is not None else _kaiming_bound(spec)
            if init_scale is None and spec is self.decoder[-1]:
                bound = 0.0
            shape = (spec.in_ch, spec.out_ch) if spec.transpose else (spec.out_ch, spec.in_ch)
            self._add(f"{spec.name}.w", _init(rng, shape + (spec.kernel, spec.kernel), bound))
            self._add(f"{spec.name}.b", np.zeros(spec.out_ch))

    @property
    def latent_length(self) -> int:
        return self.channels[6] * self.bottleneck_size ** 2

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.in_size, self.in_size):
            raise ShapeError(f"generator expects [N,1,{self.in_size},{self.in_size}], got {x.shape}")

    def encode(self, x: Tensor) -> Tuple[List[Tensor], Tensor]:
        """Encoder activations and the flattened bottleneck latent."""
        self._check_input(x)
        acts = []
        h = x
        for spec in self.encoder:
            h = F.leaky_relu(_conv(h, spec, self.params[f"{spec.name}.w"], self.params[f"{spec.name}.b"]), LEAK)
            acts.append(h)
        z = F.reshape(acts[-1], (x.shape[0], -1))
        return acts, z

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        acts, z = self.encode(x)
        h = acts[-1]
        for j, spec in enumerate(self.decoder):
            if j > 0:
                h = F.concat([h, acts[6 - j]], axis=1)
            h = _conv(h, spec, self.params[f"{spec.name}.w"], self.params[f"{spec.name}.b"])
            if j < 6:
                h = F.leaky_relu(h, LEAK)
        # decoder output is a correction in logit space on top of the input
        xc = np.clip(x.data.astype(np.float64), INPUT_EPS, 1.0 - INPUT_EPS)
        base = Tensor(np.log(xc / (1.0 - xc)).astype(x.data.dtype))
        return F.sigmoid(F.add(h, base)), z

    __call__ = forward

    def copy(self) -> "Generator":
        g = Generator.__new__(Generator)
        g.__dict__.update(self.__dict__)
        Network.__init__(g, self.dtype)
        for k, t in self.params.items():
            g._add(k, t.data.copy())
        return g


@dataclass
class CriticOutput:
    score: Tensor  # [N]
    prob: Tensor  # [N, 2], column REAL then FAKE
    features: Tensor  # penultimate activation map
    logits: Tensor
    raw: Optional[Tensor] = None  # spatial mean of the final map before standardization


class Critic(Network):
    def __init__(
        self,
        channels: Sequence[int] = DEFAULT_CRITIC_CHANNELS,
        in_size: int = 64,
        seed: int = 0,
        dtype=np.float32,
        clip_c: float = 0.01,
        head_temp: float = 10.0,
    ):
        super().__init__(dtype)
        channels = tuple(int(c) for c in channels)
        if len(channels) != 4:
            raise ValueError("critic needs a 4-entry channel plan (the fifth layer is the score map)")
        self.channels = channels
        self.in_size = int(in_size)
        rng = np.random.default_rng(seed)
        self.layers: List[LayerSpec] = []
        size, in_ch = self.in_size, 1
        for i, out_ch in enumerate(channels, start=1):
            if size > 1:
                self.layers.append(LayerSpec(f"c{i}", in_ch, out_ch, 4, 2, 1))
                size = F.conv_output_size(size, 4, 2, 1)
            else:
                self.layers.append(LayerSpec(f"c{i}", in_ch, out_ch, 1, 1, 0))
            in_ch = out_ch
        if size >= 3:
            self.layers.append(LayerSpec("c5", in_ch, 1, 4, 1, 1))
        else:
            self.layers.append(LayerSpec("c5", in_ch, 1, 1, 1, 0))
        # Stored weights live in [-c, c]; a fixed per-layer gain maps that range
        # onto the variance-preserving bound, so clipping bounds the Lipschitz
        # constant without shrinking the score towards zero layer by layer.
        self.clip_c = float(clip_c)
        self.gains: Dict[str, float] = {}
        for spec in self.layers:
            self.gains[spec.name] = 1.0 / (self.clip_c * np.sqrt(_fan_in(spec)))
            self._add(f"{spec.name}.w", _init(rng, (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel), self.clip_c))
            self._add(f"{spec.name}.b", np.zeros(spec.out_ch))
        # score f = (mean of final map - mu) / sigma with running statistics
        # refreshed by calibrate(); softmax head gap = head_temp * (f - threshold)
        self.head_temp = float(head_temp)
        self._add("head.threshold", np.zeros(1))
        self.buffers["score.mu"] = np.zeros(1)
        self.buffers["score.sigma"] = np.ones(1)
        self.buffers["score.calibrated"] = np.zeros(1)

    def lipschitz_parameters(self) -> List[Tensor]:
        """Parameters of the score function ``f``; these are the ones clipped."""
        return [t for k, t in self.params.items() if not k.startswith("head.")]

    def forward(self, x: Tensor) -> CriticOutput:
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.in_size, self.in_size):
            raise ShapeError(f"critic expects [N,1,{self.in_size},{self.in_size}], got {x.shape}")
        h = x
        features = None
        for spec in self.layers:
            h = _conv(h, spec, self.params[f"{spec.name}.w"], self.params[f"{spec.name}.b"], self.gains[spec.name])
            if spec.name != "c5":
                h = F.leaky_relu(h, LEAK)
                features = h
        raw = F.mean(h, axis=(1, 2, 3))
        mu, sigma = float(self.buffers["score.mu"][0]), float(self.buffers["score.sigma"][0])
        score = F.mul(F.sub(raw, mu), 1.0 / sigma)
        # the head reads a detached score: cross-entropy trains only the head
        half_gap = F.mul(F.sub(score.detach(), self.params["head.threshold"]), 0.5 * self.head_temp)
        logits = F.concat([F.reshape(half_gap, (-1, 1)), F.reshape(F.mul(half_gap, -1.0), (-1, 1))], axis=1)
        return CriticOutput(score, F.softmax(logits), features, logits, raw)

    __call__ = forward

    def real_prob_from_raw(self, raw: np.ndarray) -> np.ndarray:
        """Real-class probability for precomputed raw scores under the current statistics."""
        f = (np.asarray(raw, dtype=np.float64) - self.buffers["score.mu"][0]) / self.buffers["score.sigma"][0]
        gap = self.head_temp * (f - float(self.params["head.threshold"].data[0]))
        return 0.5 * (1.0 + np.tanh(0.5 * gap))

    def calibrate(self, raw_scores: np.ndarray, momentum: float = 0.9) -> None:
        """Fold the mean and spread of a batch of raw scores into the running statistics."""
        raw_scores = np.asarray(raw_scores, dtype=np.float64)
        mu, sigma = raw_scores.mean(), max(raw_scores.std(), 1e-12)
        b = self.buffers
        if b["score.calibrated"][0] == 0:
            b["score.mu"][0], b["score.sigma"][0] = mu, sigma
            b["score.calibrated"][0] = 1.0
        else:
            b["score.mu"][0] = momentum * b["score.mu"][0] + (1 - momentum) * mu
            b["score.sigma"][0] = momentum * b["score.sigma"][0] + (1 - momentum) * sigma

    def copy(self) -> "Critic":
        d = Critic.__new__(Critic)
        d.__dict__.update(self.__dict__)
        Network.__init__(d, self.dtype)
        for k, t in self.params.items():
            d._add(k, t.data.copy())
        for k, b in self.buffers.items():
            d.buffers[k] = b.copy()
        return d


# --- losses ----------------------------------------------------------------------

def _as_batch(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


def _check_batches(a: Tensor, b: Tensor) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"batch size mismatch: {a.shape[0]} vs {b.shape[0]}")


def wasserstein_critic_loss(score_real: Tensor, score_fake: Tensor) -> Tensor:
    """``-(mean f(x) - mean f(G(x')))``: descending it ascends the critic gap."""
    _check_batches(score_real, score_fake)
    return F.mul(F.sub(F.mean(score_real), F.mean(score_fake)), -1.0)


def feature_distance(phi_fake: Tensor, phi_real: Tensor) -> Tensor:
    """Batch mean of ``||phi_fake - phi_real||_1 / V`` with ``V`` the feature element count."""
    _check_batches(phi_fake, phi_real)
    return F.mean(F.abs(F.sub(phi_fake, phi_real)))


def d_adversarial_loss(d: Critic, x, g_out) -> Tensor:
    x, g_out = _as_batch(x, d.dtype), _as_batch(g_out, d.dtype)
    _check_batches(x, g_out)
    return wasserstein_critic_loss(d(x).score, d(g_out).score)


def feature_loss(d: Critic, x, g_out) -> Tensor:
    x, g_out = _as_batch(x, d.dtype), _as_batch(g_out, d.dtype)
    _check_batches(x, g_out)
    return feature_distance(d(g_out).features, d(x).features)


@dataclass
class CriticTerms:
    total: Tensor
    adversarial: Tensor
    feature: Tensor
    real: CriticOutput
    fake: CriticOutput


def critic_terms(d: Critic, x, g_out, weights: LossWeights) -> CriticTerms:
    x, g_out = _as_batch(x, d.dtype), _as_batch(g_out, d.dtype)
    _check_batches(x, g_out)
    real, fake = d(x), d(g_out)
    adv = wasserstein_critic_loss(real.score, fake.score)
    feat = feature_distance(fake.features, real.features)
    total = F.add(adv, F.mul(feat, weights.lambda1)) if weights.lambda1 else adv
    return CriticTerms(total, adv, feat, real, fake)


def d_total_loss(d: Critic, x, g_out, weights: LossWeights) -> Tensor:
    """Critic adversarial loss plus ``lambda1`` times the feature loss."""
    return critic_terms(d, x, g_out, weights).total


def latent_loss(z_x: Tensor, z_gx: Tensor) -> Tensor:
    """Euclidean distance between latents, averaged over the batch for 2-D input."""
    if z_x.shape != z_gx.shape:
        raise ValueError(f"latent length mismatch: {z_x.shape} vs {z_gx.shape}")
    dist = F.l2_norm(F.sub(z_x, z_gx), axis=-1)
    return F.mean(dist) if dist.ndim else dist


@dataclass
class GeneratorTerms:
    total: Tensor
    adversarial: Tensor
    latent: Tensor
    l1: Tensor
    output: Tensor
    z_x: Tensor
    z_gx: Tensor


def generator_terms(g: Generator, d: Critic, x, x_prime, weights: LossWeights) -> GeneratorTerms:
    """All generator loss terms for a paired batch.

    ``z_gx`` is the bottleneck latent captured while synthesizing from ``x'``
    and ``z_x`` the encoding of the standard image ``x``.
    """
    x, x_prime = _as_batch(x, g.dtype), _as_batch(x_prime, g.dtype)
    _check_batches(x, x_prime)
    out, z_gx = g(x_prime)
    _, z_x = g.encode(x)
    adv = F.mul(F.mean(d(out).score), -1.0)
    lat = latent_loss(z_x, z_gx)
    # per-image L1 norm averaged over the batch
    l1 = F.mean(F.sum(F.abs(F.sub(x, out)), axis=(1, 2, 3)))
    total = adv
    if weights.lambda2:
        total = F.add(total, F.mul(lat, weights.lambda2))
    if weights.lambda3:
        total = F.add(total, F.mul(l1, weights.lambda3))
    return GeneratorTerms(total, adv, lat, l1, out, z_x, z_gx)


def g_total_loss(g: Generator, d: Critic, x, x_prime, weights: LossWeights) -> Tensor:
    return generator_terms(g, d, x, x_prime, weights).total


def generator_forward(g: Generator, x_prime) -> Tuple[np.ndarray, np.ndarray]:
    """Inference: synthesized batch and bottleneck latents as arrays."""
    out, z = g(_as_batch(x_prime, g.dtype))
    return out.data, z.data


def critic_forward(d: Critic, img) -> Tuple[np.ndarray, np.ndarray]:
    out = d(_as_batch(img, d.dtype))
    return out.score.data, out.prob.data


def classification_loss(real: CriticOutput, fake: CriticOutput) -> Tensor:
    """Cross-entropy of the softmax head on real (class 0) and fake (class 1) batches."""
    dtype = real.logits.dtype
    ll_real = F.mean(F.sum(F.mul(F.log_softmax(real.logits), np.array([1.0, 0.0], dtype=dtype)), axis=-1))
    ll_fake = F.mean(F.sum(F.mul(F.log_softmax(fake.logits), np.array([0.0, 1.0], dtype=dtype)), axis=-1))
    return F.mul(F.add(ll_real, ll_fake), -0.5)


class Verdict(enum.Enum):
    REAL = "real"
    FAKE = "fake"
    UNDECIDED = "undecided"


REAL_THRESHOLD = 0.99
FAKE_THRESHOLD = 0.01


def verdict_from_prob(p_real: float, real_threshold: float = REAL_THRESHOLD,
                      fake_threshold: float = FAKE_THRESHOLD) -> Verdict:
    if p_real >= real_threshold:
        return Verdict.REAL
    if p_real <= fake_threshold:
        return Verdict.FAKE
    return Verdict.UNDECIDED


def qualify_real_fake(d, img) -> List[Verdict]:
    """Per-image verdicts from the critic's real-class probability."""
    _, prob = critic_forward(d, img)
    return [verdict_from_prob(float(p)) for p in prob[:, REAL]]


def clip_weights(d: Critic, c: float) -> Critic:
    if not c > 0:
        raise ValueError("clip bound must be positive")
    for t in d.lipschitz_parameters():
        np.clip(t.data, -c, c, out=t.data)
    return d


# --- stand-ins and model files ---------------------------------------------------

class IdentityGenerator:
    """Returns its input unchanged; accepts any square patch size."""

    in_size: Optional[int] = None
    dtype = np.dtype(np.float64)
    params: Dict[str, Tensor] = {}

    def encode(self, x: Tensor) -> Tuple[List[Tensor], Tensor]:
        return [x], F.reshape(x, (x.shape[0], -1))

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        return x, F.reshape(x, (x.shape[0], -1))

    __call__ = forward


class ConstantCritic:
    """Critic stand-in that assigns every image the same real-class probability."""

    in_size: Optional[int] = None
    dtype = np.dtype(np.float64)

    def __init__(self, p_real: float = 1.0):
        if not 0.0 <= p_real <= 1.0:
            raise ValueError("p_real must lie in [0, 1]")
        self.p_real = float(p_real)

    def forward(self, x: Tensor) -> CriticOutput:
        n = x.shape[0]
        prob = np.tile([self.p_real, 1.0 - self.p_real], (n, 1))
        with np.errstate(divide="ignore"):
            logits = np.log(prob)
        zeros = Tensor(np.zeros(n))
        return CriticOutput(zeros, Tensor(prob), Tensor(np.zeros((n, 1, 1, 1))), Tensor(logits), zeros)

    __call__ = forward


def always_real_critic() -> ConstantCritic:
    return ConstantCritic(1.0)


def always_fake_critic() -> ConstantCritic:
    return ConstantCritic(0.0)


KIND_TRAINED, KIND_IDENTITY = 0.0, 1.0


def pack_models(g, critics: Sequence) -> Dict[str, np.ndarray]:
    """Flatten a generator and its critics into one checkpoint mapping.

    Identity generators and constant critics are stored as markers so the
    stand-in pipeline can be driven from a file as well.
    """
    out: Dict[str, np.ndarray] = {}
    if isinstance(g, IdentityGenerator):
        out["meta.gen_kind"] = np.array([KIND_IDENTITY])
    else:
        out["meta.gen_kind"] = np.array([KIND_TRAINED])
        out["meta.gen_channels"] = np.array(g.channels, dtype=np.float64)
        out["meta.in_size"] = np.array([g.in_size], dtype=np.float64)
        out.update({f"gen.{k}": v for k, v in g.state_dict().items()})
    out["meta.n_critics"] = np.array([len(critics)], dtype=np.float64)
    for i, d in enumerate(critics):
        if isinstance(d, ConstantCritic):
            out[f"meta.critic{i}.constant"] = np.array([d.p_real])
            continue
        out[f"meta.critic{i}.channels"] = np.array(d.channels, dtype=np.float64)
        out[f"meta.critic{i}.clip"] = np.array([d.clip_c])
        out.update({f"critic{i}.{k}": v for k, v in d.state_dict().items()})
    return out


def unpack_models(tensors: Dict[str, np.ndarray]):
    """Inverse of :func:`pack_models`: ``(generator, [critics])``."""
    try:
        if tensors["meta.gen_kind"][0] == KIND_IDENTITY:
            g = IdentityGenerator()
        else:
            in_size = int(tensors["meta.in_size"][0])
            g = Generator(tuple(int(c) for c in tensors["meta.gen_channels"]), in_size=in_size)
            g.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("gen.")})
        critics = []
        for i in range(int(tensors["meta.n_critics"][0])):
            const = tensors.get(f"meta.critic{i}.constant")
            if const is not None:
                critics.append(ConstantCritic(float(const[0])))
                continue
            size = g.in_size if g.in_size is not None else 64
            d = Critic(tuple(int(c) for c in tensors[f"meta.critic{i}.channels"]), in_size=size,
                       clip_c=float(tensors[f"meta.critic{i}.clip"][0]))
            prefix = f"critic{i}."
            d.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
            critics.append(d)
    except KeyError as exc:
        raise ValueError(f"checkpoint is missing entry {exc}") from None
    return g, critics
