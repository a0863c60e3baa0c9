import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctstandard.autodiff import functional as F
from ctstandard.autodiff.tensor import Tensor
from ctstandard.gan import (
    Critic,
    CriticOutput,
    Generator,
    IdentityGenerator,
    LossWeights,
    Verdict,
    always_fake_critic,
    always_real_critic,
    classification_loss,
    clip_weights,
    critic_terms,
    d_adversarial_loss,
    d_total_loss,
    feature_distance,
    feature_loss,
    g_total_loss,
    generator_terms,
    latent_loss,
    pack_models,
    qualify_real_fake,
    unpack_models,
    verdict_from_prob,
    wasserstein_critic_loss,
)

SMALL_G = (2, 4, 4, 4, 4, 4, 4)
SMALL_D = (2, 4, 4, 4)


class MeanCritic:
    """Forced-score stand-in: f(img) is the image mean and phi is the image itself."""

    dtype = np.dtype(np.float64)

    def __call__(self, x):
        score = F.mean(x, axis=(1, 2, 3))
        logits = F.concat([F.reshape(score, (-1, 1)), F.reshape(F.mul(score, -1.0), (-1, 1))], axis=1)
        return CriticOutput(score, F.softmax(logits), x, logits, score)


class ScaledEncoder:
    """Forced-latent stand-in: output equals input, latent is 4 times the flattened image."""

    dtype = np.dtype(np.float64)

    def encode(self, x):
        return [x], F.mul(F.reshape(x, (x.shape[0], -1)), 4.0)

    def __call__(self, x):
        return x, self.encode(x)[1]


def const(values, side=1):
    return np.array([np.full((1, side, side), v, dtype=np.float64) for v in values])


def test_generator_shape_and_bottleneck():
    g = Generator(in_size=64)
    out, z = g(Tensor(np.random.default_rng(0).random((2, 1, 64, 64)).astype(np.float32)))
    assert out.shape == (2, 1, 64, 64)
    assert g.bottleneck_size == 1
    assert z.shape == (2, g.channels[6]) and g.latent_length == g.channels[6]


@pytest.mark.parametrize("size", [16, 32])
def test_generator_small_sizes(size):
    g = Generator(SMALL_G, in_size=size)
    x = np.random.default_rng(1).random((1, 1, size, size))
    assert g(Tensor(x.astype(np.float32)))[0].shape == (1, 1, size, size)


def test_generator_deterministic():
    g = Generator(SMALL_G, in_size=16, seed=3)
    x = Tensor(np.random.default_rng(2).random((1, 1, 16, 16)).astype(np.float32))
    (a, za), (b, zb) = g(x), g(x)
    assert np.array_equal(a.data, b.data) and np.array_equal(za.data, zb.data)


def test_untrained_generator_is_identity():
    g = Generator(SMALL_G, in_size=16, dtype=np.float64)
    x = np.random.default_rng(4).uniform(0.01, 0.99, (2, 1, 16, 16))
    np.testing.assert_allclose(g(Tensor(x))[0].data, x, atol=1e-9)


def test_critic_heads():
    d = Critic(SMALL_D, in_size=16)
    x = np.random.default_rng(5).random((3, 1, 16, 16)).astype(np.float32)
    out = d(Tensor(x))
    assert np.isfinite(out.score.data).all()
    np.testing.assert_allclose(out.prob.data.sum(axis=1), 1.0, atol=1e-6)
    again = d(Tensor(x))
    assert np.array_equal(out.score.data, again.score.data)


def test_wasserstein_forced_scores():
    loss = wasserstein_critic_loss(Tensor(np.array([1.0, 3.0])), Tensor(np.array([0.0, 2.0])))
    assert loss.item() == -1.0


def test_critic_loss_cancels_on_identical_batches():
    d = Critic(SMALL_D, in_size=16, dtype=np.float64)
    x = np.random.default_rng(6).random((2, 1, 16, 16))
    assert d_adversarial_loss(d, x, x).item() == 0.0
    assert feature_loss(d, x, x).item() == 0.0
    assert d_total_loss(d, x, x, LossWeights()).item() == 0.0


def test_zero_weight_critic_gives_zero_loss():
    d = Critic(SMALL_D, in_size=16, dtype=np.float64)
    for t in d.parameters():
        t.data[...] = 0.0
    rng = np.random.default_rng(7)
    assert d_adversarial_loss(d, rng.random((2, 1, 16, 16)), rng.random((2, 1, 16, 16))).item() == 0.0


def test_feature_distance_examples():
    a = np.random.default_rng(8).random((2, 3, 4, 4))
    assert feature_distance(Tensor(a + 1.0), Tensor(a)).item() == pytest.approx(1.0)
    b = np.random.default_rng(9).random((2, 3, 4, 4))
    assert feature_distance(Tensor(a), Tensor(b)).item() == pytest.approx(np.abs(a - b).mean(), abs=1e-12)


def test_d_total_forced_components():
    x, fake = const([0.0, 0.0]), const([-2.0, 6.0])
    terms = critic_terms(MeanCritic(), x, fake, LossWeights(lambda1=0.5))
    assert (terms.adversarial.item(), terms.feature.item()) == (2.0, 4.0)
    assert terms.total.item() == 4.0
    assert critic_terms(MeanCritic(), x, fake, LossWeights(lambda1=0.0)).total.item() == 2.0


def test_latent_examples():
    assert latent_loss(Tensor(np.array([1.0, 2.0])), Tensor(np.array([1.0, 2.0]))).item() == 0.0
    assert latent_loss(Tensor(np.array([0.0, 0.0])), Tensor(np.array([3.0, 4.0]))).item() == 5.0
    a, b = np.random.default_rng(10).random((2, 3, 7))
    want = np.mean([np.sqrt(((a[i] - b[i]) ** 2).sum()) for i in range(3)])
    assert latent_loss(Tensor(a), Tensor(b)).item() == pytest.approx(want, abs=1e-12)


def test_g_total_forced_components():
    x, x_prime = const([1.5]), const([1.0])
    terms = generator_terms(ScaledEncoder(), MeanCritic(), x, x_prime, LossWeights(lambda2=0.5, lambda3=1.0))
    assert (terms.adversarial.item(), terms.latent.item(), terms.l1.item()) == (-1.0, 2.0, 0.5)
    assert terms.total.item() == 0.5


def test_l1_is_per_image_sum():
    x, x_prime = const([0.5, 0.5], side=2), const([0.25, 0.0], side=2)
    terms = generator_terms(ScaledEncoder(), MeanCritic(), x, x_prime, LossWeights())
    assert terms.l1.item() == pytest.approx((4 * 0.25 + 4 * 0.5) / 2)


def test_pure_adversarial_generator_loss():
    g = Generator(SMALL_G, in_size=16, dtype=np.float64, seed=2)
    d = Critic(SMALL_D, in_size=16, dtype=np.float64)
    rng = np.random.default_rng(11)
    x, xp = rng.random((2, 1, 16, 16)), rng.random((2, 1, 16, 16))
    out, _ = g(Tensor(xp))
    want = -d(out).score.data.mean()
    assert g_total_loss(g, d, x, xp, LossWeights(lambda2=0.0, lambda3=0.0)).item() == pytest.approx(want, abs=1e-12)


def test_identity_generator_zero_reconstruction_terms():
    x = np.random.default_rng(12).random((2, 1, 16, 16))
    terms = generator_terms(IdentityGenerator(), Critic(SMALL_D, in_size=16, dtype=np.float64), x, x, LossWeights())
    assert terms.l1.item() == 0.0 and terms.latent.item() == 0.0


@pytest.mark.parametrize("p,verdict", [(0.995, Verdict.REAL), (0.005, Verdict.FAKE), (0.5, Verdict.UNDECIDED),
                                       (0.99, Verdict.REAL), (0.01, Verdict.FAKE)])
def test_verdicts(p, verdict):
    assert verdict_from_prob(p) is verdict


def test_constant_critics_verdicts():
    img = np.zeros((2, 1, 8, 8))
    assert qualify_real_fake(always_real_critic(), img) == [Verdict.REAL] * 2
    assert qualify_real_fake(always_fake_critic(), img) == [Verdict.FAKE] * 2


def test_clip_examples():
    d = Critic(SMALL_D, in_size=16)
    w = d.params["c1.w"].data
    w.flat[0], w.flat[1], w.flat[2] = 0.2, -0.2, 0.005
    clip_weights(d, 0.01)
    assert (w.flat[0], w.flat[1]) == (np.float32(0.01), np.float32(-0.01))
    assert w.flat[2] == np.float32(0.005)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(0.01, 5.0), st.integers(0, 2**31))
def test_clip_bound_property(c, scale, seed):
    d = Critic(SMALL_D, in_size=16, clip_c=c, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    for t in d.lipschitz_parameters():
        t.data[...] = rng.normal(0, scale, t.shape)
    inside = {k: t.data.copy() for k, t in d.params.items()}
    clip_weights(d, c)
    for k, t in d.params.items():
        if k.startswith("head."):
            continue
        assert np.abs(t.data).max() <= np.float32(c)
        keep = np.abs(inside[k]) <= np.float32(c)
        assert np.array_equal(t.data[keep], inside[k][keep])


def test_classification_loss_bounds():
    d = Critic(SMALL_D, in_size=16, dtype=np.float64)
    rng = np.random.default_rng(13)
    real, fake = d(Tensor(rng.random((4, 1, 16, 16)))), d(Tensor(rng.random((4, 1, 16, 16))))
    assert np.isfinite(classification_loss(real, fake).item())
    # p*(1-p) <= 1/4, so scoring one batch as both classes costs at least log 2
    assert classification_loss(real, real).item() >= np.log(2.0) - 1e-12


def test_calibration_standardizes_scores():
    d = Critic(SMALL_D, in_size=16, dtype=np.float64)
    x = np.random.default_rng(14).random((8, 1, 16, 16))
    d.calibrate(d(Tensor(x)).raw.data)
    s = d(Tensor(x)).score.data
    assert abs(s.mean()) < 1e-9 and abs(s.std() - 1.0) < 1e-9
    np.testing.assert_allclose(d.real_prob_from_raw(d(Tensor(x)).raw.data), d(Tensor(x)).prob.data[:, 0], atol=1e-12)


def test_pack_unpack_round_trip():
    g = Generator(SMALL_G, in_size=16, seed=1)
    crit = [Critic(SMALL_D, in_size=16, seed=s) for s in (1, 2)]
    crit[0].calibrate(np.array([1.0, 2.0, 4.0]))
    g2, crit2 = unpack_models(pack_models(g, crit))
    assert g2.checksum() == g.checksum()
    assert [d.checksum() for d in crit2] == [d.checksum() for d in crit]
    x = Tensor(np.random.default_rng(3).random((1, 1, 16, 16)).astype(np.float32))
    assert np.array_equal(crit2[0](x).score.data, crit[0](x).score.data)


def test_pack_stand_ins():
    g, crit = unpack_models(pack_models(IdentityGenerator(), [always_real_critic()]))
    assert isinstance(g, IdentityGenerator) and crit[0].p_real == 1.0


def test_lambda_range_enforced():
    with pytest.raises(ValueError):
        LossWeights(lambda1=1.5)
