"""Classifier, denoiser, codec, and conditioning machinery."""

import numpy as np
import pytest

from ddis import tensor as T
from ddis.nets import (
    ClassifierConfig,
    ClassifierModel,
    ConditioningVocabulary,
    DenoiserConfig,
    DenoiserModel,
    IdentityCodec,
    LearnedCodec,
    StatisticsError,
    attention_reweight,
    classifier_forward,
    codec_decode,
    codec_encode,
    denoiser_forward,
    running_statistics,
    sinusoidal_embedding,
    weight_hash,
)
from ddis.tensor import Graph, ShapeError, Tensor


@pytest.fixture(scope="module")
def small_classifier():
    model = ClassifierModel(ClassifierConfig(channels=(4, 8), image_size=8), seed=0)
    rng = np.random.default_rng(0)
    # one training batch initializes the running statistics
    model.forward(Tensor(rng.standard_normal((16, 1, 8, 8))), training=True)
    return model


@pytest.fixture(scope="module")
def small_denoiser():
    return DenoiserModel(DenoiserConfig(base_channels=8, embed_dim=8, attn_dim=8, n_labels=7), seed=1)


def test_identical_images_add_no_batch_variance(small_classifier):
    # the reduction runs over batch and spatial axes per channel: a channel
    # constant across both has exactly zero variance, and duplicating one
    # image across the batch leaves every statistic unchanged
    from ddis.nets import BatchNorm2d

    bn = BatchNorm2d(3)
    const = Tensor(np.tile(np.array([1.0, -2.0, 0.5]).reshape(1, 3, 1, 1), (6, 1, 4, 4)))
    mean, var = bn.batch_stats(const)
    assert np.array_equal(var.data, np.zeros(3))
    assert np.allclose(mean.data, [1.0, -2.0, 0.5], atol=1e-15)

    img = np.random.default_rng(1).standard_normal((1, 1, 8, 8))
    _, stats_one = classifier_forward(small_classifier, Tensor(img), capture=True)
    _, stats_rep = classifier_forward(small_classifier, Tensor(np.repeat(img, 6, axis=0)), capture=True)
    for v1, v6 in zip(stats_one.variances, stats_rep.variances):
        assert np.allclose(v1.data, v6.data, atol=1e-12)


def test_logits_finite_and_softmax_normalized(small_classifier):
    rng = np.random.default_rng(2)
    logits = classifier_forward(small_classifier, Tensor(rng.standard_normal((5, 1, 8, 8))))
    assert np.all(np.isfinite(logits.data))
    probs = T.softmax(logits, axis=1).data
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_classifier_shape_errors(small_classifier):
    with pytest.raises(ShapeError):
        classifier_forward(small_classifier, Tensor(np.zeros((2, 3, 8, 8))))
    with pytest.raises(ShapeError):
        classifier_forward(small_classifier, Tensor(np.zeros((2, 1, 16, 16))))


def test_running_statistics_uninitialized_error():
    fresh = ClassifierModel(ClassifierConfig(channels=(4, 8), image_size=8), seed=5)
    with pytest.raises(StatisticsError, match="uninitialized"):
        running_statistics(fresh)


def test_momentum_one_running_equals_batch_stats():
    model = ClassifierModel(ClassifierConfig(channels=(4, 8), image_size=8, bn_momentum=1.0), seed=2)
    batch = Tensor(np.random.default_rng(3).standard_normal((10, 1, 8, 8)))
    _, captured = model.forward(batch, capture=True, training=True)
    stored = running_statistics(model)
    for got_m, got_v, cap_m, cap_v in zip(stored.means, stored.variances, captured.means, captured.variances):
        assert np.allclose(got_m, cap_m.data, atol=1e-10)
        assert np.allclose(got_v, cap_v.data, atol=1e-10)


def test_eval_forwards_never_mutate_running_stats(small_classifier):
    before_m = [bn.running_mean.copy() for bn in small_classifier.bns]
    before_v = [bn.running_var.copy() for bn in small_classifier.bns]
    rng = np.random.default_rng(4)
    for _ in range(1000):
        classifier_forward(small_classifier, Tensor(rng.standard_normal((1, 1, 8, 8))), capture=True)
    for bn, m, v in zip(small_classifier.bns, before_m, before_v):
        assert np.array_equal(bn.running_mean, m)
        assert np.array_equal(bn.running_var, v)


def test_class_head_permutation_covariance(small_classifier):
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((3, 1, 8, 8)))
    base = classifier_forward(small_classifier, x).data
    perm = rng.permutation(small_classifier.config.n_classes)
    w, b = small_classifier.head.weight.data.copy(), small_classifier.head.bias.data.copy()
    small_classifier.head.weight.data = w[:, perm]
    small_classifier.head.bias.data = b[perm]
    permuted = classifier_forward(small_classifier, x).data
    small_classifier.head.weight.data = w
    small_classifier.head.bias.data = b
    assert np.allclose(permuted, base[:, perm], atol=1e-12)


def test_fixture_classifier_l_bn_lower_on_real_batch(bundle):
    from ddis.guidance import bn_alignment_loss

    clf = bundle.classifier
    running = clf.running_statistics()
    real = bundle.train_set.images[:64]
    noise = np.random.default_rng(0).uniform(-1, 1, real.shape)
    _, stats_real = classifier_forward(clf, Tensor(real), capture=True)
    _, stats_noise = classifier_forward(clf, Tensor(noise), capture=True)
    loss_real = bn_alignment_loss(stats_real, running).item()
    loss_noise = bn_alignment_loss(stats_noise, running).item()
    assert loss_real < loss_noise


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


def test_denoiser_output_shape_and_determinism(small_denoiser):
    rng = np.random.default_rng(6)
    z = Tensor(rng.standard_normal((2, 1, 16, 16)))
    a = denoiser_forward(small_denoiser, z, 10, None)
    b = denoiser_forward(small_denoiser, z, 10, None)
    assert a.shape == (2, 1, 16, 16)
    assert np.array_equal(a.data, b.data)


def test_denoiser_rejects_unknown_token(small_denoiser):
    z = Tensor(np.zeros((1, 1, 16, 16)))
    with pytest.raises(IndexError, match="vocabulary"):
        denoiser_forward(small_denoiser, z, 5, np.array([0, 999]))


def test_untrained_cfg_scale_zero_equals_unconditional(small_denoiser):
    from ddis.diffusion import cfg_epsilon

    z = Tensor(np.random.default_rng(7).standard_normal((2, 1, 16, 16)))
    guided = cfg_epsilon(small_denoiser, z, 3, small_denoiser.label_cond(1), 0.0)
    uncond = denoiser_forward(small_denoiser, z, 3, None)
    assert np.array_equal(guided.data, uncond.data)


def test_null_condition_is_zero_sequence(small_denoiser):
    z = Tensor(np.zeros((1, 1, 16, 16)))
    seq = small_denoiser._embed_cond(z, None)
    assert seq.shape == (2, small_denoiser.config.embed_dim)
    assert np.all(seq.data == 0.0)


def test_per_sample_conditioning_matches_stacked_single(small_denoiser):
    rng = np.random.default_rng(8)
    z = rng.standard_normal((2, 1, 16, 16))
    ids = np.stack([small_denoiser.label_cond(1), small_denoiser.label_cond(4)])
    joint = denoiser_forward(small_denoiser, Tensor(z), 20, ids).data
    one = denoiser_forward(small_denoiser, Tensor(z[:1]), 20, small_denoiser.label_cond(1)).data
    two = denoiser_forward(small_denoiser, Tensor(z[1:]), 20, small_denoiser.label_cond(4)).data
    assert np.allclose(joint, np.concatenate([one, two]), atol=1e-12)


def test_sinusoidal_embedding_shape_and_range():
    emb = sinusoidal_embedding(np.array([0, 500, 999]), 32)
    assert emb.shape == (3, 32)
    assert np.all(np.abs(emb) <= 1.0)
    assert not np.allclose(emb[0], emb[1])


# ---------------------------------------------------------------------------
# attention reweighting
# ---------------------------------------------------------------------------


def test_attention_reweight_identity_at_w1(small_denoiser):
    z = Tensor(np.random.default_rng(9).standard_normal((2, 1, 16, 16)))
    cond = small_denoiser.label_cond(2)
    base = denoiser_forward(small_denoiser, z, 15, cond)
    view = attention_reweight(small_denoiser, token_index=1, w=1.0)
    rew = view.forward(z, 15, cond)
    assert np.array_equal(base.data, rew.data)


def test_attention_reweight_increases_token_mass(small_denoiser):
    z = Tensor(np.random.default_rng(10).standard_normal((2, 1, 16, 16)))
    cond = small_denoiser.label_cond(2)
    sink_base, sink_rew = [], []
    small_denoiser.forward(z, 15, cond, attn_sink=sink_base)
    view = attention_reweight(small_denoiser, token_index=1, w=30.0)
    view.forward(z, 15, cond, attn_sink=sink_rew)
    base_attn, rew_attn = sink_base[0], sink_rew[0]
    assert np.all(rew_attn[..., 1] > base_attn[..., 1])
    assert np.allclose(rew_attn.sum(axis=-1), 1.0, atol=1e-9)


def test_attention_reweight_rejects_non_positive_scale(small_denoiser):
    with pytest.raises(ValueError):
        attention_reweight(small_denoiser, 0, 0.0)
    with pytest.raises(ValueError):
        attention_reweight(small_denoiser, 0, -2.0)


def test_attention_rows_sum_to_one_after_any_reweight(small_denoiser):
    rng = np.random.default_rng(11)
    z = Tensor(rng.standard_normal((1, 1, 16, 16)))
    for w in (0.25, 5.0, 30.0):
        sink = []
        attention_reweight(small_denoiser, 0, w).forward(z, 8, small_denoiser.label_cond(0), attn_sink=sink)
        assert np.allclose(sink[0].sum(axis=-1), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def test_vocabulary_pad_row_zero_and_label_lookup():
    vocab = ConditioningVocabulary(5, 8, rng=np.random.default_rng(1))
    assert np.all(vocab.table.data[0] == 0.0)
    assert vocab.label_token(0) == 1 and vocab.label_token(4) == 5
    with pytest.raises(IndexError):
        vocab.label_token(5)


def test_vocabulary_embed_prompt_mixes_rows_and_tensors():
    vocab = ConditioningVocabulary(3, 6, rng=np.random.default_rng(2))
    external = Tensor(np.full(6, 0.5), requires_grad=True)
    with Graph() as g:
        seq = vocab.embed_prompt([external, vocab.label_token(1)])
        g.backward(T.tsum(seq))
    assert seq.shape == (2, 6)
    assert np.array_equal(external.grad, np.ones(6))
    expected_row1 = vocab.table.data[2] + vocab.positional.data[1]
    assert np.allclose(seq.data[1], expected_row1, atol=1e-15)


# ---------------------------------------------------------------------------
# codecs
# ---------------------------------------------------------------------------


def test_identity_codec_exact_inverse():
    codec = IdentityCodec((1, 16, 16))
    x = Tensor(np.random.default_rng(12).uniform(-1, 1, (3, 1, 16, 16)))
    out = codec_decode(codec, codec_encode(codec, x))
    assert out.data is x.data  # bit-exact pass-through
    assert codec.latent_shape() == (1, 16, 16)


def test_learned_codec_shapes_and_gradient():
    codec = LearnedCodec((1, 16, 16), seed=3)
    x = Tensor(np.random.default_rng(13).uniform(-1, 1, (2, 1, 16, 16)))
    z = codec_encode(codec, x)
    assert z.shape == (2, 4, 4, 4)
    recon = codec_decode(codec, z)
    assert recon.shape == x.shape

    def fn(latent):
        return T.tsum(codec.decode(latent))

    err = T.finite_difference_check(fn, Tensor(np.random.default_rng(14).standard_normal((1, 4, 4, 4))), 1e-5)
    assert err < 1e-4


def test_learned_codec_shape_errors():
    codec = LearnedCodec((1, 16, 16))
    with pytest.raises(ShapeError):
        codec_encode(codec, Tensor(np.zeros((1, 1, 8, 8))))
    with pytest.raises(ShapeError):
        codec_decode(codec, Tensor(np.zeros((1, 4, 8, 8))))


def test_learned_codec_reconstruction_below_manifest_threshold(bundle):
    recon = bundle.codec_learned.decode(bundle.codec_learned.encode(Tensor(bundle.heldout_set.images))).data
    err = float(np.mean(np.abs(recon - bundle.heldout_set.images)))
    assert err < 0.05
    assert bundle.manifest["codec_recon_error"] < 0.05


def test_weight_hash_sensitivity(small_denoiser):
    h1 = weight_hash(small_denoiser)
    small_denoiser.conv_in.weight.data[0, 0, 0, 0] += 1e-12
    h2 = weight_hash(small_denoiser)
    small_denoiser.conv_in.weight.data[0, 0, 0, 0] -= 1e-12
    assert h1 != h2
    assert weight_hash(small_denoiser) == h1
