"""BN-alignment loss and per-step latent guidance."""

import numpy as np
import pytest

from ddis import tensor as T
from ddis.diffusion import sample
from ddis.guidance import (
    DagConfig,
    bn_alignment_loss,
    dag_correct,
    final_alignment_loss,
    guided_sample,
    smooth_clamp,
    sweep_dag,
)
from ddis.nets import ClassifierConfig, ClassifierModel, FeatureStatistics, IdentityCodec
from ddis.tensor import ShapeError, Tensor


def make_stats(means, variances):
    return FeatureStatistics([np.asarray(m, dtype=float) for m in means], [np.asarray(v, dtype=float) for v in variances])


def test_bn_loss_zero_for_matching_stats():
    stats = make_stats([[1.0, 2.0]], [[0.5, 0.25]])
    same = make_stats([[1.0, 2.0]], [[0.5, 0.25]])
    assert bn_alignment_loss(stats, same).item() == 0.0


def test_bn_loss_scalar_example():
    # single layer, single channel: mean diff 3 and variance diff 4 add to 7
    batch = make_stats([[3.0]], [[5.0]])
    running = make_stats([[0.0]], [[1.0]])
    assert bn_alignment_loss(batch, running).item() == pytest.approx(7.0, abs=1e-15)


def test_bn_loss_two_layer_vector_example():
    # layer 1 mean diff (3,4): euclidean norm 5; everything else matches
    batch = make_stats([[3.0, 4.0], [0.0, 0.0]], [[1.0, 1.0], [2.0, 2.0]])
    running = make_stats([[0.0, 0.0], [0.0, 0.0]], [[1.0, 1.0], [2.0, 2.0]])
    assert bn_alignment_loss(batch, running).item() == pytest.approx(5.0, abs=1e-12)


def test_bn_loss_structure_mismatch():
    a = make_stats([[1.0, 2.0]], [[1.0, 1.0]])
    b = make_stats([[1.0, 2.0, 3.0]], [[1.0, 1.0, 1.0]])
    with pytest.raises(ShapeError, match="structure"):
        bn_alignment_loss(a, b)


def test_bn_loss_squared_variant():
    batch = make_stats([[3.0, 4.0]], [[1.0]][:1] + [])
    batch = make_stats([[3.0, 4.0]], [[1.0, 1.0]])
    running = make_stats([[0.0, 0.0]], [[1.0, 1.0]])
    assert bn_alignment_loss(batch, running, squared=True).item() == pytest.approx(25.0, abs=1e-12)


def test_dag_config_eta_identity_and_validation():
    config = DagConfig(lambda_bn=0.01, s_g=20.0)
    assert config.eta == 0.01 * 20.0
    with pytest.raises(ValueError):
        DagConfig(lambda_bn=-1.0)
    with pytest.raises(ValueError):
        DagConfig(s_g=-0.5)


def _tiny_setup(seed=0):
    """4x4 classifier with initialized statistics plus identity codec."""
    model = ClassifierModel(ClassifierConfig(image_size=4, channels=(3, 4)), seed=seed)
    rng = np.random.default_rng(seed)
    model.forward(Tensor(rng.standard_normal((12, 1, 4, 4))), training=True)
    return model, IdentityCodec((1, 4, 4))


def test_dag_correct_eta_zero_is_bit_exact_and_reports_loss():
    clf, codec = _tiny_setup()
    running = clf.running_statistics()
    z = np.random.default_rng(1).standard_normal((3, 1, 4, 4))
    config = DagConfig(lambda_bn=0.0, s_g=20.0)
    z_out, loss, means, variances = dag_correct(z, clf, codec, running, config)
    assert z_out is z or np.array_equal(z_out, z)
    assert np.isfinite(loss) and loss > 0
    assert len(means) == clf.n_bn_layers


def test_dag_correct_gradient_matches_finite_differences():
    clf, codec = _tiny_setup(2)
    running = clf.running_statistics()
    z0 = np.random.default_rng(3).standard_normal((2, 1, 4, 4))

    def loss_fn(z):
        decoded = smooth_clamp(codec.decode(z))
        _, stats = clf.forward(decoded, capture=True)
        return bn_alignment_loss(stats, running)

    err = T.finite_difference_check(loss_fn, Tensor(z0), 1e-4)
    assert err < 1e-4

    config = DagConfig(lambda_bn=1.0, s_g=1.0)
    z_corr, _, _, _ = dag_correct(z0, clf, codec, running, config)
    leaf = Tensor(z0.copy(), requires_grad=True)
    with T.Graph() as g:
        g.backward(loss_fn(leaf))
    assert np.allclose(z_corr, z0 - 1.0 * leaf.grad, atol=1e-15)


def test_dag_correct_is_pure():
    clf, codec = _tiny_setup(4)
    running = clf.running_statistics()
    z = np.random.default_rng(5).standard_normal((2, 1, 4, 4))
    config = DagConfig(lambda_bn=0.05, s_g=2.0)
    a = dag_correct(z, clf, codec, running, config)
    b = dag_correct(z, clf, codec, running, config)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_dag_descent_at_small_eta(bundle):
    running = bundle.classifier.running_statistics()
    rng = np.random.default_rng(11)
    z = rng.standard_normal((8, *bundle.codec_identity.latent_shape()))
    manifest_eta = float(bundle.manifest["dag_descent_eta"])
    assert manifest_eta >= 1e-3
    for eta in (1e-3, manifest_eta):
        config = DagConfig(lambda_bn=eta, s_g=1.0)
        z_corr, before, _, _ = dag_correct(z, bundle.classifier, bundle.codec_identity, running, config)
        after = final_alignment_loss(z_corr, bundle.classifier, running)
        assert after < before, f"no descent at eta={eta}"


def test_guided_sample_eta_zero_matches_plain_bit_exactly(bundle):
    config = DagConfig(lambda_bn=0.0, s_g=17.0, batch=4)
    cond = bundle.denoiser.label_cond(2)
    guided, gtrace = guided_sample(
        bundle.denoiser, bundle.codec_identity, bundle.classifier, bundle.schedule, cond, config, seed=77, batch=4
    )
    plain, ptrace = sample(bundle.denoiser, bundle.codec_identity, bundle.schedule, cond, seed=77, batch=4)
    assert np.array_equal(guided.data, plain.data)
    assert all(rec.l_bn is not None for rec in gtrace.steps)
    assert all(rec.l_bn is None for rec in ptrace.steps)


def test_guided_sample_apply_range_restricts_correction(bundle):
    config = DagConfig(lambda_bn=0.01, s_g=20.0, batch=2, apply_range=(500, 1000))
    cond = bundle.denoiser.label_cond(0)
    _, trace = guided_sample(
        bundle.denoiser, bundle.codec_identity, bundle.classifier, bundle.schedule, cond, config, seed=3, batch=2
    )
    for rec in trace.steps:
        if rec.t < 500:
            assert rec.l_bn is None
        else:
            assert rec.l_bn is not None


def test_paired_seeds_dag_lowers_final_alignment(bundle):
    config = DagConfig(lambda_bn=0.01, s_g=20.0, batch=8)
    running = bundle.classifier.running_statistics()
    deltas = []
    for seed in range(6):
        cond = bundle.denoiser.label_cond(seed % 7)
        guided, _ = guided_sample(
            bundle.denoiser, bundle.codec_identity, bundle.classifier, bundle.schedule, cond, config, seed=seed, batch=8
        )
        plain, _ = sample(bundle.denoiser, bundle.codec_identity, bundle.schedule, cond, seed=seed, batch=8)
        deltas.append(
            final_alignment_loss(guided.data, bundle.classifier, running)
            - final_alignment_loss(plain.data, bundle.classifier, running)
        )
    assert np.median(deltas) < 0, f"guidance did not lower alignment loss: {deltas}"


def test_sweep_grid_emits_finite_metrics(bundle):
    rows = sweep_dag(
        bundle.denoiser, bundle.codec_identity, bundle.classifier, bundle.schedule,
        bundle.denoiser.label_cond(1), lambda_grid=(1e-4, 1e-2), s_g_grid=(0.1, 10.0),
        seed=5, batch=4,
    )
    assert len(rows) == 4
    assert all(r["finite"] for r in rows)
    assert {(r["lambda_bn"], r["s_g"]) for r in rows} == {(1e-4, 0.1), (1e-4, 10.0), (1e-2, 0.1), (1e-2, 10.0)}
