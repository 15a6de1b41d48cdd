import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advml import data, defense, nn
from advml.rng import make_rng


def test_std_k_hand_computed_example():
    # 99 zeros and one 100: mean 1, population std sqrt(99) ~ 9.95, 3 std ~ 29.8 < 99
    X = np.zeros((100, 1))
    X[42, 0] = 100.0
    ds = data.Dataset(X, np.zeros(100, dtype=int), 1)
    assert X.std() == pytest.approx(9.9499, abs=1e-4)
    kept, report = defense.sanitize_outliers(ds, "std_k", 3.0)
    assert report.suspects.tolist() == [42]
    assert kept.n == 99


def test_centroid_mode():
    X = np.vstack([np.zeros((5, 2)), [[5.0, 5.0]]])
    ds = data.Dataset(X, np.zeros(6, dtype=int), 1)
    _, report = defense.sanitize_outliers(ds, "centroid", threshold=3.0)
    assert report.suspects.tolist() == [5]
    with pytest.raises(ValueError):
        defense.sanitize_outliers(ds, "nope")


def _bundle(rng, scale):
    return nn.GradientBundle([rng.standard_normal((3, 4)) * scale], [rng.standard_normal((1, 3)) * scale],
                             np.ones((2, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100.0), st.floats(0.01, 10.0))
def test_dp_clip_bound(seed, scale, clip):
    g = _bundle(np.random.default_rng(seed), scale)
    out = defense.dp_clip_noise(g, defense.DpConfig(clip, 0.0), np.random.default_rng(0))
    assert out.global_norm() <= clip + 1e-12
    assert np.array_equal(out.input_grad, g.input_grad)


def test_dp_clip_exact_scaling_and_identity():
    g = nn.GradientBundle([np.full((1, 1), 6.0)], [np.full((1, 1), 8.0)], np.zeros((1, 1)))
    out = defense.dp_clip_noise(g, defense.DpConfig(1.0, 0.0), None)
    assert out.weight_grads[0][0, 0] == pytest.approx(0.6) and out.global_norm() == pytest.approx(1.0)
    small = defense.dp_clip_noise(g, defense.DpConfig(100.0, 0.0), None)
    assert np.array_equal(small.weight_grads[0], g.weight_grads[0])


def test_dp_noise_statistics():
    n = 100_000
    g = nn.GradientBundle([np.zeros((n, 1))], [np.zeros((1, 1))], np.zeros((1, 1)))
    noise = defense.dp_clip_noise(g, defense.DpConfig(1.0, 0.1), make_rng(0)).weight_grads[0]
    assert abs(noise.mean()) <= 3 * 0.1 / np.sqrt(n)
    assert abs(noise.std() - 0.1) <= 0.005


def test_dp_config_validation():
    with pytest.raises(ValueError):
        defense.DpConfig(0.0)
    with pytest.raises(ValueError):
        defense.DpConfig(1.0, -1.0)


def _conv2d_oracle(img, k2, r):
    p = np.pad(img, r, mode="symmetric")
    h, w = img.shape
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            out[i, j] = np.sum(p[i:i + 2 * r + 1, j:j + 2 * r + 1] * k2)
    return out


def test_blur_matches_direct_convolution():
    rng = np.random.default_rng(0)
    img = rng.random((8, 8))
    k = defense.gaussian_kernel_1d(5, 1.0)
    want = np.clip(_conv2d_oracle(img, np.outer(k, k), 2), 0, 1)
    assert np.allclose(defense.gaussian_blur(img.reshape(-1), (8, 8), 5, 1.0), want.reshape(-1))


def test_blur_preserves_constant_images_and_batches():
    X = np.full((3, 16), 0.4)
    assert np.allclose(defense.gaussian_blur(X, (4, 4), 3, 1.0), 0.4)
    with pytest.raises(ValueError):
        defense.gaussian_kernel_1d(4)


def test_adversarial_training_epoch_runs():
    ds = data.gen_grid_classes(10, 2, make_rng(0))
    model = nn.mlp_init([64, 8, 2], "relu", make_rng(1))
    report = defense.adversarial_train(model, ds, 0.1, nn.TrainConfig(epochs=3))
    assert len(report.epoch_losses) == 3 and all(np.isfinite(report.epoch_losses))


def test_gradient_mask_hides_input_gradient():
    model = nn.mlp_init([3, 4, 2], "relu", make_rng(0))
    masked = defense.mask_input_gradient(model)
    X = make_rng(1).random((2, 3))
    assert np.array_equal(nn.predict(masked, X), nn.predict(model, X))
    assert not np.any(nn.input_gradient(masked, X, [0, 1]))


def test_noise_augment_shape():
    X = np.full((4, 3), 0.5)
    out = defense.noise_augment(X, 0.1, make_rng(0))
    assert out.shape == X.shape and out.min() >= 0.0 and out.max() <= 1.0
    with pytest.raises(ValueError):
        defense.noise_augment(X, -1.0, make_rng(0))


def test_crossval_audit_finds_flipped_rows():
    ds = data.gen_two_gaussians(40, make_rng(0), 2.0, 0.4)
    bad = data.Dataset(ds.features, ds.labels.copy(), 2, flags=ds.flags.copy())
    bad.labels[:3] = 1 - bad.labels[:3]
    bad.flags[:3] = data.FLIPPED
    factory = lambda s: nn.mlp_init([2, 8, 2], "relu", np.random.default_rng(s))  # noqa: E731
    report = defense.crossval_label_audit(bad, factory, nn.TrainConfig(epochs=30), make_rng(1))
    assert set(report.suspects.tolist()) >= {0, 1, 2}
    assert report.recall == 1.0


def test_consensus_and_relabel():
    ds = data.gen_two_gaussians(20, make_rng(0), 2.0, 0.4)
    m = nn.mlp_init([2, 4, 2], "relu", make_rng(1))
    kept, report = defense.consensus_disagreement_filter(ds, m, m)
    assert kept.n == ds.n and report.count == 0
    fixed = defense.pseudo_label_relabel(m, ds, [0, 1])
    assert np.array_equal(fixed.labels[:2], nn.predict(m, ds.features[:2]))
    with pytest.raises(IndexError):
        defense.pseudo_label_relabel(m, ds, [999])


def test_activation_anomaly_threshold_percentile():
    ds = data.gen_grid_classes(10, 2, make_rng(0))
    m = nn.mlp_init([64, 8, 2], "relu", make_rng(1))
    thr = defense.activation_anomaly_threshold(m, ds, 95)
    assert 0.0 < defense.flag_activation_anomalies(m, ds.features, thr).mean() <= 0.1
