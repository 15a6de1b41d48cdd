import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advml import data, nn, rep
from advml.rng import make_rng


def test_distillation_loss_values():
    x = np.array([[1.0, -2.0, 0.5]])
    assert rep.distillation_loss(x, x, 3.0) == 0.0
    p1 = 1 / (1 + math.exp(-1))
    want = (p1 - (1 - p1)) * math.log(p1 / (1 - p1))
    got = rep.distillation_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 1.0)
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(0.46212, abs=1e-4)
    with pytest.raises(ValueError):
        rep.distillation_loss(np.zeros((1, 2)), np.zeros((1, 3)))


def test_distillation_high_temperature_limit():
    s = np.array([[0.3, -0.2, 0.9]])
    t = np.array([[5.0, 1.0, -3.0]])
    T = 1e6
    q = np.exp(s / T) / np.exp(s / T).sum()
    u = np.full(3, 1 / 3)
    assert rep.distillation_loss(s, t, T) == pytest.approx(float(np.sum(u * np.log(u / q))), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.5, 10.0))
def test_distillation_is_nonnegative_and_grad_matches(seed, T):
    rng = np.random.default_rng(seed)
    s, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert rep.distillation_loss(s, t, T) >= -1e-15
    g = rep.distillation_grad(s, t, T)
    h = 1e-6
    e = np.zeros_like(s)
    e[1, 2] = h
    num = (rep.distillation_loss(s + e, t, T) - rep.distillation_loss(s - e, t, T)) / (2 * h)
    assert g[1, 2] == pytest.approx(num, abs=1e-7)


def test_student_at_teacher_does_not_move():
    teacher = nn.mlp_init([4, 5, 3], "relu", make_rng(0))
    student = teacher.copy()
    X = make_rng(1).random((20, 4))
    losses = rep.distill_train(teacher, student, X, nn.TrainConfig(epochs=2, optimizer="sgd"))
    assert losses == [0.0, 0.0]
    assert all(np.array_equal(p, q) for p, q in zip(student.params(), teacher.params()))


def test_contrastive_trivial_cases():
    z = np.array([[0.3, 0.4]])
    assert rep.contrastive_loss(z, z, 0) == 0.0
    assert rep.contrastive_loss(z, z, 1, 1.0) == 1.0
    assert rep.contrastive_loss(z, z + [[3.0, 4.0]], 1, 1.0) == 0.0
    assert rep.contrastive_loss(z, z + [[3.0, 4.0]], 0) == 25.0


def test_contrastive_rotation_invariance():
    rng = make_rng(0)
    z1, z2 = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    c, s = math.cos(0.7), math.sin(0.7)
    R = np.array([[c, -s], [s, c]])
    y = np.array([0, 1, 0, 1, 1])
    assert rep.contrastive_loss(z1 @ R, z2 @ R, y) == pytest.approx(rep.contrastive_loss(z1, z2, y))


def test_contrastive_pairs_balanced_and_validated():
    labels = np.array([0, 0, 0, 1, 1, 1])
    i, j, y = rep.contrastive_pairs(labels, make_rng(0))
    assert (y == 0).sum() == (y == 1).sum()
    assert np.all((labels[i] == labels[j]) == (y == 0))
    with pytest.raises(ValueError):
        rep.contrastive_pairs(np.array([0, 0, 1]), make_rng(0))


def test_rotate90_mapping_and_identity():
    x = np.arange(64, dtype=float)
    img = rep.rotate90(x, (8, 8), 1).reshape(8, 8)
    assert img[0, 7] == x.reshape(8, 8)[0, 0]
    assert np.array_equal(rep.rotate90(x, (8, 8), 0), x)
    y = x
    for _ in range(4):
        y = rep.rotate90(y, (8, 8), 1)
    assert np.array_equal(y, x)
    assert rep.rotate90(x, (8, 8), 3).sum() == x.sum()
    with pytest.raises(ValueError):
        rep.rotate90(np.arange(6.0), (2, 3), 1)


def test_rotation_labels_balanced_and_constant_images_at_chance():
    ds = data.Dataset(np.full((80, 16), 0.5), np.zeros(80, dtype=int), 1, (4, 4))
    rot = rep.rotation_dataset(ds, make_rng(0))
    assert np.bincount(rot.labels).tolist() == [20, 20, 20, 20]
    res = rep.rotation_pretext_train([8], ds, nn.TrainConfig(epochs=5), make_rng(1))
    assert res.accuracy <= 0.4


def test_autoencoder_scores_and_flags():
    with pytest.raises(ValueError):
        rep.autoencoder_init(4, 3, 4, make_rng(0))
    ae = rep.autoencoder_init(16, 8, 4, make_rng(0))
    X = make_rng(1).random((5, 16))
    scores = rep.reconstruction_scores(ae, X)
    assert np.allclose(scores, nn.per_row_loss(nn.Loss.MSE, nn.predict_logits(ae, X), X))
    assert not rep.flag_reconstruction(ae, X, np.inf).any()
