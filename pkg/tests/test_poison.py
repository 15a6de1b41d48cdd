import math

import numpy as np
import pytest

from advml import data, nn, poison
from advml.rng import make_rng


def _binary(n=50):
    return data.gen_two_gaussians(n, make_rng(0))


def test_flip_selects_exact_count_and_flags_changes():
    ds = _binary()
    out = poison.flip_labels(ds, 0.1, make_rng(1))
    changed = out.labels != ds.labels
    assert changed.sum() == math.floor(0.1 * ds.n)
    assert np.array_equal(out.poisoned_mask(), changed)
    assert np.array_equal(ds.labels, _binary().labels)


def test_flip_pair_rule_leaves_other_classes():
    ds = data.gen_grid_classes(10, 4, make_rng(0))
    out = poison.flip_labels(ds, 1.0, make_rng(1), (0, 1))
    assert np.array_equal(out.labels[ds.labels == 2], ds.labels[ds.labels == 2])
    assert np.all(out.labels[ds.labels == 0] == 1)
    assert out.poisoned_mask().sum() == 20


def test_flip_edge_fractions_and_errors():
    ds = _binary()
    assert not poison.flip_labels(ds, 0.0, make_rng(1)).poisoned_mask().any()
    with pytest.raises(ValueError):
        poison.flip_labels(ds, 1.5, make_rng(1))
    with pytest.raises(ValueError):
        poison.flip_labels(data.gen_grid_classes(2, 3, make_rng(0)), 0.1, make_rng(1))


def test_noise_flip_injection():
    ds = data.gen_grid_classes(10, 4, make_rng(0))
    out = poison.noise_flip_inject(ds, 5, make_rng(2))
    rows = out.poisoned_mask()
    assert rows.sum() == 5
    assert np.all(out.labels[rows] != ds.labels[rows])
    assert out.features.max() <= 1.0 and np.all(out.features[rows] >= ds.features[rows])


def test_stamp_trigger_bottom_right():
    x = np.zeros(16)
    img = poison.stamp_trigger(x, (4, 4), poison.Trigger(2, 1.0)).reshape(4, 4)
    assert img[2:, 2:].sum() == 4 and img.sum() == 4
    assert x.sum() == 0  # input untouched
    with pytest.raises(ValueError):
        poison.stamp_trigger(x, (4, 4), poison.Trigger(5))


def test_backdoor_poison_and_filter():
    ds = data.gen_grid_classes(25, 4, make_rng(0), clip_high=0.99)
    bad = poison.backdoor_poison(ds, make_rng(1), 0.1, 0)
    rows = bad.poisoned_mask()
    assert rows.sum() == 10 and np.all(bad.labels[rows] == 0)
    kept, report = poison.filter_triggered(bad)
    assert report.precision == 1.0 and report.recall == 1.0
    assert kept.n == ds.n - 10


def test_gradient_poisoning_modes():
    g = nn.GradientBundle([np.zeros((2, 2))], [np.zeros((1, 2))], np.ones((1, 2)))
    r = poison.poison_gradient_update(g, make_rng(0))
    assert np.all((r.weight_grads[0] >= 0) & (r.weight_grads[0] < 1))
    assert np.array_equal(r.input_grad, g.input_grad)
    same = poison.poison_gradient_update(g, make_rng(0), "add_gaussian", 0.0)
    assert np.array_equal(same.weight_grads[0], g.weight_grads[0])
    with pytest.raises(ValueError):
        poison.poison_gradient_update(g, make_rng(0), "bogus")


def test_precision_recall_empty_conventions():
    f = np.zeros(3, bool)
    assert poison.precision_recall(f, f) == (1.0, 1.0)
