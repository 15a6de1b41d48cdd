"""Seeded regression checks on the benchmark experiments beyond the acceptance gate."""

import pytest

from advml import benchmarks


@pytest.fixture(scope="module")
def attack():
    return benchmarks.attack_effectiveness(0)


def test_fgsm_error_monotone_in_budget(attack):
    errs = [attack[f"fgsm_error@{e}"] for e in (0.0, 0.05, 0.1, 0.2)]
    assert errs == sorted(errs) and errs[0] == 0.0


def test_detector_flags_pgd_more_than_clean(attack):
    assert attack["detect_rate_pgd"] > attack["detect_rate_clean"]
    assert attack["detect_rate_pgd"] == pytest.approx(0.24, abs=0.02)


def test_backdoor_activation_audit_separates():
    r = benchmarks.backdoor_pipeline(0)
    assert r["activation_flag_rate_triggered"] > r["activation_flag_rate_clean"]
    assert r["filter_precision"] == 1.0 and r["filter_recall"] == 1.0


def test_inversion_reaches_target():
    r = benchmarks.inversion(0)
    assert r["final_target_prob"] >= 0.99 and r["template_cosine"] > 0


def test_federated_clean_accuracy():
    r = benchmarks.federated(0)
    assert r["clean_final_accuracy"] >= 0.85
    assert len(r["clean_history"].accuracy) == 10


def test_extraction_fidelity_and_budget():
    r = benchmarks.extraction(0, noise_factors=(0.0,))
    assert r["agreement@noise=0.0"] >= 0.95 and r["queries@noise=0.0"] == 2000
    assert r["transfer_rate"] > 0


def test_representation_regressions():
    r = benchmarks.representation(0)
    assert r["distill_agreement"] >= 0.9
    assert r["contrastive_intra"] < r["contrastive_inter"]
    assert r["malware_intra"] < r["malware_inter"]
    assert r["rotation_accuracy"] >= 0.7
    assert r["ae_other_class_score"] > r["ae_clean_score"]
