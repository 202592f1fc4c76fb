"""Batch scores, triplet loss vs brute force, ratio loss, total loss."""

import numpy as np
import pytest

from conftest import make_params

from seps import autodiff as ad
from seps import objective, selection
from seps.alignment import align_score
from seps.bank import Sample, SynthConfig, generate_synthetic
from seps.errors import ConfigError
from seps.objective import (ObjectiveConfig, batch_similarity, ratio_loss,
                            total_loss, triplet_loss)


def brute_force_triplet(s: np.ndarray, margin: float) -> float:
    """Double loop replicating the documented accumulation order exactly."""
    b = s.shape[0]
    total = None
    for i in range(b):
        best_t = max((s[i, j] for j in range(b) if j != i))
        best_i = max((s[k, i] for k in range(b) if k != i))
        text = max(0.0, (best_t + -s[i, i]) + margin)
        image = max(0.0, (best_i + -s[i, i]) + margin)
        term = text + image
        total = term if total is None else total + term
    return total


def small_bank(seed=0, n=4):
    cfg = SynthConfig(n_samples=n, dim=6, n_patches=5, n_relevant_patches=2,
                      n_sparse_words=2, n_dense_words=3, concept_count=8, seed=seed)
    return generate_synthetic(cfg)


# ---------------------------------------------------------------------------
# batch similarity


def test_batch_of_one_matches_standalone():
    bank = small_bank()
    params = make_params(dim=6, n_keep=2, seed=1)
    batch = batch_similarity(bank.samples[:1], params.selection, params.alignment, "eval")
    assert batch.scores.shape == (1, 1)
    agg, _, _ = selection.select_and_aggregate(bank.samples[0], params.selection, "eval")
    standalone = align_score(agg.vectors, bank.samples[0].sparse_tokens,
                             params.alignment).total.item()
    assert batch.scores.data[0, 0] == pytest.approx(standalone, abs=1e-12)


def test_duplicated_sample_gives_equal_rows():
    bank = small_bank(seed=3)
    pair = [bank.samples[0], bank.samples[0]]
    params = make_params(dim=6, n_keep=2, seed=2)
    batch = batch_similarity(pair, params.selection, params.alignment, "eval")
    np.testing.assert_allclose(batch.scores.data[0], batch.scores.data[1], atol=1e-12)


def test_batch_entries_match_standalone_pipeline():
    bank = small_bank(seed=5)
    samples = bank.samples[:3]
    params = make_params(dim=6, n_keep=2, seed=4)
    batch = batch_similarity(samples, params.selection, params.alignment, "eval")
    for i in range(3):
        agg, _, _ = selection.select_and_aggregate(samples[i], params.selection, "eval")
        for j in range(3):
            expected = align_score(agg.vectors, samples[j].sparse_tokens,
                                   params.alignment).total.item()
            assert batch.scores.data[i, j] == pytest.approx(expected, abs=1e-12)


def test_batch_keep_stats_match_hard_fraction():
    bank = small_bank(seed=7)
    params = make_params(dim=6, n_keep=2, seed=6)
    batch = batch_similarity(bank.samples, params.selection, params.alignment, "eval")
    for sample, ks, kd in zip(bank.samples, batch.keep_sparse, batch.keep_dense):
        _, _, (mask_s, mask_d) = selection.select_and_aggregate(
            sample, params.selection, "eval")
        assert ks.item() == mask_s.hard.mean()
        assert kd.item() == mask_d.hard.mean()


# ---------------------------------------------------------------------------
# triplet loss


def test_triplet_margin_satisfied_example():
    s = ad.constant([[0.9, 0.1], [0.2, 0.8]])
    assert triplet_loss(s, 0.2).item() == 0.0


def test_triplet_worked_example():
    s = ad.constant([[0.5, 0.6], [0.4, 0.7]])
    assert triplet_loss(s, 0.2).item() == pytest.approx(0.5, abs=1e-12)


def test_triplet_zero_when_diagonal_dominates(rng):
    for _ in range(10):
        b = int(rng.integers(2, 6))
        s = rng.normal(size=(b, b))
        off_max = (s - np.diag([np.inf] * b)).max()
        np.fill_diagonal(s, off_max + 0.2 + rng.random(b))
        assert triplet_loss(ad.constant(s), 0.2).item() == 0.0


def test_triplet_rejects_singleton():
    with pytest.raises(ConfigError, match="no negatives available"):
        triplet_loss(ad.constant([[1.0]]), 0.2)


def test_triplet_equals_bruteforce_on_random_matrices(rng):
    for _ in range(100):
        b = int(rng.integers(2, 17))
        s = rng.normal(size=(b, b))
        margin = float(rng.uniform(0.05, 0.5))
        assert triplet_loss(ad.constant(s), margin).item() == brute_force_triplet(s, margin)


def test_triplet_gradient_touches_selected_entries_only():
    s = ad.tensor([[0.5, 0.6, 0.1], [0.4, 0.7, 0.2], [0.1, 0.3, 0.4]],
                  requires_grad=True)
    grads = ad.gradient(triplet_loss(s, 0.2), [s])[s].data
    data = s.data
    allowed = set()
    for i in range(3):
        masked = data.copy()
        np.fill_diagonal(masked, -np.inf)
        allowed.add((i, i))
        allowed.add((i, int(np.argmax(masked[i]))))
        allowed.add((int(np.argmax(masked[:, i])), i))
    outside = [(i, j) for i in range(3) for j in range(3) if (i, j) not in allowed]
    assert all(grads[i, j] == 0.0 for i, j in outside)
    assert np.any(grads != 0.0)


def test_triplet_stays_zero_in_clamped_regime(rng):
    base = np.array([[1.0, 0.2, 0.1], [0.0, 0.9, 0.3], [0.2, 0.1, 1.1]])
    margin = 0.2
    assert triplet_loss(ad.constant(base), margin).item() == 0.0
    for _ in range(20):
        jitter = rng.uniform(-0.05, 0.05, size=(3, 3))
        perturbed = base + jitter
        off = perturbed - np.diag([np.inf] * 3)
        if np.all(np.diag(perturbed) >= off.max(axis=1) + margin) and \
                np.all(np.diag(perturbed) >= off.max(axis=0) + margin):
            assert triplet_loss(ad.constant(perturbed), margin).item() == 0.0


# ---------------------------------------------------------------------------
# ratio loss


def stats_of(values_s, values_d):
    return ([ad.constant(v) for v in values_s], [ad.constant(v) for v in values_d])


def test_ratio_loss_zero_at_target():
    cfg = ObjectiveConfig(rho=0.5, lambda1=1.0, lambda2=1.0)
    assert ratio_loss(stats_of([0.25], [0.25]), cfg).item() == 0.0


def test_ratio_loss_worked_example():
    cfg = ObjectiveConfig(rho=0.5, lambda1=1.0, lambda2=1.0)
    assert ratio_loss(stats_of([0.3], [0.1]), cfg).item() == pytest.approx(0.01, abs=1e-12)


def test_ratio_loss_zero_lambdas_is_constant():
    cfg = ObjectiveConfig(rho=0.5, lambda1=0.0, lambda2=0.0)
    ps = ad.tensor(0.3, requires_grad=True)
    pd = ad.tensor(0.6, requires_grad=True)
    loss = ratio_loss(([ps], [pd]), cfg)
    assert loss.item() == pytest.approx(0.25, abs=1e-15)
    grads = ad.gradient(loss, [ps, pd])
    assert grads[ps].item() == 0.0
    assert grads[pd].item() == 0.0


def test_ratio_loss_averages_over_batch():
    cfg = ObjectiveConfig(rho=0.5, lambda1=1.0, lambda2=1.0)
    loss = ratio_loss(stats_of([0.3, 0.25], [0.1, 0.25]), cfg)
    assert loss.item() == pytest.approx(0.005, abs=1e-12)


def test_ratio_gradient_step_shrinks_gap(rng):
    cfg = ObjectiveConfig(rho=0.5, lambda1=1.0, lambda2=1.0)
    step = 1e-3
    for seed in range(10):
        local = np.random.default_rng(seed)
        a = ad.tensor(local.normal(size=6), requires_grad=True)
        b = ad.tensor(local.normal(size=6), requires_grad=True)

        def gap(av, bv):
            ps = 1.0 / (1.0 + np.exp(-av))
            pd = 1.0 / (1.0 + np.exp(-bv))
            return abs(cfg.rho - cfg.lambda1 * ps.mean() - cfg.lambda2 * pd.mean())

        before = gap(a.data, b.data)
        if before < 1e-6:
            continue
        loss = ratio_loss(([ad.mean_all(ad.sigmoid(a))], [ad.mean_all(ad.sigmoid(b))]),
                          cfg)
        grads = ad.gradient(loss, [a, b])
        after = gap(a.data - step * grads[a].data, b.data - step * grads[b].data)
        assert after < before


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_reduces_to_triplet_when_ratio_zero():
    cfg = ObjectiveConfig(margin=0.2, rho=0.5, lambda1=1.0, lambda2=1.0)
    s = ad.constant([[0.5, 0.6], [0.4, 0.7]])
    stats = stats_of([0.25, 0.25], [0.25, 0.25])
    assert total_loss(s, stats, cfg).item() == triplet_loss(s, 0.2).item()


def test_total_loss_reduces_to_ratio_when_margin_satisfied():
    cfg = ObjectiveConfig(margin=0.2, rho=0.5, lambda1=1.0, lambda2=1.0)
    s = ad.constant([[0.9, 0.1], [0.2, 0.8]])
    stats = stats_of([0.3], [0.1])
    assert total_loss(s, stats, cfg).item() == ratio_loss(stats, cfg).item()


def test_total_loss_is_exact_component_sum(rng):
    cfg = ObjectiveConfig(margin=0.3, rho=0.4, lambda1=0.8, lambda2=1.2)
    s = ad.constant(rng.normal(size=(3, 3)))
    stats = stats_of(rng.random(3).tolist(), rng.random(3).tolist())
    assert total_loss(s, stats, cfg).item() == (
        triplet_loss(s, 0.3).item() + ratio_loss(stats, cfg).item())


def test_total_loss_gradients_match_central_differences():
    # whole-pipeline check on a 4-patch / 3-word pair, smooth relaxation
    rng = np.random.default_rng(52)
    samples = [Sample(f"fd{i}", rng.normal(size=(4, 5)),
                      rng.normal(size=(3, 5)), rng.normal(size=(3, 5)))
               for i in range(2)]
    params = make_params(dim=5, n_patches=4, n_keep=2, k_top=2, seed=9)
    cfg = ObjectiveConfig(margin=0.2, rho=0.5, lambda1=1.0, lambda2=1.0)

    def loss_value() -> float:
        with ad.no_grad():
            batch = batch_similarity(samples, params.selection, params.alignment, "soft")
            return objective.batch_loss(batch, cfg).item()

    batch = batch_similarity(samples, params.selection, params.alignment, "soft")
    grads = ad.gradient(objective.batch_loss(batch, cfg), params.tensors())
    step = 1e-6
    worst = 0.0
    for tensor in params.tensors():
        analytic = grads[tensor].data.reshape(-1)
        flat = tensor.data.copy().reshape(-1)
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + step
            tensor.data = flat.reshape(tensor.shape)
            hi = loss_value()
            flat[ci] = orig - step
            tensor.data = flat.reshape(tensor.shape)
            lo = loss_value()
            flat[ci] = orig
            tensor.data = flat.reshape(tensor.shape)
            numeric = (hi - lo) / (2.0 * step)
            worst = max(worst, abs(analytic[ci] - numeric) / max(1.0, abs(analytic[ci])))
    assert worst < 1e-4
