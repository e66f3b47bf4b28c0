import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faircollab.numerics import Dataset, MlpModel, make_blobs
from faircollab.privacy import (BudgetExhaustedError, PrivacyAccountant, PrivacyParams,
                                allocate_budgets, calibrate_sigma, clip_per_example,
                                compose_spent, dp_sgd_step, lot_size_for)


class TestCalibrateSigma:
    def test_golden_value(self):
        # sqrt(2 * ln(1.25e5)) evaluated independently.
        expected = math.sqrt(2.0 * math.log(1.25 / 1e-5))
        assert expected == pytest.approx(4.84480, abs=1e-4)
        assert calibrate_sigma(1.0, 1e-5) == pytest.approx(expected, rel=1e-12)

    def test_clean_inverse(self):
        # delta chosen so 2*ln(1.25/delta) = 1.
        delta = 1.25 * math.exp(-0.5)
        assert calibrate_sigma(1.0, delta) == pytest.approx(1.0, rel=1e-12)

    def test_monotone_in_epsilon(self):
        sigmas = [calibrate_sigma(e, 1e-5) for e in (0.1, 0.3, 0.5, 0.9, 1.0)]
        assert all(a > b for a, b in zip(sigmas, sigmas[1:]))

    def test_round_trip(self):
        sigma = calibrate_sigma(0.7, 1e-6)
        eps_back = math.sqrt(2.0 * math.log(1.25 / 1e-6)) / sigma
        assert eps_back == pytest.approx(0.7, abs=1e-12)

    @pytest.mark.parametrize("eps,delta", [(1.5, 1e-5), (0.0, 1e-5), (-1, 1e-5),
                                           (0.5, 0.0), (0.5, 1.0)])
    def test_invalid_inputs(self, eps, delta):
        with pytest.raises(ValueError):
            calibrate_sigma(eps, delta)


class TestClipping:
    def test_below_bound_unchanged(self):
        g = np.array([0.3, 0.4])  # norm 0.5
        out = clip_per_example([g], 1.0)[0]
        assert np.array_equal(out, g)

    def test_norm_five_rescaled(self):
        out = clip_per_example([np.array([3.0, 4.0])], 1.0)[0]
        assert np.allclose(out, [0.6, 0.8], atol=1e-12)

    def test_zero_stays_zero(self):
        out = clip_per_example([np.zeros(4)], 1.0)[0]
        assert np.array_equal(out, np.zeros(4))

    def test_output_norms_bounded(self):
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=8) * s for s in (0.1, 1.0, 10.0)]
        for g in clip_per_example(grads, 0.7):
            assert np.linalg.norm(g) <= 0.7 + 1e-9


class TestAccountant:
    def test_basic_summation(self):
        acct = PrivacyAccountant(10.0, 1.0, "basic")
        for _ in range(3):
            acct.spend(0.1, 1e-6)
        assert compose_spent(acct) == pytest.approx((0.3, 3e-6), rel=1e-12)

    def test_amplified_map(self):
        acct = PrivacyAccountant(10.0, 1.0, "amplified-basic")
        acct.spend(1.0, 1e-5, q=0.1)
        eps, delta = compose_spent(acct)
        assert eps == pytest.approx(0.1, rel=1e-12)
        assert delta == pytest.approx(1e-6, rel=1e-12)

    def test_empty_ledger(self):
        assert compose_spent(PrivacyAccountant(1.0, 1e-5)) == (0.0, 0.0)

    def test_monotone_and_exhaustion(self):
        acct = PrivacyAccountant(1.0, 1.0, "basic")
        previous = (0.0, 0.0)
        spent_steps = 0
        while True:
            try:
                acct.spend(0.3, 1e-6)
            except BudgetExhaustedError:
                break
            spent_steps += 1
            current = compose_spent(acct)
            assert current[0] >= previous[0] and current[1] >= previous[1]
            previous = current
        assert spent_steps == 3  # 4th step of 0.3 would exceed 1.0
        assert acct.exhausted()
        with pytest.raises(BudgetExhaustedError):
            acct.spend(0.3, 1e-6)

    def test_exhausted_never_reverts(self):
        acct = PrivacyAccountant(0.5, 1.0, "basic")
        with pytest.raises(BudgetExhaustedError):
            acct.spend(0.7, 1e-9)
        assert acct.exhausted()
        with pytest.raises(BudgetExhaustedError):
            acct.spend(0.01, 1e-9)

    def test_amplified_leq_basic_for_small_q(self):
        basic = PrivacyAccountant(1e9, 1.0, "basic")
        amplified = PrivacyAccountant(1e9, 1.0, "amplified-basic")
        for _ in range(50):
            basic.spend(0.5, 1e-7, q=0.1)
            amplified.spend(0.5, 1e-7, q=0.1)
        assert compose_spent(amplified)[0] <= compose_spent(basic)[0]
        assert compose_spent(amplified)[1] <= compose_spent(basic)[1]

    def test_spend_many_atomic(self):
        acct = PrivacyAccountant(1.0, 1.0, "basic")
        with pytest.raises(BudgetExhaustedError):
            acct.spend_many(0.4, 1e-7, count=3)
        assert acct.records == []

    def test_serialization_round_trip(self):
        acct = PrivacyAccountant(2.0, 1e-5, "amplified-basic")
        acct.spend(0.5, 1e-6, q=0.25)
        acct.spend(0.25, 2e-6, q=0.5)
        again = PrivacyAccountant.from_json(acct.to_json())
        assert again.strategy == acct.strategy
        assert again.records == acct.records
        assert compose_spent(again) == compose_spent(acct)
        assert again.exhausted() == acct.exhausted()

    @given(st.lists(st.tuples(st.floats(0.01, 0.5), st.floats(1e-9, 1e-6),
                              st.floats(0.01, 1.0)), max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_spent_monotone_property(self, steps):
        for strategy in ("basic", "amplified-basic"):
            acct = PrivacyAccountant(1e9, 1.0, strategy)
            last = (0.0, 0.0)
            for eps, delta, q in steps:
                acct.spend(eps, delta, q)
                now = compose_spent(acct)
                assert now[0] >= last[0] and now[1] >= last[1]
                last = now


class TestBudgetAllocation:
    def test_update_mnist(self):
        assert allocate_budgets("update", "mnist") == (2.0, 1e-5)

    def test_init_svhn_exception(self):
        assert allocate_budgets("initialisation", "svhn") == (4.0, 1e-6)

    def test_stages_compose_to_total(self):
        e1, d1 = allocate_budgets("initialisation", "mnist")
        e2, d2 = allocate_budgets("update", "mnist")
        assert (e1 + e2, d1 + d2) == (6.0, 2e-5)

    def test_unknown_dataset_uses_default_delta(self):
        assert allocate_budgets("update", "no-such-set") == (2.0, 1e-5)

    def test_unknown_stage_rejected(self):
        with pytest.raises(ValueError):
            allocate_budgets("warmup", "mnist")


def _setup_step(seed=0, n=64, lot=None):
    rng = np.random.default_rng(seed)
    data = make_blobs(n, 3, 4, rng, spread=0.1)
    model = MlpModel.seeded((4, 5, 3), rng)
    lot = lot or lot_size_for(n)
    params = PrivacyParams(1.0, 1e-5, 1.0, lot, n)
    acct = PrivacyAccountant(100.0, 1.0, "basic")
    return rng, data, model, params, acct


class TestDpSgdStep:
    def test_zero_noise_hook_equals_clipped_lot_mean(self):
        rng, data, model, params, acct = _setup_step()
        check_rng = np.random.default_rng(1234)
        result = dp_sgd_step(model, data, params, np.random.default_rng(1234), acct, sigma=0.0)
        # Reproduce the lot draw with an identical generator.
        lot_idx = check_rng.integers(0, len(data), size=params.lot_size)
        from faircollab.numerics import per_example_gradients
        grads = per_example_gradients(model, data.subset(lot_idx))
        norms = np.linalg.norm(grads, axis=1, keepdims=True)
        grads = grads * np.minimum(1.0, params.clip_norm / np.maximum(norms, 1e-300))
        assert np.allclose(result, grads.mean(axis=0), atol=1e-12)

    def test_noise_standard_deviation(self):
        # Monte Carlo estimate of the per-coordinate noise std. Every row
        # of the dataset is identical, so the clipped lot mean is constant
        # and the residual against the zero-noise hook is pure noise.
        rng = np.random.default_rng(2)
        row = rng.uniform(size=4)
        data = Dataset(np.tile(row, (50, 1)), np.zeros(50, dtype=int), 3)
        model = MlpModel.seeded((4, 5, 3), rng)
        params = PrivacyParams(1.0, 1e-5, 1.0, 7, 50)
        acct = PrivacyAccountant(1e9, 1.0, "basic")
        base = dp_sgd_step(model, data, params, rng, acct, sigma=0.0)
        residuals = [dp_sgd_step(model, data, params, rng, acct) - base
                     for _ in range(300)]
        observed = np.std(np.concatenate(residuals))
        expected = params.sigma * params.clip_norm / params.lot_size
        assert observed == pytest.approx(expected, rel=0.05)

    def test_accountant_records_each_step(self):
        rng, data, model, params, acct = _setup_step(seed=3)
        for _ in range(5):
            dp_sgd_step(model, data, params, rng, acct)
        assert len(acct.records) == 5
        assert acct.records[0].q == pytest.approx(params.sample_ratio)

    def test_refuses_when_exhausted(self):
        rng, data, model, params, _ = _setup_step(seed=4)
        acct = PrivacyAccountant(1.5, 1.0, "basic")
        dp_sgd_step(model, data, params, rng, acct)
        with pytest.raises(BudgetExhaustedError):
            dp_sgd_step(model, data, params, rng, acct)
        assert len(acct.records) == 1

    def test_bit_reproducible_with_fixed_seed(self):
        _, data, model, params, _ = _setup_step(seed=5)
        a = dp_sgd_step(model.copy(), data, params, np.random.default_rng(42),
                        PrivacyAccountant(10, 1, "basic"))
        b = dp_sgd_step(model.copy(), data, params, np.random.default_rng(42),
                        PrivacyAccountant(10, 1, "basic"))
        assert np.array_equal(a, b)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            PrivacyParams(1.5, 1e-5, 1.0, 10, 100)
        with pytest.raises(ValueError):
            PrivacyParams(0.5, 1e-5, 1.0, 200, 100)
        with pytest.raises(ValueError):
            PrivacyParams(0.5, 1e-5, -1.0, 10, 100)
