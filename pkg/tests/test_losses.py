import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdcnn import autodiff as ad
from mmdcnn.autodiff import Tensor, backward, grad_check
from mmdcnn.losses import (
    KernelSpec,
    LambdaSchedule,
    categorical_cross_entropy,
    combined_loss,
    mmd2,
    rbf_kernel_matrix,
    resolve_bandwidths,
    update_lambda,
)
from mmdcnn.model import softmax_forward

from oracles import cross_entropy_naive, median_sq_dist, mmd2_brute


class TestCrossEntropy:
    def test_uniform_prediction_is_ln2(self):
        ce = categorical_cross_entropy(Tensor([[0.5, 0.5]]), Tensor([[1.0, 0.0]]))
        assert float(ce.data) == pytest.approx(math.log(2.0), abs=1e-12)
        ce = categorical_cross_entropy(Tensor([[0.5, 0.5]]), Tensor([[0.0, 1.0]]))
        assert float(ce.data) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_prediction_is_near_zero(self):
        ce = categorical_cross_entropy(Tensor([[1.0 - 1e-12, 1e-12]]), Tensor([[1.0, 0.0]]))
        assert float(ce.data) == pytest.approx(0.0, abs=1e-11)

    def test_two_sample_batch_value(self):
        probs = [[0.9, 0.1], [0.2, 0.8]]
        one_hot = [[1.0, 0.0], [0.0, 1.0]]
        ce = categorical_cross_entropy(Tensor(probs), Tensor(one_hot))
        assert float(ce.data) == pytest.approx(0.16425203348601802, abs=1e-12)
        assert float(ce.data) == pytest.approx(
            cross_entropy_naive(np.array(probs), np.array(one_hot)), abs=1e-15)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            categorical_cross_entropy(Tensor(np.ones((0, 2))), Tensor(np.ones((0, 2))))

    def test_malformed_one_hot_rejected(self):
        with pytest.raises(ValueError):
            categorical_cross_entropy(Tensor([[0.5, 0.5]]), Tensor([[0.5, 0.5]]))
        with pytest.raises(ValueError):
            categorical_cross_entropy(Tensor([[0.5, 0.5]]), Tensor([[1.0, 1.0]]))

    def test_gradient_identity_through_softmax(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        y = np.eye(4)[rng.integers(0, 4, size=6)]
        probs = softmax_forward(logits)
        backward(categorical_cross_entropy(probs, Tensor(y)))
        expected = (probs.data - y) / 6.0
        np.testing.assert_allclose(logits.grad, expected, atol=1e-10, rtol=0)

    def test_gradcheck_through_softmax(self):
        rng = np.random.default_rng(1)
        y = Tensor(np.eye(3)[rng.integers(0, 3, size=5)])
        logits = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        err = grad_check(lambda t: categorical_cross_entropy(softmax_forward(t), y), logits)
        assert err < 1e-6


class TestKernel:
    def test_zero_distance_single_sigma(self):
        spec = KernelSpec(bandwidths=(1.3,))
        k = rbf_kernel_matrix(Tensor([[2.0, 3.0]]), Tensor([[2.0, 3.0]]), spec)
        assert k.item() == pytest.approx(1.0, abs=1e-15)

    def test_value_at_sq_dist_two_sigma_squared(self):
        sigma = 0.7
        d = sigma * math.sqrt(2.0)
        spec = KernelSpec(bandwidths=(sigma,))
        k = rbf_kernel_matrix(Tensor([[0.0]]), Tensor([[d]]), spec)
        assert k.item() == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_decays_monotonically_with_distance(self):
        spec = KernelSpec(bandwidths=(1.0,))
        dists = np.linspace(0.0, 8.0, 17)
        vals = [rbf_kernel_matrix(Tensor([[0.0]]), Tensor([[d]]), spec).item()
                for d in dists]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-10

    def test_self_kernel_counts_components(self):
        spec = KernelSpec(bandwidths=(0.5, 1.0, 2.0))
        k = rbf_kernel_matrix(Tensor([[1.0, 1.0]]), Tensor([[1.0, 1.0]]), spec)
        assert k.item() == pytest.approx(3.0, abs=1e-14)

    def test_empty_side_rejected(self):
        with pytest.raises(ValueError):
            rbf_kernel_matrix(Tensor(np.ones((0, 2))), Tensor(np.ones((3, 2))),
                              KernelSpec(bandwidths=(1.0,)))

    def test_symmetric_when_x_equals_y(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 3))
        k = rbf_kernel_matrix(Tensor(x), Tensor(x), KernelSpec(bandwidths=(1.0, 2.0)))
        assert np.array_equal(k.data, k.data.T)

    def test_median_heuristic_matches_oracle(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(4, 2)), rng.normal(size=(5, 2))
        sigmas = resolve_bandwidths(KernelSpec(), Tensor(x), Tensor(y))
        base = math.sqrt(median_sq_dist(np.concatenate([x, y])))
        assert sigmas == pytest.approx(tuple(m * base for m in (0.25, 0.5, 1.0, 2.0, 4.0)))

    def test_median_heuristic_degenerate_sample_falls_back(self):
        x = np.ones((3, 2))
        sigmas = resolve_bandwidths(KernelSpec(multipliers=(1.0,)), Tensor(x), Tensor(x))
        assert sigmas == (1.0,)

    def test_median_invariant_to_row_order(self):
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
        ref = resolve_bandwidths(KernelSpec(), Tensor(x), Tensor(y))
        perm = rng.permutation(4)
        assert resolve_bandwidths(KernelSpec(), Tensor(x[perm]), Tensor(y)) == ref
        assert resolve_bandwidths(KernelSpec(), Tensor(y), Tensor(x)) == ref

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError):
            KernelSpec(bandwidths=())
        with pytest.raises(ValueError):
            KernelSpec(bandwidths=(-1.0,))
        with pytest.raises(ValueError):
            KernelSpec(family="laplace")


class TestMMD2:
    def test_same_sample_is_exactly_zero(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 4))
        val = mmd2(Tensor(x), Tensor(x), KernelSpec(), estimator="biased")
        assert val.item() == 0.0

    def test_two_point_closed_form(self):
        sigma = 1.1
        d = sigma * math.sqrt(2.0)
        spec = KernelSpec(bandwidths=(sigma,))
        val = mmd2(Tensor([[0.0]]), Tensor([[d]]), spec, estimator="biased")
        assert val.item() == pytest.approx(2.0 - 2.0 * math.exp(-1.0), abs=1e-12)

    @pytest.mark.parametrize("estimator", ["biased", "unbiased"])
    def test_matches_brute_force_oracle(self, estimator):
        rng = np.random.default_rng(6)
        for _ in range(20):
            m, n = rng.integers(2, 9, size=2)
            d = int(rng.integers(1, 6))
            x, y = rng.normal(size=(m, d)), rng.normal(size=(n, d)) + 0.5
            sigmas = (0.8, 1.7)
            val = mmd2(Tensor(x), Tensor(y), KernelSpec(bandwidths=sigmas), estimator=estimator)
            assert val.item() == pytest.approx(
                mmd2_brute(x, y, sigmas, estimator), abs=1e-10)

    def test_sample_size_preconditions(self):
        spec = KernelSpec(bandwidths=(1.0,))
        with pytest.raises(ValueError, match="unbiased"):
            mmd2(Tensor([[0.0]]), Tensor([[1.0], [2.0]]), spec, estimator="unbiased")
        with pytest.raises(ValueError, match="biased"):
            mmd2(Tensor(np.ones((0, 1))), Tensor([[1.0]]), spec, estimator="biased")

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        spec = KernelSpec(bandwidths=(0.9, 2.1))
        y = Tensor(rng.normal(size=(4, 3)))
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        assert grad_check(lambda t: mmd2(t, y, spec, "biased"), x) < 1e-5
        x2 = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        assert grad_check(lambda t: mmd2(t, y, spec, "unbiased"), x2) < 1e-5
        y2 = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x_const = Tensor(rng.normal(size=(5, 3)))
        assert grad_check(lambda t: mmd2(x_const, t, spec, "biased"), y2) < 1e-5

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_biased_nonnegative_and_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        m, n = rng.integers(1, 7, size=2)
        d = int(rng.integers(1, 4))
        x, y = rng.normal(size=(m, d)), rng.normal(size=(n, d)) * 2.0
        spec = KernelSpec()
        forward = float(mmd2(Tensor(x), Tensor(y), spec, "biased").data)
        backward_ = float(mmd2(Tensor(y), Tensor(x), spec, "biased").data)
        assert forward >= -1e-12
        assert forward == backward_

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        m, n = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        x, y = rng.normal(size=(m, 3)), rng.normal(size=(n, 3))
        spec = KernelSpec()
        ref = float(mmd2(Tensor(x), Tensor(y), spec, "unbiased").data)
        shuffled = float(mmd2(
            Tensor(x[rng.permutation(m)]), Tensor(y[rng.permutation(n)]),
            spec, "unbiased").data)
        assert shuffled == pytest.approx(ref, abs=1e-12)


class TestLambdaSchedule:
    def test_starts_at_zero(self):
        sched = LambdaSchedule()
        assert update_lambda(sched, 0, 30) == 0.0

    def test_midpoint_value(self):
        sched = LambdaSchedule(lambda_max=1.0, gamma=10.0)
        lam = update_lambda(sched, 5, 11)  # p = 0.5
        assert sched.progress == 0.5
        assert lam == pytest.approx(0.9866142981514305, abs=1e-12)

    def test_final_epoch_value(self):
        sched = LambdaSchedule(lambda_max=1.0, gamma=10.0)
        lam = update_lambda(sched, 29, 30)
        assert sched.progress == 1.0
        assert lam == pytest.approx(0.9999092042625952, abs=1e-12)

    def test_single_epoch_run_stays_at_zero(self):
        sched = LambdaSchedule()
        assert update_lambda(sched, 0, 1) == 0.0

    def test_zero_total_epochs_rejected(self):
        with pytest.raises(ValueError):
            update_lambda(LambdaSchedule(), 0, 0)

    def test_epoch_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            update_lambda(LambdaSchedule(), 30, 30)

    @given(st.floats(0.0, 5.0), st.floats(0.1, 30.0), st.integers(2, 200))
    @settings(max_examples=100, deadline=None)
    def test_monotone_and_bounded(self, lambda_max, gamma, epochs):
        sched = LambdaSchedule(lambda_max=lambda_max, gamma=gamma)
        values = [update_lambda(sched, e, epochs) for e in range(epochs)]
        assert values[0] == 0.0
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert all(v <= lambda_max for v in values)


class TestCombinedLoss:
    def _batch(self, seed=0):
        rng = np.random.default_rng(seed)
        probs = softmax_forward(Tensor(rng.normal(size=(4, 2))))
        labels = Tensor(np.eye(2)[rng.integers(0, 2, size=4)])
        feats_s = Tensor(rng.normal(size=(4, 6)))
        feats_t = Tensor(rng.normal(size=(3, 6)))
        return probs, labels, feats_s, feats_t

    def test_off_mode_is_plain_cross_entropy(self):
        probs, labels, *_ = self._batch()
        total, report = combined_loss(probs, labels, None, None, "off", KernelSpec(), 0.7)
        assert report.mmd_value == 0.0
        assert report.total == report.ce_loss == float(total.data)

    def test_zero_weight_keeps_ce_total(self):
        probs, labels, fs, ft = self._batch()
        total, report = combined_loss(probs, labels, fs, ft, "features", KernelSpec(), 0.0)
        assert float(total.data) == report.ce_loss
        assert report.mmd_value > 0.0  # still measured for metrics

    def test_identical_batches_add_nothing(self):
        probs, labels, fs, _ = self._batch()
        total, report = combined_loss(probs, labels, fs, fs, "features", KernelSpec(), 1.0)
        assert report.mmd_value == 0.0
        assert float(total.data) == pytest.approx(report.ce_loss, abs=1e-12)

    def test_composition_is_exact(self):
        probs, labels, fs, ft = self._batch(3)
        lam = 0.37
        total, report = combined_loss(probs, labels, fs, ft, "features", KernelSpec(), lam)
        assert report.total == report.ce_loss + lam * report.mmd_value
        assert report.total == float(total.data)

    def test_prediction_space_discrepancy(self):
        rng = np.random.default_rng(9)
        probs, labels, *_ = self._batch(5)
        probs_t = softmax_forward(Tensor(rng.normal(size=(5, 2)) + 2.0))
        total, report = combined_loss(
            probs, labels, probs, probs_t, "predictions", KernelSpec(), 1.0)
        assert report.mmd_value > 0.0
        assert float(total.data) == pytest.approx(
            report.ce_loss + report.mmd_value, abs=1e-12)

    def test_missing_target_rejected(self):
        probs, labels, fs, _ = self._batch()
        with pytest.raises(ValueError):
            combined_loss(probs, labels, fs, None, "features", KernelSpec(), 1.0)

    def test_unknown_mode_rejected(self):
        probs, labels, fs, ft = self._batch()
        with pytest.raises(ValueError):
            combined_loss(probs, labels, fs, ft, "adversarial", KernelSpec(), 1.0)

    def test_zero_weight_backward_skips_discrepancy(self):
        rng = np.random.default_rng(11)
        logits = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        labels = Tensor(np.eye(2)[rng.integers(0, 2, size=4)])
        feats_t = Tensor(rng.normal(size=(4, 2)))

        probs = softmax_forward(logits)
        total, _ = combined_loss(probs, labels, probs, feats_t, "features", KernelSpec(), 0.0)
        backward(total)
        grad_adapted = logits.grad.copy()

        logits2 = Tensor(logits.data.copy(), requires_grad=True)
        probs2 = softmax_forward(logits2)
        total2, _ = combined_loss(probs2, labels, None, None, "off", KernelSpec(), 0.0)
        backward(total2)
        assert np.array_equal(grad_adapted, logits2.grad)
