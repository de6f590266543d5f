import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from opic import metrics as mx
from opic.errors import DataError


class TestDiceTopX:
    @pytest.mark.parametrize("x", [5, 10, 25, 50])
    def test_identical_fields(self, x):
        a = np.random.default_rng(0).standard_normal(100)
        assert mx.dice_top_x(a, a.copy(), x) == 1.0

    def test_hand_fixture(self):
        # V=10, x=20 -> k=2; top-2 sets {3,7} and {7,9} -> overlap 1 -> dice 0.5
        a = np.zeros(10)
        a[[3, 7]] = [2.0, 1.5]
        b = np.zeros(10)
        b[[7, 9]] = [1.0, 3.0]
        assert mx.dice_top_x(a, b, 20) == 0.5

    def test_disjoint_sets(self):
        a = np.r_[np.ones(5), np.zeros(5)]
        b = np.r_[np.zeros(5), np.ones(5)]
        assert mx.dice_top_x(a, b, 50) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((2, 64))
        for x in (5, 20, 50):
            assert mx.dice_top_x(a, b, x) == mx.dice_top_x(b, a, x)

    @given(st.integers(1, 4))
    def test_monotone_transform_invariance(self, power)  :
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((2, 50))
        f = lambda v: np.sign(v) * np.abs(v) ** power + 3.0  # strictly increasing
        for x in (10, 30):
            assert mx.dice_top_x(f(a), f(b), x) == mx.dice_top_x(a, b, x)

    def test_tie_break_by_lower_index(self):
        a = np.array([1.0, 1.0, 1.0, 0.0])
        b = np.array([1.0, 0.0, 1.0, 1.0])
        # k=2: a selects {0,1}, b selects {0,2} -> overlap {0}
        assert mx.dice_top_x(a, b, 50) == 0.5

    def test_channels_flattened(self):
        a = np.array([[5.0, 0.0], [0.0, 4.0]])
        assert mx.dice_top_x(a, a.copy(), 50) == 1.0

    def test_zero_k_rejected(self):
        with pytest.raises(ValueError):
            mx.dice_top_x(np.ones(4), np.ones(4), 5)  # round(0.05*4)=0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mx.dice_top_x(np.ones(4), np.ones(5), 50)


class TestDiceCurve:
    def test_identical_gives_ones(self):
        a = np.random.default_rng(3).standard_normal(200)
        curve = mx.dice_curve(a, a.copy())
        assert np.all(curve.dice == 1.0)

    def test_default_grid(self):
        a = np.random.default_rng(4).standard_normal(200)
        curve = mx.dice_curve(a, a)
        assert list(curve.thresholds) == [5, 10, 15, 20, 25, 30, 35, 40, 45, 50]

    def test_matches_pointwise_calls(self):
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal((2, 300))
        curve = mx.dice_curve(a, b)
        for t, d in zip(curve.thresholds, curve.dice):
            assert d == mx.dice_top_x(a, b, t)

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            mx.DiceCurve(np.array([5, 60]), np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            mx.DiceCurve(np.array([10, 5]), np.array([0.5, 0.5]))


class TestDiceAuc:
    def test_all_ones(self):
        assert mx.dice_auc(mx.DiceCurve(np.arange(5, 55, 5), np.ones(10))) == pytest.approx(1.0)

    def test_all_zeros(self):
        assert mx.dice_auc(mx.DiceCurve(np.arange(5, 55, 5), np.zeros(10))) == pytest.approx(0.0)

    def test_linear_curve_trapezoid(self):
        ths = np.array([5.0, 50.0])
        assert mx.dice_auc(mx.DiceCurve(ths, np.array([0.2, 0.4]))) == pytest.approx(0.3)

    def test_single_point_rejected(self):
        with pytest.raises(ValueError):
            mx.dice_auc(mx.DiceCurve(np.array([10.0]), np.array([0.5])))


class TestIdentificationMatrix:
    def test_diagonal_ones_when_exact(self):
        rng = np.random.default_rng(6)
        fields = [rng.standard_normal(80) for _ in range(3)]
        m = mx.identification_matrix(fields, [f.copy() for f in fields])
        assert np.allclose(np.diag(m.data), 1.0)

    def test_shape(self):
        rng = np.random.default_rng(7)
        fields = [rng.standard_normal(60) for _ in range(4)]
        m = mx.identification_matrix(fields, fields)
        assert m.data.shape == (4, 4)

    def test_matches_independent_auc_computations(self):
        rng = np.random.default_rng(8)
        preds = [rng.standard_normal(120) for _ in range(3)]
        targets = [rng.standard_normal(120) for _ in range(3)]
        m = mx.identification_matrix(preds, targets)
        for i in range(3):
            for j in range(3):
                expect = mx.dice_auc(mx.dice_curve(preds[i], targets[j]))
                assert m.data[i, j] == pytest.approx(expect, abs=1e-12)

    def test_subject_count_mismatch(self):
        rng = np.random.default_rng(9)
        with pytest.raises(ValueError):
            mx.identification_matrix([rng.standard_normal(50)] * 3,
                                     [rng.standard_normal(50)] * 2)

    def test_single_subject_rejected(self):
        with pytest.raises(ValueError):
            mx.identification_matrix([np.ones(30)], [np.ones(30)])


class TestNormalizeIdMatrix:
    def test_columns_standardized(self):
        rng = np.random.default_rng(10)
        m = mx.IdentificationMatrix(rng.uniform(0, 1, (5, 5)))
        out = mx.normalize_id_matrix(m)
        assert out.normalization == "column-standardized"
        assert np.max(np.abs(out.data.mean(axis=0))) < 1e-12
        assert np.max(np.abs(out.data.std(axis=0) - 1.0)) < 1e-9

    def test_two_by_two_fixture(self):
        out = mx.normalize_id_matrix(mx.IdentificationMatrix(np.eye(2)))
        assert np.allclose(out.data, [[1.0, -1.0], [-1.0, 1.0]])

    def test_zero_variance_column_left_raw(self, caplog):
        m = mx.IdentificationMatrix(np.array([[0.5, 0.1], [0.5, 0.9]]))
        with caplog.at_level(logging.WARNING, logger="opic.metrics"):
            out = mx.normalize_id_matrix(m)
        assert np.allclose(out.data[:, 0], 0.5)
        assert "zero-variance" in caplog.text

    def test_row_argmax_preserved_on_fixture(self):
        rng = np.random.default_rng(11)
        base = rng.uniform(0, 1, (6, 6)) + 2.0 * np.eye(6)
        m = mx.IdentificationMatrix(base)
        raw_top1, _ = mx.identification_accuracy(m)
        norm_top1, _ = mx.identification_accuracy(mx.normalize_id_matrix(m))
        assert raw_top1 == norm_top1 == 1.0


class TestIdentificationAccuracy:
    def test_perfect_diagonal(self):
        m = mx.IdentificationMatrix(np.eye(4) + 0.1)
        top1, rank = mx.identification_accuracy(m)
        assert top1 == 1.0
        assert rank == 1.0

    def test_partial_rank_fixture(self):
        # one diagonal ranked 2nd, others 1st: top1 = 2/3, mean rank = (1 + .5 + 1)/3
        data = np.array([
            [0.9, 0.1, 0.2],
            [0.5, 0.4, 0.1],  # diagonal 0.4 < 0.5 -> rank 2
            [0.0, 0.1, 0.8],
        ])
        top1, rank = mx.identification_accuracy(mx.IdentificationMatrix(data))
        assert top1 == pytest.approx(2 / 3)
        assert rank == pytest.approx(5 / 6)

    def test_constant_matrix_ties_fail(self):
        top1, rank = mx.identification_accuracy(mx.IdentificationMatrix(np.ones((3, 3))))
        assert top1 == 0.0
        assert rank == 0.0


class TestPredictableFilter:
    def _maps(self, rng, n_subject, effect, sigma_rt):
        # core = shared pattern + per-subject effect; retest re-draws only the noise
        pattern = rng.standard_normal(150)
        test_maps, retest_maps = {}, {}
        for i in range(n_subject):
            subject_effect = effect * rng.standard_normal(150)
            core = pattern + subject_effect
            test_maps[(f"s{i}", "t0")] = core
            retest_maps[(f"s{i}", "t0")] = core + sigma_rt * rng.standard_normal(150)
        return pattern, test_maps, retest_maps

    def test_keeps_task_with_perfect_retest(self):
        rng = np.random.default_rng(12)
        pattern, test_maps, retest_maps = self._maps(rng, 4, effect=0.8, sigma_rt=0.0)
        kept = mx.predictable_filter(test_maps, retest_maps, {"t0": pattern}, [f"s{i}" for i in range(4)])
        assert kept == ["t0"]

    def test_drops_task_without_subject_effect_and_noisy_retest(self):
        rng = np.random.default_rng(13)
        pattern, test_maps, retest_maps = self._maps(rng, 4, effect=0.0, sigma_rt=3.0)
        kept = mx.predictable_filter(test_maps, retest_maps, {"t0": pattern}, [f"s{i}" for i in range(4)])
        assert kept == []

    def test_missing_retest_rejected(self):
        rng = np.random.default_rng(14)
        pattern, test_maps, retest_maps = self._maps(rng, 2, effect=0.5, sigma_rt=0.1)
        del retest_maps[("s1", "t0")]
        with pytest.raises(DataError):
            mx.predictable_filter(test_maps, retest_maps, {"t0": pattern}, ["s0", "s1"])

    def test_subject_order_independent(self):
        rng = np.random.default_rng(15)
        pattern, test_maps, retest_maps = self._maps(rng, 5, effect=0.6, sigma_rt=0.2)
        subjects = [f"s{i}" for i in range(5)]
        a = mx.predictable_filter(test_maps, retest_maps, {"t0": pattern}, subjects)
        b = mx.predictable_filter(test_maps, retest_maps, {"t0": pattern}, subjects[::-1])
        assert a == b


class TestPairedTtest:
    def test_identical_samples(self):
        t, p, df = mx.paired_ttest([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert (t, p, df) == (0.0, 1.0, 2)

    def test_hand_computed_fixture(self):
        t, p, df = mx.paired_ttest([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        assert t == pytest.approx(3.464, abs=1e-3)
        assert p == pytest.approx(0.0742, abs=1e-3)
        assert df == 2

    def test_sign_flip_symmetry(self):
        a = np.array([0.3, 0.9, 0.1, 0.7])
        b = np.array([0.1, 0.5, 0.3, 0.2])
        t1, p1, _ = mx.paired_ttest(a, b)
        t2, p2, _ = mx.paired_ttest(b, a)
        assert t1 == pytest.approx(-t2)
        assert p1 == pytest.approx(p2)

    def test_constant_nonzero_difference_rejected(self):
        with pytest.raises(ValueError):
            mx.paired_ttest([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])

    def test_length_validation(self):
        with pytest.raises(ValueError):
            mx.paired_ttest([1.0], [2.0])
        with pytest.raises(ValueError):
            mx.paired_ttest([1.0, 2.0], [1.0, 2.0, 3.0])
