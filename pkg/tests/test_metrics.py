import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import wilcoxon_enumerate
from scse.metrics import DiceReport, dice_per_class, dice_report, format_cell, wilcoxon_signed_rank

label_maps = arrays(np.int64, (4, 5), elements=st.integers(0, 3))


class TestDice:
    def test_identity(self, rng):
        gt = rng.integers(0, 4, (8, 8))
        assert all(dice_per_class(gt, gt, c) == 1.0 for c in np.unique(gt))

    def test_disjoint(self):
        assert dice_per_class(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1]), 1) == 0.0

    def test_half_overlap(self):
        assert dice_per_class(np.array([1, 1, 0, 0]), np.array([0, 1, 1, 0]), 1) == 0.5

    def test_hand_counted(self):
        pred = np.array([[1, 1, 2], [0, 2, 2], [0, 0, 1]])
        gt = np.array([[1, 0, 2], [0, 2, 1], [0, 2, 1]])
        # every class has |P| = |G| = 3 and an overlap of 2 pixels
        for c in range(3):
            assert dice_per_class(pred, gt, c) == 4 / 6
        assert dice_per_class(pred, gt, 3) == 1.0

    def test_both_empty(self):
        assert dice_per_class(np.zeros(4), np.zeros(4), 3) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_per_class(np.zeros(4), np.zeros(5), 0)

    @settings(max_examples=60, deadline=None)
    @given(label_maps, label_maps, st.integers(0, 3), st.permutations(range(4)))
    def test_symmetric_and_relabel_invariant(self, pred, gt, c, perm):
        assert dice_per_class(pred, gt, c) == dice_per_class(gt, pred, c)
        mapping = np.array(perm)
        assert dice_per_class(mapping[pred], mapping[gt], perm[c]) == dice_per_class(pred, gt, c)


class TestReport:
    def test_single_perfect(self, rng):
        gt = rng.integers(0, 4, (6, 6))
        rep = dice_report([gt], [gt], 4)
        assert (rep.mean, rep.std) == (1.0, 0.0)
        assert rep.cell() == "1.000±0.000"

    def test_self_evaluation_is_exactly_one(self, rng):
        gts = list(rng.integers(0, 4, (5, 8, 8)))
        assert dice_report(gts, gts, 4, exclude_background=False).mean == 1.0

    def test_population_std(self):
        rep = DiceReport(np.array([[1.0, 0.8, 0.8], [1.0, 0.6, 0.6]]))
        assert abs(rep.mean - 0.7) <= 1e-12
        assert abs(rep.std - 0.1) <= 1e-12

    def test_cell_format(self):
        assert format_cell(0.842, 0.058) == "0.842±0.058"

    def test_cell_from_constructed_moments(self):
        rep = DiceReport(np.array([[1.0, 0.842 - 0.058], [1.0, 0.842 + 0.058]]))
        assert rep.cell() == "0.842±0.058"

    def test_long_csv_rows(self, rng):
        rep = dice_report(list(rng.integers(0, 4, (7, 4, 4))), list(rng.integers(0, 4, (7, 4, 4))), 4)
        assert len(rep.to_long_csv().strip().splitlines()) == 1 + 4 * 7
        assert len(rep.to_csv().strip().splitlines()) == 1 + 4

    def test_background_toggle(self):
        rep = DiceReport(np.array([[0.0, 1.0]]), exclude_background=False)
        assert rep.mean == 0.5
        assert DiceReport(np.array([[0.0, 1.0]])).mean == 1.0


def _fixtures():
    """Paired samples with n from 5 to 12, including ties and zero differences."""
    r = np.random.default_rng(2024)
    out = []
    for n in range(5, 13):
        for variant in range(4):
            a = r.uniform(0.6, 0.95, n)
            if variant == 1:
                b = a - r.choice([-0.02, -0.01, 0.01, 0.02, 0.03], n)  # heavy ties
            elif variant == 2:
                b = a + r.normal(0.01, 0.02, n)
            elif variant == 3:
                b = a - np.abs(r.normal(0, 0.02, n))  # one-sided
            else:
                b = r.uniform(0.6, 0.95, n)
            out.append((np.round(a, 6), np.round(b, 6)))
        a = r.uniform(size=n + 2)
        b = a.copy()
        b[:n] += r.normal(size=n)  # two zero differences dropped
        out.append((a, b))
    return out


class TestWilcoxon:
    def test_all_positive_n5(self):
        res = wilcoxon_signed_rank([2, 3, 4, 5, 6], [1, 1, 1, 1, 1])
        assert res.statistic == 0 and res.n == 5 and res.method == "exact"
        assert res.p_value == 2 / 32 == 0.0625

    def test_too_few_differences(self):
        a = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
        b = list(a)
        b[2] += 0.1
        with pytest.raises(ValueError, match="nonzero differences"):
            wilcoxon_signed_rank(a, b)

    def test_antisymmetric(self):
        d = np.array([0.1, -0.1, 0.2, -0.2, 0.3, -0.3])
        res = wilcoxon_signed_rank(d, np.zeros(6))
        assert res.statistic == 6 * 7 / 4
        assert res.p_value == 1.0
        assert res.p_value == wilcoxon_enumerate(d, np.zeros(6))[2]

    @pytest.mark.parametrize("idx", range(len(_fixtures())))
    def test_exact_matches_enumeration(self, idx):
        a, b = _fixtures()[idx]
        w, n, p = wilcoxon_enumerate(list(a), list(b))
        res = wilcoxon_signed_rank(a, b)
        assert res.n == n <= 12
        assert res.statistic == w
        assert res.p_value == p

    def test_normal_approximation_near_exact_at_12(self):
        # every attainable statistic for 12 untied differences: rank k contributes k or 0
        for w in range(0, 40):
            a = np.arange(1, 13, dtype=float)
            signs = np.ones(12)
            rest, k = w, 12
            while rest and k:  # greedy subset of ranks summing to w
                if k <= rest:
                    signs[k - 1], rest = -1, rest - k
                k -= 1
            exact = wilcoxon_signed_rank(a * signs, np.zeros(12), method="exact")
            approx = wilcoxon_signed_rank(a * signs, np.zeros(12), method="normal_approx")
            assert exact.statistic == w
            gap = abs(exact.p_value - approx.p_value)
            # the continuity-corrected normal curve is tight in the tails and
            # drifts to about 0.0137 for p-values around 0.4
            assert gap <= (0.01 if exact.p_value <= 0.2 else 0.014), (w, exact.p_value, approx.p_value)

    def test_normal_approximation_on_fixtures(self):
        for a, b in _fixtures():
            exact = wilcoxon_signed_rank(a, b, method="exact")
            if exact.n == 12 and exact.p_value <= 0.2:
                approx = wilcoxon_signed_rank(a, b, method="normal_approx").p_value
                assert abs(exact.p_value - approx) <= 0.01

    def test_large_n_uses_normal(self, rng):
        a = rng.uniform(size=30)
        assert wilcoxon_signed_rank(a, a + rng.normal(size=30)).method == "normal_approx"

    def test_agrees_with_scipy(self, rng):
        stats = pytest.importorskip("scipy.stats")
        for n in (6, 9, 12, 25, 40):
            a, b = rng.uniform(size=n), rng.uniform(size=n)
            ours = wilcoxon_signed_rank(a, b)
            ref = stats.wilcoxon(a, b, method="exact" if n <= 12 else "approx", correction=True)
            assert ours.statistic == ref.statistic
            assert abs(ours.p_value - ref.pvalue) <= (1e-12 if n <= 12 else 1e-9)
