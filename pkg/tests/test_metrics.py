import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmeseg import metrics
from cmeseg.errors import ExtentMismatch, LengthMismatch
from cmeseg.metrics import (build_report, dice, per_patient_means,
                            wilcoxon_matched_pairs)


def enum_oracle_p(x, y):
    """Literal enumeration over all 2^n sign assignments, integer-exact.

    Uses doubled mid-ranks computed by counting (independently of the
    implementation's sort-based ranking).
    """
    d = np.asarray(x, float) - np.asarray(y, float)
    nz = d[d != 0]
    n = nz.size
    if n == 0:
        return 1.0
    absd = np.abs(nz)
    ranks2 = np.array([2 * int((absd < v).sum()) + int((absd == v).sum()) + 1
                       for v in absd], dtype=np.int64)
    total2 = int(ranks2.sum())
    wp2 = int(ranks2[nz > 0].sum())
    wobs2 = min(wp2, total2 - wp2)
    count = 0
    for bits in range(2 ** n):
        s = 0
        for i in range(n):
            if bits >> i & 1:
                s += ranks2[i]
        if min(s, total2 - s) <= wobs2:
            count += 1
    return count / 2.0 ** n


class TestDice:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4), np.uint8)
        m[1:3, 1:3] = 1
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), np.uint8)
        b = np.zeros((4, 4), np.uint8)
        a[0, 0] = 1
        b[3, 3] = 1
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4), np.uint8)
        b = np.zeros((4, 4), np.uint8)
        a[0, :4] = 1
        b[0, 2:4] = 1
        b[1, :2] = 1
        assert dice(a, b) == 0.5  # |a|=4, |b|=4, overlap 2

    def test_both_empty_is_one(self):
        z = np.zeros((3, 3), np.uint8)
        assert dice(z, z) == 1.0

    def test_extent_mismatch(self):
        with pytest.raises(ExtentMismatch):
            dice(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 2, (6, 6)).astype(np.uint8)
        b = rng.integers(0, 2, (6, 6)).astype(np.uint8)
        d1, d2 = dice(a, b), dice(b, a)
        assert d1 == d2
        assert 0.0 <= d1 <= 1.0
        if a.any():
            assert dice(a, a) == 1.0

    def test_matches_direct_pixel_arithmetic(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            a = rng.integers(0, 2, (8, 8)).astype(np.uint8)
            b = rng.integers(0, 2, (8, 8)).astype(np.uint8)
            inter = int(((a == 1) & (b == 1)).sum())
            tot = int((a == 1).sum()) + int((b == 1).sum())
            expected = 1.0 if tot == 0 else 2 * inter / tot
            assert dice(a, b) == expected


class TestPerPatientMeans:
    def test_two_values(self):
        assert per_patient_means([("p1", 0.4), ("p1", 0.6)]) == {"p1": 0.5}

    def test_single_value(self):
        assert per_patient_means([("p9", 0.77)]) == {"p9": 0.77}

    def test_ten_patients_eleven_images(self):
        rng = np.random.default_rng(0)
        pairs = []
        expected = {}
        for p in range(10):
            vals = rng.random(11)
            pid = f"p{p:02d}"
            pairs.extend((pid, float(v)) for v in vals)
            expected[pid] = float(vals.mean())
        got = per_patient_means(pairs)
        assert len(got) == 10
        for pid in expected:
            assert got[pid] == pytest.approx(expected[pid], rel=1e-12)


class TestWilcoxon:
    def test_identical_vectors(self):
        r = wilcoxon_matched_pairs([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert r.p_value == 1.0
        assert r.n_effective == 0

    def test_five_positive_differences(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        r = wilcoxon_matched_pairs(x + np.array([0.3, 0.9, 0.1, 0.5, 0.2]), x)
        assert r.w == 0.0
        assert r.exact
        assert r.p_value == 2 / 2 ** 5

    def test_mixed_signs_match_enumeration(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, -6.0])
        y = np.zeros(6)
        r = wilcoxon_matched_pairs(x, y)
        assert r.exact
        assert r.p_value == enum_oracle_p(x, y)

    @pytest.mark.parametrize("n", [2, 4, 7, 10, 12])
    def test_exact_matches_enumeration_oracle(self, n):
        rng = np.random.default_rng(100 + n)
        for _ in range(12):
            d = rng.integers(-5, 6, n).astype(float)
            x = rng.random(n) * 4
            r = wilcoxon_matched_pairs(x + d, x)
            assert r.exact
            assert r.p_value == enum_oracle_p(x + d, x), d

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.random(9)
        y = rng.random(9)
        a = wilcoxon_matched_pairs(x, y)
        b = wilcoxon_matched_pairs(7.5 * x, 7.5 * y)
        assert a.p_value == b.p_value
        assert a.n_effective == b.n_effective

    def test_large_n_uses_normal_approximation(self):
        rng = np.random.default_rng(4)
        x = rng.random(40)
        y = x + rng.normal(0, 0.3, 40)
        r = wilcoxon_matched_pairs(x, y)
        assert not r.exact
        assert 0.0 <= r.p_value <= 1.0
        from scipy import stats
        ref = stats.wilcoxon(x, y, correction=True, method="approx")
        assert r.p_value == pytest.approx(ref.pvalue, abs=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            wilcoxon_matched_pairs([1.0, 2.0], [1.0])


class TestBuildReport:
    @staticmethod
    def masks(rng, n):
        return [rng.integers(0, 2, (6, 6)).astype(np.uint8) for _ in range(n)]

    def test_perfect_agreement(self):
        rng = np.random.default_rng(5)
        auto = self.masks(rng, 6)
        pids = ["a", "a", "a", "b", "b", "b"]
        rep = build_report(auto, [m.copy() for m in auto], pids)
        assert rep.dice_mean == 1.0
        assert rep.dice_std == 0.0
        assert rep.wilcoxon is None
        assert rep.inter_grader_mean is None

    def test_grader2_enables_wilcoxon_and_intergrader(self):
        rng = np.random.default_rng(6)
        auto = self.masks(rng, 8)
        g1 = self.masks(rng, 8)
        g2 = self.masks(rng, 8)
        pids = [f"p{i // 2}" for i in range(8)]
        rep = build_report(auto, g1, pids, grader2_masks=g2)
        assert rep.wilcoxon is not None
        assert rep.inter_grader_mean is not None
        # wilcoxon pairs the per-patient means of the two comparisons
        a = [rep.per_patient[p] for p in rep.per_patient]
        b = [rep.inter_grader_per_patient[p] for p in rep.per_patient]
        ref = wilcoxon_matched_pairs(a, b)
        assert rep.wilcoxon.p_value == ref.p_value

    def test_hand_computed_fixture(self):
        a1 = np.zeros((4, 4), np.uint8)
        a1[0, :2] = 1  # |auto|=2
        g1 = np.zeros((4, 4), np.uint8)
        g1[0, :4] = 1  # |g1|=4, overlap 2 -> dice 2*2/6
        rep = build_report([a1], [g1], ["p0"])
        assert rep.per_image[0][2] == pytest.approx(2 * 2 / 6)
        assert rep.per_patient["p0"] == pytest.approx(2 * 2 / 6)

    def test_report_text_is_parsable(self):
        rng = np.random.default_rng(8)
        auto = self.masks(rng, 4)
        g1 = self.masks(rng, 4)
        rep = build_report(auto, g1, ["x", "x", "y", "y"])
        text = rep.to_text()
        assert "[overall]" in text and "[per_patient]" in text
        fields = dict(line.split("=", 1) for line in text.splitlines()
                      if "=" in line and not line.startswith("#"))
        assert float(fields["dice_mean"]) == pytest.approx(rep.dice_mean)
        assert int(fields["n_images"]) == 4

    def test_misaligned_inputs_rejected(self):
        with pytest.raises(LengthMismatch):
            build_report([np.zeros((2, 2))], [np.zeros((2, 2))], ["a", "b"])
