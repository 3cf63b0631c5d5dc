"""Metric tests: brute-force oracle agreement, documented extremes on
(x, x, x), degenerate-input conventions, and the report table format."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invfuse import metrics
from invfuse.errors import ShapeError

from oracles import fmi_loops, ncie_roots, nmi_loops, qp_loops, qxy_loops, ssim_loops


def random_triple(seed, shape=(16, 16)):
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(0, 1, size=shape)
    x2 = rng.uniform(0, 1, size=shape)
    y = np.clip(0.5 * (x1 + x2) + rng.normal(0, 0.1, size=shape), 0, 1)
    return x1, x2, y


class TestOracleAgreement:
    """Every metric must match its independent loop-based recomputation."""

    @pytest.mark.parametrize("seed", range(5))
    def test_q_fmi(self, seed):
        x1, x2, y = random_triple(seed)
        assert metrics.q_fmi(x1, x2, y) == pytest.approx(fmi_loops(x1, x2, y), abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_q_ncie(self, seed):
        x1, x2, y = random_triple(seed + 10)
        assert metrics.q_ncie(x1, x2, y) == pytest.approx(ncie_roots(x1, x2, y), abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_q_xy(self, seed):
        x1, x2, y = random_triple(seed + 20)
        assert metrics.q_xy(x1, x2, y) == pytest.approx(qxy_loops(x1, x2, y), abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_q_p(self, seed):
        x1, x2, y = random_triple(seed + 30)
        assert metrics.q_p(x1, x2, y) == pytest.approx(qp_loops(x1, x2, y), abs=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_q_ssim_fusion(self, seed):
        x1, x2, y = random_triple(seed + 40)
        want = 0.5 * (ssim_loops(x1, y) + ssim_loops(x2, y))
        assert metrics.q_ssim_fusion(x1, x2, y) == pytest.approx(want, abs=1e-10)


class TestExtremes:
    def test_identical_triple_q_ssim(self):
        x = np.random.default_rng(0).uniform(0, 1, (16, 16))
        assert metrics.q_ssim_fusion(x, x, x) == pytest.approx(1.0, abs=1e-12)

    def test_identical_triple_q_fmi(self):
        x = np.random.default_rng(1).uniform(0, 1, (16, 16))
        assert metrics.q_fmi(x, x, x) == pytest.approx(1.0, abs=1e-12)

    def test_identical_triple_q_p(self):
        x = np.random.default_rng(2).uniform(0, 1, (16, 16))
        assert metrics.q_p(x, x, x) == pytest.approx(1.0, abs=1e-12)

    def test_identical_triple_q_xy_saturates_sigmoid_model(self):
        """Perfect preservation pins ratio=1 and angle=1 at every pixel, so
        the score equals the sigmoid model evaluated there (~0.9748 with the
        canonical constants -- the model's own ceiling)."""
        x = np.random.default_rng(3).uniform(0, 1, (16, 16))
        want = metrics.qxy_perfect_score()
        assert metrics.q_xy(x, x, x) == pytest.approx(want, abs=1e-12)
        assert 0.97 < want < 0.98

    def test_identical_triple_q_ncie_full_entropy(self):
        """A full-entropy image (all 256 levels, uniform) repeated three
        times drives every pairwise nonlinear correlation to 1."""
        rng = np.random.default_rng(4)
        levels = np.repeat(np.arange(256), 4)  # 32x32 = 1024 = 4*256 pixels
        rng.shuffle(levels)
        x = levels.reshape(32, 32) / 255.0
        assert metrics.q_ncie(x, x, x) == pytest.approx(1.0, abs=1e-12)

    def test_independent_images_q_ncie_near_baseline(self):
        """Independent coarse noise: correlations vanish and NCIE falls to
        1 - log_256(3).  Few levels keep finite-sample entropy bias small."""
        rng = np.random.default_rng(5)
        x1 = rng.integers(0, 16, size=(64, 64)) / 255.0
        x2 = rng.integers(0, 16, size=(64, 64)) / 255.0
        y = rng.integers(0, 16, size=(64, 64)) / 255.0
        baseline = 1.0 - math.log(3.0) / math.log(256.0)
        assert baseline == pytest.approx(0.80188, abs=1e-4)
        assert metrics.q_ncie(x1, x2, y) == pytest.approx(baseline, abs=0.01)

    def test_q_fmi_ranks_related_above_unrelated(self):
        """On structured images an average of the sources shares gradient
        structure with both; an unrelated image does not.  (On iid noise the
        256-level NMI estimate is dominated by finite-sample bias, so the
        ordering -- not an absolute floor -- is the meaningful property.)"""

        def smooth(seed, n=64):
            rng = np.random.default_rng(seed)
            yy, xx = np.mgrid[0:n, 0:n] / n
            img = np.zeros((n, n))
            for _ in range(5):
                cy, cx = rng.uniform(0.2, 0.8, 2)
                s = rng.uniform(0.05, 0.2)
                img += rng.uniform(0.3, 1.0) * np.exp(
                    -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            return np.clip(img / img.max(), 0, 1)

        x1, x2 = smooth(1), smooth(2)
        fused = np.clip(0.5 * (x1 + x2), 0, 1)
        assert metrics.q_fmi(x1, x2, fused) > metrics.q_fmi(x1, x2, smooth(99)) + 0.02

    def test_independent_noise_q_fmi_below_matched(self):
        """At 128x128 the iid-noise bias floor sits well below the score of
        a fused image that actually contains one source's structure."""
        rng = np.random.default_rng(6)
        x1, x2 = rng.uniform(0, 1, (128, 128)), rng.uniform(0, 1, (128, 128))
        noise = rng.uniform(0, 1, (128, 128))
        assert metrics.q_fmi(x1, x2, noise) < 0.25
        assert metrics.q_fmi(x1, x2, x1) > 0.5

    def test_constant_fused_q_xy_is_zero(self):
        x1, x2, _ = random_triple(7)
        assert metrics.q_xy(x1, x2, np.full_like(x1, 0.5)) == 0.0


class TestDegenerateInputs:
    def test_constant_sources_q_xy_flagged_zero(self):
        c = np.full((16, 16), 0.3)
        val, flagged = metrics._q_xy_impl(c, c, c)
        assert val == 0.0 and flagged

    def test_constant_sources_q_p_flagged_zero(self):
        c = np.full((16, 16), 0.3)
        val, flagged = metrics._q_p_impl(c, c, np.full((16, 16), 0.6))
        assert val == 0.0 and flagged

    def test_constant_feature_map_q_fmi_flagged(self):
        c = np.full((16, 16), 0.3)  # gradient magnitude constant 0 in interior...
        x = np.random.default_rng(8).uniform(0, 1, (16, 16))
        val, flagged = metrics._q_fmi_impl(c, x, x)
        assert flagged
        # the constant source contributes 0, the matching source contributes 1
        assert val == pytest.approx(0.5, abs=1e-12)

    def test_x2_flat_and_fused_equals_x1_gives_qp_one(self):
        x1 = np.random.default_rng(9).uniform(0, 1, (16, 16))
        flat = np.full((16, 16), 0.5)
        assert metrics.q_p(x1, flat, x1) == pytest.approx(1.0, abs=1e-12)

    def test_shape_and_finiteness_validation(self):
        with pytest.raises(ShapeError):
            metrics.q_fmi(np.zeros((8, 8)), np.zeros((8, 9)), np.zeros((8, 8)))
        with pytest.raises(ShapeError):
            metrics.q_ncie(np.zeros((8, 8)), np.full((8, 8), np.nan), np.zeros((8, 8)))
        with pytest.raises(ShapeError):
            metrics.q_p(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4)))


class TestInvariances:
    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2 ** 31 - 1))
    def test_ranges(self, seed):
        x1, x2, y = random_triple(seed)
        assert 0.0 <= metrics.q_fmi(x1, x2, y) <= 1.0
        assert 0.0 <= metrics.q_ncie(x1, x2, y) <= 1.0
        assert 0.0 <= metrics.q_xy(x1, x2, y) <= 1.0
        assert -1.0 <= metrics.q_p(x1, x2, y) <= 1.0
        assert -1.0 <= metrics.q_ssim_fusion(x1, x2, y) <= 1.0

    @pytest.mark.parametrize("metric", [
        metrics.q_ssim_fusion, metrics.q_fmi, metrics.q_ncie,
        metrics.q_xy, metrics.q_p])
    def test_source_symmetry(self, metric):
        x1, x2, y = random_triple(42)
        assert metric(x1, x2, y) == pytest.approx(metric(x2, x1, y), abs=1e-12)

    def test_q_ncie_invariant_under_joint_pixel_permutation(self):
        """Value-histogram metrics ignore pixel arrangement when all three
        images are permuted identically."""
        x1, x2, y = random_triple(50)
        perm = np.random.default_rng(51).permutation(x1.size)
        shuffled = [a.ravel()[perm].reshape(a.shape) for a in (x1, x2, y)]
        assert metrics.q_ncie(*shuffled) == pytest.approx(
            metrics.q_ncie(x1, x2, y), abs=1e-12)

    def test_nmi_invariant_under_joint_permutation(self):
        rng = np.random.default_rng(52)
        qa = rng.integers(0, 256, size=256)
        qb = rng.integers(0, 256, size=256)
        perm = rng.permutation(256)
        assert metrics.nmi256(qa[perm], qb[perm]) == pytest.approx(
            metrics.nmi256(qa, qb), abs=1e-12)
        assert metrics.nmi256(qa, qb) == pytest.approx(nmi_loops(qa, qb), abs=1e-12)

    def test_q_xy_scale_invariance(self):
        """Edge ratios, angles, and weights all scale out: q_xy on images
        scaled by a common factor is unchanged."""
        x1, x2, y = random_triple(53)
        a = metrics.q_xy(x1, x2, y)
        b = metrics.q_xy(0.25 * x1, 0.25 * x2, 0.25 * y)
        assert a == pytest.approx(b, abs=1e-10)


class TestHandNmiCase:
    def test_two_level_maps_hand_histogram(self):
        """4x4 maps with a known 2x2-cell joint histogram: counts (8,4,4,0)
        give I = H(a) + H(b) - H(ab) with hand-computed entropies."""
        qa = np.array([0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0]).reshape(4, 4)
        qb = np.array([0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]).reshape(4, 4)
        # joint: (0,0)->8, (0,1)->4, (1,0)->4; marginals 12/4 each
        ha = -(12 / 16) * math.log2(12 / 16) - (4 / 16) * math.log2(4 / 16)
        hab = -(8 / 16) * math.log2(8 / 16) - 2 * (4 / 16) * math.log2(4 / 16)
        want = 2 * (2 * ha - hab) / (2 * ha)
        assert metrics.nmi256(qa, qb) == pytest.approx(want, abs=1e-12)


class TestReportTable:
    def test_table_shape_and_mean_row(self):
        reports = []
        for i in range(3):
            x1, x2, y = random_triple(60 + i)
            reports.append(metrics.evaluate_pair(x1, x2, y, rec1=x1, rec2=x2,
                                                 pair_id=f"p{i:03d}"))
        table = metrics.report_table(reports)
        lines = table.strip().split("\n")
        assert len(lines) == 1 + 3 + 1  # header, rows, mean
        header = lines[0].split("\t")
        assert header[0] == "id" and header[-1] == "flags"
        # the mean row must equal the column means of the parsed rows to 1e-9
        body = [line.split("\t") for line in lines[1:-1]]
        mean_row = lines[-1].split("\t")
        assert mean_row[0] == "mean"
        for col in range(1, len(header) - 1):
            col_mean = np.mean([float(r[col]) for r in body])
            assert float(mean_row[col]) == pytest.approx(col_mean, rel=1e-9)

    def test_ten_significant_digits(self):
        x1, x2, y = random_triple(70)
        table = metrics.report_table([metrics.evaluate_pair(x1, x2, y, pair_id="p")])
        value = table.strip().split("\n")[1].split("\t")[1]
        assert len(value.replace(".", "").replace("-", "").lstrip("0")) >= 9

    def test_decomposition_ssim_columns(self):
        x1, x2, y = random_triple(71)
        r = metrics.evaluate_pair(x1, x2, y, rec1=x1, rec2=x2, pair_id="p")
        assert r.dec_ssim_1 == pytest.approx(1.0, abs=1e-12)
        assert r.dec_ssim_2 == pytest.approx(1.0, abs=1e-12)
        assert r.flags == ()
