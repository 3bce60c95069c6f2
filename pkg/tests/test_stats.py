import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ffkd.data import AnnotationSet, SceneSpec, generate_split
from ffkd.data.synth import sample_annotations
from ffkd.stats import (
    MIN_BANDWIDTH,
    MIN_KDE_PIXELS,
    class_distribution,
    estimate_prior,
    kde,
    kde_pixel_intensity,
    placement_histogram,
    silverman_bandwidth,
    write_histogram_csv,
    write_kde_csvs,
)


def ann(labels):
    n = len(labels)
    return AnnotationSet(np.tile([0.0, 0.0, 4.0, 4.0], (n, 1)), labels)


def sampled(spec, frames, seed=0):
    rng = np.random.default_rng(seed)
    return [sample_annotations(spec, rng) for _ in range(frames)]


class TestClassDistribution:
    def test_two_cars_one_person(self):
        dist = class_distribution([ann([2, 1]), ann([2])])
        np.testing.assert_allclose(dist.freqs, [1 / 3, 2 / 3, 0])
        np.testing.assert_array_equal(dist.counts, [1, 2, 0])
        assert not dist.empty

    def test_empty_is_flagged(self):
        dist = class_distribution([ann([]), ann([])])
        assert dist.empty
        np.testing.assert_array_equal(dist.freqs, [0, 0, 0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.integers(1, 3), max_size=6), max_size=8))
    def test_frequencies_sum_to_one_unless_empty(self, frames):
        dist = class_distribution([ann(f) for f in frames])
        total = sum(len(f) for f in frames)
        assert dist.empty == (total == 0)
        if total:
            assert abs(dist.freqs.sum() - 1) < 1e-12
            assert (dist.freqs >= 0).all()


class TestKDE:
    def test_integrates_to_one_with_reflection(self):
        rng = np.random.default_rng(0)
        for samples in (rng.uniform(0, 10, 500), rng.uniform(245, 255, 500), rng.normal(128, 20, 500)):
            assert abs(kde(samples).integral() - 1) <= 1e-2

    def test_gaussian_mean(self):
        x = np.clip(np.random.default_rng(1).normal(128, 20, 20_000), 0, 255)
        est = kde(x)
        assert abs(est.mean() - 128) <= 2
        assert abs(est.mode() - 128) <= 5

    def test_constant_sample_mode(self):
        est = kde(np.full(400, 77.0))
        assert est.mode() == 77.0
        assert est.bandwidth == MIN_BANDWIDTH
        assert abs(est.integral() - 1) <= 1e-2

    def test_bimodal(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([rng.normal(60, 8, 3000), rng.normal(190, 8, 3000)])
        est = kde(x)
        d = est.density
        peaks = [i for i in range(1, len(d) - 1) if d[i] > d[i - 1] and d[i] >= d[i + 1]
                 and d[i] > 0.2 * d.max()]
        assert len(peaks) == 2
        assert abs(est.grid[peaks[0]] - 60) <= 3 and abs(est.grid[peaks[1]] - 190) <= 3
        assert d[np.searchsorted(est.grid, 125)] < 0.01 * d.max()

    def test_density_nonnegative(self):
        est = kde(np.random.default_rng(3).integers(0, 256, 300))
        assert (est.density >= 0).all()

    def test_matches_direct_sum(self):
        x = np.array([10.0, 10.0, 40.0, 200.0])
        est = kde(x, bandwidth=7.0)
        g = est.grid[:, None]
        srcs = np.concatenate([x, -x, 510 - x])
        want = np.exp(-0.5 * ((g - srcs) / 7.0) ** 2).sum(axis=1) / (4 * 7.0 * math.sqrt(2 * math.pi))
        np.testing.assert_allclose(est.density, want, rtol=1e-12)

    def test_silverman_example(self):
        x = np.arange(100, dtype=float)
        sd = x.std(ddof=1)
        iqr = np.percentile(x, 75) - np.percentile(x, 25)
        assert silverman_bandwidth(x) == pytest.approx(0.9 * min(sd, iqr / 1.34) * 100 ** -0.2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            kde(np.zeros(0))


class TestPixelKDE:
    @pytest.fixture(scope="class")
    def samples(self):
        return generate_split(SceneSpec(), "train", 60)

    def test_per_class_and_modality(self, samples):
        for c in (1, 2, 3):
            for mod in ("rgb", "thermal"):
                est = kde_pixel_intensity(samples, mod, c)
                assert est.class_id == c and est.modality == mod
                assert est.num_samples >= MIN_KDE_PIXELS
                assert abs(est.integral() - 1) <= 1e-2

    def test_too_few_pixels_names_count(self, samples):
        few = [(f, AnnotationSet(np.array([[0.0, 0.0, 3.0, 3.0]]), [1])) for f, _ in samples[:2]]
        with pytest.raises(ValueError, match=r"class 1 has only 18 in-box thermal pixels"):
            kde_pixel_intensity(few, "thermal", 1)

    def test_unknown_modality(self, samples):
        with pytest.raises(ValueError, match="modality"):
            kde_pixel_intensity(samples, "depth", 1)

    def test_csv_output(self, samples, tmp_path):
        paths = write_kde_csvs(samples, tmp_path)
        assert len(paths) == 6
        with open(paths[0]) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["intensity", "density"] and len(rows) == 257


class TestPrior:
    @pytest.fixture(scope="class")
    def large(self):
        return sampled(SceneSpec(), 10_000, seed=4)

    def test_class_frequencies_recovered(self, large):
        prior = estimate_prior(large)
        np.testing.assert_allclose(prior.pi_hat, SceneSpec().class_freq, atol=0.02)

    def test_mean_count_near_lambda(self, large):
        counts = np.array([len(a) for a in large])
        assert abs(counts.mean() - 3.0) <= 0.05 * 3.0
        assert counts.max() <= SceneSpec().n_max

    def test_placement_uniformity_not_rejected(self, large):
        prior = estimate_prior(large)
        assert prior.placement_hist.sum() == pytest.approx(sum(len(a) for a in large))
        assert prior.uniformity_pvalue > 0.05

    def test_fixed_count_mass(self):
        prior = estimate_prior(sampled(SceneSpec(n_fixed=2), 200))
        np.testing.assert_array_equal(prior.p_n, [0, 0, 1])

    def test_area_histogram_is_a_distribution(self, large):
        prior = estimate_prior(large[:500])
        assert prior.area_hist.sum() == pytest.approx(1)
        assert len(prior.area_edges) == len(prior.area_hist) + 1

    def test_placement_histogram_corners(self):
        w = h = 10
        boxes = np.array([[0, 0, w, h], [118, 118, w, h]], float)
        hist = placement_histogram(boxes, 128, 128, bins=4)
        assert hist[0, 0] == pytest.approx(1) and hist[3, 3] == pytest.approx(1)
        assert hist.sum() == pytest.approx(2)

    def test_full_width_box_spreads_evenly(self):
        hist = placement_histogram(np.array([[0, 0, 128, 128]], float), 128, 128, bins=4)
        np.testing.assert_allclose(hist, np.full((4, 4), 1 / 16))

    def test_histogram_csv(self, tmp_path):
        path = tmp_path / "h.csv"
        write_histogram_csv(path, np.array([0, 1, 2]), np.array([0.25, 0.75]))
        rows = list(csv.reader(open(path)))
        assert rows == [["bin_lo", "bin_hi", "mass"], ["0", "1", "0.25"], ["1", "2", "0.75"]]
