import numpy as np
import pytest

from udalm.data import ImageSample
from udalm.errors import InputError
from udalm.evaluation import (EvalReport, aggregate, format_table,
                              histogram_report, load_report, radial_errors,
                              save_report, subdomain_report)


def brute_force_report(errors, radii):
    """Independent oracle: explicit loops, no vector tricks."""
    total, count = 0.0, 0
    for image_errors in errors:
        for e in image_errors:
            total += e
            count += 1
    mre = total / count
    sdr = {}
    for radius in radii:
        hits = 0
        for image_errors in errors:
            for e in image_errors:
                if e <= radius:
                    hits += 1
        sdr[radius] = 100.0 * hits / count
    return mre, sdr


def make_sample(rng, sid="s0", L=4, size=50, spacing=(0.1, 0.1), subdomain=None):
    return ImageSample(id=sid, pixels=rng.uniform(size=(size, size)).astype(np.float32),
                       original_size=(size, size), spacing_mm=spacing,
                       landmarks=rng.uniform(0, size, size=(L, 2)),
                       domain="target", subdomain=subdomain)


class TestRadialErrors:
    def test_zero_at_perfect(self, rng):
        gts = rng.uniform(0, 100, size=(5, 2))
        np.testing.assert_array_equal(radial_errors(gts, gts, (0.1, 0.1)),
                                      np.zeros(5))

    def test_isotropic_worked_example(self):
        # delta (3, 4) px at 0.1 mm spacing -> 5 px * 0.1 = 0.5 mm
        preds = np.array([[3.0, 4.0]])
        gts = np.zeros((1, 2))
        assert radial_errors(preds, gts, (0.1, 0.1))[0] == pytest.approx(0.5)

    def test_anisotropic_worked_example(self):
        preds = np.array([[3.0, 4.0]])
        gts = np.zeros((1, 2))
        got = radial_errors(preds, gts, (0.1, 0.2))[0]
        assert got == pytest.approx(np.sqrt(0.09 + 0.64))

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            radial_errors(np.zeros((3, 2)), np.zeros((4, 2)), (0.1, 0.1))


class TestAggregate:
    def test_worked_example(self):
        report = aggregate([np.array([0.5, 0.0])], radii=(0.4, 2.0))
        assert report.mre_mm == pytest.approx(0.25)
        assert report.sdr[0.4] == pytest.approx(50.0)
        assert report.sdr[2.0] == pytest.approx(100.0)

    def test_boundary_counts_as_success(self):
        report = aggregate([np.full(3, 2.0)], radii=(2.0,))
        assert report.sdr[2.0] == 100.0

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            aggregate([])

    def test_matches_brute_force(self, rng):
        radii = (2.0, 2.5, 3.0, 4.0)
        for _ in range(200):
            n_img = int(rng.integers(1, 8))
            L = int(rng.integers(1, 10))
            errors = [rng.uniform(0, 6, size=L) for _ in range(n_img)]
            report = aggregate(errors, radii)
            mre, sdr = brute_force_report(errors, radii)
            assert report.mre_mm == pytest.approx(mre, abs=1e-9)
            for radius in radii:
                assert report.sdr[radius] == pytest.approx(sdr[radius], abs=1e-9)

    def test_sdr_monotone_in_radius(self, rng):
        errors = [rng.uniform(0, 5, size=6) for _ in range(10)]
        report = aggregate(errors, radii=(1.0, 2.0, 3.0, 4.0))
        values = [report.sdr[r] for r in (1.0, 2.0, 3.0, 4.0)]
        assert values == sorted(values)

    def test_spacing_scaling_invariance(self, rng):
        # scaling both spacings by c scales MRE by c and SDR(c*rho)=SDR(rho)
        preds = rng.uniform(0, 50, size=(5, 2))
        gts = rng.uniform(0, 50, size=(5, 2))
        c = 3.0
        e1 = radial_errors(preds, gts, (0.1, 0.1))
        e2 = radial_errors(preds, gts, (0.1 * c, 0.1 * c))
        r1 = aggregate([e1], radii=(1.0, 2.0))
        r2 = aggregate([e2], radii=(c, 2 * c))
        assert r2.mre_mm == pytest.approx(c * r1.mre_mm, rel=1e-12)
        assert r2.sdr[c] == pytest.approx(r1.sdr[1.0])
        assert r2.sdr[2 * c] == pytest.approx(r1.sdr[2.0])

    def test_per_image_average_mode(self):
        # with a constant landmark count per image the two modes coincide
        errors = [np.array([0.0, 0.0]), np.array([2.0, 4.0])]
        pooled = aggregate(errors, radii=(1.0,), mre_average="pooled")
        per_image = aggregate(errors, radii=(1.0,), mre_average="per-image")
        assert pooled.mre_mm == pytest.approx(1.5)
        assert per_image.mre_mm == pytest.approx(pooled.mre_mm)


class TestSubdomainReport:
    def test_weighted_combination(self, rng):
        # two equal-size groups with MREs 1 and 2 -> overall 1.5
        samples, preds = [], []
        for i, (tag, err) in enumerate([("a", 1.0), ("a", 1.0), ("b", 2.0), ("b", 2.0)]):
            s = make_sample(rng, sid=f"s{i}", L=2, spacing=(1.0, 1.0), subdomain=tag)
            p = s.landmarks + np.array([err, 0.0])
            samples.append(s)
            preds.append(p)
        report = subdomain_report(samples, preds, radii=(2.0,))
        assert report.mre_mm == pytest.approx(1.5)
        assert report.per_subdomain["a"].mre_mm == pytest.approx(1.0)
        assert report.per_subdomain["b"].mre_mm == pytest.approx(2.0)
        sizes = {tag: rep.n_images * len(rep.per_landmark_mre)
                 for tag, rep in report.per_subdomain.items()}
        weighted = sum(report.per_subdomain[t].mre_mm * n for t, n in sizes.items())
        weighted /= sum(sizes.values())
        assert report.mre_mm == pytest.approx(weighted, rel=1e-12)

    def test_single_group_equals_overall(self, rng):
        samples = [make_sample(rng, sid=f"s{i}", subdomain="only") for i in range(3)]
        preds = [s.landmarks + 1.0 for s in samples]
        report = subdomain_report(samples, preds, radii=(2.0,))
        assert report.per_subdomain["only"].mre_mm == pytest.approx(report.mre_mm)

    def test_missing_tags_single_group(self, rng):
        samples = [make_sample(rng, sid=f"s{i}") for i in range(3)]
        preds = [s.landmarks for s in samples]
        report = subdomain_report(samples, preds, radii=(2.0,))
        assert report.per_subdomain is None

    def test_round_trip_serialization(self, rng, tmp_path):
        samples = [make_sample(rng, sid=f"s{i}", subdomain="ab"[i % 2])
                   for i in range(4)]
        preds = [s.landmarks + 0.5 for s in samples]
        report = subdomain_report(samples, preds, radii=(2.0, 4.0))
        path = str(tmp_path / "report.json")
        save_report(report, path)
        loaded = load_report(path)
        assert loaded.mre_mm == pytest.approx(report.mre_mm)
        assert set(loaded.per_subdomain) == set(report.per_subdomain)
        assert loaded.sdr[2.0] == pytest.approx(report.sdr[2.0])


class TestHistogramReport:
    def test_same_dataset_identical_curves(self, rng):
        samples = [make_sample(rng, sid=f"s{i}") for i in range(3)]
        report = histogram_report(samples, samples, bins=64)
        np.testing.assert_array_equal(report.hist_a, report.hist_b)
        assert len(report.hist_a) == 64

    def test_shifted_dataset_separates_means(self, rng):
        a = [make_sample(rng, sid=f"a{i}") for i in range(3)]
        b = []
        for i, s in enumerate(a):
            b.append(ImageSample(id=f"b{i}", pixels=np.clip(s.pixels + 0.2, 0, 1),
                                 original_size=s.original_size,
                                 spacing_mm=s.spacing_mm, landmarks=None,
                                 domain="target"))
        report = histogram_report(a, b)
        assert report.mean_b - report.mean_a > 0.1

    def test_default_bins(self, rng):
        samples = [make_sample(rng)]
        report = histogram_report(samples, samples)
        assert len(report.bin_edges) == 257

    def test_empty_rejected(self, rng):
        with pytest.raises(InputError):
            histogram_report([], [make_sample(rng)])


class TestFormatTable:
    def test_reference_magnitudes_render(self):
        report = EvalReport(
            mre_mm=1.75,
            sdr={2.0: 69.15, 2.5: 76.94, 3.0: 82.92, 4.0: 90.05},
            per_landmark_mre=np.ones(19), n_images=200,
        )
        table = format_table({"adapted": report}, radii=(2.0, 2.5, 3.0, 4.0))
        assert "1.75" in table and "69.15" in table
        assert "2mm" in table and "4mm" in table
        header, separator, row = table.splitlines()
        assert header.split()[0] == "Method"
        assert row.split()[0] == "adapted"
