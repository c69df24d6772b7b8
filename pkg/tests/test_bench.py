"""Benchmark harness and edge-detector contracts (corpus-free scale)."""

import numpy as np
import pytest

import oracles
from refsep import bench, canny
from refsep.bench import AnnotationDensity, SynthPair
from refsep.errors import InvalidInputError
from refsep.posterior import build_pair_table, posterior_components, top_candidates

from test_posterior import make_prior


@pytest.fixture(scope="module")
def prior3():
    return make_prior(3, seed=51, mean_scale=0.4, cov_scale=0.2)


@pytest.fixture(scope="module")
def table3(prior3):
    return build_pair_table(prior3)


@pytest.fixture(scope="module")
def toy_corpus():
    r = np.random.default_rng(77)
    out = []
    for k in range(6):
        base = np.kron(r.random((8, 8)), np.ones((8, 8)))
        out.append(np.clip(base + 0.05 * r.standard_normal((64, 64)), 0, 1))
    return out


class TestCanny:
    def test_constant_image_no_edges(self):
        mask, _ = canny.canny_edges(np.full((32, 32), 0.5))
        assert not mask.any()

    def test_step_edge_found_and_thin(self):
        img = np.zeros((32, 32))
        img[:, 16:] = 1.0
        mask, _ = canny.canny_edges(img)
        rows_hit = mask.any(axis=1)
        assert rows_hit.all()
        # non-maximum suppression keeps the ridge narrow
        assert mask.sum(axis=1).max() <= 2
        cols = np.where(mask.any(axis=0))[0]
        assert np.all((cols >= 14) & (cols <= 17))

    def test_magnitude_normalized(self, rng):
        _, _, mag = canny.gradient_field(rng.random((40, 40)))
        assert mag.max() == pytest.approx(1.0)
        assert mag.min() >= 0.0

    def test_hysteresis_drops_isolated_weak_edges(self):
        img = np.zeros((40, 40))
        img[:20, 20:] += 1.0       # strong step, top half
        img[30:, 10:] += 0.08      # faint step, bottom right, disconnected
        mask, _ = canny.canny_edges(img)
        assert mask[:18, 18:23].any()
        assert not mask[28:, :].any()

    def test_hysteresis_keeps_connected_weak_edges(self):
        # one straight step edge whose contrast decays from strong to weak:
        # the weak tail stays connected to the strong head and survives
        img = np.zeros((40, 40))
        contrast = np.linspace(1.0, 0.08, 40)
        img[:, 20:] = contrast[:, None]
        mask, _ = canny.canny_edges(img)
        assert mask[35:, 18:23].any()

    def test_rejects_non_2d(self):
        with pytest.raises(InvalidInputError):
            canny.canny_edges(np.zeros((4, 4, 3)))


class TestGradientStats:
    def test_constant_zero_fraction(self):
        out = bench.gradient_stats([np.full((20, 20), 0.3)])
        assert out["overall_fraction"] == 0.0

    def test_checkerboard_full_fraction(self):
        img = np.indices((16, 16)).sum(axis=0) % 2
        out = bench.gradient_stats([img.astype(float)])
        assert out["overall_fraction"] == 1.0

    def test_empty_input_rejected(self):
        with pytest.raises(InvalidInputError):
            bench.gradient_stats([])

    def test_fraction_matches_oracle(self, rng):
        imgs = [rng.random((15, 17)) for _ in range(3)]
        out = bench.gradient_stats(imgs)
        above = sum(int((oracles.grad_magnitudes(im) > 0.1).sum()) for im in imgs)
        total = sum(im.size for im in imgs)
        assert out["overall_fraction"] == pytest.approx(above / total)
        for im, frac in zip(imgs, out["per_image_fractions"]):
            want = (oracles.grad_magnitudes(im) > 0.1).mean()
            assert frac == pytest.approx(want)

    def test_histogram_accounts_every_pixel(self, rng):
        imgs = [rng.random((12, 9)), rng.random((7, 21))]
        out = bench.gradient_stats(imgs)
        assert out["histogram"].sum() == 12 * 9 + 7 * 21
        assert len(out["histogram"]) == 101


class TestSynthPairs:
    def test_deterministic(self, toy_corpus):
        a = bench.synth_pairs(toy_corpus, 10, 40, seed=3)
        b = bench.synth_pairs(toy_corpus, 10, 40, seed=3)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.y, pb.y)
            assert pa.source_ids == pb.source_ids

    def test_sum_exact_and_sources_differ(self, toy_corpus):
        for pair in bench.synth_pairs(toy_corpus, 25, 40, seed=0):
            assert np.array_equal(pair.y, pair.x1_true + pair.x2_true)
            assert pair.source_ids[0] != pair.source_ids[1]

    def test_crops_interior(self):
        # border ring marked 9; interior value encodes the source index
        corpus = []
        for k in range(3):
            im = np.full((50, 50), float(k))
            im[0, :] = im[-1, :] = im[:, 0] = im[:, -1] = 9.0
            corpus.append(im)
        for pair in bench.synth_pairs(corpus, 30, 40, seed=1):
            assert 9.0 not in pair.x1_true and 9.0 not in pair.x2_true

    def test_small_corpus_rejected(self):
        with pytest.raises(InvalidInputError):
            bench.synth_pairs([np.zeros((64, 64))], 5, 40, seed=0)
        with pytest.raises(InvalidInputError):
            bench.synth_pairs([np.zeros((10, 10)), np.zeros((10, 10))], 5, 40, 0)


def checkered_pair(seed=0, size=40):
    r = np.random.default_rng(seed)
    x1 = np.kron(r.random((size // 8, size // 8)), np.ones((8, 8)))
    x2 = np.kron(r.random((size // 4, size // 4)), np.ones((4, 4)))
    return SynthPair(x1_true=x1, x2_true=x2, y=x1 + x2, source_ids=(0, 1), seed=0)


class TestAnnotationSites:
    def test_density_target_arithmetic(self):
        assert AnnotationDensity(8).target_count((40, 40)) == 25
        assert AnnotationDensity(22).target_count((44, 44)) == 4

    def test_at_most_one_site_per_region_and_interior(self):
        pair = checkered_pair(1)
        sites = bench.annotation_sites(pair.y, AnnotationDensity(8), seed=0)
        assert 0 < len(sites) <= 25
        regions = {(r // 8, c // 8) for r, c in sites}
        assert len(regions) == len(sites)
        for r, c in sites:
            assert 1 <= r <= 38 and 1 <= c <= 38

    def test_bad_cell_rejected(self):
        y = np.zeros((40, 40))
        with pytest.raises(InvalidInputError):
            bench.annotation_sites(y, AnnotationDensity(4), seed=0)
        with pytest.raises(InvalidInputError):
            bench.annotation_sites(y, AnnotationDensity(41), seed=0)


class TestAutoAnnotateFilters:
    def test_single_layer_all_labeled_one(self):
        r = np.random.default_rng(5)
        x1 = np.kron(r.random((5, 5)), np.ones((8, 8)))
        pair = SynthPair(x1_true=x1, x2_true=np.zeros_like(x1), y=x1.copy(),
                         source_ids=(0, 1), seed=0)
        anns = bench.auto_annotate_filters(pair, AnnotationDensity(8), seed=0)
        assert anns and all(a.layer == 1 for a in anns)

    def test_labels_match_gradient_comparison(self):
        pair = checkered_pair(3)
        anns = bench.auto_annotate_filters(pair, AnnotationDensity(8), seed=0)
        g1 = oracles.grad_magnitudes(pair.x1_true)
        g2 = oracles.grad_magnitudes(pair.x2_true)
        for a in anns:
            assert a.layer == (1 if g1[a.row, a.col] >= g2[a.row, a.col] else 2)

    def test_flat_image_warns_and_returns_empty(self):
        flat = np.full((40, 40), 0.25)
        pair = SynthPair(x1_true=flat, x2_true=flat, y=flat + flat,
                         source_ids=(0, 1), seed=0)
        with pytest.warns(UserWarning):
            anns = bench.auto_annotate_filters(pair, AnnotationDensity(8), seed=0)
        assert anns == []


class TestAutoAnnotateComponents:
    def test_exact_candidate_always_in_play(self, prior3, table3, rng):
        y = np.clip(rng.random((16, 16)), 0, 1)
        site = (8, 8)
        r, c = bench._patch_corner(site, y.shape)
        cands = top_candidates(
            posterior_components(y[r:r + 8, c:c + 8].ravel(), prior3, table3), 9)
        target = cands.entries[4]
        x1 = rng.random((16, 16))
        x1[r:r + 8, c:c + 8] = target.x1_mean.reshape(8, 8)
        pair = SynthPair(x1_true=x1, x2_true=y - x1, y=y, source_ids=(0, 1), seed=0)
        dist_sorted = sorted(
            cands.entries,
            key=lambda e: float(np.linalg.norm(e.x1_mean - target.x1_mean)))
        allowed = {(e.i, e.j) for e in dist_sorted[:2]}
        seen = set()
        for s in range(40):
            ann, = bench.auto_annotate_components(pair, [site], prior3, table3,
                                                  n=9, seed=s)
            assert (ann.i, ann.j) in allowed
            seen.add((ann.i, ann.j))
        assert (target.i, target.j) in seen

    def test_two_candidate_pick_is_uniform(self, prior3, table3):
        pair = checkered_pair(2, size=16)
        counts = {}
        for s in range(10_000):
            ann, = bench.auto_annotate_components(pair, [(8, 8)], prior3, table3,
                                                  n=2, seed=s)
            counts[(ann.i, ann.j)] = counts.get((ann.i, ann.j), 0) + 1
        assert len(counts) == 2
        frac = max(counts.values()) / 10_000
        assert 0.48 <= frac <= 0.52

    def test_rejects_small_n(self, prior3, table3):
        pair = checkered_pair(0, size=16)
        with pytest.raises(InvalidInputError):
            bench.auto_annotate_components(pair, [(8, 8)], prior3, table3, n=1)


class TestCandidateCurve:
    def test_monotone_in_n(self, prior3, table3, toy_corpus):
        out = bench.candidate_accuracy_curve(toy_corpus, prior3, table3,
                                             ns=(1, 3, 9), trials=40, seed=2)
        per = out["per_trial"]
        assert np.all(np.diff(per, axis=1) >= 0)
        assert np.all(np.diff(out["mean_db"]) >= 0)

    def test_exhaustive_at_least_truncated(self, prior3, table3, toy_corpus):
        out = bench.candidate_accuracy_curve(toy_corpus, prior3, table3,
                                             ns=(5, 9), trials=30, seed=4)
        assert out["mean_db"][1] >= out["mean_db"][0]

    def test_matches_direct_recomputation(self, prior3, table3, toy_corpus):
        out = bench.candidate_accuracy_curve(toy_corpus, prior3, table3,
                                             ns=(2, 6), trials=5, seed=7)
        pairs = bench.synth_pairs(toy_corpus, 5, 8, seed=7)
        for t, pair in enumerate(pairs):
            cands = top_candidates(
                posterior_components(pair.y.ravel(), prior3, table3), 6)
            scores = [oracles.psnr(pair.x1_true.ravel(), e.x1_mean)
                      for e in cands.entries]
            assert out["per_trial"][t, 0] == pytest.approx(max(scores[:2]))
            assert out["per_trial"][t, 1] == pytest.approx(max(scores))

    def test_zero_trials_rejected(self, prior3, table3, toy_corpus):
        with pytest.raises(InvalidInputError):
            bench.candidate_accuracy_curve(toy_corpus, prior3, table3,
                                           ns=(1,), trials=0, seed=0)


class TestSeparationBench:
    def test_report_shape_and_reproducibility(self, prior3, table3, toy_corpus):
        kwargs = dict(densities=(8,), methods=("GMM-C", "EPLL-only"),
                      seed=5, count=3, size=16)
        a = bench.run_separation_bench(toy_corpus, prior3, table3, **kwargs)
        b = bench.run_separation_bench(toy_corpus, prior3, table3, **kwargs)
        assert a.to_json() == b.to_json()
        assert a.methods[("GMM-C", 8)]["n"] == 3
        assert a.methods[("EPLL-only", 8)]["n"] == 3
        assert not a.failures
        assert "bench_report_v1" in a.to_json_obj()

    def test_csv_lists_every_instance(self, prior3, table3, toy_corpus):
        rep = bench.run_separation_bench(toy_corpus, prior3, table3,
                                         densities=(8,), methods=("EPLL-only",),
                                         seed=1, count=4, size=16)
        lines = rep.to_csv().strip().split("\n")
        assert len(lines) == 1 + 4
        assert lines[0] == "method,cell,instance,psnr_db"

    def test_failures_recorded_not_dropped(self, prior3, table3, toy_corpus,
                                           monkeypatch):
        calls = {"n": 0}
        real = bench.separate_gmm_f

        def flaky(*args, **kw):
            calls["n"] += 1
            if calls["n"] == 2:
                raise RuntimeError("boom")
            return real(*args, **kw)

        monkeypatch.setattr(bench, "separate_gmm_f", flaky)
        rep = bench.run_separation_bench(toy_corpus, prior3, table3,
                                         densities=(8,), methods=("GMM-F",),
                                         seed=2, count=3, size=16)
        assert rep.methods[("GMM-F", 8)]["n"] == 2
        assert rep.methods[("GMM-F", 8)]["failures"] == 1
        assert any("boom" in f[2] for f in rep.failures)

    def test_rejects_bad_inputs(self, prior3, table3, toy_corpus):
        with pytest.raises(InvalidInputError):
            bench.run_separation_bench(toy_corpus, prior3, table3,
                                       densities=(8,), methods=("LW",), count=1)
        with pytest.raises(InvalidInputError):
            bench.run_separation_bench(toy_corpus, prior3, table3,
                                       densities=(8,), methods=("GMM-C",),
                                       count=0)

    def test_text_table_mentions_methods(self, prior3, table3, toy_corpus):
        rep = bench.run_separation_bench(toy_corpus, prior3, table3,
                                         densities=(8,), methods=("EPLL-only",),
                                         seed=0, count=2, size=16)
        assert "EPLL-only" in rep.text_table()
