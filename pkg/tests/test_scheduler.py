import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamttt.scheduler import (CalibrationError, EntropyStats, Policy, calibrate, decide, frame_entropy,
                                 load_stats, quantile, save_stats, standardize)
from streamttt.ymodel import MaskSpec, restore

# tau(0.95) on the committed source fixture and checkpoint, from a numpy-only forward pass
GOLDEN_TAU_95 = -1.0377003730892573

sorted_lists = st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40).map(sorted)


def stats_of(values):
    return EntropyStats.from_entropies(values)


class TestQuantile:
    def test_examples(self):
        v = [1, 2, 3, 4, 5]
        assert quantile(v, 0.5) == 3
        assert quantile(v, 1.0) == 5
        assert quantile(v, 0.8) == pytest.approx(4.2, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            quantile([], 0.5)
        with pytest.raises(ValueError):
            quantile([1.0], 1.5)

    @given(sorted_lists, st.floats(0, 1))
    def test_matches_numpy_linear(self, v, q):
        assert quantile(v, q) == pytest.approx(float(np.quantile(v, q, method="linear")), rel=1e-9, abs=1e-9)

    @given(sorted_lists, st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, v, q1, q2):
        lo, hi = sorted((q1, q2))
        assert quantile(v, lo) <= quantile(v, hi) + 1e-9


class TestStats:
    def test_endpoints_and_moments(self, rng):
        e = rng.normal(size=60)
        s = stats_of(e)
        assert s.threshold(0.0) == e.min() and s.threshold(1.0) == e.max()
        assert s.kappa_bar == pytest.approx(e.mean(), abs=1e-12)
        assert s.v_kappa == pytest.approx(e.var(), abs=1e-12)
        assert list(s.source_entropies) == sorted(e)
        taus = [s.tau[q] for q in sorted(s.tau)]
        assert taus == sorted(taus)

    def test_degenerate(self):
        with pytest.raises(CalibrationError):
            stats_of([0.3] * 60)

    def test_standardize(self, rng):
        s = stats_of(rng.normal(size=60))
        assert standardize(s.kappa_bar, s) == 0.0
        assert standardize(s.kappa_bar + s.v_kappa, s) == pytest.approx(1.0, abs=1e-12)
        assert standardize(0.1, s) < standardize(0.2, s)

    def test_standardize_rejects_bad_variance(self):
        with pytest.raises(CalibrationError):
            standardize(1.0, EntropyStats((1.0,), 1.0, 0.0))

    def test_file_round_trip_is_exact(self, tmp_path, rng):
        s = stats_of(rng.normal(size=57) * math.pi)
        path = save_stats(s, tmp_path / "s.txt")
        back = load_stats(path)
        assert back == s
        text = path.read_text()
        assert f"kappa_bar = {s.kappa_bar:.17g}" in text and "tau 0.95 = " in text


class TestCalibrate:
    def test_too_few_frames(self, trained, source_frames):
        with pytest.raises(CalibrationError):
            calibrate(source_frames[:49], trained)

    def test_constant_variance_head(self, trained, source_frames):
        p = restore(trained)
        p.theta_SS[4].data = np.zeros_like(p.theta_SS[4].data)
        p.theta_SS[5].data = np.zeros_like(p.theta_SS[5].data)
        with pytest.raises(CalibrationError):
            calibrate(source_frames, p)

    def test_golden_threshold(self, trained, source_frames):
        s = calibrate(source_frames, trained)
        assert len(s.source_entropies) == 60
        assert abs(s.threshold(0.95) - GOLDEN_TAU_95) < 1e-9

    def test_entropy_is_deterministic(self, trained, source_frames):
        p = restore(trained)
        f = source_frames[0]
        assert frame_entropy(p, f.x, MaskSpec(), 3) == frame_entropy(p, f.x, MaskSpec(), 3)

    def test_source_selection_bound(self, trained, source_frames):
        s = calibrate(source_frames, trained)
        m = len(source_frames)
        for q in (0.5, 0.75, 0.9, 0.95, 0.99):
            chosen = sum(decide(0, e, Policy("uncertainty", q), s) for e in s.source_entropies)
            assert chosen <= math.ceil((1 - q) * m) + 1


class TestPolicy:
    def test_parse(self):
        assert Policy.parse("uncertainty:0.95") == Policy("uncertainty", 0.95)
        assert Policy.parse("uniform:5") == Policy("uniform", 5)
        assert Policy.parse("always") == Policy("always")
        assert Policy.parse("shallow:4").steps_override() == 4
        assert Policy.parse("random:0.5", seed=3).seed == 3

    @pytest.mark.parametrize("text", ["random:1.5", "uniform:0", "shallow:2.5", "uncertainty", "always:3",
                                      "sometimes"])
    def test_invalid(self, text):
        with pytest.raises(ValueError):
            Policy.parse(text)

    def test_random_one_always_fires(self):
        assert all(decide(t, None, Policy("random", 1.0)) for t in range(200))

    def test_uniform_five(self):
        assert [t for t in range(10) if decide(t, None, Policy("uniform", 5))] == [0, 5]

    def test_uniform_one_is_always(self):
        assert all(decide(t, None, Policy("uniform", 1)) == decide(t, None, Policy("always")) for t in range(50))

    def test_threshold_is_strict(self, rng):
        s = stats_of(rng.normal(size=60))
        tau = s.threshold(0.9)
        assert not decide(0, tau, Policy("uncertainty", 0.9), s)
        assert decide(0, np.nextafter(tau, np.inf), Policy("uncertainty", 0.9), s)

    def test_uncertainty_needs_inputs(self, rng):
        s = stats_of(rng.normal(size=60))
        with pytest.raises(ValueError):
            decide(0, None, Policy("uncertainty", 0.9), s)
        with pytest.raises(ValueError):
            decide(0, 0.0, Policy("uncertainty", 0.9), None)

    def test_shallow_and_never(self):
        assert decide(7, None, Policy("shallow", 2)) and not decide(7, None, Policy("never"))

    def test_random_rate_and_determinism(self):
        pol = Policy("random", 0.3, seed=11)
        picks = [decide(t, None, pol) for t in range(4000)]
        assert picks == [decide(t, None, pol) for t in range(4000)]
        assert abs(np.mean(picks) - 0.3) < 0.03

    @given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 100))
    def test_random_sets_are_nested(self, p1, p2, seed):
        lo, hi = sorted((p1, p2))
        for t in range(50):
            if decide(t, None, Policy("random", lo, seed)):
                assert decide(t, None, Policy("random", hi, seed))

    @given(st.lists(st.floats(-3, 3), min_size=20, max_size=20), st.floats(0, 1), st.floats(0, 1))
    def test_uncertainty_sets_are_nested(self, ents, q1, q2):
        s = stats_of(np.random.default_rng(0).normal(size=60))
        lo, hi = sorted((q1, q2))
        for e in ents:
            if decide(0, e, Policy("uncertainty", hi), s):
                assert decide(0, e, Policy("uncertainty", lo), s)
