"""Metric tests.

Segment and event counts are checked against independent brute-force
oracles: segments by rasterizing time on a fine lattice, event matching by
exhaustive search over assignments. All random events live on a 0.05 s
lattice so overlap comparisons are exact.
"""

import itertools
import math

import numpy as np
import pytest

from tsdlearn.evaluation import (
    DecodeConfig,
    decode_events,
    evaluate,
    event_counts,
    event_f,
    f_score,
    macro_average,
    pseudo_error_rate,
    segment_counts,
    segment_f,
    smooth_probs,
    write_report_csv,
)
from tsdlearn.features import DEFAULT_MEL

LATTICE = 0.05
RASTER = 0.01


def oracle_segment_counts(ref, est, duration, segment_length=1.0):
    """Rasterize time at 10 ms; a segment is active when any of its cells is
    covered by an event. Valid for events on the 0.05 s lattice."""
    n_seg = math.ceil(duration / segment_length)
    n_cells = round(duration / RASTER)

    def grid(events):
        cells = np.zeros(n_cells, dtype=bool)
        for on, off, _ in events:
            a = round(on / RASTER)
            b = round(off / RASTER)
            cells[max(0, a):min(n_cells, b)] = True
        active = np.zeros(n_seg, dtype=bool)
        for s in range(n_seg):
            a = round(s * segment_length / RASTER)
            b = min(n_cells, round((s + 1) * segment_length / RASTER))
            active[s] = cells[a:b].any()
        return active

    r, e = grid(ref), grid(est)
    return (int((r & e).sum()), int((~r & e).sum()), int((r & ~e).sum()))


def oracle_event_counts(ref, est, collar=0.2, offset_frac=0.2):
    """Maximum one-to-one matching by exhaustive search over injective
    assignments of reference events to admissible estimates."""
    def ok(rv, ev):
        tol_off = max(collar, offset_frac * (rv[1] - rv[0]))
        return abs(ev[0] - rv[0]) <= collar and abs(ev[1] - rv[1]) <= tol_off

    admissible = [[j for j, ev in enumerate(est) if ok(rv, ev)] for rv in ref]

    best = 0
    for subset_size in range(min(len(ref), len(est)), -1, -1):
        if subset_size <= best:
            break
        for refs in itertools.combinations(range(len(ref)), subset_size):
            for ests in itertools.permutations(range(len(est)), subset_size):
                if all(e in admissible[r] for r, e in zip(refs, ests)):
                    best = subset_size
                    break
            if best == subset_size:
                break
    return best, len(est) - best, len(ref) - best


def random_events(rng, duration, max_events=6, label="c"):
    events = []
    for _ in range(rng.integers(0, max_events + 1)):
        lo = rng.integers(0, int(duration / LATTICE) - 2)
        hi = rng.integers(lo + 1, min(lo + 20, int(duration / LATTICE)))
        events.append((lo * LATTICE, hi * LATTICE, label))
    return events


class TestSegmentCounts:
    def test_against_oracle(self):
        rng = np.random.default_rng(101)
        for _ in range(400):
            duration = float(rng.integers(2, 8))
            ref = random_events(rng, duration)
            est = random_events(rng, duration)
            assert segment_counts(ref, est, duration) == \
                oracle_segment_counts(ref, est, duration)

    def test_hand_case(self):
        """ref active segments {0,1,2,3}, est {2,3,4}: tp 2, fp 1, fn 2,
        F = 4/7 = 0.571."""
        ref = [(0.0, 3.5, "a")]
        est = [(2.2, 4.5, "a")]
        tp, fp, fn = segment_counts(ref, est, 5.0)
        assert (tp, fp, fn) == (2, 1, 2)
        assert abs(f_score(tp, fp, fn) - 0.571) < 1e-3

    def test_zero_length_overlap_ignored(self):
        """An event touching a segment boundary only does not activate the
        next segment."""
        tp, fp, fn = segment_counts([(0.0, 1.0, "a")], [(1.0, 2.0, "a")], 2.0)
        assert (tp, fp, fn) == (0, 1, 1)

    def test_bad_duration(self):
        with pytest.raises(ValueError):
            segment_counts([], [], 0.0)


class TestEventCounts:
    def test_against_oracle(self):
        rng = np.random.default_rng(202)
        for _ in range(400):
            duration = float(rng.integers(2, 8))
            ref = random_events(rng, duration)
            est = random_events(rng, duration)
            assert event_counts(ref, est) == oracle_event_counts(ref, est)

    def test_matching_is_one_to_one(self):
        """Two estimates inside the collar of one reference yield one tp and
        one fp, never two tps."""
        ref = [(1.0, 2.0, "a")]
        est = [(1.05, 2.05, "a"), (0.95, 1.95, "a")]
        assert event_counts(ref, est) == (1, 1, 0)

    def test_greedy_would_fail(self):
        """Crossing admissibility: est0 matches both refs, est1 only ref0.
        Maximum matching pairs est0-ref1 and est1-ref0."""
        ref = [(1.0, 2.0, "a"), (1.2, 2.2, "a")]
        est = [(1.15, 2.15, "a"), (0.95, 1.9, "a")]
        tp, fp, fn = event_counts(ref, est)
        assert tp == 2

    def test_offset_collar_scales_with_length(self):
        """A long reference tolerates a proportionally larger offset gap."""
        ref = [(0.0, 10.0, "a")]
        assert event_counts(ref, [(0.1, 11.9, "a")])[0] == 1  # 1.9 < 0.2*10
        assert event_counts(ref, [(0.1, 12.1, "a")])[0] == 0

    def test_empty_sides(self):
        assert event_counts([], []) == (0, 0, 0)
        assert event_counts([(0, 1, "a")], []) == (0, 0, 1)
        assert event_counts([], [(0, 1, "a")]) == (0, 1, 0)


class TestFScore:
    def test_perfect_silence_is_one(self):
        assert f_score(0, 0, 0) == 1.0

    def test_known_values(self):
        assert f_score(2, 1, 2) == pytest.approx(4 / 7)
        assert f_score(1, 0, 0) == 1.0
        assert f_score(0, 3, 2) == 0.0

    def test_wrappers(self):
        ref = [(0.0, 3.5, "a")]
        est = [(2.2, 4.5, "a")]
        assert segment_f(ref, est, 5.0) == pytest.approx(4 / 7)
        assert event_f(ref, est) == 0.0


class TestSmoothAndDecode:
    def test_median_removes_blips(self):
        probs = np.array([0.1, 0.1, 0.9, 0.1, 0.1])
        assert smooth_probs(probs, 3)[2] == 0.1

    def test_window_one_is_identity(self):
        rng = np.random.default_rng(7)
        p = rng.uniform(0, 1, 20)
        np.testing.assert_array_equal(smooth_probs(p, 1), p)

    def test_decode_round_trip(self):
        """A clean probability plateau decodes to one event spanning it."""
        step = DEFAULT_MEL.hop_length / DEFAULT_MEL.sample_rate
        probs = np.zeros(50)
        probs[10:20] = 0.9
        events = decode_events(probs, "x", DecodeConfig(0.5, 1))
        assert len(events) == 1
        on, off, label = events[0]
        assert label == "x"
        assert on == pytest.approx(10 * step)
        assert off == pytest.approx(20 * step)

    def test_threshold_is_strict(self):
        probs = np.full(20, 0.5)
        assert decode_events(probs, "x", DecodeConfig(0.5, 1)) == []

    def test_median_window_bridges_gaps(self):
        probs = np.array([0.0, 0.9, 0.9, 0.0, 0.9, 0.9, 0.0])
        raw = decode_events(probs, "x", DecodeConfig(0.5, 1))
        smoothed = decode_events(probs, "x", DecodeConfig(0.5, 3))
        assert len(raw) == 2
        assert len(smoothed) == 1

    def test_all_silent(self):
        assert decode_events(np.zeros(30), "x") == []

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DecodeConfig(threshold=0.0)
        with pytest.raises(ValueError):
            DecodeConfig(median_window=4)


class TestPseudoErrorRate:
    def test_hand_values(self):
        pseudo = np.array([1.0, 0.0, 1.0, 0.0])
        truth = np.array([1.0, 0.0, 0.0, 1.0])
        assert pseudo_error_rate(pseudo, truth) == 0.5
        assert pseudo_error_rate(truth, truth) == 0.0

    def test_binarizes_soft_inputs(self):
        assert pseudo_error_rate(np.array([0.6, 0.4]),
                                 np.array([1.0, 0.0])) == 0.0

    def test_guards(self):
        with pytest.raises(ValueError):
            pseudo_error_rate(np.zeros(3), np.zeros(4))
        with pytest.raises(ValueError):
            pseudo_error_rate(np.zeros(0), np.zeros(0))


class TestEvaluate:
    def test_macro_over_present_classes(self):
        """Classes appearing only in estimates do not dilute the macro
        average; per-class counts pool across clips before the F-score."""
        refs = [([(0.0, 1.0, "a")], "a", 2.0),
                ([(0.0, 1.0, "b")], "b", 2.0),
                ([], "c", 2.0)]
        ests = [[(0.0, 1.0, "a")], [], [(0.0, 2.0, "c")]]
        report = evaluate(refs, ests)
        assert set(report.per_class_event) == {"a", "b", "c"}
        assert report.event_f == pytest.approx((1.0 + 0.0) / 2)

    def test_pooled_counts_differ_from_mean_of_fs(self):
        """Counts pool across clips of one class: two clips with (tp 1) and
        (fn 1) give F = 2/3, not mean(1.0, 0.0)."""
        refs = [([(0.0, 1.0, "a")], "a", 2.0),
                ([(0.0, 1.0, "a")], "a", 2.0)]
        ests = [[(0.0, 1.0, "a")], []]
        report = evaluate(refs, ests)
        assert report.per_class_event["a"] == pytest.approx(2 / 3)

    def test_alignment_required(self):
        with pytest.raises(ValueError):
            evaluate([([], "a", 1.0)], [])

    def test_macro_average_empty(self):
        assert macro_average({"a": 0.5}, set()) == 0.0

    def test_report_csv(self, tmp_path):
        refs = [([(0.0, 1.0, "a")], "a", 2.0)]
        report = evaluate(refs, [[(0.0, 1.0, "a")]])
        out = tmp_path / "report.csv"
        write_report_csv(report, out, header=["threshold=0.5"])
        text = out.read_text()
        assert text.startswith("# threshold=0.5\n")
        assert "macro" in text
        assert "a,1.000000,1.000000" in text
