"""Detection decoding and evaluation metrics.

Frame probabilities are median-filtered, thresholded, and contiguous active
runs become events. Two complementary F-scores measure quality:

* segment-based: the clip is cut into fixed-length segments; a segment is
  active if any event overlaps it, and activity grids are compared.
* event-based: predicted events match reference events when onsets agree
  within a collar and offsets within a collar that scales with event length;
  matching is one-to-one and chosen to maximize the number of matches.

Dataset scores aggregate counts per class, then macro-average the per-class
F-scores over the classes present in the reference.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import medfilt

from .dataset import EventList
from .features import DEFAULT_MEL, MelConfig

SEGMENT_LENGTH = 1.0
ONSET_COLLAR = 0.2
OFFSET_FRAC = 0.2


@dataclass
class DecodeConfig:
    threshold: float = 0.5
    median_window: int = 5  # frames, odd

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValueError("median window must be a positive odd integer")


DEFAULT_DECODE = DecodeConfig()


def smooth_probs(frame_probs: np.ndarray, window: int = 5) -> np.ndarray:
    """Median filter along time; window 1 is the identity."""
    probs = np.asarray(frame_probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError("frame probabilities must be 1-D")
    if window == 1:
        return probs
    return medfilt(probs, kernel_size=window)


def decode_events(frame_probs: np.ndarray, label: str,
                  decode: DecodeConfig = DEFAULT_DECODE,
                  cfg: MelConfig = DEFAULT_MEL) -> EventList:
    """Turn frame probabilities into a list of (onset, offset, label) events.

    Probabilities are median-filtered, binarized at the threshold, and each
    maximal run of active frames becomes one event spanning from the first
    active frame time to the frame time just past the last active frame.
    """
    probs = smooth_probs(frame_probs, decode.median_window)
    active = probs > decode.threshold
    if not active.any():
        return []
    step = cfg.hop_length / cfg.sample_rate
    padded = np.concatenate([[False], active, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, stops = edges[0::2], edges[1::2]
    return [(float(i * step), float(j * step), label)
            for i, j in zip(starts, stops)]


# ---------------------------------------------------------------------------
# Counting
# ---------------------------------------------------------------------------

def segment_counts(ref: EventList, est: EventList, clip_duration: float,
                   segment_length: float = SEGMENT_LENGTH) -> tuple[int, int, int]:
    """Per-segment activity comparison, ignoring labels.

    The clip is divided into ceil(duration / segment_length) segments; a
    segment is active when any event overlaps it with positive duration.
    Returns (tp, fp, fn) over segments.
    """
    if clip_duration <= 0:
        raise ValueError(f"clip duration must be positive, got {clip_duration}")
    n_seg = math.ceil(clip_duration / segment_length)

    def grid(events: EventList) -> np.ndarray:
        act = np.zeros(n_seg, dtype=bool)
        for onset, offset, _ in events:
            first = max(0, int(math.floor(onset / segment_length)))
            last = min(n_seg, int(math.ceil(offset / segment_length)))
            for s in range(first, last):
                lo, hi = s * segment_length, (s + 1) * segment_length
                if min(offset, hi) - max(onset, lo) > 0:
                    act[s] = True
        return act

    r, e = grid(ref), grid(est)
    tp = int(np.sum(r & e))
    fp = int(np.sum(~r & e))
    fn = int(np.sum(r & ~e))
    return tp, fp, fn


def _event_match(ref_event, est_event, collar: float, offset_frac: float) -> bool:
    r_on, r_off, _ = ref_event
    e_on, e_off, _ = est_event
    offset_collar = max(collar, offset_frac * (r_off - r_on))
    return abs(e_on - r_on) <= collar and abs(e_off - r_off) <= offset_collar


def event_counts(ref: EventList, est: EventList, collar: float = ONSET_COLLAR,
                 offset_frac: float = OFFSET_FRAC) -> tuple[int, int, int]:
    """One-to-one event matching maximizing the number of matched pairs.

    A pair is admissible when onsets differ by at most the collar and offsets
    by at most max(collar, offset_frac * reference length). Returns
    (tp, fp, fn) where tp is the size of a maximum matching.
    """
    adjacency = [[j for j, ev in enumerate(est)
                  if _event_match(rv, ev, collar, offset_frac)]
                 for rv in ref]
    match_of_est: dict[int, int] = {}

    def try_assign(i: int, seen: set[int]) -> bool:
        for j in adjacency[i]:
            if j in seen:
                continue
            seen.add(j)
            if j not in match_of_est or try_assign(match_of_est[j], seen):
                match_of_est[j] = i
                return True
        return False

    tp = sum(try_assign(i, set()) for i in range(len(ref)))
    return tp, len(est) - tp, len(ref) - tp


def f_score(tp: int, fp: int, fn: int) -> float:
    """F1 from counts; defined as 1.0 when there is nothing to detect and
    nothing was detected."""
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def segment_f(ref: EventList, est: EventList, clip_duration: float,
              segment_length: float = SEGMENT_LENGTH) -> float:
    return f_score(*segment_counts(ref, est, clip_duration, segment_length))


def event_f(ref: EventList, est: EventList, collar: float = ONSET_COLLAR,
            offset_frac: float = OFFSET_FRAC) -> float:
    return f_score(*event_counts(ref, est, collar, offset_frac))


def macro_average(per_class_f: dict[str, float],
                  present_classes: set[str] | list[str]) -> float:
    """Mean F over the classes present in the reference; 0 if none."""
    present = [c for c in per_class_f if c in set(present_classes)]
    if not present:
        return 0.0
    return float(np.mean([per_class_f[c] for c in present]))


def pseudo_error_rate(pseudo: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of frames where binarized pseudo labels disagree with the
    ground truth."""
    pseudo = np.asarray(pseudo)
    truth = np.asarray(truth)
    if pseudo.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pseudo.shape} vs {truth.shape}")
    if pseudo.size == 0:
        raise ValueError("cannot score empty label arrays")
    return float(np.mean((pseudo > 0.5) != (truth > 0.5)))


# ---------------------------------------------------------------------------
# Dataset-level evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    segment_f: float
    event_f: float
    per_class_segment: dict[str, float]
    per_class_event: dict[str, float]
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    n_clips: int = 0

    def to_dict(self) -> dict:
        return {
            "segment_f": self.segment_f,
            "event_f": self.event_f,
            "per_class_segment": self.per_class_segment,
            "per_class_event": self.per_class_event,
            "counts": self.counts,
            "n_clips": self.n_clips,
        }


def evaluate(references: list[tuple[EventList, str, float]],
             estimates: list[EventList],
             segment_length: float = SEGMENT_LENGTH,
             collar: float = ONSET_COLLAR,
             offset_frac: float = OFFSET_FRAC) -> EvalReport:
    """Score a set of clips.

    Args:
      references: per clip, (reference events for the target class,
        target class, clip duration in seconds)
      estimates: per clip, decoded events for the same target class

    Counts accumulate per class across clips; per-class F-scores are then
    macro-averaged over the classes that occur in any reference.
    """
    if len(references) != len(estimates):
        raise ValueError("references and estimates must align one-to-one")

    seg: dict[str, np.ndarray] = {}
    evt: dict[str, np.ndarray] = {}
    present: set[str] = set()
    for (ref, cls, duration), est in zip(references, estimates):
        s = np.array(segment_counts(ref, est, duration, segment_length))
        e = np.array(event_counts(ref, est, collar, offset_frac))
        seg[cls] = seg.get(cls, np.zeros(3, dtype=int)) + s
        evt[cls] = evt.get(cls, np.zeros(3, dtype=int)) + e
        if ref:
            present.add(cls)

    per_seg = {c: f_score(*counts) for c, counts in seg.items()}
    per_evt = {c: f_score(*counts) for c, counts in evt.items()}
    counts = {c: {"seg_tp": int(seg[c][0]), "seg_fp": int(seg[c][1]),
                  "seg_fn": int(seg[c][2]), "evt_tp": int(evt[c][0]),
                  "evt_fp": int(evt[c][1]), "evt_fn": int(evt[c][2])}
              for c in seg}
    return EvalReport(macro_average(per_seg, present),
                      macro_average(per_evt, present),
                      per_seg, per_evt, counts, len(references))


def write_report_csv(report: EvalReport, path: str | os.PathLike,
                     header: list[str] | None = None) -> None:
    """Per-class and macro rows: class, segment_f, event_f, counts.

    `header` lines are written first as comments recording the settings the
    report was produced with.
    """
    os.makedirs(os.path.dirname(os.path.abspath(os.fspath(path))), exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["class", "segment_f", "event_f",
                         "seg_tp", "seg_fp", "seg_fn",
                         "evt_tp", "evt_fp", "evt_fn"])
        for cls in sorted(report.per_class_segment):
            c = report.counts.get(cls, {})
            writer.writerow([
                cls,
                f"{report.per_class_segment[cls]:.6f}",
                f"{report.per_class_event[cls]:.6f}",
                c.get("seg_tp", 0), c.get("seg_fp", 0), c.get("seg_fn", 0),
                c.get("evt_tp", 0), c.get("evt_fp", 0), c.get("evt_fn", 0),
            ])
        writer.writerow(["macro", f"{report.segment_f:.6f}",
                         f"{report.event_f:.6f}", "", "", "", "", "", ""])
