"""Dataset construction for target sound detection.

A scene is a background plus sound events placed at known onsets. Every
scene yields one positive sample per event class present (reference clip of
that class, frame labels marking its intervals) and half as many negative
samples whose target class does not occur in the scene.

Source and target domains use disjoint class sets. Target-domain training
manifests carry clip labels only; frame labels on target samples are locked
behind a guard so weakly-supervised code paths cannot read them.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .features import (
    DEFAULT_MEL,
    MelConfig,
    MelSpectrogram,
    Waveform,
    frames_for_duration,
    mel_for_file,
    mel_spectrogram,
    save_audio,
    time_of_frame,
)

# (onset seconds, offset seconds, class label)
Event = tuple[float, float, str]
EventList = list[Event]

SOURCE = "source"
TARGET = "target"


class SupervisionLeakError(RuntimeError):
    """Raised when frame labels are read on a sample locked to weak supervision."""


@dataclass
class FrameLabels:
    values: np.ndarray  # (T,) uint8, 0/1
    label: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        if self.values.ndim != 1:
            raise ValueError("frame labels must be a 1-D vector")
        if np.any(self.values > 1):
            raise ValueError("frame labels must be binary")


class TSDSample:
    """One training example: mixture + reference features and labels.

    `frame_labels` may be locked (see `lock_frame_labels`), after which any
    read raises SupervisionLeakError. Weakly-supervised phases operate on
    locked samples, so a leak of strong labels fails loudly in tests.
    """

    def __init__(self, mixture: MelSpectrogram, reference: MelSpectrogram,
                 target_class: str, clip_label: int, domain: str,
                 frame_labels: FrameLabels | None = None, uid: str = ""):
        if domain not in (SOURCE, TARGET):
            raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
        if clip_label not in (0, 1):
            raise ValueError(f"clip label must be 0 or 1, got {clip_label!r}")
        if frame_labels is not None:
            if len(frame_labels.values) != mixture.n_frames:
                raise ValueError("frame label length does not match mixture frames")
            frame_max = int(frame_labels.values.max()) if len(frame_labels.values) else 0
            if frame_max != clip_label:
                raise ValueError(
                    f"clip label {clip_label} inconsistent with frame labels "
                    f"(max {frame_max}) for class {target_class!r}")
        self.mixture = mixture
        self.reference = reference
        self.target_class = target_class
        self.clip_label = clip_label
        self.domain = domain
        self.uid = uid
        self._frame_labels = frame_labels
        self._locked = False

    @property
    def frame_labels(self) -> FrameLabels | None:
        if self._locked:
            raise SupervisionLeakError(
                f"frame labels of sample {self.uid!r} are locked "
                "(weak-supervision phase)")
        return self._frame_labels

    @property
    def has_frame_labels(self) -> bool:
        return self._frame_labels is not None

    def lock_frame_labels(self) -> "TSDSample":
        self._locked = True
        return self


@dataclass
class SampleRecord:
    """One manifest line. Paths are stored relative to the manifest file."""

    mixture_path: str
    reference_path: str
    target_class: str
    events: EventList | None  # None on weak-only manifests
    clip_label: int
    domain: str
    split: str

    def to_json(self) -> str:
        payload = {
            "mixture_path": self.mixture_path,
            "reference_path": self.reference_path,
            "target_class": self.target_class,
            "events": None if self.events is None else
                      [[on, off, lab] for on, off, lab in self.events],
            "clip_label": self.clip_label,
            "domain": self.domain,
            "split": self.split,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        d = json.loads(line)
        events = d["events"]
        if events is not None:
            events = [(float(on), float(off), str(lab)) for on, off, lab in events]
        return cls(d["mixture_path"], d["reference_path"], d["target_class"],
                   events, int(d["clip_label"]), d["domain"], d["split"])


@dataclass
class Catalog:
    """Class inventory: clean single-event clips per class plus scene list."""

    classes: list[str]
    clean_clips: dict[str, list[str]]  # class -> wav paths
    scenes: list[tuple[str, EventList]] = field(default_factory=list)

    def __post_init__(self):
        missing = [c for _, events in self.scenes for _, _, c in events
                   if c not in self.clean_clips]
        if missing:
            raise ValueError(f"scene classes without clean clips: {sorted(set(missing))}")

    def save(self, path: str | os.PathLike) -> None:
        base = os.path.dirname(os.path.abspath(os.fspath(path)))
        payload = {
            "classes": self.classes,
            "clean_clips": {c: [os.path.relpath(p, base) for p in clips]
                            for c, clips in self.clean_clips.items()},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Catalog":
        path = os.fspath(path)
        base = os.path.dirname(os.path.abspath(path))
        with open(path) as fh:
            d = json.load(fh)
        clips = {c: [os.path.join(base, p) for p in ps]
                 for c, ps in d["clean_clips"].items()}
        return cls(d["classes"], clips)


# ---------------------------------------------------------------------------
# Frame labels
# ---------------------------------------------------------------------------

def frame_labels_from_events(events: EventList, label: str, n_frames: int,
                             cfg: MelConfig = DEFAULT_MEL) -> FrameLabels:
    """Binary frame labels: 1 where the frame time falls in [onset, offset)."""
    if n_frames <= 0:
        raise ValueError(f"frame count must be positive, got {n_frames}")
    times = np.arange(n_frames) * (cfg.hop_length / cfg.sample_rate)
    mask = np.zeros(n_frames, dtype=bool)
    for onset, offset, lab in events:
        if lab == label:
            mask |= (times >= onset) & (times < offset)
    return FrameLabels(mask.astype(np.uint8), label)


def corrupt_labels(labels: FrameLabels, error_rate: float,
                   rng_seed: int) -> FrameLabels:
    """Flip exactly round(error_rate * T) frame labels, positions drawn
    uniformly without replacement."""
    if not 0.0 <= error_rate <= 1.0:
        raise ValueError(f"error rate must be in [0, 1], got {error_rate}")
    values = labels.values.copy()
    n_flips = int(round(error_rate * len(values)))
    if n_flips:
        rng = np.random.default_rng(rng_seed)
        idx = rng.choice(len(values), size=n_flips, replace=False)
        values[idx] ^= 1
    return FrameLabels(values, labels.label)


# ---------------------------------------------------------------------------
# Toy sound synthesis
# ---------------------------------------------------------------------------

TOY_CLASSES = [
    "tone_low", "tone_mid", "tone_high",
    "chirp_up", "chirp_down",
    "noise_low", "noise_mid", "noise_high",
    "tremolo", "vibrato", "clicks", "buzz_low",
]
# Source classes anchor the axes the reference encoder must represent:
# band position (two tones an octave-plus apart), tonal-vs-noise texture
# (band noise overlapping the chirp's range), and temporal structure (the
# sweep). Novel target classes then land between those anchors instead of
# collapsing onto one of them.
DEFAULT_SOURCE_CLASSES = ["tone_low", "tone_high", "chirp_up", "noise_mid"]


def _fade(x: np.ndarray, sr: int, ms: float = 10.0) -> np.ndarray:
    n = min(len(x) // 2, max(1, int(sr * ms / 1000)))
    ramp = np.linspace(0.0, 1.0, n)
    x[:n] *= ramp
    x[-n:] *= ramp[::-1]
    return x


def _band_noise(n: int, sr: int, lo: float, hi: float, rng) -> np.ndarray:
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n)


def _rms_normalize(x: np.ndarray, target: float = 0.1) -> np.ndarray:
    rms = float(np.sqrt(np.mean(x ** 2)))
    return x * (target / rms) if rms > 0 else x


def synth_event(label: str, duration: float, rng: np.random.Generator,
                sr: int = 22050) -> Waveform:
    """Synthesize one isolated event of the named toy class.

    Classes are separated by spectral band and modulation so that a small
    model can tell them apart; per-clip jitter keeps clips distinct.
    """
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    jit = 1.0 + rng.uniform(-0.05, 0.05)

    # All classes live in roughly 0.5-5 kHz, where the pink and whiter
    # background colors have similar spectral density; the domain cue then
    # sits below the event band instead of masking it.
    if label == "tone_low":
        x = np.sin(2 * np.pi * 520.0 * jit * t)
    elif label == "tone_mid":
        x = np.sin(2 * np.pi * 1250.0 * jit * t)
    elif label == "tone_high":
        x = np.sin(2 * np.pi * 3000.0 * jit * t)
    elif label == "chirp_up":
        f = np.linspace(600.0 * jit, 2400.0 * jit, n)
        x = np.sin(2 * np.pi * np.cumsum(f) / sr)
    elif label == "chirp_down":
        f = np.linspace(3800.0 * jit, 1200.0 * jit, n)
        x = np.sin(2 * np.pi * np.cumsum(f) / sr)
    elif label == "noise_low":
        x = _band_noise(n, sr, 480.0, 840.0, rng)
    elif label == "noise_mid":
        x = _band_noise(n, sr, 1300.0, 2300.0, rng)
    elif label == "noise_high":
        x = _band_noise(n, sr, 3000.0, 5200.0, rng)
    elif label == "tremolo":
        am = 1.0 - 0.85 * 0.5 * (1 + np.sin(2 * np.pi * 9.0 * jit * t))
        x = np.sin(2 * np.pi * 750.0 * jit * t) * am
    elif label == "vibrato":
        f0 = 4300.0 * jit
        phase = f0 * t + (0.1 * f0 / 5.5) * np.sin(2 * np.pi * 5.5 * t)
        x = np.sin(2 * np.pi * phase)
    elif label == "clicks":
        x = np.zeros(n)
        period = int(sr / (11.0 * jit))
        burst = int(0.004 * sr)
        decay = np.exp(-np.arange(burst) / (0.001 * sr))
        for start in range(0, max(1, n - burst), period):
            x[start:start + burst] += rng.standard_normal(burst) * decay
    elif label == "buzz_low":
        x = np.sign(np.sin(2 * np.pi * 260.0 * jit * t) + 1e-12)
    else:
        raise ValueError(f"unknown toy class {label!r}")

    x = _fade(_rms_normalize(x), sr)
    return Waveform(x.astype(np.float32), sr)


def _colored_noise(n: int, sr: int, alpha: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Noise with power spectral density proportional to 1/f^alpha
    (0 = white, 1 = pink), flat below 40 Hz."""
    white = rng.standard_normal(n)
    if alpha == 0.0:
        return white
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec /= np.maximum(freqs, 40.0) ** (alpha / 2.0)
    return np.fft.irfft(spec, n)


DOMAIN_NOISE_ALPHA = {SOURCE: 1.0, TARGET: 0.5}


def synth_background(domain: str, duration: float, rng: np.random.Generator,
                     sr: int = 22050, rms: float = 0.03,
                     alpha: float | None = None) -> Waveform:
    """Domain-specific background noise.

    The two domains differ in noise color (spectral exponent), a deliberate
    but moderate distribution shift for the domain-adversarial machinery.
    `alpha` overrides the domain's default exponent.
    """
    if domain not in DOMAIN_NOISE_ALPHA:
        raise ValueError(f"unknown domain {domain!r}")
    if alpha is None:
        alpha = DOMAIN_NOISE_ALPHA[domain]
    n = int(round(duration * sr))
    x = _colored_noise(n, sr, alpha, rng)
    level = rms * (1.0 + rng.uniform(-0.2, 0.2))
    return Waveform(_rms_normalize(x, level).astype(np.float32), sr)


def synthesize_scene(recipe: list[tuple[str, Waveform, float]],
                     background: Waveform, snr_db: float,
                     rng_seed: int) -> tuple[Waveform, EventList]:
    """Mix events into a background at the given onsets.

    Each recipe entry is (class label, isolated event waveform, onset in
    seconds). Events are scaled to snr_db (plus a small per-event jitter)
    relative to the background RMS. Deterministic for a fixed seed.
    """
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    rng = np.random.default_rng(rng_seed)
    sr = background.sample_rate
    mixture = background.samples.astype(np.float64).copy()
    bg_rms = float(np.sqrt(np.mean(mixture ** 2))) or 1e-3

    events: EventList = []
    for label, clip, onset in recipe:
        if clip.sample_rate != sr:
            raise ValueError("event clip sample rate does not match background")
        start = int(round(onset * sr))
        stop = start + len(clip.samples)
        if start < 0 or stop > len(mixture):
            raise ValueError(
                f"event {label!r} at {onset:.3f}s (length "
                f"{len(clip.samples) / sr:.3f}s) extends past the scene end")
        snr = snr_db + rng.uniform(-1.5, 1.5)
        clip_rms = float(np.sqrt(np.mean(clip.samples.astype(np.float64) ** 2))) or 1e-9
        gain = bg_rms * 10.0 ** (snr / 20.0) / clip_rms
        mixture[start:stop] += gain * clip.samples
        events.append((start / sr, stop / sr, label))

    return Waveform(mixture.astype(np.float32), sr), events


def paired_probe_scenes(classes: list[str], n_scenes: int, seed: int,
                        source_alpha: float = DOMAIN_NOISE_ALPHA[SOURCE],
                        target_alpha: float = DOMAIN_NOISE_ALPHA[TARGET],
                        duration: float = 2.0, snr_db: float = 6.0,
                        max_events: int = 2, min_event: float = 0.5,
                        max_event: float = 1.0,
                        ) -> tuple[list[MelSpectrogram], list[MelSpectrogram]]:
    """Scene pairs sharing the exact foreground, split by background color.

    Each pair mixes the same events at the same onsets and gains over a
    source-colored and a target-colored background, so a domain probe on
    these features can only key on the background, not on which sound
    classes happen to live in which domain.
    """
    rng = np.random.default_rng(seed)
    source_side: list[MelSpectrogram] = []
    target_side: list[MelSpectrogram] = []
    for _ in range(n_scenes):
        k = min(int(rng.integers(1, max_events + 1)), len(classes))
        chosen = rng.choice(classes, size=k, replace=False)
        recipe = []
        for cls in chosen:
            dur = float(rng.uniform(min_event, max_event))
            onset = float(rng.uniform(0.0, duration - dur))
            recipe.append((str(cls), synth_event(str(cls), dur, rng), onset))
        mix_seed = int(rng.integers(0, 2 ** 31 - 1))
        for domain, alpha, side in ((SOURCE, source_alpha, source_side),
                                    (TARGET, target_alpha, target_side)):
            background = synth_background(domain, duration, rng, alpha=alpha)
            mixture, _ = synthesize_scene(recipe, background, snr_db, mix_seed)
            side.append(mel_spectrogram(mixture))
    return source_side, target_side


# ---------------------------------------------------------------------------
# Sample generation
# ---------------------------------------------------------------------------

def plan_samples(events: EventList, catalog: Catalog,
                 rng: np.random.Generator) -> list[tuple[str, str, int]]:
    """Decide (target_class, reference clip path, clip_label) tuples for one
    scene: one positive per distinct event class, floor(N/2) negatives drawn
    from classes absent from the scene."""
    present = sorted({lab for _, _, lab in events})
    unknown = [c for c in present if c not in catalog.clean_clips]
    if unknown:
        raise ValueError(f"scene classes not in catalog: {unknown}")

    plans = []
    for cls in present:
        ref = str(rng.choice(catalog.clean_clips[cls]))
        plans.append((cls, ref, 1))

    n_neg = len(present) // 2
    if n_neg:
        absent = sorted(set(catalog.classes) - set(present))
        if not absent:
            raise ValueError("no class absent from the scene to build negatives")
        picks = rng.choice(absent, size=n_neg, replace=len(absent) < n_neg)
        for cls in np.atleast_1d(picks):
            cls = str(cls)
            ref = str(rng.choice(catalog.clean_clips[cls]))
            plans.append((cls, ref, 0))
    return plans


def make_tsd_samples(scene: tuple[MelSpectrogram, EventList], catalog: Catalog,
                     rng_seed: int, domain: str = SOURCE,
                     cfg: MelConfig = DEFAULT_MEL) -> list[TSDSample]:
    """Featurized positive and negative samples for a single scene."""
    mixture, events = scene
    rng = np.random.default_rng(rng_seed)
    samples = []
    for i, (cls, ref_path, clip_label) in enumerate(plan_samples(events, catalog, rng)):
        labels = frame_labels_from_events(events, cls, mixture.n_frames, cfg)
        reference = mel_for_file(ref_path, cfg)
        samples.append(TSDSample(mixture, reference, cls, clip_label, domain,
                                 labels, uid=f"scene-{rng_seed}-{i}"))
    return samples


def split_source_target(catalog: Catalog,
                        source_classes: set[str] | list[str]) -> tuple[Catalog, Catalog]:
    """Split a catalog into disjoint source and target catalogs.

    Scenes whose classes fall wholly in one side go to that side; scenes
    mixing both are dropped.
    """
    source_classes = set(source_classes)
    all_classes = set(catalog.classes)
    stray = source_classes - all_classes
    if stray:
        raise ValueError(f"source classes not in catalog: {sorted(stray)}")
    target_classes = all_classes - source_classes
    if not source_classes or not target_classes:
        raise ValueError("both sides of the class split must be non-empty")

    def side(classes: set[str]) -> Catalog:
        scenes = [(p, ev) for p, ev in catalog.scenes
                  if {lab for _, _, lab in ev} <= classes]
        return Catalog(sorted(classes),
                       {c: list(catalog.clean_clips[c]) for c in sorted(classes)},
                       scenes)

    return side(source_classes), side(target_classes)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def write_manifest(records: list[SampleRecord], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_manifest(path: str | os.PathLike) -> list[SampleRecord]:
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = SampleRecord.from_json(line)
            rec.mixture_path = os.path.join(base, rec.mixture_path)
            rec.reference_path = os.path.join(base, rec.reference_path)
            records.append(rec)
    return records


def load_tsd_samples(records: list[SampleRecord], cfg: MelConfig = DEFAULT_MEL,
                     feature_memo: dict | None = None,
                     weak_only: bool = False) -> list[TSDSample]:
    """Build featurized samples from manifest records.

    With `weak_only=True`, frame labels are neither derived nor attached and
    the samples come back locked, so any later read raises.
    """
    memo = feature_memo if feature_memo is not None else {}

    def feats(path: str) -> MelSpectrogram:
        if path not in memo:
            memo[path] = mel_for_file(path, cfg)
        return memo[path]

    samples = []
    for i, rec in enumerate(records):
        mixture = feats(rec.mixture_path)
        reference = feats(rec.reference_path)
        labels = None
        if not weak_only and rec.events is not None:
            labels = frame_labels_from_events(rec.events, rec.target_class,
                                              mixture.n_frames, cfg)
        uid = f"{rec.split}-{i:05d}"
        sample = TSDSample(mixture, reference, rec.target_class, rec.clip_label,
                           rec.domain, labels, uid=uid)
        if weak_only:
            sample.lock_frame_labels()
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# Dataset builder
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    out_dir: str
    classes: list[str] = field(default_factory=lambda: list(TOY_CLASSES))
    source_classes: list[str] = field(default_factory=lambda: list(DEFAULT_SOURCE_CLASSES))
    clips_per_class: int = 12
    clean_clip_duration: float = 0.8
    scene_duration: float = 2.0
    n_source_train: int = 48
    n_source_val: int = 16
    n_target_train: int = 64
    n_target_val: int = 32
    n_target_test: int = 48
    # Two events per scene keeps one negative sample per scene (floor(N/2)),
    # which weak training needs for suppression pressure.
    min_events_per_scene: int = 2
    max_events_per_scene: int = 2
    min_event_duration: float = 0.5
    max_event_duration: float = 1.0
    snr_db: float = 6.0
    source_noise_alpha: float = 1.0  # pink background
    target_noise_alpha: float = 0.5  # whiter than the source
    seed: int = 7


@dataclass
class DatasetPaths:
    root: str
    manifests: dict[str, str]
    source_catalog: str
    target_catalog: str
    summary: dict


def _build_clean_clips(classes, cfg: DatasetConfig, rng) -> dict[str, list[str]]:
    clips: dict[str, list[str]] = {}
    for cls in classes:
        cls_dir = os.path.join(cfg.out_dir, "clean", cls)
        os.makedirs(cls_dir, exist_ok=True)
        paths = []
        for k in range(cfg.clips_per_class):
            wav = synth_event(cls, cfg.clean_clip_duration, rng)
            path = os.path.join(cls_dir, f"{cls}_{k:02d}.wav")
            save_audio(path, wav)
            paths.append(path)
        clips[cls] = paths
    return clips


def _build_scenes(classes, domain, split, n_scenes, cfg: DatasetConfig,
                  rng) -> list[tuple[str, EventList]]:
    scene_dir = os.path.join(cfg.out_dir, "scenes", split)
    os.makedirs(scene_dir, exist_ok=True)
    scenes = []
    for s in range(n_scenes):
        k = int(rng.integers(cfg.min_events_per_scene,
                             cfg.max_events_per_scene + 1))
        k = min(max(k, 1), len(classes))
        chosen = rng.choice(classes, size=k, replace=False)
        recipe = []
        for cls in chosen:
            dur = float(rng.uniform(cfg.min_event_duration, cfg.max_event_duration))
            onset = float(rng.uniform(0.0, cfg.scene_duration - dur))
            recipe.append((str(cls), synth_event(str(cls), dur, rng), onset))
        alpha = (cfg.source_noise_alpha if domain == SOURCE
                 else cfg.target_noise_alpha)
        background = synth_background(domain, cfg.scene_duration, rng,
                                      alpha=alpha)
        seed = int(rng.integers(0, 2 ** 31 - 1))
        mixture, events = synthesize_scene(recipe, background, cfg.snr_db, seed)
        path = os.path.join(scene_dir, f"{split}_{s:04d}.wav")
        save_audio(path, mixture)
        scenes.append((path, events))
    return scenes


def _records_for_scenes(scenes, catalog, domain, split, rng,
                        keep_events=True) -> list[SampleRecord]:
    records = []
    for path, events in scenes:
        for cls, ref, clip_label in plan_samples(events, catalog, rng):
            records.append(SampleRecord(path, ref, cls,
                                        list(events) if keep_events else None,
                                        clip_label, domain, split))
    return records


def _relativize(records: list[SampleRecord], base: str) -> list[SampleRecord]:
    out = []
    for rec in records:
        rec = copy.copy(rec)
        rec.mixture_path = os.path.relpath(rec.mixture_path, base)
        rec.reference_path = os.path.relpath(rec.reference_path, base)
        out.append(rec)
    return out


def build_dataset(cfg: DatasetConfig) -> DatasetPaths:
    """Synthesize the full two-domain dataset and write manifests.

    Emits strong manifests for the source splits and both a weak manifest
    (clip labels only) and a strong twin (events kept, for fully-supervised
    baselines and pseudo-label analysis) for the target training split.
    """
    bad = [c for c in cfg.source_classes if c not in cfg.classes]
    if bad:
        raise ValueError(f"source classes not in class list: {bad}")
    if set(cfg.source_classes) == set(cfg.classes):
        raise ValueError("source classes must be a proper subset of all classes")
    if not 1 <= cfg.min_events_per_scene <= cfg.max_events_per_scene:
        raise ValueError("need 1 <= min_events_per_scene <= max_events_per_scene")
    if cfg.max_event_duration > cfg.scene_duration:
        raise ValueError("events must fit inside the scene")

    os.makedirs(cfg.out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    clean = _build_clean_clips(cfg.classes, cfg, rng)
    full = Catalog(sorted(cfg.classes), clean)
    source_cat, target_cat = split_source_target(full, cfg.source_classes)

    splits = [
        ("source_train", SOURCE, source_cat, cfg.n_source_train),
        ("source_val", SOURCE, source_cat, cfg.n_source_val),
        ("target_train", TARGET, target_cat, cfg.n_target_train),
        ("target_val", TARGET, target_cat, cfg.n_target_val),
        ("target_test", TARGET, target_cat, cfg.n_target_test),
    ]

    manifests: dict[str, str] = {}
    summary: dict = {"per_split": {}, "per_class": {c: 0 for c in sorted(cfg.classes)}}
    for split, domain, catalog, n_scenes in splits:
        scenes = _build_scenes(catalog.classes, domain, split, n_scenes, cfg, rng)
        records = _records_for_scenes(scenes, catalog, domain, split, rng)
        rel = _relativize(records, cfg.out_dir)

        if split == "target_train":
            weak = []
            for rec in rel:
                rec_weak = copy.copy(rec)
                rec_weak.events = None
                weak.append(rec_weak)
            weak_path = os.path.join(cfg.out_dir, "target_train_weak.jsonl")
            strong_path = os.path.join(cfg.out_dir, "target_train_strong.jsonl")
            write_manifest(weak, weak_path)
            write_manifest(rel, strong_path)
            manifests["target_train_weak"] = weak_path
            manifests["target_train_strong"] = strong_path
        else:
            path = os.path.join(cfg.out_dir, f"{split}.jsonl")
            write_manifest(rel, path)
            manifests[split] = path

        summary["per_split"][split] = {
            "scenes": n_scenes,
            "samples": len(records),
            "positives": sum(r.clip_label for r in records),
        }
        for rec in records:
            summary["per_class"][rec.target_class] += 1

    source_cat_path = os.path.join(cfg.out_dir, "catalog_source.json")
    target_cat_path = os.path.join(cfg.out_dir, "catalog_target.json")
    source_cat.save(source_cat_path)
    target_cat.save(target_cat_path)

    with open(os.path.join(cfg.out_dir, "dataset_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    return DatasetPaths(cfg.out_dir, manifests, source_cat_path,
                        target_cat_path, summary)
