"""Training phases and the two-student pipeline.

The pipeline trains two detectors that teach each other:

1. f (frame head) learns on strongly-labeled source scenes.
2. w (linear-softmax clip head) learns on the same scenes from clip labels,
   pulled toward f's frame features by the distillation loss.
3. w retrains on the weakly-labeled target scenes from clip labels alone.
4. w's frame probabilities, gated by the clip label, become soft pseudo
   labels on which f retrains.
5. The loop alternates retraining w (clip labels plus distillation from the
   current f) and f (fresh pseudo labels) at the retrain learning rate until
   the validation score stops improving.

Source-domain and initial target phases can attach a domain discriminator
behind a gradient reversal layer so the convolutional features stop encoding
the domain; inside the loop the adversarial term is off by default.

Target frame labels stay locked throughout; only clip labels are read.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .dataset import SampleRecord, TSDSample, Catalog, corrupt_labels
from .evaluation import (
    DEFAULT_DECODE,
    DecodeConfig,
    EvalReport,
    decode_events,
    evaluate,
)
from .features import DEFAULT_MEL, MelConfig, MelSpectrogram, mel_for_file
from .losses import (
    adversarial_objective,
    clip_bce,
    domain_loss,
    frame_bce,
    kd_loss,
    pseudo_loss,
)
from .models import (
    ConditionalNet,
    DomainDiscriminator,
    StudentModel,
    conditional_embed,
    detect_frames,
    grad_reverse,
    save_checkpoint,
)

# Discriminator learning-rate scale relative to the student. Keeping the
# discriminator slower than the features it chases preserves a nonzero
# domain loss, which the reversal layer needs to exert alignment pressure.
DISC_LR_SCALE = 0.25


@dataclass
class TrainConfig:
    epochs: int = 100
    retrain_epochs: int = 20
    # The first pseudo fit starts from a source-domain f and must catch up
    # to its teacher before the loop refines; in-loop refits resume from an
    # already-adapted state and need fewer passes. None means retrain_epochs.
    pseudo_epochs: int | None = None
    conditional_epochs: int = 30
    lr_initial: float = 1e-3
    lr_retrain: float = 1e-4
    batch_size: int = 16
    kd_weight: float = 1.0  # Eq-4-style 1:1 sum by default
    lambda_d: float = 0.2
    adversarial: bool = True
    adversarial_in_loop: bool = False
    max_iterations: int = 3
    early_stop: bool = True
    min_delta: float = 1e-3  # improvement below this counts as none
    patience_metric: str = "event_f"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.retrain_epochs < 1:
            raise ValueError("epoch counts must be at least 1")
        if self.pseudo_epochs is not None and self.pseudo_epochs < 1:
            raise ValueError("epoch counts must be at least 1")
        if self.lr_initial <= 0 or self.lr_retrain <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience_metric not in ("event_f", "segment_f"):
            raise ValueError(
                f"patience metric must be event_f or segment_f, "
                f"got {self.patience_metric!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        stray = set(d) - set(cls.__dataclass_fields__)
        if stray:
            raise ValueError(f"unknown training config keys: {sorted(stray)}")
        return cls(**d)

    def pseudo_fit_epochs(self) -> int:
        return (self.retrain_epochs if self.pseudo_epochs is None
                else self.pseudo_epochs)


@dataclass
class PhaseResult:
    name: str
    epochs: int
    lr: float
    task_losses: list[float] = field(default_factory=list)
    kd_losses: list[float] = field(default_factory=list)
    domain_losses: list[float] = field(default_factory=list)
    objectives: list[float] = field(default_factory=list)
    seconds: float = 0.0
    val_report: EvalReport | None = None

    @property
    def final_loss(self) -> float:
        return self.task_losses[-1] if self.task_losses else float("nan")


@dataclass
class IterationRecord:
    iteration: int
    f_event_f: float
    f_segment_f: float
    w_event_f: float
    w_segment_f: float

    def metric(self, which: str, model: str = "f") -> float:
        return getattr(self, f"{model}_{which}")


def _phase_seed(base: int, name: str) -> int:
    return (base * 1000003 + zlib.crc32(name.encode())) % (2 ** 31 - 1)


# ---------------------------------------------------------------------------
# Tensor preparation
# ---------------------------------------------------------------------------

class EmbeddingCache:
    """Memoizes reference embeddings keyed by the reference features."""

    def __init__(self, conditional: ConditionalNet):
        self.conditional = conditional
        self._memo: dict[str, np.ndarray] = {}

    def get(self, reference: MelSpectrogram) -> np.ndarray:
        key = hashlib.sha1(reference.values.tobytes()).hexdigest()
        if key not in self._memo:
            self._memo[key] = conditional_embed(self.conditional, reference)
        return self._memo[key]


@dataclass
class _Group:
    x: torch.Tensor              # (N, T, F)
    e: torch.Tensor              # (N, embed)
    y_clip: torch.Tensor         # (N,)
    y_frame: torch.Tensor | None
    y_soft: torch.Tensor | None
    y_kd: torch.Tensor | None    # frozen teacher features (N, T, kd_dim)
    uids: list[str]


def _prepare_groups(samples: list[TSDSample], embed_cache: EmbeddingCache,
                    need_frames: bool = False,
                    soft_targets: dict[str, np.ndarray] | None = None,
                    teacher: StudentModel | None = None) -> list[_Group]:
    """Stack samples into per-frame-count tensor groups.

    Reading frame labels here trips the supervision guard on locked samples,
    which is exactly the intended failure mode if a weak phase asks for them.
    A teacher, when given, is frozen: its distillation targets are computed
    once here and detached.
    """
    by_t: dict[int, list[TSDSample]] = {}
    for s in samples:
        by_t.setdefault(s.mixture.n_frames, []).append(s)

    groups = []
    for t in sorted(by_t):
        ss = by_t[t]
        x = torch.from_numpy(np.stack([s.mixture.values for s in ss]))
        e = torch.from_numpy(np.stack([embed_cache.get(s.reference) for s in ss]))
        y_clip = torch.tensor([float(s.clip_label) for s in ss])
        y_frame = None
        if need_frames:
            missing = [s.uid for s in ss if not s.has_frame_labels]
            if missing:
                raise ValueError(f"samples lack frame labels: {missing[:3]}")
            y_frame = torch.from_numpy(
                np.stack([s.frame_labels.values for s in ss]).astype(np.float32))
        y_soft = None
        if soft_targets is not None:
            y_soft = torch.from_numpy(
                np.stack([soft_targets[s.uid] for s in ss]).astype(np.float32))
        y_kd = None
        if teacher is not None:
            was_training = teacher.training
            teacher.eval()
            with torch.no_grad():
                y_kd = teacher(x, e)["kd_embed"].detach()
            teacher.train(was_training)
        groups.append(_Group(x, e, y_clip, y_frame, y_soft, y_kd,
                             [s.uid for s in ss]))
    return groups


def _iter_batches(groups: list[_Group], batch_size: int, rng: np.random.Generator):
    chunks = []
    for g in groups:
        idx = rng.permutation(len(g.uids))
        for start in range(0, len(idx), batch_size):
            chunks.append((g, idx[start:start + batch_size]))
    rng.shuffle(chunks)
    for g, idx in chunks:
        yield _Group(
            g.x[idx], g.e[idx], g.y_clip[idx],
            None if g.y_frame is None else g.y_frame[idx],
            None if g.y_soft is None else g.y_soft[idx],
            None if g.y_kd is None else g.y_kd[idx],
            [g.uids[i] for i in idx])


def _pool_from_samples(samples: list[TSDSample] | None) -> list[torch.Tensor] | None:
    """Mixture tensors for adversarial domain batches; labels never touched."""
    if not samples:
        return None
    by_t: dict[int, list[np.ndarray]] = {}
    for s in samples:
        by_t.setdefault(s.mixture.n_frames, []).append(s.mixture.values)
    return [torch.from_numpy(np.stack(vs)) for _, vs in sorted(by_t.items())]


def _sample_pool(pool: list[torch.Tensor], k: int,
                 rng: np.random.Generator) -> torch.Tensor:
    sizes = np.array([len(x) for x in pool], dtype=float)
    g = int(rng.choice(len(pool), p=sizes / sizes.sum()))
    idx = rng.integers(0, len(pool[g]), size=k)
    return pool[g][idx]


def _match_frames(x: torch.Tensor, t: int) -> torch.Tensor:
    """Crop or edge-pad a (batch, time, mel) tensor to exactly t frames."""
    if x.shape[1] == t:
        return x
    if x.shape[1] > t:
        off = (x.shape[1] - t) // 2
        return x[:, off:off + t]
    pad = x[:, -1:].expand(-1, t - x.shape[1], -1)
    return torch.cat([x, pad], dim=1)


# ---------------------------------------------------------------------------
# Phase driver
# ---------------------------------------------------------------------------

def _run_phase(name: str, student: StudentModel, groups: list[_Group],
               cfg: TrainConfig, lr: float, mode: str, epochs: int,
               task_domain: int,
               disc: DomainDiscriminator | None = None,
               opposite_pool: list[torch.Tensor] | None = None,
               adversarial: bool = True) -> PhaseResult:
    """One training phase of a student.

    mode: 'frame' (strong labels), 'clip' (weak labels, plus distillation
    when the groups carry teacher targets), or 'pseudo' (soft frame targets).
    The discriminator, when active, sees this phase's batches plus batches
    drawn from the opposite-domain pool and is updated jointly: the reversal
    layer flips the feature gradient, so one backward pass trains the
    discriminator down the domain loss and the features up it.
    """
    if mode not in ("frame", "clip", "pseudo"):
        raise ValueError(f"unknown phase mode {mode!r}")
    seed = _phase_seed(cfg.seed, name)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    use_adv = (adversarial and disc is not None
               and opposite_pool is not None and len(opposite_pool) > 0)
    params = [{"params": list(student.parameters())}]
    if use_adv:
        # A slower discriminator stays imperfect, so the reversed gradient
        # keeps pushing the features instead of vanishing once the domain
        # loss saturates at zero.
        params.append({"params": list(disc.parameters()),
                       "lr": lr * DISC_LR_SCALE})
    opt = torch.optim.Adam(params, lr=lr)

    student.train()
    if use_adv:
        disc.train()

    result = PhaseResult(name=name, epochs=epochs, lr=lr)
    start = time.time()
    for _ in range(epochs):
        task_sum = kd_sum = dom_sum = obj_sum = 0.0
        track_kd = False
        n_batches = 0
        for batch in _iter_batches(groups, cfg.batch_size, rng):
            dom_val = 0.0
            if use_adv:
                # One forward over a balanced two-domain batch: the batch
                # statistics then carry the between-domain contrast, so the
                # discriminator fights the real cue rather than features
                # that per-domain normalization already washed out.
                n_task = len(batch.uids)
                x_opp = _match_frames(
                    _sample_pool(opposite_pool, n_task, rng),
                    batch.x.shape[1])
                conv_all = student.encode(torch.cat([batch.x, x_opp], dim=0))
                out = student.head(conv_all[:n_task], batch.e)
                ids = torch.cat([
                    torch.full((n_task,), task_domain),
                    torch.full((n_task,), 1 - task_domain)])
                d_loss = domain_loss(
                    disc(grad_reverse(conv_all, cfg.lambda_d)), ids)
                dom_val = float(d_loss.detach())
            else:
                out = student(batch.x, batch.e)

            if mode == "frame":
                task = frame_bce(out["frame_probs"], batch.y_frame)
            elif mode == "pseudo":
                task = pseudo_loss(out["frame_probs"], batch.y_soft)
            else:
                task = clip_bce(out["clip_prob"], batch.y_clip)
                if batch.y_kd is not None:
                    kd = kd_loss(out["kd_embed"], batch.y_kd)
                    task = task + cfg.kd_weight * kd
                    kd_sum += float(kd.detach())
                    track_kd = True

            total = task + d_loss if use_adv else task

            opt.zero_grad()
            total.backward()
            opt.step()

            task_val = float(task.detach())
            task_sum += task_val
            dom_sum += dom_val
            obj_sum += task_val - cfg.lambda_d * dom_val
            n_batches += 1

        n = max(1, n_batches)
        result.task_losses.append(task_sum / n)
        if track_kd:
            result.kd_losses.append(kd_sum / n)
        result.domain_losses.append(dom_sum / n)
        result.objectives.append(obj_sum / n)

    result.seconds = time.time() - start
    student.eval()
    return result


# ---------------------------------------------------------------------------
# Conditional network
# ---------------------------------------------------------------------------

def train_conditional(catalog: Catalog, cfg: TrainConfig,
                      mel_cfg: MelConfig = DEFAULT_MEL,
                      feature_memo: dict | None = None) -> tuple[ConditionalNet, dict]:
    """Train the reference encoder as a classifier over the catalog classes.

    One clip per class is held out for validation accuracy. The encoder is
    frozen after this; all later phases read embeddings through a cache.
    """
    memo = feature_memo if feature_memo is not None else {}
    feats, labels = [], []
    for ci, cls in enumerate(catalog.classes):
        clips = catalog.clean_clips[cls]
        if not clips:
            raise ValueError(f"class {cls!r} has no clean clips")
        for path in clips:
            if path not in memo:
                memo[path] = mel_for_file(path, mel_cfg)
            feats.append(memo[path].values)
            labels.append(ci)

    seed = _phase_seed(cfg.seed, "conditional")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    by_t: dict[int, list[int]] = {}
    for i, v in enumerate(feats):
        by_t.setdefault(v.shape[0], []).append(i)
    val_idx = set()
    for cls in range(len(catalog.classes)):
        members = [i for i in range(len(labels)) if labels[i] == cls]
        val_idx.add(members[int(rng.integers(len(members)))])

    model = ConditionalNet(n_classes=len(catalog.classes))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_initial)
    ce = torch.nn.CrossEntropyLoss()
    history = []
    for _ in range(cfg.conditional_epochs):
        model.train()
        epoch_loss, n_b = 0.0, 0
        for t in sorted(by_t):
            idxs = [i for i in by_t[t] if i not in val_idx]
            order = rng.permutation(len(idxs))
            for start in range(0, len(order), cfg.batch_size):
                pick = [idxs[j] for j in order[start:start + cfg.batch_size]]
                x = torch.from_numpy(np.stack([feats[i] for i in pick]))
                y = torch.tensor([labels[i] for i in pick])
                loss = ce(model(x)["logits"], y)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_loss += float(loss.detach())
                n_b += 1
        history.append(epoch_loss / max(1, n_b))

    model.eval()
    correct = 0
    for i in sorted(val_idx):
        with torch.no_grad():
            logits = model(torch.from_numpy(feats[i]).unsqueeze(0))["logits"]
        correct += int(logits.argmax(dim=-1).item() == labels[i])
    val_acc = correct / max(1, len(val_idx))
    return model, {"val_acc": val_acc, "loss_history": history}


# ---------------------------------------------------------------------------
# Named pipeline phases
# ---------------------------------------------------------------------------

def train_f_on_source(f_student: StudentModel, source: list[TSDSample],
                      cfg: TrainConfig, embed_cache: EmbeddingCache,
                      disc: DomainDiscriminator | None = None,
                      target_pool: list[TSDSample] | None = None,
                      name: str = "f_source") -> PhaseResult:
    """Step 1: frame supervision on the source domain, optionally with the
    domain-adversarial term against a pool of target mixtures."""
    groups = _prepare_groups(source, embed_cache, need_frames=True)
    return _run_phase(name, f_student, groups, cfg, cfg.lr_initial, "frame",
                      cfg.epochs, task_domain=0, disc=disc,
                      opposite_pool=_pool_from_samples(target_pool),
                      adversarial=cfg.adversarial)


def train_w_on_source_with_kd(w_student: StudentModel,
                              teacher_f: StudentModel | None,
                              source: list[TSDSample], cfg: TrainConfig,
                              embed_cache: EmbeddingCache,
                              disc: DomainDiscriminator | None = None,
                              target_pool: list[TSDSample] | None = None,
                              name: str = "w_source_kd") -> PhaseResult:
    """Step 2: clip supervision on the source domain plus distillation from
    the frozen frame student. The teacher receives no updates."""
    if teacher_f is None:
        raise ValueError("distillation needs a trained f_student teacher")
    groups = _prepare_groups(source, embed_cache, need_frames=False,
                             teacher=teacher_f)
    return _run_phase(name, w_student, groups, cfg, cfg.lr_initial, "clip",
                      cfg.epochs, task_domain=0, disc=disc,
                      opposite_pool=_pool_from_samples(target_pool),
                      adversarial=cfg.adversarial)


def retrain_w_on_target(w_student: StudentModel, target: list[TSDSample],
                        cfg: TrainConfig, embed_cache: EmbeddingCache,
                        disc: DomainDiscriminator | None = None,
                        source_pool: list[TSDSample] | None = None,
                        teacher_f: StudentModel | None = None,
                        name: str = "w_target") -> PhaseResult:
    """Step 3: clip supervision on the weakly-labeled target domain at the
    retrain learning rate. Inside the iterative loop the same phase runs
    with the current f as teacher (pass teacher_f)."""
    groups = _prepare_groups(target, embed_cache, need_frames=False,
                             teacher=teacher_f)
    return _run_phase(name, w_student, groups, cfg, cfg.lr_retrain, "clip",
                      cfg.retrain_epochs, task_domain=1, disc=disc,
                      opposite_pool=_pool_from_samples(source_pool),
                      adversarial=cfg.adversarial)


def generate_pseudo_labels(w_student: StudentModel, samples: list[TSDSample],
                           embed_cache: EmbeddingCache,
                           gate_by_clip_label: bool = True) -> dict[str, np.ndarray]:
    """Soft frame targets from the weak student's probabilities, one vector
    per sample uid, values in (0, 1), no thresholding.

    Negative clips (clip label 0) are gated to all-zero targets; the clip
    label is weak supervision, so no frame labels are touched.
    """
    pseudo = {}
    for s in samples:
        probs = detect_frames(w_student, s.mixture, embed_cache.get(s.reference))
        if gate_by_clip_label:
            probs = probs * float(s.clip_label)
        pseudo[s.uid] = probs.astype(np.float32)
    return pseudo


def retrain_f_on_pseudo(f_student: StudentModel, target: list[TSDSample],
                        pseudo: dict[str, np.ndarray], cfg: TrainConfig,
                        embed_cache: EmbeddingCache,
                        disc: DomainDiscriminator | None = None,
                        source_pool: list[TSDSample] | None = None,
                        name: str = "f_pseudo",
                        epochs: int | None = None) -> PhaseResult:
    """Step 4: frame supervision against the weak student's soft pseudo
    labels at the retrain learning rate. `epochs` overrides
    cfg.retrain_epochs (the first fit uses cfg.pseudo_fit_epochs())."""
    if pseudo is None:
        raise ValueError("pseudo targets missing; generate them from w_student")
    missing = [s.uid for s in target if s.uid not in pseudo]
    if missing:
        raise ValueError(f"pseudo targets missing for samples: {missing[:3]}")
    groups = _prepare_groups(target, embed_cache, soft_targets=pseudo)
    return _run_phase(name, f_student, groups, cfg, cfg.lr_retrain, "pseudo",
                      cfg.retrain_epochs if epochs is None else epochs,
                      task_domain=1, disc=disc,
                      opposite_pool=_pool_from_samples(source_pool),
                      adversarial=cfg.adversarial)


# ---------------------------------------------------------------------------
# Evaluation helper
# ---------------------------------------------------------------------------

def evaluate_student(student: StudentModel, records: list[SampleRecord],
                     embed_cache: EmbeddingCache,
                     mel_cfg: MelConfig = DEFAULT_MEL,
                     decode: DecodeConfig = DEFAULT_DECODE,
                     feature_memo: dict | None = None,
                     segment_length: float = 1.0, collar: float = 0.2,
                     offset_frac: float = 0.2) -> EvalReport:
    """Decode and score a student on manifest records carrying events."""
    memo = feature_memo if feature_memo is not None else {}

    def feats(path):
        if path not in memo:
            memo[path] = mel_for_file(path, mel_cfg)
        return memo[path]

    references, estimates = [], []
    for rec in records:
        if rec.events is None:
            raise ValueError(f"record for {rec.mixture_path} has no events")
        mixture = feats(rec.mixture_path)
        emb = embed_cache.get(feats(rec.reference_path))
        probs = detect_frames(student, mixture, emb)
        estimates.append(decode_events(probs, rec.target_class, decode, mel_cfg))
        ref = [ev for ev in rec.events if ev[2] == rec.target_class]
        references.append((ref, rec.target_class, mixture.clip_duration))
    return evaluate(references, estimates, segment_length, collar, offset_frac)


# ---------------------------------------------------------------------------
# Iterative loop (Algorithm step 5) and the full pipeline
# ---------------------------------------------------------------------------

def iterate_two_students(f_student: StudentModel, w_student: StudentModel,
                         target_weak: list[TSDSample],
                         target_val: list[SampleRecord],
                         cfg: TrainConfig, embed_cache: EmbeddingCache,
                         disc_f: DomainDiscriminator | None = None,
                         disc_w: DomainDiscriminator | None = None,
                         source_pool: list[TSDSample] | None = None,
                         feature_memo: dict | None = None,
                         ablate_kd: bool = False,
                         decode: DecodeConfig = DEFAULT_DECODE):
    """Alternate retraining of w (clip labels plus distillation from the
    current f) and f (pseudo labels from the refreshed w) on the target
    domain, stopping when f's validation metric fails to improve by more
    than min_delta (or after max_iterations passes; early_stop=False always
    runs them all). The adversarial term is off inside the loop unless
    cfg.adversarial_in_loop is set.

    Returns (phases, iteration records starting at index 0, best iteration,
    final pseudo labels, stopped_early). On early stop both students revert
    to their best states.
    """
    memo = feature_memo if feature_memo is not None else {}
    adv_cfg = copy.copy(cfg)
    adv_cfg.adversarial = cfg.adversarial and cfg.adversarial_in_loop

    def snapshot(rec_iter: int) -> IterationRecord:
        f_rep = evaluate_student(f_student, target_val, embed_cache,
                                 decode=decode, feature_memo=memo)
        w_rep = evaluate_student(w_student, target_val, embed_cache,
                                 decode=decode, feature_memo=memo)
        return IterationRecord(rec_iter, f_rep.event_f, f_rep.segment_f,
                               w_rep.event_f, w_rep.segment_f)

    phases: list[PhaseResult] = []
    iterations = [snapshot(0)]
    best = iterations[0].metric(cfg.patience_metric)
    best_iteration = 0
    best_f = copy.deepcopy(f_student.state_dict())
    best_w = copy.deepcopy(w_student.state_dict())
    stopped_early = False

    for k in range(1, cfg.max_iterations + 1):
        phases.append(retrain_w_on_target(
            w_student, target_weak, adv_cfg, embed_cache, disc=disc_w,
            source_pool=source_pool,
            teacher_f=None if ablate_kd else f_student, name=f"w_iter{k}"))
        pseudo = generate_pseudo_labels(w_student, target_weak, embed_cache)
        phases.append(retrain_f_on_pseudo(
            f_student, target_weak, pseudo, adv_cfg, embed_cache, disc=disc_f,
            source_pool=source_pool, name=f"f_iter{k}"))

        iterations.append(snapshot(k))
        score = iterations[-1].metric(cfg.patience_metric)
        if score > best + cfg.min_delta:
            best = score
            best_iteration = k
            best_f = copy.deepcopy(f_student.state_dict())
            best_w = copy.deepcopy(w_student.state_dict())
        elif cfg.early_stop:
            stopped_early = True
            break
        elif score > best:
            best, best_iteration = score, k
            best_f = copy.deepcopy(f_student.state_dict())
            best_w = copy.deepcopy(w_student.state_dict())

    # model selection: both students end at their best recorded pass
    f_student.load_state_dict(best_f)
    w_student.load_state_dict(best_w)
    f_student.eval()
    w_student.eval()
    pseudo = generate_pseudo_labels(w_student, target_weak, embed_cache)
    return phases, iterations, best_iteration, pseudo, stopped_early


@dataclass
class TwoStudentResult:
    conditional: ConditionalNet
    f_student: StudentModel
    w_student: StudentModel
    disc_f: DomainDiscriminator | None
    disc_w: DomainDiscriminator | None
    phases: list[PhaseResult]
    iterations: list[IterationRecord]
    best_iteration: int
    pseudo_labels: dict[str, np.ndarray]
    embed_cache: EmbeddingCache
    stopped_early: bool = False
    w_state_pre_loop: dict | None = None  # w right after the target retrain


def run_full_pipeline(source_train: list[TSDSample],
                      target_weak: list[TSDSample],
                      target_val: list[SampleRecord],
                      source_catalog: Catalog,
                      cfg: TrainConfig,
                      conditional: ConditionalNet | None = None,
                      feature_memo: dict | None = None,
                      ablate_kd: bool = False,
                      decode: DecodeConfig = DEFAULT_DECODE) -> TwoStudentResult:
    """All five steps of the mixed-supervision pipeline over both students."""
    memo = feature_memo if feature_memo is not None else {}
    if conditional is None:
        conditional, _ = train_conditional(source_catalog, cfg, feature_memo=memo)
    embed_cache = EmbeddingCache(conditional)

    torch.manual_seed(_phase_seed(cfg.seed, "init_students"))
    f_student = StudentModel(pooling="none")
    w_student = StudentModel(pooling="linsoft")
    disc_f = DomainDiscriminator() if cfg.adversarial else None
    disc_w = DomainDiscriminator() if cfg.adversarial else None

    phases = [train_f_on_source(f_student, source_train, cfg, embed_cache,
                                disc=disc_f, target_pool=target_weak)]
    if ablate_kd:
        groups = _prepare_groups(source_train, embed_cache)
        phases.append(_run_phase(
            "w_source_kd", w_student, groups, cfg, cfg.lr_initial, "clip",
            cfg.epochs, task_domain=0, disc=disc_w,
            opposite_pool=_pool_from_samples(target_weak),
            adversarial=cfg.adversarial))
    else:
        phases.append(train_w_on_source_with_kd(
            w_student, f_student, source_train, cfg, embed_cache,
            disc=disc_w, target_pool=target_weak))
    phases.append(retrain_w_on_target(w_student, target_weak, cfg,
                                      embed_cache, disc=disc_w,
                                      source_pool=source_train))
    w_state_pre_loop = copy.deepcopy(w_student.state_dict())
    pseudo = generate_pseudo_labels(w_student, target_weak, embed_cache)
    phases.append(retrain_f_on_pseudo(f_student, target_weak, pseudo, cfg,
                                      embed_cache, disc=disc_f,
                                      source_pool=source_train,
                                      epochs=cfg.pseudo_fit_epochs()))

    loop_phases, iterations, best_iteration, pseudo, stopped_early = \
        iterate_two_students(f_student, w_student, target_weak, target_val,
                             cfg, embed_cache, disc_f=disc_f, disc_w=disc_w,
                             source_pool=source_train, feature_memo=memo,
                             ablate_kd=ablate_kd, decode=decode)
    phases.extend(loop_phases)
    return TwoStudentResult(conditional, f_student, w_student, disc_f, disc_w,
                            phases, iterations, best_iteration, pseudo,
                            embed_cache, stopped_early, w_state_pre_loop)


PHASE_NAMES = ("f_source", "w_source_kd", "w_target", "f_pseudo")


def train_phase(phase: str, cfg: TrainConfig, embed_cache: EmbeddingCache,
                f_student: StudentModel | None = None,
                w_student: StudentModel | None = None,
                disc_f: DomainDiscriminator | None = None,
                disc_w: DomainDiscriminator | None = None,
                source_train: list[TSDSample] | None = None,
                target_weak: list[TSDSample] | None = None,
                pseudo: dict[str, np.ndarray] | None = None):
    """Dispatch one named pipeline phase; used by the command line.

    Returns (PhaseResult, pseudo labels or None). The w_target phase
    generates fresh pseudo labels from the just-trained weak student.
    """
    if phase not in PHASE_NAMES:
        raise ValueError(f"unknown phase {phase!r}, expected one of {PHASE_NAMES}")

    def need(value, what):
        if value is None:
            raise ValueError(f"phase {phase} requires {what}")
        return value

    if phase == "f_source":
        result = train_f_on_source(
            need(f_student, "f_student"), need(source_train, "source samples"),
            cfg, embed_cache, disc=disc_f, target_pool=target_weak)
        return result, None
    if phase == "w_source_kd":
        result = train_w_on_source_with_kd(
            need(w_student, "w_student"), need(f_student, "f_student teacher"),
            need(source_train, "source samples"), cfg, embed_cache,
            disc=disc_w, target_pool=target_weak)
        return result, None
    if phase == "w_target":
        result = retrain_w_on_target(
            need(w_student, "w_student"), need(target_weak, "target samples"),
            cfg, embed_cache, disc=disc_w, source_pool=source_train)
        new_pseudo = generate_pseudo_labels(w_student, target_weak, embed_cache)
        return result, new_pseudo
    result = retrain_f_on_pseudo(
        need(f_student, "f_student"), need(target_weak, "target samples"),
        need(pseudo, "pseudo labels"), cfg, embed_cache, disc=disc_f,
        source_pool=source_train, epochs=cfg.pseudo_fit_epochs())
    return result, None


# ---------------------------------------------------------------------------
# Baselines and experiments
# ---------------------------------------------------------------------------

def train_strong_baseline(samples: list[TSDSample], conditional: ConditionalNet,
                          cfg: TrainConfig, name: str = "strong_baseline"
                          ) -> tuple[StudentModel, EmbeddingCache, PhaseResult]:
    """Frame-supervised detector, no adversary, no distillation."""
    embed_cache = EmbeddingCache(conditional)
    torch.manual_seed(_phase_seed(cfg.seed, name + "_init"))
    model = StudentModel(pooling="none")
    groups = _prepare_groups(samples, embed_cache, need_frames=True)
    phase = _run_phase(name, model, groups, cfg, cfg.lr_initial, "frame",
                       cfg.epochs, task_domain=1, adversarial=False)
    return model, embed_cache, phase


def train_weak_baseline(samples: list[TSDSample], conditional: ConditionalNet,
                        cfg: TrainConfig, name: str = "weak_baseline"
                        ) -> tuple[StudentModel, EmbeddingCache, PhaseResult]:
    """Clip-supervised detector, no teacher, no adversary."""
    embed_cache = EmbeddingCache(conditional)
    torch.manual_seed(_phase_seed(cfg.seed, name + "_init"))
    model = StudentModel(pooling="linsoft")
    groups = _prepare_groups(samples, embed_cache, need_frames=False)
    phase = _run_phase(name, model, groups, cfg, cfg.lr_initial, "clip",
                       cfg.epochs, task_domain=1, adversarial=False)
    return model, embed_cache, phase


def _with_corrupt_labels(samples: list[TSDSample], rate: float,
                         seed: int) -> list[TSDSample]:
    out = []
    for i, s in enumerate(samples):
        labels = corrupt_labels(s.frame_labels, rate, seed + i)
        clip = int(labels.values.max()) if len(labels.values) else 0
        out.append(TSDSample(s.mixture, s.reference, s.target_class, clip,
                             s.domain, labels, uid=f"{s.uid}-r{rate}"))
    return out


def noise_robustness_experiment(samples: list[TSDSample],
                                val_records: list[SampleRecord],
                                conditional: ConditionalNet, cfg: TrainConfig,
                                rates: list[float] = (0.0, 0.2, 0.5),
                                feature_memo: dict | None = None) -> list[dict]:
    """Retrain the frame student under label corruption at several rates and
    score each model on clean-labeled validation clips. Rate 0 reproduces
    the clean baseline."""
    if not rates:
        raise ValueError("need at least one corruption rate")
    memo = feature_memo if feature_memo is not None else {}
    rows = []
    for rate in rates:
        corrupted = _with_corrupt_labels(samples, rate,
                                         _phase_seed(cfg.seed, f"noise{rate}"))
        model, embed_cache, _ = train_strong_baseline(
            corrupted, conditional, cfg, name="noise_rate")
        report = evaluate_student(model, val_records, embed_cache,
                                  feature_memo=memo)
        rows.append({"rate": rate, "segment_f": report.segment_f,
                     "event_f": report.event_f})
    return rows


def _unique_mixtures(samples) -> list[np.ndarray]:
    """Deduplicated mel arrays from TSDSamples, MelSpectrograms or arrays."""
    seen, out = set(), []
    for s in samples:
        if isinstance(s, TSDSample):
            values = s.mixture.values
        elif isinstance(s, MelSpectrogram):
            values = s.values
        else:
            values = np.asarray(s, dtype=np.float32)
        key = hashlib.sha1(values.tobytes()).hexdigest()
        if key not in seen:
            seen.add(key)
            out.append(values)
    return out


def discriminator_holdout_accuracy(student: StudentModel,
                                   disc: DomainDiscriminator,
                                   source, target) -> float:
    """Domain accuracy of an already-trained discriminator on features the
    pair never trained on. `source` and `target` may be TSDSamples,
    MelSpectrograms or raw (time, mel) arrays."""
    student.eval()
    disc.eval()
    correct = total = 0
    with torch.no_grad():
        for sample_set, dom in ((source, 0), (target, 1)):
            for values in _unique_mixtures(sample_set):
                z = student.encode(torch.from_numpy(values).unsqueeze(0))
                correct += int(int(disc(z).argmax(dim=-1)) == dom)
                total += 1
    if total == 0:
        raise ValueError("no mixtures to score the discriminator on")
    return correct / total


def train_domain_probe(student: StudentModel, source, target, seed: int = 0,
                       epochs: int = 12, holdout: float = 0.25) -> float:
    """Train a fresh discriminator on the student's frozen convolutional
    features and return its held-out domain accuracy. High accuracy means
    the features still encode the domain. `source` and `target` may be
    TSDSamples, MelSpectrograms or raw (time, mel) arrays."""
    student.eval()
    feats, ids = [], []
    for sample_set, dom in ((source, 0), (target, 1)):
        for values in _unique_mixtures(sample_set):
            with torch.no_grad():
                z = student.encode(torch.from_numpy(values).unsqueeze(0))
            feats.append(z[0])
            ids.append(dom)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(feats))
    n_test = max(1, int(round(holdout * len(feats))))
    test_idx, train_idx = order[:n_test], order[n_test:]

    torch.manual_seed(seed)
    probe = DomainDiscriminator()
    opt = torch.optim.Adam(probe.parameters(), lr=1e-3)
    y = torch.tensor(ids)
    probe.train()
    for _ in range(epochs):
        perm = rng.permutation(len(train_idx))
        for start in range(0, len(perm), 16):
            pick = train_idx[perm[start:start + 16]]
            z = torch.stack([feats[i] for i in pick])
            loss = domain_loss(probe(z), y[pick])
            opt.zero_grad()
            loss.backward()
            opt.step()

    probe.eval()
    with torch.no_grad():
        z = torch.stack([feats[i] for i in test_idx])
        pred = probe(z).argmax(dim=-1)
    return float((pred == y[test_idx]).float().mean())


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def write_iterations_csv(iterations: list[IterationRecord],
                         path: str | os.PathLike) -> None:
    """One row per (iteration, model): iteration, model, segment_f, event_f."""
    os.makedirs(os.path.dirname(os.path.abspath(os.fspath(path))), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "model", "segment_f", "event_f"])
        for rec in iterations:
            writer.writerow([rec.iteration, "f_student",
                             f"{rec.f_segment_f:.6f}", f"{rec.f_event_f:.6f}"])
            writer.writerow([rec.iteration, "w_student",
                             f"{rec.w_segment_f:.6f}", f"{rec.w_event_f:.6f}"])


def write_metrics_csv(rows: list[dict], path: str | os.PathLike,
                      append: bool = False) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(os.fspath(path))), exist_ok=True)
    if not rows:
        raise ValueError("no metric rows to write")
    fieldnames = list(rows[0])
    exists = os.path.exists(path)
    mode = "a" if append and exists else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        if mode == "w":
            writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                             for k, v in row.items()})


def save_run(result: TwoStudentResult, run_dir: str | os.PathLike,
             cfg: TrainConfig) -> None:
    """Persist checkpoints, per-iteration scores, and phase losses."""
    run_dir = os.fspath(run_dir)
    os.makedirs(run_dir, exist_ok=True)
    save_checkpoint(result.conditional, os.path.join(run_dir, "conditional.pt"))
    save_checkpoint(result.f_student, os.path.join(run_dir, "f_student.pt"))
    save_checkpoint(result.w_student, os.path.join(run_dir, "w_student.pt"))
    if result.disc_f is not None:
        save_checkpoint(result.disc_f, os.path.join(run_dir, "disc_f.pt"))
    if result.disc_w is not None:
        save_checkpoint(result.disc_w, os.path.join(run_dir, "disc_w.pt"))
    write_iterations_csv(result.iterations,
                         os.path.join(run_dir, "iterations.csv"))
    payload = {
        "config": cfg.to_dict(),
        "best_iteration": result.best_iteration,
        "stopped_early": result.stopped_early,
        "phases": [{"name": p.name, "epochs": p.epochs, "lr": p.lr,
                    "task_losses": p.task_losses,
                    "kd_losses": p.kd_losses,
                    "domain_losses": p.domain_losses,
                    "objectives": p.objectives,
                    "seconds": round(p.seconds, 3)} for p in result.phases],
    }
    with open(os.path.join(run_dir, "phases.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
