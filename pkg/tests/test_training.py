"""Training phase tests on a miniature dataset.

Frozen-parameter contracts are checked by hashing state dicts, the weak
supervision guard by running weak phases on locked samples, determinism by
training twice from the same seed.
"""

import copy
import hashlib

import numpy as np
import pytest
import torch

from tsdlearn.dataset import (
    Catalog,
    DatasetConfig,
    SupervisionLeakError,
    build_dataset,
    load_tsd_samples,
    read_manifest,
)
from tsdlearn.models import DomainDiscriminator, StudentModel
from tsdlearn.training import (
    EmbeddingCache,
    TrainConfig,
    _match_frames,
    discriminator_holdout_accuracy,
    evaluate_student,
    generate_pseudo_labels,
    iterate_two_students,
    noise_robustness_experiment,
    retrain_f_on_pseudo,
    retrain_w_on_target,
    train_conditional,
    train_domain_probe,
    train_f_on_source,
    train_strong_baseline,
    train_w_on_source_with_kd,
)

torch.set_num_threads(1)


def _hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    """Small two-domain dataset plus a trained conditional, shared per module."""
    out = str(tmp_path_factory.mktemp("mini") / "ds")
    paths = build_dataset(DatasetConfig(
        out_dir=out,
        classes=["tone_low", "tone_high", "chirp_up",
                 "noise_mid", "clicks", "tremolo"],
        source_classes=["tone_low", "tone_high", "chirp_up"],
        clips_per_class=3, clean_clip_duration=0.5, scene_duration=1.5,
        n_source_train=6, n_source_val=3, n_target_train=6,
        n_target_val=3, n_target_test=3,
        min_events_per_scene=2, max_events_per_scene=2,
        min_event_duration=0.4, max_event_duration=0.7, seed=13))
    memo = {}
    cfg = TrainConfig(epochs=2, retrain_epochs=2, conditional_epochs=3,
                      batch_size=4, seed=1)
    catalog = Catalog.load(paths.source_catalog)
    conditional, _ = train_conditional(catalog, cfg, feature_memo=memo)
    return {
        "cfg": cfg,
        "conditional": conditional,
        "cache": EmbeddingCache(conditional),
        "memo": memo,
        "source": load_tsd_samples(
            read_manifest(paths.manifests["source_train"]), feature_memo=memo),
        "target_weak": load_tsd_samples(
            read_manifest(paths.manifests["target_train_weak"]),
            feature_memo=memo, weak_only=True),
        "target_strong": load_tsd_samples(
            read_manifest(paths.manifests["target_train_strong"]),
            feature_memo=memo),
        "target_val": read_manifest(paths.manifests["target_val"]),
    }


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError, match="epoch counts"):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="learning rates"):
        TrainConfig(lr_retrain=0.0)
    with pytest.raises(ValueError, match="patience metric"):
        TrainConfig(patience_metric="loudness")
    with pytest.raises(ValueError, match="unknown training config keys"):
        TrainConfig.from_dict({"epochs": 2, "warp_speed": 9})
    roundtrip = TrainConfig.from_dict(TrainConfig(epochs=5).to_dict())
    assert roundtrip.epochs == 5


def test_match_frames_crop_and_pad():
    x = torch.arange(24, dtype=torch.float32).reshape(1, 6, 4)
    assert _match_frames(x, 6) is x
    cropped = _match_frames(x, 4)
    assert cropped.shape == (1, 4, 4)
    assert torch.equal(cropped[0, 0], x[0, 1])  # centre crop
    padded = _match_frames(x, 8)
    assert padded.shape == (1, 8, 4)
    assert torch.equal(padded[0, -1], x[0, -1])  # edge repeat


# ---------------------------------------------------------------------------
# Phase contracts
# ---------------------------------------------------------------------------

def test_frame_phase_needs_frame_labels(mini):
    f = StudentModel(pooling="none")
    # weak-only samples carry no frame labels at all
    with pytest.raises(ValueError, match="lack frame labels"):
        train_f_on_source(f, mini["target_weak"], mini["cfg"], mini["cache"])
    # locked samples carry them but refuse to hand them out
    locked = [copy.copy(s) for s in mini["target_strong"]]
    for s in locked:
        s.lock_frame_labels()
    with pytest.raises(SupervisionLeakError):
        train_f_on_source(f, locked, mini["cfg"], mini["cache"])


def test_weak_phase_never_reads_frame_labels(mini):
    # locked samples raise on any frame-label access, so finishing proves
    # the weak path stayed weak
    w = StudentModel(pooling="linsoft")
    result = retrain_w_on_target(w, mini["target_weak"], mini["cfg"],
                                 mini["cache"])
    assert len(result.task_losses) == mini["cfg"].retrain_epochs
    assert result.lr == mini["cfg"].lr_retrain == 1e-4


def test_kd_teacher_frozen_and_kd_tracked(mini):
    torch.manual_seed(0)
    f = StudentModel(pooling="none")
    train_f_on_source(f, mini["source"], mini["cfg"], mini["cache"])
    before = _hash(f)
    w = StudentModel(pooling="linsoft")
    result = train_w_on_source_with_kd(w, f, mini["source"], mini["cfg"],
                                       mini["cache"])
    assert _hash(f) == before
    assert len(result.kd_losses) == mini["cfg"].epochs
    with pytest.raises(ValueError, match="teacher"):
        train_w_on_source_with_kd(w, None, mini["source"], mini["cfg"],
                                  mini["cache"])


def test_conditional_frozen_through_phases(mini):
    before = _hash(mini["conditional"])
    f = StudentModel(pooling="none")
    train_f_on_source(f, mini["source"], mini["cfg"], mini["cache"])
    assert _hash(mini["conditional"]) == before


def test_adversarial_off_leaves_disc_untouched(mini):
    cfg = copy.copy(mini["cfg"])
    cfg.adversarial = False
    disc = DomainDiscriminator()
    before = _hash(disc)
    f = StudentModel(pooling="none")
    train_f_on_source(f, mini["source"], cfg, mini["cache"], disc=disc,
                      target_pool=mini["target_weak"])
    assert _hash(disc) == before


def test_adversarial_on_trains_disc_and_logs_domain_loss(mini):
    disc = DomainDiscriminator()
    before = _hash(disc)
    f = StudentModel(pooling="none")
    result = train_f_on_source(f, mini["source"], mini["cfg"], mini["cache"],
                               disc=disc, target_pool=mini["target_weak"])
    assert _hash(disc) != before
    assert all(v > 0 for v in result.domain_losses)
    acc = discriminator_holdout_accuracy(
        f, disc, mini["source"], mini["target_weak"])
    assert 0.0 <= acc <= 1.0


def test_seeded_phase_is_deterministic(mini):
    states = []
    for _ in range(2):
        torch.manual_seed(7)
        f = StudentModel(pooling="none")
        train_f_on_source(f, mini["source"], mini["cfg"], mini["cache"])
        states.append(_hash(f))
    assert states[0] == states[1]


# ---------------------------------------------------------------------------
# Pseudo labels
# ---------------------------------------------------------------------------

def test_generate_pseudo_labels_contract(mini):
    w = StudentModel(pooling="linsoft")
    retrain_w_on_target(w, mini["target_weak"], mini["cfg"], mini["cache"])
    pseudo = generate_pseudo_labels(w, mini["target_weak"], mini["cache"])
    assert set(pseudo) == {s.uid for s in mini["target_weak"]}
    for s in mini["target_weak"]:
        probs = pseudo[s.uid]
        assert probs.shape == (s.mixture.n_frames,)
        assert np.all(probs >= 0.0) and np.all(probs <= 1.0)
        if s.clip_label == 0:
            assert np.all(probs == 0.0)  # gated by the clip label


def test_retrain_f_on_pseudo_requires_targets(mini):
    f = StudentModel(pooling="none")
    with pytest.raises(ValueError, match="pseudo targets missing"):
        retrain_f_on_pseudo(f, mini["target_weak"], None, mini["cfg"],
                            mini["cache"])
    with pytest.raises(ValueError, match="missing for samples"):
        retrain_f_on_pseudo(f, mini["target_weak"], {}, mini["cfg"],
                            mini["cache"])


def test_w_untouched_during_pseudo_retrain(mini):
    w = StudentModel(pooling="linsoft")
    retrain_w_on_target(w, mini["target_weak"], mini["cfg"], mini["cache"])
    pseudo = generate_pseudo_labels(w, mini["target_weak"], mini["cache"])
    before = _hash(w)
    f = StudentModel(pooling="none")
    retrain_f_on_pseudo(f, mini["target_weak"], pseudo, mini["cfg"],
                        mini["cache"])
    assert _hash(w) == before


# ---------------------------------------------------------------------------
# Iterative loop
# ---------------------------------------------------------------------------

def test_iterate_single_pass(mini):
    cfg = copy.copy(mini["cfg"])
    cfg.max_iterations = 1
    cfg.early_stop = False
    f = StudentModel(pooling="none")
    w = StudentModel(pooling="linsoft")
    phases, iterations, best, pseudo, stopped = iterate_two_students(
        f, w, mini["target_weak"], mini["target_val"], cfg, mini["cache"],
        feature_memo=mini["memo"])
    assert [p.name for p in phases] == ["w_iter1", "f_iter1"]
    assert [it.iteration for it in iterations] == [0, 1]
    assert not stopped
    assert best in (0, 1)
    assert set(pseudo) == {s.uid for s in mini["target_weak"]}


def test_iterate_early_stop_reverts_to_best(mini):
    cfg = copy.copy(mini["cfg"])
    cfg.max_iterations = 3
    cfg.early_stop = True
    cfg.min_delta = 10.0  # no score can improve by this much, stop at once
    f = StudentModel(pooling="none")
    w = StudentModel(pooling="linsoft")
    f_init = _hash(f)
    phases, iterations, best, _, stopped = iterate_two_students(
        f, w, mini["target_weak"], mini["target_val"], cfg, mini["cache"],
        feature_memo=mini["memo"])
    assert stopped
    assert best == 0
    assert len(iterations) == 2  # baseline snapshot plus the failed pass
    assert _hash(f) == f_init  # reverted to the pre-loop state


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def test_noise_experiment_rate_zero_matches_clean(mini):
    cfg = mini["cfg"]
    rows = noise_robustness_experiment(
        mini["target_strong"], mini["target_val"], mini["conditional"], cfg,
        rates=[0.0, 0.5], feature_memo=mini["memo"])
    assert [r["rate"] for r in rows] == [0.0, 0.5]
    model, cache, _ = train_strong_baseline(
        mini["target_strong"], mini["conditional"], cfg, name="noise_rate")
    clean = evaluate_student(model, mini["target_val"], cache,
                             feature_memo=mini["memo"])
    assert rows[0]["event_f"] == pytest.approx(clean.event_f, abs=1e-9)
    with pytest.raises(ValueError, match="corruption rate"):
        noise_robustness_experiment(
            mini["target_strong"], mini["target_val"], mini["conditional"],
            cfg, rates=[], feature_memo=mini["memo"])


def test_domain_probe_separates_disjoint_features(mini):
    # arrays with a large constant offset are trivially separable
    rng = np.random.default_rng(0)
    t, m = 16, 64
    src = [rng.standard_normal((t, m)).astype(np.float32) for _ in range(12)]
    tgt = [(rng.standard_normal((t, m)) + 6.0).astype(np.float32)
           for _ in range(12)]
    torch.manual_seed(0)
    student = StudentModel(pooling="none")
    acc = train_domain_probe(student, src, tgt, seed=0, epochs=8)
    assert acc >= 0.8
