"""Command-line workflow tests.

A module-scoped tiny dataset and a run directory trained through all four
phases keep the cost to seconds per test; assertions target the artifact
contract: exit codes, config snapshots, CSV schemas, checkpoint layout and
determinism under a fixed seed.
"""

import csv
import json
import os
import shutil

import pytest
import torch

from tsdlearn.cli import main
from tsdlearn.dataset import TOY_CLASSES
from tsdlearn.models import load_checkpoint

torch.set_num_threads(1)

TINY_DS = [
    "--set", 'dataset.classes=["tone_low","tone_high","chirp_up",'
             '"noise_mid","clicks","tremolo"]',
    "--set", 'dataset.source_classes=["tone_low","tone_high","chirp_up"]',
    "--set", "dataset.clips_per_class=3",
    "--set", "dataset.clean_clip_duration=0.5",
    "--set", "dataset.scene_duration=1.5",
    "--set", "dataset.n_source_train=6",
    "--set", "dataset.n_source_val=3",
    "--set", "dataset.n_target_train=6",
    "--set", "dataset.n_target_val=3",
    "--set", "dataset.n_target_test=3",
    "--set", "dataset.min_events_per_scene=2",
    "--set", "dataset.max_events_per_scene=2",
    "--set", "dataset.min_event_duration=0.4",
    "--set", "dataset.max_event_duration=0.7",
]
TINY_TRAIN = ["--set", "train.conditional_epochs=3",
              "--set", "train.batch_size=4"]
MANIFESTS = ["source_train.jsonl", "source_val.jsonl",
             "target_train_weak.jsonl", "target_train_strong.jsonl",
             "target_val.jsonl", "target_test.jsonl"]


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["build-dataset", "--out-dir", str(out), "--seed", "5",
                 *TINY_DS]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(ds, tmp_path_factory):
    rd = tmp_path_factory.mktemp("cli") / "run"
    for phase in ("f_source", "w_source_kd", "w_target", "f_pseudo"):
        assert main(["train", "--phase", phase, "--data-dir", str(ds),
                     "--run-dir", str(rd), "--seed", "3", "--epochs", "2",
                     "--retrain-epochs", "1", "--pseudo-epochs", "1",
                     *TINY_TRAIN]) == 0
    return rd


def _fresh_run(run_dir, tmp_path, *names):
    """Run dir seeded with artifacts copied from the trained fixture."""
    rd = tmp_path / "run"
    rd.mkdir()
    for name in ("conditional.pt",) + names:
        shutil.copy(run_dir / name, rd / name)
    return rd


# ---------------------------------------------------------------------------
# build-dataset
# ---------------------------------------------------------------------------

def test_build_dataset_artifacts(ds):
    for name in MANIFESTS:
        assert (ds / name).exists()
    source = json.load(open(ds / "catalog_source.json"))["classes"]
    target = json.load(open(ds / "catalog_target.json"))["classes"]
    assert set(source) & set(target) == set()
    snapshot = json.load(open(ds / "config.json"))
    assert snapshot["command"] == "build-dataset"
    assert snapshot["effective"]["dataset.seed"] == 5


def test_build_dataset_rerun_identical(ds, tmp_path):
    other = tmp_path / "ds2"
    assert main(["build-dataset", "--out-dir", str(other), "--seed", "5",
                 *TINY_DS]) == 0
    for name in MANIFESTS:
        assert (ds / name).read_bytes() == (other / name).read_bytes()


def test_samples_per_scene(ds):
    """Each scene emits one positive line per present class plus half as
    many negatives: a 2-class scene yields 3 lines."""
    by_scene = {}
    with open(ds / "target_train_strong.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            by_scene.setdefault(rec["mixture_path"], []).append(rec)
    assert by_scene
    for recs in by_scene.values():
        pos = sum(r["clip_label"] for r in recs)
        assert len(recs) == pos + pos // 2


def test_build_dataset_rejects_non_disjoint_split(tmp_path):
    all_classes = json.dumps(list(TOY_CLASSES))
    assert main(["build-dataset", "--out-dir", str(tmp_path / "bad"),
                 "--set", f"dataset.source_classes={all_classes}"]) == 2


def test_unknown_config_key(tmp_path):
    assert main(["build-dataset", "--out-dir", str(tmp_path / "x"),
                 "--set", "dataset.bogus=1"]) == 2


def test_missing_config_file(tmp_path):
    assert main(["build-dataset", "--out-dir", str(tmp_path / "x"),
                 "--config", str(tmp_path / "nope.json")]) == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_needs_data_dir():
    assert main(["train", "--phase", "f_source"]) == 2


def test_train_artifacts(run_dir):
    for name in ("conditional.pt", "f_student.pt", "w_student.pt",
                 "disc_f.pt", "disc_w.pt", "pseudo_labels.npz",
                 "config.json", "metrics.csv"):
        assert (run_dir / name).exists()
    rows = _read_csv(run_dir / "metrics.csv")
    phases = {r["phase"] for r in rows}
    assert phases >= {"f_source", "w_source_kd", "w_target", "f_pseudo"}
    assert "domain_loss" in rows[0]
    final = [r for r in rows if r["phase"] == "f_source"][-1]
    assert final["val_segment_f"] != ""


def test_phase_order_enforced(ds, run_dir, tmp_path):
    rd = _fresh_run(run_dir, tmp_path)
    assert main(["train", "--phase", "w_target", "--data-dir", str(ds),
                 "--run-dir", str(rd), "--epochs", "1", *TINY_TRAIN]) == 3


def test_f_pseudo_needs_pseudo_labels(ds, run_dir, tmp_path):
    rd = _fresh_run(run_dir, tmp_path, "f_student.pt")
    assert main(["train", "--phase", "f_pseudo", "--data-dir", str(ds),
                 "--run-dir", str(rd), "--retrain-epochs", "1",
                 *TINY_TRAIN]) == 3


def test_no_adversarial_drops_domain_column(ds, run_dir, tmp_path):
    rd = _fresh_run(run_dir, tmp_path)
    assert main(["train", "--phase", "f_source", "--data-dir", str(ds),
                 "--run-dir", str(rd), "--epochs", "1", "--no-adversarial",
                 *TINY_TRAIN]) == 0
    rows = _read_csv(rd / "metrics.csv")
    assert all("domain_loss" not in row for row in rows)
    assert not (rd / "disc_f.pt").exists()


def test_train_deterministic_under_seed(ds, run_dir, tmp_path):
    states = []
    for sub in ("a", "b"):
        rd = _fresh_run(run_dir, tmp_path / sub)
        assert main(["train", "--phase", "f_source", "--data-dir", str(ds),
                     "--run-dir", str(rd), "--epochs", "1", "--seed", "7",
                     *TINY_TRAIN]) == 0
        states.append(load_checkpoint(rd / "f_student.pt")[0].state_dict())
    assert states[0].keys() == states[1].keys()
    for key in states[0]:
        assert torch.equal(states[0][key], states[1][key])


# ---------------------------------------------------------------------------
# iterate
# ---------------------------------------------------------------------------

def test_iterate(ds, run_dir, capsys):
    assert main(["iterate", "--data-dir", str(ds), "--run-dir", str(run_dir),
                 "--max-iterations", "1", "--retrain-epochs", "1",
                 *TINY_TRAIN]) == 0
    with open(run_dir / "iterations.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "model", "segment_f", "event_f"]
    assert 2 <= len(rows) - 1 <= 4  # baseline + at most one iteration, x2
    assert {r[1] for r in rows[1:]} == {"f_student", "w_student"}
    out = capsys.readouterr().out
    assert "best iteration" in out
    assert (run_dir / "iterate.log").exists()


def test_iterate_needs_checkpoints(ds, tmp_path):
    assert main(["iterate", "--data-dir", str(ds),
                 "--run-dir", str(tmp_path / "empty")]) == 3


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_report(ds, run_dir, tmp_path):
    out = tmp_path / "eval.csv"
    argv = ["evaluate", "--checkpoint", str(run_dir / "f_student.pt"),
            "--conditional", str(run_dir / "conditional.pt"),
            "--manifest", str(ds / "target_test.jsonl"),
            "--threshold", "0.3", "--out", str(out)]
    assert main(argv) == 0
    text = out.read_text()
    assert "# threshold=0.3" in text
    rows = [r for r in csv.reader(text.splitlines())
            if r and not r[0].startswith("#")]
    assert rows[0][:3] == ["class", "segment_f", "event_f"]
    assert rows[-1][0] == "macro"

    again = tmp_path / "eval2.csv"
    assert main(argv[:-1] + [str(again)]) == 0
    assert out.read_text() == again.read_text()


def test_evaluate_rejects_weak_manifest(ds, run_dir):
    assert main(["evaluate", "--checkpoint", str(run_dir / "f_student.pt"),
                 "--conditional", str(run_dir / "conditional.pt"),
                 "--manifest", str(ds / "target_train_weak.jsonl")]) == 4


def test_evaluate_rejects_unknown_class(ds, run_dir, tmp_path):
    lines = []
    with open(ds / "target_test.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            rec["target_class"] = "zzz"
            lines.append(json.dumps(rec))
    bad = ds / "target_test_bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["evaluate", "--checkpoint", str(run_dir / "f_student.pt"),
                 "--conditional", str(run_dir / "conditional.pt"),
                 "--manifest", str(bad)]) == 4


def test_evaluate_missing_checkpoint(ds, tmp_path):
    assert main(["evaluate", "--checkpoint", str(tmp_path / "no.pt"),
                 "--conditional", str(tmp_path / "no_c.pt"),
                 "--manifest", str(ds / "target_test.jsonl")]) == 3


# ---------------------------------------------------------------------------
# noise-exp
# ---------------------------------------------------------------------------

def test_noise_exp(ds, run_dir, tmp_path):
    rd = tmp_path / "noise"
    assert main(["noise-exp", "--manifest", str(ds / "target_train_strong.jsonl"),
                 "--val-manifest", str(ds / "target_val.jsonl"),
                 "--conditional", str(run_dir / "conditional.pt"),
                 "--rates", "0,0.5", "--epochs", "1", "--seed", "2",
                 "--run-dir", str(rd), *TINY_TRAIN]) == 0
    rows = _read_csv(rd / "noise_curve.csv")
    assert [float(r["rate"]) for r in rows] == [0.0, 0.5]
    assert all(0.0 <= float(r["event_f"]) <= 1.0 for r in rows)


def test_noise_exp_rejects_bad_rates(ds, run_dir, tmp_path):
    base = ["noise-exp", "--manifest", str(ds / "target_train_strong.jsonl"),
            "--val-manifest", str(ds / "target_val.jsonl"),
            "--conditional", str(run_dir / "conditional.pt"),
            "--run-dir", str(tmp_path / "x"), *TINY_TRAIN]
    assert main(base + ["--rates", ""]) == 2
    assert main(base + ["--rates", "0,1.5"]) == 2


def test_noise_exp_rejects_weak_manifest(ds, run_dir, tmp_path):
    assert main(["noise-exp", "--manifest", str(ds / "target_train_weak.jsonl"),
                 "--val-manifest", str(ds / "target_val.jsonl"),
                 "--conditional", str(run_dir / "conditional.pt"),
                 "--rates", "0", "--run-dir", str(tmp_path / "x"),
                 *TINY_TRAIN]) == 4


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def test_report(run_dir, capsys):
    assert main(["report", "--run-dir", str(run_dir)]) == 0
    out = capsys.readouterr().out
    assert "checkpoint: f_student.pt" in out
    assert "iterations:" in out
    assert "phase f_source" in out


def test_report_missing_dir(tmp_path):
    assert main(["report", "--run-dir", str(tmp_path / "nope")]) == 3
