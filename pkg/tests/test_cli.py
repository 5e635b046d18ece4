import csv
import hashlib
import math

import numpy as np
import pytest

from multimix import cli, data, metrics
from multimix.cli import main
from multimix.train import read_log

TINY = ["--set", "model.input_size=32", "--set", "model.width_multiplier=0.125", "--set", "hp.m=2",
        "--set", "train.max_steps=2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    args = ["synth", "--out", str(root), "--set", "size=32", "--set", "cls_labeled=4", "--set", "cls_unlabeled=4",
            "--set", "seg_labeled=3", "--set", "seg_unlabeled=4", "--set", "cls_test=4", "--set", "seg_test=3"]
    assert main(args) == 0
    return root


def data_flags(root, streams=data.STREAMS):
    out = []
    for s in streams:
        out += ["--set", f"data.{s}={root / (s + '.csv')}"]
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out), *TINY, *data_flags(dataset), "--set", "hp.t=0.8"]) == 0
    return out


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSynth:
    def test_manifests_written(self, dataset):
        for s in data.STREAMS + ("cls_test", "seg_test"):
            assert (dataset / f"{s}.csv").is_file()

    def test_seed_reproducible(self, tmp_path):
        for d in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / d), "--seed", "7", "--set", "size=16",
                         "--set", "cls_labeled=2", "--set", "cls_unlabeled=1", "--set", "seg_labeled=1",
                         "--set", "seg_unlabeled=1"]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_zero_counts_valid(self, tmp_path):
        args = ["synth", "--out", str(tmp_path), "--set", "size=16"]
        for s in data.STREAMS:
            args += ["--set", f"{s}=0"]
        assert main(args) == 0
        assert data.load_manifest(tmp_path / "cls_labeled.csv").rows == []

    def test_style_keys(self):
        cfg = cli.synth_config(None, ["seg_source.noise=0.1", "abnormal_prob=0.2"], 3)
        assert cfg.seg_source.noise == 0.1 and cfg.abnormal_prob == 0.2 and cfg.seed == 3

    @pytest.mark.parametrize("item", ["bogus=1", "cls_source.bogus=1", "size=abc", "abnormal_prob=2"])
    def test_bad_keys(self, item, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--set", item]) == 1

    def test_no_overwrite(self, dataset):
        assert main(["synth", "--out", str(dataset)]) == 1


class TestTrain:
    def test_outputs_and_header_echo(self, trained):
        assert (trained / "final.mmix").is_file()
        text = (trained / "log.csv").read_text()
        assert "# hp.t = 0.8" in text
        rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        assert len(rows) == 3  # header + two steps

    def test_refuses_overwrite(self, dataset, trained):
        before = (trained / "final.mmix").read_bytes()
        assert main(["train", "--out", str(trained), *TINY, *data_flags(dataset)]) == 1
        assert (trained / "final.mmix").read_bytes() == before

    def test_force_overwrites(self, dataset, tmp_path):
        flags = ["train", "--out", str(tmp_path), *TINY, *data_flags(dataset)]
        assert main(flags) == 0
        assert main(flags + ["--force"]) == 0

    def test_missing_manifest_leaves_nothing(self, tmp_path):
        out = tmp_path / "out"
        code = main(["train", "--out", str(out), *TINY, "--set", f"data.cls_labeled={tmp_path / 'nope.csv'}"])
        assert code == 2
        assert not (out / "final.mmix").exists()

    def test_no_labeled_data(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), *TINY]) == 2

    def test_bad_override(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--set", "hp.t=0.2"]) == 1

    def test_resume_continues(self, dataset, tmp_path):
        first = tmp_path / "a"
        assert main(["train", "--out", str(first), *TINY, *data_flags(dataset)]) == 0
        more = [*TINY[:-2], "--set", "train.max_steps=3"]
        assert main(["train", "--out", str(first), *more, *data_flags(dataset),
                     "--resume", str(first / "final.mmix"), "--force"]) == 0
        steps = [int(r["step"]) for r in read_log(first / "log.csv")]
        assert steps == [0, 1, 2]

    def test_usage_errors(self):
        assert main(["train"]) == 1
        assert main(["nope"]) == 1


class TestEval:
    def test_writes_metric_tables(self, dataset, trained, tmp_path):
        ck = str(trained / "final.mmix")
        code = main(["eval", "--out", str(tmp_path), "--checkpoint", ck, "--checkpoint", ck,
                     "--manifest", str(dataset / "cls_test.csv"), "--manifest", str(dataset / "seg_test.csv"),
                     *TINY[:2]])
        assert code == 0
        rows = read_csv(tmp_path / "metrics.csv")
        assert len(rows) == 4
        assert list(rows[0])[4:] == list(metrics.MetricsReport.SCALARS)
        seg = [r for r in rows if r["task"] == "segmentation"][0]
        for col in ("ds", "js", "precision", "recall", "ssim"):
            assert -1.0 <= float(seg[col]) <= 1.0
        assert math.isfinite(float(seg["hd"])) and float(seg["hd"]) >= 0.0
        cls = [r for r in rows if r["task"] == "classification"][0]
        assert 0.0 <= float(cls["acc"]) <= 1.0 and 0.0 <= float(cls["auc"]) <= 1.0
        assert len(read_csv(tmp_path / "dice.csv")) == 2 * 3
        assert len(read_csv(tmp_path / "bland_altman.csv")) == 2 * 3
        assert read_csv(tmp_path / "roc.csv")
        assert "checkpoints" in (tmp_path / "eval_header.txt").read_text()

    def test_task_mismatch(self, dataset, trained, tmp_path):
        code = main(["eval", "--out", str(tmp_path), "--checkpoint", str(trained / "final.mmix"),
                     "--manifest", str(dataset / "cls_test.csv"), "--task", "segmentation", *TINY[:2]])
        assert code == 2

    def test_corrupt_checkpoint(self, dataset, tmp_path):
        bad = tmp_path / "bad.mmix"
        bad.write_bytes(b"MMIX\x01")
        code = main(["eval", "--out", str(tmp_path / "o"), "--checkpoint", str(bad),
                     "--manifest", str(dataset / "seg_test.csv"), *TINY[:2]])
        assert code == 2


class TestSaliency:
    def test_heatmaps(self, dataset, trained, tmp_path):
        code = main(["saliency", "--out", str(tmp_path), "--checkpoint", str(trained / "final.mmix"),
                     "--manifest", str(dataset / "cls_test.csv"), *TINY[:2]])
        assert code == 0
        rows = read_csv(tmp_path / "index.csv")
        assert len(rows) == 4
        for r in rows:
            assert 0.5 <= float(r["confidence"]) <= 1.0 and r["predicted_class"] in ("0", "1")
            heat = data.decode_pgm(tmp_path / r["heatmap"])
            assert heat.shape == (32, 32)
            assert heat.max() == 1.0 or np.all(heat == 0)
