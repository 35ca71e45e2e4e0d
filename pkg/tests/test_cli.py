import json

import pytest

from boxseq import cli
from boxseq import train as T

SMALL = {"d_model": 16, "n_layers": 1, "n_heads": 2, "batch_size": 4, "checkpoint_every": 2}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["gen", "--out", str(out), "--seed", "3", "--n-scenes", "6",
                     "--test-fraction", "0.2"]) == 0
    return out


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "train.json"
    path.write_text(json.dumps(SMALL))
    return path


def train(data_dir, cfg, run_dir, *extra):
    return cli.main(["train", "--data", str(data_dir), "--config", str(cfg),
                     "--run-dir", str(run_dir), *extra])


def file_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestGen:
    def test_outputs(self, data_dir):
        summary = json.loads((data_dir / "summary.json").read_text())
        assert summary["n_scenes"] == 6
        assert summary["n_samples"] == 3 * summary["n_expressions"]
        assert (data_dir / "histogram.csv").exists()

    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert cli.main(["gen", "--out", str(tmp_path / name), "--seed", "7", "--n-scenes", "5"]) == 0
        assert file_bytes(tmp_path / "a") == file_bytes(tmp_path / "b")

    def test_bad_config(self, tmp_path):
        bad = tmp_path / "g.json"
        bad.write_text(json.dumps({"n_scenes": 4, "colour": "red"}))
        assert cli.main(["gen", "--out", str(tmp_path / "o"), "--config", str(bad)]) == cli.EXIT_CONFIG

    def test_invalid_json(self, tmp_path):
        bad = tmp_path / "g.json"
        bad.write_text("{not json")
        assert cli.main(["gen", "--out", str(tmp_path / "o"), "--config", str(bad)]) == cli.EXIT_CONFIG


class TestTrain:
    def test_one_step(self, data_dir, small_cfg, tmp_path):
        run = tmp_path / "run"
        assert train(data_dir, small_cfg, run, "--regime", "clm-arl", "--steps", "1") == 0
        assert [p.name for p in (run / "checkpoints").iterdir()] == ["step_000001.ckpt"]
        assert len(T.read_train_log(run / "logs" / "train_log.csv")) == 1
        snap = json.loads((run / "config.json").read_text())
        assert snap["train"]["regime"] == "clm_arl" and snap["train"]["steps"] == 1
        assert not (run / ".lock").exists()

    def test_default_weights_snapshot(self, data_dir, small_cfg, tmp_path):
        run = tmp_path / "run"
        assert train(data_dir, small_cfg, run, "--steps", "1") == 0
        snap = json.loads((run / "config.json").read_text())["train"]
        assert [snap[k] for k in ("alpha", "beta", "gamma", "delta")] == [0.2, 0.8, 0.2, 0.8]

    def test_default_run_dir(self, data_dir, small_cfg, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path))
        assert cli.main(["train", "--data", str(data_dir), "--config", str(small_cfg),
                         "--steps", "1", "--seed", "5", "--regime", "clm"]) == 0
        assert (tmp_path / "clm-seed5" / "checkpoints" / "step_000001.ckpt").exists()

    def test_beta_zero_equals_clm(self, data_dir, small_cfg, tmp_path):
        assert train(data_dir, small_cfg, tmp_path / "a", "--regime", "clm", "--steps", "3") == 0
        assert train(data_dir, small_cfg, tmp_path / "b", "--beta", "0", "--steps", "3") == 0
        la = (tmp_path / "a" / "logs" / "train_log.csv").read_text()
        lb = (tmp_path / "b" / "logs" / "train_log.csv").read_text()
        assert la == lb

    def test_deterministic(self, data_dir, small_cfg, tmp_path):
        for name in ("a", "b"):
            assert train(data_dir, small_cfg, tmp_path / name, "--steps", "2", "--seed", "7") == 0
        assert file_bytes(tmp_path / "a") == file_bytes(tmp_path / "b")

    def test_existing_run_needs_resume(self, data_dir, small_cfg, tmp_path):
        run = tmp_path / "run"
        assert train(data_dir, small_cfg, run, "--steps", "4") == 0
        assert train(data_dir, small_cfg, run, "--steps", "4") == cli.EXIT_CONFIG

    def test_resume(self, data_dir, small_cfg, tmp_path):
        full = tmp_path / "full"
        assert train(data_dir, small_cfg, full, "--steps", "4") == 0
        part = tmp_path / "part"
        assert train(data_dir, small_cfg, part, "--steps", "4") == 0
        (part / "checkpoints" / "step_000004.ckpt").unlink()
        assert train(data_dir, small_cfg, part, "--steps", "4", "--resume") == 0
        assert file_bytes(full) == file_bytes(part)

    def test_resume_config_change(self, data_dir, small_cfg, tmp_path):
        run = tmp_path / "run"
        assert train(data_dir, small_cfg, run, "--steps", "2") == 0
        assert train(data_dir, small_cfg, run, "--steps", "2", "--lr", "0.1", "--resume") == cli.EXIT_CONFIG

    def test_lock_held(self, data_dir, small_cfg, tmp_path):
        run = tmp_path / "run"
        run.mkdir()
        (run / ".lock").write_text("123")
        assert train(data_dir, small_cfg, run, "--steps", "1") == cli.EXIT_CONFIG

    def test_missing_data(self, small_cfg, tmp_path):
        assert train(tmp_path / "nope", small_cfg, tmp_path / "run", "--steps", "1") == cli.EXIT_IO

    def test_bad_steps(self, data_dir, small_cfg, tmp_path):
        assert train(data_dir, small_cfg, tmp_path / "run", "--steps", "0") == cli.EXIT_CONFIG

    def test_numeric_abort(self, data_dir, small_cfg, tmp_path, monkeypatch):
        real = T.backward
        calls = []

        def poisoned(params, mcfg, batch, cfg):
            grads, parts = real(params, mcfg, batch, cfg)
            calls.append(1)
            if len(calls) == 3:
                grads["lm_w"] = grads["lm_w"] * float("nan")
            return grads, parts

        monkeypatch.setattr(T, "backward", poisoned)
        run = tmp_path / "run"
        assert train(data_dir, small_cfg, run, "--steps", "4") == cli.EXIT_NUMERIC
        assert (run / "checkpoints" / "step_000002.ckpt").exists()
        assert not (run / ".lock").exists()

    def test_eval_log(self, data_dir, small_cfg, tmp_path):
        run = tmp_path / "run"
        assert train(data_dir, small_cfg, run, "--steps", "2", "--eval-every", "1") == 0
        lines = (run / "logs" / "eval_log.csv").read_text().splitlines()
        assert lines[0].startswith("step,split,loss") and len(lines) == 3


@pytest.fixture(scope="module")
def trained(data_dir, small_cfg, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    for regime in ("clm", "clm-arl"):
        assert train(data_dir, small_cfg, root / regime, "--regime", regime, "--steps", "2") == 0
    return root


class TestEval:
    def test_report_and_overlays(self, data_dir, trained):
        ckpt = trained / "clm" / "checkpoints" / "step_000002.ckpt"
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data_dir),
                         "--overlays", "3"]) == 0
        assert (trained / "clm" / "reports" / "eval_test_step_000002.jsonl").exists()
        assert len(list((trained / "clm" / "overlays").glob("*.svg"))) == 3

    def test_no_overlays(self, data_dir, trained, tmp_path):
        ckpt = trained / "clm-arl" / "checkpoints" / "step_000002.ckpt"
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data_dir),
                         "--run-dir", str(tmp_path), "--overlays", "0"]) == 0
        assert not (tmp_path / "overlays").exists()

    def test_deterministic(self, data_dir, trained, tmp_path):
        ckpt = trained / "clm-arl" / "checkpoints" / "step_000002.ckpt"
        for name in ("a", "b"):
            assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data_dir),
                             "--run-dir", str(tmp_path / name), "--overlays", "2"]) == 0
        assert file_bytes(tmp_path / "a") == file_bytes(tmp_path / "b")

    def test_missing_checkpoint(self, data_dir, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(data_dir),
                         "--run-dir", str(tmp_path)]) == cli.EXIT_IO

    def test_corrupt_checkpoint(self, data_dir, tmp_path):
        bad = tmp_path / "x.ckpt"
        bad.write_bytes(b"garbage")
        assert cli.main(["eval", "--checkpoint", str(bad), "--data", str(data_dir),
                         "--run-dir", str(tmp_path)]) == cli.EXIT_CHECKPOINT

    def test_grid_mismatch(self, trained, tmp_path):
        other = tmp_path / "data8"
        cfg = tmp_path / "g.json"
        cfg.write_text(json.dumps({"n_scenes": 4, "grid_size": 8, "test_fraction": 0.25}))
        assert cli.main(["gen", "--out", str(other), "--config", str(cfg)]) == 0
        ckpt = trained / "clm" / "checkpoints" / "step_000002.ckpt"
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(other),
                         "--run-dir", str(tmp_path)]) == cli.EXIT_CHECKPOINT


class TestCompare:
    def reports(self, data_dir, trained, split_b="test"):
        out = []
        for regime, split in (("clm", "test"), ("clm-arl", split_b)):
            ckpt = trained / regime / "checkpoints" / "step_000002.ckpt"
            assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data_dir),
                             "--split", split]) == 0
            out.append(trained / regime / "reports" / f"eval_{split}_step_000002.jsonl")
        return out

    def test_outputs(self, data_dir, trained, tmp_path):
        a, b = self.reports(data_dir, trained)
        logs = [str(trained / r / "logs" / "train_log.csv") for r in ("clm", "clm-arl")]
        assert cli.main(["compare", str(a), str(b), "--out", str(tmp_path), "--curves", *logs]) == 0
        assert "detection" in (tmp_path / "compare.txt").read_text()
        assert (tmp_path / "compare.csv").read_text().startswith("task,n,acc_a")
        curves = (tmp_path / "curves.csv").read_text().splitlines()
        assert curves[0] == "step,regime,total,clm,arl,lr" and len(curves) == 5

    def test_split_mismatch(self, data_dir, trained, tmp_path):
        a, b = self.reports(data_dir, trained, split_b="train")
        assert cli.main(["compare", str(a), str(b), "--out", str(tmp_path)]) == cli.EXIT_SPLIT

    def test_missing_report(self, tmp_path):
        assert cli.main(["compare", str(tmp_path / "a"), str(tmp_path / "b"),
                         "--out", str(tmp_path)]) == cli.EXIT_IO


class TestGradcheck:
    def test_pass_and_fault(self, small_cfg, capsys):
        assert cli.main(["gradcheck", "--config", str(small_cfg), "--probes", "40"]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["passed"] and rep["n_probes"] == 40
        assert cli.main(["gradcheck", "--config", str(small_cfg), "--probes", "80",
                         "--inject-fault", "l0.qkv_w"]) == cli.EXIT_GRADCHECK


def test_vocab(tmp_path):
    assert cli.main(["vocab", "--out", str(tmp_path / "v.txt")]) == 0
    assert len((tmp_path / "v.txt").read_text().splitlines()) == 1105
