import json
import subprocess
import sys

import numpy as np
import pytest

from sharedbit.cli import main
from sharedbit.config import load_config
from sharedbit.data import load_dataset
from sharedbit.supernet import bn_recalibrate
from sharedbit.trainer import calibration_batches, load_model

RUN = {
    "model": {
        "input": [1, 8, 8],
        "classes": 4,
        "layers": [{"type": "conv", "out": 4, "stride": 2}, {"type": "conv", "out": 6}, {"type": "fc", "out": 8}, {"type": "fc"}],
    },
    "data": {"kind": "synthetic", "n": 600, "classes": 4, "shape": [1, 8, 8], "val": 100, "test": 100},
    "optimizer": {"warmup_epochs": 0, "epochs": 1, "batch_size": 50},
    "schedule": {"period_epochs": 1, "duration_epochs": 1},
    "search": {"val_size": 100, "calib_batches": 2, "calib_batch_size": 50},
    "out": "out",
}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(RUN))
    assert main(["train", "--config", str(cfg), "--out", str(root / "out")]) == 0
    return root, cfg, root / "out" / "checkpoint.bin"


class TestTrain:
    def test_outputs(self, trained):
        root, _, ckpt = trained
        out = root / "out"
        assert ckpt.exists()
        summary = json.loads((out / "train_summary.json").read_text())
        assert summary["epochs"] == 1 and summary["steps"] == 600 // 50
        assert 0 <= summary["val"]["max"]["accuracy"] <= 1
        assert summary["val"]["max"]["accuracy"] >= summary["val"]["min"]["accuracy"]
        assert (out / "train_log.csv").read_text().startswith("# config: ")

    def test_flags_reach_config(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(RUN))
        rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--no-schedule", "--no-idm",
                   "--criterion-mode", "literal", "--seed", "7"])
        assert rc == 0
        saved = json.loads((tmp_path / "o" / "config.json").read_text())
        assert saved["schedule"]["enabled"] is False and saved["idm"]["enabled"] is False
        assert saved["schedule"]["mode"] == "literal" and saved["seed"] == 7

    def test_resume_continues(self, trained, tmp_path):
        _, cfg, ckpt = trained
        rc = main(["train", "--config", str(cfg), "--out", str(tmp_path), "--resume", str(ckpt), "--epochs", "2"])
        assert rc == 0
        assert json.loads((tmp_path / "train_summary.json").read_text())["epochs"] == 2


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json")]) == 2

    def test_invalid_config(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"bits": {"weight": [1]}}))
        assert main(["train", "--config", str(tmp_path / "c.json")]) == 2

    def test_bad_epochs(self, trained):
        assert main(["train", "--config", str(trained[1]), "--epochs", "0"]) == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2

    def test_numerical_failure(self, tmp_path):
        raw = json.loads(json.dumps(RUN))
        raw["optimizer"]["lr"] = 1e30
        (tmp_path / "c.json").write_text(json.dumps(raw))
        assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 3

    def test_infeasible_budget(self, trained, tmp_path):
        _, cfg, ckpt = trained
        assert main(["search", "--config", str(cfg), "--checkpoint", str(ckpt), "--budget", "1", "--out", str(tmp_path)]) == 4

    def test_no_budget(self, trained, tmp_path):
        _, cfg, ckpt = trained
        assert main(["search", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 2

    def test_missing_checkpoint(self, trained, tmp_path):
        assert main(["eval", "--config", str(trained[1]), "--checkpoint", str(tmp_path / "x"), "--out", str(tmp_path)]) == 2

    def test_bad_policy_file(self, trained, tmp_path):
        _, cfg, ckpt = trained
        (tmp_path / "p.json").write_text("[[8, 8], [9, 9]]")
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--policy", str(tmp_path / "p.json"), "--out", str(tmp_path)]) == 2

    def test_console_script(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "sharedbit.cli", "train", "--config", str(tmp_path / "none.json")],
                             capture_output=True, text=True)
        assert res.returncode == 2 and "error:" in res.stderr


class TestSearchEval:
    def test_search_deterministic(self, trained, tmp_path, capsys):
        _, cfg, ckpt = trained
        outs = []
        for k in range(2):
            rc = main(["search", "--config", str(cfg), "--checkpoint", str(ckpt), "--budget-bits", "3", "--no-revisit",
                       "--out", str(tmp_path / str(k))])
            assert rc == 0
            outs.append((tmp_path / str(k) / "trajectory.jsonl").read_bytes())
        assert outs[0] == outs[1]
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["bitops"] <= summary["budget"]
        pol = json.loads((tmp_path / "0" / "policy.json").read_text())
        assert pol == summary["policy"]
        assert pol[0] == [8, 8] and pol[-1] == [8, 8]

    def test_generous_budget_is_trivial(self, trained, tmp_path, capsys):
        _, cfg, ckpt = trained
        assert main(["search", "--config", str(cfg), "--checkpoint", str(ckpt), "--budget", "1e15", "--out", str(tmp_path)]) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["steps"] == 0 and all(bw == 6 for bw, _ in summary["policy"][1:-1])
        assert (tmp_path / "trajectory.jsonl").read_text() == ""

    def test_eval_deterministic(self, trained, tmp_path):
        _, cfg, ckpt = trained
        for k in range(2):
            assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--policy", "min", "--out", str(tmp_path / str(k))]) == 0
        assert (tmp_path / "0" / "eval.json").read_bytes() == (tmp_path / "1" / "eval.json").read_bytes()

    def test_eval_accuracy_matches_hand_count(self, trained, tmp_path, capsys):
        _, cfg_path, ckpt = trained
        assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--policy", "uniform:4", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "eval.json").read_text())
        cfg = load_config(cfg_path)
        data = load_dataset(cfg.data)
        net = load_model(ckpt, cfg)
        policy = net.space.uniform_policy(4)
        calib = calibration_batches(data["train"], cfg.search.calib_batches, cfg.search.calib_batch_size, cfg.seed)
        stats = bn_recalibrate(net, policy, calib)
        logits = net.forward(policy, data["test"].x, mode="eval", bn_stats=stats).logits.data
        assert report["accuracy"] == pytest.approx(np.mean(np.argmax(logits, 1) == data["test"].y))
        assert report["samples"] == 100

    def test_criterion_dump(self, trained, tmp_path, capsys):
        _, cfg, ckpt = trained
        assert main(["criterion-dump", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "criterion.csv").read_text().splitlines()
        assert lines[0] == "layer,score,mode,epsilon,step"
        assert len(lines) == 1 + 2


class TestAnalyze:
    def test_regress2d(self, tmp_path):
        assert main(["analyze", "regress2d", "--bits", "2,4", "--seeds", "2", "--steps", "40", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "regress2d_b2-4_seed1.csv").exists()
        rows = (tmp_path / "regress2d_b2-4_summary.csv").read_text().splitlines()
        assert rows[0] == "seed,bit,w_star,grad_var,crossings" and len(rows) == 5

    def test_bad_bits(self, tmp_path):
        assert main(["analyze", "regress2d", "--bits", "two", "--out", str(tmp_path)]) == 2

    def test_density_and_perturb(self, trained, tmp_path, capsys):
        _, cfg, ckpt = trained
        assert main(["analyze", "density", "--config", str(cfg), "--checkpoint", str(ckpt), "--layer", "1", "--bins", "8",
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "density_1_2.csv").exists() and (tmp_path / "density_1_6.csv").exists()
        assert main(["analyze", "perturb", "--config", str(cfg), "--checkpoint", str(ckpt), "--batches", "2",
                     "--batch-size", "16", "--out", str(tmp_path)]) == 0
        assert len((tmp_path / "perturb.csv").read_text().splitlines()) == 1 + 2 * 2

    def test_distance(self, trained, tmp_path):
        _, cfg, _ = trained
        assert main(["analyze", "distance", "--config", str(cfg), "--layer", "1", "--every", "4", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "distance.csv").read_text().splitlines()
        assert lines[0] == "step,layer,bit,distance" and len(lines) == 1 + 2 * 3  # steps 0, 4, 8 of 12
