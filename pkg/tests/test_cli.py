import json

import numpy as np
import pytest

from voxfuse.cli import main
from voxfuse.data import load_manifest
from voxfuse.models import (AcousticModel, FusedModel, FusionLayer, LanguageModel,
                            save_acoustic, save_fused, save_lm)

GOLDEN_3x7_CAUSAL = "0------\n000----\n00000--"


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestDumpMask:
    def test_golden_causal(self, capsys):
        code, out, err = run(capsys, "dump-mask", "--text-len", "3",
                             "--audio-len", "7", "--mode", "causal")
        assert code == 0
        assert out.strip("\n") == GOLDEN_3x7_CAUSAL
        assert "resolved config" in err

    def test_full_mode_all_open(self, capsys):
        code, out, _ = run(capsys, "dump-mask", "--text-len", "2",
                           "--audio-len", "4", "--mode", "full")
        assert code == 0
        assert out.strip("\n") == "0000\n0000"

    def test_missing_required_flag_exits_2(self, capsys):
        code, _, err = run(capsys, "dump-mask", "--text-len", "3")
        assert code == 2
        assert "usage error" in err


class TestExitCodes:
    def test_unknown_flag_exits_2(self, capsys):
        code, _, _ = run(capsys, "gen-data", "--bogus", "1")
        assert code == 2

    def test_unknown_command_exits_2(self, capsys):
        code, _, _ = run(capsys, "frobnicate")
        assert code == 2

    def test_train_fusion_missing_ckpts_exits_2(self, capsys, tmp_path):
        code, _, err = run(capsys, "train-fusion", "--data", str(tmp_path),
                           "--out", str(tmp_path))
        assert code == 2
        assert "acoustic-ckpt" in err

    def test_missing_data_dir_exits_1(self, capsys, tmp_path):
        code, _, err = run(capsys, "pretrain-lm",
                           "--data", str(tmp_path / "nope"),
                           "--out", str(tmp_path / "out"), "--epochs", "1")
        assert code == 1
        assert "error" in err


class TestGenData:
    def test_writes_manifest_and_frames(self, capsys, tmp_path):
        out = tmp_path / "corpus"
        code, _, _ = run(capsys, "gen-data", "--n", "5", "--seed", "3",
                         "--sigma", "0.1", "--out", str(out))
        assert code == 0
        manifest = load_manifest(out)
        assert len(manifest) == 5

    def test_flag_overrides_config_file(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n": 3, "seed": 0, "sigma": 0.0,
                                   "out": str(tmp_path / "from_config")}))
        out = tmp_path / "from_flag"
        code, _, err = run(capsys, "gen-data", "--config", str(cfg),
                           "--n", "2", "--out", str(out))
        assert code == 0
        assert len(load_manifest(out)) == 2  # flag --n 2 beat config n=3
        assert '"n": 2' in err

    def test_config_used_when_flag_absent(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        out = tmp_path / "corpus"
        cfg.write_text(json.dumps({"n": 4, "out": str(out)}))
        code, _, _ = run(capsys, "gen-data", "--config", str(cfg))
        assert code == 0
        assert len(load_manifest(out)) == 4


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_eval")
    corpus = root / "corpus"
    assert main(["gen-data", "--n", "6", "--seed", "1", "--sigma", "0.1",
                 "--out", str(corpus)]) == 0
    acoustic = AcousticModel(seed=0)
    acoustic.freeze()
    fused = FusedModel(acoustic, LanguageModel(seed=1), FusionLayer(seed=2),
                       injection=3, mode="causal")
    ckpt = root / "fused.voxk"
    save_fused(ckpt, fused, meta={"alpha": 16.0, "dropout": 0.1})
    return root, corpus, ckpt


class TestEvalArtifacts:
    def test_eval_writes_csv_plot_and_report(self, setup, capsys):
        root, corpus, ckpt = setup
        out = root / "eval"
        code, stdout, _ = run(capsys, "eval", "--ckpt", str(ckpt),
                              "--data", str(corpus), "--out", str(out),
                              "--mode", "streaming")
        assert code == 0
        assert "wer=" in stdout
        assert (out / "wer_summary.csv").exists()
        assert (out / "wer_hist.png").exists()
        assert (out / "hyps.txt").exists()
        report = json.loads((out / "report.json").read_text())
        assert report["mode"] == "streaming" and report["n"] == 6

    def test_streaming_equals_offline_causal_hyps(self, setup, capsys):
        root, corpus, ckpt = setup
        hyps = {}
        for mode in ("streaming", "offline-causal"):
            out = root / f"eval_{mode}"
            code, _, _ = run(capsys, "eval", "--ckpt", str(ckpt),
                             "--data", str(corpus), "--out", str(out),
                             "--mode", mode)
            assert code == 0
            hyps[mode] = (out / "hyps.txt").read_text()
        assert hyps["streaming"] == hyps["offline-causal"]

    def test_eval_rejects_acoustic_checkpoint(self, setup, capsys):
        root, corpus, _ = setup
        ac_ckpt = root / "ac.voxk"
        save_acoustic(ac_ckpt, AcousticModel(seed=0))
        code, _, err = run(capsys, "eval", "--ckpt", str(ac_ckpt),
                           "--data", str(corpus),
                           "--out", str(root / "eval_bad"))
        assert code == 2
        assert "not an LM or fused checkpoint" in err

    def test_eval_lm_checkpoint_mode_none(self, setup, capsys):
        root, corpus, _ = setup
        lm_ckpt = root / "lm.voxk"
        save_lm(lm_ckpt, LanguageModel(seed=4))
        out = root / "eval_none"
        code, _, _ = run(capsys, "eval", "--ckpt", str(lm_ckpt),
                         "--data", str(corpus), "--out", str(out),
                         "--mode", "none", "--limit", "3")
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["n"] == 3
