import subprocess
import sys

import numpy as np
import pytest
import torch

from speech_inpainting import cli, dsp
from speech_inpainting.unet import UNet, UNetConfig, save_weights


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def stats_path(tmp_path_factory, speech_corpus):
    path = tmp_path_factory.mktemp("cli") / "stats.npz"
    assert run("compute-stats", "--root", speech_corpus, "--split", "dev",
               "--max-segments", 10, "--out", path) == 0
    return path


def test_help_lists_every_subcommand():
    out = subprocess.run([sys.executable, "-m", "speech_inpainting.cli", "--help"],
                         capture_output=True, text=True, check=True).stdout
    for name in ("prepare-data", "compute-stats", "build-vocab", "pretrain-vgg", "train",
                 "evaluate", "inpaint", "report"):
        assert name in out


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        run("evaluate", "--bogus")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run()
    assert exc.value.code == 1
    assert run("compute-stats", "--out", "x.npz") == 1


def test_prepare_data_writes_manifest(tmp_path, speech_corpus):
    out = tmp_path / "m.jsonl"
    assert run("prepare-data", "--root", speech_corpus, "--split", "dev", "--out", out) == 0
    assert len(out.read_text().splitlines()) == 9


def test_missing_corpus_exits_2(tmp_path):
    assert run("compute-stats", "--root", tmp_path / "none", "--out", tmp_path / "s.npz") == 2


def test_evaluate_and_report(tmp_path, speech_corpus, capsys):
    csv = tmp_path / "grid.csv"
    code = run("--seed", 3, "evaluate", "--root", speech_corpus, "--split", "dev",
               "--sizes", "0.1,0.3", "--intrusions", "Time", "--scenarios", "Gaps,LPC",
               "--max-segments", 3, "--no-pesq", "--out-csv", csv)
    assert code == 0
    lines = csv.read_text().splitlines()
    assert len(lines) == 5 and lines[1].startswith("Time,0.10,Gaps,3,")
    capsys.readouterr()
    assert run("report", "--csv", csv, "--out-dir", tmp_path / "plots") == 0
    assert "Gaps STOI" in capsys.readouterr().out
    assert (tmp_path / "plots" / "time.png").is_file()


def test_inpaint_model_errors_exit_3(tmp_path, stats_path):
    wav = tmp_path / "in.wav"
    dsp.write_wav(wav, np.zeros(16384))
    args = ["inpaint", "--input", wav, "--output", tmp_path / "o.wav",
            "--stats", stats_path]
    assert run(*args, "--model", tmp_path / "missing.npz") == 3
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    assert run(*args, "--model", bad) == 3


def test_inpaint_runs(tmp_path, stats_path, speech_segments):
    torch.manual_seed(0)
    model = tmp_path / "unet.npz"
    save_weights(UNet(UNetConfig(filter_scale=0.25)), model)
    wav = tmp_path / "in.wav"
    dsp.write_wav(wav, speech_segments[0][1])
    code = run("inpaint", "--input", wav, "--output", tmp_path / "o.wav", "--model", model,
               "--stats", stats_path, "--mask-kind", "TimeFreq", "--coverage", 0.2,
               "--lws-iterations", 5, "--report", tmp_path / "r.json")
    assert code == 0
    assert len(dsp.read_wav(tmp_path / "o.wav")) == 16384
    assert (tmp_path / "r.json").is_file()


def test_train_deep_feature_without_extractor_exits_3(tmp_path, speech_corpus, stats_path):
    code = run("train", "--root", speech_corpus, "--split", "dev", "--stats", stats_path,
               "--out-dir", tmp_path, "--loss", "DeepFeature", "--max-segments", 2)
    assert code == 3


def test_train_pixel_loss_writes_model(tmp_path, speech_corpus, stats_path):
    code = run("train", "--root", speech_corpus, "--split", "dev", "--stats", stats_path,
               "--out-dir", tmp_path, "--loss", "Pixel", "--filter-scale", 0.25,
               "--epochs", 1, "--max-segments", 4)
    assert code == 0
    assert (tmp_path / "unet.npz").is_file() and (tmp_path / "train_log.jsonl").is_file()
