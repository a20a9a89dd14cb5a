import json

import pytest

from ohubert import __version__
from ohubert.cli import main

SMALL = ["--set", "model.C=8", "--set", "model.n_layers=2", "--set", "model.d_model=32",
         "--set", "model.n_heads=2", "--set", "model.ffn_dim=64"]


def _err_lines(capsys):
    return [line for line in capsys.readouterr().err.splitlines() if line.strip()]


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_version(capsys):
    assert main(["--version"]) == 0
    out = capsys.readouterr().out
    assert __version__ in out and "checkpoint format 1" in out


@pytest.mark.parametrize("argv", [["bogus"], ["pretrain"], ["probe", "--task", "pitch",
                                                            "--mode", "G", "--out", "x"]])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_bad_override_is_usage_error(tmp_path, capsys):
    assert main(["synth-data", "--out-dir", str(tmp_path), "--set", "corpus.nope=1"]) == 2
    lines = _err_lines(capsys)
    assert len(lines) == 1 and lines[0].startswith("error:") and "nope" in lines[0]


def test_runtime_error_is_one_line_exit_1(tmp_path, capsys):
    (tmp_path / "bad.ohub").write_bytes(b"JUNKJUNKJUNK")
    rc = main(["extract", "--ckpt", str(tmp_path / "bad.ohub"), "--mode", "G",
               "--manifest", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "f.npz")])
    assert rc == 1
    lines = _err_lines(capsys)
    assert len(lines) == 1 and lines[0].startswith("error:")


def test_gradcheck_exit_code(capsys):
    assert main(["gradcheck", *SMALL]) == 0
    out = capsys.readouterr().out
    assert "scorer" in out and "wlf" in out and "PASS" in out
    assert main(["gradcheck", *SMALL, "--tol", "1e-30"]) == 1


def test_full_pipeline(tmp_path, capsys):
    data, run, rep = tmp_path / "data", tmp_path / "run", tmp_path / "rep"
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"corpus": {"n_speakers": 3, "n_contents": 2,
                                               "utterances_per_speaker": 5, "duration_s": 0.8},
                                    "train": {"steps": 3, "batch_sources": 2,
                                              "segment_frames": 16, "dev_fraction": 0.2},
                                    "probe": {"epochs": 20}}))
    common = ["--config", str(cfg_file), *SMALL]
    assert main(["synth-data", "--out-dir", str(data), *common]) == 0
    assert main(["make-labels", "--manifest", str(data / "manifest.jsonl"),
                 "--out-dir", str(data), *common]) == 0
    assert (data / "labels.jsonl").exists() and (data / "codebook.npy").exists()
    assert main(["pretrain", "--out-dir", str(run), "--manifest", str(data / "manifest.jsonl"),
                 "--labels", str(data / "labels.jsonl"), *common]) == 0
    eff = json.loads((run / "config.json").read_text())
    assert eff["train"]["steps"] == 3 and eff["model"]["C"] == 8
    assert eff["train"]["manifest"].endswith("manifest.jsonl")
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 3

    ck, man = str(run / "final.ohub"), str(data / "manifest.jsonl")
    assert main(["extract", "--ckpt", ck, "--mode", "GL", "--manifest", man,
                 "--out", str(rep / "gl.npz"), *common]) == 0
    assert (rep / "gl.config.json").exists()
    assert main(["probe", "--task", "speaker", "--mode", "GL", "--features", str(rep / "gl.npz"),
                 "--out", str(rep / "GL.json"), *common]) == 0
    for mode in ("G", "L"):
        assert main(["probe", "--task", "speaker", "--mode", mode, "--ckpt", ck, "--manifest", man,
                     "--out", str(rep / f"{mode}.json"), *common]) == 0
    assert (rep / "G.layers.csv").exists() and (rep / "G.layers.png").exists()
    assert main(["ensemble", "--reports", *(str(rep / f"{m}.json") for m in ("G", "L", "GL")),
                 "--out", str(rep / "ens.json"), *common]) == 0
    ens = json.loads((rep / "ens.json").read_text())
    assert set(ens["accuracy"]) == {"G", "L", "GL", "ensemble"}
    assert (rep / "ens.png").exists()

    prev = tmp_path / "prev"
    assert main(["augment-preview", "--manifest", man, "--out-dir", str(prev),
                 "--n-sources", "3", *common]) == 0
    info = json.loads((prev / "preview.json").read_text())
    assert info["n_reverberated"] == 3 and len(info["segments"]) == 6
    assert len(list(prev.glob("*_aug.wav"))) == 6
