import json

import numpy as np
import pytest

from jointderev import datasetio, signals
from jointderev.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["make-corpus", "--out", str(d / "corpus"), "--count", "3", "--duration", "1.0"]) == 0
    assert main(["synth-dataset", "--corpus", str(d / "corpus"), "--out", str(d / "ds"),
                 "--tr", "3", "--et", "2", "--seed", "1"]) == 0
    return d


def test_no_args_is_usage_error(capsys):
    assert main([]) == 1


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 1
    assert main(["no-such-command"]) == 1


@pytest.mark.parametrize(
    "cmd, shown",
    [("train", ["75000", "0.0003", "full"]), ("wpe", ["10", "3"]), ("doa", ["5"]), ("reconstruct", ["60"])],
)
def test_help_shows_defaults(capsys, cmd, shown):
    code, out = run(capsys, cmd, "--help")
    assert code == 0
    assert "--seed" in out and "--config" in out
    for s in shown:
        assert s in out


def test_config_file_defaults_and_flag_precedence(tmp_path, capsys, dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"method": "srp-phat", "k": 3, "split": "tr"}))
    man = dataset / "ds" / "manifest.jsonl"
    code, out = run(capsys, "doa", "--config", cfg, "--manifest", man)
    assert code == 0
    rep = json.loads(out)
    assert rep["method"] == "srp-phat" and rep["n"] == 3
    code, out = run(capsys, "doa", "--config", cfg, "--manifest", man, "--split", "et")
    assert json.loads(out)["n"] == 2


def test_doa_music_report_and_records(tmp_path, capsys, dataset):
    recs = tmp_path / "r.jsonl"
    out_json = tmp_path / "rep.json"
    code, _ = run(capsys, "doa", "--method", "music", "--manifest", dataset / "ds" / "manifest.jsonl",
                  "--split", "et", "--records", recs, "--out", out_json)
    assert code == 0
    rep = json.loads(out_json.read_text())
    for key in ("top1_err", "top5_err", "mae@1", "acc@1"):
        assert key in rep
    lines = [json.loads(l) for l in recs.read_text().splitlines()]
    assert len(lines) == 2
    for r in lines:
        assert len(r["top5"]) == 5 and r["hit@1"] <= r["hit@5"]
        assert all(a % 5 == 0 for a in r["top5"])


def test_train_is_deterministic_and_evaluable(tmp_path, capsys, dataset):
    man = dataset / "ds" / "manifest.jsonl"
    # three optimiser steps on the small model
    for name in ("a", "b"):
        assert main(["train", "--manifest", str(man), "--out", str(tmp_path / name),
                     "--model", "small", "--steps", "3", "--seed", "7"]) == 0
    for f in (tmp_path / "a" / "final" / "params").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "final" / "params" / f.name).read_bytes()
    assert (tmp_path / "a" / "loss_curve.csv").read_text() == (tmp_path / "b" / "loss_curve.csv").read_text()
    capsys.readouterr()
    csv = tmp_path / "t60.csv"
    code, out = run(capsys, "eval", "--checkpoint", tmp_path / "a" / "final", "--manifest", man, "--csv", csv)
    assert code == 0
    rep = json.loads(out)
    assert rep["n"] == 2 and "lsd_0" in rep and "doa" in rep
    assert csv.read_text().startswith("t60,n,")
    code, out = run(capsys, "doa", "--method", "neural", "--checkpoint", tmp_path / "a" / "final",
                    "--manifest", man, "--split", "et")
    assert code == 0 and json.loads(out)["method"] == "neural"


def test_simulate_rir(tmp_path, capsys):
    code, out = run(capsys, "simulate-rir", "--out", tmp_path, "--angle", "30", "--t60", "0.3")
    assert code == 0
    rep = json.loads(out)
    h = datasetio.read_tensor(tmp_path / rep["files"]["target"])
    assert h.shape[0] == 4 and h.shape[1] >= int(1.25 * 0.3 * 16000)


def test_wpe_featurize_reconstruct(tmp_path, capsys, dataset, speech):
    wav = tmp_path / "x.wav"
    x = np.stack([speech] * 2) * 0.3
    signals.write_wav(wav, signals.MultiWave(x, 16000))
    assert main(["wpe", "--in", str(wav), "--out", str(tmp_path / "w.wav")]) == 0
    w = signals.read_wav(tmp_path / "w.wav")
    assert w.samples.shape[0] == 2 and np.all(np.isfinite(w.samples))

    assert main(["featurize", "--wav", str(wav), "--out", str(tmp_path / "f.ntsr")]) == 0
    f = datasetio.read_tensor(tmp_path / "f.ntsr")
    assert f.shape[0] == 2 and f.shape[2] == 160

    e = datasetio.read_manifest(dataset / "ds" / "manifest.jsonl")[0]
    tgt = dataset / "ds" / e["paths"]["target0"]
    assert main(["reconstruct", "--features", str(tgt), "--out", str(tmp_path / "r.wav"), "--iters", "3"]) == 0
    assert signals.read_wav(tmp_path / "r.wav").samples.shape[0] == 1


def test_plot_data(tmp_path, capsys, speech):
    wav = tmp_path / "x.wav"
    signals.write_wav(wav, signals.MultiWave(speech[None] * 0.3, 16000))
    assert main(["plot-data", "--kind", "spectrogram", "--input", str(wav), "--out", str(tmp_path / "s.csv")]) == 0
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0].startswith("frame,bin0") and len(rows[0].split(",")) == 81
    assert len(rows) == 1 + signals.StftConfig().n_frames(len(speech))


def test_data_errors_exit_two(tmp_path, capsys):
    assert main(["doa", "--method", "music", "--manifest", str(tmp_path / "none.jsonl")]) == 2
    (tmp_path / "bad.wav").write_bytes(b"nope")
    assert main(["wpe", "--in", str(tmp_path / "bad.wav"), "--out", str(tmp_path / "o.wav")]) == 2
