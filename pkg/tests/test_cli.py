import csv
import io
import json

import numpy as np
import pytest

from coda import checkpoint, tensor
from coda.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main
from coda.soft_topk import EpsSchedule, soft_topk


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def scores(tmp_path):
    path = tmp_path / "scores.txt"
    tensor.write_tensor(path, np.random.default_rng(0).normal(size=(2, 8)))
    return path


class TestRoute:
    def test_csv(self, scores, tmp_path):
        out = tmp_path / "route.csv"
        assert main(["route", "--scores", str(scores), "--k", "3", "--eps-target", "1", "--beta", "0.85",
                     "--out", str(out)]) == EXIT_OK
        table = rows(out.read_text())
        assert len(table) == 16
        lam = np.array([float(r["lambda"]) for r in table]).reshape(2, 8)
        ref = soft_topk(tensor.read_tensor(scores), 3, EpsSchedule.speech()).lam
        np.testing.assert_array_equal(lam, ref)
        assert all(float(r["oracle_delta"]) < 1e-2 for r in table)

    def test_r_flag(self, scores, capsys):
        assert main(["route", "--scores", str(scores), "--r", "2", "--T", "400"]) == EXIT_OK
        lam = np.array([float(r["lambda"]) for r in rows(capsys.readouterr().out)])
        assert abs(lam[:8].sum() - 4) < 0.1

    def test_bad_capacity(self, scores):
        assert main(["route", "--scores", str(scores), "--k", "9"]) == EXIT_USAGE

    def test_missing_file(self, tmp_path):
        assert main(["route", "--scores", str(tmp_path / "nope.txt"), "--k", "1"]) == EXIT_IO

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("2 2\n1 2\n")
        assert main(["route", "--scores", str(path), "--k", "1"]) == EXIT_USAGE


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["route", "--k", "1"])
    assert exc.value.code == EXIT_USAGE


class TestFlops:
    def test_flags(self, capsys):
        assert main(["flops", "--n", "512", "--d", "768", "--heads", "12", "--d-ffn", "3072",
                     "--k", "192", "--d-adpt", "64"]) == EXIT_OK
        fields = {r["field"]: r["value"] for r in rows(capsys.readouterr().out)}
        assert int(fields["coda_ffn"]) == 2 * 192 * 768 * 3072
        assert int(fields["k"]) == 192

    def test_config_file_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"layer": {"n": 16, "d": 8, "heads": 2, "r": 4}}))
        assert main(["flops", "--config", str(cfg), "--k", "8"]) == EXIT_OK
        fields = {r["field"]: r["value"] for r in rows(capsys.readouterr().out)}
        assert fields["k"] == "8"

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{")
        assert main(["flops", "--config", str(cfg)]) == EXIT_USAGE
        cfg.write_text(json.dumps({"other": {}}))
        assert main(["flops", "--config", str(cfg)]) == EXIT_USAGE

    def test_incomplete_layer(self):
        assert main(["flops", "--n", "8"]) == EXIT_USAGE


def test_train_checkpoint_heatmap(tmp_path, capsys):
    metrics, ckpt = tmp_path / "m.csv", tmp_path / "m.ckpt"
    args = ["train", "--steps", "6", "--eval-interval", "3", "--metrics", str(metrics), "--checkpoint", str(ckpt)]
    assert main(args) == EXIT_OK
    trace = rows(metrics.read_text())
    assert [r["step"] for r in trace] == ["0", "3", "6"]
    first = metrics.read_bytes()
    assert main(args) == EXIT_OK
    assert metrics.read_bytes() == first

    model, cfg, meta = checkpoint.load(ckpt)
    assert meta["train"]["steps"] == 6
    fixture = tmp_path / "fx.txt"
    fixture.write_text("# grid 4 4\n" + tensor.format_tensor(np.random.default_rng(1).normal(size=(16, 32))))
    out_dir = tmp_path / "maps"
    assert main(["heatmap", "--checkpoint", str(ckpt), "--fixture", str(fixture), "--out", str(out_dir)]) == EXIT_OK
    assert (out_dir / "layer0.pgm").read_bytes().startswith(b"P5\n4 4\n255\n")
    assert main(["heatmap", "--checkpoint", str(ckpt), "--fixture", str(fixture), "--layers", "5",
                 "--out", str(out_dir)]) == EXIT_USAGE
    bad = tmp_path / "bad.txt"
    bad.write_text(tensor.format_tensor(np.zeros((16, 4))))
    assert main(["heatmap", "--checkpoint", str(ckpt), "--fixture", str(bad), "--out", str(out_dir)]) == EXIT_USAGE


def test_train_divergence(tmp_path):
    args = ["train", "--steps", "50", "--lr", "1e12", "--optimizer", "momentum", "--metrics", str(tmp_path / "m")]
    assert main(args) == EXIT_USAGE


def test_corrupt_checkpoint(tmp_path):
    ckpt = tmp_path / "c.ckpt"
    ckpt.write_bytes(b"{}\n")
    fixture = tmp_path / "fx.txt"
    fixture.write_text(tensor.format_tensor(np.zeros((16, 32))))
    assert main(["heatmap", "--checkpoint", str(ckpt), "--fixture", str(fixture), "--out", str(tmp_path)]) == EXIT_IO


def test_bench(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"dims": [{"n": 16, "d": 8, "heads": 2, "d_ffn": 16, "d_adpt": 2}],
                                "r_values": [1, 4], "repetitions": 1}))
    out = tmp_path / "bench.csv"
    assert main(["bench", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    assert len(rows(out.read_text())) == 4
    assert main(["bench", "--spec", str(tmp_path / "missing.json")]) == EXIT_IO
