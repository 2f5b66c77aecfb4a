import csv
import io
import json

import numpy as np
import pytest

from butterfly_moe import checkpoint as ckpt
from butterfly_moe import cli
from butterfly_moe import model as M

TINY = ["--d_model", "16", "--d_ff", "32", "--n_experts", "4", "--seq_len", "6",
        "--n_train", "128", "--n_eval", "64", "--batch", "32"]


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    return list(csv.reader(io.StringIO(text)))


class TestTrain:
    def test_artifacts_and_manifest(self, tmp_path, capsys):
        code, out, _ = run(["train", "--seed", "1", "--epochs", "1", "--out", str(tmp_path)] + TINY, capsys)
        assert code == 0 and "token_accuracy=" in out
        names = {p.name for p in tmp_path.iterdir()}
        assert names == {"model.bmoe", "report.csv", "report.json", "timing.csv", "manifest.json"}
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seed"] == 1 and manifest["config"]["d_model"] == 16
        assert set(manifest["artifacts"]) == names - {"manifest.json"}
        for name, h in manifest["artifacts"].items():
            assert cli.git_blob_hash((tmp_path / name).read_bytes()) == h
        report = json.loads((tmp_path / "report.json").read_text())
        assert [e["epoch"] for e in report["epochs"]] == [0, 1]

    def test_git_blob_hash(self):
        # value printed by `git hash-object` for the file contents "hello\n"
        assert cli.git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"

    def test_epochs_zero(self, tmp_path, capsys):
        code, _, _ = run(["train", "--seed", "0", "--epochs", "0", "--out", str(tmp_path)] + TINY, capsys)
        assert code == 0
        table = rows((tmp_path / "report.csv").read_text())
        assert len(table) == 2 and table[1][0] == "0"

    def test_reports_deterministic(self, tmp_path, capsys):
        for d in ("a", "b"):
            assert cli.main(["train", "--seed", "5", "--epochs", "1", "--out", str(tmp_path / d)] + TINY) == 0
        for name in ("report.csv", "report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_config_file_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[model]\nd_model = 16\nd_ff = 32\nn_experts = 4\n\n[train]\nepochs = 3  # overridden\n"
                       "seq_len = 6\nn_train = 64\nn_eval = 32\nbatch = 32\n")
        code, _, _ = run(["train", "--config", str(cfg), "--seed", "2", "--epochs", "0", "--out", str(tmp_path / "o")], capsys)
        assert code == 0
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 0 and manifest["config"]["d_ff"] == 32

    def test_config_round_trip(self, tmp_path):
        c = M.ModelConfig(seed=4, d_model=32, lr=0.002)
        cli.write_config_file(c, tmp_path / "c.ini")
        assert cli.resolve_config(tmp_path / "c.ini") == c

    @pytest.mark.parametrize("argv", [
        ["train", "--epochs", "1"],                      # --seed missing
        ["train", "--seed", "0", "--d_model", "48"],     # not a power of two
        ["train", "--seed", "0", "--k", "9"],
        ["train", "--seed", "0", "--config", "/nonexistent.ini"],
    ])
    def test_config_errors_exit_2(self, argv, capsys, tmp_path):
        code, _, err = run(argv + ["--out", str(tmp_path)], capsys)
        assert code == 2 and err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[model]\nwidth = 3\n")
        assert run(["train", "--seed", "0", "--config", str(cfg), "--out", str(tmp_path)], capsys)[0] == 2

    def test_divergence_exit_3(self, tmp_path, capsys, monkeypatch):
        def boom(*a, **k):
            raise M.NumericError("loss became non-finite")
        monkeypatch.setattr(M, "run", boom)
        code, _, err = run(["train", "--seed", "0", "--out", str(tmp_path)] + TINY, capsys)
        assert code == 3 and "non-finite" in err

    def test_copy_five_epochs_learns(self, tmp_path, capsys):
        code, _, _ = run(["train", "--task", "copy", "--variant", "butterfly_moe", "--epochs", "5", "--seed", "0",
                          "--out", str(tmp_path)], capsys)
        assert code == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["epochs"][-1]["token_accuracy"] > 0.9


class TestReportMemory:
    def test_sweep(self, capsys):
        code, out, _ = run(["report-memory", "--n_experts", "8,16,32,64,128,256"], capsys)
        table = rows(out)
        assert code == 0 and table[0] == ["N_E", "standard_bytes", "butterfly_bytes", "ratio"]
        by_n = {int(r[0]): r for r in table[1:]}
        assert int(by_n[64][1]) == 256 * 2 ** 20
        assert 1.93e6 <= float(by_n[64][2]) <= 1.95e6
        ratios = [float(r[3]) for r in table[1:]]
        assert all(a < b for a, b in zip(ratios, ratios[1:]))

    def test_single(self, tmp_path, capsys):
        out = tmp_path / "m.csv"
        assert cli.main(["report-memory", "--n_experts", "64", "--output", str(out)]) == 0
        assert len(rows(out.read_text())) == 2
        assert out.read_bytes().endswith(b"\r\n")

    def test_invalid_dims(self, capsys):
        assert run(["report-memory", "--d_model", "500"], capsys)[0] == 2


class TestCheckpointCommands:
    @pytest.fixture(scope="class")
    def trained(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("run")
        assert cli.main(["train", "--seed", "0", "--epochs", "1", "--out", str(out)] + TINY) == 0
        return out / "model.bmoe"

    def test_quant_error(self, trained, capsys):
        code, out, _ = run(["quant-error", str(trained)], capsys)
        data = json.loads(out)
        assert code == 0 and set(data) == {"before_pct", "after_pct", "reduction_pct"}
        assert data["before_pct"] == pytest.approx(M.substrate_quant_error(M.build_model(ckpt.load(trained).config)))

    def test_diversity(self, trained, capsys):
        code, out, _ = run(["diversity", str(trained), "--probe_seed", "3"], capsys)
        table = rows(out)
        assert code == 0 and table[0][:3] == ["block", "expert", "e0"]
        assert len(table) == 1 + 2 * 4
        S = np.array([[float(v) for v in r[2:]] for r in table[1:5]])
        np.testing.assert_allclose(np.diag(S), 1.0, atol=1e-6)

    def test_cloned_angles_give_ones(self, tmp_path, capsys):
        model = M.build_model(M.ModelConfig(d_model=16, d_ff=32, n_experts=4, seq_len=6))
        for layer in model.moe_layers:
            for t in layer.theta[1:]:
                t.data[:] = layer.theta[0].data
            for t in layer.phi[1:]:
                t.data[:] = layer.phi[0].data
        path = ckpt.save(model, tmp_path / "c.bmoe")
        _, out, _ = run(["diversity", str(path)], capsys)
        S = np.array([[float(v) for v in r[2:]] for r in rows(out)[1:]])
        np.testing.assert_allclose(S, 1.0, atol=1e-6)

    def test_missing_checkpoint(self, capsys, tmp_path):
        assert run(["quant-error", str(tmp_path / "x.bmoe")], capsys)[0] == 2
        assert run(["diversity", str(tmp_path / "x.bmoe")], capsys)[0] == 2


class TestBench:
    def test_output_format(self, capsys):
        code, out, _ = run(["bench", "--layers", "1,2", "--d_model", "16", "--d_ff", "16", "--tokens", "32",
                            "--repeats", "1"], capsys)
        table = rows(out)
        assert code == 0 and table[0] == ["L", "tokens_per_s", "speedup", "workers"]
        assert [int(r[0]) for r in table[1:]] == [1, 2, 4]
        assert float(table[-1][2]) == 1.0 and all(r[3] == "1" for r in table[1:])

    def test_depth_out_of_range(self, capsys):
        assert run(["bench", "--layers", "12", "--d_model", "64", "--d_ff", "64"], capsys)[0] == 2


def test_tables(capsys):
    code, out, _ = run(["tables"], capsys)
    assert code == 0 and "ButterflyMoE" in out and "Jetson Nano" in out and "10540" in out
