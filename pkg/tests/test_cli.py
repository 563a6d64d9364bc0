import json
import subprocess
import sys

import pytest

from hvs.cli import main
from hvs.harness import ResultTable

TINY_EXPERIMENT = {
    "dataset": {"num_identities": 42, "samples_per_identity": 6, "input_dim": 8, "latent_dim": 4},
    "embedding_dim": 4,
    "gallery": {"widths": [16, 16], "recipe": {"epochs": 3, "lr": 0.3}},
    "query_recipe": {"epochs": 2},
    "calibration_size": 32,
    "search_space": {"num_layers": 2, "block_kinds": [0, 1, 3], "width_choices": [0.5, 1.0], "base_width": 8},
    "supernet": {"warmup_epochs": 1, "recipe": {"epochs": 2}},
    "evolution": {"generations": 2, "population_size": 8, "crossover_size": 4},
    "correlation": {"n_archs": 3},
    "seeds": [0],
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--identities", "42", "--per-id", "6", "--dim", "8", "--out", str(d / "data")]) == 0
    assert main(["train-gallery", "--split", str(d / "data" / "split.hvss"), "--widths", "20,20",
                 "--embedding-dim", "4", "--epochs", "3", "--out", str(d / "g.ckpt")]) == 0
    return d


def _split(d):
    return str(d / "data" / "split.hvss")


class TestPipeline:
    def test_gen_data_outputs(self, workdir, capsys):
        assert main(["gen-data", "--identities", "30", "--per-id", "4", "--dim", "6",
                     "--out", str(workdir / "d2")]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["train"] > 0 and (workdir / "d2" / "dataset.hvsd").exists()

    def test_gallery_log(self, workdir):
        log = json.loads((workdir / "g.log.json").read_text())
        assert len(log["epochs"]) == 3 and {"epoch", "loss", "lr"} <= set(log["epochs"][0])

    def test_prune(self, workdir):
        assert main(["prune", "--checkpoint", str(workdir / "g.ckpt"), "--split", _split(workdir),
                     "--fraction", "0.5", "--out", str(workdir / "p.ckpt")]) == 0
        assert json.loads((workdir / "p.log.json").read_text())["widths"] == [10, 10]

    @pytest.mark.parametrize("method", ["vanilla", "kd", "finetune", "bct"])
    def test_train_query(self, workdir, method):
        out = workdir / f"q_{method}.ckpt"
        assert main(["train-query", "--split", _split(workdir), "--method", method,
                     "--gallery-ckpt", str(workdir / "g.ckpt"), "--prune-fraction", "0.5",
                     "--epochs", "2", "--out", str(out)]) == 0
        assert out.exists() and len(json.loads(out.with_suffix(".log.json").read_text())["epochs"]) == 2

    def test_eval(self, workdir, capsys):
        main(["train-query", "--split", _split(workdir), "--method", "bct", "--gallery-ckpt",
              str(workdir / "g.ckpt"), "--kinds", "1", "--widths", "6", "--epochs", "2",
              "--out", str(workdir / "q.ckpt")])
        capsys.readouterr()
        assert main(["eval", "--query-model", str(workdir / "q.ckpt"), "--gallery-model", str(workdir / "g.ckpt"),
                     "--split", _split(workdir), "--metric", "tpir", "--out", str(workdir / "ev")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("metric") and (workdir / "ev.csv").exists() and (workdir / "ev.json").exists()

    def test_supernet_and_search(self, workdir, capsys):
        space = workdir / "space.json"
        space.write_text(json.dumps({"num_layers": 2, "block_kinds": [0, 1], "width_choices": [0.5, 1.0],
                                     "base_width": 8}))
        assert main(["train-supernet", "--split", _split(workdir), "--space", str(space), "--gallery-ckpt",
                     str(workdir / "g.ckpt"), "--epochs", "2", "--warmup", "1", "--out",
                     str(workdir / "s.ckpt")]) == 0
        assert main(["search", "--split", _split(workdir), "--supernet-ckpt", str(workdir / "s.ckpt"),
                     "--gallery-ckpt", str(workdir / "g.ckpt"), "--generations", "2", "--population", "6",
                     "--crossover", "3", "--out", str(workdir / "search.json")]) == 0
        log = json.loads((workdir / "search.json").read_text())
        top5 = json.loads((workdir / "search.top5.json").read_text())
        assert len(log["generations"]) == 2 and top5 == log["top5"]
        assert all(c["flops"] <= log["flop_budget"] for g in log["generations"] for c in g)


class TestCommands:
    def test_cost_curve(self, tmp_path, capsys):
        assert main(["cost-curve", "--fg", "7597", "--fq", "329", "--ratios", "0,1000000",
                     "--out", str(tmp_path / "c.csv")]) == 0
        rows = (tmp_path / "c.csv").read_text().splitlines()
        assert rows[1] == "0,7597,329,7597.000000"
        assert float(rows[2].split(",")[-1]) == pytest.approx(329, rel=1e-3)

    def test_flag_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "flags.json"
        cfg.write_text(json.dumps({"fg": 100, "fq": 10, "ratios": "1"}))
        assert main(["cost-curve", "--config", str(cfg)]) == 0
        assert "1,100,10,55.000000" in capsys.readouterr().out
        assert main(["cost-curve", "--config", str(cfg), "--fq", "20"]) == 0
        assert "60.000000" in capsys.readouterr().out

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "flags.json"
        cfg.write_text(json.dumps({"fgg": 1}))
        assert main(["cost-curve", "--config", str(cfg), "--fq", "1"]) == 1
        assert "unknown option" in capsys.readouterr().err

    def test_errors_exit_nonzero(self, tmp_path, capsys):
        assert main(["train-gallery", "--split", str(tmp_path / "missing.hvss"), "--out", str(tmp_path / "x")]) == 1
        assert main(["cost-curve", "--fg", "1", "--fq", "1", "--ratios=-1"]) == 1
        assert "error" in capsys.readouterr().err

    def test_version(self):
        out = subprocess.run([sys.executable, "-m", "hvs.cli", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and "checkpoint format" in out.stdout


class TestExperimentCommands:
    def test_compare_with_plots_and_report(self, tmp_path):
        cfg = tmp_path / "exp.json"
        cfg.write_text(json.dumps(TINY_EXPERIMENT))
        out = tmp_path / "res"
        assert main(["compare", "--config", str(cfg), "--out-dir", str(out), "--plots"]) == 0
        table = ResultTable.from_csv((out / "method_comparison.csv").read_text())
        assert len(table) == 8
        assert json.loads((out / "config.json").read_text())["seeds"] == [0]
        for name in ("method_comparison.json", "gallery.json", "cost_curves.csv", "method_comparison.png",
                     "cost_curves.png"):
            assert (out / name).exists(), name
        (out / "method_comparison.png").unlink()
        assert main(["report", str(out)]) == 0
        assert (out / "method_comparison.png").exists()

    def test_correlate_and_ablate(self, tmp_path):
        cfg = tmp_path / "exp.json"
        cfg.write_text(json.dumps(TINY_EXPERIMENT))
        out = tmp_path / "res"
        assert main(["correlate", "--config", str(cfg), "--out-dir", str(out), "--n-archs", "3", "--plots"]) == 0
        summary = json.loads((out / "correlation.json").read_text())
        assert summary["studies"][0]["n_archs"] == 3
        assert (out / "correlation.png").exists()
        assert main(["ablate", "--config", str(cfg), "--out-dir", str(out), "--set", "seeds=[1]"]) == 0
        assert len(ResultTable.from_csv((out / "reward_ablation.csv").read_text())) == 20

    def test_bad_override(self, tmp_path, capsys):
        assert main(["compare", "--set", "bogus=1", "--out-dir", str(tmp_path)]) == 1
