import json
import os

import numpy as np
import pytest

from grant.cli import main
from grant.config import ConfigError, dump, load_preset, preset_names, resolve
from grant.flexgcn import LayerSpec, init_params, save_checkpoint
from grant.graph import Dataset, Graph, save_dataset

SMALL = ["--set", "num_graphs=60", "--set", "split=40,10,10", "--set", "nodes_mean=10"]


@pytest.fixture(scope="module")
def reg_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("reg")
    assert main(["generate", "--preset", "gen-reg-mini", "--out-dir", str(out), *SMALL]) == 0
    return out


def train_args(data, out, *extra):
    return ["train", "--preset", "gen-reg-mini", "--out-dir", str(out), "--set", f"data_dir={data}",
            "--set", "epochs=4", "--set", "batch_size=8", *extra]


def without_wallclock(csv_text):
    rows = [line.split(",") for line in csv_text.splitlines()]
    col = rows[0].index("wallclock_ms")
    return [r[:col] + r[col + 1:] for r in rows]


class TestConfig:
    def test_presets_shipped(self):
        names = set(preset_names())
        assert {"qm9", "zinc", "ogbg-molhiv", "ogbg-molpcba", "gen-reg", "gen-cls",
                "gen-reg-mini", "gen-cls-mini"} <= names

    def test_table_values(self):
        cls = resolve("gen-cls")
        assert (cls.lr, cls.kappas, cls.batch_size, cls.start_ratio, cls.epochs) == (0.0002, (4, 3), 200, 0.05, 500)

    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("lr = 0.5\nepochs = 3  # comment\n")
        cfg = resolve("qm9", cfg_file, {"epochs": 9})
        assert (cfg.lr, cfg.epochs, cfg.batch_size) == (0.5, 9, 256)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key bogus"):
            resolve(overrides={"bogus": 1})

    def test_dump_round_trip(self, tmp_path):
        cfg = resolve("ogbg-molhiv")
        (tmp_path / "r.cfg").write_text(dump(cfg))
        assert resolve(config_path=tmp_path / "r.cfg") == cfg

    def test_layer_spec_broadcasts_width(self):
        assert resolve("zinc").layer_spec(5, 1, False) == LayerSpec((5, 64, 64, 64, 1), (5, 4, 2, 2), "sum")

    def test_preset_file_keys_valid(self):
        for name in preset_names():
            load_preset(name)


class TestGenerate:
    def test_cls_mini(self, tmp_path):
        out = tmp_path / "missing" / "cls"
        assert main(["generate", "--preset", "gen-cls-mini", "--out-dir", str(out)]) == 0
        sizes = [len((out / f"{n}.jsonl").read_text().splitlines()) for n in ("train", "val", "test")]
        assert sum(sizes) == 2000
        assert (out / "metadata.json").is_file() and (out / "resolved.cfg").is_file()

    def test_unknown_key(self, tmp_path, capsys):
        assert main(["generate", "--preset", "gen-reg-mini", "--out-dir", str(tmp_path), "--set", "colour=red"]) == 1
        assert "unknown key colour" in capsys.readouterr().err

    def test_needs_config(self, capsys):
        assert main(["generate"]) == 1

    def test_bad_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--no-such-flag"])
        assert exc.value.code == 1


class TestTrain:
    def test_outputs(self, reg_data, tmp_path):
        out = tmp_path / "run"
        assert main(train_args(reg_data, out, "--policy", "B", "--set", "checkpoint_every=2")) == 0
        for name in ("resolved.cfg", "log.csv", "selection_events.jsonl", "final.json", "summary.json"):
            assert (out / name).is_file()
        assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["epoch_00002.json", "epoch_00004.json"]
        header = (out / "log.csv").read_text().splitlines()[0]
        assert header == "epoch,wallclock_ms,train_evals,forward_evals,train_loss,val_loss,metric,lr,selection_event"
        assert "policy = B" in (out / "resolved.cfg").read_text()

    def test_qm9_resolved_config(self, reg_data, tmp_path):
        out = tmp_path / "qm9"
        args = ["train", "--preset", "qm9", "--out-dir", str(out), "--set", f"data_dir={reg_data}",
                "--set", "epochs=0"]
        assert main(args) == 0
        text = (out / "resolved.cfg").read_text()
        for line in ("lr = 5e-05", "kappas = 3,2", "batch_size = 256", "start_ratio = 0.05"):
            assert line in text.splitlines()
        assert (out / "log.csv").read_text().splitlines() == [
            "epoch,wallclock_ms,train_evals,forward_evals,train_loss,val_loss,metric,lr,selection_event"]

    def test_resolved_epochs_echo(self):
        assert "epochs = 750" in dump(resolve("qm9")).splitlines()

    def test_none_vs_b_first_event(self, reg_data, tmp_path):
        assert main(train_args(reg_data, tmp_path / "a", "--policy", "none")) == 0
        assert main(train_args(reg_data, tmp_path / "b", "--policy", "B", "--set", "start_ratio=1")) == 0
        a = without_wallclock((tmp_path / "a" / "log.csv").read_text())
        b = without_wallclock((tmp_path / "b" / "log.csv").read_text())
        col = a[0].index("forward_evals")
        strip = [[v for i, v in enumerate(r) if i not in (col, len(r) - 1)] for r in a], \
                [[v for i, v in enumerate(r) if i not in (col, len(r) - 1)] for r in b]
        # with every batch kept, selection only adds scoring work and event flags
        assert strip[0] == strip[1]

    def test_deterministic(self, reg_data, tmp_path):
        for sub in ("x", "y"):
            assert main(train_args(reg_data, tmp_path / sub, "--policy", "S", "--seed", "5")) == 0
        logs = [without_wallclock((tmp_path / s / "log.csv").read_text()) for s in ("x", "y")]
        assert logs[0] == logs[1]
        assert (tmp_path / "x" / "final.json").read_bytes() == (tmp_path / "y" / "final.json").read_bytes()

    def test_missing_data(self, tmp_path):
        assert main(train_args(tmp_path / "nothing", tmp_path / "out")) == 1

    def test_threads_env(self, reg_data, tmp_path, monkeypatch):
        monkeypatch.setenv("GRANT_THREADS", "1")
        assert main(train_args(reg_data, tmp_path / "t", "--set", "epochs=1")) == 0


class TestEval:
    def test_report_fields(self, reg_data, tmp_path, capsys):
        main(train_args(reg_data, tmp_path / "run"))
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(tmp_path / "run" / "final.json"),
                     "--data", str(reg_data / "test.jsonl"), "--out", str(tmp_path / "rep.json")]) == 0
        report = json.loads(capsys.readouterr().out)
        assert {"loss", "mae"} <= set(report)
        assert json.loads((tmp_path / "rep.json").read_text()) == report

    def test_zero_residual(self, tmp_path, capsys):
        spec = LayerSpec((2, 3, 1), (2, 2), "sum")
        params = init_params(spec, 0)
        rng = np.random.default_rng(0)
        from grant.flexgcn import forward

        graphs = []
        for n in (3, 4):
            g = Graph(rng.standard_normal((n, 2)), np.ones((n, n)) - np.eye(n), 0.0)
            graphs.append(g.with_target(forward(params, spec, g)[0]))
        save_dataset(Dataset(tuple(graphs), "graph-regression"), tmp_path / "toy.jsonl")
        save_checkpoint(params, tmp_path / "c.json")
        assert main(["eval", "--checkpoint", str(tmp_path / "c.json"), "--data", str(tmp_path / "toy.jsonl")]) == 0
        assert json.loads(capsys.readouterr().out)["mae"] == 0.0

    def test_single_class(self, tmp_path, capsys):
        spec = LayerSpec((1, 1), (1,), "sum")
        graphs = tuple(Graph(np.ones((2, 1)), np.zeros((2, 2)), 1.0) for _ in range(3))
        save_dataset(Dataset(graphs, "graph-classification"), tmp_path / "one.jsonl")
        save_checkpoint(init_params(spec, 0), tmp_path / "c.json")
        code = main(["eval", "--checkpoint", str(tmp_path / "c.json"), "--data", str(tmp_path / "one.jsonl")])
        assert code == 2
        assert "degenerate labels" in capsys.readouterr().err


class TestGntk:
    @pytest.fixture
    def graph_data(self, tmp_path):
        assert main(["generate", "--preset", "gen-reg-mini", "--out-dir", str(tmp_path / "g"), *SMALL,
                     "--set", "target_level=graph"]) == 0
        return tmp_path / "g" / "train.jsonl"

    def test_single(self, graph_data, tmp_path, capsys):
        save_checkpoint(init_params(LayerSpec((8, 4, 1), (2, 2), "sum"), 0), tmp_path / "c.json")
        out = tmp_path / "k"
        assert main(["gntk", "--checkpoint", str(tmp_path / "c.json"), "--data", str(graph_data),
                     "--probe-size", "8", "--out-dir", str(out)]) == 0
        assert sorted(p.name for p in out.iterdir()) == ["gntk_report.json", "kernel_000.csv", "kernel_000.npz"]
        assert "drift" not in json.loads((out / "gntk_report.json").read_text())

    def test_identical_checkpoints(self, graph_data, tmp_path):
        save_checkpoint(init_params(LayerSpec((8, 4, 1), (2, 2), "sum"), 0), tmp_path / "c.json")
        ck = str(tmp_path / "c.json")
        assert main(["gntk", "--checkpoint", ck, "--checkpoint", ck, "--data", str(graph_data),
                     "--probe-size", "8", "--out-dir", str(tmp_path / "k")]) == 0
        report = json.loads((tmp_path / "k" / "gntk_report.json").read_text())
        assert report["drift"] == [0.0]

    def test_sequence_reports_ratio(self, graph_data, tmp_path):
        cks = []
        for seed in range(3):
            save_checkpoint(init_params(LayerSpec((8, 4, 1), (2, 2), "sum"), seed), tmp_path / f"c{seed}.json")
            cks += ["--checkpoint", str(tmp_path / f"c{seed}.json")]
        assert main(["gntk", *cks, "--data", str(graph_data), "--probe-size", "8",
                     "--out-dir", str(tmp_path / "k")]) == 0
        report = json.loads((tmp_path / "k" / "gntk_report.json").read_text())
        assert len(report["drift"]) == 2 and report["final_over_first"] > 0

    def test_node_level_is_runtime_error(self, reg_data, tmp_path):
        save_checkpoint(init_params(LayerSpec((8, 4, 1), (2, 2), "none"), 0), tmp_path / "c.json")
        assert main(["gntk", "--checkpoint", str(tmp_path / "c.json"), "--data", str(reg_data / "train.jsonl"),
                     "--out-dir", str(tmp_path / "k")]) == 2


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "grant.cli", "eval"], capture_output=True, text=True,
                         env={**os.environ})
    assert res.returncode == 1
