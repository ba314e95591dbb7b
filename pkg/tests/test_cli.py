from pathlib import Path

import pytest

from gsa import tensor as T
from gsa.cli import main
from gsa.training import read_metrics

TINY = str(Path(__file__).resolve().parents[1] / "configs" / "tiny.toml")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", TINY, "--out-dir", str(out)]) == 0
    return out


def test_train_writes_outputs(trained):
    for name in ("metrics.csv", "checkpoint.npz", "report.txt", "training.png"):
        assert (trained / name).is_file(), name
    rows = read_metrics(trained / "metrics.csv")
    assert len(rows) == 50
    assert [r["step"] for r in rows[:3]] == ["0", "1", "2"]
    assert "probe_lm_loss" in (trained / "report.txt").read_text()


def test_train_is_byte_deterministic(trained, tmp_path):
    assert main(["train", "--config", TINY, "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()


def test_seed_override_changes_run(trained, tmp_path):
    assert main(["train", "--config", TINY, "--out-dir", str(tmp_path), "--seed", "1"]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() != (trained / "metrics.csv").read_bytes()


def test_mode_sweep_writes_subdirectories(tmp_path):
    assert main(["train", "--config", TINY, "--out-dir", str(tmp_path), "--mode-override", "standard,gated_only"]) == 0
    assert (tmp_path / "standard" / "metrics.csv").is_file()
    assert (tmp_path / "gated_only" / "checkpoint.npz").is_file()


def test_unknown_mode_is_input_error(tmp_path, capsys):
    assert main(["train", "--config", TINY, "--out-dir", str(tmp_path), "--mode-override", "dense"]) == 2
    assert "unknown modes" in capsys.readouterr().err


def test_eval_and_sink_report(trained, tmp_path, capsys):
    ckpt = str(trained / "checkpoint.npz")
    assert main(["eval", "--checkpoint", ckpt]) == 0
    assert "probe_lm_loss" in capsys.readouterr().out
    assert main(["sink-report", "--checkpoint", ckpt, "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "sink_report.csv").read_text().splitlines()
    assert lines[0] == "# gsa-sink/1"
    assert lines[1] == "checkpoint,layer,first_token_attn,mean_gate,max_activation,mean_k"
    assert len(lines) == 3
    assert (tmp_path / "sink_report.png").stat().st_size > 0


def test_missing_checkpoint_exits_2(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.npz")]) == 2
    assert "not found" in capsys.readouterr().err


def test_config_checkpoint_mismatch_exits_2(trained, tmp_path, capsys):
    other = tmp_path / "other.toml"
    other.write_text(Path(TINY).read_text().replace("n_layers = 1", "n_layers = 2"))
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.npz"), "--config", str(other)]) == 2
    assert "n_layers" in capsys.readouterr().err


def test_bench_formula_only(tmp_path, capsys):
    code = main(["bench", "--table1", "--formula-only", "--L", "128000", "--k", "2048", "--modes", "gsa",
                 "--out-dir", str(tmp_path)])
    assert code == 0
    assert "speedup 12.7x" in capsys.readouterr().out
    assert (tmp_path / "bench.csv").read_text().startswith("# gsa-bench/1\nL,k,mode,")


def test_bench_measures_and_plots(tmp_path):
    assert main(["bench", "--config", TINY, "--L", "32,64", "--k", "8", "--out-dir", str(tmp_path)]) == 0
    assert len((tmp_path / "bench.csv").read_text().splitlines()) == 2 + 2 * 4
    assert (tmp_path / "bench.png").stat().st_size > 0


def test_bench_refuses_oversized_length(tmp_path, capsys):
    assert main(["bench", "--table1", "--L", "128000", "--k", "2048", "--out-dir", str(tmp_path)]) == 2
    assert "refusing" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--max-coords", "4"]) == 0
    assert "all gradients agree" in capsys.readouterr().out


def test_gradcheck_names_a_corrupted_rule(monkeypatch, capsys):
    orig = T.RULES["sigmoid"]
    monkeypatch.setitem(T.RULES, "sigmoid", lambda ctx, g, out: tuple(x * 1.01 for x in orig(ctx, g, out)))
    assert main(["gradcheck", "--max-coords", "2"]) == 1
    assert "op sigmoid" in capsys.readouterr().err
