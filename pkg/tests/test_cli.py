import json

import pytest

from gamma_iqa import cli

TINY = """\
[run]
seed = 5

[model]
L = 2
K = 2
d = 8
heads = 2
n_experts = 2

[training]
epochs = 1

[evaluation]
views = 2

[data]
size = 100
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_prompts_lists_every_scene(capsys):
    assert run("prompts") == 0
    out = capsys.readouterr().out
    assert "face bad-quality image" in out and "natural perfect-aesthetics image" in out


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        run("nonsense")
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("train", "--prompt-strategy", "fancy")
    assert exc.value.code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "missing.ini") == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nwidth = 3\n")
    assert run("train", "--config", bad) == 1
    assert "unknown key" in capsys.readouterr().err
    assert run("eval", "--out", tmp_path / "empty", "--experts", "0") == 1


def test_config_round_trip(config, tmp_path):
    cfg = cli.load_run_config(str(config))
    assert (cfg.seed, cfg.model.d, cfg.training.epochs, cfg.data.size) == (5, 8, 1, 100)
    echo = tmp_path / "echo.ini"
    echo.write_text(cfg.to_ini())
    assert cli.load_run_config(str(echo)) == cfg


def test_flags_override_config(config):
    args = cli.build_parser().parse_args(
        ["train", "--config", str(config), "--seed", "9", "--experts", "0", "--workers", "4", "--prompt-strategy", "naive"]
    )
    cfg = cli.apply_flags(cli.load_run_config(args.config), args)
    assert cfg.seed == cfg.training.seed == cfg.evaluation.seed == 9
    assert (cfg.model.n_experts, cfg.model.K) == (0, 0)
    assert cfg.evaluation.workers == 4 and cfg.training.prompt_strategy == "naive"


def test_synth_writes_suite(config, tmp_path):
    out = tmp_path / "synth"
    assert run("synth", "--config", config, "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 5
    csvs = sorted(p.name for p in (out / "suite").glob("*.csv"))
    assert len(csvs) == 5 and len(list((out / "suite").glob("*.npy"))) == 5


def test_train_eval_report(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", "--config", config, "--out", out) == 0
    for name in ("checkpoint.bin", "sigma.csv", "train_log.json", "run_config.ini", "manifest.json"):
        assert (out / name).is_file(), name
    assert run("eval", "--config", config, "--out", out) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert len(metrics["median"]) == 5
    assert (out / "activations.csv").read_text().startswith("dataset,")
    capsys.readouterr()
    assert run("report", "--out", out) == 0
    assert capsys.readouterr().out.startswith("run\t")
    assert (out / "sigma_summary.tsv").read_text().count("visual") == 2


def test_manifest_reproduces_suite(config, tmp_path):
    a = tmp_path / "a"
    run("synth", "--config", config, "--out", a)
    manifested = tmp_path / "m.ini"
    manifested.write_text(TINY.replace("size = 100", f"size = 100\nmanifest = {a / 'manifest.json'}").replace("seed = 5", "seed = 6"))
    b = tmp_path / "b"
    run("synth", "--config", manifested, "--out", b)
    for p in sorted((a / "suite").iterdir()):
        assert p.read_bytes() == (b / "suite" / p.name).read_bytes()


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--trials", "1") == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 9 and all(line.endswith("ok") for line in lines)
