import numpy as np
import pytest

from gamma_iqa.data import default_suite_config
from gamma_iqa.evaluation import EvalConfig
from gamma_iqa.experiments import SDP_MOAE_GRID, ExperimentSetup, Variant, ablation_suite, axis_variants, mean_srcc
from gamma_iqa.model import EncoderConfig
from gamma_iqa.nn import ConfigurationError
from gamma_iqa.training import TrainConfig

SETUP = ExperimentSetup(
    encoder=EncoderConfig(L=2, K=2, d=8, heads=2, n_experts=2),
    training=TrainConfig(epochs=1),
    evaluation=EvalConfig(views=2),
    datasets=default_suite_config(size=100),
)


def test_grid_shape():
    assert [v.name for v in SDP_MOAE_GRID] == ["neither", "sdp-only", "moae-only", "both"]
    assert {v.prompt_strategy for v in SDP_MOAE_GRID[::2]} == {"naive"}
    base = EncoderConfig()
    assert SDP_MOAE_GRID[0].encoder_config(base).K == 0
    assert SDP_MOAE_GRID[3].encoder_config(base).n_experts == 3


def test_axis_variants():
    names = [v.name for v in axis_variants("n_experts", [0, 1, 3])]
    assert names == ["experts-0", "experts-1", "experts-3"]
    assert axis_variants("moae_layers", [0])[0].encoder_config(EncoderConfig()).n_experts == 0
    assert axis_variants("eval_prompt", ["general"])[0].eval_prompt_strategy == "general"
    for axis, values in [("sdp_moae", ["nope"]), ("modules", ["x"]), ("eval_prompt", ["x"]), ("depth", [1])]:
        with pytest.raises(ConfigurationError):
            axis_variants(axis, values)
    with pytest.raises(ConfigurationError):
        Variant("bad", n_experts=-1).validate()


def test_ablation_suite_writes_runs_and_table(tmp_path):
    variants = [Variant("base", n_experts=0, K=0), Variant("moe", n_experts=2, K=2)]
    runs, table = ablation_suite(variants, [0, 1], SETUP, tmp_path, per_expert=True)
    assert len(runs) == 4
    for v in ("base", "moe"):
        for s in (0, 1):
            assert (tmp_path / v / f"seed-{s}" / "metrics.json").is_file()
    assert (tmp_path / "moe" / "seed-0" / "activations.csv").is_file()
    assert not (tmp_path / "base" / "seed-0" / "activations.csv").exists()
    rows = [line.split("\t")[0] for line in table.splitlines()[1:]]
    assert rows == ["base", "moe", "moe/expert-0", "moe/expert-1"]
    assert (tmp_path / "comparison.tsv").read_text() == table


def test_forced_experts_score_differently():
    runs, _ = ablation_suite([Variant("moe", n_experts=2, K=2)], [0], SETUP, per_expert=True)
    # after one epoch sigma is small, so ranks can tie; PLCC still moves
    first, second = ({k: v["plcc"] for k, v in m["datasets"].items()} for m in runs[0].expert_metrics)
    assert first != second
    assert np.isfinite(mean_srcc(runs[0].metrics))
