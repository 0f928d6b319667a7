"""Ablation driver: train and evaluate named model variants on one synthetic
suite across seeds, and collect a comparison table."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    RenderConfig,
    SyntheticDataset,
    default_suite_config,
    make_splits,
    mix_training_sets,
    synthesize_biased_suite,
    test_split,
)
from .evaluation import ActivationProfile, EvalConfig, MetricsReport, activation_profile, evaluate, last_visual_layer
from .model import EncoderConfig, GammaModel, build_model
from .nn import ConfigurationError, save_checkpoint
from .prompts import PROMPT_STRATEGIES
from .training import SigmaLog, TrainConfig, train_mixed


@dataclass(frozen=True)
class Variant:
    name: str
    n_experts: int = 3
    K: int = 6
    prompt_strategy: str = "naive"
    eval_prompt_strategy: str | None = None  # None = same as training
    sigma_mode: str = "learned"
    unfreeze_shared: bool = False
    force_expert: int | None = None  # evaluate with a single routed expert

    def encoder_config(self, base: EncoderConfig) -> EncoderConfig:
        k = self.K if self.n_experts > 0 else 0
        return replace(base, n_experts=self.n_experts, K=min(k, base.L), sigma_mode=self.sigma_mode,
                       unfreeze_shared=self.unfreeze_shared)

    def validate(self) -> None:
        if self.n_experts < 0 or self.K < 0:
            raise ConfigurationError(f"{self.name}: negative expert or layer count")
        for s in (self.prompt_strategy, self.eval_prompt_strategy):
            if s is not None and s not in PROMPT_STRATEGIES:
                raise ConfigurationError(f"{self.name}: unknown prompt strategy {s!r}")


SDP_MOAE_GRID = (
    Variant("neither", n_experts=0, K=0, prompt_strategy="naive"),
    Variant("sdp-only", n_experts=0, K=0, prompt_strategy="sdp"),
    Variant("moae-only", n_experts=3, prompt_strategy="naive"),
    Variant("both", n_experts=3, prompt_strategy="sdp"),
)


def axis_variants(axis: str, values: Sequence) -> list[Variant]:
    """Variants along one named ablation axis (naive prompts unless the axis is prompting)."""
    if axis == "n_experts":
        return [Variant(f"experts-{v}", n_experts=int(v), K=6 if int(v) > 0 else 0) for v in values]
    if axis == "moae_layers":
        return [Variant(f"last-{v}-layers", n_experts=3 if int(v) > 0 else 0, K=int(v)) for v in values]
    if axis == "sdp_moae":
        grid = {v.name: v for v in SDP_MOAE_GRID}
        unknown = [v for v in values if v not in grid]
        if unknown:
            raise ConfigurationError(f"unknown sdp_moae value(s): {unknown}")
        return [grid[v] for v in values]
    if axis == "modules":
        table = {
            "default": Variant("default"),
            "unfreeze-shared": Variant("unfreeze-shared", unfreeze_shared=True),
            "no-sigma": Variant("no-sigma", sigma_mode="fixed"),
        }
        unknown = [v for v in values if v not in table]
        if unknown:
            raise ConfigurationError(f"unknown modules value(s): {unknown}")
        return [table[v] for v in values]
    if axis == "eval_prompt":
        for v in values:
            if v not in PROMPT_STRATEGIES:
                raise ConfigurationError(f"unknown prompt strategy {v!r}")
        return [Variant(f"sdp-trained-eval-{v}", prompt_strategy="sdp", eval_prompt_strategy=v) for v in values]
    raise ConfigurationError(f"unknown ablation axis {axis!r}")


@dataclass
class RunOutput:
    variant: Variant
    seed: int
    model: GammaModel
    metrics: dict
    sigma_log: SigmaLog
    profile: ActivationProfile | None
    losses: list[float]
    seconds: float
    expert_metrics: list[dict] = field(default_factory=list)


@dataclass
class ExperimentSetup:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    datasets: list[SyntheticDataset] = field(default_factory=default_suite_config)
    render: RenderConfig = field(default_factory=RenderConfig)


def run_variant(variant: Variant, seed: int, setup: ExperimentSetup, per_expert: bool = False) -> RunOutput:
    """Synthesize, split, train and evaluate one variant under one seed."""
    variant.validate()
    t0 = time.perf_counter()
    suite = synthesize_biased_suite(setup.datasets, seed, setup.render)
    plan = make_splits([spec for spec, _ in suite], seed, repeats=1)[0]
    stream = mix_training_sets(plan, suite, seed)
    tests = test_split(plan, suite)
    model = build_model(variant.encoder_config(setup.encoder), seed)
    train_cfg = replace(setup.training, seed=seed, prompt_strategy=variant.prompt_strategy)
    result = train_mixed(model, stream, train_cfg)
    eval_strategy = variant.eval_prompt_strategy or variant.prompt_strategy
    eval_cfg = replace(setup.evaluation, seed=seed)
    metrics = evaluate(model, tests, eval_strategy, eval_cfg)
    profile = activation_profile(model, tests, eval_strategy) if model.moae_layers() else None
    expert_metrics = []
    if per_expert and model.moae_layers():
        expert_metrics = per_expert_metrics(model, tests, eval_strategy, eval_cfg)
    return RunOutput(variant, seed, model, metrics, result.sigma_log, profile, result.losses,
                     time.perf_counter() - t0, expert_metrics)


def per_expert_metrics(model: GammaModel, tests: dict, strategy: str, config: EvalConfig) -> list[dict]:
    """Metrics with every MoAE layer forced onto one adaptive expert at a time."""
    import contextlib

    layers = [layer for _, _, layer in model.moae_layers()]
    out = []
    for i in range(layers[0].n):
        with contextlib.ExitStack() as stack:
            for layer in layers:
                stack.enter_context(layer.force_single_expert(i))
            out.append(evaluate(model, tests, strategy, config))
    return out


def mean_srcc(metrics: dict) -> float:
    return float(np.mean([m["srcc"] for m in metrics["datasets"].values()]))


def summarize(runs: Sequence[RunOutput]) -> dict[str, MetricsReport]:
    """Per-variant medians across seeds."""
    by_variant: dict[str, list[dict]] = {}
    for r in runs:
        by_variant.setdefault(r.variant.name, []).append(r.metrics)
    return {name: MetricsReport.aggregate(ms) for name, ms in by_variant.items()}


def comparison_table(reports: dict[str, MetricsReport], expert_rows: dict[str, list[MetricsReport]] | None = None) -> str:
    """Tab-separated table: one row per configuration, SRCC/PLCC per dataset."""
    names = sorted(next(iter(reports.values())).median)
    header = ["configuration"] + [f"{n}:{m}" for n in names for m in ("srcc", "plcc")] + ["mean:srcc", "mean:plcc"]
    lines = ["\t".join(header)]

    def row(label, rep):
        cells = [label] + [f"{rep.median[n][m]:.4f}" for n in names for m in ("srcc", "plcc")]
        cells += [f"{rep.mean_srcc():.4f}", f"{rep.mean_plcc():.4f}"]
        return "\t".join(cells)

    for label, rep in reports.items():
        lines.append(row(label, rep))
        for i, erep in enumerate((expert_rows or {}).get(label, [])):
            lines.append(row(f"{label}/expert-{i}", erep))
    return "\n".join(lines) + "\n"


def write_run(out_dir: Path, run: RunOutput) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(MetricsReport.aggregate([run.metrics]).to_json())
    run.sigma_log.write_csv(out_dir / "sigma.csv")
    if run.profile is not None:
        run.profile.write_csv(out_dir / "activations.csv")
    (out_dir / "checkpoint.bin").write_bytes(save_checkpoint(run.model))
    (out_dir / "variant.json").write_text(json.dumps(asdict(run.variant), indent=2, sort_keys=True) + "\n")


def ablation_suite(
    variants: Sequence[Variant],
    seeds: Sequence[int],
    setup: ExperimentSetup,
    out_dir: Path | None = None,
    per_expert: bool = False,
) -> tuple[list[RunOutput], str]:
    runs = []
    for variant in variants:
        for seed in seeds:
            run = run_variant(variant, seed, setup, per_expert=per_expert)
            runs.append(run)
            if out_dir is not None:
                write_run(Path(out_dir) / variant.name / f"seed-{seed}", run)
    reports = summarize(runs)
    expert_rows = {}
    if per_expert:
        for variant in variants:
            vr = [r for r in runs if r.variant.name == variant.name and r.expert_metrics]
            if vr:
                n = len(vr[0].expert_metrics)
                expert_rows[variant.name] = [MetricsReport.aggregate([r.expert_metrics[i] for r in vr]) for i in range(n)]
    table = comparison_table(reports, expert_rows)
    if out_dir is not None:
        (Path(out_dir) / "comparison.tsv").write_text(table)
    return runs, table
