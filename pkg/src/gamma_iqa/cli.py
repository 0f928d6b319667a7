"""Command-line entry point: ``gamma-iqa <command> [flags]``.

Commands: synth, train, eval, ablate, gradcheck, prompts, report. Every
artifact lands under ``--out`` with a stable name, and every random choice is
derived from the single run seed.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    RenderConfig,
    default_suite_config,
    make_splits,
    mix_training_sets,
    suite_from_manifest,
    suite_manifest,
    synthesize_biased_suite,
    test_split,
    write_manifest,
    write_scores_csv,
)
from .diagnostics import run_battery
from .evaluation import EvalConfig, MetricsReport, activation_profile, evaluate
from .experiments import ExperimentSetup, ablation_suite, axis_variants
from .model import EncoderConfig, build_model
from .nn import load_checkpoint, save_checkpoint
from .prompts import PROMPT_STRATEGIES, prompt_table
from .training import SigmaLog, TrainConfig, train_mixed

log = logging.getLogger("gamma_iqa")


# ---------------------------------------------------------------- run config

@dataclass
class DataConfig:
    size: int = 500
    noise: float = 0.05
    manifest: str = ""  # regenerate the suite from this manifest instead


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    repeats: int = 1
    model: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["run"] = {"seed": str(self.seed), "out": self.out, "repeats": str(self.repeats)}
        for section in ("model", "training", "evaluation", "data", "render"):
            cp[section] = {k: _fmt(v) for k, v in asdict(getattr(self, section)).items()}
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)


def _fmt(value) -> str:
    return "none" if value is None else str(value).lower() if isinstance(value, bool) else str(value)


def _coerce(raw: str, default, name: str):
    text = raw.strip()
    if text.lower() == "none":
        return None
    if isinstance(default, bool):
        if text.lower() in ("true", "yes", "1", "on"):
            return True
        if text.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        try:
            return float(text)
        except ValueError:
            if default is None:
                return text
            raise ValueError(f"{name}: expected a number, got {raw!r}") from None
    return text


def _apply_section(obj, section: configparser.SectionProxy, label: str):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key not in known:
            raise ValueError(f"[{label}] unknown key {key!r}; expected one of {sorted(known)}")
        updates[key] = _coerce(raw, known[key], f"[{label}] {key}")
    return replace(obj, **updates)


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if not path:
        return cfg
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.optionxform = str  # field names such as L and K are case-sensitive
    cp.read(path, encoding="utf-8")
    for name in cp.sections():
        if name == "run":
            for key, raw in cp[name].items():
                if key not in ("seed", "out", "repeats"):
                    raise ValueError(f"[run] unknown key {key!r}")
                setattr(cfg, key, raw if key == "out" else int(raw))
        elif name in ("model", "training", "evaluation", "data", "render"):
            setattr(cfg, name, _apply_section(getattr(cfg, name), cp[name], name))
        else:
            raise ValueError(f"unknown config section [{name}]")
    return cfg


def apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.workers is not None:
        cfg.evaluation = replace(cfg.evaluation, workers=args.workers)
    if args.prompt_strategy is not None:
        cfg.training = replace(cfg.training, prompt_strategy=args.prompt_strategy)
    if args.experts is not None:
        cfg.model = replace(cfg.model, n_experts=args.experts)
    if args.moae_layers is not None:
        cfg.model = replace(cfg.model, K=args.moae_layers)
    if cfg.model.n_experts == 0:
        cfg.model = replace(cfg.model, K=0)
    cfg.training = replace(cfg.training, seed=cfg.seed)
    cfg.evaluation = replace(cfg.evaluation, seed=cfg.seed)
    cfg.model.validate()
    cfg.training.validate()
    return cfg


# ---------------------------------------------------------------- shared steps

def _suite(cfg: RunConfig):
    if cfg.data.manifest:
        manifest = json.loads(Path(cfg.data.manifest).read_text())
        datasets, seed, render = suite_from_manifest(manifest)
    else:
        datasets = default_suite_config(cfg.data.size, cfg.data.noise)
        seed, render = cfg.seed, cfg.render
    return datasets, seed, render, synthesize_biased_suite(datasets, seed, render)


def _repeat_dir(out: Path, cfg: RunConfig, r: int) -> Path:
    return out if cfg.repeats == 1 else out / f"repeat-{r}"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    datasets, seed, render, suite = _suite(cfg)
    write_manifest(_mk(out) / "manifest.json", suite_manifest(datasets, seed, render))
    for spec, samples in suite:
        write_scores_csv(_mk(out / "suite") / f"{spec.name}.csv", spec, samples)
        np.save(out / "suite" / f"{spec.name}.npy", np.stack([s.image for s in samples]))
    print(f"wrote {len(suite)} datasets ({sum(len(s) for _, s in suite)} samples) to {out}")
    return 0


def _mk(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(cfg: RunConfig, args) -> int:
    out = _mk(Path(cfg.out))
    datasets, seed, render, suite = _suite(cfg)
    write_manifest(out / "manifest.json", suite_manifest(datasets, seed, render))
    _write(out / "run_config.ini", cfg.to_ini())
    plans = make_splits([s for s, _ in suite], cfg.seed, cfg.repeats)
    for plan in plans:
        model = build_model(cfg.model, cfg.seed)
        stream = mix_training_sets(plan, suite, cfg.seed)
        result = train_mixed(model, stream, cfg.training)
        target = _mk(_repeat_dir(out, cfg, plan.repeat))
        (target / "checkpoint.bin").write_bytes(save_checkpoint(model))
        if result.sigma_log.records:
            result.sigma_log.write_csv(target / "sigma.csv")
        epochs = [{"epoch": e["epoch"], "mean_loss": e["mean_loss"]} for e in result.epoch_log]
        _write(target / "train_log.json", json.dumps({"steps": result.steps, "epochs": epochs}, indent=2) + "\n")
        print(f"repeat {plan.repeat}: {result.steps} steps, final epoch loss {epochs[-1]['mean_loss'] if epochs else float('nan'):.6f}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    _, _, _, suite = _suite(cfg)
    strategy = args.eval_prompt_strategy or cfg.training.prompt_strategy
    plans = make_splits([s for s, _ in suite], cfg.seed, cfg.repeats)
    runs = []
    for plan in plans:
        src = _repeat_dir(out, cfg, plan.repeat) / "checkpoint.bin"
        if not src.is_file():
            raise FileNotFoundError(f"no checkpoint at {src}; run 'train' first")
        model = build_model(cfg.model, cfg.seed)
        load_checkpoint(model, src.read_bytes())
        tests = test_split(plan, suite)
        runs.append(evaluate(model, tests, strategy, cfg.evaluation, repeat=plan.repeat))
        if model.moae_layers():
            activation_profile(model, tests, strategy).write_csv(_repeat_dir(out, cfg, plan.repeat) / "activations.csv")
    report = MetricsReport.aggregate(runs)
    _write(out / "metrics.json", report.to_json())
    for name, m in sorted(report.median.items()):
        print(f"{name:16s} SRCC {m['srcc']:.4f}  PLCC {m['plcc']:.4f}")
    print(f"{'mean':16s} SRCC {report.mean_srcc():.4f}  PLCC {report.mean_plcc():.4f}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    values = [v for v in args.values.split(",") if v] if args.values else _default_values(args.axis)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    variants = axis_variants(args.axis, values)
    setup = ExperimentSetup(
        encoder=cfg.model,
        training=cfg.training,
        evaluation=cfg.evaluation,
        datasets=default_suite_config(cfg.data.size, cfg.data.noise),
        render=cfg.render,
    )
    _, table = ablation_suite(variants, seeds, setup, Path(cfg.out), per_expert=args.per_expert)
    sys.stdout.write(table)
    return 0


def _default_values(axis: str) -> list[str]:
    return {
        "n_experts": ["0", "1", "3"],
        "moae_layers": ["0", "3", "6"],
        "sdp_moae": ["neither", "sdp-only", "moae-only", "both"],
        "modules": ["default", "unfreeze-shared", "no-sigma"],
        "eval_prompt": list(PROMPT_STRATEGIES),
    }[axis]


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    def show(r):
        print(f"{r.name:16s} max rel error {r.max_rel_error:.3e}  tol {r.tol:.0e}  {'ok' if r.passed else 'FAIL'}", flush=True)

    results = run_battery(args.trials, cfg.seed, progress=show)
    return 0 if all(r.passed for r in results) else 1


def cmd_prompts(cfg: RunConfig, args) -> int:
    sys.stdout.write(prompt_table())
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    metric_files = sorted(p for p in out.rglob("metrics.json"))
    if not metric_files:
        raise FileNotFoundError(f"no metrics.json under {out}")
    reports = {str(p.parent.relative_to(out)) or ".": MetricsReport.from_json(p.read_text()) for p in metric_files}
    names = sorted(next(iter(reports.values())).median)
    lines = ["\t".join(["run"] + [f"{n}:srcc" for n in names] + ["mean:srcc", "mean:plcc"])]
    for label, rep in reports.items():
        lines.append("\t".join([label] + [f"{rep.median[n]['srcc']:.4f}" for n in names]
                               + [f"{rep.mean_srcc():.4f}", f"{rep.mean_plcc():.4f}"]))
    sigma_lines = ["run\tencoder\tlayer\tfinal_step\tfinal_sigma"]
    for p in sorted(out.rglob("sigma.csv")):
        log_ = SigmaLog.read_csv(p)
        keys = sorted({(r.encoder, r.layer) for r in log_.records})
        for enc, layer in keys:
            steps, vals = log_.series(enc, layer)
            sigma_lines.append(f"{p.parent.relative_to(out) or '.'}\t{enc}\t{layer}\t{steps[-1]}\t{vals[-1]:.6f}")
    table = "\n".join(lines) + "\n"
    _write(out / "report.tsv", table)
    _write(out / "sigma_summary.tsv", "\n".join(sigma_lines) + "\n")
    sys.stdout.write(table)
    return 0


COMMANDS = {
    "synth": (cmd_synth, "synthesize the biased multi-scene suite and its manifest"),
    "train": (cmd_train, "train on the mixed suite; writes checkpoint.bin, sigma.csv"),
    "eval": (cmd_eval, "evaluate checkpoints; writes metrics.json, activations.csv"),
    "ablate": (cmd_ablate, "run an ablation axis across seeds; writes comparison.tsv"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every layer and the score pipeline"),
    "prompts": (cmd_prompts, "print the scene prompt table"),
    "report": (cmd_report, "tabulate metrics.json and sigma.csv files under --out"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="evaluation worker threads")
    common.add_argument("--prompt-strategy", choices=PROMPT_STRATEGIES, help="training prompt strategy")
    common.add_argument("--experts", type=int, help="adaptive experts per MoAE layer (0 = baseline)")
    common.add_argument("--moae-layers", type=int, help="number of trailing MoAE layers K")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gamma-iqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "eval":
            p.add_argument("--eval-prompt-strategy", choices=PROMPT_STRATEGIES,
                           help="prompt strategy at evaluation (default: the training one)")
        if name == "ablate":
            p.add_argument("--axis", required=True, choices=["n_experts", "moae_layers", "sdp_moae", "modules", "eval_prompt"])
            p.add_argument("--values", help="comma-separated axis values")
            p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
            p.add_argument("--per-expert", action="store_true", help="also evaluate each expert alone")
        if name == "gradcheck":
            p.add_argument("--trials", type=int, default=20)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = apply_flags(load_run_config(args.config), args)
        return COMMANDS[args.command][0](cfg, args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"gamma-iqa {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
