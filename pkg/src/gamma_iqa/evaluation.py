"""Correlation metrics, the view-averaged evaluation protocol and router
activation profiling."""
from __future__ import annotations

import contextlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Sample
from .model import GammaModel
from .moae import write_activation_csv
from .nn import ConfigurationError
from .seeding import derive_rng


class UndefinedCorrelationError(ValueError):
    """Correlation requested for constant or too-short input."""


def _validate(pred, target) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} predictions vs {y.size} targets")
    if x.size < 2:
        raise UndefinedCorrelationError("need at least two points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return x, y


def rankdata(a: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    a = np.asarray(a, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(a.size)
    boundaries = np.flatnonzero(np.diff(sorted_a)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [a.size]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        raise UndefinedCorrelationError("zero variance")
    return float(np.clip((xc * yc).sum() / denom, -1.0, 1.0))


def plcc(pred, target) -> float:
    x, y = _validate(pred, target)
    return _pearson(x, y)


def srcc(pred, target) -> float:
    x, y = _validate(pred, target)
    return _pearson(rankdata(x), rankdata(y))


# ---------------------------------------------------------------- protocol

@dataclass
class EvalConfig:
    views: int = 10
    view_patches: int = 12
    seed: int = 0
    workers: int = 1
    batch_size: int = 256


@dataclass
class MetricsReport:
    per_run: list[dict] = field(default_factory=list)  # {"repeat", "seed", "datasets": {name: {srcc, plcc}}}
    median: dict = field(default_factory=dict)  # name -> {srcc, plcc}

    def mean_srcc(self) -> float:
        return float(np.mean([v["srcc"] for v in self.median.values()]))

    def mean_plcc(self) -> float:
        return float(np.mean([v["plcc"] for v in self.median.values()]))

    def to_json(self) -> str:
        payload = {"median": self.median, "runs": self.per_run,
                   "mean": {"srcc": self.mean_srcc(), "plcc": self.mean_plcc()}}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        payload = json.loads(text)
        return cls(payload["runs"], payload["median"])

    @classmethod
    def aggregate(cls, runs: Sequence[dict]) -> "MetricsReport":
        names = sorted(runs[0]["datasets"])
        median = {
            name: {
                metric: float(np.median([r["datasets"][name][metric] for r in runs]))
                for metric in ("srcc", "plcc")
            }
            for name in names
        }
        return cls(list(runs), median)


def view_positions(n_samples: int, patches: int, keep: int, views: int, rng: np.random.Generator) -> np.ndarray:
    """(views, n_samples, keep) sorted random patch subsets."""
    if not 1 <= keep <= patches:
        raise ConfigurationError(f"view_patches must be in [1, {patches}], got {keep}")
    keys = rng.random((views, n_samples, patches))
    return np.sort(np.argsort(keys, axis=-1)[..., :keep], axis=-1)


def predict_dataset(
    model: GammaModel,
    samples: Sequence[Sample],
    strategy: str,
    config: EvalConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """View-averaged scores for ``samples``."""
    images = np.stack([s.image for s in samples])
    scenes = [s.scene for s in samples]
    n, p, _ = images.shape
    pos = view_positions(n, p, config.view_patches, config.views, rng)
    total = np.zeros(n)
    with T.no_grad():
        for v in range(config.views):
            for start in range(0, n, config.batch_size):
                sl = slice(start, start + config.batch_size)
                idx = pos[v, sl]
                crops = np.take_along_axis(images[sl], idx[..., None], axis=1)
                total[sl] += model.score_scenes(crops, scenes[sl], strategy, positions=idx).data
    return total / config.views


def evaluate(
    model: GammaModel,
    test_split: dict[str, Sequence[Sample]],
    strategy: str = "sdp",
    config: EvalConfig = EvalConfig(),
    repeat: int = 0,
    predictor: Callable | None = None,
) -> dict:
    """Per-dataset SRCC/PLCC for one trained model on one split."""
    names = sorted(test_split)

    def one(name):
        samples = test_split[name]
        if not samples:
            raise ValueError(f"{name}: empty test split")
        rng = derive_rng(config.seed, "views", repeat, name)
        if predictor is not None:
            pred = np.asarray(predictor(samples), dtype=np.float64)
        else:
            pred = predict_dataset(model, samples, strategy, config, rng)
        target = np.array([s.norm_mos for s in samples])
        try:
            return name, {"srcc": srcc(pred, target), "plcc": plcc(pred, target)}
        except UndefinedCorrelationError as exc:
            raise UndefinedCorrelationError(f"{name}: {exc}") from None

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(one, names))
    else:
        results = [one(n) for n in names]
    return {"repeat": repeat, "seed": config.seed, "datasets": dict(results)}


def evaluate_protocol(runs: Sequence[tuple[GammaModel, dict]], strategy: str, config: EvalConfig) -> MetricsReport:
    """Evaluate one model per split repeat and report medians across repeats."""
    return MetricsReport.aggregate([evaluate(m, split, strategy, config, repeat=r) for r, (m, split) in enumerate(runs)])


# ---------------------------------------------------------------- routing

@dataclass
class ActivationProfile:
    rows: dict = field(default_factory=dict)  # (dataset, layer) -> mean weight vector

    def as_rows(self):
        for (dataset, layer), vec in sorted(self.rows.items()):
            for i, w in enumerate(vec):
                yield dataset, layer, i, float(w)

    def write_csv(self, path) -> None:
        write_activation_csv(path, self.as_rows())

    def vector(self, dataset: str, layer: str) -> np.ndarray:
        return self.rows[(dataset, layer)]

    def max_pairwise_l1(self, layer: str) -> float:
        names = sorted({d for d, l in self.rows if l == layer})
        best = 0.0
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                best = max(best, float(np.abs(self.rows[(a, layer)] - self.rows[(b, layer)]).sum()))
        return best


def activation_profile(model: GammaModel, test_split: dict[str, Sequence[Sample]], strategy: str = "sdp") -> ActivationProfile:
    """Mean router weights per dataset and MoAE layer over all test tokens."""
    layers = model.moae_layers()
    if not layers:
        raise ConfigurationError("activation profile needs a model with MoAE layers (n_experts > 0)")
    profile = ActivationProfile()
    for name in sorted(test_split):
        samples = test_split[name]
        images = np.stack([s.image for s in samples])
        scenes = [s.scene for s in samples]
        with T.no_grad(), contextlib.ExitStack() as stack:
            bufs = [stack.enter_context(layer.capture_routing()) for _, _, layer in layers]
            model.score_scenes(images, scenes, strategy)
        for (encoder, index, _), buf in zip(layers, bufs):
            profile.rows[(name, f"{encoder}.{index}")] = np.concatenate(buf, axis=0).mean(axis=0)
    return profile


def last_visual_layer(model: GammaModel) -> str:
    visual = [i for enc, i, _ in model.moae_layers() if enc == "visual"]
    if not visual:
        raise ConfigurationError("model has no visual MoAE layer")
    return f"visual.{max(visual)}"
