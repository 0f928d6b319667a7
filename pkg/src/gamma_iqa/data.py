"""Dataset metadata, MOS normalisation, splits, mixed streams, CSV ingestion
and the synthetic multi-scene suite with per-dataset label bias.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .nn import ConfigurationError
from .prompts import Scene
from .seeding import derive_rng


class InputError(ValueError):
    """A score or record is outside its declared contract."""


class ParseError(ValueError):
    """Malformed input file."""


POLARITIES = ("higher-is-better", "higher-is-worse")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    scene: Scene
    mos_range: tuple[float, float]
    polarity: str = "higher-is-better"
    size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scene", Scene.parse(self.scene))
        low, high = self.mos_range
        object.__setattr__(self, "mos_range", (float(low), float(high)))
        if not low < high:
            raise ConfigurationError(f"{self.name}: MOS range low {low} must be below high {high}")
        if self.polarity not in POLARITIES:
            raise ConfigurationError(f"{self.name}: polarity must be one of {POLARITIES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.value
        d["mos_range"] = list(self.mos_range)
        return d


@dataclass
class Sample:
    image: np.ndarray  # (patches, channels)
    raw_mos: float
    norm_mos: float
    dataset: str
    scene: Scene
    sample_id: str = ""
    latent: float | None = None


def normalize_mos(spec: DatasetSpec, raw: float) -> float:
    """Min-max scale into [0, 1]; DMOS is flipped so higher is always better."""
    low, high = spec.mos_range
    if not (low <= raw <= high) or math.isnan(raw):
        raise InputError(f"{spec.name}: score {raw} outside declared range [{low}, {high}]")
    scaled = (raw - low) / (high - low)
    return 1.0 - scaled if spec.polarity == "higher-is-worse" else scaled


def denormalize_mos(spec: DatasetSpec, norm: float) -> float:
    low, high = spec.mos_range
    scaled = 1.0 - norm if spec.polarity == "higher-is-worse" else norm
    return low + scaled * (high - low)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitPlan:
    seed: int
    repeat: int
    train: dict  # dataset name -> tuple of indices
    test: dict

    def train_indices(self, name: str) -> tuple[int, ...]:
        return self.train[name]

    def test_indices(self, name: str) -> tuple[int, ...]:
        return self.test[name]


def make_splits(specs: Sequence[DatasetSpec], seed: int, repeats: int = 1, train_fraction: float = 0.8) -> list[SplitPlan]:
    if repeats < 1:
        raise ConfigurationError(f"repeats must be >= 1, got {repeats}")
    for spec in specs:
        if spec.size < 5:
            raise ConfigurationError(f"dataset {spec.name} has {spec.size} samples; need at least 5 to split")
    plans = []
    for r in range(repeats):
        train, test = {}, {}
        for spec in specs:
            perm = derive_rng(seed, "split", r, spec.name).permutation(spec.size)
            n_train = int(round(train_fraction * spec.size))
            train[spec.name] = tuple(sorted(int(i) for i in perm[:n_train]))
            test[spec.name] = tuple(sorted(int(i) for i in perm[n_train:]))
        plans.append(SplitPlan(seed, r, train, test))
    return plans


# ---------------------------------------------------------------- mixed stream

@dataclass
class TrainingStream:
    """Concatenated, seed-shuffled training samples from several datasets."""

    samples: list[Sample]
    seed: int
    weighting: str = "proportional"  # proportional | uniform

    def __len__(self) -> int:
        return len(self.samples)

    def epoch_order(self, epoch: int) -> np.ndarray:
        rng = derive_rng(self.seed, "shuffle", epoch)
        n = len(self.samples)
        if self.weighting == "uniform":
            by_ds: dict[str, list[int]] = {}
            for i, s in enumerate(self.samples):
                by_ds.setdefault(s.dataset, []).append(i)
            per = n // len(by_ds)
            picks = np.concatenate([rng.choice(idx, per, replace=len(idx) < per) for idx in by_ds.values()])
            return rng.permutation(picks)
        return rng.permutation(n)

    def batches(self, epoch: int, batch_size: int) -> Iterator[list[Sample]]:
        order = self.epoch_order(epoch)
        for start in range(0, len(order), batch_size):
            yield [self.samples[i] for i in order[start : start + batch_size]]

    def datasets(self) -> set[str]:
        return {s.dataset for s in self.samples}


def mix_training_sets(
    plan: SplitPlan, suite: Sequence[tuple[DatasetSpec, list[Sample]]], seed: int, weighting: str = "proportional"
) -> TrainingStream:
    if weighting not in ("proportional", "uniform"):
        raise ConfigurationError(f"weighting must be 'proportional' or 'uniform', got {weighting!r}")
    samples = []
    for spec, items in suite:
        if spec.name not in plan.train:
            raise ConfigurationError(f"split plan has no partition for dataset {spec.name}")
        for i in plan.train[spec.name]:
            samples.append(items[i])
    return TrainingStream(samples, seed, weighting)


def test_split(plan: SplitPlan, suite: Sequence[tuple[DatasetSpec, list[Sample]]]) -> dict[str, list[Sample]]:
    return {spec.name: [items[i] for i in plan.test[spec.name]] for spec, items in suite}


test_split.__test__ = False  # keep pytest from collecting it when imported


# ---------------------------------------------------------------- bias profiles

_SHAPES = {
    "identity": lambda z: z,
    "square": lambda z: z**2,
    "sqrt": lambda z: np.sqrt(z),
    "smoothstep": lambda z: z * z * (3.0 - 2.0 * z),
    "cube": lambda z: z**3,
}


@dataclass(frozen=True)
class BiasProfile:
    """Monotone latent-quality -> normalised-label map, plus label noise.

    ``label = offset + gain * shape(z)`` on [0, 1] before noise.
    """

    shape: str = "identity"
    gain: float = 1.0
    offset: float = 0.0
    noise: float = 0.05

    def __post_init__(self):
        if self.shape not in _SHAPES:
            raise ConfigurationError(f"unknown profile shape {self.shape!r}; expected one of {sorted(_SHAPES)}")
        grid = np.linspace(0.0, 1.0, 201)
        vals = self.clean(grid)
        if not np.all(np.diff(vals) > 0):
            raise ConfigurationError(f"bias profile {self} is not strictly increasing")
        if vals[0] < -1e-12 or vals[-1] > 1 + 1e-12:
            raise ConfigurationError(f"bias profile {self} leaves [0, 1]")
        if self.noise < 0:
            raise ConfigurationError("noise level must be non-negative")

    def clean(self, z):
        return self.offset + self.gain * _SHAPES[self.shape](np.asarray(z, dtype=np.float64))

    def __call__(self, z, rng: np.random.Generator | None = None):
        y = self.clean(z)
        if self.noise > 0:
            rng = rng or np.random.default_rng(0)
            y = y + rng.normal(0.0, self.noise, size=np.shape(y))
        return np.clip(y, 0.0, 1.0)


# ---------------------------------------------------------------- renderer

SCENE_ORDER = (
    Scene.NATURAL_QUALITY,
    Scene.AI_GENERATED_QUALITY,
    Scene.UNDERWATER_QUALITY,
    Scene.FACE_QUALITY,
    Scene.NATURAL_AESTHETICS,
    Scene.GENERAL,
)


@dataclass(frozen=True)
class RenderConfig:
    patch_grid: int = 4
    channels: int = 8
    content: float = 0.3  # amplitude of random scene content
    signature: float = 0.3  # strength of the scene signature
    cue: float = 1.0  # strength of the scene-specific mean shift
    noise_amp: float = 0.8  # distortion noise amplitude at z = 0


def _scene_pattern(scene: Scene, patches: int, channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (signature, quality-direction) pair for a scene.

    The signature is a fixed texture over the patch grid in the first two
    channels; the quality direction is a unit vector over the remaining
    channels whose orientation and sign differ between scenes.
    """
    k = SCENE_ORDER.index(scene)
    angle = 2.0 * math.pi * k / len(SCENE_ORDER)
    pos = np.arange(patches)
    sig = np.zeros((patches, channels))
    sig[:, 0] = math.cos(angle) + 0.5 * np.cos(2 * math.pi * (k + 1) * pos / patches)
    sig[:, 1] = math.sin(angle) + 0.5 * np.sin(2 * math.pi * (k + 1) * pos / patches)
    direction = np.zeros(channels)
    free = channels - 2
    direction[2 + (k % free)] = 1.0 if k % 2 == 0 else -1.0
    direction[2 + ((k + 3) % free)] = 0.5
    direction /= np.linalg.norm(direction)
    return sig, direction


def render_image(z: float, scene: Scene, rng: np.random.Generator, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Toy patch image whose statistics encode latent quality ``z`` and the scene.

    Distortion noise shrinks as quality rises (shared across scenes) and the
    patch mean moves along a scene-specific channel direction.
    """
    p = cfg.patch_grid**2
    c = cfg.channels
    sig, direction = _scene_pattern(scene, p, c)
    content = rng.normal(0.0, cfg.content, size=(p, c))
    content[:, :2] = 0.0
    noise = rng.normal(0.0, 1.0, size=(p, c)) * (cfg.noise_amp * (1.0 - z) + 0.05)
    cue = cfg.cue * (z - 0.5) * direction
    return cfg.signature * sig + content + noise + cue


# ---------------------------------------------------------------- suites

@dataclass
class SyntheticDataset:
    name: str
    scene: str
    mos_range: tuple[float, float]
    polarity: str
    profile: BiasProfile
    size: int = 500


def default_suite_config(size: int = 500, noise: float = 0.05) -> list[SyntheticDataset]:
    return [
        SyntheticDataset("syn-natural", "natural-quality", (1.0, 5.0), "higher-is-better",
                         BiasProfile("identity", 1.0, 0.0, noise), size),
        SyntheticDataset("syn-aigc", "ai-generated-quality", (0.0, 5.0), "higher-is-better",
                         BiasProfile("square", 1.0, 0.0, noise), size),
        SyntheticDataset("syn-underwater", "underwater-quality", (1.0, 10.0), "higher-is-better",
                         BiasProfile("sqrt", 1.0, 0.0, noise), size),
        SyntheticDataset("syn-face", "face-quality", (1.0, 100.0), "higher-is-worse",
                         BiasProfile("identity", 0.6, 0.2, noise), size),
        SyntheticDataset("syn-aesthetics", "natural-aesthetics", (1.0, 10.0), "higher-is-better",
                         BiasProfile("smoothstep", 1.0, 0.0, noise), size),
    ]


def synthesize_biased_suite(
    datasets: Sequence[SyntheticDataset] | None = None, seed: int = 0, render: RenderConfig = RenderConfig()
) -> list[tuple[DatasetSpec, list[Sample]]]:
    datasets = list(datasets) if datasets is not None else default_suite_config()
    if len({Scene.parse(d.scene) for d in datasets}) < 2:
        raise ConfigurationError("a synthetic suite needs at least two scenes")
    suite = []
    for ds in datasets:
        if ds.size < 100:
            raise ConfigurationError(f"{ds.name}: synthetic datasets need at least 100 samples")
        spec = DatasetSpec(ds.name, Scene.parse(ds.scene), tuple(ds.mos_range), ds.polarity, ds.size)
        rng = derive_rng(seed, "suite", ds.name)
        z = rng.uniform(0.0, 1.0, size=ds.size)
        labels = ds.profile(z, rng)
        samples = []
        for i in range(ds.size):
            image = render_image(float(z[i]), spec.scene, rng, render)
            raw = denormalize_mos(spec, float(labels[i]))
            raw = min(max(raw, spec.mos_range[0]), spec.mos_range[1])
            samples.append(Sample(image, raw, normalize_mos(spec, raw), spec.name, spec.scene, f"{ds.name}-{i:05d}", float(z[i])))
        suite.append((spec, samples))
    return suite


def suite_manifest(datasets: Sequence[SyntheticDataset], seed: int, render: RenderConfig = RenderConfig()) -> dict:
    return {
        "seed": seed,
        "render": asdict(render),
        "datasets": [
            {
                "name": d.name,
                "scene": Scene.parse(d.scene).value,
                "mos_range": list(d.mos_range),
                "polarity": d.polarity,
                "size": d.size,
                "profile": asdict(d.profile),
            }
            for d in datasets
        ],
    }


def suite_from_manifest(manifest: dict) -> tuple[list[SyntheticDataset], int, RenderConfig]:
    datasets = [
        SyntheticDataset(
            d["name"], d["scene"], tuple(d["mos_range"]), d["polarity"], BiasProfile(**d["profile"]), int(d["size"])
        )
        for d in manifest["datasets"]
    ]
    return datasets, int(manifest["seed"]), RenderConfig(**manifest.get("render", {}))


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- CSV scores

_POLARITY_TOKENS = {"mos": "higher-is-better", "dmos": "higher-is-worse"}


def write_scores_csv(path, spec: DatasetSpec, samples: Sequence[Sample]) -> None:
    token = "dmos" if spec.polarity == "higher-is-worse" else "mos"
    low, high = spec.mos_range
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"#range,{low!r},{high!r},{token}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "dataset", "scene", "mos"])
        for s in samples:
            writer.writerow([s.sample_id, s.dataset, Scene.parse(s.scene).value, repr(float(s.raw_mos))])


def load_scores_csv(path) -> tuple[DatasetSpec, list[Sample]]:
    """Read a score file; images are not part of the schema and stay empty."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#range"):
        raise ParseError(f"{path}:1: missing '#range,<low>,<high>,<polarity>' directive")
    parts = lines[0].split(",")
    if len(parts) != 4 or parts[3].strip().lower() not in _POLARITY_TOKENS:
        raise ParseError(f"{path}:1: malformed range directive {lines[0]!r}")
    try:
        low, high = float(parts[1]), float(parts[2])
    except ValueError:
        raise ParseError(f"{path}:1: non-numeric range in {lines[0]!r}") from None
    polarity = _POLARITY_TOKENS[parts[3].strip().lower()]
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if header != ["sample_id", "dataset", "scene", "mos"]:
        raise ParseError(f"{path}:2: expected header sample_id,dataset,scene,mos, got {header}")
    rows = []
    for lineno, row in enumerate(reader, start=3):
        if not row:
            continue
        if len(row) != 4:
            raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        try:
            mos = float(row[3])
            scene = Scene.parse(row[2])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        rows.append((lineno, row[0], row[1], scene, mos))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    names = {r[2] for r in rows}
    scenes = {r[3] for r in rows}
    if len(names) != 1 or len(scenes) != 1:
        raise ParseError(f"{path}: a score file must describe exactly one dataset and scene")
    spec = DatasetSpec(rows[0][2], rows[0][3], (low, high), polarity, len(rows))
    samples = []
    for lineno, sid, name, scene, mos in rows:
        try:
            norm = normalize_mos(spec, mos)
        except InputError as exc:
            raise InputError(f"{path}:{lineno} (sample {sid}): {exc}") from None
        samples.append(Sample(np.zeros((0, 0)), mos, norm, name, scene, sid))
    return spec, samples
