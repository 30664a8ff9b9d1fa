"""Desk-scale model zoo: procedural shape images and a grid of small trained CNNs."""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .measures import accuracy
from .model_io import (Dataset, ZooRecord, canonical_json, load_dataset, load_model, load_zoo_manifest,
                       save_dataset, save_model, save_zoo_manifest)
from .vicinal import hsv_to_rgb

log = logging.getLogger(__name__)

SHAPES = ("disc", "bar", "cross", "ring", "square", "triangle")
AXES = ("width", "depth", "batch_size", "dropout", "weight_decay", "label_noise")


@dataclass
class SynthConfig:
    shapes: tuple = SHAPES
    image_size: int = 32
    position_jitter: float = 0.3
    scale: tuple = (0.5, 0.9)
    rotation: tuple = (0.0, math.pi)
    color_jitter: float = 0.04
    noise_sigma: float = 0.05
    background: float = 0.1

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.scale = tuple(float(s) for s in self.scale)
        self.rotation = tuple(float(r) for r in self.rotation)
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")
        if len(set(self.shapes)) != len(self.shapes):
            raise ValueError("shape vocabulary has duplicates")
        if not 0 < self.scale[0] <= self.scale[1]:
            raise ValueError(f"scale range must be positive and ordered, got {self.scale}")


def _shape_mask(shape, u, v, s):
    r = np.hypot(u, v)
    au, av = np.abs(u), np.abs(v)
    if shape == "disc":
        return r < 0.6 * s
    if shape == "ring":
        return np.abs(r - 0.55 * s) < 0.13 * s
    if shape == "bar":
        return (au < 0.85 * s) & (av < 0.2 * s)
    if shape == "cross":
        return ((au < 0.8 * s) & (av < 0.15 * s)) | ((av < 0.8 * s) & (au < 0.15 * s))
    if shape == "square":
        return np.maximum(au, av) < 0.45 * s
    if shape == "triangle":
        return (v > -0.4 * s) & (v < 0.6 * s - 1.7 * au)
    raise ValueError(shape)


def render(cfg: SynthConfig, label: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """One image of class ``label``: a coloured shape on a flat background plus noise."""
    size = cfg.image_size
    grid = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    cx, cy = rng.uniform(-cfg.position_jitter, cfg.position_jitter, 2) if cfg.position_jitter else (0.0, 0.0)
    s = rng.uniform(*cfg.scale)
    th = rng.uniform(*cfg.rotation)
    u = (xx - cx) * math.cos(th) + (yy - cy) * math.sin(th)
    v = -(xx - cx) * math.sin(th) + (yy - cy) * math.cos(th)
    mask = _shape_mask(cfg.shapes[label], u, v, s)
    cj = cfg.color_jitter
    hue = label / num_classes + (rng.uniform(-cj, cj) if cj else 0.0)
    val = 0.9 - (rng.uniform(0.0, 3 * cj) if cj else 0.0)
    color = hsv_to_rgb(np.array([hue, 0.8, val]))
    img = np.full((size, size, 3), cfg.background) + mask[..., None] * (color - cfg.background)
    if cfg.noise_sigma:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(cfg: SynthConfig, num_classes: int, n: int, seed: int, split: str = "train") -> Dataset:
    if num_classes > len(cfg.shapes):
        raise ValueError(f"{num_classes} classes but only {len(cfg.shapes)} shapes")
    labels = np.arange(n) % num_classes
    np.random.default_rng([seed, 0]).shuffle(labels)
    images = np.stack([render(cfg, int(labels[i]), num_classes, np.random.default_rng([seed, 1, i]))
                       for i in range(n)]) if n else np.zeros((0, cfg.image_size, cfg.image_size, 3))
    return Dataset(images.astype(np.float32), labels, num_classes, split)


def corrupt_labels(data: Dataset, fraction: float, seed: int) -> Dataset:
    """Replace exactly ``floor(fraction * N)`` labels with a uniformly drawn different class."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"corruption fraction must lie in [0, 1), got {fraction}")
    n = len(data)
    count = math.floor(fraction * n)
    if count == 0:
        return data.with_labels(data.labels.copy())
    rng = np.random.default_rng([seed, n])
    idx = np.sort(rng.choice(n, count, replace=False))
    labels = data.labels.copy()
    # uniform over the other kappa-1 classes
    labels[idx] = (labels[idx] + rng.integers(1, data.num_classes, count)) % data.num_classes
    return data.with_labels(labels)


# --- architectures and training ----------------------------------------------


def vgg_like(width: int, depth: int, num_classes: int, input_shape=(32, 32, 3), dropout: float = 0.0,
             seed: int = 0) -> tc.ModelSpec:
    """conv-relu, maxpool, (depth-1) x conv-relu, maxpool, [dropout], flatten, dense; He-normal init."""
    rng = np.random.default_rng(seed)
    h, w, c = input_shape

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)

    layers = [tc.conv2d(he((3, 3, c, width), 9 * c), np.zeros(width)), tc.relu(), tc.maxpool(2)]
    for _ in range(depth - 1):
        layers += [tc.conv2d(he((3, 3, width, width), 9 * width), np.zeros(width)), tc.relu()]
    layers.append(tc.maxpool(2))
    if dropout > 0:
        layers.append(tc.dropout(dropout))
    feat = (h // 4) * (w // 4) * width
    layers += [tc.flatten(), tc.dense(he((feat, num_classes), feat), np.zeros(num_classes))]
    return tc.ModelSpec(layers, input_shape, num_classes)


@dataclass
class TrainSpec:
    learning_rate: float = 0.05
    momentum: float = 0.9
    max_epochs: int = 200
    target_accuracy: float = 0.99

    def __post_init__(self):
        if not 0.5 < self.target_accuracy <= 1.0:
            raise ValueError(f"target accuracy must lie in (0.5, 1], got {self.target_accuracy}")


def train(model: tc.ModelSpec, data: Dataset, batch_size: int, weight_decay: float, spec: TrainSpec, seed: int):
    """Minibatch SGD with momentum until train accuracy reaches the target.

    Mutates the model's weights in place. Returns ``(epochs, train_accuracy, flags)``.
    """
    rng = np.random.default_rng([seed, 7])
    params = [layer for layer in model.layers if layer.kind in tc.PARAM_KINDS]
    velocity = [(np.zeros(p.weight.shape), None if p.bias is None else np.zeros(p.bias.shape)) for p in params]
    n = len(data)
    acc, flags = accuracy(model, data), []
    epoch = 0
    while acc < spec.target_accuracy and epoch < spec.max_epochs:
        epoch += 1
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            b = order[s:s + batch_size]
            loss, grads = tc.grad_wrt_weights(model, data.images[b], data.labels[b], rng=rng)
            if not math.isfinite(loss):
                return epoch, acc, ["diverged"]
            for layer, (gw, gb), (vw, vb) in zip(params, grads, velocity):
                vw *= spec.momentum
                vw += gw + weight_decay * layer.weight
                layer.weight -= (spec.learning_rate * vw).astype(np.float32)
                if vb is not None:
                    vb *= spec.momentum
                    vb += gb
                    layer.bias -= (spec.learning_rate * vb).astype(np.float32)
        acc = accuracy(model, data)
    if acc < spec.target_accuracy:
        flags.append("unsaturated")
    return epoch, acc, flags


# --- zoo ---------------------------------------------------------------------


@dataclass
class DataSpec:
    num_classes: int = 4
    train_size: int = 256
    test_size: int = 256
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class ZooConfig:
    grid: dict = field(default_factory=lambda: {
        "width": [8, 16], "depth": [1, 2], "batch_size": [32, 64],
        "dropout": [0.0], "weight_decay": [0.0005], "label_noise": [0.0, 0.25, 0.5]})
    data: DataSpec = field(default_factory=DataSpec)
    training: TrainSpec = field(default_factory=TrainSpec)
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.grid) - set(AXES)
        if unknown:
            raise ValueError(f"grid: unknown axes {sorted(unknown)}")
        missing = set(AXES) - set(self.grid)
        if missing:
            raise ValueError(f"grid: missing axes {sorted(missing)}")
        for axis in AXES:
            vals = self.grid[axis]
            if not isinstance(vals, (list, tuple)) or not vals:
                raise ValueError(f"grid.{axis}: expected a non-empty list")
            for v in vals:
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ValueError(f"grid.{axis}: non-numeric value {v!r}")
        for axis in ("width", "depth", "batch_size"):
            if any(int(v) != v or v < 1 for v in self.grid[axis]):
                raise ValueError(f"grid.{axis}: values must be positive integers")
        if any(not 0 <= v < 1 for v in self.grid["dropout"]):
            raise ValueError("grid.dropout: values must lie in [0, 1)")
        if any(not 0 <= v < 1 for v in self.grid["label_noise"]):
            raise ValueError("grid.label_noise: values must lie in [0, 1)")
        if any(v < 0 for v in self.grid["weight_decay"]):
            raise ValueError("grid.weight_decay: values must be >= 0")

    def points(self) -> list:
        """Grid points as ordered axis -> value dicts, in a fixed order."""
        return [dict(zip(AXES, combo)) for combo in itertools.product(*(self.grid[a] for a in AXES))]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ZooConfig":
        d = dict(d)
        data = dict(d.pop("data", {}))
        synth = SynthConfig(**data.pop("synth", {}))
        return cls(grid=d.pop("grid", cls().grid), data=DataSpec(**data, synth=synth),
                   training=TrainSpec(**d.pop("training", {})), **d)


def model_seed(zoo_seed: int, index: int) -> int:
    return int(np.random.default_rng([zoo_seed, index]).integers(2 ** 31))


def corrupted_splits(train: Dataset, test: Dataset, fraction: float, seed: int):
    return corrupt_labels(train, fraction, seed), corrupt_labels(test, fraction, seed + 1)


def _corruption(clean: Dataset, noisy: Dataset) -> dict:
    idx = np.flatnonzero(clean.labels != noisy.labels)
    return {"indices": idx.tolist(), "labels": noisy.labels[idx].tolist()}


def apply_corruption(data: Dataset, corruption: dict) -> Dataset:
    labels = data.labels.copy()
    labels[np.asarray(corruption.get("indices", []), dtype=np.int64)] = corruption.get("labels", [])
    return data.with_labels(labels)


def train_point(cfg: ZooConfig, index: int, point: dict, train_set: Dataset, test_set: Dataset):
    seed = model_seed(cfg.seed, index)
    noisy_train, noisy_test = corrupted_splits(train_set, test_set, point["label_noise"], seed)
    model = vgg_like(int(point["width"]), int(point["depth"]), cfg.data.num_classes,
                     train_set.images.shape[1:], point["dropout"], seed)
    epochs, train_acc, flags = train(model, noisy_train, int(point["batch_size"]), point["weight_decay"],
                                     cfg.training, seed)
    test_acc = accuracy(model, noisy_test) if "diverged" not in flags else 0.0
    record = ZooRecord(
        model_id=f"m{index:03d}", model_path=f"models/m{index:03d}/model.json", config=point,
        train_accuracy=train_acc, test_accuracy=test_acc, seed=seed,
        saturated=not flags, target_accuracy=cfg.training.target_accuracy, epochs=epochs, flags=flags,
        corruption={"train": _corruption(train_set, noisy_train), "test": _corruption(test_set, noisy_test)},
    )
    return model, record


def _train_job(args):
    cfg_dict, index, point, train_path, test_path = args
    cfg = ZooConfig.from_dict(cfg_dict)
    return train_point(cfg, index, point, load_dataset(train_path), load_dataset(test_path))


class ZooExists(FileExistsError):
    pass


def build_zoo(cfg: ZooConfig, out_dir, parallel: int = 1, force: bool = False, progress=None) -> list:
    """Train every grid point and write the zoo directory; returns the records."""
    out = Path(out_dir)
    if (out / "manifest.json").exists() and not force:
        raise ZooExists(f"{out} already holds a zoo (use force to overwrite)")
    points = cfg.points()
    if len(points) < 8:
        log.warning("grid has %d points; scoring is more informative with >= 8 models", len(points))
    d = cfg.data
    train_set = generate_dataset(d.synth, d.num_classes, d.train_size, d.seed, "train")
    test_set = generate_dataset(d.synth, d.num_classes, d.test_size, d.seed + 1, "test")
    out.mkdir(parents=True, exist_ok=True)
    train_path = save_dataset(train_set, out / "data" / "train.rgds")
    test_path = save_dataset(test_set, out / "data" / "test.rgds")
    (out / "zoo_config.json").write_text(canonical_json(cfg.to_dict()))

    jobs = [(cfg.to_dict(), i, p, str(train_path), str(test_path)) for i, p in enumerate(points)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = pool.map(_train_job, jobs)
            results = _collect(results, out, progress, len(jobs))
    else:
        results = _collect((train_point(cfg, i, p, train_set, test_set) for _, i, p, _, _ in jobs),
                           out, progress, len(jobs))
    save_zoo_manifest(out / "manifest.json", AXES, results,
                      extra={"train_data": "data/train.rgds", "test_data": "data/test.rgds"})
    return results


def _collect(results, out: Path, progress, total: int) -> list:
    records = []
    for model, record in results:
        save_model(model, out / record.model_path)
        (out / record.model_path).with_name("record.json").write_text(canonical_json(record.to_dict()))
        records.append(record)
        if progress:
            progress(len(records), total, record)
    return records


@dataclass
class Zoo:
    """A loaded zoo directory: manifest records plus the clean base datasets."""

    root: Path
    axes: list
    records: list
    train: Dataset
    test: Dataset

    @classmethod
    def open(cls, root) -> "Zoo":
        root = Path(root)
        axes, records, doc = load_zoo_manifest(root / "manifest.json")
        return cls(root, axes, records, load_dataset(root / doc.get("train_data", "data/train.rgds")),
                   load_dataset(root / doc.get("test_data", "data/test.rgds")))

    def model(self, record: ZooRecord) -> tc.ModelSpec:
        return load_model(self.root / record.model_path)

    def training_data(self, record: ZooRecord) -> Dataset:
        """The (possibly label-corrupted) training set this model was fit on."""
        return apply_corruption(self.train, record.corruption.get("train", {}))

    def test_data(self, record: ZooRecord) -> Dataset:
        return apply_corruption(self.test, record.corruption.get("test", {}))

    def scored_records(self, include_unsaturated: bool = False) -> list:
        return [r for r in self.records if include_unsaturated or r.saturated]


def read_config(path) -> ZooConfig:
    return ZooConfig.from_dict(json.loads(Path(path).read_text()))
