"""Representation-quality complexity measures and norm/margin baselines.

Every measure returns a :class:`MeasureValue` oriented so that a higher value
predicts a larger generalization gap.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc
from .model_io import Dataset
from .vicinal import AugmentConfig, LabeledBatch, MixupSpec, augment, mixup_pairs

EPS = 1e-12


class DegenerateClustering(ValueError):
    pass


class MeasureError(ValueError):
    pass


@dataclass
class MeasureValue:
    measure_id: str
    value: float
    layer: int | None
    budget: int
    seeds: dict
    config: dict
    higher_is_larger_gap: bool = True
    counters: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    parents: list = field(default_factory=list)

    def __post_init__(self):
        self.value = float(self.value)
        if math.isnan(self.value):
            raise MeasureError(f"{self.measure_id}: NaN value")
        if not self.measure_id or self.config is None:
            raise MeasureError("measure id and config are required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeasureValue":
        return cls(**d)


# --- sampling helpers --------------------------------------------------------


def default_budget(n: int) -> int:
    return min(n, max(1000, math.ceil(0.01 * n)))


def select_samples(n: int, budget: int | None, seed: int) -> np.ndarray:
    """Sorted indices of a seeded subsample of size ``budget`` (all when it covers ``n``)."""
    budget = default_budget(n) if budget is None else min(int(budget), n)
    if budget >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng([int(seed), n, budget]).choice(n, budget, replace=False))


def _batch(data: Dataset, idx) -> LabeledBatch:
    return LabeledBatch(data.images[idx], data.labels[idx], idx)


def resolve_layer(model: tc.ModelSpec, selector) -> int:
    """Trace index for ``'first'``, ``'third_from_last'``, ``'input'`` or an explicit int.

    ``first`` is the output of the first convolution's activation (the relu right
    after it, when there is one). ``third_from_last`` is the output of the third
    layer from the end, not counting a trailing softmax.
    """
    if isinstance(selector, (int, np.integer)):
        k = int(selector)
    elif selector == "input":
        k = 0
    elif selector == "first":
        convs = [i for i, layer in enumerate(model.layers) if layer.kind == "conv2d"]
        if not convs:
            convs = [i for i, layer in enumerate(model.layers) if layer.kind in tc.PARAM_KINDS]
        p = convs[0]
        k = p + 2 if p + 1 < len(model.layers) and model.layers[p + 1].kind == "relu" else p + 1
    elif selector in ("third_from_last", "third-from-last"):
        k = model.logit_index - 2
    else:
        raise ValueError(f"unknown layer selector {selector!r}")
    if not 0 <= k <= model.logit_index:
        raise IndexError(f"layer selector {selector!r} resolves to {k}, outside [0, {model.logit_index}]")
    return k


def accuracy(model: tc.ModelSpec, data: Dataset) -> float:
    """Fraction of samples whose true-class logit strictly beats all others."""
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset")
    return 1.0 - float(tc.zero_one_errors(tc.predict(model, data.images), data.labels).mean())


# --- clustering indices ------------------------------------------------------


def reduce_representation(a: np.ndarray, method: str = "maxpool4", components: int = 64) -> np.ndarray:
    """Dimensionality reduction applied before clustering; returns (n, features) float64."""
    a = np.asarray(a)
    if method == "maxpool4" and a.ndim == 4:
        win = min(4, a.shape[1], a.shape[2])
        a, _ = tc._maxpool_forward(tc.maxpool(win, 1), a)
    flat = a.reshape(len(a), -1).astype(np.float64)
    if method == "pca":
        centered = flat - flat.mean(axis=0)
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        rank = int((s > s[0] * 1e-10).sum()) if s.size and s[0] > 0 else 0
        return centered @ vt[:max(1, min(components, rank))].T
    if method not in ("maxpool4", "none", "pca"):
        raise ValueError(f"unknown reduction {method!r}")
    return flat


def davies_bouldin(points, labels, p: float = 2, aggregation: str = "mean"):
    """Davies-Bouldin index with RMS-type scatter and Minkowski-p centroid separation.

    ``aggregation='max'`` is the classic index; ``'mean'`` averages each cluster's
    ratios over all other clusters. Returns ``(value, skipped_pairs)``.
    """
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DegenerateClustering("need at least two clusters")
    cents = np.stack([x[labels == c].mean(axis=0) for c in classes])
    scatter = np.array([
        np.mean(np.sum((x[labels == c] - cents[i]) ** 2, axis=1) ** (p / 2.0)) ** (1.0 / p)
        for i, c in enumerate(classes)
    ])
    diff = np.abs(cents[:, None, :] - cents[None, :, :])
    sep = np.sum(diff ** p, axis=-1) ** (1.0 / p)
    skipped = 0
    per_cluster = []
    for i in range(len(classes)):
        ratios = []
        for j in range(len(classes)):
            if i == j:
                continue
            if sep[i, j] < EPS:
                skipped += 1
                continue
            ratios.append((scatter[i] + scatter[j]) / sep[i, j])
        if ratios:
            per_cluster.append(max(ratios) if aggregation == "max" else float(np.mean(ratios)))
    if aggregation not in ("max", "mean"):
        raise ValueError(f"aggregation must be 'max' or 'mean', got {aggregation!r}")
    if not per_cluster:
        raise DegenerateClustering("every centroid pair coincides")
    return float(np.mean(per_cluster)), skipped


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient (Euclidean)."""
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DegenerateClustering("need at least two clusters")
    sq = np.sum(x ** 2, axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))
    np.fill_diagonal(dist, 0.0)
    scores = np.zeros(len(x))
    for n in range(len(x)):
        own = labels == labels[n]
        if own.sum() == 1:
            continue
        a = dist[n, own].sum() / (own.sum() - 1)
        b = min(dist[n, labels == c].mean() for c in classes if c != labels[n])
        scores[n] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def calinski_harabasz(points, labels) -> float:
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    n, k = len(x), len(classes)
    if k < 2 or n <= k:
        raise DegenerateClustering("need 2 <= clusters < samples")
    mean = x.mean(axis=0)
    between = within = 0.0
    for c in classes:
        xc = x[labels == c]
        mc = xc.mean(axis=0)
        between += len(xc) * np.sum((mc - mean) ** 2)
        within += np.sum((xc - mc) ** 2)
    if within == 0.0:
        return math.inf
    return float(between * (n - k) / (within * (k - 1)))


# --- consistency: clustering of representations ------------------------------


@dataclass
class DbiConfig:
    layer: object = "first"
    reduction: str = "maxpool4"
    aggregation: str = "mean"
    index: str = "davies-bouldin"
    batch_size: int | None = None
    num_batches: int = 8
    p: float = 2.0
    pca_components: int = 64
    max_retries: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.index not in ("davies-bouldin", "silhouette", "calinski-harabasz"):
            raise ValueError(f"unknown clustering index {self.index!r}")
        if self.aggregation not in ("mean", "max"):
            raise ValueError(f"aggregation must be 'mean' or 'max', got {self.aggregation!r}")
        if self.reduction not in ("maxpool4", "pca", "none"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


def cluster_index(points, labels, cfg: DbiConfig):
    """Clustering-quality score oriented so higher = worse clustering. Returns (value, skipped)."""
    if cfg.index == "davies-bouldin":
        return davies_bouldin(points, labels, cfg.p, cfg.aggregation)
    if cfg.index == "silhouette":
        return (1.0 - silhouette(points, labels)) / 2.0, 0
    ch = calinski_harabasz(points, labels)
    return (0.0 if math.isinf(ch) else 1.0 / ch), 0


def dbi_measure(model: tc.ModelSpec, data: Dataset, cfg: DbiConfig = None, budget: int | None = None,
                measure_id: str = "dbi") -> MeasureValue:
    """Clustering index of class-labelled layer representations, averaged over minibatches."""
    cfg = cfg or DbiConfig()
    k = resolve_layer(model, cfg.layer)
    pool = select_samples(len(data), budget, cfg.seed)
    labels = data.labels[pool]
    kappa = data.num_classes
    bs = min(len(pool), cfg.batch_size or 24 * kappa)
    if bs < 4:
        raise MeasureError(f"batch size {bs} too small for clustering")
    values, retries, skipped, dropped = [], 0, 0, 0
    for b in range(cfg.num_batches):
        for attempt in range(cfg.max_retries + 1):
            rng = np.random.default_rng([cfg.seed, b, attempt])
            pick = np.sort(rng.choice(len(pool), bs, replace=False))
            classes, counts = np.unique(labels[pick], return_counts=True)
            if (counts >= 2).sum() >= 2:
                break
            retries += 1
        else:
            raise DegenerateClustering(f"batch {b}: fewer than two classes with >= 2 samples after retries")
        keep = np.isin(labels[pick], classes[counts >= 2])
        dropped += int((~keep).sum())
        pick = pick[keep]
        reps = tc.activations(model, data.images[pool[pick]], k)
        red = reduce_representation(reps, cfg.reduction, cfg.pca_components)
        v, s = cluster_index(red, labels[pick], cfg)
        values.append(v)
        skipped += s
    return MeasureValue(
        measure_id, float(np.mean(values)), k, len(pool), {"batch": cfg.seed},
        {**asdict(cfg), "layer": cfg.layer, "batch_size": bs},
        counters={"skipped_pairs": skipped, "resampled_batches": retries, "dropped_singletons": dropped},
    )


# --- robustness: label-wise mixup --------------------------------------------


def mixup_measure(model: tc.ModelSpec, data: Dataset, spec: MixupSpec = None, budget: int | None = None,
                  seed: int = 0, measure_id: str = "mixup") -> MeasureValue:
    """Class-averaged 0-1 error of the sub-network on same-class mixed representations."""
    spec = spec or MixupSpec()
    k = spec.layer
    if k > model.logit_index:
        raise IndexError(f"mixup layer {k} lies past the logits")
    pool = select_samples(len(data), budget, seed)
    batch = _batch(data, pool)
    res = mixup_pairs(batch, spec, {k: tc.activations(model, batch.x, k)})
    if len(res.labels) == 0:
        raise MeasureError("no class has two samples to mix")
    err = tc.zero_one_errors(tc.predict(model, res.reps, k=k), res.labels)
    per_class = [float(err[res.labels == c].mean()) for c in np.unique(res.labels)]
    return MeasureValue(
        measure_id, float(np.mean(per_class)), k, len(pool), {"budget": seed, "pairing": spec.seed},
        {"lam": spec.lam, "layer": k},
        counters={"pairs": int(len(res.labels)), "skipped_classes": len(res.skipped_classes)},
        flags=[f"class {c} skipped: < 2 samples" for c in res.skipped_classes],
    )


def combined_dbi_mixup(dbi: MeasureValue, mix: MeasureValue, measure_id: str = "dbi_x_mixup") -> MeasureValue:
    if not (dbi.higher_is_larger_gap and mix.higher_is_larger_gap):
        raise MeasureError("both factors must use the higher-means-larger-gap convention")
    return MeasureValue(
        measure_id, dbi.value * mix.value, None, max(dbi.budget, mix.budget),
        {"dbi": dbi.seeds, "mixup": mix.seeds}, {"dbi": dbi.config, "mixup": mix.config},
        counters={**{f"dbi.{c}": v for c, v in dbi.counters.items()},
                  **{f"mixup.{c}": v for c, v in mix.counters.items()}},
        flags=list(dbi.flags) + list(mix.flags),
        parents=[dbi.to_dict(), mix.to_dict()],
    )


# --- separability: margins ---------------------------------------------------


@dataclass
class MarginConfig:
    layer: object = 0
    perturbation: str = "none"
    summary: str = "quantile_mean"
    quantiles: tuple = (0.25, 0.5, 0.75)
    normalization: str = "total_variation"
    seed: int = 0

    def __post_init__(self):
        self.quantiles = tuple(float(q) for q in self.quantiles)
        q = self.quantiles
        if not q or any(not 0 < v < 1 for v in q) or any(a >= b for a, b in zip(q, q[1:])):
            raise ValueError(f"quantiles must be strictly increasing in (0, 1), got {q}")
        if self.perturbation not in ("none", "augment", "mixup"):
            raise ValueError(f"unknown perturbation {self.perturbation!r}")
        if self.summary not in ("quantile_mean", "mean"):
            raise ValueError(f"unknown summary {self.summary!r}")
        if self.normalization not in ("total_variation", "none"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


def runner_up(logits, labels) -> np.ndarray:
    """Highest-scoring class other than the label."""
    z = np.array(logits, dtype=np.float64)
    z[np.arange(len(z)), labels] = -np.inf
    return z.argmax(axis=1)


def margin_distances(model: tc.ModelSpec, k: int, reps, labels, chunk: int = 128):
    """First-order signed distance of each representation to its (label, runner-up) boundary.

    Returns ``(d, ok)``; ``ok`` is False where the gradient difference vanished.
    """
    reps = np.asarray(reps, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    d = np.zeros(len(reps))
    ok = np.ones(len(reps), dtype=bool)
    for s in range(0, len(reps), chunk):
        a, y = reps[s:s + chunk], labels[s:s + chunk]
        j = runner_up(tc.forward_from(model, k, a), y)
        logits, grad = tc.grad_wrt_activation(model, k, a, y, j)
        logits = logits.astype(np.float64)
        num = logits[np.arange(len(a)), y] - logits[np.arange(len(a)), j]
        den = np.sqrt(np.sum(grad.reshape(len(a), -1) ** 2, axis=1))
        good = den >= EPS
        d[s:s + chunk] = np.where(good, num / np.where(good, den, 1.0), 0.0)
        ok[s:s + chunk] = good
    return d, ok


def total_variation(reps) -> float:
    """Square root of the summed per-coordinate variance over the sample set."""
    flat = np.asarray(reps, dtype=np.float64).reshape(len(reps), -1)
    return float(np.sqrt(flat.var(axis=0).sum()))


def summarize(values, cfg: MarginConfig) -> float:
    if cfg.summary == "mean":
        return float(np.mean(values))
    return float(np.mean(np.quantile(values, cfg.quantiles)))


def perturbed_representations(model, data: Dataset, k: int, pool, cfg: MarginConfig,
                              aug: AugmentConfig | None, mix: MixupSpec | None):
    batch = _batch(data, pool)
    if cfg.perturbation == "augment":
        if aug is None:
            raise MeasureError("augment perturbation needs an AugmentConfig")
        batch = augment(batch, aug)
    if cfg.perturbation == "mixup":
        if mix is None:
            raise MeasureError("mixup perturbation needs a MixupSpec")
        if mix.layer != k:
            raise MeasureError(f"mixup layer {mix.layer} differs from margin layer {k}")
        res = mixup_pairs(batch, mix, {k: tc.activations(model, batch.x, k)})
        return res.reps, res.labels, list(batch.notes)
    return tc.activations(model, batch.x, k), batch.y, list(batch.notes)


def margin_measure(model: tc.ModelSpec, data: Dataset, cfg: MarginConfig = None, aug: AugmentConfig = None,
                   mix: MixupSpec = None, budget: int | None = None, measure_id: str = "margin") -> MeasureValue:
    """Negated summary of the (optionally perturbed, normalized) margin distribution."""
    cfg = cfg or MarginConfig()
    k = resolve_layer(model, cfg.layer)
    pool = select_samples(len(data), budget, cfg.seed)
    reps, labels, notes = perturbed_representations(model, data, k, pool, cfg, aug, mix)
    if len(reps) == 0:
        raise MeasureError("no samples to measure margins on")
    d, ok = margin_distances(model, k, reps, labels)
    skipped = int((~ok).sum())
    if skipped > 0.5 * len(d):
        raise MeasureError(f"{skipped}/{len(d)} samples had a vanishing gradient difference")
    d = d[ok]
    scale = total_variation(reps) if cfg.normalization == "total_variation" else 1.0
    if scale < EPS:
        raise MeasureError("representations have zero total variation")
    seeds = {"budget": cfg.seed}
    conf = asdict(cfg)
    if aug is not None and cfg.perturbation == "augment":
        seeds["augment"] = aug.seed
        conf["augment"] = asdict(aug)
    if mix is not None and cfg.perturbation == "mixup":
        seeds["pairing"] = mix.seed
        conf["mixup"] = asdict(mix)
    return MeasureValue(
        measure_id, -summarize(d / scale, cfg), k, len(pool), seeds, conf,
        counters={"samples": int(len(ok)), "skipped_vanishing_gradient": skipped,
                  "negative_margins": int((d < 0).sum())},
        flags=notes,
    )


# --- baselines ---------------------------------------------------------------


def output_margins(model: tc.ModelSpec, x, labels) -> np.ndarray:
    logits = tc.predict(model, x).astype(np.float64)
    labels = np.asarray(labels)
    j = runner_up(logits, labels)
    n = np.arange(len(labels))
    return logits[n, labels] - logits[n, j]


def norm_over_margin_baseline(model: tc.ModelSpec, data: Dataset, kind: str = "spec", budget: int | None = None,
                              seed: int = 0, percentile: float = 10.0, measure_id: str | None = None) -> MeasureValue:
    """Product of squared layer norms over the squared low-percentile output margin.

    Conv kernels enter the spectral version reshaped to ``(kh*kw*c_in, c_out)``.
    """
    if kind not in ("spec", "fro"):
        raise ValueError(f"kind must be 'spec' or 'fro', got {kind!r}")
    norm = tc.spectral_norm if kind == "spec" else tc.frobenius_norm
    weights = [layer.weight for layer in model.param_layers()]
    if not weights:
        raise MeasureError("model has no parameterized layer")
    log_prod = sum(2.0 * math.log(norm(w)) if norm(w) > 0 else -math.inf for w in weights)
    pool = select_samples(len(data), budget, seed)
    gamma = float(np.percentile(output_margins(model, data.images[pool], data.labels[pool]), percentile))
    flags = []
    if gamma <= 0:
        value = math.inf
        flags.append("non-positive margin percentile: model not saturated on the sample")
    else:
        value = math.exp(log_prod - 2.0 * math.log(gamma))
    return MeasureValue(
        measure_id or f"prod_of_{kind}_over_margin", value, None, len(pool), {"budget": seed},
        {"kind": kind, "percentile": percentile, "conv_norm": "reshaped (kh*kw*c_in, c_out) kernel"},
        counters={"layers": len(weights)}, flags=flags,
    )


def augment_performance(model: tc.ModelSpec, data: Dataset, aug: AugmentConfig = None, budget: int | None = None,
                        seed: int = 0, measure_id: str = "augment_performance") -> MeasureValue:
    """Mean cross-entropy on augmented samples."""
    aug = aug or AugmentConfig()
    pool = select_samples(len(data), budget, seed)
    batch = augment(_batch(data, pool), aug)
    ce = tc.cross_entropy(tc.predict(model, batch.x), batch.y)
    return MeasureValue(measure_id, float(ce.mean()), 0, len(pool), {"budget": seed, "augment": aug.seed},
                        {"augment": asdict(aug)}, flags=list(batch.notes))
