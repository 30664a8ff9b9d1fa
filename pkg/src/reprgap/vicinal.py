"""Vicinal distributions: seeded photometric/geometric augmentation and label-wise mixup.

Randomness is counter-based: every random draw for sample ``idx`` and op ``o``
comes from a generator keyed by ``(seed, idx, o)``, so the output for a sample
does not depend on which batch it travels in.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

OPS = ("flip", "zoom", "hue", "saturation", "brightness", "contrast")


@dataclass
class LabeledBatch:
    """Inputs, labels and their global sample indices (used to key the RNG)."""

    x: np.ndarray
    y: np.ndarray
    idx: np.ndarray | None = None
    notes: tuple = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.idx is None:
            self.idx = np.arange(len(self.y))
        self.idx = np.asarray(self.idx, dtype=np.int64)
        if len(self.x) != len(self.y) or len(self.idx) != len(self.y):
            raise ValueError("x, y and idx must have the same leading extent")


@dataclass
class AugmentConfig:
    hue_max_delta: float = 0.5
    saturation: tuple = (0.6, 1.2)
    brightness_max_delta: float = 0.5
    contrast: tuple = (0.7, 1.0)
    zoom: tuple = (0.01, 0.15)
    flip: bool = True
    generic: bool = False
    strict: bool = False
    seed: int = 0

    def __post_init__(self):
        self.saturation = tuple(float(v) for v in self.saturation)
        self.contrast = tuple(float(v) for v in self.contrast)
        self.zoom = tuple(float(v) for v in self.zoom)
        for name in ("saturation", "contrast", "zoom"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range must be ordered and non-negative, got {(lo, hi)}")
        if self.zoom[1] >= 0.5:
            raise ValueError(f"zoom fraction must stay below 0.5, got {self.zoom[1]}")
        if self.hue_max_delta < 0 or self.brightness_max_delta < 0:
            raise ValueError("max deltas must be non-negative")

    def enabled_ops(self) -> tuple:
        if self.generic:
            return tuple(o for o in ("flip", "zoom", "contrast") if o != "flip" or self.flip)
        return tuple(o for o in OPS if o != "flip" or self.flip)


def op_rng(seed: int, idx: int, op: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(idx), OPS.index(op)])


# --- colour space ------------------------------------------------------------


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    h6 = h * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [np.stack(c, axis=-1) for c in
               ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))]
    out = np.zeros(hsv.shape)
    for k, c in enumerate(choices):
        out = np.where((sector == k)[..., None], c, out)
    return out


# --- single-image ops (float64 in, float64 out, HWC) --------------------------


def flip_lr(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :]


def central_zoom(img: np.ndarray, fraction: float) -> np.ndarray:
    """Crop the central ``1 - fraction`` side and resize back bilinearly."""
    h, w = img.shape[:2]

    def axis_coords(n):
        side = (1.0 - fraction) * n
        src = (n - side) / 2.0 + (np.arange(n) + 0.5) * (side / n) - 0.5
        src = np.clip(src, 0.0, n - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis_coords(h)
    c0, c1, fc = axis_coords(w)
    top = img[r0][:, c0] * (1 - fc)[None, :, None] + img[r0][:, c1] * fc[None, :, None]
    bot = img[r1][:, c0] * (1 - fc)[None, :, None] + img[r1][:, c1] * fc[None, :, None]
    return top * (1 - fr)[:, None, None] + bot * fr[:, None, None]


def shift_hue(img: np.ndarray, delta: float) -> np.ndarray:
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = (hsv[..., 0] + delta) % 1.0
    return hsv_to_rgb(hsv)


def scale_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    hsv = rgb_to_hsv(img)
    hsv[..., 1] = np.clip(hsv[..., 1] * factor, 0.0, 1.0)
    return hsv_to_rgb(hsv)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = img.mean(axis=(0, 1), keepdims=True)
    return mean + factor * (img - mean)


def augment(batch: LabeledBatch, cfg: AugmentConfig) -> LabeledBatch:
    """Apply flip -> zoom -> hue -> saturation -> brightness -> contrast, then clip to [0, 1]."""
    x = np.asarray(batch.x)
    if x.ndim != 4:
        raise ValueError(f"augment expects (N, H, W, C) images, got {x.shape}")
    ops = list(cfg.enabled_ops())
    notes = list(batch.notes)
    if x.shape[-1] != 3 and {"hue", "saturation"} & set(ops):
        if cfg.strict:
            raise ValueError(f"hue/saturation need 3 channels, got {x.shape[-1]}")
        ops = [o for o in ops if o not in ("hue", "saturation")]
        notes.append(f"hue/saturation skipped for {x.shape[-1]}-channel input")
        log.info(notes[-1])
    out = np.empty(x.shape, dtype=np.float32)
    for n, gidx in enumerate(batch.idx):
        img = x[n].astype(np.float64)
        for op in ops:
            rng = op_rng(cfg.seed, gidx, op)
            if op == "flip":
                if rng.random() < 0.5:
                    img = flip_lr(img)
            elif op == "zoom":
                z = rng.uniform(*cfg.zoom)
                if z > 0.0:
                    img = central_zoom(img, z)
            elif op == "hue":
                img = shift_hue(img, rng.uniform(-cfg.hue_max_delta, cfg.hue_max_delta))
            elif op == "saturation":
                img = scale_saturation(img, rng.uniform(*cfg.saturation))
            elif op == "brightness":
                img = img + rng.uniform(-cfg.brightness_max_delta, cfg.brightness_max_delta)
            elif op == "contrast":
                c = rng.uniform(*cfg.contrast)
                if c != 1.0:
                    img = adjust_contrast(img, c)
        out[n] = np.clip(img, 0.0, 1.0)
    return LabeledBatch(out, batch.y.copy(), batch.idx.copy(), tuple(notes))


# --- label-wise mixup --------------------------------------------------------


@dataclass
class MixupSpec:
    lam: float = 0.5
    layer: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"mixup coefficient must lie in [0, 1], got {self.lam}")
        if self.layer < 0:
            raise ValueError(f"layer index must be >= 0, got {self.layer}")


@dataclass
class MixupResult:
    reps: np.ndarray
    labels: np.ndarray
    # global sample indices of (first, second) parent for every mixed sample
    pairs: np.ndarray
    skipped_classes: list = field(default_factory=list)


def pair_within_classes(labels, idx, seed: int):
    """Shuffle each class with a class-keyed generator and pair neighbours.

    Returns positions ``(first, second)`` into ``labels`` and the classes that
    had fewer than two members. An odd leftover is dropped.
    """
    labels = np.asarray(labels)
    idx = np.asarray(idx)
    first, second, skipped = [], [], []
    for c in np.unique(labels):
        pos = np.flatnonzero(labels == c)
        if len(pos) < 2:
            skipped.append(int(c))
            continue
        pos = pos[np.argsort(idx[pos], kind="stable")]
        pos = pos[np.random.default_rng([int(seed), int(c)]).permutation(len(pos))]
        m = len(pos) // 2 * 2
        first.append(pos[0:m:2])
        second.append(pos[1:m:2])
    if not first:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), skipped
    return np.concatenate(first), np.concatenate(second), skipped


def mixup_pairs(batch: LabeledBatch, spec: MixupSpec, trace: dict) -> MixupResult:
    """Mix same-class pairs of the layer-``spec.layer`` representations."""
    if spec.layer not in trace:
        raise KeyError(f"trace does not contain layer {spec.layer}")
    a = np.asarray(trace[spec.layer])
    if len(a) != len(batch.y):
        raise ValueError(f"trace layer {spec.layer} has {len(a)} samples, batch has {len(batch.y)}")
    p1, p2, skipped = pair_within_classes(batch.y, batch.idx, spec.seed)
    lam = float(spec.lam)
    mixed = lam * a[p1].astype(np.float64) + (1.0 - lam) * a[p2].astype(np.float64)
    return MixupResult(
        reps=mixed.astype(np.float32),
        labels=batch.y[p1].copy(),
        pairs=np.stack([batch.idx[p1], batch.idx[p2]], axis=1) if len(p1) else np.zeros((0, 2), np.int64),
        skipped_classes=skipped,
    )
