"""On-disk formats for models, datasets and zoo records.

Model: a JSON manifest (layer list, tensor offset table, format version) next
to one little-endian float32 blob guarded by CRC-32.
Dataset: fixed little-endian header, float32 image block, int32 label block,
then a CRC-32 of everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import LAYER_KINDS, Layer, ModelSpec

FORMAT_MAJOR = 1
FORMAT_VERSION = f"{FORMAT_MAJOR}.0"

# Refuse any single extent or total element count beyond these before allocating.
MAX_EXTENT = 1 << 24
MAX_ELEMENTS = 1 << 31


class FormatError(ValueError):
    """Base class for every load-time rejection."""


class ChecksumError(FormatError):
    pass


class UnknownLayerKind(FormatError):
    pass


class ExtentOverflow(FormatError):
    pass


class ManifestError(FormatError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"manifest field {field_name!r}: {message}")


class VersionError(FormatError):
    pass


class ValidationError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _check_extents(shape, what: str) -> int:
    total = 1
    for s in shape:
        if not isinstance(s, int) or s < 0 or s > MAX_EXTENT:
            raise ExtentOverflow(f"{what}: extent {s!r} outside [0, {MAX_EXTENT}]")
        total *= s
        if total > MAX_ELEMENTS:
            raise ExtentOverflow(f"{what}: {shape} exceeds {MAX_ELEMENTS} elements")
    return total


def _check_version(version, where: str):
    try:
        major = int(str(version).split(".")[0])
    except ValueError:
        raise VersionError(f"{where}: unparseable format version {version!r}") from None
    if major != FORMAT_MAJOR:
        raise VersionError(f"{where}: unsupported major version {major} (reader supports {FORMAT_MAJOR})")


# --- models ------------------------------------------------------------------


def _blob_path(path: Path) -> Path:
    return path.with_suffix(".bin")


def save_model(model: ModelSpec, path) -> Path:
    """Write ``path`` (JSON manifest) and its sibling ``.bin`` blob."""
    path = Path(path)
    chunks, tensors, layers = [], [], []
    offset = 0
    for li, layer in enumerate(model.layers):
        entry = {"kind": layer.kind, "params": dict(layer.params)}
        for role in ("weight", "bias"):
            arr = getattr(layer, role)
            if arr is None:
                continue
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            name = f"layer{li}.{role}"
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            entry[role] = name
            chunks.append(data)
            offset += len(data)
        layers.append(entry)
    blob = b"".join(chunks)
    manifest = {
        "format": "reprgap-model",
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layer_count": len(layers),
        "layers": layers,
        "tensors": tensors,
        "blob": {"file": _blob_path(path).name, "nbytes": len(blob), "crc32": zlib.crc32(blob)},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    _blob_path(path).write_bytes(blob)
    path.write_text(canonical_json(manifest))
    return path


def load_model(path) -> ModelSpec:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError("<root>", f"not valid JSON ({exc})") from None
    for key in ("format_version", "input_shape", "num_classes", "layer_count", "layers", "tensors", "blob"):
        if key not in manifest:
            raise ManifestError(key, "missing")
    _check_version(manifest["format_version"], str(path))
    layers_m, tensors_m = manifest["layers"], manifest["tensors"]
    if not isinstance(layers_m, list) or manifest["layer_count"] != len(layers_m):
        raise ManifestError("layer_count", f"declares {manifest['layer_count']} layers, list has "
                                           f"{len(layers_m) if isinstance(layers_m, list) else '?'}")
    referenced = [e[r] for e in layers_m for r in ("weight", "bias") if r in e]
    names = [t.get("name") for t in tensors_m]
    if len(set(names)) != len(names):
        raise ManifestError("tensors", "duplicate tensor names")
    if sorted(referenced) != sorted(names):
        raise ManifestError("tensors", f"{len(names)} tensor entries but layers reference {len(referenced)}")

    blob_info = manifest["blob"]
    blob_file = path.parent / blob_info["file"]
    declared = blob_info["nbytes"]
    if not isinstance(declared, int) or declared < 0 or declared > 4 * MAX_ELEMENTS:
        raise ExtentOverflow(f"blob size {declared!r} out of range")
    blob = blob_file.read_bytes()
    if len(blob) != declared:
        raise ChecksumError(f"blob has {len(blob)} bytes, manifest declares {declared}")
    if zlib.crc32(blob) != blob_info["crc32"]:
        raise ChecksumError(f"CRC-32 mismatch for {blob_file.name}")

    arrays = {}
    for t in tensors_m:
        count = _check_extents(t["shape"], t["name"])
        off, nbytes = t["offset"], t["nbytes"]
        if nbytes != 4 * count or off < 0 or off + nbytes > len(blob):
            raise ExtentOverflow(f"tensor {t['name']}: offset/size outside the blob")
        arrays[t["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(t["shape"]).astype(np.float32)

    layers = []
    for i, e in enumerate(layers_m):
        if e.get("kind") not in LAYER_KINDS:
            raise UnknownLayerKind(f"layer {i}: unknown kind {e.get('kind')!r}")
        layers.append(Layer(e["kind"], dict(e.get("params", {})),
                            arrays.get(e.get("weight")), arrays.get(e.get("bias"))))
    _check_extents(manifest["input_shape"], "input_shape")
    return ModelSpec(layers, tuple(manifest["input_shape"]), int(manifest["num_classes"]))


# --- datasets ----------------------------------------------------------------

_DS_MAGIC = b"RGDS"
_DS_HEADER = struct.Struct("<4sHHIIIIIB3x")
_SPLITS = ("train", "test")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def __len__(self):
        return len(self.labels)

    def validate(self):
        if self.split not in _SPLITS:
            raise ValidationError(f"split must be one of {_SPLITS}, got {self.split!r}")
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValidationError(f"images must be (N, H, W, C) with N = {len(self.labels)}, got {self.images.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and not (np.all(np.isfinite(self.images))
                                     and self.images.min() >= 0.0 and self.images.max() <= 1.0):
            raise ValidationError("pixel values must lie in [0, 1]")
        if self.split == "train":
            missing = sorted(set(range(self.num_classes)) - set(np.unique(self.labels).tolist()))
            if missing:
                raise ValidationError(f"train split has no samples of classes {missing}")

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset.__new_unchecked(self.images[idx], self.labels[idx], self.num_classes, self.split)

    @staticmethod
    def __new_unchecked(images, labels, k, split):
        ds = object.__new__(Dataset)
        ds.images, ds.labels, ds.num_classes, ds.split = images, labels, k, split
        return ds

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.images, labels, self.num_classes, self.split)


def save_dataset(data: Dataset, path) -> Path:
    path = Path(path)
    data.validate()
    n, h, w, c = data.images.shape
    body = (_DS_HEADER.pack(_DS_MAGIC, FORMAT_MAJOR, 0, n, h, w, c, data.num_classes, _SPLITS.index(data.split))
            + np.ascontiguousarray(data.images, dtype="<f4").tobytes()
            + np.ascontiguousarray(data.labels, dtype="<i4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    return path


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _DS_HEADER.size + 4:
        raise ChecksumError(f"{path}: file too short ({len(raw)} bytes)")
    magic, major, _minor, n, h, w, c, k, split = _DS_HEADER.unpack_from(raw)
    if magic != _DS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    _check_version(f"{major}.{_minor}", str(path))
    count = _check_extents([n, h, w, c], "images")
    expected = _DS_HEADER.size + 4 * count + 4 * n + 4
    if len(raw) != expected:
        raise ChecksumError(f"{path}: {len(raw)} bytes, header implies {expected}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: CRC-32 mismatch")
    if split >= len(_SPLITS):
        raise ValidationError(f"{path}: unknown split code {split}")
    off = _DS_HEADER.size
    images = np.frombuffer(raw, "<f4", count, off).reshape(n, h, w, c).astype(np.float32)
    labels = np.frombuffer(raw, "<i4", n, off + 4 * count).astype(np.int64)
    return Dataset(images, labels, k, _SPLITS[split])


# --- zoo records -------------------------------------------------------------


@dataclass
class ZooRecord:
    """One trained model: where it lives, how it was trained, how it generalizes."""

    model_id: str
    model_path: str
    config: dict
    train_accuracy: float
    test_accuracy: float
    seed: int
    saturated: bool = True
    target_accuracy: float = 0.99
    epochs: int = 0
    flags: list = field(default_factory=list)
    # indices and replacement labels for the corrupted part of each split
    corruption: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("train_accuracy", "test_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")

    @property
    def gap(self) -> float:
        return self.train_accuracy - self.test_accuracy

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gap"] = self.gap
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ZooRecord":
        d = dict(d)
        gap = d.pop("gap", None)
        rec = cls(**d)
        if gap is not None and gap != rec.gap:
            raise ValidationError(f"record {rec.model_id}: stored gap {gap} != train - test {rec.gap}")
        return rec


def save_zoo_manifest(path, axes, records, extra=None) -> Path:
    path = Path(path)
    doc = {"format_version": FORMAT_VERSION, "axes": list(axes),
           "records": [r.to_dict() for r in records]}
    if extra:
        doc.update(extra)
    path.write_text(canonical_json(doc))
    return path


def load_zoo_manifest(path):
    """Returns ``(axes, records, doc)``."""
    doc = json.loads(Path(path).read_text())
    _check_version(doc.get("format_version"), str(path))
    records = [ZooRecord.from_dict(r) for r in doc["records"]]
    axes = list(doc["axes"])
    for r in records:
        if set(r.config) != set(axes):
            raise ManifestError("records", f"{r.model_id} axes {sorted(r.config)} != {sorted(axes)}")
        # JSON keys come back sorted; restore the declared axis order
        r.config = {a: r.config[a] for a in axes}
    return axes, records, doc
