"""Small dense inference/backprop engine for feed-forward CNNs.

Tensors are numpy ``float32`` arrays in NHWC layout. Every layer computes in
float64 and stores its output as float32, so any activation captured in a
trace is exactly what the next layer consumes. That is what makes
``forward_from(model, k, trace[k])`` reproduce the full forward pass bit for bit.

Trace indices: ``0`` is the input, ``k >= 1`` is the output of ``model.layers[k-1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv2d", "dense", "relu", "maxpool", "globalavgpool", "dropout", "flatten", "softmax")
PARAM_KINDS = ("conv2d", "dense")


class ShapeMismatch(ValueError):
    def __init__(self, layer: int, expected, actual, what: str = "input"):
        self.layer = layer
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"layer {layer}: {what} shape expected {self.expected}, got {self.actual}")


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: int):
        self.layer = layer
        super().__init__(f"non-finite values produced at layer {layer}")


@dataclass
class Layer:
    """One entry of a model's layer list.

    ``params`` holds kind-specific hyperparameters: ``stride``/``padding`` for
    conv2d, ``window``/``stride`` for maxpool, ``rate`` for dropout. Conv
    weights are ``(kh, kw, c_in, c_out)``, dense weights ``(d_in, d_out)``.
    """

    kind: str
    params: dict = field(default_factory=dict)
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAM_KINDS and self.weight is None:
            raise ValueError(f"{self.kind} layer needs a weight tensor")


def conv2d(weight, bias=None, stride: int = 1, padding: str = "same") -> Layer:
    weight = np.asarray(weight, dtype=np.float32)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float32)
    return Layer("conv2d", {"stride": int(stride), "padding": padding}, weight, bias)


def dense(weight, bias=None) -> Layer:
    weight = np.asarray(weight, dtype=np.float32)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float32)
    return Layer("dense", {}, weight, bias)


def relu() -> Layer:
    return Layer("relu")


def maxpool(window: int = 2, stride: int | None = None) -> Layer:
    return Layer("maxpool", {"window": int(window), "stride": int(stride or window)})


def globalavgpool() -> Layer:
    return Layer("globalavgpool")


def dropout(rate: float) -> Layer:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    return Layer("dropout", {"rate": float(rate)})


def flatten() -> Layer:
    return Layer("flatten")


def softmax_layer() -> Layer:
    return Layer("softmax")


def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
        pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    elif padding == "valid":
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pads = (0, 0, 0, 0)
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return ho, wo, pads


def layer_output_shape(layer: Layer, in_shape: tuple, index: int = 0) -> tuple:
    """Per-sample output shape of ``layer`` given per-sample input shape."""
    k = layer.kind
    if k == "conv2d":
        if len(in_shape) != 3:
            raise ShapeMismatch(index, ("H", "W", "C"), in_shape)
        kh, kw, cin, cout = layer.weight.shape
        if in_shape[2] != cin:
            raise ShapeMismatch(index, in_shape[:2] + (cin,), in_shape)
        if layer.bias is not None and layer.bias.shape != (cout,):
            raise ShapeMismatch(index, (cout,), layer.bias.shape, "bias")
        ho, wo, _ = _conv_geometry(in_shape[0], in_shape[1], kh, kw, layer.params.get("stride", 1),
                                   layer.params.get("padding", "same"))
        if ho < 1 or wo < 1:
            raise ShapeMismatch(index, (kh, kw, cin), in_shape)
        return (ho, wo, cout)
    if k == "dense":
        din, dout = layer.weight.shape
        if in_shape != (din,):
            raise ShapeMismatch(index, (din,), in_shape)
        if layer.bias is not None and layer.bias.shape != (dout,):
            raise ShapeMismatch(index, (dout,), layer.bias.shape, "bias")
        return (dout,)
    if k == "maxpool":
        if len(in_shape) != 3:
            raise ShapeMismatch(index, ("H", "W", "C"), in_shape)
        win, st = layer.params["window"], layer.params["stride"]
        ho, wo = (in_shape[0] - win) // st + 1, (in_shape[1] - win) // st + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(index, (win, win, in_shape[2]), in_shape)
        return (ho, wo, in_shape[2])
    if k == "globalavgpool":
        if len(in_shape) != 3:
            raise ShapeMismatch(index, ("H", "W", "C"), in_shape)
        return (in_shape[2],)
    if k == "flatten":
        return (int(np.prod(in_shape)),)
    return tuple(in_shape)


@dataclass
class ModelSpec:
    layers: list
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = list(self.layers)
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(layer_output_shape(layer, shapes[-1], i + 1))
        if shapes[-1] != (self.num_classes,):
            raise ShapeMismatch(len(self.layers), (self.num_classes,), shapes[-1], "output")
        if self.depth < 1:
            raise ValueError("model needs at least one parameterized layer")
        self.shapes = shapes

    @property
    def depth(self) -> int:
        return sum(layer.kind in PARAM_KINDS for layer in self.layers)

    @property
    def logit_index(self) -> int:
        """Trace index of the pre-softmax logits."""
        n = len(self.layers)
        while n > 0 and self.layers[n - 1].kind == "softmax":
            n -= 1
        return n

    def param_layers(self) -> list:
        return [layer for layer in self.layers if layer.kind in PARAM_KINDS]


# --- per-layer kernels -------------------------------------------------------
# Each forward returns (output float32, cache); each backward maps dy (float64)
# to (dx float64, grads tuple).


def _pad(x, pads):
    t, b, l, r = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)))


def _conv_forward(layer, x, dtype=np.float32):
    w = layer.weight.astype(np.float64)
    kh, kw, cin, cout = w.shape
    stride = layer.params.get("stride", 1)
    n, h, wd, _ = x.shape
    ho, wo, pads = _conv_geometry(h, wd, kh, kw, stride, layer.params.get("padding", "same"))
    xp = _pad(x.astype(np.float64), pads)
    out = np.zeros((n, ho, wo, cout))
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :]
            out += patch @ w[di, dj]
    if layer.bias is not None:
        out += layer.bias.astype(np.float64)
    return out.astype(dtype), (xp, pads, x.shape)


def _conv_backward(layer, dy, cache):
    xp, pads, xshape = cache
    w = layer.weight.astype(np.float64)
    kh, kw, cin, cout = w.shape
    stride = layer.params.get("stride", 1)
    _, ho, wo, _ = dy.shape
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    rows = dy.reshape(-1, cout)
    for di in range(kh):
        for dj in range(kw):
            sl = (slice(None), slice(di, di + stride * (ho - 1) + 1, stride),
                  slice(dj, dj + stride * (wo - 1) + 1, stride), slice(None))
            dw[di, dj] = xp[sl].reshape(-1, cin).T @ rows
            dxp[sl] += dy @ w[di, dj].T
    t, _, l, _ = pads
    dx = dxp[:, t:t + xshape[1], l:l + xshape[2], :]
    db = dy.sum(axis=(0, 1, 2)) if layer.bias is not None else None
    return dx, (dw, db)


def _pool_windows(x, win, stride):
    v = sliding_window_view(x, (win, win), axis=(1, 2))[:, ::stride, ::stride]
    return v.reshape(v.shape[:4] + (win * win,))


def _maxpool_forward(layer, x):
    win, stride = layer.params["window"], layer.params["stride"]
    v = _pool_windows(x, win, stride)
    # argmax returns the first (row-major) maximum, which fixes tie-breaking
    arg = v.argmax(axis=-1)
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (arg, x.shape)


def _maxpool_backward(layer, dy, cache):
    arg, xshape = cache
    win, stride = layer.params["window"], layer.params["stride"]
    _, ho, wo, _ = dy.shape
    dx = np.zeros(xshape)
    for p in range(win * win):
        di, dj = divmod(p, win)
        dx[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :] += dy * (arg == p)
    return dx, ()


def _dense_forward(layer, x, dtype=np.float32):
    out = x.astype(np.float64) @ layer.weight.astype(np.float64)
    if layer.bias is not None:
        out += layer.bias.astype(np.float64)
    return out.astype(dtype), x


def _dense_backward(layer, dy, x):
    dw = x.astype(np.float64).T @ dy
    db = dy.sum(axis=0) if layer.bias is not None else None
    return dy @ layer.weight.astype(np.float64).T, (dw, db)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _layer_forward(layer, x, train, rng, dtype=np.float32):
    k = layer.kind
    if k == "conv2d":
        return _conv_forward(layer, x, dtype)
    if k == "dense":
        return _dense_forward(layer, x, dtype)
    if k == "relu":
        return np.maximum(x, dtype(0)), x > 0
    if k == "maxpool":
        return _maxpool_forward(layer, x)
    if k == "globalavgpool":
        return x.astype(np.float64).mean(axis=(1, 2)).astype(dtype), x.shape
    if k == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if k == "dropout":
        rate = layer.params["rate"]
        if not train or rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return (x * keep).astype(dtype), keep
    if k == "softmax":
        p = softmax(x)
        return p.astype(dtype), p
    raise ValueError(k)


def _layer_backward(layer, dy, cache):
    k = layer.kind
    if k == "conv2d":
        return _conv_backward(layer, dy, cache)
    if k == "dense":
        return _dense_backward(layer, dy, cache)
    if k == "relu":
        return dy * cache, ()
    if k == "maxpool":
        return _maxpool_backward(layer, dy, cache)
    if k == "globalavgpool":
        n, h, w, c = cache
        return np.broadcast_to(dy[:, None, None, :] / (h * w), cache).copy(), ()
    if k == "flatten":
        return dy.reshape(cache), ()
    if k == "dropout":
        return (dy if cache is None else dy * cache), ()
    if k == "softmax":
        p = cache
        return p * (dy - (dy * p).sum(axis=-1, keepdims=True)), ()
    raise ValueError(k)


# --- public operations -------------------------------------------------------


def _check_input(model: ModelSpec, k: int, x: np.ndarray):
    if not 0 <= k <= len(model.layers):
        raise IndexError(f"layer index {k} out of range [0, {len(model.layers)}]")
    expected = model.shapes[k]
    if x.ndim != len(expected) + 1 or tuple(x.shape[1:]) != expected:
        raise ShapeMismatch(k, ("batch",) + expected, x.shape)


def _run(model, k, x, stop, train=False, rng=None, capture=(), keep_cache=False, dtype=np.float32):
    x = np.asarray(x, dtype=dtype)
    _check_input(model, k, x)
    trace = {}
    if k in capture:
        trace[k] = x
    caches = []
    for idx in range(k, stop):
        x, cache = _layer_forward(model.layers[idx], x, train, rng, dtype)
        if keep_cache:
            caches.append(cache)
        if idx + 1 in capture:
            trace[idx + 1] = x
    return x, trace, caches


def forward(model: ModelSpec, x, capture: Iterable[int] = (), mode: str = "eval", rng=None):
    """Run the whole network; returns ``(logits, trace)``.

    ``logits`` are the pre-softmax outputs; ``trace`` maps each requested index
    to its activation. Train mode enables dropout and requires ``rng``.
    """
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
    capture = set(capture)
    bad = [c for c in capture if not 0 <= c <= len(model.layers)]
    if bad:
        raise IndexError(f"capture indices {bad} out of range [0, {len(model.layers)}]")
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng(0)
    stop = model.logit_index
    logits, trace, _ = _run(model, 0, x, stop, train, rng, capture)
    if stop < len(model.layers) and any(c > stop for c in capture):
        _, tail, _ = _run(model, stop, logits, len(model.layers), train, rng, capture)
        trace.update({c: v for c, v in tail.items() if c > stop})
    return logits, trace


def forward_from(model: ModelSpec, k: int, activations, dtype=np.float32) -> np.ndarray:
    """Eval-mode logits of the sub-network mapping trace index ``k`` to the output.

    ``dtype=np.float64`` keeps every intermediate in double precision (used by
    finite-difference checks); the default float32 storage is what the splice
    invariant is stated for.
    """
    if not 0 <= k <= len(model.layers):
        raise IndexError(f"layer index {k} out of range [0, {len(model.layers)}]")
    if k > model.logit_index:
        raise IndexError(f"layer index {k} lies past the logits (index {model.logit_index})")
    logits, _, _ = _run(model, k, activations, model.logit_index, dtype=dtype)
    return logits


def predict(model: ModelSpec, x, chunk: int = 256, k: int = 0) -> np.ndarray:
    """Chunked eval-mode ``forward_from``; keeps memory flat for big batches."""
    x = np.asarray(x, dtype=np.float32)
    parts = [forward_from(model, k, x[s:s + chunk]) for s in range(0, len(x), chunk)]
    if not parts:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    return np.concatenate(parts)


def activations(model: ModelSpec, x, k: int, chunk: int = 256) -> np.ndarray:
    """Eval-mode activations at trace index ``k`` only (stops early, chunked)."""
    if not 0 <= k <= len(model.layers):
        raise IndexError(f"layer index {k} out of range [0, {len(model.layers)}]")
    x = np.asarray(x, dtype=np.float32)
    if k == 0:
        _check_input(model, 0, x)
        return x
    parts = [_run(model, 0, x[s:s + chunk], k)[0] for s in range(0, len(x), chunk)]
    if not parts:
        return np.zeros((0,) + model.shapes[k], dtype=np.float32)
    return np.concatenate(parts)


def grad_wrt_activation(model: ModelSpec, k: int, activations, i, j):
    """Per-sample gradient of ``logit[i] - logit[j]`` w.r.t. the layer-``k`` activations.

    ``i`` and ``j`` are scalars or per-sample integer arrays. Returns the logits
    (float32) and the gradient (float64, same shape as ``activations``).
    """
    a = np.asarray(activations, dtype=np.float32)
    n = len(a)
    i = np.broadcast_to(np.asarray(i, dtype=np.int64), (n,))
    j = np.broadcast_to(np.asarray(j, dtype=np.int64), (n,))
    if np.any(i == j):
        raise ValueError("head classes i and j must differ")
    if k > model.logit_index:
        raise IndexError(f"layer index {k} lies past the logits (index {model.logit_index})")
    logits, _, caches = _run(model, k, a, model.logit_index, keep_cache=True)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError(model.logit_index)
    dy = np.zeros((n, model.num_classes))
    dy[np.arange(n), i] += 1.0
    dy[np.arange(n), j] -= 1.0
    for idx in range(model.logit_index - 1, k - 1, -1):
        dy, _ = _layer_backward(model.layers[idx], dy, caches[idx - k])
        if not np.all(np.isfinite(dy)):
            raise NonFiniteError(idx + 1)
    return logits, dy


def cross_entropy(logits, labels) -> np.ndarray:
    """Per-sample categorical cross-entropy from pre-softmax logits."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    return logz - z[np.arange(len(z)), labels]


def grad_wrt_weights(model: ModelSpec, x, labels, mode: str = "train", rng=None):
    """Mean cross-entropy loss and its gradient for every parameterized layer.

    Returns ``(loss, grads)`` with ``grads`` a list of ``(dW, db)`` pairs (float64,
    ``db`` is None for bias-free layers) in ``model.param_layers()`` order.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng(0)
    logits, _, caches = _run(model, 0, x, model.logit_index, train, rng, keep_cache=True)
    n = len(labels)
    p = softmax(logits)
    loss = float(cross_entropy(logits, labels).mean())
    dy = p
    dy[np.arange(n), labels] -= 1.0
    dy /= n
    grads = []
    for idx in range(model.logit_index - 1, -1, -1):
        layer = model.layers[idx]
        dy, g = _layer_backward(layer, dy, caches[idx])
        if layer.kind in PARAM_KINDS:
            grads.append(g)
    grads.reverse()
    return loss, grads


def spectral_norm(weight, tol: float = 1e-6, max_iter: int = 200, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``.

    Conv kernels ``(kh, kw, c_in, c_out)`` are reshaped to ``(kh*kw*c_in, c_out)``.
    """
    w = np.asarray(weight, dtype=np.float64)
    w = w.reshape(-1, w.shape[-1]) if w.ndim > 1 else w.reshape(1, -1)
    if not np.any(w):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = w @ v
        new = float(np.linalg.norm(u))
        v = w.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            break
        v /= nv
        if abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return float(np.linalg.norm(w @ v))


def frobenius_norm(weight) -> float:
    return float(np.linalg.norm(np.asarray(weight, dtype=np.float64).ravel()))


def zero_one_errors(logits, labels) -> np.ndarray:
    """Boolean per-sample error: true-class logit does not strictly beat every other."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(z)
    true = z[np.arange(n), labels]
    other = z.copy()
    other[np.arange(n), labels] = -np.inf
    return true <= other.max(axis=1)
