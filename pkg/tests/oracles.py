"""Independent brute-force reference implementations used only by the tests."""

import itertools
import math
from collections import Counter

import numpy as np

from reprgap import tensor_core as tc


def naive_conv2d(x, w, b, stride, padding):
    """Direct convolution, one output element at a time, float64."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if padding == "same":
        ho, wo = math.ceil(h / stride), math.ceil(wd / stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - wd, 0)
        top, left = ph // 2, pw // 2
    else:
        ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
        top = left = 0
    out = np.zeros((n, ho, wo, cout))
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    acc = 0.0 if b is None else float(b[co])
                    for di in range(kh):
                        for dj in range(kw):
                            r, c = i * stride + di - top, j * stride + dj - left
                            if 0 <= r < h and 0 <= c < wd:
                                for ci in range(cin):
                                    acc += float(x[s, r, c, ci]) * float(w[di, dj, ci, co])
                    out[s, i, j, co] = acc
    return out


def naive_maxpool(x, win, stride):
    n, h, w, c = x.shape
    ho, wo = (h - win) // stride + 1, (w - win) // stride + 1
    out = np.zeros((n, ho, wo, c), dtype=x.dtype)
    for s, i, j, ch in itertools.product(range(n), range(ho), range(wo), range(c)):
        out[s, i, j, ch] = max(x[s, i * stride + a, j * stride + b_, ch] for a in range(win) for b_ in range(win))
    return out


def naive_dense(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for s in range(x.shape[0]):
        for o in range(w.shape[1]):
            out[s, o] = sum(float(x[s, i]) * float(w[i, o]) for i in range(w.shape[0])) + (0.0 if b is None else b[o])
    return out


def random_model(rng, input_shape=(6, 6, 2), num_classes=3, softmax=False, dropout=0.0):
    """A random small CNN drawn from the whole layer vocabulary."""
    h, w, c = input_shape
    c1 = int(rng.integers(2, 5))
    pad = "same" if rng.random() < 0.5 else "valid"
    layers = [tc.conv2d(rng.standard_normal((3, 3, c, c1)) * 0.5, rng.standard_normal(c1) * 0.1, 1, pad),
              tc.relu()]
    hh = h if pad == "same" else h - 2
    if hh >= 4 and rng.random() < 0.7:
        layers.append(tc.maxpool(2))
        hh //= 2
    if dropout:
        layers.append(tc.dropout(dropout))
    c2 = int(rng.integers(2, 5))
    stride = int(rng.integers(1, 3))
    layers += [tc.conv2d(rng.standard_normal((2, 2, c1, c2)) * 0.5, None, stride, "same"), tc.relu()]
    if rng.random() < 0.5:
        layers.append(tc.globalavgpool())
        feat = c2
    else:
        layers.append(tc.flatten())
        hh = math.ceil(hh / stride)
        feat = hh * hh * c2
    hid = int(rng.integers(3, 6))
    layers += [tc.dense(rng.standard_normal((feat, hid)) * 0.5, rng.standard_normal(hid) * 0.1), tc.relu(),
               tc.dense(rng.standard_normal((hid, num_classes)) * 0.5, rng.standard_normal(num_classes) * 0.1)]
    if softmax:
        layers.append(tc.softmax_layer())
    return tc.ModelSpec(layers, input_shape, num_classes)


def relative_error(a, b):
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def central_difference(f, step):
    """Central difference of the scalar function ``f(delta)`` at 0, plus a smoothness flag.

    The flag is False when the two one-sided differences disagree, i.e. the step
    straddles a relu or max-pool kink and the central difference is meaningless.
    """
    up, mid, down = f(step), f(0.0), f(-step)
    fwd, bwd = (up - mid) / step, (mid - down) / step
    smooth = abs(fwd - bwd) <= 0.02 * max(abs(fwd), abs(bwd)) + 1e-9
    return (up - down) / (2 * step), smooth


def fd_activation_grad(model, k, a, i, j, coords, step=1e-3):
    """Central differences of logit[i] - logit[j] for sample 0, run entirely in float64.

    Returns ``(values, smooth_mask)``.
    """
    base = np.asarray(a, dtype=np.float64)

    def at(c):
        def f(delta):
            x = base.copy()
            x.reshape(len(x), -1)[0, c] += delta
            z = tc.forward_from(model, k, x, dtype=np.float64)
            return z[0, i] - z[0, j]
        return f

    res = [central_difference(at(c), step) for c in coords]
    return np.array([r[0] for r in res]), np.array([r[1] for r in res])


def brute_davies_bouldin(points, labels, p=2.0, aggregation="max"):
    """Loop-by-loop Davies-Bouldin index with RMS scatter and Minkowski-p separation."""
    groups = {}
    for pt, lab in zip(points, labels):
        groups.setdefault(int(lab), []).append([float(v) for v in pt])
    keys = sorted(groups)
    cent, scat = {}, {}
    for c in keys:
        pts = groups[c]
        dim = len(pts[0])
        cent[c] = [sum(q[d] for q in pts) / len(pts) for d in range(dim)]
        sq = [sum((q[d] - cent[c][d]) ** 2 for d in range(dim)) for q in pts]
        scat[c] = (sum(s ** (p / 2) for s in sq) / len(pts)) ** (1 / p)
    total = 0.0
    for a in keys:
        ratios = []
        for b_ in keys:
            if a == b_:
                continue
            m = sum(abs(x - y) ** p for x, y in zip(cent[a], cent[b_])) ** (1 / p)
            ratios.append((scat[a] + scat[b_]) / m)
        total += max(ratios) if aggregation == "max" else sum(ratios) / len(ratios)
    return total / len(keys)


def brute_kendall(values, gaps):
    conc = disc = 0
    for a in range(len(values)):
        for b_ in range(a + 1, len(values)):
            s = (values[a] - values[b_]) * (gaps[a] - gaps[b_])
            if s > 0:
                conc += 1
            elif s < 0:
                disc += 1
    return (conc - disc) / (conc + disc)


def _h(counter):
    n = sum(counter.values())
    return -sum(v / n * math.log(v / n) for v in counter.values() if v)


def brute_cmi_score(values, gaps, configs, axes, max_size=2):
    """Enumerate every conditioning set, every ordered pair, and count signs explicitly."""
    best = None
    for r in range(max_size + 1):
        for subset in itertools.combinations(sorted(axes), r):
            per_cell = {}
            for a in range(len(values)):
                for b_ in range(len(values)):
                    if a == b_:
                        continue
                    if any(configs[a][ax] != configs[b_][ax] for ax in subset):
                        continue
                    dm, dg = values[a] - values[b_], gaps[a] - gaps[b_]
                    if dm == 0 or dg == 0:
                        continue
                    cell = tuple(configs[a][ax] for ax in subset)
                    per_cell.setdefault(cell, []).append((1 if dm > 0 else -1, 1 if dg > 0 else -1))
            total = sum(len(v) for v in per_cell.values())
            if total == 0:
                continue
            mi = h = 0.0
            for pairs in per_cell.values():
                j = Counter(pairs)
                g = Counter(p[1] for p in pairs)
                m = Counter(p[0] for p in pairs)
                w = len(pairs) / total
                mi += w * max(_h(m) + _h(g) - _h(j), 0.0)
                h += w * _h(g)
            if h > 0:
                ratio = mi / h
                best = ratio if best is None else min(best, ratio)
    return None if best is None else 100 * best
