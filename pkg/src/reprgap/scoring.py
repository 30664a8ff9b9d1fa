"""How well a measure ranks a model zoo by generalization gap.

``conditional_mi_score`` reconstructs the conditional-mutual-information metric
used for the PGDL benchmark: over pairs of models that agree on a subset of
hyperparameters, how much does the sign of the measure difference tell us about
the sign of the gap difference? The result is minimized over conditioning sets.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

PROTOCOL = "reconstructed protocol v1"


class UndefinedScore(ValueError):
    pass


@dataclass
class ScoreInput:
    values: list
    gaps: list
    configs: list
    axes: list

    def __post_init__(self):
        self.values = [float(v) for v in self.values]
        self.gaps = [float(g) for g in self.gaps]
        self.axes = list(self.axes)
        if len(self.values) < 2:
            raise ValueError("scoring needs at least two models")
        if not len(self.values) == len(self.gaps) == len(self.configs):
            raise ValueError("values, gaps and configs must align")
        for c in self.configs:
            if set(c) != set(self.axes):
                raise ValueError(f"config axes {sorted(c)} differ from {sorted(self.axes)}")


def _signs(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v[:, None] - v[None, :])


def kendall_tau(inp: ScoreInput) -> float:
    """(concordant - discordant) / (concordant + discordant); pairs tied in either variable are left out."""
    prod = np.triu(_signs(inp.values) * _signs(inp.gaps), k=1)
    conc, disc = int((prod > 0).sum()), int((prod < 0).sum())
    if conc + disc == 0:
        raise UndefinedScore("every pair is tied")
    return (conc - disc) / (conc + disc)


def _entropy(counts) -> float:
    total = sum(counts)
    return -sum(c / total * math.log(c / total) for c in counts if c)


def _cell_stats(joint: Counter):
    """Mutual information I(Vm; Vg) and entropy H(Vg) of one cell's sign table."""
    gm, mm = Counter(), Counter()
    for (m, g), c in joint.items():
        gm[g] += c
        mm[m] += c
    h_g = _entropy(gm.values())
    mi = _entropy(mm.values()) + h_g - _entropy(joint.values())
    return max(mi, 0.0), h_g


def conditioning_sets(axes, max_size: int = 2, exact: bool = False):
    sizes = [max_size] if exact else range(0, max_size + 1)
    return [s for r in sizes for s in itertools.combinations(sorted(axes), r)]


def conditional_terms(inp: ScoreInput, subset) -> tuple:
    """Pooled ``(I(Vm; Vg | U_S), H(Vg | U_S), n_pairs)`` for one conditioning set.

    Both orientations of every pair are counted so the estimate does not depend
    on record order; pairs with a zero difference in either variable are dropped.
    """
    cells = defaultdict(list)
    for n, cfg in enumerate(inp.configs):
        cells[tuple(cfg[a] for a in subset)].append(n)
    sm, sg = _signs(inp.values), _signs(inp.gaps)
    weighted_i = weighted_h = 0.0
    total = 0
    for members in cells.values():
        idx = np.asarray(members)
        m = sm[np.ix_(idx, idx)].ravel()
        g = sg[np.ix_(idx, idx)].ravel()
        keep = (m != 0) & (g != 0)
        if not keep.any():
            continue
        joint = Counter(zip(m[keep].astype(int).tolist(), g[keep].astype(int).tolist()))
        n_pairs = int(keep.sum())
        mi, h = _cell_stats(joint)
        weighted_i += n_pairs * mi
        weighted_h += n_pairs * h
        total += n_pairs
    if total == 0:
        return 0.0, 0.0, 0
    return weighted_i / total, weighted_h / total, total


def conditional_mi_score(inp: ScoreInput, max_size: int = 2, exact: bool = False, detail: bool = False):
    """100 * min over conditioning sets of I(Vm; Vg | U_S) / H(Vg | U_S), in [0, 100]."""
    if not 0 <= max_size <= 2:
        raise ValueError(f"max conditioning size must be 0, 1 or 2, got {max_size}")
    if not any(len({c[a] for c in inp.configs}) >= 2 for a in inp.axes):
        raise ValueError("no hyperparameter axis takes two distinct values")
    ratios = {}
    for subset in conditioning_sets(inp.axes, max_size, exact):
        mi, h, n = conditional_terms(inp, subset)
        if n and h > 0:
            ratios[subset] = mi / h
    if not ratios:
        raise UndefinedScore("gap signs carry no entropy under any conditioning set")
    score = 100.0 * min(ratios.values())
    if detail:
        return score, ratios
    return score
