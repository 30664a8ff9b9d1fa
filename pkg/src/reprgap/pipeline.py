"""Run configs, measure dispatch over a zoo, results/scores files and the report table."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import measures as M
from .model_io import canonical_json
from .scoring import PROTOCOL, ScoreInput, UndefinedScore, conditional_mi_score, kendall_tau
from .vicinal import AugmentConfig, MixupSpec
from .zoo import Zoo

KINDS = ("dbi", "mixup", "margin", "dbi_x_mixup", "norm_over_margin", "augment_performance", "constant")


class RunConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass
class MeasureEntry:
    id: str
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    measures: list = field(default_factory=list)
    seed: int = 0
    budget: int | None = None
    parallel: int = 1
    zoo: str | None = None
    max_conditioning: int = 2
    exact_conditioning: bool = False
    include_unsaturated: bool = False
    results: str | None = None
    scores: str | None = None
    report: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise RunConfigError("<root>", "expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise RunConfigError(unknown[0], "unknown field")
        d = dict(d)
        raw = d.pop("measures", [])
        if not isinstance(raw, list):
            raise RunConfigError("measures", "expected a list")
        entries, seen = [], set()
        for i, m in enumerate(raw):
            if not isinstance(m, dict) or "id" not in m:
                raise RunConfigError(f"measures[{i}]", "expected an object with an 'id'")
            kind = m.get("kind", m["id"])
            if kind not in KINDS:
                raise RunConfigError(f"measures[{i}].kind", f"unknown measure kind {kind!r}")
            if m["id"] in seen:
                raise RunConfigError(f"measures[{i}].id", f"duplicate id {m['id']!r}")
            params = m.get("params", {})
            if not isinstance(params, dict):
                raise RunConfigError(f"measures[{i}].params", "expected an object")
            seen.add(m["id"])
            entries.append(MeasureEntry(m["id"], kind, params))
            try:
                _build(kind, params, 0)
            except (TypeError, ValueError) as exc:
                raise RunConfigError(f"measures[{i}].params", str(exc)) from None
        for name, typ in (("seed", int), ("parallel", int), ("max_conditioning", int)):
            if name in d and (not isinstance(d[name], typ) or isinstance(d[name], bool)):
                raise RunConfigError(name, f"expected an integer, got {d[name]!r}")
        if d.get("budget") is not None and (not isinstance(d["budget"], int) or d["budget"] < 1):
            raise RunConfigError("budget", f"expected a positive integer or null, got {d['budget']!r}")
        if d.get("parallel", 1) < 1:
            raise RunConfigError("parallel", "must be >= 1")
        if not 0 <= d.get("max_conditioning", 2) <= 2:
            raise RunConfigError("max_conditioning", "must be 0, 1 or 2")
        return cls(measures=entries, **d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise RunConfigError("<root>", f"invalid JSON ({exc})") from None
        return cls.from_dict(doc)


def default_roster() -> list:
    """The measure roster of the comparison table, with the generic design choices."""
    return [
        {"id": "dbi", "kind": "dbi", "params": {"layer": "first"}},
        {"id": "dbi_third_from_last", "kind": "dbi", "params": {"layer": "third_from_last"}},
        {"id": "silhouette", "kind": "dbi", "params": {"layer": "first", "index": "silhouette"}},
        {"id": "calinski_harabasz", "kind": "dbi", "params": {"layer": "first", "index": "calinski-harabasz"}},
        {"id": "label_wise_mixup", "kind": "mixup", "params": {"layer": "input", "lam": 0.5}},
        {"id": "manifold_mixup", "kind": "mixup", "params": {"layer": "first", "lam": 0.5}},
        {"id": "margin_summary", "kind": "margin", "params": {"layer": "input"}},
        {"id": "dbi_x_mixup", "kind": "dbi_x_mixup", "params": {}},
        {"id": "augment_margin", "kind": "margin",
         "params": {"layer": "input", "perturbation": "augment", "augment": {"generic": True}}},
        {"id": "mixup_margin", "kind": "margin", "params": {"layer": "input", "perturbation": "mixup"}},
        {"id": "prod_of_spec_over_margin", "kind": "norm_over_margin", "params": {"kind": "spec"}},
        {"id": "prod_of_fro_over_margin", "kind": "norm_over_margin", "params": {"kind": "fro"}},
        {"id": "augment_performance", "kind": "augment_performance", "params": {"augment": {"generic": True}}},
        {"id": "constant", "kind": "constant", "params": {}},
    ]


# --- dispatch ----------------------------------------------------------------


def _seeded(params: dict, seed: int) -> dict:
    p = dict(params)
    p.setdefault("seed", seed)
    return p


def _build(kind: str, params: dict, seed: int):
    """Parse params into config objects without running anything (validation + dispatch)."""
    if kind == "dbi":
        return M.DbiConfig(**_seeded(params, seed))
    if kind == "mixup":
        p = _seeded(params, seed)
        extra = sorted(set(p) - {"lam", "layer", "seed"})
        if extra:
            raise ValueError(f"unknown mixup parameters {extra}")
        MixupSpec(float(p.get("lam", 0.5)))
        return {"lam": float(p.get("lam", 0.5)), "layer": p.get("layer", "input"), "seed": p["seed"]}
    if kind == "margin":
        p = _seeded(params, seed)
        aug = AugmentConfig(**_seeded(p.pop("augment", {}), seed))
        mix = p.pop("mixup", {})
        mix = {"lam": float(mix.get("lam", 0.5)), "seed": mix.get("seed", seed)}
        return M.MarginConfig(**p), aug, mix
    if kind == "dbi_x_mixup":
        return _build("dbi", params.get("dbi", {}), seed), _build("mixup", params.get("mixup", {}), seed)
    if kind == "norm_over_margin":
        p = dict(params)
        if p.get("kind", "spec") not in ("spec", "fro"):
            raise ValueError(f"kind must be 'spec' or 'fro', got {p.get('kind')!r}")
        return {"kind": p.get("kind", "spec"), "percentile": float(p.get("percentile", 10.0)), "seed": seed}
    if kind == "augment_performance":
        return AugmentConfig(**_seeded(params.get("augment", {}), seed))
    if kind == "constant":
        return {"value": float(params.get("value", 0.0))}
    raise ValueError(f"unknown measure kind {kind!r}")


def _mixup(model, data, cfg, budget, measure_id):
    spec = MixupSpec(cfg["lam"], M.resolve_layer(model, cfg["layer"]), cfg["seed"])
    return M.mixup_measure(model, data, spec, budget, cfg["seed"], measure_id)


def compute_measure(entry: MeasureEntry, model, data, seed: int = 0, budget: int | None = None) -> M.MeasureValue:
    cfg = _build(entry.kind, entry.params, seed)
    if entry.kind == "dbi":
        return M.dbi_measure(model, data, cfg, budget, entry.id)
    if entry.kind == "mixup":
        return _mixup(model, data, cfg, budget, entry.id)
    if entry.kind == "margin":
        mcfg, aug, mix = cfg
        k = M.resolve_layer(model, mcfg.layer)
        return M.margin_measure(model, data, mcfg, aug, MixupSpec(mix["lam"], k, mix["seed"]), budget, entry.id)
    if entry.kind == "dbi_x_mixup":
        dcfg, mcfg = cfg
        return M.combined_dbi_mixup(M.dbi_measure(model, data, dcfg, budget, "dbi"),
                                    _mixup(model, data, mcfg, budget, "mixup"), entry.id)
    if entry.kind == "norm_over_margin":
        return M.norm_over_margin_baseline(model, data, cfg["kind"], budget, cfg["seed"], cfg["percentile"],
                                           entry.id)
    if entry.kind == "augment_performance":
        return M.augment_performance(model, data, cfg, budget, seed, entry.id)
    return M.MeasureValue(entry.id, cfg["value"], None, 0, {}, dict(cfg))


def provenance_hash(record, entry: MeasureEntry, seed: int, budget, blob_crc: int) -> str:
    key = {"model_id": record.model_id, "blob_crc32": blob_crc, "id": entry.id, "kind": entry.kind,
           "params": entry.params, "seed": seed, "budget": budget}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def _blob_crc(zoo: Zoo, record) -> int:
    return json.loads((zoo.root / record.model_path).read_text())["blob"]["crc32"]


def _measure_job(args):
    root, model_id, todo, seed, budget = args
    zoo = Zoo.open(root)
    record = next(r for r in zoo.records if r.model_id == model_id)
    model, data = zoo.model(record), zoo.training_data(record)
    out = []
    for entry, h in todo:
        row = {"model_id": model_id, "measure": entry.id, "hash": h}
        try:
            row["value"] = compute_measure(entry, model, data, seed, budget).to_dict()
        except Exception as exc:  # per-model failures are recorded, the run continues
            row["error"] = f"{type(exc).__name__}: {exc}"
        out.append(row)
    return out


def read_results(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def write_results(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return path


def run_measures(zoo_dir, cfg: RunConfig, out_path, parallel: int | None = None, progress=None):
    """Compute every (model, measure) pair not already present with a matching hash.

    Returns ``(rows, n_computed, n_failed)``; rows are written in manifest x config order.
    """
    zoo = Zoo.open(zoo_dir)
    previous = {(r["model_id"], r["measure"]): r for r in read_results(out_path) if "value" in r}
    jobs, kept = [], {}
    for record in zoo.records:
        crc = _blob_crc(zoo, record)
        todo = []
        for entry in cfg.measures:
            h = provenance_hash(record, entry, cfg.seed, cfg.budget, crc)
            old = previous.get((record.model_id, entry.id))
            if old is not None and old["hash"] == h:
                kept[(record.model_id, entry.id)] = old
            else:
                todo.append((entry, h))
        if todo:
            jobs.append((str(zoo.root), record.model_id, todo, cfg.seed, cfg.budget))
    parallel = parallel or cfg.parallel
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            batches = list(pool.map(_measure_job, jobs))
    else:
        batches = []
        for job in jobs:
            batches.append(_measure_job(job))
            if progress:
                progress(job[1])
    fresh = {(r["model_id"], r["measure"]): r for batch in batches for r in batch}
    rows = []
    for record in zoo.records:
        for entry in cfg.measures:
            key = (record.model_id, entry.id)
            rows.append(fresh.get(key) or kept[key])
    write_results(out_path, rows)
    return rows, sum(len(b) for b in batches), sum("error" in r for b in batches for r in b)


# --- scoring table -----------------------------------------------------------


def score_results(zoo_dir, rows, cfg: RunConfig) -> dict:
    """Per-measure Kendall tau and conditional-MI score over the scored models."""
    zoo = Zoo.open(zoo_dir)
    records = zoo.scored_records(cfg.include_unsaturated)
    by_id = {r.model_id: r for r in records}
    order = [m.id for m in cfg.measures] or list(dict.fromkeys(r["measure"] for r in rows))
    table = []
    for mid in order:
        vals = {r["model_id"]: r["value"]["value"] for r in rows
                if r["measure"] == mid and "value" in r and r["model_id"] in by_id}
        usable = [rid for rid in by_id if rid in vals and math.isfinite(vals[rid])]
        missing = [rid for rid in by_id if rid not in usable]
        row = {"measure": mid, "n_models": len(usable), "missing": missing,
               "kendall_tau": None, "cmi": None, "points": []}
        if len(usable) >= 2:
            inp = ScoreInput([vals[i] for i in usable], [by_id[i].gap for i in usable],
                             [by_id[i].config for i in usable], zoo.axes)
            try:
                row["kendall_tau"] = kendall_tau(inp)
            except UndefinedScore:
                pass
            try:
                row["cmi"] = conditional_mi_score(inp, cfg.max_conditioning, cfg.exact_conditioning)
            except (UndefinedScore, ValueError):
                pass
        row["points"] = [{"model_id": i, "value": vals[i], "gap": by_id[i].gap} for i in usable]
        table.append(row)
    return {"protocol": PROTOCOL, "zoo": Path(zoo_dir).name, "models_scored": len(records),
            "models_flagged": [r.model_id for r in zoo.records if not r.saturated],
            "max_conditioning": cfg.max_conditioning, "exact_conditioning": cfg.exact_conditioning,
            "rows": table}


def write_scores(path, scores: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(scores))
    return path


def _fmt(v, spec):
    return "n/a" if v is None else format(v, spec)


def render_report(scores: dict) -> str:
    width = max([len("Complexity measure")] + [len(r["measure"]) for r in scores["rows"]])
    lines = [f"Zoo: {scores['zoo']}    models scored: {scores['models_scored']}    "
             f"CMI: {scores['protocol']}, |S| {'=' if scores['exact_conditioning'] else '<='} "
             f"{scores['max_conditioning']}",
             "",
             f"{'Complexity measure':<{width}}  {'Kendall tau':>11}  {'CMI score':>9}  {'models':>6}",
             "-" * (width + 34)]
    for r in scores["rows"]:
        lines.append(f"{r['measure']:<{width}}  {_fmt(r['kendall_tau'], '11.4f'):>11}  "
                     f"{_fmt(r['cmi'], '9.2f'):>9}  {r['n_models']:>6}")
    gaps = [r for r in scores["rows"] if r["missing"]]
    if gaps:
        lines.append("")
        for r in gaps:
            lines.append(f"coverage gap: {r['measure']} missing {', '.join(r['missing'])}")
    if scores.get("models_flagged"):
        lines.append(f"excluded (unsaturated/diverged): {', '.join(scores['models_flagged'])}")
    return "\n".join(lines) + "\n"
