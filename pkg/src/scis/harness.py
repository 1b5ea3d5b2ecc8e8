"""Experiment driver: metrics, perturbation sweeps, ablations, reports.

Every sweep is a pure function of (models, data, grid, seed): grid cells
may evaluate in parallel threads (capped by the SCIS_THREADS environment
variable), but results are assembled in grid order, so output files are
byte-identical across thread counts and repeat runs.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import dictionary as dlib
from . import planner as pl
from . import scenes as sc

HORIZON_STEPS = {"1s": 2, "2s": 4, "3s": 6}

REPORT_COLUMNS = ["model", "condition", "split", "l2_1s", "l2_2s", "l2_3s",
                  "l2_avg", "collision_rate", "degradation_ratio", "n_scenes",
                  "seed", "model_hash"]
SCENE_COLUMNS = ["model", "condition", "scene_id", "l2_1s", "l2_2s", "l2_3s",
                 "collision"]

EGO_NOISE_GRID = (("clean", None, None), ("x0.0", "scale", 0.0),
                  ("x0.5", "scale", 0.5), ("x1.5", "scale", 1.5),
                  ("100m/s", "absolute", 100.0))
CONTEXT_NOISE_MAGNITUDES = (0.5, 0.7, 0.9)
DICT_SWEEP_GRID = ((5, 2, 3), (10, 3, 6), (20, 5, 10))
CLUSTER_ALGOS = ("kmeans", "kmedoids", "kmeans_pp")


def _max_workers() -> int:
    return max(1, int(os.environ.get("SCIS_THREADS", "1")))


def parallel_map(fn, items):
    """Apply fn to items, possibly in threads; results in input order."""
    items = list(items)
    workers = min(_max_workers(), max(len(items), 1))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class MetricsReport:
    """Planning metrics for one (model, condition) cell."""

    model: str
    condition: str
    split: str
    l2_1s: float
    l2_2s: float
    l2_3s: float
    l2_avg: float
    collision_rate: float
    n_scenes: int
    seed: int
    model_hash: str
    degradation_ratio: float = 1.0
    per_scene: list = field(default_factory=list, repr=False)

    def to_row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(**obj)


def evaluate(model: pl.PlannerModel, scenes, condition: str = "clean",
             split: str = "val", label: str = "model", seed: int = 0) -> MetricsReport:
    """Planning L2 per horizon plus the disc-overlap collision proxy.

    L2 at horizon t is the mean distance over waypoints up to t; the
    average is the mean of the three per-horizon values. The collision
    proxy counts scenes with any predicted waypoint inside an agent disc.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("evaluate called with an empty dataset")
    preds = model.predict_waypoints(scenes)
    expert = np.stack([s.expert_traj for s in scenes])
    dists = np.linalg.norm(preds - expert, axis=2)   # n x N_WAYPOINTS
    per_h = {h: dists[:, :k].mean(axis=1) for h, k in HORIZON_STEPS.items()}
    collisions = np.array([
        sc.scene_collides(preds[i], scenes[i].agent_kin) for i in range(len(scenes))
    ])
    per_scene = [
        {"model": label, "condition": condition, "scene_id": s.scene_id,
         "l2_1s": float(per_h["1s"][i]), "l2_2s": float(per_h["2s"][i]),
         "l2_3s": float(per_h["3s"][i]), "collision": int(collisions[i])}
        for i, s in enumerate(scenes)]
    l1, l2, l3 = (float(per_h[h].mean()) for h in ("1s", "2s", "3s"))
    return MetricsReport(
        model=label, condition=condition, split=split,
        l2_1s=l1, l2_2s=l2, l2_3s=l3, l2_avg=(l1 + l2 + l3) / 3.0,
        collision_rate=float(collisions.mean()), n_scenes=len(scenes),
        seed=seed, model_hash=model.identity_hash()[:12], per_scene=per_scene)


def _with_ratio(report: MetricsReport, clean_avg: float) -> MetricsReport:
    report.degradation_ratio = report.l2_avg / clean_avg if clean_avg > 0 else float("inf")
    return report


def run_ego_noise_sweep(models: dict, data, seed: int = 0) -> list:
    """Models x {clean, x0.0, x0.5, x1.5, 100m/s} with degradation ratios."""
    if not models:
        raise ValueError("no models supplied")
    scenes = list(data.scenes if hasattr(data, "scenes") else data)

    def cell(args):
        label, model, (cond, mode, value) = args
        if mode is None:
            edited = scenes
        else:
            edited = [sc.perturb_ego_velocity(s, mode, value) for s in scenes]
        return evaluate(model, edited, condition=cond, label=label, seed=seed)

    grid = [(label, model, g) for label, model in models.items() for g in EGO_NOISE_GRID]
    reports = parallel_map(cell, grid)
    by_model_clean = {r.model: r.l2_avg for r in reports if r.condition == "clean"}
    return [_with_ratio(r, by_model_clean[r.model]) for r in reports]


def run_context_noise_sweep(models: dict, data, seed: int = 0) -> list:
    """Models x {agent, map} x {0.5, 0.7, 0.9} uniform feature noise."""
    scenes = list(data.scenes if hasattr(data, "scenes") else data)
    grid = [(label, model, tgt, mag)
            for label, model in models.items()
            for tgt in ("agent", "map")
            for mag in CONTEXT_NOISE_MAGNITUDES]

    def cell(args):
        label, model, tgt, mag = args
        edited = [sc.perturb_context_features(s, tgt, mag, seed=seed) for s in scenes]
        return evaluate(model, edited, condition=f"{tgt}-x{mag}", label=label, seed=seed)

    clean = {label: evaluate(model, scenes, condition="clean", label=label, seed=seed)
             for label, model in models.items()}
    reports = list(clean.values()) + parallel_map(cell, grid)
    return [_with_ratio(r, clean[r.model].l2_avg) for r in reports]


def run_scenario_split(models: dict, data, seed: int = 0) -> list:
    """Straight (ST) vs turning (LR) breakdown; gap rows carry the difference."""
    scenes = list(data.scenes if hasattr(data, "scenes") else data)
    st = [s for s in scenes if s.context == 0]
    lr = [s for s in scenes if s.context != 0]
    if not st or not lr:
        raise ValueError("scenario split requires both straight and turning scenes")
    out = []
    for label, model in models.items():
        r_st = evaluate(model, st, condition="ST", label=label, seed=seed)
        r_lr = evaluate(model, lr, condition="LR", label=label, seed=seed)
        r_lr.degradation_ratio = r_lr.l2_avg / r_st.l2_avg
        out.extend([r_st, r_lr])
    return out


def run_ablation(data, dictionary, base_cfg: pl.TrainConfig, val_data,
                 seed: int = 0) -> tuple:
    """Train the 2x2 intervention grid on a shared seed; ID-1..ID-4 rows."""
    import dataclasses
    grid = [("ID-1", False, False), ("ID-2", True, False),
            ("ID-3", False, True), ("ID-4", True, True)]
    reports, models = [], {}
    for label, use_pdm, use_idm in grid:
        cfg = dataclasses.replace(base_cfg, use_pdm=use_pdm, use_idm=use_idm)
        if use_pdm or use_idm:
            model = pl.train_causal(data, dictionary, cfg)
        else:
            model = pl.pretrain_baseline(data, cfg)
        models[label] = model
        reports.append(evaluate(model, val_data.scenes, condition="clean",
                                label=label, seed=seed))
    return reports, models


def run_dict_sweep(data, base_cfg: pl.TrainConfig, val_data, seed: int = 0) -> list:
    """Dictionary sizes (5,2,3) / (10,3,6) / (20,5,10), shared training seed."""
    import dataclasses
    baseline = pl.pretrain_baseline(data, dataclasses.replace(
        base_cfg, use_pdm=False, use_idm=False))
    stores = dlib.collect_embeddings(baseline, data)
    cfg = dataclasses.replace(base_cfg, use_pdm=True, use_idm=True)
    reports = []
    for k_o, k_m, k_a in DICT_SWEEP_GRID:
        d = dlib.build_dictionary(stores, k_o, k_m, k_a, "kmeans_pp", seed)
        model = pl.train_causal(data, d, cfg)
        reports.append(evaluate(model, val_data.scenes,
                                condition=f"k=({k_o},{k_m},{k_a})",
                                label="causal", seed=seed))
    return reports


def run_cluster_compare(data, base_cfg: pl.TrainConfig, val_data, seed: int = 0) -> list:
    """Same pipeline under kmeans / kmedoids / kmeans_pp dictionaries."""
    import dataclasses
    baseline = pl.pretrain_baseline(data, dataclasses.replace(
        base_cfg, use_pdm=False, use_idm=False))
    stores = dlib.collect_embeddings(baseline, data)
    cfg = dataclasses.replace(base_cfg, use_pdm=True, use_idm=True)
    reports = [evaluate(baseline, val_data.scenes, condition="baseline",
                        label="baseline", seed=seed)]
    for algo in CLUSTER_ALGOS:
        d = dlib.build_dictionary(stores, 10, 3, 6, algo, seed)
        model = pl.train_causal(data, d, cfg)
        reports.append(evaluate(model, val_data.scenes, condition=algo,
                                label="causal", seed=seed))
    return reports


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def emit(reports, path: str, fmt: str = "csv") -> None:
    """Write reports plus a per-scene sidecar (<path>.scenes.<fmt>)."""
    reports = list(reports)
    if fmt == "csv":
        _write_csv(path, REPORT_COLUMNS, [r.to_row() for r in reports])
        _write_csv(path + ".scenes.csv", SCENE_COLUMNS,
                   [row for r in reports for row in r.per_scene])
    elif fmt == "json":
        payload = [r.to_json() for r in reports]
        with open(path, "w") as fh:
            json.dump(payload, fh)
            fh.write("\n")
    else:
        raise ValueError(f"unknown emit format {fmt!r}")


def _write_csv(path: str, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_reports(path: str) -> list:
    with open(path) as fh:
        return [MetricsReport.from_json(obj) for obj in json.load(fh)]


def pca_project(embeddings: np.ndarray, n_components: int = 2) -> np.ndarray:
    """Centered SVD projection with a deterministic sign convention."""
    x = np.asarray(embeddings, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:n_components]
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return x @ comps.T


def emit_pca(embeddings: np.ndarray, labels, path: str) -> None:
    coords = pca_project(embeddings, 2)
    rows = [{"index": i, "x": float(coords[i, 0]), "y": float(coords[i, 1]),
             "label": labels[i]} for i in range(len(coords))]
    _write_csv(path, ["index", "x", "y", "label"], rows)
