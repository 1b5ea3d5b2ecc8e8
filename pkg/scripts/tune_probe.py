"""Scratch probe for the robustness criteria (not part of the suite)."""
import dataclasses
import sys
import time

import numpy as np

from scis import dictionary as dlib
from scis import planner as pl
from scis import scenes as sc
from scis import autodiff as ad


def avg_l2(model, scenes, expert):
    pred = model.predict_waypoints(scenes)
    d = np.linalg.norm(pred - expert, axis=2)
    return (d[:, :2].mean() + d[:, :4].mean() + d[:, :6].mean()) / 3


def channel_sensitivity(model, scenes, expert, direction, block):
    """L2 shift when features move +1 unit along a world direction."""
    moved = []
    for s in scenes:
        if block == "map":
            moved.append(dataclasses.replace(s, map_feats=s.map_feats + direction))
        else:
            moved.append(dataclasses.replace(s, obj_feats=s.obj_feats + direction))
    return abs(avg_l2(model, moved, expert) - avg_l2(model, scenes, expert))


def main(epochs=40, n_train=2000, lr=0.05, seed=0, nval=500):
    cfg = sc.ScenarioConfig(seed=5)
    train = sc.generate_dataset(cfg, n_train)
    val = sc.generate_dataset(cfg, nval, split="val")
    expert = np.stack([s.expert_traj for s in val.scenes])

    tc = pl.TrainConfig(epochs=epochs, batch_size=64, lr=lr, seed=seed)
    t0 = time.time()
    base = pl.pretrain_baseline(train, tc)
    stores = dlib.collect_embeddings(base, train)
    d = dlib.build_dictionary(stores, 10, 3, 6, "kmeans_pp", seed)
    tc_c = pl.TrainConfig(epochs=epochs, batch_size=64, lr=lr, seed=seed,
                          use_pdm=True, use_idm=True)
    causal = pl.train_causal(train, d, tc_c)
    print(f"train both: {time.time()-t0:.0f}s")

    rows = {}
    for name, model in (("base", base), ("causal", causal)):
        clean = avg_l2(model, val.scenes, expert)
        m = {"clean": clean}
        for label, mode, v in (("x0.0", "scale", 0.0), ("x0.5", "scale", 0.5),
                               ("x1.5", "scale", 1.5), ("abs100", "absolute", 100.0)):
            pert = [sc.perturb_ego_velocity(s, mode, v) for s in val.scenes]
            m[label] = avg_l2(model, pert, expert) / clean
        for tgt in ("agent", "map"):
            pert = [sc.perturb_context_features(s, tgt, 0.9, seed=11) for s in val.scenes]
            m[f"ctx-{tgt}"] = avg_l2(model, pert, expert) / clean
        st = [s for s in val.scenes if s.context == 0]
        lrn = [s for s in val.scenes if s.context != 0]
        m["st"] = avg_l2(model, st, np.stack([s.expert_traj for s in st]))
        m["lr"] = avg_l2(model, lrn, np.stack([s.expert_traj for s in lrn]))
        m["gap"] = m["lr"] - m["st"]
        m["sens_style"] = channel_sensitivity(model, val.scenes[:200], expert[:200],
                                              sc.WORLD["style"], "map")
        m["sens_curv"] = channel_sensitivity(model, val.scenes[:200], expert[:200],
                                             sc.WORLD["curv"], "map")
        rows[name] = m

    hdr = ["clean", "x0.0", "x0.5", "x1.5", "abs100", "ctx-agent", "ctx-map",
           "st", "lr", "gap", "sens_style", "sens_curv"]
    print(f"{'':8s}" + "".join(f"{h:>11s}" for h in hdr))
    for name, m in rows.items():
        print(f"{name:8s}" + "".join(f"{m[h]:11.3f}" for h in hdr))
    b, c = rows["base"], rows["causal"]
    print(f"\nx0.0 ratio {c['x0.0']/b['x0.0']:.3f} (<=0.8)   abs100 {c['abs100']/b['abs100']:.3f} (<=0.7)"
          f"   ctx-map {c['ctx-map']<b['ctx-map']}   ctx-agent {c['ctx-agent']<b['ctx-agent']}"
          f"   gap {c['gap']<b['gap']}")
    # module activity
    g_w = np.linalg.norm(causal.idm["idm_agent_vs_map"].w_o.data)
    lam = np.abs(causal.pdm["pdm_object"].lam.data).mean()
    print(f"module activity: |w_o(agent_vs_map)| {g_w:.2f}  mean|lam| {lam:.3f}")


if __name__ == "__main__":
    kw = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        kw[k] = float(v) if "." in v else int(v)
    main(**kw)
