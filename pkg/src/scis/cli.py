"""Command-line driver for the causal intervention lab.

Subcommands mirror the workflow: ``scm`` queries on discrete SCMs,
``generate`` for synthetic datasets, ``pretrain`` / ``build-dict`` /
``train`` for the two-stage pipeline, ``eval`` plus the sweep family for
experiments, and ``project-pca`` for embedding visualisation data.

Exit codes: 0 success, 1 usage error, 2 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import causal as cg
from . import dictionary as dlib
from . import harness
from . import planner as pl
from . import scenes as sc

USAGE_ERROR = 1
CHECK_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _emit_json(obj, out: str | None):
    text = json.dumps(obj, indent=1) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load_scm(spec: str) -> tuple:
    """Returns (dag, scm-or-None); 'vad' selects the built-in pipeline graph."""
    if spec == "vad":
        return cg.build_vad_scm(), None
    scm = cg.load_scm(spec)
    return scm.graph, scm


def _states(pairs) -> dict:
    out = {}
    for item in pairs or []:
        name, _, state = item.partition("=")
        if not _:
            raise SystemExit(USAGE_ERROR)
        out[name] = int(state)
    return out


def cmd_scm(args) -> int:
    dag, scm = _load_scm(args.scm)
    if args.query == "dsep":
        result = cg.d_separated(dag, set(args.x.split(",")), set(args.y.split(",")),
                                set(args.z.split(",")) if args.z else set())
        _emit_json({"d_separated": result}, args.out)
    elif args.query == "backdoor":
        paths = cg.backdoor_paths(dag, args.s, args.y)
        _emit_json({"backdoor_paths": paths}, args.out)
    elif args.query == "observational":
        if scm is None:
            raise SystemExit(USAGE_ERROR)
        dist = cg.observational(scm, args.y, _states(args.given))
        _emit_json({"variable": dist.variable, "probs": dist.probs.tolist()}, args.out)
    elif args.query == "interventional":
        if scm is None:
            raise SystemExit(USAGE_ERROR)
        dist = cg.interventional(scm, args.y, _states(args.do))
        _emit_json({"variable": dist.variable, "probs": dist.probs.tolist()}, args.out)
    return 0


def cmd_generate(args) -> int:
    if args.config:
        with open(args.config) as fh:
            cfg = sc.ScenarioConfig.from_json(json.load(fh))
    else:
        cfg = sc.ScenarioConfig(seed=args.seed)
    ds = sc.generate_dataset(cfg, args.n, split=args.split)
    sc.save_dataset(ds, args.out)
    return 0


def cmd_pretrain(args) -> int:
    data = sc.load_dataset(args.data)
    cfg = pl.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         lr=args.lr, seed=args.seed,
                         feature_dropout=args.feature_dropout)
    model = pl.pretrain_baseline(data, cfg)
    pl.save_checkpoint(model, args.out)
    return 0


def cmd_build_dict(args) -> int:
    model = pl.load_checkpoint(args.model)
    data = sc.load_dataset(args.data)
    stores = dlib.collect_embeddings(model, data)
    k_o, k_m, k_a = (int(v) for v in args.k.split(","))
    d = dlib.build_dictionary(stores, k_o, k_m, k_a, algo=args.algo, seed=args.seed)
    dlib.save_dictionary(d, args.out)
    return 0


def cmd_train(args) -> int:
    data = sc.load_dataset(args.data)
    dictionary = dlib.load_dictionary(args.dict)
    cfg = pl.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         lr=args.lr, seed=args.seed,
                         use_pdm=args.pdm, use_idm=args.idm)
    model = pl.train_causal(data, dictionary, cfg)
    pl.save_checkpoint(model, args.out)
    return 0


def _load_models(args) -> dict:
    models = {}
    for label, path in (("baseline", args.baseline), ("causal", args.causal)):
        if path:
            models[label] = pl.load_checkpoint(path)
    if not models:
        raise SystemExit(USAGE_ERROR)
    return models


def cmd_eval(args) -> int:
    model = pl.load_checkpoint(args.model)
    data = sc.load_dataset(args.data)
    report = harness.evaluate(model, data.scenes, split=data.split, seed=args.seed)
    harness.emit([report], args.out, args.format)
    return 0


def cmd_sweep(args) -> int:
    models = _load_models(args)
    data = sc.load_dataset(args.data)
    if args.kind == "ego-noise":
        reports = harness.run_ego_noise_sweep(models, data, seed=args.seed)
    elif args.kind == "context-noise":
        reports = harness.run_context_noise_sweep(models, data, seed=args.seed)
    else:
        reports = harness.run_scenario_split(models, data, seed=args.seed)
    harness.emit(reports, args.out, args.format)
    if args.check:
        return _check_sweep(args.kind, reports)
    return 0


def _ratio(reports, model, condition) -> float:
    for r in reports:
        if r.model == model and r.condition == condition:
            return r.degradation_ratio
    raise SystemExit(USAGE_ERROR)


def _check_sweep(kind: str, reports) -> int:
    """Directional robustness checks; exit 2 when the pattern is violated."""
    if kind == "ego-noise":
        ok = (_ratio(reports, "causal", "x0.0") <= 0.8 * _ratio(reports, "baseline", "x0.0")
              and _ratio(reports, "causal", "100m/s") <= 0.7 * _ratio(reports, "baseline", "100m/s"))
    elif kind == "context-noise":
        ok = all(_ratio(reports, "causal", f"{t}-x0.9") < _ratio(reports, "baseline", f"{t}-x0.9")
                 for t in ("agent", "map"))
    else:
        gaps = {}
        for label in ("baseline", "causal"):
            rs = {r.condition: r for r in reports if r.model == label}
            gaps[label] = rs["LR"].l2_avg - rs["ST"].l2_avg
        ok = gaps["causal"] < gaps["baseline"]
    return 0 if ok else CHECK_FAILURE


def cmd_ablate(args) -> int:
    data = sc.load_dataset(args.data)
    val = sc.load_dataset(args.val)
    dictionary = dlib.load_dictionary(args.dict)
    cfg = pl.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         lr=args.lr, seed=args.seed)
    reports, _ = harness.run_ablation(data, dictionary, cfg, val, seed=args.seed)
    harness.emit(reports, args.out, args.format)
    if args.check:
        by = {r.model: r.l2_avg for r in reports}
        lo, hi = sorted([by["ID-2"], by["ID-3"]])
        ok = (by["ID-4"] <= lo * 1.05 and hi <= by["ID-1"] * 1.05)
        return 0 if ok else CHECK_FAILURE
    return 0


def cmd_dict_sweep(args) -> int:
    data = sc.load_dataset(args.data)
    val = sc.load_dataset(args.val)
    cfg = pl.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         lr=args.lr, seed=args.seed)
    reports = harness.run_dict_sweep(data, cfg, val, seed=args.seed)
    harness.emit(reports, args.out, args.format)
    return 0


def cmd_cluster_compare(args) -> int:
    data = sc.load_dataset(args.data)
    val = sc.load_dataset(args.val)
    cfg = pl.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         lr=args.lr, seed=args.seed)
    reports = harness.run_cluster_compare(data, cfg, val, seed=args.seed)
    harness.emit(reports, args.out, args.format)
    return 0


def cmd_project_pca(args) -> int:
    model = pl.load_checkpoint(args.model)
    data = sc.load_dataset(args.data)
    rows = [model.query_embeddings(s) for s in data.scenes]
    if args.domain == "ego":
        embeddings = np.stack([r["ego"][0] for r in rows])
    else:
        embeddings = np.stack([r[args.domain].mean(axis=0) for r in rows])
    labels = [sc.CONTEXTS[s.context] for s in data.scenes]
    harness.emit_pca(embeddings, labels, args.out)
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="scis", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("scm", help="discrete SCM queries")
    q.add_argument("query", choices=["dsep", "backdoor", "observational", "interventional"])
    q.add_argument("--scm", default="vad", help="SCM JSON path or 'vad'")
    q.add_argument("--x"), q.add_argument("--y"), q.add_argument("--z", default="")
    q.add_argument("--s"), q.add_argument("--given", nargs="*"), q.add_argument("--do", nargs="*")
    q.add_argument("--out")
    q.set_defaults(fn=cmd_scm)

    g = sub.add_parser("generate", help="sample a synthetic dataset")
    g.add_argument("--config"), g.add_argument("--n", type=int, required=True)
    g.add_argument("--split", choices=["train", "val"], default="train")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    def train_args(sp, flags=False):
        sp.add_argument("--data", required=True)
        sp.add_argument("--epochs", type=int, default=pl.TrainConfig.epochs)
        sp.add_argument("--batch-size", type=int, default=pl.TrainConfig.batch_size)
        sp.add_argument("--lr", type=float, default=pl.TrainConfig.lr)
        if flags:
            sp.add_argument("--pdm", action="store_true")
            sp.add_argument("--idm", action="store_true")

    t = sub.add_parser("pretrain", help="stage-1 baseline training")
    train_args(t)
    t.add_argument("--feature-dropout", type=float, default=0.0)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_pretrain)

    b = sub.add_parser("build-dict", help="cluster query embeddings into a dictionary")
    b.add_argument("--model", required=True), b.add_argument("--data", required=True)
    b.add_argument("--k", default="10,3,6")
    b.add_argument("--algo", choices=list(dlib.ALGOS), default="kmeans_pp")
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_build_dict)

    tr = sub.add_parser("train", help="stage-2 de-confounded training")
    train_args(tr, flags=True)
    tr.add_argument("--dict", required=True)
    tr.add_argument("--out", required=True)
    tr.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="planning metrics on a dataset")
    e.add_argument("--model", required=True), e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--format", choices=["csv", "json"], default="csv")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="robustness sweeps")
    s.add_argument("kind", choices=["ego-noise", "context-noise", "split"])
    s.add_argument("--baseline"), s.add_argument("--causal")
    s.add_argument("--data", required=True), s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.add_argument("--check", action="store_true",
                   help="exit 2 unless the causal model is directionally more robust")
    s.set_defaults(fn=cmd_sweep)

    for name, fn in (("ablate", cmd_ablate), ("dict-sweep", cmd_dict_sweep),
                     ("cluster-compare", cmd_cluster_compare)):
        a = sub.add_parser(name, help=f"run the {name.replace('-', ' ')} grid")
        train_args(a)
        a.add_argument("--val", required=True)
        if name == "ablate":
            a.add_argument("--dict", required=True)
            a.add_argument("--check", action="store_true")
        a.add_argument("--out", required=True)
        a.add_argument("--format", choices=["csv", "json"], default="csv")
        a.set_defaults(fn=fn)

    pp = sub.add_parser("project-pca", help="2-D PCA of query embeddings")
    pp.add_argument("--model", required=True), pp.add_argument("--data", required=True)
    pp.add_argument("--domain", choices=["object", "map", "agent", "ego"], default="ego")
    pp.add_argument("--out", required=True)
    pp.set_defaults(fn=cmd_project_pca)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except (cg.GraphError, cg.UndefinedConditionalError, ValueError,
            pl.ConfigurationError, pl.TrainingError, FileNotFoundError) as exc:
        sys.stderr.write(f"scis: {exc}\n")
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
