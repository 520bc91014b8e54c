"""Command-line front end.

Exit status: 0 on success, 2 on invalid input, 1 on any other failure.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import em, experiment, ldlnm, pgm, pipeline, plotting, sa
from .core import (DatasetSplit, ValidationError, read_annotations, read_distributions,
                   read_features, read_splits, write_annotations, write_distributions,
                   write_features, write_splits)
from .genmodel import Hyperparams, cluster_features, gen_graph, random_assignment

log = logging.getLogger("labeldist")

SA_TRACE_HEADER = ["iter", "loglik", "best_loglik", "temperature"]
EM_TRACE_HEADER = ["round", "expected_loglik", "bp_rounds", "bp_residual"]


# ---------------------------------------------------------------- helpers

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _items(args, num_items):
    """0-based item ids selected by --splits/--part, or every item."""
    if getattr(args, "splits", None):
        split = read_splits(args.splits)
        return getattr(split, args.part) if args.part != "all" else np.arange(num_items)
    return np.arange(num_items)


def _hyperparams(args):
    return Hyperparams(args.K, args.L, args.alpha, args.gamma, args.tau)


def _load_matrix(args, num_items=None):
    return read_annotations(args.annotations, num_labels=getattr(args, "num_labels", None),
                            num_items=num_items)


# ------------------------------------------------------------ subcommands

def cmd_generate(args):
    hp = _hyperparams(args)
    A = random_assignment(args.M, args.N, args.per_item, args.seed)
    truth, matrix = gen_graph(hp, args.M, args.N, args.P, A, seed=args.seed,
                              min_separation=args.min_separation,
                              separation_metric=args.separation_metric)
    os.makedirs(args.out, exist_ok=True)
    write_annotations(matrix, os.path.join(args.out, "annotations.csv"))
    obj = truth.to_dict()
    obj["hyperparams"] = {"K": hp.K, "L": hp.L, "alpha": hp.alpha, "gamma": hp.gamma, "tau": hp.tau}
    _write_json(os.path.join(args.out, "truth.json"), obj)
    if args.features > 0:
        X = cluster_features(truth.w, hp.K, args.features, seed=args.seed + 1,
                             spread=args.feature_spread, noise=args.feature_noise)
        write_features(X, os.path.join(args.out, "features.csv"))
    split = DatasetSplit.random(args.M, seed=args.seed)
    write_splits(split, os.path.join(args.out, "splits.json"))
    print(f"wrote {matrix.num_entries} annotations for {args.M} items to {args.out}")


def _fit_matrix(args):
    matrix = _load_matrix(args)
    items = _items(args, matrix.num_items)
    sub = matrix if items.size == matrix.num_items else matrix.subset(items)
    return matrix, sub, items


def cmd_fit_sa(args):
    _, sub, items = _fit_matrix(args)
    cfg = sa.AnnealConfig(max_iters=args.max_iters, schedule=args.schedule, t0=args.t0,
                          rate=args.rate, proposal_concentration=args.proposal_concentration,
                          adapt_proposals=not args.fixed_proposals, window=args.window,
                          tol=args.tol, restarts=args.restarts, seed=args.seed,
                          literal_deltas=args.literal_deltas,
                          quench=not args.no_quench)
    state, ll, trace = sa.anneal(sub, _hyperparams(args), cfg)
    _ensure_parent(args.out)
    pgm.save_model(pgm.state_to_dict(state, item_ids=items, log_likelihood=ll,
                                     labels_per_item=sub.num_entries / sub.num_items,
                                     literal_deltas=args.literal_deltas), args.out)
    if args.trace:
        _write_csv(args.trace, SA_TRACE_HEADER, trace)
    if args.figure:
        plotting.plot_anneal_trace(trace, args.figure)
    print(f"log-likelihood {ll:.6f} after {len(trace)} iterations")


def cmd_fit_em(args):
    _, sub, items = _fit_matrix(args)
    cfg = em.EMConfig(max_rounds=args.max_rounds, tol=args.tol, bp_rounds=args.bp_rounds,
                      bp_tol=args.bp_tol, damping=args.damping,
                      init_concentration=args.init_concentration, restarts=args.restarts,
                      seed=args.seed)
    state, soft, trace = em.fit_em(sub, _hyperparams(args), cfg)
    _ensure_parent(args.out)
    pgm.save_model(pgm.state_to_dict(state, item_ids=items, w_soft=soft.w_soft,
                                     z_soft=soft.z_soft, expected_log_likelihood=trace[-1][1],
                                     labels_per_item=sub.num_entries / sub.num_items),
                   args.out)
    if args.trace:
        _write_csv(args.trace, EM_TRACE_HEADER, trace)
    if args.figure:
        plotting.plot_em_trace(trace, args.figure)
    print(f"expected log-likelihood {trace[-1][1]:.6f} after {len(trace)} rounds")


def cmd_snap(args):
    model = pgm.load_model(args.model)
    snapped = pipeline.snap_labels(model["theta"], model["omega"], model["w"])
    _ensure_parent(args.out)
    write_distributions(args.out, model["items"], snapped)
    print(f"snapped {len(snapped)} items")


def cmd_train(args):
    X = read_features(args.features)
    ids, targets = read_distributions(args.targets)
    if ids.size and ids.max() >= X.shape[0]:
        raise ValidationError("targets refer to items without features")
    cfg = pipeline.SupervisedConfig(max_iter=args.max_iter, tol=args.tol,
                                    step_scale=args.step_scale)
    model = pipeline.train_supervised(X[ids], targets, cfg)
    obj = model.to_dict()
    obj["loss_trace"] = model.loss_trace
    _ensure_parent(args.out)
    _write_json(args.out, obj)
    print(f"final training loss {model.loss_trace[-1]:.6f} after {len(model.loss_trace) - 1} steps")


def cmd_predict(args):
    X = read_features(args.features)
    with open(args.supervised) as fh:
        sup = pipeline.SupervisedModel.from_dict(json.load(fh))
    items = _items(args, X.shape[0])
    if args.raw:
        h_dist, _ = pipeline.predict_raw(sup, X[items])
    else:
        if not args.model:
            raise ValidationError("--model is required unless --raw is given")
        model = pgm.load_model(args.model)
        pseudo = args.pseudo_count
        if pseudo is None:
            pseudo = model.get("labels_per_item")
        if pseudo is None:
            raise ValidationError("model has no labels_per_item; pass --pseudo-count")
        h_dist, _, _ = pipeline.predict(sup, model["theta"], model["psi"], model["omega"],
                                        X[items], args.kernel, pseudo, args.against)
    _ensure_parent(args.out)
    write_distributions(args.out, items, h_dist)
    print(f"wrote predictions for {items.size} items")


def cmd_evaluate(args):
    ids, dists = read_distributions(args.predictions)
    matrix = read_annotations(args.annotations, num_labels=dists.shape[1] or None)
    if dists.shape[1] != matrix.num_labels:
        raise ValidationError(f"predictions have {dists.shape[1]} labels, annotations {matrix.num_labels}")
    items = _items(args, matrix.num_items) if args.splits else ids
    metrics = experiment.evaluate(ids, dists, matrix, items, reverse=args.reverse)
    text = json.dumps(metrics, indent=1, sort_keys=True)
    if args.out:
        _ensure_parent(args.out)
        _write_json(args.out, metrics)
    print(text)


def _ldlnm_config(args):
    return ldlnm.LDLNMConfig(J_I=args.J_I, J_A=args.J_A, J_P=args.J_P, combine=args.combine,
                             epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                             dropout=args.dropout, seed=args.seed)


def cmd_train_ldlnm(args):
    X = read_features(args.features)
    matrix = read_annotations(args.annotations, num_items=X.shape[0])
    cfg = _ldlnm_config(args)
    train_items = _items(args, matrix.num_items)
    Xs, a, targets = ldlnm.build_samples(matrix, X, train_items)
    holdout = None
    if args.splits and args.holdout_part:
        hold_items = getattr(read_splits(args.splits), args.holdout_part)
        if hold_items.size:
            holdout = ldlnm.build_samples(matrix, X, hold_items)
    params = ldlnm.NeuralParams.init(X.shape[1], matrix.num_annotators, matrix.num_labels, cfg)
    params, history = ldlnm.train(params, Xs, a, targets, cfg, holdout)
    _ensure_parent(args.out)
    params.save(args.out, config=ldlnm.config_dict(cfg))
    if args.history:
        hold = history["holdout_loss"]
        rows = [(e + 1, history["train_loss"][e], hold[e + 1] if hold else "")
                for e in range(len(history["train_loss"]))]
        _write_csv(args.history, ["epoch", "train_loss", "holdout_loss"], rows)
    if args.figure:
        plotting.plot_history(history, args.figure)
    print(f"final training loss {history['train_loss'][-1]:.6f}")


def cmd_predict_ldlnm(args):
    params, _ = ldlnm.NeuralParams.load(args.checkpoint)
    X = read_features(args.features)
    items = _items(args, X.shape[0])
    if args.ensemble:
        h_dist = np.array([ldlnm.ensemble_decode(params, X[m], args.ensemble, args.aggregate)
                           [ldlnm.HEADS.index(args.head)] for m in items])
    else:
        matrix = read_annotations(args.annotations, num_items=X.shape[0]) if args.annotations else None
        h_dist = ldlnm.predict_items(params, X, matrix, items, args.head)
    _ensure_parent(args.out)
    write_distributions(args.out, items, h_dist)
    print(f"wrote predictions for {items.size} items")


def cmd_infer_annotator(args):
    params, _ = ldlnm.NeuralParams.load(args.checkpoint)
    X = read_features(args.features)
    m = args.item - 1
    if not 0 <= m < X.shape[0]:
        raise ValidationError(f"item {args.item} out of range")
    if args.annotations:
        matrix = read_annotations(args.annotations, num_items=X.shape[0])
        y_I = matrix.empirical_dists()[m]
    else:
        y_I = np.array([float(v) for v in args.distribution.split(",")])
    cfg = ldlnm.InferenceConfig(step_size=args.step_size, decay=args.decay, steps=args.steps,
                                init_scale=args.init_scale, tol=args.tol, seed=args.seed)
    z_A, kl = ldlnm.infer_annotator(params, X[m], y_I, cfg)
    sims = params["W_A"].T @ z_A / np.maximum(
        np.linalg.norm(params["W_A"], axis=0) * np.linalg.norm(z_A), 1e-300)
    obj = {"item": args.item, "z_A": z_A.tolist(), "kl": kl,
           "nearest_annotator": int(np.argmax(sims)) + 1}
    if args.out:
        _ensure_parent(args.out)
        _write_json(args.out, obj)
    print(json.dumps({k: obj[k] for k in ("item", "kl", "nearest_annotator")}, sort_keys=True))


def _pipeline_config(args):
    overrides = {"seed": args.seed, "method": args.method, "output_dir": args.out}
    if getattr(args, "K", None):
        overrides["K"] = args.K
    if getattr(args, "L", None):
        overrides["L"] = args.L
    if args.config:
        return experiment.load_config(args.config, **overrides)
    return experiment.ExperimentConfig(**{k: (experiment._interval(v) if k in ("K", "L") else v)
                                          for k, v in overrides.items() if v is not None})


def _write_run(cfg, report, art, out):
    os.makedirs(out, exist_ok=True)
    experiment.archive_config(cfg, os.path.join(out, "config.json"))
    _write_json(os.path.join(out, "metrics.json"), report)
    compare = {"unsnapped": report["unsnapped"]["test"]} if "test" in report["unsnapped"] else {}
    base = art["unsnapped"]
    if "test" in base:
        write_distributions(os.path.join(out, "predictions_unsnapped.csv"),
                            base["test"]["items"], base["test"]["h_dist"])
    if "snapped" in art:
        res = art["snapped"]
        if "test" in res:
            write_distributions(os.path.join(out, "predictions_snapped.csv"),
                                res["test"]["items"], res["test"]["h_dist"])
            compare["snapped"] = report["snapped"]["test"]
        write_distributions(os.path.join(out, "snapped_train.csv"),
                            art["data"].split.train, res["snapped"])
        pgm.save_model(pgm.state_to_dict(res["state"], item_ids=art["data"].split.train,
                                         labels_per_item=res["labels_per_item"]),
                       os.path.join(out, "model.json"))
        if cfg.method == "sa":
            _write_csv(os.path.join(out, "trace.csv"), SA_TRACE_HEADER, res["trace"])
            plotting.plot_anneal_trace(res["trace"], os.path.join(out, "trace.png"))
        else:
            _write_csv(os.path.join(out, "trace.csv"), EM_TRACE_HEADER, res["trace"])
            plotting.plot_em_trace(res["trace"], os.path.join(out, "trace.png"))
    if "ldlnm" in art:
        res = art["ldlnm"]
        if "test" in res:
            write_distributions(os.path.join(out, "predictions_ldlnm.csv"),
                                res["test"]["items"], res["test"]["h_dist"])
            compare["ldlnm"] = report["ldlnm"]["test"]
        res["params"].save(os.path.join(out, "ldlnm.json"))
        plotting.plot_history(res["history"], os.path.join(out, "history.png"))
    if "grid" in art:
        rows = [(k, v, s) for (k, v), s in sorted(art["grid"].items())]
        _write_csv(os.path.join(out, "grid.csv"), ["K", "L", "dev_mean_kl"], rows)
        plotting.plot_grid(art["grid"], os.path.join(out, "grid.png"))
    if compare:
        plotting.plot_comparison(compare, os.path.join(out, "comparison.png"))


def cmd_pipeline(args):
    cfg = _pipeline_config(args)
    report, art = experiment.run_pipeline(cfg)
    _write_run(cfg, report, art, cfg.output_dir)
    print(json.dumps({k: report[k] for k in ("unsnapped", "snapped", "ldlnm", "selected")
                      if k in report}, sort_keys=True))


def cmd_grid(args):
    cfg = _pipeline_config(args)
    if cfg.method not in ("sa", "em"):
        raise ValidationError("grid search needs method sa or em")
    data = experiment.load_dataset(cfg)
    best, scores = experiment.grid_search(data, cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    experiment.archive_config(cfg, os.path.join(cfg.output_dir, "config.json"))
    rows = [(k, v, s) for (k, v), s in sorted(scores.items())]
    _write_csv(os.path.join(cfg.output_dir, "grid.csv"), ["K", "L", "dev_mean_kl"], rows)
    _write_json(os.path.join(cfg.output_dir, "selected.json"),
                {"K": best[0], "L": best[1], "dev_mean_kl": scores[best]})
    plotting.plot_grid(scores, os.path.join(cfg.output_dir, "grid.png"))
    print(f"best K={best[0]} L={best[1]} dev mean KL {scores[best]:.6f}")


# ----------------------------------------------------------------- parser

def _add_hp(p):
    p.add_argument("--K", type=int, required=True, help="item clusters")
    p.add_argument("--L", type=int, required=True, help="annotator clusters")
    for name in ("alpha", "gamma", "tau"):
        p.add_argument(f"--{name}", type=float, default=2.0)


def _add_items(p, default_part="all"):
    p.add_argument("--splits", help="splits JSON; restricts to --part")
    p.add_argument("--part", choices=("train", "dev", "test", "all"), default=default_part)


def _add_ldlnm(p):
    p.add_argument("--J-I", dest="J_I", type=int, default=32)
    p.add_argument("--J-A", dest="J_A", type=int, default=32)
    p.add_argument("--J-P", dest="J_P", type=int, default=32)
    p.add_argument("--combine", choices=("concat", "sum"), default="concat")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.5)


def build_parser():
    parser = argparse.ArgumentParser(prog="labeldist",
                                     description="Label distributions from sparse annotator labels.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a planted dataset")
    _add_hp(p)
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--N", type=int, default=50)
    p.add_argument("--P", type=int, default=5)
    p.add_argument("--per-item", type=int, default=10)
    p.add_argument("--min-separation", type=float)
    p.add_argument("--separation-metric", choices=("tv", "bhattacharyya"), default="bhattacharyya")
    p.add_argument("--features", type=int, default=8, help="feature dimension (0: none)")
    p.add_argument("--feature-spread", type=float, default=1.5)
    p.add_argument("--feature-noise", type=float, default=1.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit-sa", help="simulated annealing fit")
    p.add_argument("--annotations", required=True)
    _add_hp(p)
    _add_items(p)
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--schedule", choices=("inverse", "geometric", "zero"), default="inverse")
    p.add_argument("--t0", type=float, default=1.0)
    p.add_argument("--rate", type=float, default=0.95)
    p.add_argument("--proposal-concentration", type=float, default=50.0)
    p.add_argument("--fixed-proposals", action="store_true", help="no concentration adaptation")
    p.add_argument("--window", type=int, default=25)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--literal-deltas", action="store_true",
                   help="psi/Omega deltas without the assignment terms")
    p.add_argument("--no-quench", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_fit_sa)

    p = sub.add_parser("fit-em", help="EM with belief propagation")
    p.add_argument("--annotations", required=True)
    _add_hp(p)
    _add_items(p)
    p.add_argument("--max-rounds", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--bp-rounds", type=int, default=10)
    p.add_argument("--bp-tol", type=float, default=1e-6)
    p.add_argument("--damping", type=float, default=0.5)
    p.add_argument("--init-concentration", type=float, default=1.5)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_fit_em)

    p = sub.add_parser("snap", help="cluster-marginal training targets from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_snap)

    p = sub.add_parser("train", help="fit the linear-softmax learner")
    p.add_argument("--features", required=True)
    p.add_argument("--targets", required=True, help="distribution CSV (e.g. from snap)")
    p.add_argument("--max-iter", type=int, default=3000)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--step-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="h_dist via cluster assignment, or raw")
    p.add_argument("--features", required=True)
    p.add_argument("--supervised", required=True)
    p.add_argument("--model")
    _add_items(p, "test")
    p.add_argument("--raw", action="store_true", help="skip the cluster projection")
    p.add_argument("--kernel", choices=("geometric", "kl", "multinomial"), default="multinomial")
    p.add_argument("--against", choices=("cell", "marginal"), default="marginal")
    p.add_argument("--pseudo-count", type=float,
                   help="default: the model's mean labels per item")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="mean KL and accuracy against f_dist / f_max")
    p.add_argument("--predictions", required=True)
    p.add_argument("--annotations", required=True)
    _add_items(p, "test")
    p.add_argument("--reverse", action="store_true", help="KL(f_dist || h_dist)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-ldlnm", help="train the neural label-distribution model")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", required=True)
    _add_items(p, "train")
    p.add_argument("--holdout-part", choices=("dev", "test"), default="dev")
    _add_ldlnm(p)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_train_ldlnm)

    p = sub.add_parser("predict-ldlnm", help="item-level predictions from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--annotations", help="average over each item's own annotators")
    _add_items(p, "test")
    p.add_argument("--head", choices=ldlnm.HEADS, default="y")
    p.add_argument("--ensemble", choices=("literal", "encoder"))
    p.add_argument("--aggregate", choices=("mean", "mode"), default="mean")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict_ldlnm)

    p = sub.add_parser("infer-annotator", help="fit an annotator embedding to one item")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--item", type=int, required=True, help="1-based item id")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--annotations", help="target is the item's empirical distribution")
    src.add_argument("--distribution", help="comma-separated target distribution")
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--decay", type=float, default=0.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--init-scale", type=float, default=0.0)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer_annotator)

    for name, func, helptext in (("pipeline", cmd_pipeline, "end-to-end run with report"),
                                 ("grid", cmd_grid, "K, L search on dev mean KL")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--method", choices=experiment.METHODS)
        p.add_argument("--K", help="e.g. 3..20 or 4")
        p.add_argument("--L", help="e.g. 3..20 or 2")
        p.add_argument("--out", help="output directory")
        p.set_defaults(func=func)

    for p in sub.choices.values():
        p.add_argument("--seed", type=int, default=None if p.prog.endswith(("pipeline", "grid")) else 0)
    return parser


def _parse_range(value):
    if value is None:
        return None
    if ".." in value:
        return value
    return [int(v) for v in value.split(",")]


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("pipeline", "grid"):
        args.K, args.L = _parse_range(args.K), _parse_range(args.L)
    try:
        args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except experiment.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
