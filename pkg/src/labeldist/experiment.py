"""Experiment wiring: data loading or generation, model fitting, evaluation, grid search."""

import json
import logging
import os
from contextlib import contextmanager
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from . import em, ldlnm, pipeline, sa
from .core import (DatasetSplit, ValidationError, argmax_label, kl_divergence,
                   read_annotations, read_features, read_splits)
from .genmodel import Hyperparams, cluster_features, gen_graph, random_assignment

log = logging.getLogger(__name__)

METHODS = ("sa", "em", "ldlnm", "none")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@contextmanager
def stage(name):
    """Tag failures with the stage they came from; bad input stays a ValidationError."""
    try:
        yield
    except StageError:
        raise
    except ValidationError as exc:
        raise ValidationError(f"stage '{name}': {exc}") from exc
    except Exception as exc:
        raise StageError(name, exc) from exc


# ------------------------------------------------------------------ config

@dataclass
class SyntheticConfig:
    M: int = 400
    N: int = 50
    P: int = 5
    K: int = 3
    L: int = 2
    per_item: int = 10
    alpha: float = 2.0
    gamma: float = 2.0
    tau: float = 2.0
    min_separation: float = 0.25
    separation_metric: str = "bhattacharyya"
    num_features: int = 8
    feature_spread: float = 1.5
    feature_noise: float = 1.0
    fractions: tuple = (0.5, 0.25, 0.25)


@dataclass
class ExperimentConfig:
    annotations: str = None
    features: str = None
    splits: str = None
    output_dir: str = "out"
    method: str = "sa"
    K: list = field(default_factory=lambda: list(range(3, 21)))
    L: list = field(default_factory=lambda: list(range(3, 21)))
    alpha: float = 2.0
    gamma: float = 2.0
    tau: float = 2.0
    seed: int = 0
    kernel: str = "multinomial"
    pseudo_count: float = None   # default: mean labels per training item
    against: str = "marginal"
    reverse_kl: bool = False
    workers: int = 1
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    sa: dict = field(default_factory=dict)
    em: dict = field(default_factory=dict)
    supervised: dict = field(default_factory=dict)
    ldlnm: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}")
        self.K = [int(k) for k in np.atleast_1d(self.K)]
        self.L = [int(v) for v in np.atleast_1d(self.L)]
        if not self.K or not self.L or min(self.K + self.L) < 1:
            raise ValidationError("grid ranges for K and L must be non-empty and >= 1")
        if isinstance(self.synthetic, dict):
            self.synthetic = _build(SyntheticConfig, self.synthetic, "synthetic")
        for key in ("annotations", "features", "splits"):
            path = getattr(self, key)
            if path is not None and not os.path.exists(path):
                raise ValidationError(f"{key} file not found: {path}")
        # fail early on unknown method settings
        _build(sa.AnnealConfig, self.sa, "sa")
        _build(em.EMConfig, self.em, "em")
        _build(pipeline.SupervisedConfig, self.supervised, "supervised")
        _build(ldlnm.LDLNMConfig, self.ldlnm, "ldlnm")

    def to_dict(self):
        return asdict(self)


def _build(cls, values, section):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValidationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**values)


def _interval(value):
    """Accept an int, a list, or a "lo..hi" / {lo, hi} range."""
    if isinstance(value, str) and ".." in value:
        lo, hi = value.split("..")
        return list(range(int(lo), int(hi) + 1))
    if isinstance(value, dict):
        return list(range(int(value["lo"]), int(value["hi"]) + 1))
    return value


def load_config(path, **overrides):
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: expected a mapping at top level")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("K", "L"):
        if key in raw:
            raw[key] = _interval(raw[key])
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def archive_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


# -------------------------------------------------------------------- data

@dataclass
class Dataset:
    matrix: object
    split: DatasetSplit
    truth: object = None

    @property
    def features(self):
        return self.split.features


def synthesize(syn, seed):
    """Planted dataset with cluster-correlated features and a random split."""
    hp = Hyperparams(syn.K, syn.L, syn.alpha, syn.gamma, syn.tau)
    A = random_assignment(syn.M, syn.N, syn.per_item, seed)
    truth, matrix = gen_graph(hp, syn.M, syn.N, syn.P, A, seed=seed,
                              min_separation=syn.min_separation,
                              separation_metric=syn.separation_metric)
    X = cluster_features(truth.w, syn.K, syn.num_features, seed=seed + 1,
                         spread=syn.feature_spread, noise=syn.feature_noise)
    split = DatasetSplit.random(syn.M, tuple(syn.fractions), seed=seed, features=X)
    return Dataset(matrix, split, truth)


def load_dataset(cfg):
    if cfg.annotations is None:
        return synthesize(cfg.synthetic, cfg.seed)
    features = read_features(cfg.features) if cfg.features else None
    num_items = features.shape[0] if features is not None else None
    matrix = read_annotations(cfg.annotations, num_items=num_items)
    if cfg.splits:
        split = read_splits(cfg.splits, features)
    else:
        split = DatasetSplit.random(matrix.num_items, seed=cfg.seed, features=features)
    return Dataset(matrix, split)


# -------------------------------------------------------------- evaluation

def evaluate(item_ids, h_dist, matrix, items, reverse=False):
    """Mean KL and accuracy of predictions over ``items`` against their f_dist / f_max.

    The KL is KL(h_dist || f_dist) with f_dist mixed with the uniform at 1e-9;
    ``reverse`` gives KL(f_dist || h_dist) instead.
    """
    item_ids = np.asarray(item_ids, dtype=np.int64)
    h_dist = np.atleast_2d(np.asarray(h_dist, dtype=float))
    lookup = {int(m): i for i, m in enumerate(item_ids)}
    missing = [int(m) + 1 for m in items if int(m) not in lookup]
    if missing:
        raise ValidationError(f"missing predictions for items {missing}")
    rows = h_dist[[lookup[int(m)] for m in items]]
    gold = matrix.empirical_dists()[np.asarray(items, dtype=np.int64)]
    kl = kl_divergence(gold, rows) if reverse else kl_divergence(rows, gold)
    h_max = np.array([argmax_label(r) for r in rows])
    f_max = np.array([argmax_label(g) for g in gold])
    return {"mean_kl": float(np.mean(kl)), "accuracy": float(np.mean(h_max == f_max)),
            "num_items": int(len(items))}


# ----------------------------------------------------------------- stages

def fit_graph(matrix, hp, method, cfg, seed):
    if method == "sa":
        acfg = _build(sa.AnnealConfig, {**cfg.sa, "seed": seed}, "sa")
        state, ll, trace = sa.anneal(matrix, hp, acfg)
        return state, trace
    if method == "em":
        ecfg = _build(em.EMConfig, {**cfg.em, "seed": seed}, "em")
        state, _, trace = em.fit_em(matrix, hp, ecfg)
        return state, trace
    raise ValidationError(f"method {method!r} does not fit a graph model")


def _require_features(data):
    if data.features is None:
        raise ValidationError("this stage needs item feature vectors")
    return data.features


def run_graph(data, cfg, K, L):
    """Fit on training annotations, snap, train, predict dev and test."""
    split = data.split
    X = _require_features(data)
    hp = Hyperparams(K, L, cfg.alpha, cfg.gamma, cfg.tau)
    train_matrix = data.matrix.subset(split.train)
    with stage("fit"):
        state, trace = fit_graph(train_matrix, hp, cfg.method, cfg, cfg.seed)
    snapped = pipeline.snap_labels(state.theta, state.omega, state.w)
    scfg = _build(pipeline.SupervisedConfig, cfg.supervised, "supervised")
    with stage("train"):
        model = pipeline.train_supervised(X[split.train], snapped, scfg)
    labels_per_item = train_matrix.num_entries / train_matrix.num_items
    pseudo_count = labels_per_item if cfg.pseudo_count is None else cfg.pseudo_count
    out = {"K": K, "L": L, "state": state, "trace": trace, "snapped": snapped,
           "supervised": model, "labels_per_item": labels_per_item}
    for part in ("dev", "test"):
        ids = getattr(split, part)
        if ids.size == 0:
            continue
        h_dist, _, k = pipeline.predict(model, state.theta, state.psi, state.omega, X[ids],
                                        cfg.kernel, pseudo_count, cfg.against)
        out[part] = {"items": ids, "h_dist": h_dist, "clusters": k,
                     "metrics": evaluate(ids, h_dist, data.matrix, ids, cfg.reverse_kl)}
    return out


def run_unsnapped(data, cfg):
    """Plain supervised baseline trained on the raw empirical distributions."""
    split = data.split
    X = _require_features(data)
    targets = data.matrix.empirical_dists()[split.train]
    scfg = _build(pipeline.SupervisedConfig, cfg.supervised, "supervised")
    model = pipeline.train_supervised(X[split.train], targets, scfg)
    out = {"supervised": model}
    for part in ("dev", "test"):
        ids = getattr(split, part)
        if ids.size == 0:
            continue
        h_dist, _ = pipeline.predict_raw(model, X[ids])
        out[part] = {"items": ids, "h_dist": h_dist,
                     "metrics": evaluate(ids, h_dist, data.matrix, ids, cfg.reverse_kl)}
    return out


def run_ldlnm(data, cfg, head="y"):
    split = data.split
    X = _require_features(data)
    ncfg = _build(ldlnm.LDLNMConfig, {**cfg.ldlnm, "seed": cfg.seed}, "ldlnm")
    Xs, a, targets = ldlnm.build_samples(data.matrix, X, split.train)
    params = ldlnm.NeuralParams.init(X.shape[1], data.matrix.num_annotators,
                                     data.matrix.num_labels, ncfg)
    holdout = None
    if split.dev.size:
        hX, ha, ht = ldlnm.build_samples(data.matrix, X, split.dev)
        holdout = (hX, ha, ht)
    with stage("train-ldlnm"):
        params, history = ldlnm.train(params, Xs, a, targets, ncfg, holdout)
    out = {"params": params, "history": history}
    for part in ("dev", "test"):
        ids = getattr(split, part)
        if ids.size == 0:
            continue
        h_dist = ldlnm.predict_items(params, X, data.matrix, ids, head)
        out[part] = {"items": ids, "h_dist": h_dist,
                     "metrics": evaluate(ids, h_dist, data.matrix, ids, cfg.reverse_kl)}
    return out


# -------------------------------------------------------------- grid search

def select_cell(scores):
    """(K, L) with the lowest dev mean KL; ties go to smaller K, then smaller L."""
    return min(scores, key=lambda kl: (scores[kl], kl[0], kl[1]))


def _grid_cell(args):
    data, cfg, K, L = args
    res = run_graph(data, cfg, K, L)
    part = "dev" if "dev" in res else "test"
    return (K, L), res[part]["metrics"]["mean_kl"]


def grid_search(data, cfg):
    """Dev mean KL of every (K, L) cell; returns (best cell, {cell: score})."""
    cells = [(data, cfg, K, L) for K in cfg.K for L in cfg.L]
    if cfg.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_grid_cell, cells))
    else:
        results = [_grid_cell(c) for c in cells]
    # results come back in (K, L) order regardless of worker scheduling
    scores = dict(results)
    return select_cell(scores), scores


def run_pipeline(cfg, data=None):
    """Full run; returns (report dict, artifacts dict for writing)."""
    with stage("load"):
        data = data or load_dataset(cfg)
    report = {"method": cfg.method, "seed": cfg.seed,
              "num_items": data.matrix.num_items, "num_annotators": data.matrix.num_annotators,
              "num_labels": data.matrix.num_labels}
    artifacts = {"data": data}

    base = run_unsnapped(data, cfg)
    report["unsnapped"] = {p: base[p]["metrics"] for p in ("dev", "test") if p in base}
    artifacts["unsnapped"] = base

    if cfg.method in ("sa", "em"):
        if len(cfg.K) * len(cfg.L) > 1:
            (K, L), scores = grid_search(data, cfg)
            report["grid"] = [{"K": k, "L": l, "dev_mean_kl": s} for (k, l), s in sorted(scores.items())]
            artifacts["grid"] = scores
        else:
            K, L = cfg.K[0], cfg.L[0]
        res = run_graph(data, cfg, K, L)
        report["selected"] = {"K": K, "L": L}
        report["snapped"] = {p: res[p]["metrics"] for p in ("dev", "test") if p in res}
        artifacts["snapped"] = res
    elif cfg.method == "ldlnm":
        res = run_ldlnm(data, cfg)
        report["ldlnm"] = {p: res[p]["metrics"] for p in ("dev", "test") if p in res}
        artifacts["ldlnm"] = res
    return report, artifacts
