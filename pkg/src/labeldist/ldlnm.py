"""Neural label-distribution model: an item/annotator encoder and three softmax heads.

Encoder, for item features x and annotator index a::

    z_I = W_I x + b_I            z_A = W_A[:, a]
    z_P = phi(W_P phi([z_I, z_A]) + b_P)
    z_E = phi(W_E z_P + b_E + z_P)

with phi the softsign v / (1 + |v|) and [., .] concatenation or summation.
Decoder heads z_y, z_yI, z_yA are softmax(W_h z_E + b_h). Training minimizes
cross-entropy on the annotator's label plus KL to the item and annotator label
distributions. Gradients are written out by hand.
"""

import base64
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax, xlogy

from .core import ValidationError

HEADS = ("y", "yI", "yA")


def softsign(v):
    return v / (1.0 + np.abs(v))


def softsign_grad(v):
    return 1.0 / (1.0 + np.abs(v)) ** 2


def _orthogonal(rng, rows, cols):
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


@dataclass
class LDLNMConfig:
    J_I: int = 32
    J_A: int = 32
    J_P: int = 32
    combine: str = "concat"  # or "sum"
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.combine not in ("concat", "sum"):
            raise ValidationError(f"unknown combine mode {self.combine!r}")
        if self.combine == "sum" and self.J_I != self.J_A:
            raise ValidationError("summation mode needs J_I == J_A")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must lie in [0, 1)")


@dataclass
class NeuralParams:
    J: int
    N: int
    P: int
    J_I: int
    J_A: int
    J_P: int
    combine: str
    arrays: dict = field(repr=False)

    SHAPES = ("W_I", "b_I", "W_A", "W_P", "b_P", "W_E", "b_E",
              "W_y", "b_y", "W_yI", "b_yI", "W_yA", "b_yA")

    @classmethod
    def init(cls, J, N, P, cfg, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        Dc = cfg.J_I + cfg.J_A if cfg.combine == "concat" else cfg.J_I
        arrays = {
            "W_I": _orthogonal(rng, cfg.J_I, J), "b_I": np.zeros(cfg.J_I),
            "W_A": _orthogonal(rng, cfg.J_A, N),
            "W_P": _orthogonal(rng, cfg.J_P, Dc), "b_P": np.zeros(cfg.J_P),
            "W_E": _orthogonal(rng, cfg.J_P, cfg.J_P), "b_E": np.zeros(cfg.J_P),
        }
        for h in HEADS:
            arrays[f"W_{h}"] = _orthogonal(rng, P, cfg.J_P)
            arrays[f"b_{h}"] = np.zeros(P)
        return cls(J, N, P, cfg.J_I, cfg.J_A, cfg.J_P, cfg.combine, arrays)

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self):
        return NeuralParams(self.J, self.N, self.P, self.J_I, self.J_A, self.J_P,
                            self.combine, {k: v.copy() for k, v in self.arrays.items()})

    # checkpoint: JSON header with shapes, weights as base64 little-endian float64
    def to_dict(self):
        meta = {k: getattr(self, k) for k in ("J", "N", "P", "J_I", "J_A", "J_P", "combine")}
        arrays = {}
        for name in self.SHAPES:
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            arrays[name] = {"shape": list(arr.shape),
                            "data": base64.b64encode(arr.tobytes(order="C")).decode("ascii")}
        return {"format": "labeldist-ldlnm/1", "meta": meta, "arrays": arrays}

    @classmethod
    def from_dict(cls, obj):
        if obj.get("format") != "labeldist-ldlnm/1":
            raise ValidationError("not an LDL-NM checkpoint")
        arrays = {}
        for name, spec in obj["arrays"].items():
            raw = base64.b64decode(spec["data"])
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(spec["shape"]).astype(float)
        return cls(arrays=arrays, **obj["meta"])

    def save(self, path, **extra):
        obj = self.to_dict()
        obj.update(extra)
        with open(path, "w") as fh:
            json.dump(obj, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            obj = json.load(fh)
        return cls.from_dict(obj), obj


# ------------------------------------------------------------ forward pass

def _combine(params, z_I, z_A):
    if params.combine == "concat":
        return np.concatenate([z_I, z_A], axis=-1)
    if z_I.shape[-1] != z_A.shape[-1]:
        raise ValidationError("summation mode needs J_I == J_A")
    return z_I + z_A


def _check_inputs(params, X, a):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != params.J:
        raise ValidationError(f"expected feature vectors of length {params.J}")
    a = np.atleast_1d(np.asarray(a, dtype=np.int64))
    if a.min() < 0 or a.max() >= params.N:
        raise ValidationError(f"annotator index out of range 0..{params.N - 1}")
    return X, a


def _forward(params, X, z_A, masks=None):
    """Batched forward pass from an explicit annotator embedding; returns the cache."""
    c = {}
    c["X"] = X
    c["z_I"] = X @ params["W_I"].T + params["b_I"]
    c["z_A"] = z_A
    c["u_C"] = _combine(params, c["z_I"], z_A)
    c["h"] = softsign(c["u_C"])
    c["u_P"] = c["h"] @ params["W_P"].T + params["b_P"]
    c["z_P"] = softsign(c["u_P"])
    c["m_P"] = masks[0] if masks is not None else None
    zp = c["z_P"] * c["m_P"] if masks is not None else c["z_P"]
    c["zp"] = zp
    c["u_E"] = zp @ params["W_E"].T + params["b_E"] + zp
    c["z_E"] = softsign(c["u_E"])
    c["m_E"] = masks[1] if masks is not None else None
    ze = c["z_E"] * c["m_E"] if masks is not None else c["z_E"]
    c["ze"] = ze
    for h in HEADS:
        c[f"logq_{h}"] = log_softmax(ze @ params[f"W_{h}"].T + params[f"b_{h}"], axis=1)
    return c


def encode(params, x_I, a):
    """(z_I, z_A, z_P, z_E) for one item and annotator (0-based index)."""
    X, a = _check_inputs(params, x_I, a)
    c = _forward(params, X, params["W_A"][:, a].T)
    squeeze = np.ndim(x_I) == 1
    out = tuple(c[k] for k in ("z_I", "z_A", "z_P", "z_E"))
    return tuple(o[0] for o in out) if squeeze else out


def decode(params, z_E):
    z_E = np.atleast_2d(z_E)
    if z_E.shape[1] != params.J_P:
        raise ValidationError(f"z_E must have length {params.J_P}")
    out = tuple(softmax(z_E @ params[f"W_{h}"].T + params[f"b_{h}"], axis=1) for h in HEADS)
    return tuple(o[0] for o in out) if out[0].shape[0] == 1 else out


def forward(params, X, a):
    """Decoder outputs (z_y, z_yI, z_yA) for a batch of (item, annotator) pairs."""
    X, a = _check_inputs(params, X, a)
    c = _forward(params, X, params["W_A"][:, a].T)
    return tuple(np.exp(c[f"logq_{h}"]) for h in HEADS)


# ----------------------------------------------------------- loss, backprop

def _loss_terms(c, y, y_I, y_A):
    ce = -(y * c["logq_y"]).sum(axis=1)
    kl_I = (xlogy(y_I, y_I) - y_I * c["logq_yI"]).sum(axis=1)
    kl_A = (xlogy(y_A, y_A) - y_A * c["logq_yA"]).sum(axis=1)
    return ce, kl_I, kl_A


def loss(params, X, a, y, y_I, y_A):
    """Mean over the batch of CE(y, z_y) + KL(y_I || z_yI) + KL(y_A || z_yA)."""
    X, a = _check_inputs(params, X, a)
    c = _forward(params, X, params["W_A"][:, a].T)
    ce, kl_I, kl_A = _loss_terms(c, np.atleast_2d(y), np.atleast_2d(y_I), np.atleast_2d(y_A))
    return float(np.mean(ce + kl_I + kl_A))


def _backward(params, c, head_grads):
    """Gradients of a scalar whose derivative w.r.t. each head's logits is given."""
    g = {}
    d_ze = np.zeros_like(c["ze"])
    for h, d_logit in head_grads.items():
        g[f"W_{h}"] = d_logit.T @ c["ze"]
        g[f"b_{h}"] = d_logit.sum(axis=0)
        d_ze += d_logit @ params[f"W_{h}"]
    d_zE = d_ze * c["m_E"] if c["m_E"] is not None else d_ze
    d_uE = d_zE * softsign_grad(c["u_E"])
    g["W_E"] = d_uE.T @ c["zp"]
    g["b_E"] = d_uE.sum(axis=0)
    d_zp = d_uE @ params["W_E"] + d_uE
    d_zP = d_zp * c["m_P"] if c["m_P"] is not None else d_zp
    d_uP = d_zP * softsign_grad(c["u_P"])
    g["W_P"] = d_uP.T @ c["h"]
    g["b_P"] = d_uP.sum(axis=0)
    d_uC = (d_uP @ params["W_P"]) * softsign_grad(c["u_C"])
    if params.combine == "concat":
        d_zI, d_zA = d_uC[:, :params.J_I], d_uC[:, params.J_I:]
    else:
        d_zI = d_zA = d_uC
    g["W_I"] = d_zI.T @ c["X"]
    g["b_I"] = d_zI.sum(axis=0)
    return g, d_zA


def loss_and_grad(params, X, a, y, y_I, y_A, masks=None):
    X, a = _check_inputs(params, X, a)
    y, y_I, y_A = (np.atleast_2d(t) for t in (y, y_I, y_A))
    c = _forward(params, X, params["W_A"][:, a].T, masks)
    ce, kl_I, kl_A = _loss_terms(c, y, y_I, y_A)
    B = X.shape[0]
    # d(CE or KL)/d logits = q - target, since every target sums to one
    head_grads = {"y": (np.exp(c["logq_y"]) - y) / B,
                  "yI": (np.exp(c["logq_yI"]) - y_I) / B,
                  "yA": (np.exp(c["logq_yA"]) - y_A) / B}
    g, d_zA = _backward(params, c, head_grads)
    g["W_A"] = np.zeros_like(params["W_A"])
    np.add.at(g["W_A"].T, a, d_zA)
    return float(np.mean(ce + kl_I + kl_A)), g


# ----------------------------------------------------------------- targets

@dataclass
class Targets:
    y: np.ndarray    # one-hot label the annotator gave
    y_I: np.ndarray  # item label distribution
    y_A: np.ndarray  # annotator label distribution


def build_samples(matrix, features, items=None):
    """One training sample per (item, annotator) entry of the given items.

    ``y_A`` is each annotator's label distribution over those same items.
    """
    sub = matrix if items is None else matrix.subset(items)
    item_ids = np.arange(matrix.num_items) if items is None else np.asarray(items)
    X = np.asarray(features, dtype=float)[item_ids[sub.items]]
    y = np.eye(matrix.num_labels)[sub.labels]
    y_I = sub.empirical_dists()[sub.items]
    y_A = sub.annotator_dists()[sub.annotators]
    return X, sub.annotators.copy(), Targets(y, y_I, y_A)


# ----------------------------------------------------------------- training

class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            params.arrays[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(params, X, a, targets, cfg=None, holdout=None):
    """Adam on mini-batches with inverted dropout on z_P and z_E.

    ``holdout`` is an optional (X, a, Targets) batch whose dropout-free loss is
    recorded after every epoch (index 0 is before training). Returns
    ``(params, history)``.
    """
    cfg = cfg or LDLNMConfig()
    X, a = _check_inputs(params, X, a)
    if X.shape[0] == 0:
        raise ValidationError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    params = params.copy()
    opt = _Adam(params, cfg.lr)
    keep = 1.0 - cfg.dropout
    history = {"train_loss": [], "holdout_loss": []}

    def record_holdout():
        if holdout is not None:
            hX, ha, ht = holdout
            history["holdout_loss"].append(loss(params, hX, ha, ht.y, ht.y_I, ht.y_A))

    record_holdout()
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            masks = None
            if cfg.dropout > 0:
                masks = ((rng.random((idx.size, params.J_P)) < keep) / keep,
                         (rng.random((idx.size, params.J_P)) < keep) / keep)
            value, grads = loss_and_grad(params, X[idx], a[idx], targets.y[idx],
                                         targets.y_I[idx], targets.y_A[idx], masks)
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}; "
                    f"max |W| = {max(np.abs(v).max() for v in params.arrays.values()):.3g}")
            opt.step(params, grads)
            total += value * idx.size
        history["train_loss"].append(total / n)
        record_holdout()
    return params, history


# ------------------------------------------------------------- test time

def ensemble_decode(params, x_I, variant="literal", aggregate="mean"):
    """Predict from one item's features alone, one column per stored annotator.

    ``literal``: z = phi(W_A + z_I) (z_I added to every column of W_A) and
    z_e = phi(W_E z + z), skipping W_P; needs J_I == J_A == J_P.
    ``encoder``: each column is the full encoder run with that annotator.
    ``aggregate`` is ``mean`` (expectation over columns) or ``mode`` (one-hot of
    the most common per-column argmax, lowest label on ties).
    Returns (z_y, z_yI, z_yA, columns) with ``columns`` a dict of N x P arrays.
    """
    x = np.asarray(x_I, dtype=float).reshape(1, -1)
    if x.shape[1] != params.J:
        raise ValidationError(f"expected a feature vector of length {params.J}")
    if variant == "literal":
        if not params.J_I == params.J_A == params.J_P:
            raise ValidationError("literal ensemble decoding needs J_I == J_A == J_P")
        z_I = x @ params["W_I"].T + params["b_I"]
        z = softsign(params["W_A"].T + z_I)
        z_e = softsign(z @ params["W_E"].T + params["b_E"] + z)
        cols = {h: softmax(z_e @ params[f"W_{h}"].T + params[f"b_{h}"], axis=1) for h in HEADS}
    elif variant == "encoder":
        X = np.repeat(x, params.N, axis=0)
        outs = forward(params, X, np.arange(params.N))
        cols = dict(zip(HEADS, outs))
    else:
        raise ValidationError(f"unknown ensemble variant {variant!r}")
    if aggregate == "mean":
        agg = [cols[h].mean(axis=0) for h in HEADS]
    elif aggregate == "mode":
        agg = []
        for h in HEADS:
            votes = np.bincount(cols[h].argmax(axis=1), minlength=params.P)
            agg.append(np.eye(params.P)[int(np.argmax(votes))])
    else:
        raise ValidationError(f"unknown aggregate {aggregate!r}")
    return agg[0], agg[1], agg[2], cols


def predict_items(params, features, matrix=None, items=None, head="y"):
    """Item-level label distributions: mean of a head over the item's annotators.

    Without a matrix (or for an item nobody labeled) all stored annotators are
    averaged.
    """
    features = np.asarray(features, dtype=float)
    items = np.arange(features.shape[0]) if items is None else np.asarray(items)
    hidx = HEADS.index(head)
    out = np.zeros((items.size, params.P))
    for i, m in enumerate(items):
        if matrix is not None and m < matrix.num_items:
            annots = matrix.annotators[matrix.entries_of_item(m)]
        else:
            annots = np.arange(params.N)
        X = np.repeat(features[m][None, :], annots.size, axis=0)
        out[i] = forward(params, X, annots)[hidx].mean(axis=0)
    return out


# ------------------------------------------------------ annotator inference

@dataclass
class InferenceConfig:
    step_size: float = 0.1      # beta
    decay: float = 0.0          # weight decay on z_A (gamma in the update rule)
    steps: int = 100
    init_scale: float = 0.0     # sigma_a; 0 starts from the zero embedding
    tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.step_size < 0 or self.decay < 0 or self.steps < 1 or self.init_scale < 0:
            raise ValidationError("invalid inference configuration")


def item_kl_and_grad(params, x_I, y_I, z_A):
    """KL(y_I || z_yI) for an explicit annotator embedding, and d KL / d z_A."""
    X = np.asarray(x_I, dtype=float).reshape(1, -1)
    y_I = np.asarray(y_I, dtype=float).reshape(1, -1)
    c = _forward(params, X, np.asarray(z_A, dtype=float).reshape(1, -1))
    kl = float((xlogy(y_I, y_I) - y_I * c["logq_yI"]).sum())
    _, d_zA = _backward(params, c, {"yI": np.exp(c["logq_yI"]) - y_I})
    return kl, d_zA[0]


def infer_annotator(params, x_I, y_I, cfg=None):
    """Search for an annotator embedding that explains an item's label distribution.

    Gradient steps ``z_A <- z_A - beta * dKL/dz_A - gamma * z_A`` until the KL
    stops improving by ``tol`` or ``steps`` updates are done.
    Returns ``(z_A, final KL)``.
    """
    cfg = cfg or InferenceConfig()
    rng = np.random.default_rng(cfg.seed)
    if cfg.init_scale > 0:
        z_A = rng.normal(0.0, cfg.init_scale, size=params.J_A)
    else:
        z_A = np.zeros(params.J_A)
    kl, grad = item_kl_and_grad(params, x_I, y_I, z_A)
    for _ in range(cfg.steps):
        z_A = z_A - cfg.step_size * grad - cfg.decay * z_A
        new_kl, grad = item_kl_and_grad(params, x_I, y_I, z_A)
        improvement = kl - new_kl
        kl = new_kl
        if improvement < cfg.tol:
            break
    return z_A, kl


def config_dict(cfg):
    return asdict(cfg)
