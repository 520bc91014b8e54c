"""Snap-train-snap: graph-model label regularization around a supervised learner.

Training targets are replaced by the label marginal of each item's cluster,
a distribution-valued learner is fit on them, and its raw outputs are mapped
back onto the most compatible item cluster at prediction time.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, log_softmax, softmax, xlogy

from .core import ValidationError, argmax_label, smooth


def snap_labels(theta, omega, w):
    """Y'[m] = sum_l Omega_l * Theta[w_m, l]."""
    marg = np.einsum("l,klp->kp", omega, theta)
    return marg[np.asarray(w)]


def compatibility(raw, theta, kernel="geometric", pseudo_count=10.0, omega=None,
                  against="cell"):
    """log P(raw ~ Cat(Theta[k, l])) for every (k, l); ``raw`` may be B x P.

    geometric   : sum_p raw_p log Theta[k,l,p]  (geometric-mean multinomial likelihood)
    kl          : -KL(raw || Theta[k,l])        (same posterior: differs by H(raw))
    multinomial : pseudo_count * geometric      (raw treated as that many draws)

    ``against="marginal"`` scores raw against the item-cluster marginal
    sum_l Omega_l Theta[k, l] (identical for every l, needs ``omega``) instead of
    the individual cells. A learner fit on snapped targets estimates those
    marginals, not single cells.
    """
    raw = np.atleast_2d(raw)
    if against == "marginal":
        if omega is None:
            raise ValidationError("comparing against marginals needs omega")
        marg = np.einsum("l,klp->kp", omega, theta)
        theta = np.repeat(marg[:, None, :], theta.shape[1], axis=1)
    elif against != "cell":
        raise ValidationError(f"unknown comparison target {against!r}")
    log_theta = np.log(smooth(theta))
    cross = np.einsum("bp,klp->bkl", raw, log_theta)
    if kernel == "geometric":
        return cross
    if kernel == "kl":
        neg_h = xlogy(raw, raw).sum(axis=1)
        return cross - neg_h[:, None, None]
    if kernel == "multinomial":
        return pseudo_count * cross
    raise ValidationError(f"unknown compatibility kernel {kernel!r}")


def assign_clusters(raw, theta, psi, omega, kernel="geometric", pseudo_count=10.0,
                    against="cell"):
    """Most likely item cluster for each raw prediction, with the posterior over K.

    P(w = k) is proportional to psi_k * sum_l Omega_l * compat(raw, Theta[k, l]).
    """
    with np.errstate(divide="ignore"):
        logc = compatibility(raw, theta, kernel, pseudo_count, omega, against)
        score = np.log(psi)[None, :] + logsumexp(logc + np.log(omega)[None, None, :], axis=2)
    if np.any(~np.isfinite(score).any(axis=1)):
        raise ValidationError("zero total cluster mass after smoothing")
    post = softmax(score, axis=1)
    return post.argmax(axis=1), post


def assign_cluster(raw, theta, psi, omega, kernel="geometric", pseudo_count=10.0,
                   against="cell"):
    k, post = assign_clusters(raw, theta, psi, omega, kernel, pseudo_count, against)
    return int(k[0]), post[0]


# ------------------------------------------------------- supervised learner

@dataclass
class SupervisedConfig:
    max_iter: int = 3000
    tol: float = 1e-10
    step_scale: float = 1.0  # multiple of 1 / (Lipschitz constant)


@dataclass
class SupervisedModel:
    """Linear-softmax learner on standardized features; weights are P x (J + 1)."""

    weights: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    loss_trace: list = field(default_factory=list, repr=False)

    def design(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.mean.size:
            raise ValidationError(f"expected {self.mean.size} features per row")
        if not np.all(np.isfinite(X)):
            raise ValidationError("non-finite feature values")
        Z = (X - self.mean) / self.scale
        return np.hstack([Z, np.ones((Z.shape[0], 1))])

    def predict_proba(self, X):
        return softmax(self.design(X) @ self.weights.T, axis=1)

    def to_dict(self):
        return {"weights": self.weights.tolist(), "mean": self.mean.tolist(),
                "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, obj):
        return cls(np.array(obj["weights"], dtype=float), np.array(obj["mean"], dtype=float),
                   np.array(obj["scale"], dtype=float))


def kl_loss_and_grad(weights, design, targets):
    """Mean KL(target || softmax(design @ W.T)) and its gradient in W."""
    logits = design @ weights.T
    logq = log_softmax(logits, axis=1)
    n = design.shape[0]
    loss = float((xlogy(targets, targets) - targets * logq).sum() / n)
    grad = (np.exp(logq) - targets).T @ design / n
    return loss, grad


def train_supervised(features, targets, cfg=None):
    """Full-batch gradient descent on mean KL(target || prediction).

    The step is ``step_scale`` over the Lipschitz constant of the gradient
    (softmax curvature is at most 1/2), so with the default the loss trace never
    increases.
    """
    cfg = cfg or SupervisedConfig()
    X = np.asarray(features, dtype=float)
    T = np.asarray(targets, dtype=float)
    if X.ndim != 2 or T.ndim != 2 or X.shape[0] != T.shape[0]:
        raise ValidationError("feature rows must align with target rows")
    if not np.all(np.isfinite(X)):
        raise ValidationError("non-finite feature values")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    model = SupervisedModel(np.zeros((T.shape[1], X.shape[1] + 1)), mean, scale)
    D = model.design(X)
    lipschitz = 0.5 * np.linalg.eigvalsh(D.T @ D / D.shape[0]).max()
    step = cfg.step_scale / lipschitz
    loss, grad = kl_loss_and_grad(model.weights, D, T)
    trace = [loss]
    for _ in range(cfg.max_iter):
        model.weights -= step * grad
        loss, grad = kl_loss_and_grad(model.weights, D, T)
        trace.append(loss)
        if trace[-2] - loss < cfg.tol:
            break
    model.loss_trace = trace
    return model


# --------------------------------------------------------------- prediction

def predict(supervised, theta, psi, omega, features, kernel="geometric", pseudo_count=10.0,
            against="cell"):
    """h_dist, h_max (0-based) and the assigned cluster for each feature row."""
    raw = supervised.predict_proba(features)
    k, _ = assign_clusters(raw, theta, psi, omega, kernel, pseudo_count, against)
    h_dist = snap_labels(theta, omega, k)
    h_max = np.array([argmax_label(row) for row in h_dist], dtype=np.int64)
    return h_dist, h_max, k


def predict_raw(supervised, features):
    h_dist = supervised.predict_proba(features)
    return h_dist, h_dist.argmax(axis=1)
