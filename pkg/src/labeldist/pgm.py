"""Complete-data log-likelihood of the cluster model and its single-move deltas.

The Dirichlet log-normalizers are dropped throughout: they do not depend on
any optimized quantity, so likelihood differences are unaffected.
"""

import json
import logging

import numpy as np
from scipy.special import xlogy

from .core import ValidationError, check_distribution
from .genmodel import Hyperparams

log = logging.getLogger(__name__)


def _xlog_ratio(c, new, old):
    """c * log(new / old) with 0 * log(anything) = 0."""
    return xlogy(c, new) - xlogy(c, old)


def _flag(value, what):
    if value == -np.inf or np.isnan(value):
        log.warning("zero probability inside a log while computing %s", what)
        return -np.inf
    return value


class PgmState:
    """Parameters and hard assignments of the graph model over one annotation matrix.

    Keeps ``counts[k, l, p]`` = number of entries whose item is in cluster k,
    annotator in cluster l and label is p, plus the cluster occupancies, so that
    every delta is local.
    """

    def __init__(self, matrix, hp, theta, psi, omega, w, z):
        self.matrix = matrix
        self.hp = hp
        self.theta = np.array(theta, dtype=float)
        self.psi = np.array(psi, dtype=float)
        self.omega = np.array(omega, dtype=float)
        self.w = np.array(w, dtype=np.int64)
        self.z = np.array(z, dtype=np.int64)
        K, L, P = hp.K, hp.L, matrix.num_labels
        if self.theta.shape != (K, L, P):
            raise ValidationError(f"theta has shape {self.theta.shape}, expected {(K, L, P)}")
        if self.psi.shape != (K,) or self.omega.shape != (L,):
            raise ValidationError("psi / omega length does not match K / L")
        if self.w.shape != (matrix.num_items,) or self.z.shape != (matrix.num_annotators,):
            raise ValidationError("w / z length does not match M / N")
        if self.w.min() < 0 or self.w.max() >= K or self.z.min() < 0 or self.z.max() >= L:
            raise ValidationError("cluster assignment out of range")
        self.recount()

    def recount(self):
        m = self.matrix
        self.counts = np.zeros(self.theta.shape)
        np.add.at(self.counts, (self.w[m.items], self.z[m.annotators], m.labels), 1.0)
        self.item_occupancy = np.bincount(self.w, minlength=self.hp.K).astype(float)
        self.annotator_occupancy = np.bincount(self.z, minlength=self.hp.L).astype(float)

    def copy(self):
        return PgmState(self.matrix, self.hp, self.theta, self.psi, self.omega, self.w, self.z)

    # ------------------------------------------------------------ likelihood

    def log_likelihood(self):
        hp = self.hp
        value = (xlogy(hp.alpha - 1.0, self.theta).sum()
                 + xlogy(hp.gamma - 1.0, self.psi).sum()
                 + xlogy(self.item_occupancy, self.psi).sum()
                 + xlogy(hp.tau - 1.0, self.omega).sum()
                 + xlogy(self.annotator_occupancy, self.omega).sum()
                 + xlogy(self.counts, self.theta).sum())
        return _flag(float(value), "log_likelihood")

    # ---------------------------------------------------------------- deltas

    def delta_theta(self, k, l, theta_new):
        old = self.theta[k, l]
        d = (_xlog_ratio(self.hp.alpha - 1.0, theta_new, old).sum()
             + _xlog_ratio(self.counts[k, l], theta_new, old).sum())
        return _flag(float(d), "delta_theta")

    def delta_psi(self, psi_new, literal=False):
        d = _xlog_ratio(self.hp.gamma - 1.0, psi_new, self.psi).sum()
        if not literal:
            d += _xlog_ratio(self.item_occupancy, psi_new, self.psi).sum()
        return _flag(float(d), "delta_psi")

    def delta_omega(self, omega_new, literal=False):
        d = _xlog_ratio(self.hp.tau - 1.0, omega_new, self.omega).sum()
        if not literal:
            d += _xlog_ratio(self.annotator_occupancy, omega_new, self.omega).sum()
        return _flag(float(d), "delta_omega")

    def _item_scores(self, m):
        """log psi_k + sum over item m's labels of log Theta[k, z_n, y], for every k."""
        e = slice(self.matrix.item_ptr[m], self.matrix.item_ptr[m + 1])
        mat = self.matrix
        with np.errstate(divide="ignore"):
            return (np.log(self.psi)
                    + np.log(self.theta[:, self.z[mat.annotators[e]], mat.labels[e]]).sum(axis=1))

    def _annotator_scores(self, n):
        e = self.matrix.entries_of_annotator(n)
        mat = self.matrix
        with np.errstate(divide="ignore"):
            return (np.log(self.omega)
                    + np.log(self.theta[self.w[mat.items[e]], :, mat.labels[e]]).sum(axis=0))

    def all_item_scores(self):
        """M x K matrix of ``_item_scores`` for every item at once."""
        mat = self.matrix
        with np.errstate(divide="ignore"):
            per_entry = np.log(self.theta[:, self.z[mat.annotators], mat.labels]).T
            return np.log(self.psi) + np.add.reduceat(per_entry, mat.item_ptr[:-1], axis=0)

    def all_annotator_scores(self):
        """N x L matrix; annotators without labels score by the prior only."""
        mat = self.matrix
        scores = np.zeros((mat.num_annotators, self.hp.L))
        with np.errstate(divide="ignore"):
            np.add.at(scores, mat.annotators, np.log(self.theta[self.w[mat.items], :, mat.labels]))
            return scores + np.log(self.omega)

    def delta_w(self, m, k_new):
        if not 0 <= k_new < self.hp.K:
            raise IndexError(f"cluster {k_new} out of range")
        k_old = self.w[m]
        if k_new == k_old:
            return 0.0
        s = self._item_scores(m)
        with np.errstate(invalid="ignore"):
            return _flag(float(s[k_new] - s[k_old]), "delta_w")

    def delta_z(self, n, l_new):
        if not 0 <= l_new < self.hp.L:
            raise IndexError(f"cluster {l_new} out of range")
        l_old = self.z[n]
        if l_new == l_old:
            return 0.0
        s = self._annotator_scores(n)
        with np.errstate(invalid="ignore"):
            return _flag(float(s[l_new] - s[l_old]), "delta_z")

    # ----------------------------------------------------------------- moves

    def set_theta(self, k, l, theta_new):
        self.theta[k, l] = theta_new

    def set_psi(self, psi_new):
        self.psi = np.array(psi_new, dtype=float)

    def set_omega(self, omega_new):
        self.omega = np.array(omega_new, dtype=float)

    def set_w(self, m, k_new):
        k_old = self.w[m]
        if k_new == k_old:
            return
        mat = self.matrix
        e = slice(mat.item_ptr[m], mat.item_ptr[m + 1])
        zl, y = self.z[mat.annotators[e]], mat.labels[e]
        np.subtract.at(self.counts, (k_old, zl, y), 1.0)
        np.add.at(self.counts, (k_new, zl, y), 1.0)
        self.item_occupancy[k_old] -= 1
        self.item_occupancy[k_new] += 1
        self.w[m] = k_new

    def set_z(self, n, l_new):
        l_old = self.z[n]
        if l_new == l_old:
            return
        mat = self.matrix
        e = mat.entries_of_annotator(n)
        wk, y = self.w[mat.items[e]], mat.labels[e]
        np.subtract.at(self.counts, (wk, l_old, y), 1.0)
        np.add.at(self.counts, (wk, l_new, y), 1.0)
        self.annotator_occupancy[l_old] -= 1
        self.annotator_occupancy[l_new] += 1
        self.z[n] = l_new

    # ------------------------------------------------------------ validation

    def check(self):
        for row in self.theta.reshape(-1, self.theta.shape[-1]):
            check_distribution(row)
        check_distribution(self.psi)
        check_distribution(self.omega)
        fresh = self.copy()
        return (np.array_equal(fresh.counts, self.counts)
                and np.array_equal(fresh.item_occupancy, self.item_occupancy)
                and np.array_equal(fresh.annotator_occupancy, self.annotator_occupancy))


# -------------------------------------------------------------- serialization

def model_to_dict(theta, psi, omega, w, z, hp, item_ids=None, annotator_ids=None, **extra):
    """JSON-ready model. Floats are written by ``repr`` (17 significant digits)."""
    if item_ids is None:
        item_ids = np.arange(len(w))
    if annotator_ids is None:
        annotator_ids = np.arange(len(z))
    obj = {
        "hyperparams": {"K": hp.K, "L": hp.L, "alpha": hp.alpha,
                        "gamma": hp.gamma, "tau": hp.tau},
        "theta": np.asarray(theta).tolist(),
        "psi": np.asarray(psi).tolist(),
        "omega": np.asarray(omega).tolist(),
        "w": (np.asarray(w) + 1).tolist(),
        "z": (np.asarray(z) + 1).tolist(),
        "items": (np.asarray(item_ids) + 1).tolist(),
        "annotators": (np.asarray(annotator_ids) + 1).tolist(),
    }
    for key, value in extra.items():
        obj[key] = np.asarray(value).tolist() if isinstance(value, np.ndarray) else value
    return obj


def state_to_dict(state, **kw):
    return model_to_dict(state.theta, state.psi, state.omega, state.w, state.z, state.hp, **kw)


def save_model(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        obj = json.load(fh)
    try:
        hp = Hyperparams(**obj["hyperparams"])
        model = {
            "hp": hp,
            "theta": np.array(obj["theta"], dtype=float),
            "psi": np.array(obj["psi"], dtype=float),
            "omega": np.array(obj["omega"], dtype=float),
            "w": np.array(obj["w"], dtype=np.int64) - 1,
            "z": np.array(obj["z"], dtype=np.int64) - 1,
            "items": np.array(obj["items"], dtype=np.int64) - 1,
            "annotators": np.array(obj["annotators"], dtype=np.int64) - 1,
        }
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed model file ({exc})") from None
    if model["theta"].shape[:2] != (hp.K, hp.L):
        raise ValidationError(f"{path}: theta shape does not match K, L")
    for key in ("w_soft", "z_soft"):
        if key in obj:
            model[key] = np.array(obj[key], dtype=float)
    model["labels_per_item"] = obj.get("labels_per_item")
    return model
