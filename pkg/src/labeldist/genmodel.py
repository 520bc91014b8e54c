"""Sampling planted datasets from the item/annotator cluster model."""

from dataclasses import dataclass

import numpy as np

from .core import AnnotationMatrix, ValidationError


@dataclass(frozen=True)
class Hyperparams:
    K: int
    L: int
    alpha: float = 2.0
    gamma: float = 2.0
    tau: float = 2.0

    def __post_init__(self):
        if self.K < 1 or self.L < 1:
            raise ValidationError("K and L must be >= 1")
        if min(self.alpha, self.gamma, self.tau) <= 0:
            raise ValidationError("Dirichlet concentrations must be positive")

    def require_em_range(self):
        # the closed-form M-step can go negative below 1
        if min(self.alpha, self.gamma, self.tau) < 1:
            raise ValidationError("EM needs alpha, gamma, tau >= 1")


@dataclass
class GroundTruthModel:
    theta: np.ndarray  # K x L x P
    psi: np.ndarray    # K
    omega: np.ndarray  # L
    w: np.ndarray      # M, item cluster per item
    z: np.ndarray      # N, annotator cluster per annotator

    def to_dict(self):
        return {"theta": self.theta.tolist(), "psi": self.psi.tolist(),
                "omega": self.omega.tolist(), "w": (self.w + 1).tolist(),
                "z": (self.z + 1).tolist()}


def sample_dirichlet(rng, concentration, size, shape=()):
    """Symmetric Dirichlet draws by normalizing independent Gamma variates."""
    g = rng.gamma(concentration, size=tuple(shape) + (size,))
    total = g.sum(axis=-1, keepdims=True)
    # tiny concentrations can underflow every coordinate; fall back to a vertex
    bad = total[..., 0] == 0
    if np.any(bad):
        g[bad] = np.eye(size)[rng.integers(size, size=int(bad.sum()))]
        total = g.sum(axis=-1, keepdims=True)
    return g / total


def sample_dirichlet_vec(rng, alpha_vec):
    g = rng.gamma(alpha_vec)
    if g.sum() == 0:
        g = np.eye(alpha_vec.size)[int(np.argmax(alpha_vec))]
    return g / g.sum()


def item_cluster_marginals(theta, omega):
    return np.einsum("l,klp->kp", omega, theta)


def separation(theta, omega, metric="tv"):
    """Smallest distance between two item clusters; works on a leading batch axis.

    ``tv``: total variation between the Omega-mixed label marginals.
    ``bhattacharyya``: Omega-weighted mean over annotator clusters of the
    Bhattacharyya distance between Theta[k, l] and Theta[k', l]. This one tracks
    how many labels an item needs before its cluster is identifiable.
    """
    theta = np.asarray(theta)
    K = theta.shape[-3]
    if K < 2:
        return np.full(theta.shape[:-3], np.inf) if theta.ndim > 3 else np.inf
    best = None
    for i in range(K):
        for j in range(i + 1, K):
            a, b = theta[..., i, :, :], theta[..., j, :, :]
            if metric == "tv":
                ma = np.einsum("...l,...lp->...p", omega, a)
                mb = np.einsum("...l,...lp->...p", omega, b)
                d = 0.5 * np.abs(ma - mb).sum(axis=-1)
            elif metric == "bhattacharyya":
                d = (omega * -np.log(np.sqrt(a * b).sum(axis=-1))).sum(axis=-1)
            else:
                raise ValidationError(f"unknown separation metric {metric!r}")
            best = d if best is None else np.minimum(best, d)
    return best


def min_pairwise_tv(theta, omega):
    return float(separation(theta, omega, "tv"))


def random_assignment(M, N, annotators_per_item, seed=0):
    """Each item gets ``annotators_per_item`` distinct annotators, uniformly."""
    if annotators_per_item > N:
        raise ValidationError(f"cannot draw {annotators_per_item} annotators out of {N}")
    if annotators_per_item < 1:
        raise ValidationError("annotators_per_item must be >= 1")
    rng = np.random.default_rng(seed)
    if annotators_per_item == N:
        annot = np.tile(np.arange(N), M)
    else:
        # argsort of uniform keys == a uniformly random subset per row
        keys = rng.random((M, N))
        annot = np.argpartition(keys, annotators_per_item - 1, axis=1)[:, :annotators_per_item]
        annot = np.sort(annot, axis=1).ravel()
    items = np.repeat(np.arange(M), annotators_per_item)
    return items, annot


def gen_graph(hp, M, N, P, assignments, seed=0, min_separation=None,
              separation_metric="tv", max_tries=2_000_000):
    """Draw (Theta, psi, Omega, w, z) from their priors and labels for every pair in A.

    ``assignments`` is a pair of parallel (items, annotators) arrays or an iterable
    of (m, n) tuples, 0-based. ``min_separation`` asks for item-cluster label
    clusters at least that far apart under ``separation_metric`` (see
    ``separation``); Theta is redrawn until it holds.
    """
    if isinstance(assignments, tuple) and len(assignments) == 2 and np.ndim(assignments[0]) == 1:
        items, annot = (np.asarray(a, dtype=np.int64) for a in assignments)
    else:
        pairs = np.asarray(sorted(assignments), dtype=np.int64).reshape(-1, 2)
        items, annot = pairs[:, 0], pairs[:, 1]
    if items.size == 0:
        raise ValidationError("empty assignment set")
    if np.unique(items).size != M:
        raise ValidationError("every item must appear in the assignment set")

    rng = np.random.default_rng(seed)
    theta = sample_dirichlet(rng, hp.alpha, P, (hp.K, hp.L))
    psi = sample_dirichlet(rng, hp.gamma, hp.K)
    omega = sample_dirichlet(rng, hp.tau, hp.L)
    if min_separation is not None and separation(theta, omega, separation_metric) < min_separation:
        batch, tries = 4096, 0
        while True:
            cand = sample_dirichlet(rng, hp.alpha, P, (batch, hp.K, hp.L))
            ok = np.flatnonzero(separation(cand, omega, separation_metric) >= min_separation)
            if ok.size:
                theta = cand[ok[0]]
                break
            tries += batch
            if tries >= max_tries:
                raise ValidationError(f"could not reach separation {min_separation} "
                                      f"in {max_tries} draws")
    w = rng.choice(hp.K, size=M, p=psi)
    z = rng.choice(hp.L, size=N, p=omega)

    # inverse-CDF sampling of one label per assignment
    probs = theta[w[items], z[annot]]
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(items.size)[:, None] * cdf[:, -1:]
    labels = np.minimum((u >= cdf).sum(axis=1), P - 1)

    truth = GroundTruthModel(theta, psi, omega, w, z)
    return truth, AnnotationMatrix(M, N, P, items, annot, labels)


def cluster_features(w, num_clusters, num_features, seed=0, spread=3.0, noise=1.0):
    """Features correlated with item clusters: a random centre per cluster plus noise."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, spread, size=(num_clusters, num_features))
    return centres[w] + rng.normal(0.0, noise, size=(w.size, num_features))
