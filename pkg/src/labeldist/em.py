"""EM for the graph model: closed-form M-step, loopy belief propagation E-step.

The hidden item clusters w and annotator clusters z form a bipartite graph
with one pairwise factor Theta[:, :, y] per observed label. The E-step keeps,
for every edge (m, n), the cavity distributions of w_m and z_n with that
edge's own evidence left out.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax, xlogy

from .core import ValidationError
from .genmodel import sample_dirichlet
from .pgm import PgmState

log = logging.getLogger(__name__)

TINY = 1e-300


@dataclass
class SoftAssignments:
    w_soft: np.ndarray  # M x K
    z_soft: np.ndarray  # N x L

    def hard(self):
        return self.w_soft.argmax(axis=1), self.z_soft.argmax(axis=1)


@dataclass
class EMParams:
    theta: np.ndarray
    psi: np.ndarray
    omega: np.ndarray


class MessageStore:
    """Per-edge cavity marginals, in the entry order of the annotation matrix."""

    def __init__(self, matrix, K, L):
        E = matrix.num_entries
        self.cav_w = np.full((E, K), 1.0 / K)
        self.cav_z = np.full((E, L), 1.0 / L)
        self.w = np.full((matrix.num_items, K), 1.0 / K)
        self.z = np.full((matrix.num_annotators, L), 1.0 / L)
        self.rounds = 0
        self.residual = np.inf


# ------------------------------------------------------------------ M-step

def cell_mass(matrix, soft):
    """S[k, l, p] = sum over entries with label p of w[m, k] * z[n, l]."""
    We = soft.w_soft[matrix.items]
    Ze = soft.z_soft[matrix.annotators]
    K, L, P = We.shape[1], Ze.shape[1], matrix.num_labels
    S = np.zeros((K, L, P))
    for p in range(P):
        sel = matrix.labels == p
        S[:, :, p] = We[sel].T @ Ze[sel]
    return S


def m_step(matrix, hp, soft):
    hp.require_em_range()
    K, L, P = hp.K, hp.L, matrix.num_labels
    S = cell_mass(matrix, soft)
    num = hp.alpha - 1.0 + S
    den = num.sum(axis=2, keepdims=True)
    empty = den[..., 0] <= 0
    if np.any(empty):
        log.warning("%d (k, l) cells carry no responsibility mass; reset to uniform",
                    int(empty.sum()))
        num[empty] = 1.0
        den[empty] = P
    theta = num / den
    psi = (hp.gamma - 1.0 + soft.w_soft.sum(axis=0)) / (K * hp.gamma - K + matrix.num_items)
    omega = (hp.tau - 1.0 + soft.z_soft.sum(axis=0)) / (L * hp.tau - L + matrix.num_annotators)
    # exact renormalization only removes rounding; the closed forms already sum to 1
    return EMParams(theta, psi / psi.sum(), omega / omega.sum())


def expected_log_likelihood(matrix, hp, params, soft):
    """Expected complete-data log-likelihood under factorized soft assignments."""
    S = cell_mass(matrix, soft)
    value = (xlogy(hp.alpha - 1.0, params.theta).sum()
             + xlogy(hp.gamma - 1.0, params.psi).sum()
             + xlogy(soft.w_soft.sum(axis=0), params.psi).sum()
             + xlogy(hp.tau - 1.0, params.omega).sum()
             + xlogy(soft.z_soft.sum(axis=0), params.omega).sum()
             + xlogy(S, params.theta).sum())
    if not np.isfinite(value):
        log.warning("zero probability inside a log in the expected log-likelihood")
        return -np.inf
    return float(value)


# ------------------------------------------------------------------ E-step

def _row_kl(p, q):
    # rounding can push a near-zero KL below zero, which would satisfy tol=0
    return max(float(np.sum(xlogy(p, p) - xlogy(p, np.maximum(q, TINY)))), 0.0)


def bp_e_step(matrix, params, store, max_rounds=10, tol=1e-6, damping=0.5):
    """Loopy BP marginals of w and z given the parameters.

    One round updates every item from the annotator cavities, then every
    annotator from the fresh item cavities (synchronous within each half).
    Cavity updates are damped: ``new = (1 - damping) * computed + damping * old``.
    Stops once sum_m KL(w_new || w_old) + sum_n KL(z_new || z_old) < tol.
    """
    items, annots = matrix.items, matrix.annotators
    log_theta = np.log(np.maximum(params.theta, TINY))[:, :, matrix.labels]  # K x L x E
    log_theta = np.moveaxis(log_theta, 2, 0)                                   # E x K x L
    log_psi = np.log(np.maximum(params.psi, TINY))
    log_omega = np.log(np.maximum(params.omega, TINY))
    starts = matrix.item_ptr[:-1]
    N, L = matrix.num_annotators, params.omega.size

    store.rounds, store.residual = 0, np.inf
    for r in range(max_rounds):
        # items <- annotators
        to_item = logsumexp(log_theta + np.log(np.maximum(store.cav_z, TINY))[:, None, :], axis=2)
        belief_w = log_psi + np.add.reduceat(to_item, starts, axis=0)
        new_cav_w = softmax(belief_w[items] - to_item, axis=1)
        store.cav_w = (1.0 - damping) * new_cav_w + damping * store.cav_w
        w_new = softmax(belief_w, axis=1)

        # annotators <- items
        to_annot = logsumexp(log_theta + np.log(np.maximum(store.cav_w, TINY))[:, :, None], axis=1)
        belief_z = np.zeros((N, L))
        np.add.at(belief_z, annots, to_annot)
        belief_z += log_omega
        new_cav_z = softmax(belief_z[annots] - to_annot, axis=1)
        store.cav_z = (1.0 - damping) * new_cav_z + damping * store.cav_z
        z_new = softmax(belief_z, axis=1)

        residual = _row_kl(w_new, store.w) + _row_kl(z_new, store.z)
        store.w, store.z = w_new, z_new
        store.rounds, store.residual = r + 1, residual
        if residual < tol:
            break
    return SoftAssignments(store.w.copy(), store.z.copy())


# -------------------------------------------------------------------- fit

@dataclass
class EMConfig:
    max_rounds: int = 500
    tol: float = 1e-6
    bp_rounds: int = 10
    bp_tol: float = 1e-6
    damping: float = 0.5
    init_concentration: float = 1.5
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_rounds < 1 or self.bp_rounds < 1 or self.restarts < 1:
            raise ValidationError("round and restart counts must be >= 1")
        if not 0 <= self.damping < 1:
            raise ValidationError("damping must lie in [0, 1)")


def _em_chain(matrix, hp, cfg, rng):
    soft = SoftAssignments(
        sample_dirichlet(rng, cfg.init_concentration, hp.K, (matrix.num_items,)),
        sample_dirichlet(rng, cfg.init_concentration, hp.L, (matrix.num_annotators,)))
    store = MessageStore(matrix, hp.K, hp.L)
    trace = []
    prev = -np.inf
    for r in range(cfg.max_rounds):
        params = m_step(matrix, hp, soft)
        soft = bp_e_step(matrix, params, store, cfg.bp_rounds, cfg.bp_tol, cfg.damping)
        ell = expected_log_likelihood(matrix, hp, params, soft)
        trace.append((r, ell, store.rounds, store.residual))
        if ell - prev < cfg.tol:
            break
        prev = ell
    return params, soft, trace


def fit_em(matrix, hp, cfg=None):
    """Alternate M-step and BP E-step until the expected log-likelihood stalls.

    Returns ``(state, soft, trace)``: a PgmState holding the final parameters
    with each item / annotator put in its most likely cluster, the soft
    assignments, and trace rows ``(round, expected_loglik, bp_rounds, bp_residual)``.
    """
    cfg = cfg or EMConfig()
    hp.require_em_range()
    best = None
    for ss in np.random.SeedSequence(cfg.seed).spawn(cfg.restarts):
        params, soft, trace = _em_chain(matrix, hp, cfg, np.random.default_rng(ss))
        score = trace[-1][1]
        if best is None or score > best[0]:
            best = (score, params, soft, trace)
    _, params, soft, trace = best
    w, z = soft.hard()
    state = PgmState(matrix, hp, params.theta, params.psi, params.omega, w, z)
    return state, soft, trace
