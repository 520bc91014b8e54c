"""Simulated annealing over the graph model's parameters and hard assignments."""

from dataclasses import dataclass

import numpy as np

from .core import ValidationError
from .genmodel import sample_dirichlet, sample_dirichlet_vec
from .pgm import PgmState


@dataclass
class AnnealConfig:
    max_iters: int = 2000
    schedule: str = "inverse"        # inverse: T = t0 / (t + 1); geometric: t0 * rate**t; zero
    t0: float = 1.0
    rate: float = 0.95
    proposal_concentration: float = 50.0
    adapt_proposals: bool = True
    window: int = 25
    tol: float = 1e-6
    restarts: int = 5
    seed: int = 0
    literal_deltas: bool = False
    quench: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.schedule not in ("inverse", "geometric", "zero"):
            raise ValidationError(f"unknown temperature schedule {self.schedule!r}")
        if self.schedule != "zero" and self.t0 <= 0:
            raise ValidationError("temperatures must be strictly positive")
        if not 0 < self.rate <= 1:
            raise ValidationError("geometric rate must lie in (0, 1]")
        if self.proposal_concentration <= 0 or self.restarts < 1:
            raise ValidationError("bad proposal concentration or restart count")

    def temperature(self, t):
        if self.schedule == "inverse":
            return self.t0 / (t + 1.0)
        if self.schedule == "geometric":
            return self.t0 * self.rate ** t
        return 0.0


def _accept(delta, T, u):
    """Metropolis rule: improvements always, otherwise with probability exp(delta / T)."""
    if delta >= 0:
        return True
    if T <= 0 or not np.isfinite(delta):
        return False
    return u < np.exp(delta / T)


def _accept_many(delta, T, u):
    out = delta >= 0
    if T > 0:
        with np.errstate(over="ignore", invalid="ignore"):
            out |= np.isfinite(delta) & (u < np.exp(np.minimum(delta, 0.0) / T))
    return out


def random_state(matrix, hp, rng):
    theta = sample_dirichlet(rng, hp.alpha, matrix.num_labels, (hp.K, hp.L))
    psi = sample_dirichlet(rng, hp.gamma, hp.K)
    omega = sample_dirichlet(rng, hp.tau, hp.L)
    w = rng.choice(hp.K, size=matrix.num_items, p=psi)
    z = rng.choice(hp.L, size=matrix.num_annotators, p=omega)
    return PgmState(matrix, hp, theta, psi, omega, w, z)


class _Proposals:
    """Dirichlet proposals centred on the current value, one concentration per block.

    The concentration starts at ``c0`` and adapts: it grows after a rejection and
    shrinks after an acceptance (never below ``c0``), so steps get local as the
    temperature drops.
    """

    GROW, SHRINK = 1.1, 1.25

    def __init__(self, c0, prior, adapt):
        self.c0, self.c, self.prior, self.adapt = c0, c0, prior, adapt

    def draw(self, rng, current):
        return sample_dirichlet_vec(rng, self.c * current + self.prior)

    def update(self, accepted):
        if self.adapt:
            self.c = max(self.c0, self.c / self.SHRINK) if accepted else min(self.c * self.GROW, 1e12)


class _Chain:
    def __init__(self, matrix, hp, cfg, rng):
        self.matrix, self.hp, self.cfg, self.rng = matrix, hp, cfg, rng
        c0, adapt = cfg.proposal_concentration, cfg.adapt_proposals
        self.theta_prop = [[_Proposals(c0, hp.alpha, adapt) for _ in range(hp.L)]
                           for _ in range(hp.K)]
        self.psi_prop = _Proposals(c0, hp.gamma, adapt)
        self.omega_prop = _Proposals(c0, hp.tau, adapt)
        self.state = random_state(matrix, hp, rng)

    def sweep(self, T):
        """One outer iteration: every Theta[k, l], then psi, Omega, all w, all z."""
        state, rng, cfg = self.state, self.rng, self.cfg
        K, L = self.hp.K, self.hp.L
        for k in range(K):
            for l in range(L):
                prop = self.theta_prop[k][l]
                new = prop.draw(rng, state.theta[k, l])
                ok = _accept(state.delta_theta(k, l, new), T, rng.random())
                if ok:
                    state.set_theta(k, l, new)
                prop.update(ok)
        if K > 1:
            new = self.psi_prop.draw(rng, state.psi)
            ok = _accept(state.delta_psi(new, cfg.literal_deltas), T, rng.random())
            if ok:
                state.set_psi(new)
            self.psi_prop.update(ok)
        if L > 1:
            new = self.omega_prop.draw(rng, state.omega)
            ok = _accept(state.delta_omega(new, cfg.literal_deltas), T, rng.random())
            if ok:
                state.set_omega(new)
            self.omega_prop.update(ok)
        # Each w-move's delta depends only on (Theta, psi, z), never on another
        # item's w, so the sequential sweep over items is done in one shot.
        if K > 1:
            scores = state.all_item_scores()
            idx = np.arange(self.matrix.num_items)
            k_new = (state.w + 1 + rng.integers(K - 1, size=idx.size)) % K
            with np.errstate(invalid="ignore"):
                delta = scores[idx, k_new] - scores[idx, state.w]
            state.w = np.where(_accept_many(delta, T, rng.random(idx.size)), k_new, state.w)
            state.recount()
        if L > 1:
            scores = state.all_annotator_scores()
            idx = np.arange(self.matrix.num_annotators)
            l_new = (state.z + 1 + rng.integers(L - 1, size=idx.size)) % L
            with np.errstate(invalid="ignore"):
                delta = scores[idx, l_new] - scores[idx, state.z]
            state.z = np.where(_accept_many(delta, T, rng.random(idx.size)), l_new, state.z)
            state.recount()
        return state.log_likelihood()

    def run(self):
        cfg = self.cfg
        best_ll = self.state.log_likelihood()
        best = self.state.copy()
        trace = []

        def phase(t_start, temperature):
            nonlocal best_ll, best
            stall, t = 0, t_start
            while t < cfg.max_iters:
                T = temperature(t)
                ll = self.sweep(T)
                stall = 0 if ll > best_ll + cfg.tol else stall + 1
                if ll > best_ll:
                    best_ll, best = ll, self.state.copy()
                trace.append((t, ll, best_ll, T))
                t += 1
                if stall >= cfg.window:
                    break
            return t

        t = phase(0, cfg.temperature)
        if cfg.quench and cfg.schedule != "zero":
            # greedy finish from the best state found
            self.state = best.copy()
            phase(t, lambda _: 0.0)
        return best, trace


def anneal(matrix, hp, cfg=None):
    """Run ``cfg.restarts`` independent annealing chains and keep the best.

    Returns ``(state, log_likelihood, trace)`` where the state is the most
    likely one visited (not necessarily the last) and ``trace`` rows are
    ``(iter, loglik, best_loglik, temperature)`` for the winning chain. With
    ``cfg.quench`` each chain ends with a zero-temperature phase started from
    its best state; both phases share the ``max_iters`` budget.
    """
    cfg = cfg or AnnealConfig()
    if hp.K < 1 or hp.L < 1:
        raise ValidationError("K and L must be >= 1")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    results = []
    for ss in seeds:
        state, trace = _Chain(matrix, hp, cfg, np.random.default_rng(ss)).run()
        results.append((state.log_likelihood(), state, trace))
    # first chain wins ties, keeping the result independent of float noise
    best_ll, best_state, best_trace = max(results, key=lambda r: r[0])
    return best_state, best_ll, best_trace
