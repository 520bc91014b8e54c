import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labeldist.core import AnnotationMatrix
from labeldist.genmodel import Hyperparams, gen_graph, random_assignment, sample_dirichlet
from labeldist.pgm import PgmState, load_model, save_model, state_to_dict

from oracles import loglik_by_terms


def random_state(seed, M=None, N=None, K=None, L=None, P=None, hp_values=None):
    rng = np.random.default_rng(seed)
    M = M or int(rng.integers(1, 21))
    N = N or int(rng.integers(1, 11))
    K = K or int(rng.integers(1, 4))
    L = L or int(rng.integers(1, 4))
    P = P or int(rng.integers(2, 5))
    alpha, gamma, tau = hp_values or rng.uniform(0.5, 3.0, size=3)
    hp = Hyperparams(K, L, alpha, gamma, tau)
    per_item = int(rng.integers(1, N + 1))
    _, matrix = gen_graph(hp, M, N, P, random_assignment(M, N, per_item, seed=seed), seed=seed)
    theta = sample_dirichlet(rng, 1.0, P, (K, L))
    psi = sample_dirichlet(rng, 1.0, K)
    omega = sample_dirichlet(rng, 1.0, L)
    return PgmState(matrix, hp, theta, psi, omega, rng.integers(K, size=M), rng.integers(L, size=N))


def test_uniform_collapsed_value():
    st_ = random_state(0, K=1, L=1, P=3, hp_values=(1.0, 1.0, 1.0))
    st_.theta[:] = 1 / 3
    assert st_.log_likelihood() == pytest.approx(st_.matrix.num_entries * math.log(1 / 3))


def test_small_instance_matches_term_oracle():
    m = AnnotationMatrix(3, 2, 2, [0, 0, 1, 2], [0, 1, 1, 0], [0, 1, 1, 0])
    rng = np.random.default_rng(1)
    hp = Hyperparams(2, 2, 2.0, 1.5, 3.0)
    theta = rng.dirichlet(np.ones(2), size=(2, 2))
    psi, omega = rng.dirichlet(np.ones(2)), rng.dirichlet(np.ones(2))
    w, z = np.array([0, 1, 1]), np.array([1, 0])
    state = PgmState(m, hp, theta, psi, omega, w, z)
    expect = loglik_by_terms(m, 2.0, 1.5, 3.0, theta, psi, omega, w, z)
    assert state.log_likelihood() == pytest.approx(expect, rel=1e-12)


def test_random_instances_match_term_oracle():
    for seed in range(20):
        s = random_state(seed)
        expect = loglik_by_terms(s.matrix, s.hp.alpha, s.hp.gamma, s.hp.tau,
                                 s.theta, s.psi, s.omega, s.w, s.z)
        assert s.log_likelihood() == pytest.approx(expect, rel=1e-10)


def test_zero_probability_gives_flagged_minus_inf(caplog):
    m = AnnotationMatrix(2, 2, 2, [0, 1], [0, 1], [0, 1])
    s = PgmState(m, Hyperparams(1, 1), [[[1.0, 0.0]]], [1.0], [1.0], [0, 0], [0, 0])
    assert s.log_likelihood() == -np.inf
    assert "zero probability" in caplog.text


def test_identity_moves_are_zero():
    s = random_state(4, K=2, L=2)
    assert s.delta_theta(1, 0, s.theta[1, 0].copy()) == 0
    assert s.delta_psi(s.psi.copy()) == 0
    assert s.delta_omega(s.omega.copy()) == 0
    assert s.delta_w(0, s.w[0]) == 0
    assert s.delta_z(0, s.z[0]) == 0


def test_empty_cell_theta_move_with_flat_prior():
    s = random_state(5, K=3, L=3, hp_values=(1.0, 2.0, 2.0))
    for m in range(s.matrix.num_items):
        s.set_w(m, 0)  # item clusters 1 and 2 now hold no entries
    new = np.random.default_rng(0).dirichlet(np.ones(s.matrix.num_labels))
    assert s.delta_theta(2, 1, new) == 0


def test_flat_psi_prior_uniform_move():
    s = random_state(6, K=3, L=2, hp_values=(2.0, 1.0, 2.0))
    s.set_psi(np.full(3, 1 / 3))
    assert s.delta_psi(np.full(3, 1 / 3)) == 0


def test_literal_deltas_drop_assignment_terms():
    s = random_state(7, K=3, L=3)
    new_psi = np.random.default_rng(1).dirichlet(np.ones(3))
    literal = s.delta_psi(new_psi, literal=True)
    corrected = s.delta_psi(new_psi)
    extra = sum(math.log(new_psi[k] / s.psi[k]) for k in s.w)
    assert corrected - literal == pytest.approx(extra, rel=1e-10)
    new_omega = np.random.default_rng(2).dirichlet(np.ones(3))
    extra = sum(math.log(new_omega[l] / s.omega[l]) for l in s.z)
    assert s.delta_omega(new_omega) - s.delta_omega(new_omega, True) == pytest.approx(extra, rel=1e-10)


def _apply_and_check(s, rng, kind):
    before = s.log_likelihood()
    K, L, P = s.theta.shape
    if kind == 0:
        k, l = rng.integers(K), rng.integers(L)
        new = rng.dirichlet(np.ones(P))
        d = s.delta_theta(k, l, new)
        s.set_theta(k, l, new)
    elif kind == 1:
        new = rng.dirichlet(np.ones(K))
        d = s.delta_psi(new)
        s.set_psi(new)
    elif kind == 2:
        new = rng.dirichlet(np.ones(L))
        d = s.delta_omega(new)
        s.set_omega(new)
    elif kind == 3:
        m, k = rng.integers(s.matrix.num_items), rng.integers(K)
        d = s.delta_w(m, k)
        s.set_w(m, k)
    else:
        n, l = rng.integers(s.matrix.num_annotators), rng.integers(L)
        d = s.delta_z(n, l)
        s.set_z(n, l)
    after = PgmState(s.matrix, s.hp, s.theta, s.psi, s.omega, s.w, s.z).log_likelihood()
    assert after - before == pytest.approx(d, rel=1e-8, abs=1e-8 * abs(before))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_delta_consistency_property(seed):
    s = random_state(seed)
    rng = np.random.default_rng(seed)
    for _ in range(25):
        _apply_and_check(s, rng, int(rng.integers(5)))
    assert s.check()


def test_cache_matches_recount_after_moves():
    s = random_state(11, K=3, L=3)
    rng = np.random.default_rng(0)
    for _ in range(200):
        if rng.random() < 0.5:
            s.set_w(rng.integers(s.matrix.num_items), rng.integers(3))
        else:
            s.set_z(rng.integers(s.matrix.num_annotators), rng.integers(3))
    assert s.check()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_relabeling_leaves_likelihood_unchanged(seed):
    s = random_state(seed)
    rng = np.random.default_rng(seed + 1)
    K, L, _ = s.theta.shape
    pk, pl = rng.permutation(K), rng.permutation(L)
    inv_k, inv_l = np.argsort(pk), np.argsort(pl)
    # new cluster j is old cluster pk[j]
    t = PgmState(s.matrix, s.hp, s.theta[pk][:, pl], s.psi[pk], s.omega[pl],
                 inv_k[s.w], inv_l[s.z])
    assert t.log_likelihood() == pytest.approx(s.log_likelihood(), rel=1e-12)


def test_delta_w_index_error():
    s = random_state(12, K=2)
    with pytest.raises(IndexError):
        s.delta_w(0, 5)


def test_model_json_roundtrip_is_exact(tmp_path):
    s = random_state(13, K=3, L=2)
    save_model(state_to_dict(s), tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(back["theta"], s.theta)
    np.testing.assert_array_equal(back["psi"], s.psi)
    np.testing.assert_array_equal(back["w"], s.w)
    assert back["hp"] == s.hp
