import numpy as np
import pytest

from helpers import central_diff, rel_err
from moose import envsuite as E
from moose import dynmodel as D
from moose.diffcore import Layer, Mlp, Tensor
from moose.errors import ContractError, FormatError

ENV = E.make_env("pointmass")


def tiny_dataset(n=400, eps=0.4, seed=0, tier="mediocre", env=ENV):
    return E.generate_dataset(env, E.behavior_policy(env, tier), eps, n, seed)


def hand_stats(sd=4, lo=-1.0, hi=1.0):
    return D.NormStats(np.zeros(sd), np.ones(sd), np.zeros(sd), np.ones(sd), 0.0, 1.0,
                       np.full(sd, lo), np.full(sd, hi))


def constant_ensemble(offsets, stats, mode="delta"):
    """Members whose raw output is the constant vector ``offsets[k]``."""
    K, out = np.asarray(offsets).shape
    net = Mlp.init([6, 3, out], ["relu", "linear"], np.random.default_rng(0), weight_norm=True, members=K)
    for layer in net.layers:
        layer.g.data[:] = 0.0
    net.layers[-1].b.data[:, 0, :] = offsets
    return D.DynamicsEnsemble(net, stats, mode, False, 4, 2)


# -- statistics ------------------------------------------------------------------

def test_stats_simple_column():
    d = tiny_dataset(200)
    d.s[:, 0] = np.where(np.arange(len(d)) % 2, 1.0, 3.0)
    st = D.compute_norm_stats(d)
    assert st.s_mean[0] == 2.0 and st.s_std[0] == 1.0


def test_stats_constant_column_floor():
    d = tiny_dataset(200)
    d.s[:, 1] = 0.25
    st = D.compute_norm_stats(d)
    assert st.s_std[1] == D.SIGMA_FLOOR
    assert np.all(st.norm_s(d.s)[:, 1] == 0.0)


def test_stats_round_trip_and_ranges():
    d = tiny_dataset(500, eps=0.7)
    st = D.compute_norm_stats(d)
    x = np.random.default_rng(0).normal(size=(100, 4))
    assert np.max(np.abs(st.denorm_s(st.norm_s(x)) - x)) < 1e-12
    assert np.max(np.abs(st.denorm_ds(st.norm_ds(x)) - x)) < 1e-12
    assert np.all(st.s_min <= st.s_max)
    assert np.all(st.s_std >= D.SIGMA_FLOOR) and np.all(st.ds_std >= D.SIGMA_FLOOR)


def test_stats_need_two_transitions():
    d = tiny_dataset(100)
    with pytest.raises(ContractError):
        D.compute_norm_stats(d.subset(np.arange(len(d)) < 1))


# -- prediction on hand-built members ----------------------------------------------

def test_zero_delta_is_identity():
    ens = constant_ensemble(np.zeros((2, 4)), hand_stats())
    s = np.random.default_rng(1).uniform(-0.9, 0.9, (5, 4))
    a = np.zeros((5, 2))
    for k in range(2):
        assert np.array_equal(D.predict(ens, k, s, a)[0].data, s)


def test_zero_delta_adds_mean_offset():
    st = hand_stats()
    st.ds_mean = np.array([0.01, 0.0, -0.02, 0.0])
    ens = constant_ensemble(np.zeros((1, 4)), st)
    s = np.zeros((3, 4))
    assert np.allclose(D.predict(ens, 0, s, np.zeros((3, 2)))[0].data, st.ds_mean)


def test_direct_mode_decodes_state():
    st = hand_stats()
    st.s_mean = np.full(4, 0.1)
    st.s_std = np.full(4, 0.5)
    ens = constant_ensemble(np.array([[0.2, -0.4, 0.0, 1.0]]), st, mode="direct")
    out = D.predict(ens, 0, np.zeros((1, 4)), np.zeros((1, 2)))[0].data
    assert np.allclose(out, [0.2, -0.1, 0.1, 0.6])


def test_prediction_clamped_to_observed_range():
    st = hand_stats(lo=-0.3, hi=0.2)
    rng = np.random.default_rng(2)
    ens = constant_ensemble(rng.normal(0, 5, (3, 4)), st)
    s = rng.uniform(-1, 1, (1000, 4))
    a = rng.uniform(-1, 1, (1000, 2))
    for k in range(3):
        p = D.predict(ens, k, s, a)[0].data
        assert np.all(p >= -0.3) and np.all(p <= 0.2)


def test_clamped_coordinate_passes_no_gradient():
    st = hand_stats(lo=-0.1, hi=0.1)
    ens = constant_ensemble(np.array([[1.0, 0.0, 0.0, 0.0]]), st)
    s = Tensor(np.zeros((1, 4)), requires_grad=True)
    D.predict(ens, 0, s, np.zeros((1, 2)))[0][..., 0].sum().backward()
    assert np.all(s.grad == 0.0)


def test_disagreement_identical_members():
    ens = constant_ensemble(np.tile([0.1, 0.2, 0.0, 0.0], (3, 1)), hand_stats())
    assert D.model_disagreement(ens, np.zeros((4, 4)), np.zeros((4, 2))) == 0.0


def test_disagreement_constant_offset():
    ens = constant_ensemble(np.array([[0.0, 0, 0, 0], [0.3, 0, 0, 0]]), hand_stats())
    rng = np.random.default_rng(0)
    s = rng.uniform(-0.5, 0.5, (10, 4))
    assert D.model_disagreement(ens, s, np.zeros((10, 2))) == pytest.approx(0.3, abs=1e-12)


def test_disagreement_needs_two_members():
    ens = constant_ensemble(np.zeros((1, 4)), hand_stats())
    with pytest.raises(ContractError):
        D.model_disagreement(ens, np.zeros((1, 4)), np.zeros((1, 2)))


def test_member_index_checked():
    ens = constant_ensemble(np.zeros((2, 4)), hand_stats())
    with pytest.raises(ContractError):
        D.predict(ens, 2, np.zeros((1, 4)), np.zeros((1, 2)))


# -- training ------------------------------------------------------------------

SMALL = D.EnsembleConfig(members=2, epochs=3, hidden=(16, 16), lr=1e-3)


def test_same_seed_bit_identical(tmp_path):
    d = tiny_dataset(600)
    a = D.train_ensemble(d, SMALL)
    b = D.train_ensemble(d, SMALL)
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_single_member_matches_first_member_of_larger_ensemble():
    d = tiny_dataset(600)
    one = D.train_ensemble(d, D.EnsembleConfig(members=1, epochs=2, hidden=(16,), lr=1e-3))
    three = D.train_ensemble(d, D.EnsembleConfig(members=3, epochs=2, hidden=(16,), lr=1e-3))
    for l1, l3 in zip(one.net.layers, three.net.layers):
        assert np.allclose(l1.v.data[0], l3.v.data[0], rtol=0, atol=1e-13)
        assert np.allclose(l1.b.data[0], l3.b.data[0], rtol=0, atol=1e-13)


def test_members_differ():
    ens = D.train_ensemble(tiny_dataset(600), SMALL)
    assert not np.array_equal(ens.net.layers[0].v.data[0], ens.net.layers[0].v.data[1])


def test_reward_head_predicts_reward():
    d = tiny_dataset(600)
    ens = D.train_ensemble(d, D.EnsembleConfig(members=2, epochs=2, hidden=(16,), reward_head=True))
    s_next, r = D.predict_all(ens, np.broadcast_to(d.s[:5], (2, 5, 4)), np.broadcast_to(d.a[:5], (2, 5, 2)))
    assert s_next.shape == (2, 5, 4) and r.shape == (2, 5)


def test_divergence_names_member():
    d = tiny_dataset(200)
    d.s_next[3, 0] = np.nan
    with pytest.raises(Exception, match="member"):
        D.train_ensemble(d, SMALL)


def test_checkpoint_round_trip(tmp_path):
    d = tiny_dataset(600)
    ens = D.train_ensemble(d, SMALL)
    ens.save(tmp_path / "e.ckpt")
    back = D.DynamicsEnsemble.load(tmp_path / "e.ckpt")
    s = np.broadcast_to(d.s[:20], (2, 20, 4))
    a = np.broadcast_to(d.a[:20], (2, 20, 2))
    assert np.array_equal(D.predict_all(ens, s, a)[0].data, D.predict_all(back, s, a)[0].data)
    assert back.stats.same_as(ens.stats) and back.mode == "delta" and back.K == 2


def test_check_stats_refuses_foreign_statistics():
    ens = D.train_ensemble(tiny_dataset(600), SMALL)
    other = D.compute_norm_stats(tiny_dataset(600, seed=3))
    D.check_stats(ens, ens.stats)
    with pytest.raises(FormatError):
        D.check_stats(ens, other)


def test_bad_mode_rejected():
    with pytest.raises(ContractError):
        D.train_ensemble(tiny_dataset(200), D.EnsembleConfig(mode="residual"))


# -- the full-size ensemble ------------------------------------------------------

@pytest.fixture(scope="module")
def batch():
    return tiny_dataset(20000, eps=0.4)


@pytest.fixture(scope="module")
def trained(batch):
    return D.train_ensemble(batch, D.EnsembleConfig())


def test_heldout_mse_per_member(trained):
    assert trained.K == 4
    assert all(m < 0.01 for m in trained.holdout_mse)


def test_training_loss_non_increasing(trained):
    curve = np.asarray(trained.train_curve)  # (epochs, K)
    assert curve.shape == (50, 4)
    assert np.all(np.diff(curve, axis=0) <= 1e-6)


def test_heldout_residuals_within_three_sigma(trained, batch):
    train, held = batch.split_episodes(0.1)
    for k in range(trained.K):
        res = D.predict(trained, k, train.s, train.a)[0].data - train.s_next
        sigma = res.std(axis=0)
        pick = held.subset(np.arange(len(held)) < 100)
        err = np.abs(D.predict(trained, k, pick.s, pick.a)[0].data - pick.s_next)
        assert np.sum(np.all(err < 3 * sigma, axis=1)) >= 95


def test_predict_gradient_matches_finite_differences(trained, batch):
    k = 1
    for i in (10, 500, 3000):
        s = batch.s[i].copy()
        a = batch.a[i].copy()
        pred = D.predict(trained, k, s, a)[0].data
        assert np.all((pred > trained.stats.s_min + 1e-3) & (pred < trained.stats.s_max - 1e-3))
        w = np.array([0.3, -1.2, 0.7, 0.5])
        ts, ta = Tensor(s, requires_grad=True), Tensor(a, requires_grad=True)
        (D.predict(trained, k, ts, ta)[0] * w).sum().backward()
        f = lambda: float((D.predict(trained, k, s, a)[0].data * w).sum())
        assert rel_err(ts.grad, central_diff(f, s)) < 1e-5
        assert rel_err(ta.grad, central_diff(f, a)) < 1e-5


def test_predict_all_matches_predict(trained, batch):
    s, a = batch.s[:30], batch.a[:30]
    together = D.predict_all(trained, np.broadcast_to(s, (4, 30, 4)), np.broadcast_to(a, (4, 30, 2)))[0].data
    for k in range(4):
        assert np.allclose(together[k], D.predict(trained, k, s, a)[0].data, rtol=0, atol=1e-14)


def test_clipping_invariant_on_random_queries(trained):
    rng = np.random.default_rng(0)
    s = rng.uniform(-1, 1, (4, 25_000, 4))
    a = rng.uniform(-1, 1, (4, 25_000, 2))
    p = D.predict_all(trained, s, a)[0].data
    assert np.all(p >= trained.stats.s_min) and np.all(p <= trained.stats.s_max)


def test_disagreement_larger_off_support(trained, batch):
    rng = np.random.default_rng(1)
    idx = rng.choice(len(batch), 1000, replace=False)
    on = D.model_disagreement(trained, batch.s[idx], batch.a[idx])
    off = D.model_disagreement(trained, rng.uniform(-1, 1, (1000, 4)), rng.uniform(-1, 1, (1000, 2)))
    assert off >= on
