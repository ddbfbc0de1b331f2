"""Local objectives: closed-form values, gradient identities, update-loop laws."""
import numpy as np
import pytest

from fedsim.methods import (ClientContext, METHODS, MethodConfig,
                            _kd_divergence, _np_softmax, client_update,
                            loss_ce, loss_fedalign, loss_fedprox, loss_gradaug,
                            loss_moon, spectral_norm, transmitting_matrices)
from fedsim.models import BlockNet, BlockNetSpec
from fedsim.tensor import (OptimizerState, Tensor, gradients, zero_gradients)

from helpers import matrix_with_spectrum

SPEC = BlockNetSpec(input_shape=(12,), num_classes=3, widths=(6, 6))
CONV_SPEC = BlockNetSpec(input_shape=(2, 8, 8), num_classes=3, widths=(4, 8))


def _net(seed=0, **kw):
    return BlockNet(SPEC, rng=np.random.default_rng(seed), **kw)


def _batch(seed=1, n=10, spec=SPEC):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n,) + spec.input_shape)
    y = rng.integers(0, spec.num_classes, size=n)
    return x, y


def _ctx(net, x, y, seed=2, **kw):
    return ClientContext(model=net, inputs=x, labels=y,
                         data_rng=np.random.default_rng([seed, 0]),
                         method_rng=np.random.default_rng([seed, 1]), **kw)


# -- configuration ----------------------------------------------------------------


def test_method_config_defaults():
    assert MethodConfig().mu == 0.0
    assert MethodConfig(method="fedprox").mu == 1e-4
    assert MethodConfig(method="moon").mu == 1.0
    assert MethodConfig(method="fedalign").mu == 0.45
    assert MethodConfig(method="moon").tau == 0.5
    assert MethodConfig(method="stochdepth").gamma_L == 0.9
    assert MethodConfig(method="fedalign").omega_S == 0.25
    assert MethodConfig(method="gradaug").omega_b == 0.8


def test_gradaug_mu_tracks_subnetwork_count():
    assert MethodConfig(method="gradaug", n_subnets=1).mu == 1.5
    assert MethodConfig(method="gradaug", n_subnets=2).mu == 1.75
    assert MethodConfig(method="gradaug", n_subnets=3).mu == 2.0
    assert MethodConfig(method="gradaug", n_subnets=4).mu == 2.25
    assert MethodConfig(method="gradaug", n_subnets=7).mu == 1.75  # fallback
    assert MethodConfig(method="gradaug", mu=0.3).mu == 0.3  # explicit wins


def test_method_config_validation():
    with pytest.raises(ValueError):
        MethodConfig(method="fedsgd")
    with pytest.raises(ValueError):
        MethodConfig(mu=-1.0)
    with pytest.raises(ValueError):
        MethodConfig(gamma_L=0.0)
    with pytest.raises(ValueError):
        MethodConfig(omega_S=1.2)
    with pytest.raises(ValueError):
        MethodConfig(tau=0.0)
    with pytest.raises(ValueError):
        MethodConfig.from_dict({"method": "fedavg", "extra": 1})
    assert MethodConfig.from_dict(MethodConfig(method="moon").to_dict()).mu == 1.0


def test_needs_projection_only_for_contrastive():
    for m in METHODS:
        assert MethodConfig(method=m).needs_projection == (m == "moon")


# -- cross entropy and fedprox -------------------------------------------------------


def test_loss_ce_uniform():
    assert abs(loss_ce(Tensor(np.zeros((5, 3))), np.zeros(5, dtype=int)).item()
               - np.log(3.0)) < 1e-15


def test_fedprox_value_hand_computed():
    params = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    anchor = {"w": np.array([0.0, 0.0])}
    base = Tensor(1.0)
    # (mu/2) * (1 + 4) = 0.25
    loss = loss_fedprox(base, params, anchor, mu=0.1)
    assert abs(loss.item() - 1.25) < 1e-15


def test_fedprox_gradient_identity():
    net = _net(seed=3)
    x, y = _batch(seed=4)
    anchor = {k: v.data + 0.1 for k, v in net.params.items()}
    mu = 0.37

    zero_gradients(net.params)
    ce = gradients(loss_ce(net.forward(x), y), net.params)
    zero_gradients(net.params)
    base = loss_ce(net.forward(x), y)
    prox = gradients(loss_fedprox(base, net.params, anchor, mu), net.params)
    for name in net.params:
        want = ce[name] + mu * (net.params[name].data - anchor[name])
        assert np.max(np.abs(prox[name] - want)) < 1e-10, name


def test_fedprox_mu_zero_is_base():
    base = Tensor(2.0, requires_grad=True)
    assert loss_fedprox(base, {"w": Tensor(np.ones(2))}, {"w": np.zeros(2)},
                        0.0) is base


# -- contrastive loss -----------------------------------------------------------------


def test_moon_identical_representations_log2():
    z = Tensor(np.random.default_rng(5).normal(size=(4, 8)), requires_grad=True)
    base = Tensor(0.5)
    loss = loss_moon(base, z, Tensor(z.data.copy()), Tensor(z.data.copy()),
                     tau=0.5, mu=1.0)
    assert abs(loss.item() - (0.5 + np.log(2.0))) < 1e-12


def test_moon_opposed_previous_frozen_value():
    # cos(local, global) = 1, cos(local, prev) = -1, tau = 0.5:
    # term = log(e^2 + e^-2) - 2 = log1p(e^-4)
    z = Tensor(np.random.default_rng(6).normal(size=(3, 5)), requires_grad=True)
    loss = loss_moon(Tensor(0.0), z, Tensor(z.data.copy()),
                     Tensor(-z.data.copy()), tau=0.5, mu=2.0)
    want = 2.0 * np.log1p(np.exp(-4.0))
    assert abs(loss.item() - want) < 1e-12


def test_moon_gradient_only_through_local():
    rng = np.random.default_rng(7)
    z_local = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    z_global = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    z_prev = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    loss_moon(Tensor(0.0), z_local, z_global, z_prev, tau=0.5, mu=1.0).backward()
    assert z_local.grad is not None and np.any(z_local.grad)
    assert z_global.grad is None
    assert z_prev.grad is None


def test_moon_mu_zero_and_zero_norm():
    base = Tensor(1.0, requires_grad=True)
    z = Tensor(np.ones((2, 3)))
    assert loss_moon(base, z, z, z, 0.5, 0.0) is base
    with pytest.raises(ValueError):
        loss_moon(base, Tensor(np.zeros((2, 3))), z, z, 0.5, 1.0)


# -- distillation pieces -----------------------------------------------------------


def test_kd_divergence_zero_on_self():
    logits = Tensor(np.random.default_rng(8).normal(size=(4, 5)))
    kd = _kd_divergence(logits, _np_softmax(logits.data))
    assert abs(kd.item()) < 1e-12


def test_kd_divergence_nonnegative_and_hand_value():
    q_logits = Tensor(np.array([[np.log(0.5), np.log(0.25), np.log(0.25)]]))
    p = np.array([[0.25, 0.5, 0.25]])
    kd = _kd_divergence(q_logits, p)
    want = 0.5 * np.log(2.0) + 0.25 * np.log(0.5)  # sum q log(q/p)
    assert abs(kd.item() - want) < 1e-12
    rng = np.random.default_rng(9)
    for _ in range(10):
        q = Tensor(rng.normal(size=(3, 4)))
        t = _np_softmax(rng.normal(size=(3, 4)))
        assert _kd_divergence(q, t).item() > -1e-12


def test_gradaug_mu_zero_short_circuits():
    net = _net(seed=10)
    x, y = _batch(seed=11)
    cfg = MethodConfig(method="gradaug", mu=0.0)
    rng = np.random.default_rng(12)
    loss = loss_gradaug(net, x, y, cfg, rng)
    want = loss_ce(net.forward(x), y).item()
    assert loss.item() == want
    # the rng must not have been consumed on the short-circuit path
    assert rng.integers(0, 1 << 30) == np.random.default_rng(12).integers(0, 1 << 30)


def test_gradaug_adds_nonnegative_distillation():
    net = _net(seed=13)
    x, y = _batch(seed=14)
    cfg = MethodConfig(method="gradaug")  # mu = 1.75, 2 subnetworks
    base = loss_ce(net.forward(x), y).item()
    loss = loss_gradaug(net, x, y, cfg, np.random.default_rng(15))
    assert loss.item() >= base - 1e-12
    again = loss_gradaug(net, x, y, cfg, np.random.default_rng(15))
    assert loss.item() == again.item()  # same rng stream, same value


def test_gradaug_zero_subnetworks():
    net = _net(seed=16)
    x, y = _batch(seed=17)
    cfg = MethodConfig(method="gradaug", n_subnets=0, mu=1.75)
    loss = loss_gradaug(net, x, y, cfg, np.random.default_rng(18))
    assert loss.item() == loss_ce(net.forward(x), y).item()


# -- transmitting matrices and spectral norm --------------------------------------------


def test_transmitting_matrix_orthonormal_identity():
    # f with orthonormal columns: f^T f = I exactly
    q, _ = np.linalg.qr(np.random.default_rng(19).normal(size=(8, 4)))
    f = Tensor(q)
    x_full, x_sub = transmitting_matrices(f, f, f)
    assert np.allclose(x_full.data, np.eye(4), atol=1e-12)
    assert np.allclose(x_sub.data, np.eye(4), atol=1e-12)


def test_transmitting_matrix_flat_oracle():
    rng = np.random.default_rng(20)
    a = rng.normal(size=(6, 3))
    b = rng.normal(size=(6, 5))
    x_full, _ = transmitting_matrices(Tensor(a), Tensor(b), Tensor(b))
    assert x_full.shape == (3, 5)
    assert np.allclose(x_full.data, a.T @ b, atol=1e-12)


def test_transmitting_matrix_pools_larger_spatial_map():
    rng = np.random.default_rng(21)
    a = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=(2, 5, 2, 2))
    x_full, _ = transmitting_matrices(Tensor(a), Tensor(b), Tensor(b))
    # oracle: pool a to 2x2 (mean of each 2x2 window), flatten, multiply
    pooled = a.reshape(2, 3, 2, 2, 2, 2).mean(axis=(3, 5))
    fa = pooled.transpose(0, 2, 3, 1).reshape(-1, 3)
    fb = b.transpose(0, 2, 3, 1).reshape(-1, 5)
    assert x_full.shape == (3, 5)
    assert np.allclose(x_full.data, fa.T @ fb, atol=1e-12)


def test_transmitting_matrix_rejects_bad_rank():
    with pytest.raises(ValueError):
        transmitting_matrices(Tensor(np.zeros((2, 3, 4))),
                              Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_spectral_norm_svd_oracle_separated():
    rng = np.random.default_rng(22)
    for _ in range(20):
        m, n = rng.integers(2, 12, size=2)
        k = int(min(m, n))
        sigmas = np.sort(rng.uniform(0.1, 3.0, size=k))[::-1]
        sigmas[0] = sigmas[0] + 1.0  # guarantee a spectral gap
        a = matrix_with_spectrum(int(m), int(n), sigmas, rng)
        got = spectral_norm(Tensor(a), power_iters=60, rng=rng).item()
        want = np.linalg.svd(a, compute_uv=False)[0]
        assert abs(got - want) / want < 1e-9


def test_spectral_norm_gradient_is_rank_one():
    # d(sigma_max)/dX = u1 v1^T; compare against finite differences of the SVD
    rng = np.random.default_rng(23)
    a = matrix_with_spectrum(5, 4, [3.0, 1.0, 0.4, 0.1], rng)
    x = Tensor(a, requires_grad=True)
    spectral_norm(x, power_iters=100, rng=rng).backward()
    eps = 1e-6
    fd = np.zeros_like(a)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            up = a.copy(); up[i, j] += eps
            dn = a.copy(); dn[i, j] -= eps
            fd[i, j] = (np.linalg.svd(up, compute_uv=False)[0]
                        - np.linalg.svd(dn, compute_uv=False)[0]) / (2 * eps)
    assert np.max(np.abs(x.grad - fd)) < 1e-5


def test_spectral_norm_zero_matrix():
    x = Tensor(np.zeros((3, 3)), requires_grad=True)
    s = spectral_norm(x)
    assert s.item() == 0.0
    s.backward()
    assert np.array_equal(x.grad, np.zeros((3, 3)))


def test_spectral_norm_validation():
    with pytest.raises(ValueError):
        spectral_norm(Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        spectral_norm(Tensor(np.zeros((2, 2))), power_iters=0)


# -- fedalign -----------------------------------------------------------------------


def test_fedalign_full_width_subblock_collapses_to_ce():
    net = _net(seed=24)
    x, y = _batch(seed=25)
    cfg = MethodConfig(method="fedalign", omega_S=1.0)
    loss = loss_fedalign(net, x, y, cfg, np.random.default_rng(26))
    assert loss.item() == loss_ce(net.forward(x), y).item()


def test_fedalign_mu_zero_is_ce():
    net = _net(seed=27)
    x, y = _batch(seed=28)
    cfg = MethodConfig(method="fedalign", mu=0.0)
    loss = loss_fedalign(net, x, y, cfg, np.random.default_rng(29))
    assert loss.item() == loss_ce(net.forward(x), y).item()


def test_fedalign_relative_scaling_identity():
    # whenever the alignment term survives the epsilon guard, its scaled
    # contribution equals mu times the cross-entropy value
    net = _net(seed=30)
    x, y = _batch(seed=31)
    cfg = MethodConfig(method="fedalign")  # omega_S 0.25, mu 0.45
    base = loss_ce(net.forward(x), y).item()
    loss = loss_fedalign(net, x, y, cfg, np.random.default_rng(32))
    assert loss.item() == pytest.approx(base * (1.0 + cfg.mu), rel=1e-9)


def test_fedalign_conv_path_runs():
    net = BlockNet(CONV_SPEC, rng=np.random.default_rng(33))
    x, y = _batch(seed=34, n=4, spec=CONV_SPEC)
    loss = loss_fedalign(net, x, y, MethodConfig(method="fedalign"),
                         np.random.default_rng(35))
    assert np.isfinite(loss.item())


# -- the update loop ----------------------------------------------------------------


def test_client_update_zero_epochs_is_noop():
    net = _net(seed=36)
    before = net.get_vector().data.copy()
    x, y = _batch(seed=37)
    params, stats = client_update(_ctx(net, x, y), MethodConfig(), 0, 4,
                                  OptimizerState())
    assert stats == []
    assert np.array_equal(net.get_vector().data, before)


def test_client_update_deterministic():
    x, y = _batch(seed=38)
    outs = []
    for _ in range(2):
        net = _net(seed=39)
        client_update(_ctx(net, x, y, seed=40), MethodConfig(), 2, 4,
                      OptimizerState())
        outs.append(net.get_vector().data)
    assert np.array_equal(outs[0], outs[1])


def test_client_update_reports_weighted_stats():
    net = _net(seed=41)
    x, y = _batch(seed=42, n=6)
    _, stats = client_update(_ctx(net, x, y), MethodConfig(), 3, 4,
                             OptimizerState(learning_rate=0.05))
    assert len(stats) == 3
    assert all(set(s) == {"loss", "accuracy"} for s in stats)
    assert stats[-1]["loss"] < stats[0]["loss"]  # it does learn something


def test_client_update_validation():
    net = _net()
    x, y = _batch()
    with pytest.raises(ValueError):
        client_update(_ctx(net, x, y), MethodConfig(), -1, 4, OptimizerState())
    with pytest.raises(ValueError):
        client_update(_ctx(net, x, y), MethodConfig(), 1, 0, OptimizerState())
    with pytest.raises(ValueError):
        client_update(_ctx(net, x[:0], y[:0]), MethodConfig(), 1, 4,
                      OptimizerState())


def test_moon_update_requires_reference_weights():
    net = _net(seed=43, with_projection=True)
    x, y = _batch(seed=44)
    with pytest.raises(ValueError):
        client_update(_ctx(net, x, y), MethodConfig(method="moon"), 1, 4,
                      OptimizerState())


def _trajectory(method_cfg, seed=45, with_projection=False, epochs=2):
    net = BlockNet(SPEC, rng=np.random.default_rng(seed),
                   with_projection=with_projection)
    x, y = _batch(seed=seed + 1)
    ctx = _ctx(net, x, y, seed=seed + 2,
               global_weights=net.state(), prev_weights=net.state())
    client_update(ctx, method_cfg, epochs, 4, OptimizerState())
    return net.get_vector().data


def test_mu_zero_trajectories_match_plain_ce_bitwise():
    want = _trajectory(MethodConfig(method="fedavg"))
    assert np.array_equal(_trajectory(MethodConfig(method="fedprox", mu=0.0)), want)
    assert np.array_equal(_trajectory(MethodConfig(method="gradaug", mu=0.0)), want)
    assert np.array_equal(
        _trajectory(MethodConfig(method="fedalign", omega_S=1.0)), want)
    assert np.array_equal(
        _trajectory(MethodConfig(method="stochdepth", gamma_L=1.0)), want)


def test_moon_mu_zero_matches_ce_with_projection():
    want = _trajectory(MethodConfig(method="fedavg"), with_projection=True)
    got = _trajectory(MethodConfig(method="moon", mu=0.0), with_projection=True)
    assert np.array_equal(got, want)


def test_every_method_trains_without_error():
    for m in METHODS:
        net = BlockNet(SPEC, rng=np.random.default_rng(46),
                       with_projection=(m == "moon"))
        x, y = _batch(seed=47)
        ctx = _ctx(net, x, y, seed=48,
                   global_weights=net.state(), prev_weights=net.state())
        _, stats = client_update(ctx, MethodConfig(method=m), 1, 4,
                                 OptimizerState())
        assert np.isfinite(stats[0]["loss"]), m
