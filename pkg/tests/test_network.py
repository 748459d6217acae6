"""Architecture, backprop exactness, training behavior, persistence."""

import numpy as np
import pytest

from diffrefine.errors import ConfigError, DimensionMismatchError, NonFiniteLossError
from diffrefine.model_store import TrainedModel, load_model, save_model
from diffrefine.network import FeedForwardNet, NetSpec, TimeEmbedding, silu
from diffrefine.numerics import Rng, finite_diff_grad
from diffrefine.potentials import CallablePotential
from diffrefine.training import (
    Normalizer,
    TrainConfig,
    backprop_grads,
    train_network,
    windowed_history,
)


class TestTimeEmbedding:
    def test_shape_and_bounds(self):
        emb = TimeEmbedding(16)
        v = emb(37)
        assert v.shape == (16,)
        assert np.all(np.abs(v) <= 1.0)

    def test_injective_over_chain(self):
        emb = TimeEmbedding(8)
        vecs = emb.batch(np.arange(1, 101))
        d = np.linalg.norm(vecs[:, None, :] - vecs[None, :, :], axis=2)
        d[np.diag_indices(100)] = np.inf
        assert d.min() > 1e-6

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            TimeEmbedding(7)


class TestNetStructure:
    def test_zero_final_layer_outputs_bias(self):
        spec = NetSpec(x_dim=3, hidden=(8, 8), out_dim=2, final_zero=True)
        net = FeedForwardNet.init(spec, Rng(0))
        net.biases[-1] = np.array([0.5, -1.5])
        out = net.forward(np.array([1.0, -2.0, 0.3]))
        assert np.array_equal(out, np.array([0.5, -1.5]))

    def test_param_count(self):
        spec = NetSpec(x_dim=4, hidden=(10, 10), out_dim=3)
        net = FeedForwardNet.init(spec, Rng(0))
        expected = (4 * 10 + 10) + (10 * 10 + 10) + (10 * 3 + 3)
        assert net.param_count() == expected
        assert net.get_params().size == expected

    def test_param_round_trip(self):
        spec = NetSpec(x_dim=2, hidden=(5,), out_dim=2)
        net = FeedForwardNet.init(spec, Rng(1))
        flat = net.get_params()
        clone = FeedForwardNet.init(spec, Rng(99))
        clone.set_params(flat)
        assert np.array_equal(clone.get_params(), flat)

    def test_skips_change_output(self):
        rng_a, rng_b = Rng(3), Rng(3)
        plain = FeedForwardNet.init(NetSpec(x_dim=2, hidden=(6, 6), out_dim=1), rng_a)
        skip = FeedForwardNet.init(
            NetSpec(x_dim=2, hidden=(6, 6), out_dim=1, skips=True), rng_b
        )
        skip.set_params(plain.get_params())
        x = np.array([0.7, -0.2])
        assert not np.allclose(plain.forward(x), skip.forward(x))

    def test_asymmetric_skips_rejected(self):
        with pytest.raises(ConfigError):
            NetSpec(x_dim=2, hidden=(6, 4), out_dim=1, skips=True)

    def test_missing_time_input_rejected(self):
        net = FeedForwardNet.init(NetSpec(x_dim=2, hidden=(4,), out_dim=1, time_dim=8), Rng(0))
        with pytest.raises(DimensionMismatchError):
            net.forward(np.zeros(2))

    def test_silu_values(self):
        assert silu(np.array([0.0]))[0] == 0.0
        assert silu(np.array([20.0]))[0] == pytest.approx(20.0, rel=1e-6)


def _arch_cases():
    cases = []
    rng = Rng(12345)
    for i in range(20):
        x_dim = int(rng.integers(1, 5))
        depth = int(rng.integers(1, 4))
        if i % 3 == 0 and depth >= 2:
            width = int(rng.integers(3, 7))
            hidden = tuple([width] * depth)
            skips = True
        else:
            hidden = tuple(int(rng.integers(3, 7)) for _ in range(depth))
            skips = False
        time_dim = 8 if i % 4 == 1 else 0
        cond_dim = int(rng.integers(1, 3)) if i % 5 == 2 else 0
        out_dim = 1 if i % 2 == 0 else int(rng.integers(1, 4))
        loss = ("mse", "eps", "bce", "pinn")[i % 4]
        if loss == "bce":
            out_dim = 1
        cases.append((i, x_dim, hidden, out_dim, time_dim, cond_dim, skips, loss))
    return cases


class TestBackpropExactness:
    @pytest.mark.parametrize("case", _arch_cases(), ids=lambda c: f"arch{c[0]}-{c[7]}")
    def test_matches_finite_differences(self, case):
        i, x_dim, hidden, out_dim, time_dim, cond_dim, skips, loss = case
        spec = NetSpec(
            x_dim=x_dim, hidden=hidden, out_dim=out_dim,
            time_dim=time_dim, cond_dim=cond_dim, skips=skips,
        )
        rng = Rng(1000 + i)
        net = FeedForwardNet.init(spec, rng)
        n = 4
        x = rng.normal((n, x_dim))
        if loss == "bce":
            y = (rng.random((n, 1)) > 0.5).astype(float)
        else:
            y = rng.normal((n, out_dim))
        t = rng.integers(1, 50, size=n) if time_dim else None
        cond = rng.normal((n, cond_dim)) if cond_dim else None

        pinn_pot = None
        weight = 0.0
        if loss == "pinn":
            weight = 0.3
            quad = CallablePotential(out_dim, lambda v: float(v @ v), lambda v: 2.0 * v)

            def pinn_pot(y_pred, _rows):
                phi = np.array([quad.value(row) for row in y_pred])
                grads = np.stack([quad.grad(row) for row in y_pred])
                return phi, grads

        analytic_loss, grads, _ = backprop_grads(
            net, x, y, kind=loss, t=t, cond=cond, pinn_penalty=pinn_pot, pinn_weight=weight
        )
        flat = net.get_params()

        def loss_at(params):
            probe = net.clone()
            probe.set_params(params)
            val, _, _ = backprop_grads(
                probe, x, y, kind=loss, t=t, cond=cond, pinn_penalty=pinn_pot, pinn_weight=weight
            )
            return val

        fd = finite_diff_grad(loss_at, flat, h=1e-6)
        g = grads.flatten()
        scale = max(float(np.abs(fd).max()), 1e-8)
        assert float(np.abs(g - fd).max()) / scale < 1e-4

    def test_input_gradient_matches_fd(self):
        spec = NetSpec(x_dim=3, hidden=(6, 6), out_dim=2, skips=True)
        net = FeedForwardNet.init(spec, Rng(77))
        x = np.array([[0.4, -1.2, 0.9]])
        y = np.array([[0.1, 0.2]])
        _, _, d_input = backprop_grads(net, x, y, kind="mse")
        dx = net.input_gradient(d_input)[0]

        def loss_at_x(xv):
            out = net.forward(xv[None, :])
            return float(np.mean((out - y) ** 2))

        fd = finite_diff_grad(loss_at_x, x[0], h=1e-6)
        assert np.abs(dx - fd).max() / max(np.abs(fd).max(), 1e-8) < 1e-4


class TestTraining:
    def test_linear_regression_converges(self):
        rng = Rng(5)
        a = np.array([[1.0, -2.0], [0.5, 0.5]])
        x = rng.normal((400, 2))
        y = x @ a.T
        net = FeedForwardNet.init(NetSpec(x_dim=2, hidden=(32,), out_dim=2), Rng(6))
        res = train_network(net, x, y, TrainConfig(epochs=300, batch_size=64, lr=3e-3, seed=7))
        assert res.history[-1] < 1e-3

    def test_identical_seeds_identical_weights(self):
        rng = Rng(8)
        x = rng.normal((100, 2))
        y = x[:, :1] * 2.0
        outs = []
        for _ in range(2):
            net = FeedForwardNet.init(NetSpec(x_dim=2, hidden=(8,), out_dim=1), Rng(3))
            train_network(net, x, y, TrainConfig(epochs=10, batch_size=32, lr=1e-3, seed=3))
            outs.append(net.get_params())
        assert np.array_equal(outs[0], outs[1])

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_loss_aborts_with_epoch(self):
        x = np.full((8, 1), 1e4)
        y = np.full((8, 1), -1e4)
        net = FeedForwardNet.init(NetSpec(x_dim=1, hidden=(4, 4), out_dim=1), Rng(2))
        with pytest.raises(NonFiniteLossError) as err:
            train_network(net, x, y, TrainConfig(epochs=50, batch_size=8, lr=1e80, seed=1))
        assert err.value.epoch >= 0

    def test_pinn_penalty_reduces_potential(self):
        # Outputs are pushed toward zero by the penalty; identical
        # setup otherwise.
        rng = Rng(9)
        x = rng.normal((300, 2))
        y = x + 1.5

        def penalty(y_pred, _rows):
            phi = np.sum(y_pred**2, axis=1)
            return phi, 2.0 * y_pred

        results = {}
        for kind, weight in (("mse", 0.0), ("pinn", 0.2)):
            net = FeedForwardNet.init(NetSpec(x_dim=2, hidden=(16,), out_dim=2), Rng(4))
            cfg = TrainConfig(epochs=80, batch_size=64, lr=3e-3, seed=4, loss=kind, pinn_weight=weight)
            train_network(net, x, y, cfg, pinn_penalty=penalty if kind == "pinn" else None)
            pred = net.forward(x)
            results[kind] = float(np.mean(np.sum(pred**2, axis=1)))
        assert results["pinn"] < results["mse"]

    def test_windowed_history(self):
        h = np.array([5.0, 4.0, 3.0, 2.0, 1.0, 0.9, 0.8, 0.7, 0.6, 0.5])
        w = windowed_history(h, window=5)
        assert w.shape == (2,)
        assert w[0] == pytest.approx(3.0)
        assert w[1] == pytest.approx(0.7)


class TestNormalizer:
    def test_round_trip(self):
        rng = Rng(31)
        data = rng.normal((50, 3)) * np.array([2.0, 5.0, 0.1]) + np.array([1.0, -3.0, 0.0])
        norm = Normalizer.fit(data)
        z = norm.encode(data)
        assert np.abs(z.mean(axis=0)).max() < 1e-12
        assert np.allclose(norm.decode(z), data, atol=1e-12)

    def test_constant_column_safe(self):
        data = np.ones((10, 2))
        norm = Normalizer.fit(data)
        assert np.all(np.isfinite(norm.encode(data)))


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = NetSpec(x_dim=3, hidden=(8, 8), out_dim=2, time_dim=8, skips=True)
        net = FeedForwardNet.init(spec, Rng(55))
        model = TrainedModel(
            kind="regressor",
            net=net,
            x_norm=Normalizer(mean=np.array([1.0, 2.0, 3.0]), std=np.array([1.0, 0.5, 2.0])),
            y_norm=Normalizer(mean=np.array([0.0, -1.0]), std=np.array([2.0, 2.0])),
            seed=55,
            train_config={"epochs": 3},
            loss_history=np.array([3.0, 2.0, 1.0]),
            extra={"schedule_betas": np.linspace(1e-4, 0.02, 10), "note": "x"},
        )
        path = tmp_path / "model.npz"
        save_model(path, model)
        loaded = load_model(path)
        assert loaded.kind == "regressor"
        assert np.array_equal(loaded.net.get_params(), net.get_params())
        assert np.array_equal(loaded.x_norm.mean, model.x_norm.mean)
        assert np.array_equal(loaded.extra["schedule_betas"], model.extra["schedule_betas"])
        assert loaded.extra["note"] == "x"
        assert loaded.seed == 55
        # Identical predictions bit for bit.
        x = Rng(1).normal((5, 3))
        a = model.net.forward(x, t=7)
        b = loaded.net.forward(x, t=7)
        assert np.array_equal(a, b)

    def test_predict_applies_normalization(self):
        spec = NetSpec(x_dim=1, hidden=(4,), out_dim=1, final_zero=True)
        net = FeedForwardNet.init(spec, Rng(0))
        net.biases[-1] = np.array([1.0])  # normalized output is 1
        model = TrainedModel(
            kind="regressor",
            net=net,
            x_norm=Normalizer(mean=np.array([5.0]), std=np.array([2.0])),
            y_norm=Normalizer(mean=np.array([10.0]), std=np.array([4.0])),
            seed=0,
        )
        assert model.predict(np.array([5.0]))[0] == pytest.approx(14.0)
