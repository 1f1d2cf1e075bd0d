"""MLP heads, loss terms, and the training loop."""

import math

import numpy as np
import pytest
import torch

from opfproxy import acpf, data, mlp
from opfproxy.acpf import VoltageState
from opfproxy.grid import build_admittances

from helpers import two_bus


def identity_model(sizes, head, seed=0):
    """Model with identity normalization maps."""
    return mlp.MlpModel(
        sizes, head,
        np.zeros(sizes[0]), np.ones(sizes[0]),
        np.zeros(sizes[-1]), np.ones(sizes[-1]),
        seed=seed,
    )


def zero_weights(model):
    with torch.no_grad():
        for layer in model.layers:
            layer.weight.zero_()
            layer.bias.zero_()
    return model


@pytest.fixture(scope="module")
def ds9(case9, adm9):
    scen = data.sample_scenarios(case9, 22, seed=3)
    return data.generate_labels(case9, adm9, scen)


@pytest.fixture(scope="module")
def net9(case9, adm9):
    return mlp.NetTensors(case9, adm9)


def test_loss_weights_validation():
    mlp.LossWeights()
    mlp.LossWeights(mse=0.0, wc=2.5)
    with pytest.raises(ValueError):
        mlp.LossWeights(pg=-0.1)
    with pytest.raises(ValueError):
        mlp.LossWeights(mse=math.nan)


def test_model_constructor_validation():
    with pytest.raises(ValueError):
        identity_model([2, 4, 4, 2], mlp.POWER_HEAD)  # only two hidden layers
    with pytest.raises(ValueError):
        identity_model([2, 4, 4, 4, 2], "mystery")
    with pytest.raises(ValueError):
        mlp.MlpModel([2, 4, 4, 4, 2], mlp.POWER_HEAD,
                     np.zeros(3), np.ones(3), np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        mlp.MlpModel([2, 4, 4, 4, 2], mlp.POWER_HEAD,
                     np.zeros(2), np.zeros(2), np.zeros(2), np.ones(2))


def test_forward_zero_weights_returns_offset():
    model = zero_weights(identity_model([3, 5, 5, 5, 4], mlp.VOLTAGE_HEAD))
    with torch.no_grad():
        model.out_center.copy_(torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=torch.float64))
    out = model(torch.zeros(7, 3, dtype=torch.float64))
    assert torch.equal(out, model.out_center.expand(7, 4))


def test_forward_hand_chain():
    # All-ones 1-1-1-1-1 chain acts as identity on positive inputs.
    model = zero_weights(identity_model([1, 1, 1, 1, 1], mlp.POWER_HEAD))
    with torch.no_grad():
        for layer in model.layers:
            layer.weight.fill_(1.0)
        model.out_center.fill_(3.0)
        model.out_scale.fill_(2.0)
    x = torch.tensor([[2.0]], dtype=torch.float64)
    with torch.no_grad():
        assert float(model(x)) == pytest.approx(3.0 + 2.0 * 2.0, abs=1e-15)
        # Negative inputs are clipped by the first ReLU.
        assert float(model(-x)) == pytest.approx(3.0, abs=1e-15)


def test_forward_linear_within_relu_region():
    torch.manual_seed(5)
    model = identity_model([4, 8, 8, 8, 3], mlp.VOLTAGE_HEAD, seed=5)
    x0 = torch.randn(1, 4, dtype=torch.float64)
    d = torch.randn(1, 4, dtype=torch.float64)
    h = 1e-4
    f0 = model(x0)
    f1 = model(x0 + h * d)
    fm = model(x0 + 0.5 * h * d)
    assert torch.allclose(fm, 0.5 * (f0 + f1), atol=1e-9)


def test_predict_applies_input_normalization():
    center = np.array([1.0, -2.0])
    scale = np.array([0.5, 4.0])
    model = mlp.MlpModel([2, 4, 4, 4, 2], mlp.POWER_HEAD,
                         center, scale, np.zeros(2), np.ones(2), seed=1)
    x = torch.tensor([[2.0, 6.0]], dtype=torch.float64)
    xn = (x - torch.tensor(center)) / torch.tensor(scale)
    assert torch.equal(model.predict(x), model(xn))


def test_penalty_relu_examples():
    z = torch.tensor([0.3, 0.7], dtype=torch.float64)
    assert float(mlp.penalty_relu(z, 0.0, 1.0)) == 0.0
    z = torch.tensor([1.1], dtype=torch.float64)
    assert float(mlp.penalty_relu(z, 0.0, 1.0)) == pytest.approx(0.01, abs=1e-15)
    z = torch.tensor([-0.2, 1.1], dtype=torch.float64)
    assert float(mlp.penalty_relu(z, 0.0, 1.0)) == pytest.approx(0.05, abs=1e-15)


def test_penalty_relu_gradient_matches_fd():
    z = torch.tensor([1.5], dtype=torch.float64, requires_grad=True)
    value = mlp.penalty_relu(z, 0.0, 1.0)
    value.backward()
    h = 1e-6
    fd = (float(mlp.penalty_relu(z.detach() + h, 0.0, 1.0))
          - float(mlp.penalty_relu(z.detach() - h, 0.0, 1.0))) / (2 * h)
    assert abs(float(z.grad) - fd) < 1e-6


def test_loss_head_mismatch(net9):
    power = identity_model([6, 4, 4, 4, 6], mlp.POWER_HEAD)
    voltage = identity_model([6, 4, 4, 4, 18], mlp.VOLTAGE_HEAD)
    batch = (torch.zeros(2, 6, dtype=torch.float64),
             torch.zeros(2, 6, dtype=torch.float64))
    with pytest.raises(mlp.HeadMismatch):
        mlp.loss_power(voltage, batch, net9, mlp.LossWeights())
    with pytest.raises(mlp.HeadMismatch):
        mlp.loss_voltage(power, batch, net9, mlp.LossWeights())


def test_loss_power_hand_two_bus():
    model = two_bus()
    net = mlp.NetTensors(model, build_admittances(model))
    # Constant predictor outputs p_g = 10.2 (0.2 above p_max) and
    # V_g = 1.15 (0.05 above v_max).
    proxy = zero_weights(identity_model([2, 3, 3, 3, 2], mlp.POWER_HEAD))
    with torch.no_grad():
        proxy.out_center.copy_(torch.tensor([10.2, 1.15], dtype=torch.float64))
    x = torch.tensor([[0.5, 0.0]], dtype=torch.float64)
    y = torch.tensor([[10.0, 1.1]], dtype=torch.float64)
    weights = mlp.LossWeights(mse=1.0, pg=2.0, vg=3.0)
    with torch.no_grad():
        total, terms = mlp.loss_power(proxy, (x, y), net, weights)
    assert float(terms["mse"]) == pytest.approx((0.2**2 + 0.05**2) / 2, abs=1e-15)
    assert float(terms["pg"]) == pytest.approx(0.04, abs=1e-15)
    assert float(terms["vg"]) == pytest.approx(0.0025, abs=1e-15)
    assert float(total) == pytest.approx(0.02125 + 2 * 0.04 + 3 * 0.0025, abs=1e-14)


def test_loss_power_zero_for_perfect_feasible_prediction():
    model = two_bus()
    net = mlp.NetTensors(model, build_admittances(model))
    proxy = zero_weights(identity_model([2, 3, 3, 3, 2], mlp.POWER_HEAD))
    with torch.no_grad():
        proxy.out_center.copy_(torch.tensor([5.0, 1.0]))  # inside both boxes
    x = torch.zeros(3, 2, dtype=torch.float64)
    y = torch.tensor([5.0, 1.0], dtype=torch.float64).expand(3, 2)
    with torch.no_grad():
        total, _ = mlp.loss_power(proxy, (x, y), net, mlp.LossWeights(pg=2.0, vg=2.0))
        assert float(total) == 0.0
        # All-zero weights give zero loss even for violating predictions.
        proxy.out_center.copy_(torch.tensor([99.0, 2.0]))
        total, _ = mlp.loss_power(proxy, (x, y), net, mlp.LossWeights(mse=0.0))
        assert float(total) == 0.0


def test_loss_voltage_exact_labels_have_tiny_penalties(ds9, net9):
    x_all, y_all = mlp.split_tensors(ds9, mlp.VOLTAGE_HEAD)
    weights = mlp.LossWeights(mse=1.0, pg=1.0, qg=1.0, vm=1.0, flow=1.0, balance=1.0)
    proxy = zero_weights(identity_model([6, 4, 4, 4, 18], mlp.VOLTAGE_HEAD))
    for k in range(3):
        with torch.no_grad():
            proxy.out_center.copy_(y_all[k])
            batch = (x_all[k : k + 1], y_all[k : k + 1])
            total, terms = mlp.loss_voltage(proxy, batch, net9, weights)
        assert float(terms["mse"]) == 0.0
        for name in ("pg", "qg", "vm", "flow", "balance"):
            assert float(terms[name]) <= 1e-10, name
        assert float(total) <= 6e-10


def test_loss_voltage_gradient_matches_fd(ds9, net9):
    proxy = mlp.build_model(ds9, mlp.VOLTAGE_HEAD, hidden=6, seed=2)
    x, y = mlp.split_tensors(ds9, mlp.VOLTAGE_HEAD, "train")
    batch = (x[:4], y[:4])
    weights = mlp.LossWeights(mse=1.0, pg=0.7, qg=0.6, vm=1.3, flow=0.9, balance=0.4)
    total, _ = mlp.loss_voltage(proxy, batch, net9, weights)
    total.backward()
    rng = np.random.default_rng(0)
    params = list(proxy.layers.parameters())
    h = 1e-6
    for _ in range(10):
        p = params[rng.integers(len(params))]
        flat = p.detach().view(-1)
        j = int(rng.integers(flat.numel()))
        grad = float(p.grad.view(-1)[j])
        with torch.no_grad():
            flat[j] += h
            up, _ = mlp.loss_voltage(proxy, batch, net9, weights)
            flat[j] -= 2 * h
            dn, _ = mlp.loss_voltage(proxy, batch, net9, weights)
            flat[j] += h
        fd = (float(up) - float(dn)) / (2 * h)
        denom = max(abs(fd), abs(grad), 1e-8)
        assert abs(grad - fd) / denom < 1e-4


@torch.no_grad()
def test_loss_decomposition_invariant(ds9, net9):
    x, y = mlp.split_tensors(ds9, mlp.VOLTAGE_HEAD, "train")
    proxy = mlp.build_model(ds9, mlp.VOLTAGE_HEAD, hidden=5, seed=9)
    weights = mlp.LossWeights(mse=0.3, pg=1.7, qg=0.2, vm=2.1, flow=0.8, balance=1.1)
    total, terms = mlp.loss_voltage(proxy, (x[:5], y[:5]), net9, weights)
    recombined = (weights.mse * terms["mse"] + weights.pg * terms["pg"]
                  + weights.qg * terms["qg"] + weights.vm * terms["vm"]
                  + weights.flow * terms["flow"] + weights.balance * terms["balance"])
    assert abs(float(total) - float(recombined)) <= 1e-10

    xp, yp = mlp.split_tensors(ds9, mlp.POWER_HEAD, "train")
    power = mlp.build_model(ds9, mlp.POWER_HEAD, hidden=5, seed=9)
    pw = mlp.LossWeights(mse=0.5, pg=2.0, vg=3.0)
    total, terms = mlp.loss_power(power, (xp[:5], yp[:5]), net9, pw)
    recombined = (pw.mse * terms["mse"] + pw.pg * terms["pg"] + pw.vg * terms["vg"])
    assert abs(float(total) - float(recombined)) <= 1e-10


def test_net_tensors_match_reference_physics(case9, adm9, net9):
    rng = np.random.default_rng(4)
    v = rng.uniform(-1.1, 1.1, size=(8, 2 * case9.n_bus))
    vt = torch.tensor(v, dtype=torch.float64)
    p_t, q_t = net9.injections(vt)
    flows_t = net9.branch_magnitudes(vt)
    vm_t = net9.voltage_magnitudes(vt)
    for k in range(8):
        state = VoltageState(v=v[k].copy())
        p, q = acpf.bus_injections(adm9, state)
        i_from, i_to = acpf.branch_current_magnitudes(adm9, state)
        np.testing.assert_allclose(p_t[k].numpy(), p, atol=1e-12)
        np.testing.assert_allclose(q_t[k].numpy(), q, atol=1e-12)
        np.testing.assert_allclose(
            flows_t[k].numpy(), np.concatenate([i_from, i_to]), atol=1e-12)
        np.testing.assert_allclose(vm_t[k].numpy(), state.magnitudes(), atol=1e-12)


def test_scatter_demand_maps_loads_to_buses(case9, net9):
    d = torch.arange(1.0, 1.0 + case9.n_load, dtype=torch.float64).reshape(1, -1)
    out = net9.scatter_demand(d)
    expect = np.zeros(case9.n_bus)
    for k, pos in enumerate(case9.load_bus_positions()):
        expect[pos] += 1.0 + k
    np.testing.assert_allclose(out[0].numpy(), expect, atol=0)


def test_build_model_normalization_from_train_split(ds9, case9):
    proxy = mlp.build_model(ds9, mlp.VOLTAGE_HEAD, hidden=4, seed=0)
    rows = ds9.scenarios.indices("train")
    x = mlp.dataset_inputs(ds9)[rows]
    np.testing.assert_allclose(proxy.in_center.numpy(), x.mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(proxy.in_scale.numpy(), x.std(axis=0), atol=1e-15)
    # The slack imaginary-voltage target is constant zero; its scale
    # falls back to one so the map stays invertible.
    slack_col = case9.n_bus + case9.slack_position()
    assert float(proxy.out_scale[slack_col]) == 1.0
    assert float(proxy.out_center[slack_col]) == 0.0


def test_train_zero_epochs_returns_model_unchanged(ds9, net9):
    proxy = mlp.build_model(ds9, mlp.POWER_HEAD, hidden=4, seed=1)
    before = {k: v.clone() for k, v in proxy.state_dict().items()}
    history = mlp.train(proxy, ds9, net9, mlp.TrainConfig(epochs=0))
    assert history == []
    after = proxy.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_train_deterministic(ds9, net9):
    config = mlp.TrainConfig(epochs=8, batch_size=8, lr=1e-3, seed=11)
    runs = []
    for _ in range(2):
        proxy = mlp.build_model(ds9, mlp.POWER_HEAD, hidden=6, seed=11)
        history = mlp.train(proxy, ds9, net9, config)
        runs.append((proxy, history))
    a, b = runs
    assert a[1] == b[1]
    for pa, pb in zip(a[0].parameters(), b[0].parameters()):
        assert torch.equal(pa, pb)


def test_pruning_counts_and_freeze(ds9, net9):
    proxy = mlp.build_model(ds9, mlp.POWER_HEAD, hidden=6, seed=4)
    config = mlp.TrainConfig(epochs=6, batch_size=8, lr=1e-3, seed=4, prune_epoch=3)
    mlp.train(proxy, ds9, net9, config)
    for k, mask in enumerate(proxy.prune_masks()):
        weight = proxy.layers[k].weight.detach()
        expect = math.ceil(0.5 * weight.numel())
        assert int((mask == 0).sum()) == expect
        assert torch.all(weight[mask == 0] == 0.0)
        # Surviving weights kept training after the prune epoch.
        assert torch.any(weight[mask == 1] != 0.0)


def test_train_loss_trend(ds9, net9):
    proxy = mlp.build_model(ds9, mlp.POWER_HEAD, hidden=8, seed=6)
    config = mlp.TrainConfig(epochs=120, batch_size=8, lr=1e-3, seed=6,
                             prune_epoch=60)
    history = mlp.train(proxy, ds9, net9, config)
    losses = [row["train_loss"] for row in history]
    window = 50
    wins = sum(losses[i + window] <= losses[i]
               for i in range(len(losses) - window))
    assert wins / (len(losses) - window) >= 0.9
    assert all(math.isfinite(row["val_loss"]) for row in history)


def test_train_divergence_reports_epoch(ds9, net9):
    proxy = mlp.build_model(ds9, mlp.POWER_HEAD, hidden=4, seed=2)
    with torch.no_grad():
        proxy.layers[0].weight[0, 0] = math.nan
    with pytest.raises(mlp.Divergence) as err:
        mlp.train(proxy, ds9, net9, mlp.TrainConfig(epochs=3, batch_size=8))
    assert err.value.epoch == 1


def test_wc_hook_takes_extra_step_and_is_logged(ds9, net9):
    calls = []

    def hook(model):
        calls.append(1)
        return (model.layers[0].weight**2).sum()

    base = mlp.build_model(ds9, mlp.POWER_HEAD, hidden=4, seed=7)
    with_wc = mlp.build_model(ds9, mlp.POWER_HEAD, hidden=4, seed=7)
    plain_cfg = mlp.TrainConfig(epochs=3, batch_size=8, lr=1e-3, seed=7)
    wc_cfg = mlp.TrainConfig(epochs=3, batch_size=8, lr=1e-3, seed=7,
                             weights=mlp.LossWeights(wc=0.5), wc_hook=hook)
    hist_plain = mlp.train(base, ds9, net9, plain_cfg)
    hist_wc = mlp.train(with_wc, ds9, net9, wc_cfg)
    assert len(calls) == 3
    assert all(row["wc_penalty"] is None for row in hist_plain)
    assert all(row["wc_penalty"] is not None for row in hist_wc)
    assert not torch.equal(base.layers[0].weight, with_wc.layers[0].weight)


def test_history_csv_format():
    history = [
        {"epoch": 1, "train_loss": 0.5, "val_loss": 0.25, "wc_penalty": None},
        {"epoch": 2, "train_loss": 0.125, "val_loss": 0.1, "wc_penalty": 0.75},
    ]
    text = mlp.history_to_csv(history)
    lines = text.splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,wc_penalty"
    assert lines[1] == "1,0.5,0.25,"
    assert lines[2] == "2,0.125,0.1,0.75"


def test_prediction_rmse_against_numpy(ds9, net9):
    proxy = zero_weights(mlp.build_model(ds9, mlp.POWER_HEAD, hidden=4, seed=0))
    with torch.no_grad():
        proxy.out_center.zero_()
    rows = ds9.scenarios.indices("test")
    y = mlp.dataset_targets(ds9, mlp.POWER_HEAD)[rows]
    expect = float(np.sqrt(np.mean(y**2)))
    assert mlp.prediction_rmse(proxy, ds9, "test") == pytest.approx(expect, rel=1e-12)


def test_save_load_roundtrip(tmp_path, ds9, net9):
    proxy = mlp.build_model(ds9, mlp.VOLTAGE_HEAD, hidden=5, seed=3)
    config = mlp.TrainConfig(epochs=3, batch_size=8, lr=1e-3, seed=3, prune_epoch=2)
    mlp.train(proxy, ds9, net9, config)
    path = tmp_path / "model.json"
    mlp.save_model(proxy, path, config_hash="abc123")
    loaded = mlp.load_model(path)
    assert loaded.head == proxy.head
    assert loaded.sizes == proxy.sizes
    assert loaded.config_hash == "abc123"
    for a, b in zip(proxy.layers, loaded.layers):
        assert torch.equal(a.weight, b.weight)
        assert torch.equal(a.bias, b.bias)
    for a, b in zip(proxy.prune_masks(), loaded.prune_masks()):
        assert torch.equal(a, b)
    x = torch.tensor(mlp.dataset_inputs(ds9)[:4], dtype=torch.float64)
    assert torch.equal(proxy.predict(x), loaded.predict(x))


def test_load_rejects_other_files(tmp_path):
    path = tmp_path / "not_model.json"
    path.write_text('{"format": "something-else"}\n')
    with pytest.raises(ValueError):
        mlp.load_model(path)


def test_training_defaults_match_reference_configuration():
    assert mlp.DEFAULT_HIDDEN == 25
    assert mlp.DEFAULT_BATCH == 25
    assert mlp.DEFAULT_LR == 5e-4
    assert mlp.DEFAULT_EPOCHS == 1000
    assert mlp.PRUNE_EPOCH == 500
    assert mlp.PRUNE_FRACTION == 0.5
    config = mlp.TrainConfig()
    assert (config.batch_size, config.lr, config.epochs) == (25, 5e-4, 1000)
