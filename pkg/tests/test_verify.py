"""Branch-and-bound certification, gradient attack, and delta sweeps."""

import numpy as np
import pytest
import torch

from opfproxy import bounds, mlp, verify
from opfproxy.grid import build_admittances

from helpers import two_bus


def identity_model(sizes, head, seed=0):
    return mlp.MlpModel(
        sizes, head,
        np.zeros(sizes[0]), np.ones(sizes[0]),
        np.zeros(sizes[-1]), np.ones(sizes[-1]),
        seed=seed,
    )


def constant_power_model(pg_value, vg_value=1.0):
    """Zero-weight power head on the two-bus system: output is constant."""
    model = identity_model([2, 3, 3, 3, 2], mlp.POWER_HEAD)
    with torch.no_grad():
        for layer in model.layers:
            layer.weight.zero_()
            layer.bias.zero_()
        model.out_center.copy_(
            torch.tensor([pg_value, vg_value], dtype=torch.float64)
        )
    return model


def linear_power_model(coeffs, p_offset, shift=50.0):
    """Power head exactly affine on positive boxes: pg = coeffs.x + p_offset.

    The bias shift keeps every hidden neuron active, so the network and
    its propagation bounds are both exact over the box.
    """
    c1, c2 = coeffs
    model = identity_model([2, 2, 2, 2, 2], mlp.POWER_HEAD)
    with torch.no_grad():
        eye = torch.eye(2, dtype=torch.float64)
        model.layers[0].weight.copy_(eye)
        model.layers[0].bias.fill_(shift)
        for k in (1, 2):
            model.layers[k].weight.copy_(eye)
            model.layers[k].bias.zero_()
        model.layers[3].weight.copy_(
            torch.tensor([[c1, c2], [0.0, 0.0]], dtype=torch.float64)
        )
        model.layers[3].bias.copy_(
            torch.tensor(
                [p_offset - shift * (c1 + c2), 1.0], dtype=torch.float64
            )
        )
    return model


@pytest.fixture(scope="module")
def two_bus_setup():
    grid = two_bus(q_load=0.2)
    net = mlp.NetTensors(grid, build_admittances(grid))
    box = bounds.Box.from_nominal(grid)
    return grid, net, box


@pytest.fixture(scope="module")
def net9(case9, adm9):
    return mlp.NetTensors(case9, adm9)


@pytest.fixture(scope="module")
def box9(case9):
    return bounds.Box.from_nominal(case9)


@pytest.fixture(scope="module")
def voltage9(case9, box9):
    nb = case9.n_bus
    out_center = np.concatenate([np.ones(nb), np.zeros(nb)])
    out_scale = np.full(2 * nb, 0.05)
    return mlp.MlpModel(
        [box9.dim, 6, 6, 6, 2 * nb],
        mlp.VOLTAGE_HEAD,
        box9.midpoint(), np.maximum(box9.width() / 2, 1e-3),
        out_center, out_scale,
        seed=4,
    )


# ---------------------------------------------------------------- attack


def test_attack_linear_model_reaches_corner(two_bus_setup):
    _, net, box = two_bus_setup
    model = linear_power_model((2.0, -1.0), p_offset=10.0)
    con = bounds.Constraint("pg", 0)
    # pg - p_max = 2 p - q, maximized at p = 0.5, q = 0.12.
    expected = 2.0 * box.upper[0] - box.lower[1]
    value, witness = verify.attack(model, box, net, con, restarts=3, seed=0)
    assert value == pytest.approx(expected, abs=1e-9)
    assert witness[0] == pytest.approx(box.upper[0], abs=1e-9)
    assert witness[1] == pytest.approx(box.lower[1], abs=1e-9)
    assert box.contains(witness)


def test_attack_safe_model_returns_zero(two_bus_setup):
    _, net, box = two_bus_setup
    model = constant_power_model(pg_value=5.0)
    value, witness = verify.attack(
        model, box, net, bounds.Constraint("pg", 0), restarts=2, seed=1
    )
    assert value == 0.0
    assert box.contains(witness)


def test_attack_validates_restarts(two_bus_setup):
    _, net, box = two_bus_setup
    model = constant_power_model(5.0)
    with pytest.raises(ValueError):
        verify.attack(model, box, net, bounds.Constraint("pg", 0), restarts=0)


# --------------------------------------------------------------- certify


def test_certify_constant_violation_closes_gap(two_bus_setup):
    _, net, box = two_bus_setup
    model = constant_power_model(pg_value=10.2)
    cert = verify.certify(model, box, net, bounds.Constraint("pg", 0))
    assert cert.upper_bound == pytest.approx(0.2, abs=1e-9)
    assert cert.lower_bound == pytest.approx(0.2, abs=1e-9)
    assert cert.gap <= 1e-9
    assert cert.status == verify.FALSIFIED
    assert cert.constraint_id == "pg[0]"


def test_certify_safe_model(two_bus_setup):
    _, net, box = two_bus_setup
    model = constant_power_model(pg_value=5.0)
    cert = verify.certify(model, box, net, bounds.Constraint("pg", 0))
    assert cert.status == verify.VERIFIED_SAFE
    assert cert.upper_bound == 0.0
    assert cert.lower_bound == 0.0
    assert cert.subdomains_explored == 1


def test_certify_linear_model_exact_at_root(two_bus_setup):
    _, net, box = two_bus_setup
    model = linear_power_model((2.0, -1.0), p_offset=10.0)
    cert = verify.certify(model, box, net, bounds.Constraint("pg", 0))
    expected = 2.0 * box.upper[0] - box.lower[1]
    # Bounds on a fully active network are exact, so no split is needed.
    assert cert.upper_bound == pytest.approx(expected, abs=1e-9)
    assert cert.lower_bound == pytest.approx(expected, abs=1e-9)
    assert cert.subdomains_explored == 1
    assert cert.status == verify.FALSIFIED


def _worst_vm_constraint(model, box, net):
    with torch.no_grad():
        families = bounds.violation_bounds(model, box, net)
    idx = int(torch.argmax(families["vm"]))
    return bounds.Constraint("vm", idx)


def test_certify_never_exceeds_root_bound(voltage9, box9, net9):
    con = _worst_vm_constraint(voltage9, box9, net9)
    with torch.no_grad():
        root_ub, _ = bounds.violation_upper_bound(voltage9, box9, net9, con)
    cert = verify.certify(
        voltage9, box9, net9, con, budget=verify.Budget(max_subdomains=40)
    )
    assert cert.upper_bound <= root_ub + 1e-12
    assert cert.lower_bound <= cert.upper_bound


def test_certify_upper_bound_improves_with_budget(voltage9, box9, net9):
    con = _worst_vm_constraint(voltage9, box9, net9)
    loose = verify.certify(
        voltage9, box9, net9, con, budget=verify.Budget(max_subdomains=3)
    )
    tight = verify.certify(
        voltage9, box9, net9, con, budget=verify.Budget(max_subdomains=60)
    )
    assert tight.upper_bound <= loose.upper_bound + 1e-12
    assert tight.lower_bound >= loose.lower_bound - 1e-12


def test_certify_witness_reproduces_lower_bound(voltage9, box9, net9):
    con = _worst_vm_constraint(voltage9, box9, net9)
    cert = verify.certify(
        voltage9, box9, net9, con, budget=verify.Budget(max_subdomains=20)
    )
    assert box9.contains(cert.witness)
    with torch.no_grad():
        replay = float(
            bounds.concrete_violation(
                voltage9, torch.tensor(cert.witness, dtype=torch.float64),
                net9, con,
            )
        )
    assert replay == pytest.approx(cert.lower_bound, abs=1e-8)


def test_certify_is_deterministic(voltage9, box9, net9):
    con = _worst_vm_constraint(voltage9, box9, net9)
    budget = verify.Budget(max_subdomains=25)
    a = verify.certify(voltage9, box9, net9, con, budget=budget, seed=7)
    b = verify.certify(voltage9, box9, net9, con, budget=budget, seed=7)
    assert a.upper_bound == b.upper_bound
    assert a.lower_bound == b.lower_bound
    assert a.status == b.status
    assert a.subdomains_explored == b.subdomains_explored
    np.testing.assert_array_equal(a.witness, b.witness)


def test_certify_budget_validation():
    with pytest.raises(ValueError):
        verify.Budget(max_subdomains=0)
    with pytest.raises(ValueError):
        verify.Budget(timeout=0.0)


def test_certify_sandwich_against_dense_grid(two_bus_setup):
    grid, net, box = two_bus_setup
    model = mlp.MlpModel(
        [2, 5, 5, 5, 2], mlp.POWER_HEAD,
        box.midpoint(), box.width() / 2,
        np.array([10.1, 1.0]), np.array([0.5, 0.05]),
        seed=1,
    )
    con = bounds.Constraint("pg", 0)
    ps = np.linspace(box.lower[0], box.upper[0], 1000)
    qs = np.linspace(box.lower[1], box.upper[1], 1000)
    pg_mesh, qg_mesh = np.meshgrid(ps, qs, indexing="ij")
    grid_x = torch.tensor(
        np.column_stack([pg_mesh.ravel(), qg_mesh.ravel()]), dtype=torch.float64
    )
    with torch.no_grad():
        dense = bounds.concrete_family_violations(model, grid_x, net)["pg"][:, 0]
    true_max = float(dense.max())
    assert true_max > 1e-3  # the toy model must actually violate
    cert = verify.certify(
        model, box, net, con, budget=verify.Budget(max_subdomains=4000)
    )
    # Sound sandwich: the certified upper bound dominates the dense-grid
    # maximum, the attack value stays below it, and the attack lands
    # within grid resolution of the true optimum.
    assert cert.upper_bound >= true_max - 1e-12
    assert cert.lower_bound <= cert.upper_bound
    assert cert.lower_bound == pytest.approx(true_max, abs=1e-4)
    assert cert.gap <= 1e-3


def test_certify_all_covers_every_constraint(two_bus_setup):
    _, net, box = two_bus_setup
    model = constant_power_model(5.0)
    certs = verify.certify_all(model, box, net)
    ids = [c.constraint_id for c in certs]
    assert ids == ["pg[0]", "vg[0]"]
    assert all(c.status == verify.VERIFIED_SAFE for c in certs)


def test_certificate_serialization(two_bus_setup):
    _, net, box = two_bus_setup
    model = constant_power_model(10.2)
    cert = verify.certify(model, box, net, bounds.Constraint("pg", 0))
    payload = verify.certificates_to_json([cert])
    assert payload[0]["constraint"] == "pg[0]"
    assert payload[0]["status"] == verify.FALSIFIED
    assert isinstance(payload[0]["witness"], list)


# ----------------------------------------------------------- delta sweep


def test_delta_sweep_properties(case9, voltage9, net9):
    rows = verify.delta_sweep(voltage9, case9, net9)
    families = ("pg", "qg", "vm", "flow", "balance")
    assert len(rows) == len(verify.DELTA_GRID) * len(families)
    by_family = {}
    for row in rows:
        by_family.setdefault(row["constraint"], []).append(row)
    for name in families:
        series = by_family[name]
        deltas = [r["delta"] for r in series]
        assert deltas == sorted(verify.DELTA_GRID)
        percents = [r["percent"] for r in series]
        assert percents[0] == 100.0
        for a, b in zip(percents, percents[1:]):
            assert b <= a + 1e-12
        values = [r["value"] for r in series]
        for a, b in zip(values, values[1:]):
            assert b <= a + 1e-12


def test_delta_sweep_matches_running_min(case9, voltage9, net9):
    rows = verify.delta_sweep(voltage9, case9, net9, deltas=(0.0, 0.1, 0.2))
    raw = {}
    for delta in (0.0, 0.1, 0.2):
        box = bounds.Box.from_nominal(case9, delta=delta)
        with torch.no_grad():
            fams = bounds.violation_bounds(voltage9, box, net9)
        raw[delta] = {name: float(v.max()) for name, v in fams.items()}
    running = {}
    for row in rows:
        name, delta = row["constraint"], row["delta"]
        expect = raw[delta][name]
        if name in running:
            expect = min(expect, running[name])
        running[name] = expect
        assert row["value"] == pytest.approx(expect, abs=1e-15)


def test_delta_sweep_requires_zero_delta(case9, voltage9, net9):
    with pytest.raises(ValueError):
        verify.delta_sweep(voltage9, case9, net9, deltas=(0.05, 0.1))


def test_sweep_csv_format(case9, voltage9, net9):
    rows = verify.delta_sweep(voltage9, case9, net9, deltas=(0.0, 0.1))
    text = verify.sweep_to_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "delta,constraint,value,percent"
    assert len(lines) == 1 + len(rows)
    first = lines[1].split(",")
    assert first[0] == "0.0"
    assert first[1] in ("pg", "qg", "vm", "flow", "balance")
