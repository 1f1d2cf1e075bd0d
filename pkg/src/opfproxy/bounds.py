"""Sound linear bounds for MLP outputs and derived grid quantities.

Backward bound propagation over an input box gives affine envelopes of
the network outputs; linear maps such as bus and branch currents ride
along as extra output rows.  Magnitudes are enclosed with max/min
formulas, bilinear injections with interval products of the convex
bilinear hull.  The composition yields certified upper bounds on every
operational constraint violation, differentiable in the model weights
so the total can be penalized during training.

All certified quantities are upper bounds in the soundness direction:
over-enclosures feed upper-limit checks, under-enclosures lower-limit
checks.  Branch-flow violations are relative (magnitude over limit
minus one); balance violations are squared power mismatches at buses
without a generator; the remaining families are plain per-unit bound
excesses.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch

from .data import LOAD_HIGH, LOAD_LOW
from .grid import GridModel
from .mlp import POWER_HEAD, VOLTAGE_HEAD, LossWeights, MlpModel, NetTensors

_SQRT2 = math.sqrt(2.0)
_DELTA_MAX = 0.2

POWER_FAMILIES = ("pg", "vg")
VOLTAGE_FAMILIES = ("pg", "qg", "vm", "flow", "balance")


@dataclasses.dataclass(frozen=True)
class Box:
    """Axis-aligned input region in physical units (stacked p_d, q_d)."""

    lower: np.ndarray
    upper: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("box bounds must be matching vectors")
        if np.any(lower > upper):
            raise ValueError("box lower bound exceeds upper bound")
        if not 0.0 <= self.delta <= _DELTA_MAX:
            raise ValueError(f"delta must be in [0, {_DELTA_MAX}]")

    @staticmethod
    def from_nominal(
        model: GridModel,
        delta: float = 0.0,
        low: float = LOAD_LOW,
        high: float = LOAD_HIGH,
    ) -> "Box":
        """Demand box (low+delta)*nominal ... (high-delta)*nominal.

        Handles negative nominal demands by orienting each coordinate.
        """
        p_nom, q_nom = model.nominal_demand()
        nominal = np.concatenate([p_nom, q_nom])
        a = (low + delta) * nominal
        b = (high - delta) * nominal
        return Box(np.minimum(a, b), np.maximum(a, b), delta=delta)

    @property
    def dim(self) -> int:
        return self.lower.size

    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def split(self, coord: int) -> tuple["Box", "Box"]:
        """Bisect along one coordinate."""
        mid = 0.5 * (self.lower[coord] + self.upper[coord])
        left_hi = self.upper.copy()
        left_hi[coord] = mid
        right_lo = self.lower.copy()
        right_lo[coord] = mid
        return (Box(self.lower.copy(), left_hi, delta=self.delta),
                Box(right_lo, self.upper.copy(), delta=self.delta))


@dataclasses.dataclass
class AffineBounds:
    """Affine envelope a_lower x + b_lower <= q(x) <= a_upper x + b_upper
    over one box, with the concretized interval [lower, upper]."""

    a_lower: torch.Tensor
    b_lower: torch.Tensor
    a_upper: torch.Tensor
    b_upper: torch.Tensor
    lower: torch.Tensor
    upper: torch.Tensor


def _box_tensors(box: Box) -> tuple[torch.Tensor, torch.Tensor]:
    dt = torch.float64
    return torch.tensor(box.lower, dtype=dt), torch.tensor(box.upper, dtype=dt)


def _folded_layers(model: MlpModel) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Layer weights with the normalization maps absorbed, so the
    propagated input lives in physical units and the output is physical."""
    layers = []
    last = len(model.layers) - 1
    for k, lin in enumerate(model.layers):
        w, b = lin.weight, lin.bias
        if k == 0:
            w = w / model.in_scale.unsqueeze(0)
            b = b - w @ model.in_center
        if k == last:
            w = model.out_scale.unsqueeze(1) * w
            b = model.out_center + model.out_scale * b
        layers.append((w, b))
    return layers


def _concrete_upper(a: torch.Tensor, b: torch.Tensor, lo, hi) -> torch.Tensor:
    return b + a.clamp(min=0) @ hi + a.clamp(max=0) @ lo


def _concrete_lower(a: torch.Tensor, b: torch.Tensor, lo, hi) -> torch.Tensor:
    return b + a.clamp(min=0) @ lo + a.clamp(max=0) @ hi


def _relu_relaxation(l: torch.Tensor, u: torch.Tensor):
    """Per-neuron envelope parameters for h = relu(z), z in [l, u].

    The active/inactive/unstable split uses detached bounds so the
    branch choice is a constant at the evaluation point; the slope and
    intercept values stay differentiable.
    """
    ld, ud = l.detach(), u.detach()
    active = ld >= 0
    unstable = (ld < 0) & (ud > 0)
    denom = (u - l).clamp(min=1e-12)
    one = torch.ones_like(l)
    zero = torch.zeros_like(l)
    alpha_upper = torch.where(unstable, u / denom, torch.where(active, one, zero))
    beta_upper = torch.where(unstable, -l * u / denom, zero)
    # Lower envelope slope: zero when the negative side dominates.
    pick_one = ud > ld.abs()
    alpha_lower = torch.where(
        unstable, torch.where(pick_one, one, zero), torch.where(active, one, zero)
    )
    return alpha_upper, beta_upper, alpha_lower


def _backward(layers, relu_bounds, c_mat: torch.Tensor):
    """Affine upper/lower envelope of c_mat @ chain(x) over the chain of
    ``layers`` with ReLU junctions bounded by ``relu_bounds``."""
    w, b = layers[-1]
    a_u = c_mat @ w
    b_u = c_mat @ b
    a_l = a_u
    b_l = b_u
    for k in range(len(layers) - 2, -1, -1):
        alpha_u, beta_u, alpha_l = _relu_relaxation(*relu_bounds[k])
        pos, neg = a_u.clamp(min=0), a_u.clamp(max=0)
        b_u = b_u + pos @ beta_u
        a_u = pos * alpha_u + neg * alpha_l
        pos, neg = a_l.clamp(min=0), a_l.clamp(max=0)
        b_l = b_l + neg @ beta_u
        a_l = pos * alpha_l + neg * alpha_u
        w, b = layers[k]
        b_u = b_u + a_u @ b
        b_l = b_l + a_l @ b
        a_u = a_u @ w
        a_l = a_l @ w
    return a_u, b_u, a_l, b_l


def _interval_intermediates(layers, lo, hi):
    """Pre-activation bounds by forward interval arithmetic (fast mode)."""
    mid = 0.5 * (lo + hi)
    rad = 0.5 * (hi - lo)
    bounds = []
    for w, b in layers[:-1]:
        z_mid = w @ mid + b
        z_rad = w.abs() @ rad
        bounds.append((z_mid - z_rad, z_mid + z_rad))
        post_lo = (z_mid - z_rad).clamp(min=0)
        post_hi = (z_mid + z_rad).clamp(min=0)
        mid = 0.5 * (post_lo + post_hi)
        rad = 0.5 * (post_hi - post_lo)
    return bounds


def _crown_intermediates(layers, lo, hi):
    """Pre-activation bounds by recursive backward passes (tight mode)."""
    bounds = []
    for k in range(len(layers) - 1):
        width = layers[k][0].shape[0]
        eye = torch.eye(width, dtype=torch.float64)
        a_u, b_u, a_l, b_l = _backward(layers[: k + 1], bounds, eye)
        bounds.append(
            (_concrete_lower(a_l, b_l, lo, hi), _concrete_upper(a_u, b_u, lo, hi))
        )
    return bounds


def crown_bounds(
    model: MlpModel,
    box: Box,
    out_spec: torch.Tensor | None = None,
    tight: bool = True,
) -> AffineBounds:
    """Sound affine envelope of ``out_spec @ model(x)`` over the box.

    ``out_spec`` rows are linear functionals of the physical model
    output (identity when omitted); linear post-maps such as branch
    currents are propagated as extra output rows this way.  ``tight``
    selects recursive backward intermediate bounds; fast mode uses
    interval arithmetic instead.
    """
    if box.dim != model.in_dim:
        raise ValueError("box dimension does not match model input")
    lo, hi = _box_tensors(box)
    layers = _folded_layers(model)
    if tight:
        inter = _crown_intermediates(layers, lo, hi)
    else:
        inter = _interval_intermediates(layers, lo, hi)
    if out_spec is None:
        out_spec = torch.eye(model.out_dim, dtype=torch.float64)
    a_u, b_u, a_l, b_l = _backward(layers, inter, out_spec)
    return AffineBounds(
        a_lower=a_l,
        b_lower=b_l,
        a_upper=a_u,
        b_upper=b_u,
        lower=_concrete_lower(a_l, b_l, lo, hi),
        upper=_concrete_upper(a_u, b_u, lo, hi),
    )


def _abs_interval(lo: torch.Tensor, hi: torch.Tensor):
    """Interval of |x| for x in [lo, hi]."""
    straddles = (lo <= 0) & (hi >= 0)
    m = torch.where(straddles, torch.zeros_like(lo), torch.minimum(lo.abs(), hi.abs()))
    return m, torch.maximum(lo.abs(), hi.abs())


def _l_over(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.maximum(a, b) + (_SQRT2 - 1.0) * torch.minimum(a, b)


def _l_under(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.maximum(torch.maximum(a, b), (a + b) / _SQRT2)


def norm_enclosure(xr_iv, xi_iv, mode: str):
    """Interval on the magnitude sqrt(xr^2 + xi^2) from component intervals.

    Over mode evaluates the guaranteed over-approximation (its upper end
    bounds the magnitude maximum); under mode the guaranteed
    under-approximation (its lower end bounds the magnitude minimum).
    Built from max/min/abs only, so the result is piecewise linear in
    the interval ends.
    """
    r_lo, r_hi = xr_iv
    i_lo, i_hi = xi_iv
    m_r, big_r = _abs_interval(torch.as_tensor(r_lo, dtype=torch.float64),
                               torch.as_tensor(r_hi, dtype=torch.float64))
    m_i, big_i = _abs_interval(torch.as_tensor(i_lo, dtype=torch.float64),
                               torch.as_tensor(i_hi, dtype=torch.float64))
    if mode == "over":
        return _l_over(m_r, m_i), _l_over(big_r, big_i)
    if mode == "under":
        return _l_under(m_r, m_i), _l_under(big_r, big_i)
    raise ValueError(f"mode must be 'over' or 'under', got {mode!r}")


def mccormick_bilinear(x_iv, y_iv):
    """Interval on x*y over the box; the bilinear hull concretized over a
    box equals the exact interval product."""
    x_lo = torch.as_tensor(x_iv[0], dtype=torch.float64)
    x_hi = torch.as_tensor(x_iv[1], dtype=torch.float64)
    y_lo = torch.as_tensor(y_iv[0], dtype=torch.float64)
    y_hi = torch.as_tensor(y_iv[1], dtype=torch.float64)
    products = torch.stack(
        [x_lo * y_lo, x_lo * y_hi, x_hi * y_lo, x_hi * y_hi], dim=0
    )
    return products.amin(dim=0), products.amax(dim=0)


def mccormick_hull_at(x_iv, y_iv, x: float, y: float) -> tuple[float, float]:
    """Evaluate the four bilinear hull planes at one point (x, y)."""
    x_lo, x_hi = float(x_iv[0]), float(x_iv[1])
    y_lo, y_hi = float(y_iv[0]), float(y_iv[1])
    lo = max(x_lo * y + y_lo * x - x_lo * y_lo, x_hi * y + y_hi * x - x_hi * y_hi)
    hi = min(x_hi * y + y_lo * x - x_hi * y_lo, x_lo * y + y_hi * x - x_lo * y_hi)
    return lo, hi


def _iv_add(a, b):
    return a[0] + b[0], a[1] + b[1]


def _iv_sub(a, b):
    return a[0] - b[1], a[1] - b[0]


def _square_upper(lo: torch.Tensor, hi: torch.Tensor) -> torch.Tensor:
    return torch.maximum(lo * lo, hi * hi)


def _bus_demand_intervals(box: Box, net: NetTensors):
    """Per-bus demand intervals implied by the input box (constants)."""
    nd = net.n_load
    lo, hi = _box_tensors(box)
    buckets = []
    for col_lo, col_hi in ((lo[:nd], hi[:nd]), (lo[nd:], hi[nd:])):
        b_lo = torch.zeros(net.n_bus, dtype=torch.float64)
        b_hi = torch.zeros(net.n_bus, dtype=torch.float64)
        b_lo.index_add_(0, net.load_pos, col_lo)
        b_hi.index_add_(0, net.load_pos, col_hi)
        buckets.append((b_lo, b_hi))
    return buckets[0], buckets[1]


def _power_family_bounds(model, box, net, tight):
    ab = crown_bounds(model, box, tight=tight)
    ng = net.n_gen
    pg_iv = (ab.lower[:ng], ab.upper[:ng])
    vg_iv = (ab.lower[ng:], ab.upper[ng:])
    nu_pg = torch.maximum(
        torch.relu(pg_iv[1] - net.p_max), torch.relu(net.p_min - pg_iv[0])
    )
    v_lo = net.v_min[net.gen_pos]
    v_hi = net.v_max[net.gen_pos]
    nu_vg = torch.maximum(torch.relu(vg_iv[1] - v_hi), torch.relu(v_lo - vg_iv[0]))
    return {"pg": nu_pg, "vg": nu_vg}


def _voltage_family_bounds(model, box, net, tight):
    nb, nl = net.n_bus, net.n_branch
    eye = torch.eye(2 * nb, dtype=torch.float64)
    out_spec = torch.cat([eye, net.y_bus_rect, net.y_l_rect], dim=0)
    ab = crown_bounds(model, box, out_spec=out_spec, tight=tight)
    v_iv = (ab.lower[: 2 * nb], ab.upper[: 2 * nb])
    ib_iv = (ab.lower[2 * nb : 4 * nb], ab.upper[2 * nb : 4 * nb])
    il_iv = (ab.lower[4 * nb :], ab.upper[4 * nb :])

    vr_iv = (v_iv[0][:nb], v_iv[1][:nb])
    vi_iv = (v_iv[0][nb:], v_iv[1][nb:])
    ir_iv = (ib_iv[0][:nb], ib_iv[1][:nb])
    ii_iv = (ib_iv[0][nb:], ib_iv[1][nb:])

    # Voltage magnitudes: over-enclosure against the upper limit,
    # under-enclosure against the lower limit.
    _, vm_hi = norm_enclosure(vr_iv, vi_iv, "over")
    vm_lo, _ = norm_enclosure(vr_iv, vi_iv, "under")
    nu_vm = torch.maximum(torch.relu(vm_hi - net.v_max), torch.relu(net.v_min - vm_lo))

    # Branch current magnitudes, from ends then to ends, relative excess.
    fr_iv = (torch.cat([il_iv[0][:nl], il_iv[0][2 * nl : 3 * nl]]),
             torch.cat([il_iv[1][:nl], il_iv[1][2 * nl : 3 * nl]]))
    fi_iv = (torch.cat([il_iv[0][nl : 2 * nl], il_iv[0][3 * nl :]]),
             torch.cat([il_iv[1][nl : 2 * nl], il_iv[1][3 * nl :]]))
    _, mag_hi = norm_enclosure(fr_iv, fi_iv, "over")
    limit = torch.cat([net.i_max, net.i_max])
    nu_flow = torch.relu(mag_hi / limit - 1.0)

    # Bilinear injections for every bus at once.
    p_iv = _iv_add(mccormick_bilinear(vr_iv, ir_iv), mccormick_bilinear(vi_iv, ii_iv))
    q_iv = _iv_sub(mccormick_bilinear(vi_iv, ir_iv), mccormick_bilinear(vr_iv, ii_iv))
    pd_iv, qd_iv = _bus_demand_intervals(box, net)
    pg_iv = _iv_add(p_iv, pd_iv)
    qg_iv = _iv_add(q_iv, qd_iv)

    gp = net.gen_pos
    nu_pg = torch.maximum(
        torch.relu(pg_iv[1][gp] - net.p_max), torch.relu(net.p_min - pg_iv[0][gp])
    )
    nu_qg = torch.maximum(
        torch.relu(qg_iv[1][gp] - net.q_max), torch.relu(net.q_min - qg_iv[0][gp])
    )

    npos = net.nongen_pos
    nu_bal = (
        _square_upper(pg_iv[0][npos], pg_iv[1][npos])
        + _square_upper(qg_iv[0][npos], qg_iv[1][npos])
    )
    return {"pg": nu_pg, "qg": nu_qg, "vm": nu_vm, "flow": nu_flow, "balance": nu_bal}


def violation_bounds(
    model: MlpModel, box: Box, net: NetTensors, tight: bool = True
) -> dict[str, torch.Tensor]:
    """Certified per-constraint worst-case violation upper bounds,
    grouped by family; differentiable in the model weights."""
    if model.head == POWER_HEAD:
        return _power_family_bounds(model, box, net, tight)
    return _voltage_family_bounds(model, box, net, tight)


def worst_case_penalty(
    model: MlpModel,
    box: Box,
    net: NetTensors,
    weights: LossWeights,
    tight: bool = True,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted total of all certified violation bounds plus the
    per-constraint values."""
    families = violation_bounds(model, box, net, tight=tight)
    total = sum(v.sum() for v in families.values())
    return weights.wc * total, families


def make_wc_hook(box: Box, net: NetTensors, tight: bool = True):
    """Training hook returning the unweighted certified violation total."""

    def hook(model: MlpModel) -> torch.Tensor:
        families = violation_bounds(model, box, net, tight=tight)
        return sum(v.sum() for v in families.values())

    return hook


@dataclasses.dataclass(frozen=True)
class Constraint:
    """One operational constraint: family tag plus position index.

    Indices: pg/qg/vg by generator position, vm by bus position, flow by
    branch end (from ends then to ends), balance by position in the
    non-generator bus list.
    """

    family: str
    index: int

    @property
    def id(self) -> str:
        return f"{self.family}[{self.index}]"


def list_constraints(model: MlpModel, net: NetTensors) -> list[Constraint]:
    items = []
    if model.head == POWER_HEAD:
        for fam in POWER_FAMILIES:
            items.extend(Constraint(fam, g) for g in range(net.n_gen))
        return items
    counts = {
        "pg": net.n_gen,
        "qg": net.n_gen,
        "vm": net.n_bus,
        "flow": 2 * net.n_branch,
        "balance": int(net.nongen_pos.numel()),
    }
    for fam in VOLTAGE_FAMILIES:
        items.extend(Constraint(fam, k) for k in range(counts[fam]))
    return items


def _branch_component_rows(net: NetTensors, end: int) -> tuple[int, int]:
    """Row indices of (real, imaginary) current components for one branch
    end inside the stacked y_l_rect layout."""
    nl = net.n_branch
    if end < nl:
        return end, nl + end
    return nl + end, 2 * nl + end  # equals 2nl+(end-nl), 3nl+(end-nl)


def violation_upper_bound(
    model: MlpModel,
    box: Box,
    net: NetTensors,
    constraint: Constraint,
    tight: bool = True,
) -> tuple[float, np.ndarray]:
    """Certified upper bound on one constraint's violation over the box,
    plus per-input sensitivity magnitudes used for branching."""
    fam, idx = constraint.family, constraint.index
    nb = net.n_bus
    if model.head == POWER_HEAD:
        if fam not in POWER_FAMILIES:
            raise ValueError(f"{fam} not certified for the power head")
        row = idx if fam == "pg" else net.n_gen + idx
        spec = torch.zeros(1, model.out_dim, dtype=torch.float64)
        spec[0, row] = 1.0
        ab = crown_bounds(model, box, out_spec=spec, tight=tight)
        lo, hi = ab.lower[0], ab.upper[0]
        if fam == "pg":
            z_lo, z_hi = net.p_min[idx], net.p_max[idx]
        else:
            pos = net.gen_pos[idx]
            z_lo, z_hi = net.v_min[pos], net.v_max[pos]
        nu = torch.maximum(torch.relu(hi - z_hi), torch.relu(z_lo - lo))
        coeff = (ab.a_upper.abs() + ab.a_lower.abs()).sum(dim=0)
        return float(nu), coeff.detach().numpy()

    if fam == "vm":
        spec = torch.zeros(2, 2 * nb, dtype=torch.float64)
        spec[0, idx] = 1.0
        spec[1, nb + idx] = 1.0
        ab = crown_bounds(model, box, out_spec=spec, tight=tight)
        r_iv = (ab.lower[0], ab.upper[0])
        i_iv = (ab.lower[1], ab.upper[1])
        _, vm_hi = norm_enclosure(r_iv, i_iv, "over")
        vm_lo, _ = norm_enclosure(r_iv, i_iv, "under")
        nu = torch.maximum(
            torch.relu(vm_hi - net.v_max[idx]), torch.relu(net.v_min[idx] - vm_lo)
        )
    elif fam == "flow":
        r_row, i_row = _branch_component_rows(net, idx)
        spec = torch.stack([net.y_l_rect[r_row], net.y_l_rect[i_row]], dim=0)
        ab = crown_bounds(model, box, out_spec=spec, tight=tight)
        _, mag_hi = norm_enclosure(
            (ab.lower[0], ab.upper[0]), (ab.lower[1], ab.upper[1]), "over"
        )
        limit = net.i_max[idx % net.n_branch]
        nu = torch.relu(mag_hi / limit - 1.0)
    elif fam in ("pg", "qg", "balance"):
        if fam == "balance":
            bus = int(net.nongen_pos[idx])
        else:
            bus = int(net.gen_pos[idx])
        eye = torch.zeros(2, 2 * nb, dtype=torch.float64)
        eye[0, bus] = 1.0
        eye[1, nb + bus] = 1.0
        spec = torch.cat(
            [eye, net.y_bus_rect[bus].unsqueeze(0), net.y_bus_rect[nb + bus].unsqueeze(0)],
            dim=0,
        )
        ab = crown_bounds(model, box, out_spec=spec, tight=tight)
        vr_iv = (ab.lower[0], ab.upper[0])
        vi_iv = (ab.lower[1], ab.upper[1])
        ir_iv = (ab.lower[2], ab.upper[2])
        ii_iv = (ab.lower[3], ab.upper[3])
        p_iv = _iv_add(
            mccormick_bilinear(vr_iv, ir_iv), mccormick_bilinear(vi_iv, ii_iv)
        )
        q_iv = _iv_sub(
            mccormick_bilinear(vi_iv, ir_iv), mccormick_bilinear(vr_iv, ii_iv)
        )
        pd_iv, qd_iv = _bus_demand_intervals(box, net)
        pg_iv = (p_iv[0] + pd_iv[0][bus], p_iv[1] + pd_iv[1][bus])
        qg_iv = (q_iv[0] + qd_iv[0][bus], q_iv[1] + qd_iv[1][bus])
        if fam == "pg":
            nu = torch.maximum(
                torch.relu(pg_iv[1] - net.p_max[idx]),
                torch.relu(net.p_min[idx] - pg_iv[0]),
            )
        elif fam == "qg":
            nu = torch.maximum(
                torch.relu(qg_iv[1] - net.q_max[idx]),
                torch.relu(net.q_min[idx] - qg_iv[0]),
            )
        else:
            nu = _square_upper(*pg_iv) + _square_upper(*qg_iv)
    else:
        raise ValueError(f"unknown constraint family {fam!r}")
    coeff = (ab.a_upper.abs() + ab.a_lower.abs()).sum(dim=0)
    return float(nu), coeff.detach().numpy()


def concrete_family_violations(
    model: MlpModel, x: torch.Tensor, net: NetTensors
) -> dict[str, torch.Tensor]:
    """Exact per-constraint violations at concrete inputs x (batch, 2*n_load),
    matching the certified families; differentiable in x."""
    pred = model.predict(x)
    if model.head == POWER_HEAD:
        ng = net.n_gen
        pg, vg = pred[:, :ng], pred[:, ng:]
        v_lo = net.v_min[net.gen_pos]
        v_hi = net.v_max[net.gen_pos]
        return {
            "pg": torch.maximum(torch.relu(pg - net.p_max), torch.relu(net.p_min - pg)),
            "vg": torch.maximum(torch.relu(vg - v_hi), torch.relu(v_lo - vg)),
        }
    nd = net.n_load
    p_bus = net.scatter_demand(x[:, :nd])
    q_bus = net.scatter_demand(x[:, nd:])
    p, q = net.injections(pred)
    pg = (p + p_bus)[:, net.gen_pos]
    qg = (q + q_bus)[:, net.gen_pos]
    vm = net.voltage_magnitudes(pred)
    flows = net.branch_magnitudes(pred)
    limit = torch.cat([net.i_max, net.i_max])
    mis_p = (p + p_bus)[:, net.nongen_pos]
    mis_q = (q + q_bus)[:, net.nongen_pos]
    return {
        "pg": torch.maximum(torch.relu(pg - net.p_max), torch.relu(net.p_min - pg)),
        "qg": torch.maximum(torch.relu(qg - net.q_max), torch.relu(net.q_min - qg)),
        "vm": torch.maximum(torch.relu(vm - net.v_max), torch.relu(net.v_min - vm)),
        "flow": torch.relu(flows / limit - 1.0),
        "balance": mis_p**2 + mis_q**2,
    }


def concrete_violation(
    model: MlpModel, x: torch.Tensor, net: NetTensors, constraint: Constraint
) -> torch.Tensor:
    """Exact violation of one constraint at one input (differentiable in x)."""
    families = concrete_family_violations(model, x.reshape(1, -1), net)
    return families[constraint.family][0, constraint.index]
