"""AC network physics in rectangular voltage coordinates.

Everything downstream (losses, bound propagation, restoration) consumes the
quantities computed here: bus/branch currents are linear in the stacked
voltage vector, injections are bilinear, and constraint residuals are simple
clipped distances. The one iterative piece is :func:`newton_pf`, which solves
the conventional PV/PQ power-flow problem in polar coordinates internally and
returns a rectangular state with the slack imaginary part exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import AdmittanceSet, GridModel

PF_TOL = 1e-8
PF_MAX_ITER = 30


class NonConvergence(Exception):
    """Newton power flow failed to reach the mismatch tolerance.

    Signals physically unrealizable setpoints (for example demand beyond the
    network's transfer capability).
    """

    def __init__(self, iterations: int, final_mismatch: float):
        self.iterations = iterations
        self.final_mismatch = final_mismatch
        super().__init__(
            f"power flow mismatch {final_mismatch:.3e} after "
            f"{iterations} iterations")


@dataclass(frozen=True)
class VoltageState:
    """Bus voltages as one stacked vector ``[vr; vi]`` in pu."""

    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if v.ndim != 1 or v.size % 2 != 0:
            raise ValueError("voltage vector must be one-dimensional with even length")
        if not np.all(np.isfinite(v)):
            raise ValueError("voltage vector must be finite")
        object.__setattr__(self, "v", v)

    @classmethod
    def from_parts(cls, vr, vi) -> "VoltageState":
        return cls(np.concatenate([np.asarray(vr, float), np.asarray(vi, float)]))

    @classmethod
    def flat_start(cls, n_bus: int) -> "VoltageState":
        return cls.from_parts(np.ones(n_bus), np.zeros(n_bus))

    @property
    def n_bus(self) -> int:
        return self.v.size // 2

    @property
    def real(self) -> np.ndarray:
        return self.v[: self.n_bus]

    @property
    def imag(self) -> np.ndarray:
        return self.v[self.n_bus:]

    def magnitudes(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)

    def as_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag


@dataclass(frozen=True)
class Scenario:
    """One demand realization, aligned with the model's load list (pu)."""

    p_d: np.ndarray
    q_d: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p_d, dtype=float)
        q = np.asarray(self.q_d, dtype=float)
        if p.shape != q.shape or p.ndim != 1:
            raise ValueError("p_d and q_d must be 1-D and equally sized")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("demand must be finite")
        object.__setattr__(self, "p_d", p)
        object.__setattr__(self, "q_d", q)

    @classmethod
    def nominal(cls, model: GridModel) -> "Scenario":
        return cls(*model.nominal_demand())

    def bus_demand(self, model: GridModel) -> tuple[np.ndarray, np.ndarray]:
        """Scatter per-load demand onto dense per-bus vectors."""
        p = np.zeros(model.n_bus)
        q = np.zeros(model.n_bus)
        pos = model.load_bus_positions()
        np.add.at(p, pos, self.p_d)
        np.add.at(q, pos, self.q_d)
        return p, q


@dataclass(frozen=True)
class Setpoints:
    """Generator dispatch targets: active power and terminal voltage magnitude.

    The slack generator's active-power entry is ignored by the power flow; the
    slack bus absorbs the imbalance.
    """

    p_gen: np.ndarray
    v_gen: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p_gen, dtype=float)
        v = np.asarray(self.v_gen, dtype=float)
        if p.shape != v.shape or p.ndim != 1:
            raise ValueError("p_gen and v_gen must be 1-D and equally sized")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise ValueError("setpoints must be finite")
        if np.any(v <= 0):
            raise ValueError("voltage setpoints must be positive")
        object.__setattr__(self, "p_gen", p)
        object.__setattr__(self, "v_gen", v)

    @classmethod
    def from_model(cls, model: GridModel) -> "Setpoints":
        """Case-file voltage targets with zero dispatched power."""
        return cls(np.zeros(model.n_gen),
                   np.array([g.v_setpoint for g in model.generators]))

    @classmethod
    def proportional(cls, model: GridModel, scenario: Scenario) -> "Setpoints":
        """Split total active demand across units in proportion to capacity."""
        p_max = model.gen_limits()["p_max"]
        share = p_max / p_max.sum()
        return cls(float(scenario.p_d.sum()) * share,
                   np.array([g.v_setpoint for g in model.generators]))


@dataclass(frozen=True)
class ResidualSet:
    """Constraint residuals of one operating state, all in pu.

    Violation entries are clipped at zero; ``balance_residual`` is the signed
    (active, reactive) power mismatch at buses without a generator, stacked
    active-first.
    """

    pg_violation: np.ndarray
    qg_violation: np.ndarray
    vm_violation: np.ndarray
    flow_violation: np.ndarray
    balance_residual: np.ndarray

    @property
    def balance_p(self) -> np.ndarray:
        return self.balance_residual[: self.balance_residual.size // 2]

    @property
    def balance_q(self) -> np.ndarray:
        return self.balance_residual[self.balance_residual.size // 2:]

    def max_violation(self) -> float:
        parts = [self.pg_violation, self.qg_violation, self.vm_violation,
                 self.flow_violation, np.abs(self.balance_residual)]
        return max((float(a.max()) for a in parts if a.size), default=0.0)

    def is_feasible(self, tol: float = 1e-6) -> bool:
        return self.max_violation() <= tol

    def by_family(self) -> dict[str, float]:
        return {
            "pg": float(self.pg_violation.max()) if self.pg_violation.size else 0.0,
            "qg": float(self.qg_violation.max()) if self.qg_violation.size else 0.0,
            "vm": float(self.vm_violation.max()) if self.vm_violation.size else 0.0,
            "flow": float(self.flow_violation.max()) if self.flow_violation.size else 0.0,
            "balance": float(np.abs(self.balance_residual).max())
            if self.balance_residual.size else 0.0,
        }


def bus_currents(adm: AdmittanceSet, state: VoltageState) -> np.ndarray:
    """Stacked bus injection currents ``[ir; ii]`` (length 2*n_bus)."""
    return adm.y_bus_rect @ state.v


def branch_currents(adm: AdmittanceSet, state: VoltageState) -> np.ndarray:
    """Stacked branch currents ``[if_r; if_i; it_r; it_i]`` (length 4*n_branch)."""
    return adm.y_l_rect @ state.v


def branch_current_magnitudes(
        adm: AdmittanceSet, state: VoltageState) -> tuple[np.ndarray, np.ndarray]:
    """Current magnitude at the from and to end of every branch."""
    nl = adm.n_branch
    il = branch_currents(adm, state)
    i_from = np.hypot(il[:nl], il[nl:2 * nl])
    i_to = np.hypot(il[2 * nl:3 * nl], il[3 * nl:])
    return i_from, i_to


def bus_injections(adm: AdmittanceSet, state: VoltageState) -> tuple[np.ndarray, np.ndarray]:
    """Active and reactive net power injection at every bus."""
    n = state.n_bus
    i = bus_currents(adm, state)
    ir, ii = i[:n], i[n:]
    vr, vi = state.real, state.imag
    p = vr * ir + vi * ii
    q = vi * ir - vr * ii
    return p, q


def recovered_generation(
        model: GridModel, adm: AdmittanceSet, state: VoltageState,
        scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Generator injections implied by a voltage state: p_g = p(v) + p_d."""
    p, q = bus_injections(adm, state)
    p_d, q_d = scenario.bus_demand(model)
    pos = model.gen_bus_positions()
    return (p + p_d)[pos], (q + q_d)[pos]


def constraint_residuals(
        model: GridModel, adm: AdmittanceSet, state: VoltageState,
        scenario: Scenario) -> ResidualSet:
    """Evaluate every operating-limit residual for one state and demand.

    Generator injections are recovered from the voltage state, so feasibility
    of a voltage-only prediction is well defined; nodal balance is checked at
    buses without a generator, where net injection must equal minus the
    demand.
    """
    p, q = bus_injections(adm, state)
    p_d, q_d = scenario.bus_demand(model)

    pos = model.gen_bus_positions()
    p_g = (p + p_d)[pos]
    q_g = (q + q_d)[pos]
    lim = model.gen_limits()
    pg_violation = (np.maximum(p_g - lim["p_max"], 0.0)
                    + np.maximum(lim["p_min"] - p_g, 0.0))
    qg_violation = (np.maximum(q_g - lim["q_max"], 0.0)
                    + np.maximum(lim["q_min"] - q_g, 0.0))

    vm = state.magnitudes()
    v_min, v_max = model.v_limits()
    vm_violation = np.maximum(vm - v_max, 0.0) + np.maximum(v_min - vm, 0.0)

    i_from, i_to = branch_current_magnitudes(adm, state)
    flow_violation = np.maximum(np.maximum(i_from, i_to) - model.flow_limits(), 0.0)

    ng = model.nongen_bus_positions()
    balance = np.concatenate([(p + p_d)[ng], (q + q_d)[ng]])

    return ResidualSet(pg_violation=pg_violation, qg_violation=qg_violation,
                       vm_violation=vm_violation, flow_violation=flow_violation,
                       balance_residual=balance)


def _ds_dv(y_bus: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of complex injections wrt voltage angle/magnitude."""
    i = y_bus @ v
    diag_v = np.diag(v)
    diag_i = np.diag(i)
    diag_e = np.diag(v / np.abs(v))
    ds_dva = 1j * diag_v @ np.conj(diag_i - y_bus @ diag_v)
    ds_dvm = diag_v @ np.conj(y_bus @ diag_e) + np.conj(diag_i) @ diag_e
    return ds_dva, ds_dvm


def newton_pf(model: GridModel, adm: AdmittanceSet, scenario: Scenario,
              setpoints: Setpoints, *, v_init: VoltageState | None = None,
              tol: float = PF_TOL, max_iter: int = PF_MAX_ITER) -> VoltageState:
    """Solve the power flow for given dispatch and voltage targets.

    Newton iteration runs on the polar PV/PQ system; the returned state is
    rectangular with the slack angle fixed at zero, so its imaginary entry is
    exactly 0. Reactive limits are never enforced here: a PV bus holds its
    magnitude regardless of the reactive output this requires, and any
    resulting limit violation is left for :func:`constraint_residuals` to
    report.
    """
    if setpoints.p_gen.size != model.n_gen:
        raise ValueError("setpoints must cover every generator")
    if scenario.p_d.size != model.n_load:
        raise ValueError("scenario must cover every load")

    n = model.n_bus
    slack = model.slack_position()
    gen_pos = model.gen_bus_positions()
    pv = np.array([p for p in gen_pos if p != slack], dtype=int)
    is_gen = np.zeros(n, dtype=bool)
    is_gen[gen_pos] = True
    pq = np.flatnonzero(~is_gen)
    pvpq = np.concatenate([pv, pq])

    p_d, q_d = scenario.bus_demand(model)
    p_spec = -p_d
    q_spec = -q_d
    for k, pos in enumerate(gen_pos):
        if pos != slack:
            p_spec[pos] += setpoints.p_gen[k]

    vm = np.ones(n)
    va = np.zeros(n)
    vm[gen_pos] = setpoints.v_gen
    if v_init is not None:
        vc = v_init.as_complex()
        va = np.angle(vc)
        va = va - va[slack]
        vm[pq] = np.abs(vc)[pq]

    err = np.inf
    for it in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        s = v * np.conj(adm.y_bus @ v)
        mismatch = np.concatenate([
            (s.real - p_spec)[pvpq],
            (s.imag - q_spec)[pq],
        ])
        err = float(np.abs(mismatch).max()) if mismatch.size else 0.0
        if not np.isfinite(err):
            raise NonConvergence(it, err)
        if err <= tol:
            vr = vm * np.cos(va)
            vi = vm * np.sin(va)
            vi[slack] = 0.0
            return VoltageState.from_parts(vr, vi)
        if it == max_iter:
            break
        ds_dva, ds_dvm = _ds_dv(adm.y_bus, v)
        jac = np.block([
            [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
            [ds_dva.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(jac, -mismatch)
        except np.linalg.LinAlgError:
            raise NonConvergence(it, err) from None
        va[pvpq] += dx[:pvpq.size]
        vm[pq] += dx[pvpq.size:]
    raise NonConvergence(max_iter, err)
