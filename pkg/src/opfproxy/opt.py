"""Local AC-OPF solver used for labeling, restoration, and warm-start studies.

The solver is an augmented-Lagrangian outer loop around a damped-Newton inner
loop on the rectangular variable vector ``x = [vr; vi (slack removed); pg;
qg]``. Every constraint is at most quadratic in x, so all Jacobians and
curvature terms are assembled in closed form; no automatic differentiation is
involved. The same machinery solves two problems: minimum generation cost
(labeling, warm starts) and minimum squared distance to a prediction
(feasibility restoration).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .acpf import Scenario, VoltageState, constraint_residuals
from .grid import AdmittanceSet, GridModel

FEAS_TOL = 1e-6
KKT_TOL = 1e-5
RHO_INITIAL = 10.0
RHO_GROWTH = 10.0
MAX_OUTER = 8
INNER_TOL = 1e-6
INNER_MAX_STEPS = 80


class NoConvergence(Exception):
    """The solver failed to reach a feasible stationary point."""

    def __init__(self, best_residual: float):
        self.best_residual = best_residual
        super().__init__(f"best constraint residual {best_residual:.3e}")


@dataclass(frozen=True)
class OperatingPoint:
    """A candidate operating state: voltages plus generator injections."""

    state: VoltageState
    p_g: np.ndarray
    q_g: np.ndarray


@dataclass(frozen=True)
class OPFSolution:
    """Result of one solver run.

    ``iterations`` counts inner Newton steps across all outer iterations;
    ``lambda_eq`` and ``mu_ineq`` are the final multiplier estimates, kept so
    a later run can warm-start from this solution. ``distance_moved`` is only
    set by :func:`restore_feasible`.
    """

    v: VoltageState
    p_g: np.ndarray
    q_g: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    outer_iterations: int
    converged: bool
    lambda_eq: np.ndarray
    mu_ineq: np.ndarray
    distance_moved: dict[str, float] | None = None

    def operating_point(self) -> OperatingPoint:
        return OperatingPoint(state=self.v, p_g=self.p_g, q_g=self.q_g)


class _Geometry:
    """Index maps, constants, and constraint algebra for one network."""

    def __init__(self, model: GridModel, adm: AdmittanceSet):
        nb, ng, nl = model.n_bus, model.n_gen, model.n_branch
        self.nb, self.ng, self.nl = nb, ng, nl
        self.slack = model.slack_position()
        nonslack = np.array([k for k in range(nb) if k != self.slack], dtype=int)
        # columns of the full voltage space kept as free variables
        self.keep_v = np.concatenate([np.arange(nb), nb + nonslack])
        self.nonslack = nonslack
        self.n_v = self.keep_v.size
        self.n_x = self.n_v + 2 * ng

        self.y_top = adm.y_bus_rect[:nb]
        self.y_bot = adm.y_bus_rect[nb:]
        self.a_f = adm.y_f_rect[:nl]
        self.b_f = adm.y_f_rect[nl:]
        self.a_t = adm.y_t_rect[:nl]
        self.b_t = adm.y_t_rect[nl:]

        self.gen_inc = np.zeros((nb, ng))
        self.gen_inc[model.gen_bus_positions(), np.arange(ng)] = 1.0

        lim = model.gen_limits()
        self.p_min, self.p_max = lim["p_min"], lim["p_max"]
        self.q_min, self.q_max = lim["q_min"], lim["q_max"]
        v_lo, v_hi = model.v_limits()
        self.vm2_min, self.vm2_max = v_lo**2, v_hi**2
        self.i2_max = model.flow_limits()**2
        self.n_eq = 2 * nb
        self.n_ineq = 4 * ng + 2 * nb + 2 * nl

    # -- variable packing --

    def expand(self, x):
        """Split x into (full voltage vector, pg, qg)."""
        v = np.zeros(2 * self.nb)
        v[self.keep_v] = x[:self.n_v]
        return v, x[self.n_v:self.n_v + self.ng], x[self.n_v + self.ng:]

    def pack(self, v_full, p_g, q_g):
        return np.concatenate([v_full[self.keep_v], p_g, q_g])

    # -- constraint values --

    def injections(self, v):
        nb = self.nb
        i_r = self.y_top @ v
        i_i = self.y_bot @ v
        vr, vi = v[:nb], v[nb:]
        p = vr * i_r + vi * i_i
        q = vi * i_r - vr * i_i
        return p, q, i_r, i_i

    def equalities(self, x, p_d, q_d):
        v, p_g, q_g = self.expand(x)
        p, q, _, _ = self.injections(v)
        return np.concatenate([p + p_d - self.gen_inc @ p_g,
                               q + q_d - self.gen_inc @ q_g])

    def inequalities(self, x):
        v, p_g, q_g = self.expand(x)
        nb = self.nb
        vm2 = v[:nb]**2 + v[nb:]**2
        if2 = (self.a_f @ v)**2 + (self.b_f @ v)**2
        it2 = (self.a_t @ v)**2 + (self.b_t @ v)**2
        return np.concatenate([
            p_g - self.p_max, self.p_min - p_g,
            q_g - self.q_max, self.q_min - q_g,
            vm2 - self.vm2_max, self.vm2_min - vm2,
            if2 - self.i2_max, it2 - self.i2_max,
        ])

    # -- first derivatives --

    def eq_jacobian(self, x):
        v, _, _ = self.expand(x)
        nb = self.nb
        vr, vi = v[:nb], v[nb:]
        _, _, i_r, i_i = self.injections(v)
        j_p = np.hstack([np.diag(i_r), np.diag(i_i)]) \
            + vr[:, None] * self.y_top + vi[:, None] * self.y_bot
        j_q = np.hstack([-np.diag(i_i), np.diag(i_r)]) \
            + vi[:, None] * self.y_top - vr[:, None] * self.y_bot
        jac = np.zeros((self.n_eq, self.n_x))
        jac[:nb, :self.n_v] = j_p[:, self.keep_v]
        jac[nb:, :self.n_v] = j_q[:, self.keep_v]
        jac[:nb, self.n_v:self.n_v + self.ng] = -self.gen_inc
        jac[nb:, self.n_v + self.ng:] = -self.gen_inc
        return jac

    def ineq_jacobian(self, x):
        v, _, _ = self.expand(x)
        nb, ng, nl = self.nb, self.ng, self.nl
        jac = np.zeros((self.n_ineq, self.n_x))
        eye = np.eye(ng)
        r = 0
        jac[r:r + ng, self.n_v:self.n_v + ng] = eye
        r += ng
        jac[r:r + ng, self.n_v:self.n_v + ng] = -eye
        r += ng
        jac[r:r + ng, self.n_v + ng:] = eye
        r += ng
        jac[r:r + ng, self.n_v + ng:] = -eye
        r += ng
        j_vm = np.hstack([2.0 * np.diag(v[:nb]), 2.0 * np.diag(v[nb:])])
        jac[r:r + nb, :self.n_v] = j_vm[:, self.keep_v]
        r += nb
        jac[r:r + nb, :self.n_v] = -j_vm[:, self.keep_v]
        r += nb
        j_f = 2.0 * (self.a_f @ v)[:, None] * self.a_f \
            + 2.0 * (self.b_f @ v)[:, None] * self.b_f
        jac[r:r + nl, :self.n_v] = j_f[:, self.keep_v]
        r += nl
        j_t = 2.0 * (self.a_t @ v)[:, None] * self.a_t \
            + 2.0 * (self.b_t @ v)[:, None] * self.b_t
        jac[r:r + nl, :self.n_v] = j_t[:, self.keep_v]
        return jac

    # -- curvature --

    def curvature(self, coef_eq, coef_ineq):
        """Weighted sum of constraint Hessians, in the full voltage space.

        ``coef_eq`` weights the 2*nb balance equalities; ``coef_ineq`` the
        inequality rows (only voltage-magnitude and flow rows carry
        curvature). Generator variables never appear quadratically.
        """
        nb, ng, nl = self.nb, self.ng, self.nl
        c_p, c_q = coef_eq[:nb], coef_eq[nb:]
        y = np.vstack([self.y_top, self.y_bot])
        m = y * np.concatenate([c_p, c_p])[:, None]
        m[:nb] -= c_q[:, None] * self.y_bot
        m[nb:] += c_q[:, None] * self.y_top
        h_v = m + m.T

        r = 4 * ng
        c_vm = coef_ineq[r:r + nb] - coef_ineq[r + nb:r + 2 * nb]
        d = 2.0 * np.concatenate([c_vm, c_vm])
        h_v[np.diag_indices(2 * nb)] += d

        r = 4 * ng + 2 * nb
        for a, b, c in ((self.a_f, self.b_f, coef_ineq[r:r + nl]),
                        (self.a_t, self.b_t, coef_ineq[r + nl:r + 2 * nl])):
            if np.any(c):
                h_v += 2.0 * (a.T @ (a * c[:, None]) + b.T @ (b * c[:, None]))
        return h_v


class _LinearCost:
    """Scaled generation cost c'pg; scaling keeps gradients near unit size."""

    def __init__(self, geom: _Geometry, cost: np.ndarray):
        self.scale = float(np.abs(cost).max()) or 1.0
        g = np.zeros(geom.n_x)
        g[geom.n_v:geom.n_v + geom.ng] = cost / self.scale
        self._grad = g

    def value(self, x):
        return float(self._grad @ x)

    def grad(self, x):
        return self._grad

    def add_hessian(self, h):
        pass


class _QuadDistance:
    """Squared distance to a target point, all coordinates equally weighted."""

    scale = 1.0

    def __init__(self, target: np.ndarray):
        self.target = target

    def value(self, x):
        d = x - self.target
        return float(d @ d)

    def grad(self, x):
        return 2.0 * (x - self.target)

    def add_hessian(self, h):
        h[np.diag_indices_from(h)] += 2.0


def _augmented_lagrangian(geom, obj, p_d, q_d, x, lam, mu, rho):
    g = geom.equalities(x, p_d, q_d)
    h = geom.inequalities(x)
    act = np.maximum(mu + rho * h, 0.0)
    val = (obj.value(x) + lam @ g + 0.5 * rho * (g @ g)
           + ((act**2 - mu**2).sum()) / (2.0 * rho))
    return val, g, h, act


def _solve(geom: _Geometry, obj, p_d, q_d, x0, lam0, mu0,
           *, max_outer=MAX_OUTER, inner_tol=INNER_TOL,
           inner_max=INNER_MAX_STEPS, feas_tol=FEAS_TOL):
    """Run the outer multiplier loop; returns the final iterate and stats."""
    x, lam, mu = x0.copy(), lam0.copy(), mu0.copy()
    rho = RHO_INITIAL
    total_steps = 0
    best_feas = np.inf
    kkt = np.inf

    for outer in range(1, max_outer + 1):
        x, steps, grad_norm = _inner_newton(
            geom, obj, p_d, q_d, x, lam, mu, rho, inner_tol, inner_max)
        total_steps += steps

        g = geom.equalities(x, p_d, q_d)
        h = geom.inequalities(x)
        lam = lam + rho * g
        mu = np.maximum(mu + rho * h, 0.0)
        # with updated multipliers the inner gradient equals the Lagrangian
        # gradient, so the inner exit norm doubles as the KKT residual
        kkt = grad_norm
        feas = max(np.abs(g).max(), float(np.maximum(h, 0.0).max(initial=0.0)))
        best_feas = min(best_feas, feas)
        if feas <= feas_tol and kkt <= KKT_TOL:
            return x, lam, mu, total_steps, outer, kkt, True, feas
        rho *= RHO_GROWTH
    return x, lam, mu, total_steps, max_outer, kkt, False, best_feas


def _inner_newton(geom, obj, p_d, q_d, x, lam, mu, rho, tol, max_steps):
    val, g, h, act = _augmented_lagrangian(geom, obj, p_d, q_d, x, lam, mu, rho)
    tau = 1e-8
    steps = 0
    while True:
        j_eq = geom.eq_jacobian(x)
        j_h = geom.ineq_jacobian(x)
        grad = obj.grad(x) + j_eq.T @ (lam + rho * g) + j_h.T @ act
        grad_norm = float(np.abs(grad).max())
        if grad_norm <= tol or steps >= max_steps:
            return x, steps, grad_norm

        h_v = geom.curvature(lam + rho * g, act)
        hess = np.zeros((geom.n_x, geom.n_x))
        hess[:geom.n_v, :geom.n_v] = h_v[np.ix_(geom.keep_v, geom.keep_v)]
        hess += rho * (j_eq.T @ j_eq)
        active = act > 0.0
        if np.any(active):
            j_act = j_h[active]
            hess += rho * (j_act.T @ j_act)
        obj.add_hessian(hess)

        # Levenberg shift until we get a usable descent direction
        d = None
        while tau < 1e12:
            try:
                chol = scipy.linalg.cho_factor(
                    hess + tau * np.eye(geom.n_x), lower=True)
            except scipy.linalg.LinAlgError:
                tau *= 10.0
                continue
            d = scipy.linalg.cho_solve(chol, -grad)
            if grad @ d < 0.0:
                break
            tau *= 10.0
        if d is None or grad @ d >= 0.0:
            return x, steps, grad_norm

        slope = float(grad @ d)
        t = 1.0
        accepted = False
        while t >= 2.0**-30:
            x_new = x + t * d
            val_new, g_new, h_new, act_new = _augmented_lagrangian(
                geom, obj, p_d, q_d, x_new, lam, mu, rho)
            if val_new <= val + 1e-4 * t * slope:
                x, val, g, h, act = x_new, val_new, g_new, h_new, act_new
                accepted = True
                break
            t *= 0.5
        steps += 1
        if not accepted:
            tau *= 100.0
            if tau >= 1e12:
                return x, steps, grad_norm
            continue
        tau = max(tau / 3.0, 1e-10)


def _initial_point(geom: _Geometry, model: GridModel, scenario: Scenario):
    p_g = np.clip(scenario.p_d.sum() * geom.p_max / geom.p_max.sum(),
                  geom.p_min, geom.p_max)
    q_g = np.clip(0.0, geom.q_min, geom.q_max)
    v = np.concatenate([np.ones(geom.nb), np.zeros(geom.nb)])
    return geom.pack(v, p_g, q_g)


def _point_to_x(geom: _Geometry, point: OperatingPoint):
    return geom.pack(point.state.v.copy(), point.p_g, point.q_g)


def _finish(geom, model, x, lam, mu, steps, outer, kkt, converged,
            distance=None):
    v_full, p_g, q_g = geom.expand(x)
    state = VoltageState(v_full)
    objective = float(model.cost_vector() @ p_g)
    return OPFSolution(
        v=state, p_g=p_g, q_g=q_g, objective=objective,
        kkt_residual=kkt, iterations=steps, outer_iterations=outer,
        converged=converged, lambda_eq=lam, mu_ineq=mu,
        distance_moved=distance)


def solve_opf(model: GridModel, adm: AdmittanceSet, scenario: Scenario,
              init: OPFSolution | OperatingPoint | VoltageState | None = None,
              ) -> OPFSolution:
    """Minimize generation cost subject to network physics and limits.

    ``init`` may be a previous :class:`OPFSolution` (reusing both the point
    and its multipliers), an :class:`OperatingPoint` or bare
    :class:`VoltageState` (point only), or ``None`` for a cold start.
    Deterministic for fixed inputs. Raises :class:`NoConvergence` when no
    feasible stationary point is reached within the outer-iteration budget.
    """
    geom = _Geometry(model, adm)
    p_d, q_d = scenario.bus_demand(model)
    lam = np.zeros(geom.n_eq)
    mu = np.zeros(geom.n_ineq)
    if isinstance(init, OPFSolution):
        x0 = _point_to_x(geom, init.operating_point())
        lam, mu = init.lambda_eq.copy(), init.mu_ineq.copy()
    elif isinstance(init, OperatingPoint):
        x0 = _point_to_x(geom, init)
    elif isinstance(init, VoltageState):
        x0 = _initial_point(geom, model, scenario)
        x0[:geom.n_v] = init.v[geom.keep_v]
    else:
        x0 = _initial_point(geom, model, scenario)

    obj = _LinearCost(geom, model.cost_vector())
    x, lam, mu, steps, outer, kkt, ok, feas = _solve(
        geom, obj, p_d, q_d, x0, lam, mu)
    if not ok:
        raise NoConvergence(feas)
    return _finish(geom, model, x, lam, mu, steps, outer, kkt, ok)


def restore_feasible(model: GridModel, adm: AdmittanceSet, scenario: Scenario,
                     prediction: OperatingPoint) -> OPFSolution:
    """Project a predicted operating point onto the feasible set.

    Minimizes the squared distance over all free coordinates (voltages with
    the slack imaginary part pinned to zero, generator injections), weighted
    equally. The returned solution reports the squared distance moved per
    variable group.
    """
    geom = _Geometry(model, adm)
    p_d, q_d = scenario.bus_demand(model)
    target = _point_to_x(geom, prediction)
    obj = _QuadDistance(target)
    # Restoration promises independently checked feasibility at 1e-6;
    # solving tighter leaves room for the generation-recovery slack.
    x, lam, mu, steps, outer, kkt, ok, feas = _solve(
        geom, obj, p_d, q_d, target.copy(), np.zeros(geom.n_eq),
        np.zeros(geom.n_ineq), feas_tol=1e-8)
    if not ok:
        raise NoConvergence(feas)
    d = x - target
    dv = d[:geom.n_v]
    dp = d[geom.n_v:geom.n_v + geom.ng]
    dq = d[geom.n_v + geom.ng:]
    distance = {
        "v": float(dv @ dv),
        "p_g": float(dp @ dp),
        "q_g": float(dq @ dq),
        "total": float(d @ d),
    }
    return _finish(geom, model, x, lam, mu, steps, outer, kkt, ok,
                   distance=distance)


@dataclass(frozen=True)
class WarmStartRow:
    index: int
    converged: bool
    cold_iters: int
    warm_iters: int
    cold_obj: float
    warm_obj: float
    cold_seconds: float
    warm_seconds: float

    @property
    def delta_cost_pct(self) -> float:
        return 100.0 * (self.warm_obj - self.cold_obj) / abs(self.cold_obj)

    @property
    def delta_iters_pct(self) -> float:
        return 100.0 * (self.warm_iters - self.cold_iters) / self.cold_iters

    @property
    def delta_time_pct(self) -> float:
        if self.cold_seconds <= 0.0:
            return 0.0
        return 100.0 * (self.warm_seconds - self.cold_seconds) / self.cold_seconds


@dataclass(frozen=True)
class WarmStartReport:
    rows: tuple[WarmStartRow, ...]
    failed: int
    trimmed: int

    CSV_HEADER = ("index,converged,cold_iters,warm_iters,cold_obj,warm_obj,"
                  "delta_cost_pct,delta_iters_pct,delta_time_pct")

    def kept_rows(self) -> tuple[WarmStartRow, ...]:
        """Converged rows minus the iteration-count outliers.

        When at least 100 rows converge, the 10 cheapest and 10 costliest
        cold runs (by iteration count) are discarded.
        """
        rows = [r for r in self.rows if r.converged]
        if len(rows) >= 100:
            rows = sorted(rows, key=lambda r: (r.cold_iters, r.index))[10:-10]
            rows = sorted(rows, key=lambda r: r.index)
        return tuple(rows)

    def aggregate(self) -> dict[str, float]:
        rows = self.kept_rows()
        if not rows:
            return {"rows": 0, "failed": self.failed}
        match = sum(abs(r.delta_cost_pct) <= 0.1 for r in rows)
        return {
            "rows": len(rows),
            "failed": self.failed,
            "mean_cold_iters": float(np.mean([r.cold_iters for r in rows])),
            "mean_warm_iters": float(np.mean([r.warm_iters for r in rows])),
            "mean_delta_cost_pct": float(np.mean([r.delta_cost_pct for r in rows])),
            "mean_delta_iters_pct": float(np.mean([r.delta_iters_pct for r in rows])),
            "mean_delta_time_pct": float(np.mean([r.delta_time_pct for r in rows])),
            "cost_match_rate": match / len(rows),
        }

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.index},{int(r.converged)},{r.cold_iters},{r.warm_iters},"
                f"{r.cold_obj!r},{r.warm_obj!r},"
                f"{r.delta_cost_pct!r},{r.delta_iters_pct!r},{r.delta_time_pct!r}"
                if r.converged else f"{r.index},0,,,,,,,")
        return "\n".join(lines) + "\n"


def warm_start_report(model: GridModel, adm: AdmittanceSet,
                      scenarios, predictor) -> WarmStartReport:
    """Compare cold-started and predictor-warm-started solves per scenario.

    ``predictor`` maps a :class:`Scenario` to an :class:`OperatingPoint`.
    Rows where either solve fails are kept in the table but flagged and
    excluded from aggregates.
    """
    rows = []
    failed = 0
    for k, sc in enumerate(scenarios):
        try:
            t0 = time.perf_counter()
            cold = solve_opf(model, adm, sc)
            t1 = time.perf_counter()
            warm = solve_opf(model, adm, sc, init=predictor(sc))
            t2 = time.perf_counter()
        except NoConvergence:
            failed += 1
            rows.append(WarmStartRow(index=k, converged=False, cold_iters=0,
                                     warm_iters=0, cold_obj=np.nan,
                                     warm_obj=np.nan, cold_seconds=0.0,
                                     warm_seconds=0.0))
            continue
        rows.append(WarmStartRow(
            index=k, converged=True, cold_iters=cold.iterations,
            warm_iters=warm.iterations, cold_obj=cold.objective,
            warm_obj=warm.objective, cold_seconds=t1 - t0,
            warm_seconds=t2 - t1))
    n_converged = sum(r.converged for r in rows)
    return WarmStartReport(rows=tuple(rows), failed=failed,
                           trimmed=20 if n_converged >= 100 else 0)
