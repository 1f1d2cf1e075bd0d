"""Post-hoc certification of worst-case constraint violations.

Single-shot propagation bounds from the bounds module are tightened by
best-first branch-and-bound over the input box; projected gradient
ascent supplies concrete counterexample lower bounds.  A certificate
reports both sides, so the certified upper bound stays sound no matter
why the search stopped.  The delta sweep shrinks the input box
symmetrically and reports how much of each constraint family's
certified violation remains.
"""

from __future__ import annotations

import dataclasses
import heapq
import time

import numpy as np
import torch

from .bounds import (
    Box,
    Constraint,
    concrete_violation,
    list_constraints,
    violation_bounds,
    violation_upper_bound,
)
from .grid import GridModel
from .mlp import MlpModel, NetTensors

VERIFIED_SAFE = "verified_safe"
FALSIFIED = "falsified"
INCONCLUSIVE = "inconclusive"

GAP_TOL = 1e-4
# A certificate is only "safe" when the certified bound is numerically
# zero; anything looser could still hide sampled violations.
SAFE_TOL = 1e-12

DELTA_GRID = (0.0, 0.05, 0.10, 0.15, 0.20)


@dataclasses.dataclass(frozen=True)
class Budget:
    max_subdomains: int = 2000
    timeout: float = 100.0

    def __post_init__(self):
        if self.max_subdomains < 1:
            raise ValueError("max_subdomains must be >= 1")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")


@dataclasses.dataclass
class Certificate:
    constraint_id: str
    upper_bound: float
    lower_bound: float
    gap: float
    status: str
    subdomains_explored: int
    time_used: float
    witness: np.ndarray | None

    def to_dict(self) -> dict:
        return {
            "constraint": self.constraint_id,
            "upper_bound": self.upper_bound,
            "lower_bound": self.lower_bound,
            "gap": self.gap,
            "status": self.status,
            "subdomains_explored": self.subdomains_explored,
            "time_used": self.time_used,
            "witness": None if self.witness is None else list(self.witness),
        }


def attack(
    model: MlpModel,
    box: Box,
    net: NetTensors,
    constraint: Constraint,
    restarts: int = 5,
    steps: int = 60,
    seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Projected gradient ascent on one constraint's violation.

    Returns the best concrete violation found and its witness; the
    violation is re-evaluated by a direct forward pass at the witness.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    lo = torch.tensor(box.lower, dtype=torch.float64)
    hi = torch.tensor(box.upper, dtype=torch.float64)
    width = hi - lo
    rng = np.random.default_rng(seed)
    starts = [box.midpoint()]
    for _ in range(restarts - 1):
        starts.append(rng.uniform(box.lower, box.upper))
    best_val = -np.inf
    best_x = None
    for start in starts:
        x = torch.tensor(np.asarray(start, dtype=float), requires_grad=True)
        step = 0.2
        for it in range(steps):
            value = concrete_violation(model, x, net, constraint)
            grad = torch.autograd.grad(value, x, allow_unused=True)[0]
            if grad is None:
                grad = torch.zeros_like(x)
            with torch.no_grad():
                if torch.all(grad == 0):
                    # Flat region (inside the clipped zone); nudge randomly.
                    direction = torch.tensor(
                        rng.choice([-1.0, 1.0], size=x.shape), dtype=torch.float64
                    )
                else:
                    direction = torch.sign(grad)
                x += step * width * direction
                x.clamp_(min=lo, max=hi)
            if (it + 1) % 8 == 0:
                step *= 0.5
        with torch.no_grad():
            final = float(concrete_violation(model, x.detach(), net, constraint))
        if final > best_val:
            best_val = final
            best_x = x.detach().numpy().copy()
    return best_val, best_x


def _split_coordinate(box: Box, coeff: np.ndarray) -> int:
    score = box.width() * coeff
    return int(np.argmax(score))


def certify(
    model: MlpModel,
    box: Box,
    net: NetTensors,
    constraint: Constraint,
    budget: Budget | None = None,
    seed: int = 0,
    tight: bool = True,
    gap_tol: float = GAP_TOL,
    restarts: int = 5,
) -> Certificate:
    """Best-first branch-and-bound on one constraint violation.

    Splits the coordinate with the largest width-weighted bound
    coefficient; the incumbent comes from gradient attack plus subdomain
    midpoints.  The returned upper bound is the max over all unexplored
    leaves, so it is sound whether the loop stopped on gap, budget, or
    timeout.
    """
    budget = budget or Budget()
    t0 = time.monotonic()
    lower, witness = attack(
        model, box, net, constraint, restarts=restarts, seed=seed
    )
    with torch.no_grad():
        root_ub, root_coeff = violation_upper_bound(
            model, box, net, constraint, tight=tight
        )
    explored = 1
    # Heap of (-upper, tiebreak id, box, coeff); closed holds leaves that
    # cannot be split further.
    counter = 0
    heap = [(-root_ub, counter, box, root_coeff)]
    closed_ub = 0.0
    while heap:
        if explored >= budget.max_subdomains:
            break
        if time.monotonic() - t0 > budget.timeout:
            break
        neg_ub, _, sub, coeff = heap[0]
        ub = -neg_ub
        if ub - lower <= gap_tol or ub <= SAFE_TOL:
            break
        heapq.heappop(heap)
        score = sub.width() * coeff
        if not np.any(score > 0):
            closed_ub = max(closed_ub, ub)
            continue
        coord = int(np.argmax(score))
        for child in sub.split(coord):
            with torch.no_grad():
                child_ub, child_coeff = violation_upper_bound(
                    model, child, net, constraint, tight=tight
                )
                mid = child.midpoint()
                mid_val = float(
                    concrete_violation(
                        model, torch.tensor(mid, dtype=torch.float64), net, constraint
                    )
                )
            # The parent's bound holds on any subset; inheriting it keeps
            # splitting monotone even when the recomputed relaxation is
            # looser on the child.
            child_ub = min(child_ub, ub)
            explored += 1
            if mid_val > lower:
                lower, witness = mid_val, mid
            counter += 1
            heapq.heappush(heap, (-child_ub, counter, child, child_coeff))
    upper = closed_ub
    if heap:
        upper = max(upper, -heap[0][0])
    upper = max(upper, 0.0)
    lower = max(lower, 0.0)
    if lower > upper:
        # Floating-point slack between forward evaluation and bound.
        upper = lower
    if lower > SAFE_TOL:
        status = FALSIFIED
    elif upper <= SAFE_TOL:
        status = VERIFIED_SAFE
    else:
        status = INCONCLUSIVE
    return Certificate(
        constraint_id=constraint.id,
        upper_bound=upper,
        lower_bound=lower,
        gap=max(upper - lower, 0.0),
        status=status,
        subdomains_explored=explored,
        time_used=time.monotonic() - t0,
        witness=witness,
    )


def certify_all(
    model: MlpModel,
    box: Box,
    net: NetTensors,
    budget: Budget | None = None,
    seed: int = 0,
    tight: bool = True,
) -> list[Certificate]:
    """Certify every constraint of the model's head."""
    return [
        certify(model, box, net, con, budget=budget, seed=seed, tight=tight)
        for con in list_constraints(model, net)
    ]


def delta_sweep(
    model: MlpModel,
    grid: GridModel,
    net: NetTensors,
    deltas=DELTA_GRID,
    tight: bool = True,
) -> list[dict]:
    """Certified violation per constraint family as the box shrinks.

    The per-family value is the largest certified per-constraint bound.
    A running minimum over growing delta keeps the reported curve
    non-increasing: a bound for a wider box stays valid for any subset
    box.  Values are normalized so delta=0 reads 100 percent; a family
    with no violation at delta=0 stays at 100 by convention.
    """
    deltas = sorted(set(float(d) for d in deltas))
    if not deltas or deltas[0] != 0.0:
        raise ValueError("delta grid must include 0")
    rows: list[dict] = []
    running: dict[str, float] = {}
    base: dict[str, float] = {}
    for delta in deltas:
        box = Box.from_nominal(grid, delta=delta)
        with torch.no_grad():
            families = violation_bounds(model, box, net, tight=tight)
        for name, values in families.items():
            value = float(values.max()) if values.numel() else 0.0
            if name in running:
                value = min(value, running[name])
            running[name] = value
            if delta == 0.0:
                base[name] = value
            if base[name] > SAFE_TOL:
                # Dividing first keeps delta=0 at exactly 100.
                percent = 100.0 * (value / base[name])
            else:
                percent = 100.0
            rows.append(
                {
                    "delta": delta,
                    "constraint": name,
                    "value": value,
                    "percent": percent,
                }
            )
    return rows


def sweep_to_csv(rows: list[dict]) -> str:
    lines = ["delta,constraint,value,percent"]
    for row in rows:
        lines.append(
            f"{row['delta']},{row['constraint']},{repr(row['value'])},"
            f"{repr(row['percent'])}"
        )
    return "\n".join(lines) + "\n"


def certificates_to_json(certs: list[Certificate]) -> list[dict]:
    return [c.to_dict() for c in certs]
