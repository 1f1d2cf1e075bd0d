"""Network model: case-file parsing and rectangular admittance construction.

All electrical quantities are per-unit on the system MVA base; conversion from
physical units happens once, at parse time. Voltages are handled as stacked
real/imaginary vectors ``[vr; vi]`` throughout the package, so the admittance
operators built here are the real 2x2-block expansions of the complex matrices.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, asdict

import numpy as np


class ParseError(Exception):
    """Malformed case file. Carries the offending line number when known."""

    def __init__(self, reason: str, line: int | None = None):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}" if line is not None else reason)


class ValidationError(Exception):
    """Structurally valid case text that violates a model invariant."""


class SingularBranch(Exception):
    """Branch with zero series impedance; its admittance is undefined."""


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float
    g_shunt: float = 0.0  # pu conductance at 1.0 pu voltage
    b_shunt: float = 0.0
    is_slack: bool = False


@dataclass(frozen=True)
class Generator:
    bus_id: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_coeff: float  # $/pu-h, linear
    v_setpoint: float = 1.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0  # total line charging susceptance
    tap: float = 1.0
    i_max: float = np.inf  # current-magnitude limit, pu


@dataclass(frozen=True)
class Load:
    bus_id: int
    p_nominal: float
    q_nominal: float


# Flow cap applied when a case file specifies no branch limits at all.
DEFAULT_FLOW_CAP = 100.0
MISSING_LIMIT_FACTOR = 10.0


@dataclass(frozen=True)
class GridModel:
    """Validated static network description. Immutable; safe to share."""

    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    loads: tuple[Load, ...]
    base_mva: float

    def __post_init__(self):
        _validate(self)

    # -- index helpers (tiny, recomputed on demand) --

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_load(self) -> int:
        return len(self.loads)

    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    def slack_position(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.is_slack)

    def gen_bus_positions(self) -> np.ndarray:
        idx = self.bus_index()
        return np.array([idx[g.bus_id] for g in self.generators], dtype=int)

    def load_bus_positions(self) -> np.ndarray:
        idx = self.bus_index()
        return np.array([idx[d.bus_id] for d in self.loads], dtype=int)

    def nongen_bus_positions(self) -> np.ndarray:
        gen = set(self.gen_bus_positions().tolist())
        return np.array([k for k in range(self.n_bus) if k not in gen], dtype=int)

    def v_limits(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([b.v_min for b in self.buses]),
                np.array([b.v_max for b in self.buses]))

    def gen_limits(self) -> dict[str, np.ndarray]:
        return {
            "p_min": np.array([g.p_min for g in self.generators]),
            "p_max": np.array([g.p_max for g in self.generators]),
            "q_min": np.array([g.q_min for g in self.generators]),
            "q_max": np.array([g.q_max for g in self.generators]),
        }

    def flow_limits(self) -> np.ndarray:
        return np.array([br.i_max for br in self.branches])

    def cost_vector(self) -> np.ndarray:
        return np.array([g.cost_coeff for g in self.generators])

    def nominal_demand(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([d.p_nominal for d in self.loads]),
                np.array([d.q_nominal for d in self.loads]))


def _validate(model: GridModel) -> None:
    ids = [b.id for b in model.buses]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate bus ids")
    n_slack = sum(b.is_slack for b in model.buses)
    if n_slack != 1:
        raise ValidationError(f"expected exactly one slack bus, found {n_slack}")
    known = set(ids)
    for br in model.branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise ValidationError(
                f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
    for g in model.generators:
        if g.bus_id not in known:
            raise ValidationError(f"generator at unknown bus {g.bus_id}")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise ValidationError(f"inverted generator limits at bus {g.bus_id}")
    for d in model.loads:
        if d.bus_id not in known:
            raise ValidationError(f"load at unknown bus {d.bus_id}")
    for b in model.buses:
        if not (b.v_min < b.v_max):
            raise ValidationError(f"bus {b.id}: v_min must be below v_max")
    for br in model.branches:
        if not np.isfinite(br.i_max):
            raise ValidationError(
                f"branch {br.from_bus}-{br.to_bus}: non-finite flow limit")


# ---------------------------------------------------------------------------
# Case-file parsing (MATPOWER-style plain-text subset)
# ---------------------------------------------------------------------------

_SECTION = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.DOTALL)
_BASE = re.compile(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;")


def _numeric_rows(block: str, start_line: int, name: str) -> list[tuple[int, list[float]]]:
    rows = []
    for off, raw in enumerate(block.split("\n")):
        line_no = start_line + off
        line = raw.split("%", 1)[0].strip().rstrip(";").strip()
        if not line:
            continue
        try:
            rows.append((line_no, [float(tok) for tok in line.split()]))
        except ValueError:
            raise ParseError(f"non-numeric token in {name} row", line_no)
    return rows


def parse_case(text: str) -> GridModel:
    """Parse a MATPOWER-style case into a validated :class:`GridModel`.

    Supported sections: ``bus``, ``gen``, ``branch``, ``gencost``. Only linear
    cost rows are accepted (a polynomial row must have zero quadratic
    coefficient). Multiple generators at one bus are merged into a single
    equivalent machine with summed limits and a dispatch-weighted cost slope.
    Branch MVA ratings are converted to current-magnitude limits at 1.0 pu
    voltage; absent ratings get a large finite cap so every constrained
    quantity stays bounded.
    """
    m = _BASE.search(text)
    if m is None:
        raise ParseError("missing baseMVA declaration")
    base_mva = float(m.group(1))
    if base_mva <= 0:
        raise ParseError("baseMVA must be positive")

    sections: dict[str, list[tuple[int, list[float]]]] = {}
    for sm in _SECTION.finditer(text):
        name = sm.group(1)
        start_line = text[: sm.start(2)].count("\n") + 1
        sections[name] = _numeric_rows(sm.group(2), start_line, name)

    for required in ("bus", "gen", "branch"):
        if required not in sections or not sections[required]:
            raise ParseError(f"missing required section '{required}'")

    buses = []
    for line_no, row in sections["bus"]:
        if len(row) < 13:
            raise ParseError("bus row needs 13 columns", line_no)
        bus_i, bus_type, pd, qd, gs, bs = row[0], row[1], row[2], row[3], row[4], row[5]
        vmax, vmin = row[11], row[12]
        if bus_type not in (1, 2, 3):
            raise ParseError(f"unsupported bus type {bus_type:g}", line_no)
        buses.append(
            (Bus(id=int(bus_i), v_min=vmin, v_max=vmax, g_shunt=gs / base_mva,
                 b_shunt=bs / base_mva, is_slack=bus_type == 3),
             pd / base_mva, qd / base_mva))

    loads = tuple(Load(bus_id=b.id, p_nominal=pd, q_nominal=qd)
                  for b, pd, qd in buses if pd != 0.0 or qd != 0.0)

    gen_rows = []
    for line_no, row in sections["gen"]:
        if len(row) < 10:
            raise ParseError("gen row needs at least 10 columns", line_no)
        status = row[7]
        if status == 0:
            gen_rows.append(None)  # placeholder keeps gencost alignment
            continue
        gen_rows.append({
            "bus": int(row[0]), "pg": row[1] / base_mva,
            "qmax": row[3] / base_mva, "qmin": row[4] / base_mva,
            "vg": row[5],
            "pmax": row[8] / base_mva, "pmin": row[9] / base_mva,
        })

    costs = [0.0] * len(gen_rows)
    if "gencost" in sections:
        if len(sections["gencost"]) != len(gen_rows):
            raise ParseError("gencost must have one row per generator")
        for k, (line_no, row) in enumerate(sections["gencost"]):
            if len(row) < 5:
                raise ParseError("gencost row too short", line_no)
            cmodel, ncoef = row[0], int(row[3])
            if cmodel != 2:
                raise ParseError("only polynomial cost model (2) supported", line_no)
            coeffs = row[4:4 + ncoef]
            if len(coeffs) != ncoef:
                raise ParseError("gencost coefficient count mismatch", line_no)
            if ncoef == 2:
                c1 = coeffs[0]
            elif ncoef == 3:
                if coeffs[0] != 0.0:
                    raise ParseError(
                        "quadratic cost coefficient must be zero (linear costs only)",
                        line_no)
                c1 = coeffs[1]
            else:
                raise ParseError(f"unsupported cost order n={ncoef}", line_no)
            costs[k] = c1 * base_mva  # $/MWh * MW/pu -> $/pu-h

    # Aggregate in-service generators per bus (dispatch-weighted cost slope).
    by_bus: dict[int, list[tuple[dict, float]]] = {}
    order: list[int] = []
    for g, c in zip(gen_rows, costs):
        if g is None:
            continue
        if g["bus"] not in by_bus:
            order.append(g["bus"])
        by_bus.setdefault(g["bus"], []).append((g, c))
    generators = []
    for bus_id in order:
        group = by_bus[bus_id]
        w = np.array([g["pg"] for g, _ in group])
        if w.sum() <= 0:
            w = np.array([g["pmax"] for g, _ in group])
        if w.sum() <= 0:
            w = np.ones(len(group))
        w = w / w.sum()
        generators.append(Generator(
            bus_id=bus_id,
            p_min=sum(g["pmin"] for g, _ in group),
            p_max=sum(g["pmax"] for g, _ in group),
            q_min=sum(g["qmin"] for g, _ in group),
            q_max=sum(g["qmax"] for g, _ in group),
            cost_coeff=float(np.dot(w, [c for _, c in group])),
            v_setpoint=float(np.dot(w, [g["vg"] for g, _ in group])),
        ))

    branches = []
    for line_no, row in sections["branch"]:
        if len(row) < 11:
            raise ParseError("branch row needs at least 11 columns", line_no)
        status = row[10]
        if status == 0:
            continue
        if row[9] != 0.0:
            raise ParseError("phase-shifting transformers are not supported", line_no)
        tap = row[8] if row[8] != 0.0 else 1.0
        rate = row[5]
        branches.append(Branch(
            from_bus=int(row[0]), to_bus=int(row[1]),
            r=row[2], x=row[3], b_charging=row[4],
            tap=tap,
            i_max=rate / base_mva if rate > 0 else np.nan,
        ))

    # Missing flow limits: cap at 10x the largest specified limit.
    specified = [br.i_max for br in branches if np.isfinite(br.i_max)]
    cap = MISSING_LIMIT_FACTOR * max(specified) if specified else DEFAULT_FLOW_CAP
    branches = tuple(
        br if np.isfinite(br.i_max)
        else Branch(br.from_bus, br.to_bus, br.r, br.x, br.b_charging, br.tap, cap)
        for br in branches)

    return GridModel(buses=tuple(b for b, _, _ in buses),
                     generators=tuple(generators),
                     branches=branches, loads=loads, base_mva=base_mva)


# ---------------------------------------------------------------------------
# Canonical JSON serialization (round-trip support)
# ---------------------------------------------------------------------------

def to_json(model: GridModel) -> str:
    doc = {
        "base_mva": model.base_mva,
        "buses": [asdict(b) for b in model.buses],
        "generators": [asdict(g) for g in model.generators],
        "branches": [asdict(br) for br in model.branches],
        "loads": [asdict(d) for d in model.loads],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def from_json(text: str) -> GridModel:
    doc = json.loads(text)
    return GridModel(
        buses=tuple(Bus(**b) for b in doc["buses"]),
        generators=tuple(Generator(**g) for g in doc["generators"]),
        branches=tuple(Branch(**br) for br in doc["branches"]),
        loads=tuple(Load(**d) for d in doc["loads"]),
        base_mva=doc["base_mva"],
    )


# ---------------------------------------------------------------------------
# Rectangular admittance operators
# ---------------------------------------------------------------------------

def _rect(m: np.ndarray) -> np.ndarray:
    """Real block expansion [[Re, -Im], [Im, Re]] of a complex matrix."""
    return np.block([[m.real, -m.imag], [m.imag, m.real]])


@dataclass(frozen=True)
class AdmittanceSet:
    """Rectangular bus/branch admittance operators for one network.

    ``y_bus_rect`` maps stacked voltages to stacked bus injection currents;
    ``y_f_rect`` / ``y_t_rect`` map voltages to from/to-end branch currents,
    and ``y_l_rect`` is their vertical stack, ordered
    ``[if_r; if_i; it_r; it_i]``. ``from_pos`` / ``to_pos`` give the bus index
    of each branch end.
    """

    y_bus: np.ndarray  # complex Nb x Nb
    y_bus_rect: np.ndarray  # 2Nb x 2Nb
    y_f_rect: np.ndarray  # 2Nl x 2Nb
    y_t_rect: np.ndarray  # 2Nl x 2Nb
    y_l_rect: np.ndarray  # 4Nl x 2Nb
    from_pos: np.ndarray
    to_pos: np.ndarray
    shunt: np.ndarray  # complex bus shunt admittances

    @property
    def n_bus(self) -> int:
        return self.y_bus.shape[0]

    @property
    def n_branch(self) -> int:
        return len(self.from_pos)


def build_admittances(model: GridModel) -> AdmittanceSet:
    """Build pi-model bus and branch admittance operators for ``model``."""
    nb, nl = model.n_bus, model.n_branch
    idx = model.bus_index()
    y_bus = np.zeros((nb, nb), dtype=complex)
    y_f = np.zeros((nl, nb), dtype=complex)
    y_t = np.zeros((nl, nb), dtype=complex)
    from_pos = np.empty(nl, dtype=int)
    to_pos = np.empty(nl, dtype=int)

    for k, br in enumerate(model.branches):
        if br.r == 0.0 and br.x == 0.0:
            raise SingularBranch(
                f"branch {br.from_bus}-{br.to_bus} has zero series impedance")
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_charging / 2.0
        tau = br.tap
        f, t = idx[br.from_bus], idx[br.to_bus]
        from_pos[k], to_pos[k] = f, t
        yff = (ys + bc) / tau**2
        yft = -ys / tau
        ytf = -ys / tau
        ytt = ys + bc
        y_bus[f, f] += yff
        y_bus[f, t] += yft
        y_bus[t, f] += ytf
        y_bus[t, t] += ytt
        y_f[k, f] = yff
        y_f[k, t] = yft
        y_t[k, f] = ytf
        y_t[k, t] = ytt

    shunt = np.array([complex(b.g_shunt, b.b_shunt) for b in model.buses])
    y_bus[np.diag_indices(nb)] += shunt

    y_f_rect = _rect(y_f)
    y_t_rect = _rect(y_t)
    return AdmittanceSet(
        y_bus=y_bus,
        y_bus_rect=_rect(y_bus),
        y_f_rect=y_f_rect,
        y_t_rect=y_t_rect,
        y_l_rect=np.vstack([y_f_rect, y_t_rect]),
        from_pos=from_pos,
        to_pos=to_pos,
        shunt=shunt,
    )
