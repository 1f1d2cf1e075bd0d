"""Scenario sampling, OPF labeling, and dataset persistence.

Load scenarios scale each nominal demand by a random fraction in [low, high].
Marginally each fraction follows a Kumaraswamy(1.6, 2.8) law; cross-load
dependence comes from a single-factor Gaussian copula whose latent
coefficient is calibrated in a deterministic pre-pass so the realized Pearson
correlation of the sampled loads matches the requested target. Reactive
demand is scaled by the same fraction as active demand, preserving each
load's power factor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .acpf import Scenario
from .grid import AdmittanceSet, GridModel
from .opt import NoConvergence, solve_opf

KUMARASWAMY_A = 1.6
KUMARASWAMY_B = 2.8
LOAD_LOW = 0.6
LOAD_HIGH = 1.0
CORRELATION_TARGET = 0.75
# train/val/test proportions
SPLIT_WEIGHTS = (8, 2, 1)
SPLIT_NAMES = ("train", "val", "test")


class LabelingFailed(Exception):
    """Too many scenarios were unsolvable to build a trustworthy dataset."""


class FormatError(Exception):
    """Dataset file does not match the expected layout."""


def kumaraswamy_quantile(u, a: float = KUMARASWAMY_A, b: float = KUMARASWAMY_B):
    return (1.0 - (1.0 - np.asarray(u, dtype=float)) ** (1.0 / b)) ** (1.0 / a)


def kumaraswamy_cdf(x, a: float = KUMARASWAMY_A, b: float = KUMARASWAMY_B):
    return 1.0 - (1.0 - np.asarray(x, dtype=float) ** a) ** b


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """Sampled demand matrix plus its provenance and split assignment."""

    p_d: np.ndarray  # (n, n_load) pu
    q_d: np.ndarray
    load_bus_ids: tuple[int, ...]
    low: float
    high: float
    seed: int
    latent_correlation: float
    split: np.ndarray  # (n,) strings from SPLIT_NAMES

    def __post_init__(self):
        if self.p_d.shape != self.q_d.shape or self.p_d.ndim != 2:
            raise ValueError("demand matrices must be 2-D and equally sized")
        if self.split.shape != (self.p_d.shape[0],):
            raise ValueError("one split tag per scenario required")

    def __len__(self) -> int:
        return self.p_d.shape[0]

    @property
    def n_load(self) -> int:
        return self.p_d.shape[1]

    def scenario(self, k: int) -> Scenario:
        return Scenario(self.p_d[k], self.q_d[k])

    def indices(self, name: str) -> np.ndarray:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split '{name}'")
        return np.flatnonzero(self.split == name)


def split_sizes(n: int) -> tuple[int, int, int]:
    total = sum(SPLIT_WEIGHTS)
    n_train = round(n * SPLIT_WEIGHTS[0] / total)
    n_val = round(n * SPLIT_WEIGHTS[1] / total)
    return n_train, n_val, n - n_train - n_val


def _split_tags(n: int) -> np.ndarray:
    n_train, n_val, n_test = split_sizes(n)
    return np.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test)


def _draw_fractions(rng: np.random.Generator, n: int, n_load: int,
                    latent: float) -> np.ndarray:
    w0 = rng.standard_normal((n, 1))
    w = rng.standard_normal((n, n_load))
    z = np.sqrt(latent) * w0 + np.sqrt(1.0 - latent) * w
    return kumaraswamy_quantile(ndtr(z))


def _mean_pairwise_correlation(samples: np.ndarray) -> float:
    c = np.corrcoef(samples, rowvar=False)
    n = c.shape[0]
    off = c[~np.eye(n, dtype=bool)]
    return float(off.mean())


def calibrate_latent_correlation(n_load: int, target: float, seed: int,
                                 n_probe: int = 4000) -> float:
    """Find the latent factor loading giving the target realized correlation.

    The probe sample is drawn once and reused while bisecting, so the
    realized correlation is a deterministic increasing function of the latent
    coefficient and the result depends only on (n_load, target, seed).
    """
    if n_load < 2 or target <= 0.0:
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    w0 = rng.standard_normal((n_probe, 1))
    w = rng.standard_normal((n_probe, n_load))

    def realized(latent: float) -> float:
        z = np.sqrt(latent) * w0 + np.sqrt(1.0 - latent) * w
        return _mean_pairwise_correlation(kumaraswamy_quantile(ndtr(z)))

    lo, hi = 0.0, 1.0 - 1e-12
    if realized(hi) <= target:
        return hi
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if realized(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_scenarios(model: GridModel, n: int, seed: int, *,
                     low: float = LOAD_LOW, high: float = LOAD_HIGH,
                     correlation_target: float = CORRELATION_TARGET,
                     ) -> ScenarioSet:
    """Draw ``n`` correlated demand scenarios inside the sampling box."""
    if n < 1:
        raise ValueError("need at least one scenario")
    if high <= low:
        raise ValueError("sampling box is empty: high must exceed low")
    latent = calibrate_latent_correlation(model.n_load, correlation_target, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    fractions = low + (high - low) * _draw_fractions(rng, n, model.n_load, latent)
    p_nom, q_nom = model.nominal_demand()
    return ScenarioSet(
        p_d=fractions * p_nom, q_d=fractions * q_nom,
        load_bus_ids=tuple(d.bus_id for d in model.loads),
        low=low, high=high, seed=seed, latent_correlation=latent,
        split=_split_tags(n))


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Scenario matrix with one OPF solution per row.

    Targets are stored in both forms consumed by the proxies: generator
    setpoints (active power and terminal voltage magnitude) and full
    rectangular bus voltages.
    """

    scenarios: ScenarioSet
    gen_bus_ids: tuple[int, ...]
    bus_ids: tuple[int, ...]
    p_g: np.ndarray  # (n, n_gen)
    v_g: np.ndarray  # (n, n_gen)
    v_r: np.ndarray  # (n, n_bus)
    v_i: np.ndarray  # (n, n_bus)
    objective: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.scenarios)


def generate_labels(model: GridModel, adm: AdmittanceSet,
                    scenarios: ScenarioSet, *,
                    max_fail_fraction: float = 0.05) -> LabeledDataset:
    """Label every scenario with its local OPF solution.

    Unsolvable scenarios are replaced by fresh draws from a dedicated
    resampling stream so the dataset size and split layout are preserved.
    Raises :class:`LabelingFailed` once failures exceed ``max_fail_fraction``
    of the requested count.
    """
    n = len(scenarios)
    max_failures = int(max_fail_fraction * n)
    resample_rng = np.random.default_rng(
        np.random.SeedSequence([scenarios.seed, 2]))
    p_nom, q_nom = model.nominal_demand()

    p_d = scenarios.p_d.copy()
    q_d = scenarios.q_d.copy()
    gen_pos = model.gen_bus_positions()
    p_g = np.zeros((n, model.n_gen))
    v_g = np.zeros((n, model.n_gen))
    v_r = np.zeros((n, model.n_bus))
    v_i = np.zeros((n, model.n_bus))
    objective = np.zeros(n)

    failures = 0
    for k in range(n):
        while True:
            try:
                sol = solve_opf(model, adm, Scenario(p_d[k], q_d[k]))
                break
            except NoConvergence:
                failures += 1
                if failures > max_failures:
                    raise LabelingFailed(
                        f"{failures} of {n} scenarios unsolvable") from None
                f = scenarios.low + (scenarios.high - scenarios.low) \
                    * _draw_fractions(resample_rng, 1, scenarios.n_load,
                                      scenarios.latent_correlation)[0]
                p_d[k] = f * p_nom
                q_d[k] = f * q_nom
        p_g[k] = sol.p_g
        v_g[k] = sol.v.magnitudes()[gen_pos]
        v_r[k] = sol.v.real
        v_i[k] = sol.v.imag
        objective[k] = sol.objective

    relabeled = ScenarioSet(
        p_d=p_d, q_d=q_d, load_bus_ids=scenarios.load_bus_ids,
        low=scenarios.low, high=scenarios.high, seed=scenarios.seed,
        latent_correlation=scenarios.latent_correlation,
        split=scenarios.split.copy())
    return LabeledDataset(
        scenarios=relabeled,
        gen_bus_ids=tuple(g.bus_id for g in model.generators),
        bus_ids=tuple(b.id for b in model.buses),
        p_g=p_g, v_g=v_g, v_r=v_r, v_i=v_i, objective=objective)


# ---------------------------------------------------------------------------
# CSV persistence: one row per scenario, floats written exactly
# ---------------------------------------------------------------------------

def _columns(dataset: LabeledDataset) -> list[str]:
    cols = []
    cols += [f"pd_{b}" for b in dataset.scenarios.load_bus_ids]
    cols += [f"qd_{b}" for b in dataset.scenarios.load_bus_ids]
    cols += [f"pg_{b}" for b in dataset.gen_bus_ids]
    cols += [f"vg_{b}" for b in dataset.gen_bus_ids]
    cols += [f"vr_{b}" for b in dataset.bus_ids]
    cols += [f"vi_{b}" for b in dataset.bus_ids]
    cols += ["objective", "split"]
    return cols


def write_dataset(dataset: LabeledDataset, path, *,
                  config_hash: str | None = None) -> None:
    """Write the dataset as CSV with a metadata comment line.

    Floats are rendered by ``repr``, the shortest decimal string that parses
    back to the identical double, so a read/write cycle is bit-exact.
    """
    sc = dataset.scenarios
    meta = {
        "seed": sc.seed,
        "low": sc.low,
        "high": sc.high,
        "latent_correlation": sc.latent_correlation,
    }
    if config_hash is not None:
        meta["config_hash"] = config_hash
    lines = ["# opfproxy-dataset " + json.dumps(meta, sort_keys=True)]
    lines.append(",".join(_columns(dataset)))
    blocks = np.hstack([sc.p_d, sc.q_d, dataset.p_g, dataset.v_g,
                        dataset.v_r, dataset.v_i,
                        dataset.objective[:, None]])
    for k in range(len(dataset)):
        nums = ",".join(repr(float(x)) for x in blocks[k])
        lines.append(f"{nums},{sc.split[k]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _id_block(names: list[str], prefix: str) -> tuple[int, ...]:
    ids = []
    for name in names:
        if name.startswith(prefix + "_"):
            try:
                ids.append(int(name[len(prefix) + 1:]))
            except ValueError:
                raise FormatError(f"malformed column name '{name}'") from None
    return tuple(ids)


def read_dataset(path, model: GridModel | None = None) -> LabeledDataset:
    """Read a dataset written by :func:`write_dataset`.

    When ``model`` is given, column identities are checked against it so a
    dataset cannot silently be used with the wrong network.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# opfproxy-dataset "):
        raise FormatError("missing dataset metadata line")
    try:
        meta = json.loads(lines[0][len("# opfproxy-dataset "):])
    except json.JSONDecodeError:
        raise FormatError("unreadable dataset metadata") from None
    if len(lines) < 2:
        raise FormatError("missing header row")
    names = lines[1].split(",")
    if names[-2:] != ["objective", "split"]:
        raise FormatError("unexpected trailing columns")

    load_ids = _id_block(names, "pd")
    if _id_block(names, "qd") != load_ids:
        raise FormatError("active and reactive demand columns disagree")
    gen_ids = _id_block(names, "pg")
    if _id_block(names, "vg") != gen_ids:
        raise FormatError("generator column blocks disagree")
    bus_ids = _id_block(names, "vr")
    if _id_block(names, "vi") != bus_ids:
        raise FormatError("voltage column blocks disagree")
    expected = (2 * len(load_ids) + 2 * len(gen_ids) + 2 * len(bus_ids) + 2)
    if len(names) != expected:
        raise FormatError("unexpected column layout")
    if model is not None:
        if load_ids != tuple(d.bus_id for d in model.loads):
            raise FormatError("load columns do not match the model")
        if gen_ids != tuple(g.bus_id for g in model.generators):
            raise FormatError("generator columns do not match the model")
        if bus_ids != tuple(b.id for b in model.buses):
            raise FormatError("bus columns do not match the model")

    n = len(lines) - 2
    width = len(names) - 1
    values = np.zeros((n, width))
    split = np.empty(n, dtype="<U8")
    for k, line in enumerate(lines[2:]):
        parts = line.split(",")
        if len(parts) != len(names):
            raise FormatError(f"row {k} has {len(parts)} fields, "
                              f"expected {len(names)}")
        try:
            values[k] = [float(tok) for tok in parts[:-1]]
        except ValueError:
            raise FormatError(f"non-numeric value in row {k}") from None
        if parts[-1] not in SPLIT_NAMES:
            raise FormatError(f"unknown split tag '{parts[-1]}' in row {k}")
        split[k] = parts[-1]

    nl, ng, nb = len(load_ids), len(gen_ids), len(bus_ids)
    edges = np.cumsum([nl, nl, ng, ng, nb, nb, 1])
    p_d, q_d, p_g, v_g, v_r, v_i, obj = np.hsplit(values, edges[:-1])
    scenarios = ScenarioSet(
        p_d=p_d, q_d=q_d, load_bus_ids=load_ids,
        low=float(meta.get("low", LOAD_LOW)),
        high=float(meta.get("high", LOAD_HIGH)),
        seed=int(meta.get("seed", 0)),
        latent_correlation=float(meta.get("latent_correlation", 0.0)),
        split=split)
    return LabeledDataset(
        scenarios=scenarios, gen_bus_ids=gen_ids, bus_ids=bus_ids,
        p_g=p_g, v_g=v_g, v_r=v_r, v_i=v_i, objective=obj[:, 0])
