"""Run configuration: one INI file drives the whole pipeline.

Every tunable lives in a sectioned key/value file; command-line flags
may override the master seed and output directory.  The effective
configuration is serialized canonically and hashed, and that hash is
stamped into every artifact a command writes, so outputs can always be
traced back to the exact settings that produced them.  All randomness
derives from one master seed through named sub-streams.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import importlib.resources
from pathlib import Path

from .data import LOAD_HIGH, LOAD_LOW
from .grid import GridModel, parse_case
from .mlp import (
    DEFAULT_BATCH,
    DEFAULT_EPOCHS,
    DEFAULT_HIDDEN,
    DEFAULT_LR,
    POWER_HEAD,
    PRUNE_EPOCH,
    PRUNE_FRACTION,
    VOLTAGE_HEAD,
    LossWeights,
)

SEED_STREAMS = ("data", "init", "attack")


class ConfigError(Exception):
    """Invalid, unknown, or missing configuration content."""


def sub_seed(master: int, name: str) -> int:
    """Deterministic named sub-stream seed derived from the master seed."""
    if name not in SEED_STREAMS:
        raise ConfigError(f"unknown seed stream '{name}'")
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


# section -> key -> default value (as string, the INI native type)
_SCHEMA: dict[str, dict[str, str]] = {
    "case": {"path": "case9"},
    "data": {
        "count": "1100",
        "load_low": repr(LOAD_LOW),
        "load_high": repr(LOAD_HIGH),
        "max_fail_fraction": "0.05",
    },
    "model": {
        "head": VOLTAGE_HEAD,
        "hidden": str(DEFAULT_HIDDEN),
        "epochs": str(DEFAULT_EPOCHS),
        "batch_size": str(DEFAULT_BATCH),
        "learning_rate": repr(DEFAULT_LR),
        "prune_epoch": str(PRUNE_EPOCH),
        "prune_fraction": repr(PRUNE_FRACTION),
    },
    "weights": {
        "mse": "1.0",
        "pg": "0.0",
        "qg": "0.0",
        "vg": "0.0",
        "vm": "0.0",
        "flow": "0.0",
        "balance": "0.0",
        "wc": "0.0",
    },
    "wc": {"enabled": "false", "delta": "0.0", "tight": "true"},
    "verify": {
        "max_subdomains": "400",
        "timeout": "100.0",
        "gap_tol": "1e-4",
        "deltas": "0.0 0.05 0.1 0.15 0.2",
    },
    "restore": {"count": "100"},
    "run": {"seed": "0", "out_dir": "runs/default"},
}

_BOOL_KEYS = {("wc", "enabled"), ("wc", "tight")}
_INT_KEYS = {
    ("data", "count"),
    ("model", "hidden"),
    ("model", "epochs"),
    ("model", "batch_size"),
    ("model", "prune_epoch"),
    ("restore", "count"),
    ("verify", "max_subdomains"),
    ("run", "seed"),
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    case_path: str
    data_count: int
    load_low: float
    load_high: float
    max_fail_fraction: float
    head: str
    hidden: int
    epochs: int
    batch_size: int
    learning_rate: float
    prune_epoch: int
    prune_fraction: float
    weights: LossWeights
    wc_enabled: bool
    wc_delta: float
    wc_tight: bool
    verify_max_subdomains: int
    verify_timeout: float
    verify_gap_tol: float
    verify_deltas: tuple[float, ...]
    restore_count: int
    seed: int
    out_dir: str

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def canonical(self) -> str:
        """Stable text form of the effective configuration.

        The output directory is excluded: it decides where artifacts go,
        never what they contain, so runs that differ only in location
        share a hash.
        """
        pairs = []
        for field in dataclasses.fields(self):
            if field.name == "out_dir":
                continue
            value = getattr(self, field.name)
            if isinstance(value, LossWeights):
                for wf in dataclasses.fields(value):
                    pairs.append(
                        f"weights.{wf.name}={getattr(value, wf.name)!r}"
                    )
            elif isinstance(value, tuple):
                pairs.append(
                    f"{field.name}={' '.join(repr(v) for v in value)}"
                )
            else:
                pairs.append(f"{field.name}={value!r}")
        return "\n".join(sorted(pairs)) + "\n"

    def sub_seed(self, name: str) -> int:
        return sub_seed(self.seed, name)

    def load_grid(self) -> GridModel:
        return load_grid(self.case_path)


def load_grid(case_path: str) -> GridModel:
    """Load a grid case from a file path or a packaged case name."""
    path = Path(case_path)
    if path.is_file():
        return parse_case(path.read_text())
    packaged = importlib.resources.files("opfproxy") / "cases" / f"{case_path}.m"
    if packaged.is_file():
        return parse_case(packaged.read_text())
    raise ConfigError(f"case '{case_path}' is neither a file nor a known case")


def _merged_values(parser: configparser.ConfigParser) -> dict[str, dict[str, str]]:
    values = {sec: dict(keys) for sec, keys in _SCHEMA.items()}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
            values[section][key] = raw
    return values


def _coerce(section: str, key: str, raw: str):
    try:
        if (section, key) in _BOOL_KEYS:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if (section, key) in _INT_KEYS:
            return int(raw)
        if key == "deltas":
            return tuple(float(tok) for tok in raw.replace(",", " ").split())
        if (section, key) in (("case", "path"), ("model", "head"), ("run", "out_dir")):
            return raw.strip()
        return float(raw)
    except ValueError:
        raise ConfigError(
            f"cannot parse [{section}] {key} = {raw!r}"
        ) from None


def _validate(cfg: RunConfig) -> None:
    if cfg.head not in (POWER_HEAD, VOLTAGE_HEAD):
        raise ConfigError(f"unknown model head '{cfg.head}'")
    if cfg.data_count < 1:
        raise ConfigError("data count must be >= 1")
    if cfg.load_high <= cfg.load_low:
        raise ConfigError("load_high must exceed load_low")
    if not 0.0 <= cfg.max_fail_fraction < 1.0:
        raise ConfigError("max_fail_fraction must be in [0, 1)")
    if cfg.hidden < 1 or cfg.batch_size < 1:
        raise ConfigError("hidden and batch_size must be >= 1")
    if cfg.epochs < 0 or cfg.prune_epoch < 0:
        raise ConfigError("epochs and prune_epoch must be >= 0")
    if not 0.0 <= cfg.prune_fraction <= 1.0:
        raise ConfigError("prune_fraction must be in [0, 1]")
    if not cfg.learning_rate > 0:
        raise ConfigError("learning_rate must be positive")
    if not 0.0 <= cfg.wc_delta <= 0.2:
        raise ConfigError("wc delta must be in [0, 0.2]")
    if cfg.verify_max_subdomains < 1:
        raise ConfigError("verify max_subdomains must be >= 1")
    if not cfg.verify_timeout > 0:
        raise ConfigError("verify timeout must be positive")
    if not cfg.verify_gap_tol > 0:
        raise ConfigError("verify gap_tol must be positive")
    if not cfg.verify_deltas or min(cfg.verify_deltas) != 0.0:
        raise ConfigError("verify deltas must include 0")
    if cfg.restore_count < 1:
        raise ConfigError("restore count must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")


def load_config(
    path,
    seed_override: int | None = None,
    out_override: str | None = None,
) -> RunConfig:
    """Parse an INI run configuration with strict key checking."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from None
    values = _merged_values(parser)
    typed = {
        sec: {key: _coerce(sec, key, raw) for key, raw in keys.items()}
        for sec, keys in values.items()
    }
    try:
        weights = LossWeights(**typed["weights"])
    except ValueError as exc:
        raise ConfigError(f"invalid loss weights: {exc}") from None
    cfg = RunConfig(
        case_path=typed["case"]["path"],
        data_count=typed["data"]["count"],
        load_low=typed["data"]["load_low"],
        load_high=typed["data"]["load_high"],
        max_fail_fraction=typed["data"]["max_fail_fraction"],
        head=typed["model"]["head"],
        hidden=typed["model"]["hidden"],
        epochs=typed["model"]["epochs"],
        batch_size=typed["model"]["batch_size"],
        learning_rate=typed["model"]["learning_rate"],
        prune_epoch=typed["model"]["prune_epoch"],
        prune_fraction=typed["model"]["prune_fraction"],
        weights=weights,
        wc_enabled=typed["wc"]["enabled"],
        wc_delta=typed["wc"]["delta"],
        wc_tight=typed["wc"]["tight"],
        verify_max_subdomains=typed["verify"]["max_subdomains"],
        verify_timeout=typed["verify"]["timeout"],
        verify_gap_tol=typed["verify"]["gap_tol"],
        verify_deltas=typed["verify"]["deltas"],
        restore_count=typed["restore"]["count"],
        seed=typed["run"]["seed"] if seed_override is None else seed_override,
        out_dir=typed["run"]["out_dir"] if out_override is None else str(out_override),
    )
    _validate(cfg)
    return cfg
