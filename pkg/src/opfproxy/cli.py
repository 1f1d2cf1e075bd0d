"""Command-line pipeline: sample data, train, certify, restore, report.

Each subcommand reads one INI config, derives every random stream from
the master seed, and stamps the config hash and package version into
its outputs.  Wall-clock measurements go to separate timing files so
the primary artifacts are byte-identical across reruns.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .acpf import (
    NonConvergence,
    VoltageState,
    constraint_residuals,
    recovered_generation,
)
from .bounds import Box, list_constraints, make_wc_hook, violation_bounds
from .config import ConfigError, RunConfig, load_config
from .data import (
    FormatError,
    LabelingFailed,
    generate_labels,
    read_dataset,
    sample_scenarios,
    write_dataset,
)
from .grid import ParseError, ValidationError, build_admittances
from .mlp import (
    VOLTAGE_HEAD,
    Divergence,
    HeadMismatch,
    NetTensors,
    TrainConfig,
    build_model,
    history_to_csv,
    load_model,
    prediction_rmse,
    save_model,
    train,
)
from .opt import NoConvergence, OperatingPoint, restore_feasible, warm_start_report
from .verify import Budget, certify, delta_sweep, sweep_to_csv

EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2

_NUMERICAL_ERRORS = (
    LabelingFailed,
    Divergence,
    NoConvergence,
    NonConvergence,
    np.linalg.LinAlgError,
)
_VALIDATION_ERRORS = (
    ConfigError,
    FormatError,
    ParseError,
    ValidationError,
    HeadMismatch,
    ValueError,
    OSError,
)


def _guarded(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except _NUMERICAL_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)
        except _VALIDATION_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)

    return wrapper


def _common(f):
    f = click.option(
        "--out", "out_dir", type=click.Path(), default=None,
        help="Override the configured output directory.",
    )(f)
    f = click.option(
        "--seed", type=int, default=None, help="Override the master seed.",
    )(f)
    f = click.option(
        "--config", "config_path", type=click.Path(), default=None,
        help="Run configuration file.",
    )(f)
    return f


def _load(config_path, seed, out_dir) -> tuple[RunConfig, Path]:
    # Checked here instead of required=True so a missing flag exits with
    # the validation code, not click's usage-error code.
    if config_path is None:
        raise ConfigError("--config is required")
    cfg = load_config(config_path, seed_override=seed, out_override=out_dir)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "version": __version__}


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{path} not found; {hint}")
    return path


@click.group()
@click.version_option(version=__version__, prog_name="opfproxy")
def main():
    """Train, certify, and repair neural-network proxies for AC-OPF."""


@main.command("gen-data")
@_common
@_guarded
def gen_data(config_path, seed, out_dir):
    """Sample demand scenarios and label them with local OPF solutions."""
    cfg, out = _load(config_path, seed, out_dir)
    grid = cfg.load_grid()
    adm = build_admittances(grid)
    scenarios = sample_scenarios(
        grid, cfg.data_count, cfg.sub_seed("data"),
        low=cfg.load_low, high=cfg.load_high,
    )
    dataset = generate_labels(
        grid, adm, scenarios, max_fail_fraction=cfg.max_fail_fraction
    )
    path = out / "dataset.csv"
    write_dataset(dataset, path, config_hash=cfg.config_hash())
    click.echo(f"wrote {path} ({len(dataset)} labeled scenarios)")


@main.command("train")
@_common
@click.option(
    "--init-model", "init_path", type=click.Path(), default=None,
    help="Continue from the weights of a saved model instead of a fresh init.",
)
@_guarded
def train_cmd(config_path, seed, out_dir, init_path):
    """Train a proxy on the generated dataset."""
    cfg, out = _load(config_path, seed, out_dir)
    grid = cfg.load_grid()
    adm = build_admittances(grid)
    net = NetTensors(grid, adm)
    dataset = read_dataset(
        _require(out / "dataset.csv", "run gen-data first"), grid
    )
    if init_path is not None:
        model = load_model(_require(Path(init_path), "checkpoint missing"))
        if model.head != cfg.head:
            raise ConfigError(
                f"checkpoint head '{model.head}' does not match config "
                f"head '{cfg.head}'"
            )
    else:
        model = build_model(
            dataset, cfg.head, hidden=cfg.hidden, seed=cfg.sub_seed("init")
        )
    hook = None
    if cfg.wc_enabled:
        box = Box.from_nominal(
            grid, delta=cfg.wc_delta, low=cfg.load_low, high=cfg.load_high
        )
        hook = make_wc_hook(box, net, tight=cfg.wc_tight)
    tc = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.learning_rate,
        weights=cfg.weights,
        seed=cfg.sub_seed("init"),
        prune_epoch=cfg.prune_epoch,
        prune_fraction=cfg.prune_fraction,
        wc_hook=hook,
    )
    history = train(model, dataset, net, tc)
    save_model(model, out / "model.json", config_hash=cfg.config_hash())
    (out / "history.csv").write_text(history_to_csv(history))
    summary = {
        **_stamp(cfg),
        "head": cfg.head,
        "wc_enabled": cfg.wc_enabled,
        "epochs": cfg.epochs,
        "final_train_loss": history[-1]["train_loss"] if history else None,
        "final_val_loss": history[-1]["val_loss"] if history else None,
        "test_rmse": prediction_rmse(model, dataset, "test"),
    }
    _write_json(out / "train.json", summary)
    click.echo(
        f"wrote {out / 'model.json'} "
        f"(test RMSE {summary['test_rmse']:.3e})"
    )


@main.command("verify")
@_common
@click.option(
    "--model", "model_path", type=click.Path(), default=None,
    help="Model file to certify (default: model.json in the output dir).",
)
@click.option(
    "--all-constraints", is_flag=True, default=False,
    help="Branch-and-bound every constraint, not just each family's worst.",
)
@_guarded
def verify_cmd(config_path, seed, out_dir, model_path, all_constraints):
    """Certify worst-case constraint violations and run the delta sweep."""
    cfg, out = _load(config_path, seed, out_dir)
    grid = cfg.load_grid()
    adm = build_admittances(grid)
    net = NetTensors(grid, adm)
    path = Path(model_path) if model_path else out / "model.json"
    model = load_model(_require(path, "run train first"))
    box = Box.from_nominal(grid, low=cfg.load_low, high=cfg.load_high)
    with torch.no_grad():
        families = violation_bounds(model, box, net, tight=cfg.wc_tight)
    single_shot = {
        f"{name}[{k}]": float(values[k])
        for name, values in families.items()
        for k in range(values.numel())
    }
    if all_constraints:
        targets = list_constraints(model, net)
    else:
        targets = []
        for con in list_constraints(model, net):
            values = families[con.family]
            if con.index == int(torch.argmax(values)):
                targets.append(con)
    budget = Budget(
        max_subdomains=cfg.verify_max_subdomains, timeout=cfg.verify_timeout
    )
    attack_seed = cfg.sub_seed("attack")
    certs = [
        certify(
            model, box, net, con, budget=budget, seed=attack_seed,
            tight=cfg.wc_tight, gap_tol=cfg.verify_gap_tol,
        )
        for con in targets
    ]
    # Family-level certified bound: refined value where branch-and-bound
    # ran, single-shot bound elsewhere; the max over both stays sound.
    refined = dict(single_shot)
    for cert in certs:
        refined[cert.constraint_id] = min(
            refined[cert.constraint_id], cert.upper_bound
        )
    family_certified = {
        name: max(
            (refined[f"{name}[{k}]"] for k in range(values.numel())),
            default=0.0,
        )
        for name, values in families.items()
    }
    rows = delta_sweep(
        model, grid, net, deltas=cfg.verify_deltas, tight=cfg.wc_tight
    )
    (out / "sweep.csv").write_text(sweep_to_csv(rows))
    cert_payload = []
    timing = {}
    for cert in certs:
        entry = cert.to_dict()
        timing[cert.constraint_id] = entry.pop("time_used")
        cert_payload.append(entry)
    report = {
        **_stamp(cfg),
        "head": model.head,
        "family_certified_max": family_certified,
        "single_shot_max": {
            name: float(values.max()) if values.numel() else 0.0
            for name, values in families.items()
        },
        "certificates": cert_payload,
    }
    _write_json(out / "report.json", report)
    _write_json(out / "timing.json", {"certify_seconds": timing})
    worst = max(family_certified.values(), default=0.0)
    click.echo(f"wrote {out / 'report.json'} (worst certified bound {worst:.3e})")


@main.command("restore")
@_common
@click.option(
    "--model", "model_path", type=click.Path(), default=None,
    help="Model file to evaluate (default: model.json in the output dir).",
)
@_guarded
def restore_cmd(config_path, seed, out_dir, model_path):
    """Warm-start comparison and feasibility restoration on test scenarios."""
    cfg, out = _load(config_path, seed, out_dir)
    grid = cfg.load_grid()
    adm = build_admittances(grid)
    path = Path(model_path) if model_path else out / "model.json"
    model = load_model(_require(path, "run train first"))
    if model.head != VOLTAGE_HEAD:
        raise ConfigError("restore requires a voltage-head model")
    dataset = read_dataset(
        _require(out / "dataset.csv", "run gen-data first"), grid
    )
    test_rows = dataset.scenarios.indices("test")[: cfg.restore_count]
    if test_rows.size == 0:
        raise ConfigError("dataset has no test split")
    scenarios = [dataset.scenarios.scenario(int(k)) for k in test_rows]

    def predictor(sc):
        x = torch.tensor(
            np.concatenate([sc.p_d, sc.q_d]), dtype=torch.float64
        ).unsqueeze(0)
        with torch.no_grad():
            v = model.predict(x)[0].numpy()
        state = VoltageState(v)
        p_g, q_g = recovered_generation(grid, adm, state, sc)
        return OperatingPoint(state=state, p_g=p_g, q_g=q_g)

    ws = warm_start_report(grid, adm, scenarios, predictor)
    (out / "warmstart.csv").write_text(ws.to_csv())
    aggregate = ws.aggregate()
    timing = {"mean_delta_time_pct": aggregate.pop("mean_delta_time_pct", None)}

    already = restored = failed = 0
    distances = []
    max_residual_after = 0.0
    for sc in scenarios:
        point = predictor(sc)
        if constraint_residuals(grid, adm, point.state, sc).is_feasible(1e-6):
            already += 1
            continue
        try:
            sol = restore_feasible(grid, adm, sc, point)
        except NoConvergence:
            failed += 1
            continue
        post = constraint_residuals(grid, adm, sol.v, sc)
        max_residual_after = max(max_residual_after, post.max_violation())
        distances.append(sol.distance_moved["total"])
        restored += 1
    summary = {
        **_stamp(cfg),
        "scenarios": len(scenarios),
        "warm_start": aggregate,
        "trimmed": ws.trimmed,
        "restoration": {
            "already_feasible": already,
            "restored": restored,
            "failed": failed,
            "mean_squared_distance": float(np.mean(distances)) if distances else 0.0,
            "max_residual_after": max_residual_after,
        },
    }
    _write_json(out / "restore.json", summary)
    _write_json(out / "restore_timing.json", timing)
    click.echo(
        f"wrote {out / 'restore.json'} "
        f"({restored} restored, {already} already feasible, {failed} failed)"
    )


@main.command("report")
@click.option(
    "--out", "out_dir", type=click.Path(), default=None,
    help="Directory for the consolidated report.",
)
@click.argument("run_dirs", nargs=-1, type=click.Path())
@_guarded
def report_cmd(out_dir, run_dirs):
    """Consolidate one or more run directories into a comparison report."""
    if out_dir is None:
        raise ConfigError("--out is required")
    if not run_dirs:
        raise ConfigError("at least one run directory is required")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = {}
    for rd in run_dirs:
        rd = Path(rd)
        entry = {}
        for name in ("train", "report", "restore"):
            path = rd / f"{name}.json"
            if path.is_file():
                entry[name] = json.loads(path.read_text())
        if not entry:
            raise ConfigError(f"no run artifacts found in {rd}")
        runs[rd.name] = entry
    _write_json(out / "consolidated.json", {"version": __version__, "runs": runs})

    lines = [f"opfproxy {__version__} consolidated report", ""]
    for name in sorted(runs):
        entry = runs[name]
        lines.append(f"run {name}")
        train_info = entry.get("train")
        if train_info:
            variant = "crown" if train_info.get("wc_enabled") else "base"
            lines.append(
                f"  head={train_info.get('head')} variant={variant} "
                f"test_rmse={train_info.get('test_rmse'):.6e}"
            )
        verify_info = entry.get("report")
        if verify_info:
            for fam, value in sorted(
                verify_info["family_certified_max"].items()
            ):
                lines.append(f"  certified {fam:<8s} {value:.6e}")
        restore_info = entry.get("restore")
        if restore_info:
            ws = restore_info.get("warm_start", {})
            lines.append(
                f"  warm-start rows={ws.get('rows', 0)} "
                f"cost_match_rate={ws.get('cost_match_rate', float('nan'))}"
            )
        lines.append("")
    base, crown = _pick_variants(runs)
    if base and crown:
        lines.append("crown vs base certified worst-case bounds")
        base_fams = runs[base]["report"]["family_certified_max"]
        crown_fams = runs[crown]["report"]["family_certified_max"]
        for fam in sorted(base_fams):
            bval = base_fams[fam]
            cval = crown_fams.get(fam)
            if cval is None:
                continue
            ratio = 100.0 * cval / bval if bval > 0 else float("nan")
            lines.append(
                f"  {fam:<8s} base={bval:.6e} crown={cval:.6e} "
                f"remaining={ratio:.1f}%"
            )
        lines.append("")
    text = "\n".join(lines)
    (out / "summary.txt").write_text(text)
    click.echo(text.rstrip("\n"))


def _pick_variants(runs: dict) -> tuple[str | None, str | None]:
    """First base run and first crown run that both carry verify output."""
    base = crown = None
    for name in sorted(runs):
        entry = runs[name]
        if "train" not in entry or "report" not in entry:
            continue
        if entry["train"].get("wc_enabled"):
            crown = crown or name
        else:
            base = base or name
    return base, crown


if __name__ == "__main__":
    main()
