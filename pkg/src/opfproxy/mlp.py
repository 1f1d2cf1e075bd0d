"""Feed-forward proxies that map load demand to OPF setpoints.

Two heads share one architecture (three hidden ReLU layers, identity
output, float64):

* power head: outputs generator active-power setpoints followed by
  generator voltage magnitudes, dimension 2*n_gen;
* voltage head: outputs real bus voltages followed by imaginary bus
  voltages, dimension 2*n_bus.

Inputs are the stacked active and reactive demands of all loads
(dimension 2*n_load).  Inputs and outputs are normalized by affine maps
fitted on the training split; the maps are stored on the model so bound
propagation can fold them into the first and last linear layers.

Training uses Adam with per-epoch shuffling, magnitude pruning of the
hidden layers halfway through the schedule, and an optional worst-case
penalty hook that takes one extra optimizer step per epoch.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Callable

import numpy as np
import torch

from .data import LabeledDataset
from .grid import AdmittanceSet, GridModel

POWER_HEAD = "power"
VOLTAGE_HEAD = "voltage"

# Defaults for the 57-bus configuration; smaller cases train fine with
# the same settings.
DEFAULT_HIDDEN = 25
DEFAULT_BATCH = 25
DEFAULT_LR = 5e-4
DEFAULT_EPOCHS = 1000
PRUNE_EPOCH = 500
PRUNE_FRACTION = 0.5

# Features with a train-split standard deviation at or below this floor
# are stored unscaled so the normalization map stays invertible.
_SCALE_FLOOR = 1e-6

# Keeps sqrt gradients finite when a current magnitude is exactly zero;
# distorts magnitudes by less than 1e-150.
_MAG_EPS = 1e-300

MODEL_FORMAT = "opfproxy-mlp"


class HeadMismatch(Exception):
    """A loss or penalty was asked to evaluate the wrong model head."""


class Divergence(Exception):
    """Training loss became non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Nonnegative multipliers for the loss terms of both heads.

    ``vg`` weighs the generator voltage-magnitude box penalty of the
    power head; ``vm`` the all-bus magnitude penalty of the voltage
    head.  ``wc`` scales the worst-case penalty applied by the training
    hook.
    """

    mse: float = 1.0
    pg: float = 0.0
    qg: float = 0.0
    vg: float = 0.0
    vm: float = 0.0
    flow: float = 0.0
    balance: float = 0.0
    wc: float = 0.0

    def __post_init__(self):
        for name, value in dataclasses.asdict(self).items():
            if not (value >= 0.0 and math.isfinite(value)):
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


class NetTensors:
    """Torch copies of the network data needed inside loss functions.

    Bundles the rectangular admittance matrices, bus index groups, and
    limit vectors of one grid so batched physics terms stay pure tensor
    algebra.
    """

    def __init__(self, model: GridModel, adm: AdmittanceSet):
        dt = torch.float64
        self.n_bus = model.n_bus
        self.n_branch = model.n_branch
        self.n_gen = model.n_gen
        self.n_load = model.n_load
        self.y_bus_rect = torch.tensor(adm.y_bus_rect, dtype=dt)
        self.y_l_rect = torch.tensor(adm.y_l_rect, dtype=dt)
        self.gen_pos = torch.tensor(model.gen_bus_positions(), dtype=torch.long)
        self.nongen_pos = torch.tensor(model.nongen_bus_positions(), dtype=torch.long)
        self.load_pos = torch.tensor(model.load_bus_positions(), dtype=torch.long)
        limits = model.gen_limits()
        self.p_min = torch.tensor(limits["p_min"], dtype=dt)
        self.p_max = torch.tensor(limits["p_max"], dtype=dt)
        self.q_min = torch.tensor(limits["q_min"], dtype=dt)
        self.q_max = torch.tensor(limits["q_max"], dtype=dt)
        v_lo, v_hi = model.v_limits()
        self.v_min = torch.tensor(v_lo, dtype=dt)
        self.v_max = torch.tensor(v_hi, dtype=dt)
        self.i_max = torch.tensor(model.flow_limits(), dtype=dt)

    def scatter_demand(self, demand: torch.Tensor) -> torch.Tensor:
        """Per-load columns (batch, n_load) -> per-bus columns (batch, n_bus)."""
        out = demand.new_zeros(demand.shape[0], self.n_bus)
        out.index_add_(1, self.load_pos, demand)
        return out

    def injections(self, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Bus power injections (p, q) for a batch of stacked voltages."""
        nb = self.n_bus
        i = v @ self.y_bus_rect.T
        vr, vi = v[:, :nb], v[:, nb:]
        ir, ii = i[:, :nb], i[:, nb:]
        return vr * ir + vi * ii, vi * ir - vr * ii

    def branch_magnitudes(self, v: torch.Tensor) -> torch.Tensor:
        """From-end then to-end current magnitudes, shape (batch, 2*n_branch)."""
        nl = self.n_branch
        cur = v @ self.y_l_rect.T
        f = torch.sqrt(cur[:, :nl] ** 2 + cur[:, nl : 2 * nl] ** 2 + _MAG_EPS)
        t = torch.sqrt(cur[:, 2 * nl : 3 * nl] ** 2 + cur[:, 3 * nl :] ** 2 + _MAG_EPS)
        return torch.cat([f, t], dim=1)

    def voltage_magnitudes(self, v: torch.Tensor) -> torch.Tensor:
        nb = self.n_bus
        return torch.sqrt(v[:, :nb] ** 2 + v[:, nb:] ** 2 + _MAG_EPS)


class MlpModel(torch.nn.Module):
    """Three-hidden-layer ReLU MLP with affine input/output normalization.

    ``forward`` consumes a normalized input and produces a physical
    output (the stored output map is applied inside); ``predict``
    consumes physical inputs.  Construction seeds the global torch
    generator so identical seeds give identical initial weights.
    """

    def __init__(
        self,
        sizes: list[int],
        head: str,
        in_center: np.ndarray,
        in_scale: np.ndarray,
        out_center: np.ndarray,
        out_scale: np.ndarray,
        seed: int = 0,
    ):
        super().__init__()
        if head not in (POWER_HEAD, VOLTAGE_HEAD):
            raise ValueError(f"unknown head {head!r}")
        if len(sizes) != 5:
            raise ValueError("sizes must list input, three hidden, output widths")
        if any(s < 1 for s in sizes):
            raise ValueError("layer widths must be positive")
        in_center = np.asarray(in_center, dtype=float)
        in_scale = np.asarray(in_scale, dtype=float)
        out_center = np.asarray(out_center, dtype=float)
        out_scale = np.asarray(out_scale, dtype=float)
        if in_center.shape != (sizes[0],) or in_scale.shape != (sizes[0],):
            raise ValueError("input normalization does not match input width")
        if out_center.shape != (sizes[-1],) or out_scale.shape != (sizes[-1],):
            raise ValueError("output normalization does not match output width")
        if np.any(in_scale == 0.0) or np.any(out_scale == 0.0):
            raise ValueError("normalization scales must be nonzero")
        self.head = head
        torch.manual_seed(seed)
        self.layers = torch.nn.ModuleList(
            torch.nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:])
        )
        dt = torch.float64
        self.register_buffer("in_center", torch.tensor(in_center, dtype=dt))
        self.register_buffer("in_scale", torch.tensor(in_scale, dtype=dt))
        self.register_buffer("out_center", torch.tensor(out_center, dtype=dt))
        self.register_buffer("out_scale", torch.tensor(out_scale, dtype=dt))
        for k in range(3):
            mask = torch.ones(sizes[k + 1], sizes[k], dtype=dt)
            self.register_buffer(f"prune_mask_{k}", mask)
        self.double()

    @property
    def sizes(self) -> list[int]:
        widths = [self.layers[0].in_features]
        widths.extend(layer.out_features for layer in self.layers)
        return widths

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_features

    def prune_masks(self) -> list[torch.Tensor]:
        return [getattr(self, f"prune_mask_{k}") for k in range(3)]

    def normalize_input(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.in_center) / self.in_scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        raw = self.layers[-1](h)
        return self.out_center + self.out_scale * raw

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(self.normalize_input(x))

    def enforce_masks(self) -> None:
        """Re-zero pruned weights; a no-op before pruning (masks all ones)."""
        with torch.no_grad():
            for k, mask in enumerate(self.prune_masks()):
                self.layers[k].weight.mul_(mask)

    def apply_pruning(self, fraction: float = PRUNE_FRACTION) -> None:
        """Zero the ceil(fraction*count) smallest-|w| weights per hidden layer.

        The zeros are recorded in the masks, so enforce_masks keeps them
        zero through later optimizer steps.
        """
        if not 0.0 <= fraction <= 1.0:
            raise ValueError("fraction must be in [0, 1]")
        with torch.no_grad():
            for k, mask in enumerate(self.prune_masks()):
                weight = self.layers[k].weight
                flat = weight.abs().flatten()
                count = math.ceil(fraction * flat.numel())
                order = torch.argsort(flat, stable=True)
                mask.view(-1)[order[:count]] = 0.0
                weight.mul_(mask)


def fit_normalization(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and standard deviations, with constant columns unscaled."""
    values = np.asarray(values, dtype=float)
    center = values.mean(axis=0)
    std = values.std(axis=0)
    scale = np.where(std > _SCALE_FLOOR, std, 1.0)
    return center, scale


def dataset_inputs(dataset: LabeledDataset) -> np.ndarray:
    """Stacked (p_d, q_d) rows in physical units, shape (n, 2*n_load)."""
    return np.hstack([dataset.scenarios.p_d, dataset.scenarios.q_d])


def dataset_targets(dataset: LabeledDataset, head: str) -> np.ndarray:
    if head == POWER_HEAD:
        return np.hstack([dataset.p_g, dataset.v_g])
    if head == VOLTAGE_HEAD:
        return np.hstack([dataset.v_r, dataset.v_i])
    raise ValueError(f"unknown head {head!r}")


def build_model(
    dataset: LabeledDataset,
    head: str,
    hidden: int = DEFAULT_HIDDEN,
    seed: int = 0,
) -> MlpModel:
    """Construct a model sized for the dataset, normalized on its train split."""
    x = dataset_inputs(dataset)
    y = dataset_targets(dataset, head)
    rows = dataset.scenarios.indices("train")
    if rows.size == 0:
        raise ValueError("dataset has no train split")
    in_center, in_scale = fit_normalization(x[rows])
    out_center, out_scale = fit_normalization(y[rows])
    sizes = [x.shape[1], hidden, hidden, hidden, y.shape[1]]
    return MlpModel(sizes, head, in_center, in_scale, out_center, out_scale, seed=seed)


def split_tensors(
    dataset: LabeledDataset, head: str, split: str | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Physical (inputs, targets) tensors, optionally restricted to one split."""
    x = dataset_inputs(dataset)
    y = dataset_targets(dataset, head)
    if split is not None:
        rows = dataset.scenarios.indices(split)
        x, y = x[rows], y[rows]
    dt = torch.float64
    return torch.tensor(x, dtype=dt), torch.tensor(y, dtype=dt)


def penalty_relu(z: torch.Tensor, lo, hi) -> torch.Tensor:
    """Sum of squared excesses of z outside [lo, hi]; zero iff z inside."""
    over = torch.relu(z - hi)
    under = torch.relu(lo - z)
    return (over * over).sum() + (under * under).sum()


def _box_term(z: torch.Tensor, lo, hi) -> torch.Tensor:
    # Batch mean of the per-sample summed squared excesses.
    over = torch.relu(z - hi)
    under = torch.relu(lo - z)
    return ((over * over).sum(dim=1) + (under * under).sum(dim=1)).mean()


def loss_power(
    model: MlpModel,
    batch: tuple[torch.Tensor, torch.Tensor],
    net: NetTensors,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """MSE plus generator-box penalties on the direct outputs.

    Returns the weighted total and the unweighted terms; the total
    equals the weighted sum of the terms.
    """
    if model.head != POWER_HEAD:
        raise HeadMismatch("loss_power requires a power-head model")
    x, y = batch
    pred = model.predict(x)
    ng = net.n_gen
    if pred.shape[1] != 2 * ng:
        raise HeadMismatch("power-head output width does not match generator count")
    terms = {
        "mse": ((pred - y) ** 2).mean(),
        "pg": _box_term(pred[:, :ng], net.p_min, net.p_max),
        "vg": _box_term(
            pred[:, ng:], net.v_min[net.gen_pos], net.v_max[net.gen_pos]
        ),
    }
    total = weights.mse * terms["mse"] + weights.pg * terms["pg"] + weights.vg * terms["vg"]
    return total, terms


def loss_voltage(
    model: MlpModel,
    batch: tuple[torch.Tensor, torch.Tensor],
    net: NetTensors,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """MSE plus physics penalties evaluated from the predicted voltages.

    Generator injections are recovered through the admittance matrix and
    the batch demands; the balance term penalizes the squared power
    mismatch at buses without a generator.
    """
    if model.head != VOLTAGE_HEAD:
        raise HeadMismatch("loss_voltage requires a voltage-head model")
    x, y = batch
    pred = model.predict(x)
    if pred.shape[1] != 2 * net.n_bus:
        raise HeadMismatch("voltage-head output width does not match bus count")
    nd = net.n_load
    p_bus = net.scatter_demand(x[:, :nd])
    q_bus = net.scatter_demand(x[:, nd:])
    p, q = net.injections(pred)
    pg = (p + p_bus)[:, net.gen_pos]
    qg = (q + q_bus)[:, net.gen_pos]
    vm = net.voltage_magnitudes(pred)
    flows = net.branch_magnitudes(pred)
    i_lim = torch.cat([net.i_max, net.i_max])
    mis_p = (p + p_bus)[:, net.nongen_pos]
    mis_q = (q + q_bus)[:, net.nongen_pos]
    terms = {
        "mse": ((pred - y) ** 2).mean(),
        "pg": _box_term(pg, net.p_min, net.p_max),
        "qg": _box_term(qg, net.q_min, net.q_max),
        "vm": _box_term(vm, net.v_min, net.v_max),
        "flow": (torch.relu(flows - i_lim) ** 2).sum(dim=1).mean(),
        "balance": (mis_p**2 + mis_q**2).sum(dim=1).mean(),
    }
    total = (
        weights.mse * terms["mse"]
        + weights.pg * terms["pg"]
        + weights.qg * terms["qg"]
        + weights.vm * terms["vm"]
        + weights.flow * terms["flow"]
        + weights.balance * terms["balance"]
    )
    return total, terms


@dataclasses.dataclass
class TrainConfig:
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH
    lr: float = DEFAULT_LR
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    seed: int = 0
    prune_epoch: int = PRUNE_EPOCH
    prune_fraction: float = PRUNE_FRACTION
    # Optional worst-case penalty: called once per epoch, must return a
    # scalar tensor differentiable in the model weights.  Training takes
    # one extra Adam step on weights.wc times the returned value.
    wc_hook: Callable[[MlpModel], torch.Tensor] | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


def _loss_fn(model: MlpModel):
    return loss_power if model.head == POWER_HEAD else loss_voltage


def train(
    model: MlpModel,
    dataset: LabeledDataset,
    net: NetTensors,
    config: TrainConfig,
) -> list[dict]:
    """Adam training loop with pruning and the optional worst-case step.

    Returns one history row per epoch with train/val loss and, when the
    hook is active, the worst-case penalty value.  Deterministic for a
    fixed seed and thread count (the loop pins torch to one thread).
    """
    torch.set_num_threads(1)
    loss_fn = _loss_fn(model)
    x_train, y_train = split_tensors(dataset, model.head, "train")
    x_val, y_val = split_tensors(dataset, model.head, "val")
    n_train = x_train.shape[0]
    if n_train == 0:
        raise ValueError("dataset has no train split")
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    weights = config.weights
    use_wc = config.wc_hook is not None and weights.wc > 0.0
    history: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n_train)
        running = 0.0
        for start in range(0, n_train, config.batch_size):
            rows = perm[start : start + config.batch_size]
            total, _ = loss_fn(model, (x_train[rows], y_train[rows]), net, weights)
            if not torch.isfinite(total):
                raise Divergence(epoch)
            opt.zero_grad()
            total.backward()
            opt.step()
            model.enforce_masks()
            running += float(total.detach()) * len(rows)
        train_loss = running / n_train
        wc_value = None
        if use_wc:
            penalty = config.wc_hook(model)
            if not torch.isfinite(penalty):
                raise Divergence(epoch)
            wc_value = float(penalty.detach())
            opt.zero_grad()
            (weights.wc * penalty).backward()
            opt.step()
            model.enforce_masks()
        with torch.no_grad():
            if x_val.shape[0]:
                val_total, _ = loss_fn(model, (x_val, y_val), net, weights)
                val_loss = float(val_total)
            else:
                val_loss = math.nan
        if not math.isfinite(train_loss):
            raise Divergence(epoch)
        if epoch == config.prune_epoch and config.prune_fraction > 0.0:
            model.apply_pruning(config.prune_fraction)
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "wc_penalty": wc_value,
            }
        )
    return history


def history_to_csv(history: list[dict]) -> str:
    lines = ["epoch,train_loss,val_loss,wc_penalty"]
    for row in history:
        wc = "" if row["wc_penalty"] is None else repr(row["wc_penalty"])
        lines.append(
            f"{row['epoch']},{repr(row['train_loss'])},{repr(row['val_loss'])},{wc}"
        )
    return "\n".join(lines) + "\n"


def prediction_rmse(model: MlpModel, dataset: LabeledDataset, split: str) -> float:
    """Root mean squared prediction error over one split, physical units."""
    x, y = split_tensors(dataset, model.head, split)
    with torch.no_grad():
        pred = model.predict(x)
    return float(torch.sqrt(((pred - y) ** 2).mean()))


def save_model(model: MlpModel, path, config_hash: str | None = None) -> None:
    """Write the model as JSON: shapes, row-major weights, normalization,
    head tag, prune masks, and the training config hash."""
    payload = {
        "format": MODEL_FORMAT,
        "head": model.head,
        "sizes": model.sizes,
        "weights": [layer.weight.detach().numpy().tolist() for layer in model.layers],
        "biases": [layer.bias.detach().numpy().tolist() for layer in model.layers],
        "input_center": model.in_center.numpy().tolist(),
        "input_scale": model.in_scale.numpy().tolist(),
        "output_center": model.out_center.numpy().tolist(),
        "output_scale": model.out_scale.numpy().tolist(),
        "prune_masks": [
            [int(v) for v in mask.flatten().tolist()] for mask in model.prune_masks()
        ],
        "config_hash": config_hash,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_model(path) -> MlpModel:
    """Rebuild a saved model bit-exactly; the stored config hash is
    attached as ``model.config_hash``."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a model file: {path}")
    sizes = payload["sizes"]
    model = MlpModel(
        sizes,
        payload["head"],
        np.array(payload["input_center"], dtype=float),
        np.array(payload["input_scale"], dtype=float),
        np.array(payload["output_center"], dtype=float),
        np.array(payload["output_scale"], dtype=float),
        seed=0,
    )
    with torch.no_grad():
        for layer, w, b in zip(model.layers, payload["weights"], payload["biases"]):
            layer.weight.copy_(torch.tensor(w, dtype=torch.float64))
            layer.bias.copy_(torch.tensor(b, dtype=torch.float64))
        for k, mask in enumerate(payload["prune_masks"]):
            buf = getattr(model, f"prune_mask_{k}")
            buf.copy_(torch.tensor(mask, dtype=torch.float64).reshape(buf.shape))
    model.config_hash = payload.get("config_hash")
    return model
