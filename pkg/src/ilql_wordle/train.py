"""Mini-batch training for every algorithm, with checkpoints and a CSV log."""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses as L
from .compute import NonFiniteError, OptimizerState, adamw_update, grad_norm
from .datagen import filter_top_percent
from .model import LM, VALUE, ModelConfig, init_weights, make_target, polyak_update, save_checkpoint
from .wordle import Trajectory

log = logging.getLogger(__name__)

ALGOS = ("ilql", "single_step", "cql", "psi", "bc", "filtered_bc", "awr")
VALUE_ALGOS = ("ilql", "single_step", "cql", "psi")
LOG_COLUMNS = ("step", "total_loss", "q_loss", "v_loss", "cql_loss", "grad_norm", "wall_ms")


class TrainingError(RuntimeError):
    pass


def canonical_algo(name: str) -> str:
    algo = name.replace("-", "_")
    if algo not in ALGOS:
        raise ValueError(f"unknown algorithm {name!r}; choose from {', '.join(ALGOS)}")
    return algo


@dataclass
class TrainConfig:
    tau: float = 0.8
    alpha: float = 1e-4
    gamma: float = 0.99
    polyak: float = 0.005
    lr: float = 1e-5
    weight_decay: float = 0.0
    batch_size: int = 64
    max_steps: int = 2000
    seed: int = 0
    eval_every: int = 100
    filter_pct: float = 100.0
    psi_c: float = 1.0
    awr_beta: float = 4.0
    awr_max_weight: float = L.AWR_MAX_WEIGHT
    val_fraction: float = 0.1
    early_stopping: bool = True
    min_steps: int = 200

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if not 0 <= self.tau < 1:
            raise ValueError(f"tau must be in [0, 1), got {self.tau}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def is_validation(index: int, fraction: float) -> bool:
    """Stable split keyed on the episode index."""
    h = int.from_bytes(hashlib.blake2b(str(index).encode(), digest_size=8).digest(), "little")
    return (h % 10_000) < fraction * 10_000


def split_dataset(dataset: Sequence[Trajectory], fraction: float) -> tuple[list[Trajectory], list[Trajectory]]:
    train, val = [], []
    for i, t in enumerate(dataset):
        (val if is_validation(i, fraction) else train).append(t)
    if not train:
        train, val = list(dataset), []
    return train, val


class BatchSource:
    """Whole dataset padded once; batches are index slices trimmed to their longest episode."""

    def __init__(self, dataset: Sequence[Trajectory], dtype=None):
        self.full = L.collate(dataset, dtype)
        self.n = len(dataset)

    def take(self, idx) -> L.Batch:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        t = int(self.full.lengths[idx].max())
        f = self.full
        return L.Batch(
            tokens=f.tokens[idx, :t],
            action_mask=f.action_mask[idx, :t],
            rewards=f.rewards[idx, :t],
            done=f.done[idx],
            lengths=f.lengths[idx],
            next_pred=f.next_pred[idx, : t - 1],
            terminal=f.terminal[idx, : t - 1],
        )

    def batches(self, size: int, rng: np.random.Generator):
        while True:
            order = rng.permutation(self.n)
            for i in range(0, self.n - size + 1 if self.n >= size else 1, size):
                yield self.take(order[i : i + size])


@dataclass
class TrainResult:
    algo: str
    model: torch.nn.Module
    target: torch.nn.Module | None
    steps: int
    log: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def _loss(algo, batch, model, target, cfg: TrainConfig, pi_beta, value_model) -> L.LossParts:
    if algo == "ilql":
        return L.ilql_loss(batch, model, target, cfg.tau, cfg.alpha, cfg.gamma)
    if algo == "single_step":
        return L.ilql_loss(batch, model, target, 0.5, cfg.alpha, cfg.gamma)
    if algo == "cql":
        return L.per_token_cql_loss(batch, model, target, cfg.alpha, cfg.gamma)
    if algo == "psi":
        with torch.no_grad():
            logits = pi_beta(batch.tokens)
        return L.psi_loss(batch, model, target, logits, cfg.psi_c, cfg.alpha, cfg.gamma)
    if algo == "awr":
        qhat, v = L.value_estimates(value_model, batch)
        loss = L.awr_extraction_loss(batch, model, qhat, v, cfg.awr_beta, cfg.awr_max_weight)
    else:
        loss = L.bc_loss(batch, model)
    zero = torch.zeros((), dtype=loss.dtype)
    return L.LossParts(loss, zero, zero, zero)


def train(
    algo: str,
    dataset: Sequence[Trajectory],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    out_dir: str | Path | None = None,
    pi_beta: torch.nn.Module | None = None,
    value_model: torch.nn.Module | None = None,
) -> TrainResult:
    """Train one model; value algorithms also keep a Polyak target network.

    ``pi_beta`` (a trained behavior model) is required for psi, ``value_model``
    for awr. When ``out_dir`` is given the final weights, the target network
    (under ``target/``) and ``train_log.csv`` are written there.
    """
    algo = canonical_algo(algo)
    if not dataset:
        raise TrainingError("empty dataset")
    if algo == "psi" and pi_beta is None:
        raise TrainingError("psi-learning needs a trained behavior-policy checkpoint")
    if algo == "awr" and value_model is None:
        raise TrainingError("AWR extraction needs a trained value checkpoint")
    if algo == "filtered_bc":
        dataset = filter_top_percent(dataset, config.filter_pct)
    model_config = model_config or ModelConfig()
    head = VALUE if algo in VALUE_ALGOS else LM
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    train_set, val_set = split_dataset(dataset, config.val_fraction)
    source = BatchSource(train_set)
    val_source = BatchSource(val_set) if val_set else None
    model = init_weights(model_config.with_head(head), config.seed)
    target = make_target(model) if head == VALUE else None
    for frozen in (pi_beta, value_model):
        if frozen is not None:
            frozen.eval()
    params = dict(model.named_parameters())
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)

    rows: list[dict] = []
    window: list[float] = []
    stopped = False
    start = time.perf_counter()
    batches = source.batches(min(config.batch_size, source.n), rng)
    step = 0
    while step < config.max_steps:
        batch = next(batches)
        model.train()
        try:
            parts = _loss(algo, batch, model, target, config, pi_beta, value_model)
        except NonFiniteError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        grads = torch.autograd.grad(parts.total, list(params.values()), allow_unused=True)
        grads = dict(zip(params, grads))
        gn = grad_norm(grads.values())
        try:
            adamw_update(params, grads, opt)
        except NonFiniteError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        if target is not None:
            polyak_update(target, model, config.polyak)
        step += 1
        row = {"step": step, **parts.as_floats(), "grad_norm": gn, "wall_ms": round(1000 * (time.perf_counter() - start), 1)}
        rows.append(row)
        window.append(row["total_loss"])
        if val_source is not None and step % config.eval_every == 0:
            val = validation_loss(algo, val_source, model, target, config, pi_beta, value_model)
            train_loss = float(np.mean(window))
            window = []
            log.info("%s step %d train %.4f val %.4f", algo, step, train_loss, val)
            if head == LM and config.early_stopping and step >= config.min_steps and val > train_loss:
                stopped = True
                break
    model.eval()
    result = TrainResult(algo, model, target, step, rows, stopped)
    if out_dir is not None:
        write_outputs(result, config, out_dir)
    return result


@torch.no_grad()
def validation_loss(algo, source: BatchSource, model, target, cfg: TrainConfig, pi_beta=None, value_model=None, max_episodes: int = 512) -> float:
    model.eval()
    total, count = 0.0, 0
    for i in range(0, min(source.n, max_episodes), 128):
        batch = source.take(np.arange(i, min(i + 128, source.n, max_episodes)))
        n = batch.n_actions
        total += float(_loss(algo, batch, model, target, cfg, pi_beta, value_model).total) * n
        count += n
    return total / max(count, 1)


def write_outputs(result: TrainResult, config: TrainConfig, out_dir: str | Path) -> None:
    out = Path(out_dir)
    meta = {"algo": result.algo, **asdict(config)}
    save_checkpoint(out, result.model, seed=config.seed, train_config=meta, step=result.steps)
    if result.target is not None:
        save_checkpoint(out / "target", result.target, seed=config.seed, train_config=meta, step=result.steps)
    with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in result.log:
            w.writerow({k: row[k] for k in LOG_COLUMNS})
