"""Evaluation reports, the Q-preference probe, entropy estimates and the method grid."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .datagen import History, policy_upper_bound
from .decoding import ExtractionSpec, TokenPolicy, eval_games, play_batch, standard_error
from .model import CheckpointError, load_checkpoint, min_target_q
from .wordle import (
    MAX_TURNS,
    GameState,
    Trajectory,
    encode_history,
    letter_id,
    step,
)

WordPolicy = Callable[[History, np.random.Generator], str]


@dataclass
class EvalReport:
    algo: str
    games: int
    mean_return: float
    stderr: float
    solve_histogram: list[int]  # games solved on turn 1..6, then failures
    beta: float | None = None
    tau: float | None = None
    entropy_nats: float | None = None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if d["beta"] is not None and math.isinf(d["beta"]):
            d["beta"] = "inf"
        return d

    def histogram_mean(self) -> float:
        solved = sum(-k * n for k, n in enumerate(self.solve_histogram[:MAX_TURNS]))
        return (solved - MAX_TURNS * self.solve_histogram[MAX_TURNS]) / self.games


def solve_histogram(games: Iterable[GameState]) -> list[int]:
    hist = [0] * (MAX_TURNS + 1)
    for g in games:
        hist[g.turn - 1 if g.solved else MAX_TURNS] += 1
    return hist


def report(algo: str, games: Sequence[GameState], **extra) -> EvalReport:
    returns = np.array([g.total_return for g in games])
    return EvalReport(
        algo=algo,
        games=len(games),
        mean_return=float(returns.mean()),
        stderr=standard_error(returns),
        solve_histogram=solve_histogram(games),
        **extra,
    )


def evaluate_policy(policy: TokenPolicy | WordPolicy, vocab: Sequence[str], n_games: int, seed: int, algo: str = "", **extra) -> EvalReport:
    """Play ``n_games`` fresh games on the evaluation RNG stream.

    ``policy`` is either a token-level :class:`TokenPolicy` or a word-level
    callable ``(history, rng) -> guess``.
    """
    if n_games < 1:
        raise ValueError("n_games must be at least 1")
    if isinstance(policy, TokenPolicy):
        games = [r.game for r in play_batch(policy, vocab, n_games, seed)]
        if "beta" not in extra and policy.spec.mode != "behavior":
            extra["beta"] = policy.spec.beta
    else:
        answers, rngs = eval_games(vocab, n_games, seed)
        games = []
        for answer, rng in zip(answers, rngs):
            state = GameState(answer)
            while not state.done:
                state, _, _ = step(state, policy(state.history, rng))
            games.append(state)
    return report(algo, games, **extra)


# -- entropy -------------------------------------------------------------------------

def entropy_from_samples(neg_logps: Sequence[float], counts: Sequence[int]) -> float:
    """Mean over sampled episodes of summed -log p per sampled agent token."""
    per = [nl / c for nl, c in zip(neg_logps, counts) if c > 0]
    return float(np.mean(per)) if per else 0.0


def entropy_estimate(policy: TokenPolicy, vocab: Sequence[str], n_games: int, seed: int) -> float:
    """Monte Carlo policy entropy in nats per agent token (sampling decode)."""
    if policy.spec.greedy:
        raise ValueError("entropy estimates need a sampling policy (temperature > 0)")
    results = play_batch(policy, vocab, n_games, seed)
    return entropy_from_samples([r.neg_logp for r in results], [r.n_tokens for r in results])


def entropy_of_distributions(dist_fn: Callable[[object], np.ndarray], contexts: Sequence[object], samples_per_context: int, rng: np.random.Generator) -> float:
    """Monte Carlo entropy of single-step policies: one sampled token per episode."""
    neg, counts = [], []
    for ctx in contexts:
        p = np.asarray(dist_fn(ctx), dtype=np.float64)
        draws = rng.choice(len(p), size=samples_per_context, p=p)
        neg.extend(-np.log(p[draws]))
        counts.extend([1] * samples_per_context)
    return entropy_from_samples(neg, counts)


# -- Q-preference probes -------------------------------------------------------------

@dataclass(frozen=True)
class Probe:
    history: tuple[int, ...]
    oracle: int
    adversarial: int

    def to_json(self) -> str:
        return json.dumps({"history": list(self.history), "oracle": self.oracle, "adversarial": self.adversarial})


def build_probes(dataset: Sequence[Trajectory], vocab: Sequence[str], turn: int = 3) -> list[Probe]:
    """Decision points where the information-gain player and the replaying player part ways.

    Taken from episodes whose first two guesses match the information-gain
    player and that are still running at ``turn``. The oracle word is the
    information-gain choice, the adversarial word the replay of guess
    ``turn mod 2 ? 1 : 2``; the probe sits at their first differing letter.
    """
    probes: dict[Probe, None] = {}
    for traj in dataset:
        history = traj.history()
        if len(history) < turn:
            continue
        prefix = history[: turn - 1]
        if any(prefix[i][0] != policy_upper_bound(prefix[:i], vocab) for i in range(len(prefix))):
            continue
        oracle = policy_upper_bound(prefix, vocab)
        replay = prefix[0][0] if turn % 2 else prefix[1][0]
        if oracle == replay:
            continue
        k = next(i for i, (a, b) in enumerate(zip(oracle, replay)) if a != b)
        tokens = encode_history(prefix) + [letter_id(c) for c in oracle[:k]]
        probes[Probe(tuple(tokens), letter_id(oracle[k]), letter_id(replay[k]))] = None
    return list(probes)


@torch.no_grad()
def q_values_at(value_model, histories: Sequence[Sequence[int]]) -> list[np.ndarray]:
    """min(Q1, Q2) rows at the end of each history, from the online heads."""
    value_model.eval()
    out: list[np.ndarray | None] = [None] * len(histories)
    by_len: dict[int, list[int]] = {}
    for i, h in enumerate(histories):
        by_len.setdefault(len(h), []).append(i)
    for idx in by_len.values():
        tokens = torch.tensor([list(histories[i]) for i in idx], dtype=torch.long)
        q1, q2, _ = value_model(tokens)
        q = min_target_q(q1[:, -1], q2[:, -1]).double().numpy()
        for row, i in enumerate(idx):
            out[i] = q[row]
    return out


def q_preference(value_model, probes: Sequence[Probe]) -> float:
    """Fraction of probes where Q(h, oracle) > Q(h, adversarial)."""
    if not probes:
        raise ValueError("no probes")
    rows = q_values_at(value_model, [p.history for p in probes])
    wins = sum(1 for p, q in zip(probes, rows) if q[p.oracle] > q[p.adversarial])
    return wins / len(probes)


def read_probes(path: str | Path) -> list[Probe]:
    with open(path, encoding="utf-8") as f:
        return [Probe(tuple(d["history"]), int(d["oracle"]), int(d["adversarial"])) for d in map(json.loads, f) if d]


def write_probes(probes: Iterable[Probe], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in probes:
            f.write(p.to_json() + "\n")


# -- method grid ----------------------------------------------------------------------

RESULT_COLUMNS = ("algo", "tau", "beta", "pct", "games", "mean_return", "stderr", "best", "status")
DEFAULT_TAUS = (0.7, 0.8, 0.9)
DEFAULT_BETAS = (4.0, 8.0, 16.0, math.inf)
DEFAULT_PCTS = (10, 30, 50)


@dataclass
class GridConfig:
    """Where the checkpoints live and which cells to evaluate.

    Checkpoint directories under ``root``: ``bc`` (also the behavior policy),
    ``ilql_tau{tau}``, ``single_step``, ``filtered_bc_{pct}``.
    """

    root: str
    vocab: str
    games: int = 1024
    seed: int = 0
    out: str = "results.csv"
    taus: list[float] = field(default_factory=lambda: list(DEFAULT_TAUS))
    betas: list[float] = field(default_factory=lambda: list(DEFAULT_BETAS))
    single_step_betas: list[float] | None = None
    pcts: list[float] = field(default_factory=lambda: list(DEFAULT_PCTS))
    include_bc: bool = True
    figure: bool = True

    @classmethod
    def from_file(cls, path: str | Path) -> "GridConfig":
        from .decoding import parse_beta

        path = Path(path)
        d = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        for key in ("root", "vocab", "out"):
            if key in d and not Path(d[key]).is_absolute():
                d[key] = str(base / d[key])
        for key in ("betas", "single_step_betas"):
            if d.get(key) is not None:
                d[key] = [parse_beta(b) for b in d[key]]
        return cls(**d)


@dataclass
class Cell:
    algo: str
    checkpoint: str
    tau: float | None = None
    beta: float | None = None
    pct: float | None = None
    report: EvalReport | None = None
    best: bool = False

    def as_row(self) -> dict:
        r = self.report
        return {
            "algo": self.algo,
            "tau": "" if self.tau is None else f"{self.tau:g}",
            "beta": "" if self.beta is None else ("inf" if math.isinf(self.beta) else f"{self.beta:g}"),
            "pct": "" if self.pct is None else f"{self.pct:g}",
            "games": r.games if r else "",
            "mean_return": f"{r.mean_return:.6f}" if r else "",
            "stderr": f"{r.stderr:.6f}" if r else "",
            "best": int(self.best),
            "status": "ok" if r else "absent",
        }


def grid_cells(cfg: GridConfig) -> list[Cell]:
    root = Path(cfg.root)
    cells = []
    for tau in cfg.taus:
        for beta in cfg.betas:
            cells.append(Cell("ilql", str(root / f"ilql_tau{tau:g}"), tau=tau, beta=beta))
    for beta in cfg.single_step_betas if cfg.single_step_betas is not None else cfg.betas:
        cells.append(Cell("single_step", str(root / "single_step"), tau=0.5, beta=beta))
    for pct in cfg.pcts:
        cells.append(Cell("filtered_bc", str(root / f"filtered_bc_{pct:g}"), pct=pct))
    if cfg.include_bc:
        cells.append(Cell("bc", str(root / "bc")))
    return cells


def mark_best(cells: Sequence[Cell]) -> None:
    """Per algorithm, flag the highest mean return; ties go to the smaller beta."""
    groups: dict[str, list[Cell]] = {}
    for c in cells:
        if c.report is not None:
            groups.setdefault(c.algo, []).append(c)
    for group in groups.values():
        best = max(group, key=lambda c: (c.report.mean_return, -(c.beta if c.beta is not None else 0.0)))
        best.best = True


def _load(path: str, cache: dict):
    if path not in cache:
        try:
            cache[path] = load_checkpoint(path)[0]
        except (CheckpointError, FileNotFoundError):
            cache[path] = None
    return cache[path]


def run_suite(cfg: GridConfig, vocab: Sequence[str]) -> list[Cell]:
    """Evaluate every cell with greedy decoding; cells without a checkpoint stay absent."""
    cells = grid_cells(cfg)
    cache: dict = {}
    pi_beta = _load(str(Path(cfg.root) / "bc"), cache)
    for cell in cells:
        model = _load(cell.checkpoint, cache)
        if model is None:
            continue
        if cell.algo in ("bc", "filtered_bc"):
            policy = TokenPolicy(model, None, ExtractionSpec(mode="behavior"))
        else:
            if pi_beta is None and not math.isinf(cell.beta):
                continue
            policy = TokenPolicy(pi_beta, model, ExtractionSpec(beta=cell.beta))
        cell.report = evaluate_policy(policy, vocab, cfg.games, cfg.seed, algo=cell.algo, tau=cell.tau)
    mark_best(cells)
    return cells


def write_results(cells: Sequence[Cell], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for c in cells:
            w.writerow(c.as_row())


def best_by_algo(cells: Sequence[Cell]) -> dict[str, Cell]:
    return {c.algo: c for c in cells if c.best}
