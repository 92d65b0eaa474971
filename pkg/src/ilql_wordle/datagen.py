"""Scripted Wordle players, the mixture dataset, and color-grid retrofitting."""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .wordle import (
    ALL_GREEN,
    MAX_TURNS,
    Feedback,
    FeedbackTable,
    GameState,
    Trajectory,
    WordleError,
    compute_feedback,
    encode_episode,
    feedback_code,
    feedback_from_str,
    feedback_to_str,
    play,
    reset,
    step,
)

UPPER_BOUND = "upper_bound"
SUBOPTIMAL = "suboptimal"
ADVERSARIAL = "adversarial"
POLICY_KINDS = (UPPER_BOUND, SUBOPTIMAL, ADVERSARIAL)
DEFAULT_PROPORTIONS = (0.09, 0.455, 0.455)

# Distinguishes RNG streams so data and evaluation games never share draws.
DATA_STREAM = 0
EVAL_STREAM = 1
RETROFIT_STREAM = 2

History = Sequence[tuple[str, Feedback]]


def episode_rng(seed: int, index: int, stream: int = DATA_STREAM) -> np.random.Generator:
    return np.random.default_rng([stream, seed, index])


class Solver:
    """Candidate filtering and information-gain scoring over a fixed vocabulary."""

    def __init__(self, vocab: Sequence[str]):
        self.vocab = list(vocab)
        if not self.vocab:
            raise WordleError("empty vocabulary")
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.table = FeedbackTable.build(self.vocab)
        self._best: dict[tuple[int, ...], int] = {}

    def candidates(self, history: History) -> np.ndarray:
        keep = np.ones(len(self.vocab), dtype=bool)
        for guess, fb in history:
            code = feedback_code(fb)
            gi = self.index.get(guess)
            if gi is not None:
                keep &= self.table.codes[gi] == code
            else:
                keep &= np.array([feedback_code(compute_feedback(guess, w)) == code for w in self.vocab])
        return np.flatnonzero(keep)

    def information_gain(self, candidates: np.ndarray) -> np.ndarray:
        """Expected entropy drop (bits) of the uniform posterior, for every vocab word as the guess."""
        n = len(candidates)
        if n == 0:
            raise WordleError("no consistent candidates")
        codes = self.table.codes[:, candidates].astype(np.int64)
        offsets = np.arange(len(self.vocab))[:, None] * 243
        counts = np.bincount((codes + offsets).ravel(), minlength=243 * len(self.vocab))
        counts = counts.reshape(len(self.vocab), 243).astype(np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(counts > 0, counts * np.log2(counts), 0.0)
        return math.log2(n) - plogp.sum(axis=1) / n

    def best_guess(self, candidates: np.ndarray) -> str:
        key = tuple(int(c) for c in candidates)
        if key not in self._best:
            gain = np.round(self.information_gain(candidates), 12)
            is_candidate = np.zeros(len(self.vocab), dtype=bool)
            is_candidate[candidates] = True
            top = gain == gain.max()
            # Among equal gains a word that can still win is worth more.
            pick = np.flatnonzero(top & is_candidate)
            if len(pick) == 0:
                pick = np.flatnonzero(top)
            self._best[key] = int(pick[0])
        return self.vocab[self._best[key]]


@functools.lru_cache(maxsize=16)
def _solver(vocab: tuple[str, ...]) -> Solver:
    return Solver(vocab)


def get_solver(vocab: Sequence[str]) -> Solver:
    return _solver(tuple(vocab))


def information_gain(guess: str, history: History, vocab: Sequence[str]) -> float:
    solver = get_solver(vocab)
    return float(solver.information_gain(solver.candidates(history))[solver.index[guess]])


def policy_upper_bound(history: History, vocab: Sequence[str]) -> str:
    """Myopic information-gain maximizer; ties go to candidates, then vocab order."""
    solver = get_solver(vocab)
    return solver.best_guess(solver.candidates(history))


def suboptimal_with_branch(history: History, vocab: Sequence[str], rng: np.random.Generator) -> tuple[str, str]:
    if rng.random() < 0.5:
        return vocab[int(rng.integers(len(vocab)))], "random"
    cands = get_solver(vocab).candidates(history)
    if len(cands) == 0:
        return vocab[int(rng.integers(len(vocab)))], "random"
    return vocab[int(cands[int(rng.integers(len(cands)))])], "consistent"


def policy_suboptimal(history: History, vocab: Sequence[str], rng: np.random.Generator) -> str:
    return suboptimal_with_branch(history, vocab, rng)[0]


def policy_adversarial(history: History, vocab: Sequence[str]) -> str:
    """Plays like the upper bound for two turns, then alternates those two words forever."""
    if len(history) < 2:
        return policy_upper_bound(history, vocab)
    turn = len(history) + 1
    return history[0][0] if turn % 2 else history[1][0]


def scripted_policy(kind: str, vocab: Sequence[str]) -> Callable[[History, np.random.Generator], str]:
    if kind == UPPER_BOUND:
        return lambda h, rng: policy_upper_bound(h, vocab)
    if kind == SUBOPTIMAL:
        return lambda h, rng: policy_suboptimal(h, vocab, rng)
    if kind == ADVERSARIAL:
        return lambda h, rng: policy_adversarial(h, vocab)
    raise ValueError(f"unknown scripted policy {kind!r}")


def play_game(policy: Callable[[History, np.random.Generator], str], vocab: Sequence[str], rng: np.random.Generator) -> GameState:
    state = reset(vocab, rng)
    while not state.done:
        state, _, _ = step(state, policy(state.history, rng))
    return state


@dataclass
class MixtureSpec:
    vocab: list[str]
    total: int
    proportions: tuple[float, float, float] = DEFAULT_PROPORTIONS
    seed: int = 0

    def __post_init__(self):
        self.proportions = tuple(float(p) for p in self.proportions)
        if len(self.proportions) != len(POLICY_KINDS):
            raise ValueError(f"need {len(POLICY_KINDS)} proportions, got {len(self.proportions)}")
        if any(p < 0 for p in self.proportions) or abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ValueError(f"proportions must be nonnegative and sum to 1: {self.proportions}")

    def counts(self) -> dict[str, int]:
        nonzero = sum(1 for p in self.proportions if p > 0)
        if self.total < nonzero:
            raise ValueError(f"total {self.total} is smaller than the {nonzero} policies with nonzero share")
        counts = [round(p * self.total) for p in self.proportions]
        largest = max(range(len(counts)), key=lambda i: self.proportions[i])
        counts[largest] += self.total - sum(counts)
        return dict(zip(POLICY_KINDS, counts))

    def to_dict(self) -> dict:
        return {"total": self.total, "proportions": list(self.proportions), "seed": self.seed, "vocab_size": len(self.vocab)}


def generate_mixture(spec: MixtureSpec) -> list[Trajectory]:
    """Episodes from the three scripted players, in policy blocks, each on its own RNG stream."""
    out = []
    index = 0
    for kind, count in spec.counts().items():
        policy = scripted_policy(kind, spec.vocab)
        for _ in range(count):
            game = play_game(policy, spec.vocab, episode_rng(spec.seed, index))
            out.append(encode_episode(game, provenance=kind))
            index += 1
    return out


def filter_top_percent(dataset: Sequence[Trajectory], pct: float) -> list[Trajectory]:
    """Keep episodes whose return reaches the (100 - pct) percentile; threshold ties are kept."""
    if not dataset:
        raise ValueError("cannot filter an empty dataset")
    if not 0 < pct <= 100:
        raise ValueError(f"pct must be in (0, 100], got {pct}")
    returns = np.array([t.total_return for t in dataset])
    threshold = np.percentile(returns, 100.0 - pct)
    return [t for t, r in zip(dataset, returns) if r >= threshold]


# -- lava vocabularies --------------------------------------------------------------

def scripted_returns(vocab: Sequence[str]) -> tuple[float, float]:
    """Exact mean returns of the information-gain and replaying players over all answers."""
    solver = Solver(vocab)
    upper, adversarial = [], []
    for answer in solver.vocab:
        history: list = []
        for _ in range(MAX_TURNS):
            guess = solver.best_guess(solver.candidates(history))
            history.append((guess, compute_feedback(guess, answer)))
            if guess == answer:
                break
        ret = -float(len(history) - 1) if history[-1][0] == answer else -float(MAX_TURNS)
        upper.append(ret)
        # The replaying player only wins if the first two guesses do.
        adversarial.append(ret if len(history) <= 2 and history[-1][0] == answer else -float(MAX_TURNS))
    return float(np.mean(upper)), float(np.mean(adversarial))


def lava_score(vocab: Sequence[str]) -> float:
    upper, adversarial = scripted_returns(vocab)
    return 3.0 * upper - adversarial


def search_lava_vocab(size: int, seed: int, iters: int = 4000, search_seed: int = 0, pool: Sequence[str] | None = None) -> list[str]:
    """Hill-climb single-word swaps from ``sample_vocab(size, seed)``.

    Small random vocabularies rarely punish the replaying player: its first
    two information-gain guesses already solve most games. The search keeps
    swaps that make the information-gain player strong while the replay
    branch fails, which is the shape the synthetic mixture needs.
    """
    from .wordle import builtin_words, sample_vocab

    pool = list(pool) if pool is not None else builtin_words()
    rng = np.random.default_rng(search_seed)
    vocab = sample_vocab(size, seed)
    best = lava_score(vocab)
    for _ in range(iters):
        trial = list(vocab)
        trial[int(rng.integers(size))] = pool[int(rng.integers(len(pool)))]
        if len(set(trial)) < size:
            continue
        trial.sort()
        score = lava_score(trial)
        if score >= best:
            vocab, best = trial, score
    return vocab


# -- retrofitting -------------------------------------------------------------------

@dataclass
class Retrofit:
    answer: str
    guesses: list[str]

    def trajectory(self) -> Trajectory:
        return encode_episode(play(self.answer, self.guesses), provenance="retrofit")


def check_rows(rows: Sequence[Feedback]) -> list[Feedback]:
    rows = [tuple(r) for r in rows]
    if not 1 <= len(rows) <= MAX_TURNS:
        raise WordleError(f"a color grid has 1 to {MAX_TURNS} rows, got {len(rows)}")
    for r in rows:
        if len(r) != 5:
            raise WordleError(f"malformed color row {r!r}")
    return rows


def _terminates_properly(rows: list[Feedback]) -> bool:
    if any(r == ALL_GREEN for r in rows[:-1]):
        return False
    return rows[-1] == ALL_GREEN or len(rows) == MAX_TURNS


def retrofit(rows: Sequence[Feedback], vocab: Sequence[str], rng: np.random.Generator) -> Retrofit | None:
    """Find words from ``vocab`` that reproduce a published color grid.

    Returns None when no answer/guess assignment exists. Among feasible
    answers one is drawn uniformly, then each row's guess uniformly among the
    words producing that row against it.
    """
    rows = check_rows(rows)
    if not _terminates_properly(rows):
        return None
    solver = get_solver(vocab)
    row_codes = [feedback_code(r) for r in rows]
    feasible: list[tuple[int, list[np.ndarray]]] = []
    for ai in range(len(solver.vocab)):
        col = solver.table.codes[:, ai]
        per_row = []
        for code in row_codes:
            words = np.flatnonzero(col == code)
            if len(words) == 0:
                break
            per_row.append(words)
        else:
            feasible.append((ai, per_row))
    if not feasible:
        return None
    ai, per_row = feasible[int(rng.integers(len(feasible)))]
    guesses = [solver.vocab[int(words[int(rng.integers(len(words)))])] for words in per_row]
    return Retrofit(solver.vocab[ai], guesses)


def color_rows(game: GameState) -> list[Feedback]:
    return list(game.feedbacks)


def synthetic_grids(vocab: Sequence[str], n: int, seed: int, proportions=DEFAULT_PROPORTIONS) -> list[list[Feedback]]:
    """Color grids of scripted games with the words thrown away."""
    spec = MixtureSpec(list(vocab), n, proportions, seed)
    return [[fb for _, fb in t.history()] for t in generate_mixture(spec)]


def read_color_rows(path: str | Path) -> list[list[Feedback]]:
    grids = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows = json.loads(line)["rows"]
                grids.append(check_rows([feedback_from_str("".join(r)) for r in rows]))
    return grids


def write_color_rows(grids: Iterable[Sequence[Feedback]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rows in grids:
            f.write(json.dumps({"rows": [list(feedback_to_str(r)) for r in rows]}) + "\n")


@dataclass
class RetrofitStats:
    attempted: int = 0
    feasible: int = 0
    trajectories: list[Trajectory] = field(default_factory=list)


def retrofit_all(grids: Sequence[Sequence[Feedback]], vocab: Sequence[str], seed: int) -> RetrofitStats:
    stats = RetrofitStats()
    for i, rows in enumerate(grids):
        stats.attempted += 1
        found = retrofit(rows, vocab, episode_rng(seed, i, RETROFIT_STREAM))
        if found is not None:
            stats.feasible += 1
            stats.trajectories.append(found.trajectory())
    return stats
