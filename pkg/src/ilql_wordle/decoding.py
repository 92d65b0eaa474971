"""Acting with learned values: perturb behavior-policy logits by beta * (Q - V)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .datagen import EVAL_STREAM, episode_rng
from .model import min_target_q
from .wordle import (
    BOS_ID,
    LETTERS,
    MAX_TURNS,
    WORD_LENGTH,
    GameState,
    color_id,
    reset,
    step,
)

PERTURBED, GREEDY_Q, BEHAVIOR = "perturbed", "greedy_q", "behavior"
N_LETTERS = len(LETTERS)


@dataclass
class ExtractionSpec:
    beta: float = 8.0
    mode: str = PERTURBED
    temperature: float = 0.0  # 0 means greedy decoding
    top_p: float | None = None

    def __post_init__(self):
        self.beta = float(self.beta)
        if not (self.beta >= 0):
            raise ValueError(f"beta must be >= 0 or inf, got {self.beta}")
        if self.mode not in (PERTURBED, GREEDY_Q, BEHAVIOR):
            raise ValueError(f"unknown extraction mode {self.mode!r}")
        if math.isinf(self.beta) and self.mode == PERTURBED:
            self.mode = GREEDY_Q

    @property
    def greedy(self) -> bool:
        return self.temperature == 0


def parse_beta(text: str | float) -> float:
    if isinstance(text, str) and text.strip().lower() in ("inf", "infinity", "∞"):
        return math.inf
    return float(text)


def extract_logits(pi_logits: torch.Tensor, q: torch.Tensor, v: torch.Tensor, beta: float) -> torch.Tensor:
    """log pi_beta + beta * (Q - V), left unnormalized; beta = inf scores by Q alone."""
    if math.isinf(beta):
        return q
    v = torch.as_tensor(v, dtype=q.dtype)
    if v.dim() == q.dim() - 1:
        v = v.unsqueeze(-1)
    return torch.log_softmax(pi_logits, dim=-1) + beta * (q - v)


def top_p_mask(log_probs: torch.Tensor, p: float) -> torch.Tensor:
    """Drop the tail of a distribution beyond cumulative mass ``p`` (the top token always stays)."""
    sorted_lp, order = log_probs.sort(dim=-1, descending=True)
    cum = sorted_lp.exp().cumsum(-1)
    drop_sorted = (cum - sorted_lp.exp()) >= p
    drop = torch.zeros_like(drop_sorted).scatter(-1, order, drop_sorted)
    return log_probs.masked_fill(drop, float("-inf"))


class TokenPolicy:
    """Scores the next agent letter from the token history."""

    def __init__(self, pi_beta=None, value=None, spec: ExtractionSpec | None = None):
        self.spec = spec or ExtractionSpec()
        if self.spec.mode != BEHAVIOR and value is None:
            raise ValueError(f"mode {self.spec.mode!r} needs a value model")
        if self.spec.mode == PERTURBED and pi_beta is None:
            raise ValueError("perturbed extraction needs a behavior model")
        if self.spec.mode == BEHAVIOR and pi_beta is None:
            raise ValueError("behavior-only decoding needs a behavior model")
        self.pi_beta = pi_beta
        self.value = value
        for m in (pi_beta, value):
            if m is not None:
                m.eval()

    @torch.no_grad()
    def scores(self, tokens: torch.Tensor) -> np.ndarray:
        """[B, 26] float64 letter scores at the last position (softmax gives the policy)."""
        spec = self.spec
        pi = None
        if spec.mode != GREEDY_Q:
            pi = torch.log_softmax(self.pi_beta(tokens)[:, -1].double(), dim=-1)
            if spec.top_p is not None:
                pi = top_p_mask(pi, spec.top_p)
        if spec.mode == BEHAVIOR:
            out = pi
        else:
            q1, q2, v = self.value(tokens)
            q = min_target_q(q1[:, -1], q2[:, -1]).double()
            out = q if spec.mode == GREEDY_Q else extract_logits(pi, q, v[:, -1].double(), spec.beta)
        return out[:, :N_LETTERS].numpy()


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class Rollout:
    game: GameState
    neg_logp: float = 0.0
    n_tokens: int = 0

    @property
    def total_return(self) -> float:
        return self.game.total_return

    @property
    def entropy_per_token(self) -> float:
        return self.neg_logp / self.n_tokens if self.n_tokens else 0.0


def rollout(policy: TokenPolicy, answers: Sequence[str], rngs: Sequence[np.random.Generator] | None = None) -> list[Rollout]:
    """Play one game per answer in lockstep; finished games leave the batch.

    Greedy mode takes the lowest-id argmax. Sampling draws one uniform per
    token from the game's own generator, so results do not depend on batch
    composition.
    """
    spec = policy.spec
    if not spec.greedy and rngs is None:
        raise ValueError("sampling needs one generator per game")
    results = [Rollout(GameState(a)) for a in answers]
    tokens = torch.full((len(answers), 1), BOS_ID, dtype=torch.long)
    active = np.arange(len(answers))
    for _ in range(MAX_TURNS):
        if len(active) == 0:
            break
        letters = np.zeros((len(active), WORD_LENGTH), dtype=np.int64)
        for k in range(WORD_LENGTH):
            scores = policy.scores(tokens)
            if spec.greedy:
                choice = scores.argmax(axis=-1)
            else:
                logp = _log_softmax_np(scores / spec.temperature)
                cdf = np.exp(logp).cumsum(axis=-1)
                u = np.array([rngs[g].random() for g in active])
                choice = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=-1), N_LETTERS - 1)
                for row, g in enumerate(active):
                    results[g].neg_logp -= float(logp[row, choice[row]])
            for g in active:
                results[g].n_tokens += 1
            letters[:, k] = choice
            tokens = torch.cat([tokens, torch.as_tensor(choice).unsqueeze(1)], dim=1)
        colors = []
        keep = []
        for row, g in enumerate(active):
            guess = "".join(LETTERS[i] for i in letters[row])
            state, _, done = step(results[g].game, guess)
            results[g].game = state
            colors.append([color_id(c) for c in state.feedbacks[-1]])
            if not done:
                keep.append(row)
        tokens = torch.cat([tokens, torch.tensor(colors, dtype=torch.long)], dim=1)
        tokens = tokens[keep]
        active = active[keep]
    return results


def decode_episode(vocab: Sequence[str], policy: TokenPolicy, rng: np.random.Generator) -> tuple[GameState, float]:
    """Draw an answer from ``rng`` and play it out with ``policy``."""
    game = reset(vocab, rng)
    result = rollout(policy, [game.answer], [rng])[0]
    return result.game, result.total_return


def eval_games(vocab: Sequence[str], n_games: int, seed: int) -> tuple[list[str], list[np.random.Generator]]:
    """Answers and per-game generators on the evaluation stream (disjoint from data generation)."""
    rngs = [episode_rng(seed, i, EVAL_STREAM) for i in range(n_games)]
    answers = [reset(vocab, r).answer for r in rngs]
    return answers, rngs


def play_batch(policy: TokenPolicy, vocab: Sequence[str], n_games: int, seed: int, chunk: int = 1024) -> list[Rollout]:
    answers, rngs = eval_games(vocab, n_games, seed)
    out: list[Rollout] = []
    for i in range(0, n_games, chunk):
        out.extend(rollout(policy, answers[i : i + chunk], rngs[i : i + chunk]))
    return out


@dataclass
class SweepRow:
    beta: float
    games: int
    mean_return: float
    stderr: float
    entropy_nats: float

    def as_row(self) -> dict:
        return {
            "beta": "inf" if math.isinf(self.beta) else f"{self.beta:g}",
            "games": self.games,
            "mean_return": f"{self.mean_return:.6f}",
            "stderr": f"{self.stderr:.6f}",
            "entropy_nats": f"{self.entropy_nats:.6f}",
        }


SWEEP_COLUMNS = ("beta", "games", "mean_return", "stderr", "entropy_nats")


def beta_sweep(pi_beta, value, vocab: Sequence[str], betas: Sequence[float], games: int, seed: int, temperature: float = 1.0) -> list[SweepRow]:
    """Sampled rollouts at each beta: return and per-token policy entropy."""
    if not betas:
        raise ValueError("beta list is empty")
    rows = []
    for beta in betas:
        policy = TokenPolicy(pi_beta, value, ExtractionSpec(beta=beta, temperature=temperature))
        results = play_batch(policy, vocab, games, seed)
        returns = np.array([r.total_return for r in results])
        rows.append(
            SweepRow(
                beta=float(beta),
                games=games,
                mean_return=float(returns.mean()),
                stderr=standard_error(returns),
                entropy_nats=float(np.mean([r.entropy_per_token for r in results])),
            )
        )
    return rows


def standard_error(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        return 0.0
    return float(x.std(ddof=1) / math.sqrt(len(x)))
