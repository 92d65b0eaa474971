"""Wordle as a token-level decision process.

The hidden answer is the underlying state. The agent acts one letter token at
a time; after every fifth letter the environment appends five color tokens.
A guess that is not the answer costs -1, a correct guess costs 0 and ends the
game, and six guesses end it regardless.
"""

from __future__ import annotations

import enum
import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WORD_LENGTH = 5
MAX_TURNS = 6

LETTERS = string.ascii_lowercase
BLACK_ID, YELLOW_ID, GREEN_ID = 26, 27, 28
BOS_ID = 29
VOCAB_SIZE = 30
TOKENS_PER_TURN = 2 * WORD_LENGTH
MAX_EPISODE_TOKENS = 1 + MAX_TURNS * TOKENS_PER_TURN


class WordleError(ValueError):
    """Malformed word, feedback, or illegal game transition."""


class Color(enum.IntEnum):
    BLACK = 0
    YELLOW = 1
    GREEN = 2

    @property
    def letter(self) -> str:
        return "BYG"[self]

    @classmethod
    def from_letter(cls, ch: str) -> "Color":
        try:
            return cls("BYG".index(ch.upper()))
        except ValueError:
            raise WordleError(f"unknown color {ch!r}") from None


Feedback = tuple  # tuple[Color, ...] of length WORD_LENGTH

ALL_GREEN: Feedback = (Color.GREEN,) * WORD_LENGTH
ALL_BLACK: Feedback = (Color.BLACK,) * WORD_LENGTH


def check_word(word: str) -> str:
    if not isinstance(word, str) or len(word) != WORD_LENGTH or not word.isascii() or not word.isalpha():
        raise WordleError(f"not a {WORD_LENGTH}-letter alphabetic word: {word!r}")
    return word.lower()


def compute_feedback(guess: str, answer: str) -> Feedback:
    return color_pattern(check_word(guess), check_word(answer))


def color_pattern(guess: str, answer: str) -> Feedback:
    """Color a guess against an answer of the same length.

    Greens are assigned first; yellows then consume the remaining answer
    letters left to right, so a letter guessed more often than it occurs is
    black beyond its multiplicity.
    """
    if len(guess) != len(answer):
        raise WordleError(f"length mismatch: {guess!r} vs {answer!r}")
    colors = [Color.BLACK] * len(guess)
    remaining: dict[str, int] = {}
    for i, (g, a) in enumerate(zip(guess, answer)):
        if g == a:
            colors[i] = Color.GREEN
        else:
            remaining[a] = remaining.get(a, 0) + 1
    for i, g in enumerate(guess):
        if colors[i] is Color.GREEN:
            continue
        if remaining.get(g, 0) > 0:
            colors[i] = Color.YELLOW
            remaining[g] -= 1
    return tuple(colors)


def feedback_code(feedback: Feedback) -> int:
    """Base-3 integer in [0, 243) identifying a feedback pattern."""
    code = 0
    for c in feedback:
        code = code * 3 + int(c)
    return code


def feedback_from_code(code: int) -> Feedback:
    digits = []
    for _ in range(WORD_LENGTH):
        code, d = divmod(code, 3)
        digits.append(Color(d))
    return tuple(reversed(digits))


def feedback_to_str(feedback: Feedback) -> str:
    return "".join(c.letter for c in feedback)


def feedback_from_str(text: str) -> Feedback:
    if len(text) != WORD_LENGTH:
        raise WordleError(f"feedback must have {WORD_LENGTH} colors: {text!r}")
    return tuple(Color.from_letter(ch) for ch in text)


def consistent(word: str, history: Iterable[tuple[str, Feedback]]) -> bool:
    """True iff ``word`` as the answer would have produced every recorded feedback."""
    return all(compute_feedback(guess, word) == tuple(fb) for guess, fb in history)


@dataclass(frozen=True)
class GameState:
    answer: str
    guesses: tuple[str, ...] = ()
    feedbacks: tuple[Feedback, ...] = ()

    @property
    def turn(self) -> int:
        return len(self.guesses)

    @property
    def solved(self) -> bool:
        return bool(self.feedbacks) and self.feedbacks[-1] == ALL_GREEN

    @property
    def done(self) -> bool:
        return self.solved or self.turn >= MAX_TURNS

    @property
    def history(self) -> list[tuple[str, Feedback]]:
        return list(zip(self.guesses, self.feedbacks))

    @property
    def total_return(self) -> float:
        return -float(sum(1 for fb in self.feedbacks if fb != ALL_GREEN))


def reset(vocab: Sequence[str], rng: np.random.Generator) -> GameState:
    """Start a game whose answer is drawn uniformly from ``vocab``."""
    if len(vocab) == 0:
        raise WordleError("cannot reset with an empty vocabulary")
    return GameState(answer=vocab[int(rng.integers(len(vocab)))])


def step(state: GameState, guess: str) -> tuple[GameState, float, bool]:
    if state.done:
        raise WordleError("game is already finished")
    guess = check_word(guess)
    fb = compute_feedback(guess, state.answer)
    nxt = GameState(state.answer, state.guesses + (guess,), state.feedbacks + (fb,))
    reward = 0.0 if guess == state.answer else -1.0
    return nxt, reward, nxt.done


def play(answer: str, guesses: Sequence[str]) -> GameState:
    state = GameState(answer)
    for g in guesses:
        state, _, _ = step(state, g)
    return state


# -- token codec ---------------------------------------------------------------

def letter_id(ch: str) -> int:
    return LETTERS.index(ch)


def color_id(color: Color) -> int:
    return BLACK_ID + int(color)


def is_letter_id(token: int) -> bool:
    return 0 <= token < len(LETTERS)


def token_name(token: int) -> str:
    if is_letter_id(token):
        return LETTERS[token]
    return {BLACK_ID: "<B>", YELLOW_ID: "<Y>", GREEN_ID: "<G>", BOS_ID: "<bos>"}[token]


def encode_turn(guess: str, feedback: Feedback) -> list[int]:
    return [letter_id(ch) for ch in guess] + [color_id(c) for c in feedback]


def encode_history(history: Iterable[tuple[str, Feedback]]) -> list[int]:
    tokens = [BOS_ID]
    for guess, fb in history:
        tokens.extend(encode_turn(guess, fb))
    return tokens


def decode_tokens(tokens: Sequence[int]) -> list[tuple[str, Feedback]]:
    """Inverse of :func:`encode_history` (complete turns only)."""
    tokens = list(tokens)
    if not tokens or tokens[0] != BOS_ID:
        raise WordleError("token sequence must start with BOS")
    body = tokens[1:]
    if len(body) % TOKENS_PER_TURN:
        raise WordleError("token sequence does not hold whole turns")
    out = []
    for i in range(0, len(body), TOKENS_PER_TURN):
        letters = body[i : i + WORD_LENGTH]
        colors = body[i + WORD_LENGTH : i + TOKENS_PER_TURN]
        if not all(is_letter_id(t) for t in letters):
            raise WordleError(f"expected letter tokens at turn {i // TOKENS_PER_TURN}")
        if not all(BLACK_ID <= t <= GREEN_ID for t in colors):
            raise WordleError(f"expected color tokens at turn {i // TOKENS_PER_TURN}")
        out.append(("".join(LETTERS[t] for t in letters), tuple(Color(t - BLACK_ID) for t in colors)))
    return out


@dataclass
class Trajectory:
    """One episode laid out on the token axis.

    ``rewards[j]`` is nonzero only where ``tokens[j]`` is the fifth letter of
    a wrong guess; that letter closes the agent's turn.
    """

    tokens: list[int]
    action_mask: list[bool]
    rewards: list[float]
    done: bool
    provenance: str = ""
    answer: str = ""

    def __post_init__(self):
        if not (len(self.tokens) == len(self.action_mask) == len(self.rewards)):
            raise WordleError("tokens, action_mask and rewards must have equal length")

    @property
    def total_return(self) -> float:
        return float(sum(self.rewards))

    @property
    def n_turns(self) -> int:
        return (len(self.tokens) - 1) // TOKENS_PER_TURN

    def history(self) -> list[tuple[str, Feedback]]:
        return decode_tokens(self.tokens)

    def to_json(self) -> str:
        return json.dumps(
            {
                "tokens": self.tokens,
                "action_mask": self.action_mask,
                "rewards": self.rewards,
                "done": self.done,
                "provenance": self.provenance,
                "answer": self.answer,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            tokens=[int(t) for t in d["tokens"]],
            action_mask=[bool(m) for m in d["action_mask"]],
            rewards=[float(r) for r in d["rewards"]],
            done=bool(d["done"]),
            provenance=d.get("provenance", ""),
            answer=d.get("answer", ""),
        )


def encode_episode(game: GameState, provenance: str = "") -> Trajectory:
    if not game.done:
        raise WordleError("only finished games can be encoded")
    tokens = encode_history(game.history)
    mask = [False] * len(tokens)
    rewards = [0.0] * len(tokens)
    for turn, guess in enumerate(game.guesses):
        start = 1 + turn * TOKENS_PER_TURN
        for j in range(start, start + WORD_LENGTH):
            mask[j] = True
        rewards[start + WORD_LENGTH - 1] = 0.0 if guess == game.answer else -1.0
    return Trajectory(tokens, mask, rewards, True, provenance, game.answer)


def decode_trajectory(traj: Trajectory) -> GameState:
    history = traj.history()
    return GameState(traj.answer, tuple(g for g, _ in history), tuple(fb for _, fb in history))


# -- files -----------------------------------------------------------------------

def read_vocab(path: str | Path) -> list[str]:
    words = []
    seen = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        w = line.strip()
        if not w:
            continue
        w = check_word(w)
        if w in seen:
            raise WordleError(f"duplicate word in vocabulary: {w}")
        seen.add(w)
        words.append(w)
    if not words:
        raise WordleError(f"empty vocabulary file: {path}")
    return words


def write_vocab(words: Sequence[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for w in words:
            f.write(check_word(w) + "\n")


def builtin_words() -> list[str]:
    return read_vocab(Path(__file__).with_name("data") / "words.txt")


def lava_words() -> list[str]:
    """A 20-word vocabulary on which replaying the first two guesses usually loses."""
    return read_vocab(Path(__file__).with_name("data") / "lava20.txt")


def sample_vocab(size: int, seed: int) -> list[str]:
    pool = builtin_words()
    if not 0 < size <= len(pool):
        raise WordleError(f"vocab size must be in [1, {len(pool)}], got {size}")
    idx = np.random.default_rng(seed).choice(len(pool), size=size, replace=False)
    return sorted(pool[i] for i in idx)


def read_trajectories(path: str | Path) -> list[Trajectory]:
    with open(path, encoding="utf-8") as f:
        return [Trajectory.from_dict(json.loads(line)) for line in f if line.strip()]


def write_trajectories(trajs: Iterable[Trajectory], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in trajs:
            f.write(t.to_json() + "\n")


@dataclass
class FeedbackTable:
    """All guess/answer feedback codes over one vocabulary, shape [guess, answer]."""

    words: list[str]
    codes: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, words: Sequence[str]) -> "FeedbackTable":
        words = list(words)
        answers = np.array([[letter_id(c) for c in w] for w in words], dtype=np.int64)
        n = len(words)
        rows = np.arange(n)
        weights = 3 ** np.arange(WORD_LENGTH - 1, -1, -1)
        codes = np.empty((n, n), dtype=np.int16)
        for gi in range(n):
            guess = answers[gi]
            green = answers == guess
            colors = np.where(green, int(Color.GREEN), int(Color.BLACK))
            # Answer letters left over once greens are matched.
            counts = np.zeros((n, 26), dtype=np.int64)
            for k in range(WORD_LENGTH):
                np.add.at(counts, (rows, answers[:, k]), ~green[:, k])
            for k in range(WORD_LENGTH):
                avail = counts[:, guess[k]]
                yellow = ~green[:, k] & (avail > 0)
                colors[:, k] = np.where(yellow, int(Color.YELLOW), colors[:, k])
                counts[:, guess[k]] = avail - yellow
            codes[gi] = colors @ weights
        return cls(words, codes)
