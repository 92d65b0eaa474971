import numpy as np
import pytest
from oracles import information_gain_bits, reference_colors

from ilql_wordle.datagen import (
    ADVERSARIAL,
    SUBOPTIMAL,
    UPPER_BOUND,
    MixtureSpec,
    Solver,
    episode_rng,
    filter_top_percent,
    generate_mixture,
    information_gain,
    policy_adversarial,
    policy_upper_bound,
    read_color_rows,
    retrofit,
    retrofit_all,
    scripted_returns,
    suboptimal_with_branch,
    synthetic_grids,
    write_color_rows,
)
from ilql_wordle.wordle import ALL_BLACK, ALL_GREEN, Trajectory, compute_feedback, lava_words, play, sample_vocab


def _traj(ret):
    rewards = [0.0] * 11
    rewards[5] = ret
    return Trajectory([29] + [0] * 10, [False] + [True] * 5 + [False] * 5, rewards, True)


def test_information_gain_hand_enumeration():
    # After "cramp" only "crane" and "crank" remain. "night" colors both the
    # same way, "eerie" tells them apart through its final e.
    vocab = ["crane", "crank", "night", "eerie"]
    history = [("cramp", compute_feedback("cramp", "crane"))]
    assert Solver(vocab).candidates(history).tolist() == [0, 1]
    assert information_gain("eerie", history, vocab) == pytest.approx(1.0)
    assert information_gain("night", history, vocab) == pytest.approx(0.0)


def test_information_gain_matches_partition_oracle():
    vocab = sample_vocab(40, 2)
    solver = Solver(vocab)
    rng = np.random.default_rng(0)
    for _ in range(20):
        answer = vocab[rng.integers(40)]
        history = [(g, compute_feedback(g, answer)) for g in (vocab[rng.integers(40)],)]
        cands = [vocab[i] for i in solver.candidates(history)]
        gains = solver.information_gain(solver.candidates(history))
        for gi in rng.integers(40, size=8):
            assert gains[gi] == pytest.approx(information_gain_bits(vocab[gi], cands), abs=1e-9)


def test_upper_bound_is_argmax_and_guesses_last_candidate():
    vocab = sample_vocab(30, 4)
    solver = Solver(vocab)
    answer = vocab[7]
    history = []
    for _ in range(3):
        g = policy_upper_bound(history, vocab)
        gains = solver.information_gain(solver.candidates(history))
        assert gains[solver.index[g]] >= gains.max() - 1e-12
        history.append((g, compute_feedback(g, answer)))
    pinned = [(answer, ALL_GREEN)]
    assert policy_upper_bound(pinned, vocab) == answer


def test_suboptimal_branches():
    vocab = sample_vocab(20, 1)
    rng = np.random.default_rng(3)
    n = 10_000
    branches = [suboptimal_with_branch([], vocab, rng)[1] for _ in range(n)]
    k = branches.count("random")
    assert abs(k - n / 2) < 3 * np.sqrt(n / 4)
    answer = vocab[5]
    pinned = [(answer, ALL_GREEN)]
    for _ in range(50):
        g, branch = suboptimal_with_branch(pinned, vocab, rng)
        if branch == "consistent":
            assert g == answer


def test_adversarial_replays():
    vocab = sample_vocab(20, 8)
    for answer in vocab:
        state = play(answer, [])
        while not state.done:
            g = policy_adversarial(state.history, vocab)
            if state.turn < 2:
                assert g == policy_upper_bound(state.history, vocab)
            else:
                assert g in (state.guesses[0], state.guesses[1])
            state = play(answer, list(state.guesses) + [g])
        if state.turn > 2:
            assert state.total_return == -6


def test_mixture_counts_and_tags():
    vocab = sample_vocab(20, 1)
    assert MixtureSpec(vocab, 1000).counts() == {UPPER_BOUND: 90, SUBOPTIMAL: 455, ADVERSARIAL: 455}
    data = generate_mixture(MixtureSpec(vocab, 30, (1, 0, 0), seed=2))
    assert {t.provenance for t in data} == {UPPER_BOUND}
    with pytest.raises(ValueError):
        MixtureSpec(vocab, 2).counts()
    with pytest.raises(ValueError):
        MixtureSpec(vocab, 10, (0.5, 0.6, 0.1))


def test_mixture_is_deterministic_and_resimulates():
    vocab = sample_vocab(20, 6)
    a = generate_mixture(MixtureSpec(vocab, 120, seed=9))
    b = generate_mixture(MixtureSpec(vocab, 120, seed=9))
    assert [t.to_json() for t in a] == [t.to_json() for t in b]
    for t in a:
        replay = play(t.answer, [g for g, _ in t.history()])
        assert [fb for _, fb in t.history()] == [tuple(reference_colors(g, t.answer)) for g, _ in t.history()]
        assert replay.total_return == t.total_return


@pytest.mark.parametrize("seed", [0, 1])
def test_policy_ordering(seed):
    vocab = sample_vocab(200, 11)
    data = generate_mixture(MixtureSpec(vocab, 1500, (1 / 3, 1 / 3, 1 / 3), seed=seed))
    mean = {k: np.mean([t.total_return for t in data if t.provenance == k]) for k in (UPPER_BOUND, SUBOPTIMAL, ADVERSARIAL)}
    assert mean[UPPER_BOUND] > mean[SUBOPTIMAL] > mean[ADVERSARIAL]


def test_episode_streams_are_disjoint():
    assert episode_rng(0, 1).random() != episode_rng(0, 1, stream=1).random()
    assert episode_rng(0, 1).random() == episode_rng(0, 1).random()


def test_filter_top_percent():
    data = [_traj(r) for r in (0.0, -2.0, -4.0, -6.0)]
    assert filter_top_percent(data, 100) == data
    assert [t.total_return for t in filter_top_percent(data, 50)] == [0.0, -2.0]
    same = [_traj(-3.0) for _ in range(5)]
    assert filter_top_percent(same, 10) == same
    with pytest.raises(ValueError):
        filter_top_percent([], 50)


def test_retrofit_examples():
    rng = np.random.default_rng(0)
    found = retrofit([ALL_GREEN], ["crane"], rng)
    assert (found.answer, found.guesses) == ("crane", ["crane"])
    found = retrofit([ALL_BLACK, ALL_GREEN], ["crane", "moist"], rng)
    assert found.answer in ("crane", "moist")
    assert [compute_feedback(g, found.answer) for g in found.guesses] == [ALL_BLACK, ALL_GREEN]
    assert retrofit([ALL_GREEN, ALL_BLACK], ["crane", "moist"], rng) is None


def test_retrofit_resimulates(tmp_path):
    vocab = sample_vocab(50, 2)
    grids = synthetic_grids(vocab, 200, seed=4)
    write_color_rows(grids, tmp_path / "g.jsonl")
    assert read_color_rows(tmp_path / "g.jsonl") == grids
    stats = retrofit_all(grids, vocab, seed=0)
    assert stats.feasible == len(grids)
    for rows, traj in zip(grids, stats.trajectories):
        assert [fb for _, fb in traj.history()] == rows


def test_scripted_returns_of_shipped_lava_vocab():
    vocab = lava_words()
    upper, adversarial = scripted_returns(vocab)
    assert upper == pytest.approx(-1.55)
    assert adversarial == pytest.approx(-3.95)
