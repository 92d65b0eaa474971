import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import adam_scalar

from ilql_wordle import compute as C


def t64(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64) * scale


def test_forward_examples():
    x = C.var("x")
    assert torch.allclose(C.evaluate(C.softmax(x), {"x": torch.zeros(2)}), torch.tensor([0.5, 0.5]))
    assert C.evaluate(C.expectile(x, 0.9), {"x": torch.tensor(1.0)}).item() == pytest.approx(0.9)
    assert C.evaluate(C.expectile(x, 0.9), {"x": torch.tensor(-1.0)}).item() == pytest.approx(0.1)
    assert C.evaluate(C.logsumexp(x), {"x": torch.zeros(3)}).item() == pytest.approx(math.log(3))


def test_penalty_branches():
    h = C.huber_penalty(torch.tensor([0.0, 0.5, 2.0, -2.0]), 1.0)
    assert h.tolist() == pytest.approx([0.0, 0.125, 1.5, 1.5])
    # Weight tau at exactly zero: the u >= 0 branch.
    u = torch.tensor(0.0, requires_grad=True)
    C.expectile_penalty(u, 0.7).backward()
    assert u.grad.item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.51, 0.99), st.floats(0.01, 5.0))
def test_expectile_asymmetry(tau, mag):
    pos = C.expectile_penalty(torch.tensor(mag), tau)
    neg = C.expectile_penalty(torch.tensor(-mag), tau)
    assert pos > neg
    assert C.expectile_penalty(torch.tensor(mag), 0.5) == C.expectile_penalty(torch.tensor(-mag), 0.5)


def test_softmax_rows_and_lse_shift():
    x = t64(5, 7, seed=1, scale=4.0)
    assert torch.allclose(C.evaluate(C.softmax(C.var("x")), {"x": x}).sum(-1), torch.ones(5, dtype=torch.float64), atol=1e-6)
    lse = C.evaluate(C.logsumexp(C.var("x")), {"x": x})
    assert torch.allclose(C.evaluate(C.logsumexp(C.var("x")), {"x": x + 3.5}), lse + 3.5, atol=1e-6)


def test_gradient_examples():
    x = C.var("x")
    assert C.gradient(x * x, {"x": torch.tensor(3.0)}, ["x"])["x"].item() == pytest.approx(6.0)
    logits = t64(4, seed=2)
    target = torch.tensor(1)
    g = C.gradient(C.cross_entropy(C.var("z"), C.var("a")), {"z": logits, "a": target}, ["z"])["z"]
    expected = torch.softmax(logits, -1) - torch.nn.functional.one_hot(target, 4)
    assert torch.allclose(g, expected, atol=1e-12)


def test_gradient_errors():
    x = C.var("x")
    with pytest.raises(C.GradientError):
        C.gradient(C.softmax(x), {"x": torch.zeros(3)}, ["x"])
    with pytest.raises(C.GradientError):
        C.gradient(C.reduce_sum(x), {"x": torch.zeros(3)}, ["y"])


def test_shape_error_names_node():
    expr = C.matmul(C.var("a"), C.var("b"), name="proj")
    with pytest.raises(C.ShapeError, match="proj"):
        C.evaluate(expr, {"a": torch.zeros(2, 3), "b": torch.zeros(4, 5)})


def _composite():
    """Four layers deep: embedding, layer norm, gelu MLP, softmax-weighted readout and losses."""
    a, ids, w1, w2, gain, bias, tgt, mask = (C.var(n) for n in ("emb", "ids", "w1", "w2", "gain", "bias", "tgt", "mask"))
    h = C.layer_norm(C.embedding(a, ids), gain, bias)
    h = C.gelu(h @ w1)
    logits = h @ w2
    att = C.softmax(logits) * logits
    ce = C.cross_entropy(logits, tgt)
    picked = C.select(mask, ce, C.huber(C.logsumexp(att), 1.0))
    return C.reduce_mean(picked) + C.reduce_sum(C.expectile(C.logsumexp(logits), 0.8))


def _composite_inputs():
    return {
        "emb": t64(6, 5, seed=3),
        "ids": torch.tensor([0, 3, 5, 2]),
        "w1": t64(5, 8, seed=4, scale=0.5),
        "w2": t64(8, 6, seed=5, scale=0.5),
        "gain": 1.0 + t64(5, seed=6, scale=0.1),
        "bias": t64(5, seed=7, scale=0.1),
        "tgt": torch.tensor([1, 0, 4, 2]),
        "mask": torch.tensor([True, False, True, False]),
    }


def test_composite_matches_finite_differences():
    assert C.finite_difference_check(_composite(), _composite_inputs()) < 1e-4


@pytest.mark.parametrize("op", ["matmul", "add", "mul", "softmax", "layer_norm", "gelu", "embedding", "logsumexp",
                                "cross_entropy", "expectile", "huber", "select", "sum", "mean"])
def test_each_op_matches_finite_differences(op):
    x, y = C.var("x"), C.var("y")
    w = t64(4, 3, seed=11)
    inputs = {"x": t64(4, 3, seed=9), "y": t64(4, 3, seed=10)}
    readout = lambda e: C.reduce_sum(e * C.const(w))  # noqa: E731
    if op == "matmul":
        inputs["y"] = t64(3, 3, seed=10)
        expr = readout(x @ y)
    elif op in ("add", "mul"):
        expr = readout(C.add(x, y) if op == "add" else C.mul(x, y))
    elif op in ("softmax", "gelu"):
        expr = readout(getattr(C, op)(x))
    elif op == "layer_norm":
        inputs.update(g=t64(3, seed=12), b=t64(3, seed=13))
        expr = readout(C.layer_norm(x, C.var("g"), C.var("b")))
    elif op == "embedding":
        inputs = {"x": t64(5, 3, seed=9), "i": torch.tensor([4, 0, 2, 2])}
        expr = readout(C.embedding(x, C.var("i")))
    elif op == "logsumexp":
        expr = C.reduce_sum(C.logsumexp(x) * C.const(w[:, 0]))
    elif op == "cross_entropy":
        inputs["t"] = torch.tensor([2, 0, 1, 1])
        expr = C.reduce_sum(C.cross_entropy(x, C.var("t")) * C.const(w[:, 0]))
    elif op in ("expectile", "huber"):
        # Keep clear of the kink at zero.
        inputs["x"] = torch.where(inputs["x"].abs() < 1e-2, torch.full_like(inputs["x"], 0.5), inputs["x"])
        expr = readout(C.expectile(x, 0.8) if op == "expectile" else C.huber(x, 1.0))
    elif op == "select":
        inputs["m"] = t64(4, 3, seed=14) > 0
        expr = readout(C.select(C.var("m"), x, y))
    else:
        expr = (C.reduce_sum if op == "sum" else C.reduce_mean)(x * C.const(w))
    assert C.finite_difference_check(expr, inputs) < 1e-4


def test_fd_checker_basics():
    x = C.var("x")
    # At zero the perturbed sums are exact, so only the checker's own arithmetic remains.
    assert C.finite_difference_check(C.reduce_sum(x), {"x": torch.zeros(3, dtype=torch.float64)}) < 1e-12
    assert C.finite_difference_check(C.reduce_sum(x), {"x": t64(3)}) < 1e-9
    away = torch.tensor([0.7, -1.3, 2.1], dtype=torch.float64)
    assert C.finite_difference_check(C.reduce_sum(C.expectile(x, 0.9)), {"x": away}) < 1e-6
    with pytest.raises(C.GradientError):
        C.finite_difference_check(C.reduce_sum(x), {"x": torch.zeros(3, dtype=torch.float32)})


def test_evaluate_is_deterministic():
    a = C.gradient(_composite(), _composite_inputs(), ["w1", "w2"])
    b = C.gradient(_composite(), _composite_inputs(), ["w1", "w2"])
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_adamw_zero_grad_and_first_step():
    p = {"w": torch.tensor([1.0, -2.0])}
    C.adamw_update(p, {"w": torch.zeros(2)}, C.OptimizerState(lr=0.1))
    assert p["w"].tolist() == [1.0, -2.0]
    s = {"x": torch.tensor([0.0], dtype=torch.float64)}
    C.adamw_update(s, {"x": torch.tensor([1.0], dtype=torch.float64)}, C.OptimizerState(lr=0.1))
    assert s["x"].item() == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-9)


def test_adamw_matches_scalar_reference():
    x = {"x": torch.tensor([0.0], dtype=torch.float64)}
    state = C.OptimizerState(lr=0.05)
    for _ in range(100):
        C.adamw_update(x, {"x": 2 * (x["x"] - 2)}, state)
    ref = adam_scalar(lambda v: 2 * (v - 2), 0.0, 0.05, 100)
    assert abs(x["x"].item() - ref) < 1e-9
    assert state.step == 100


def test_adamw_weight_decay_matches_reference():
    x = {"x": torch.tensor([1.5], dtype=torch.float64)}
    state = C.OptimizerState(lr=0.01, weight_decay=0.1)
    for _ in range(30):
        C.adamw_update(x, {"x": torch.cos(x["x"])}, state)
    assert x["x"].item() == pytest.approx(adam_scalar(math.cos, 1.5, 0.01, 30, wd=0.1), abs=1e-10)


def test_adamw_non_finite_names_parameter():
    with pytest.raises(C.NonFiniteError, match="layer.w"):
        C.adamw_update({"layer.w": torch.zeros(2)}, {"layer.w": torch.tensor([1.0, float("nan")])}, C.OptimizerState(lr=0.1))
