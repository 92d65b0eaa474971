"""Tensor expressions over a fixed operation set, reverse-mode gradients, AdamW.

Tensors are ``torch.Tensor``; the models and losses use the same operations
directly. :class:`Expr` exists for building small checked expressions and for
the finite-difference harness that verifies gradients in float64.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch
import torch.nn.functional as F

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class ShapeError(ValueError):
    """An expression node received inputs of incompatible shapes."""


class GradientError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, name: str, message: str = ""):
        super().__init__(message or f"non-finite values in {name}")
        self.name = name


def set_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


@contextlib.contextmanager
def float64_mode():
    """Run a block with float64 as the default floating dtype."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(CHECK_DTYPE)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


# -- elementwise penalties -------------------------------------------------------

def expectile_penalty(u: torch.Tensor, tau: float) -> torch.Tensor:
    """|tau - 1(u < 0)| * u**2; at u == 0 the weight is tau."""
    weight = torch.where(u < 0, 1.0 - tau, tau)
    return weight * u.square()


def huber_penalty(u: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    a = u.abs()
    return torch.where(a <= delta, 0.5 * u.square(), delta * (a - 0.5 * delta))


def cross_entropy_from_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-row negative log-likelihood of integer targets; no reduction."""
    return -(torch.log_softmax(logits, dim=-1).gather(-1, target.unsqueeze(-1)).squeeze(-1))


# -- expression graph --------------------------------------------------------------

def _matmul(a, b):
    return a @ b


def _layer_norm(x, gain, bias):
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps=1e-5)


def _embedding(table, ids):
    return F.embedding(ids.long(), table)


def _select(mask, a, b):
    return torch.where(mask.bool(), a, b)


OPS: dict[str, Callable] = {
    "matmul": _matmul,
    "add": torch.add,
    "mul": torch.mul,
    "softmax": lambda x: torch.softmax(x, dim=-1),
    "layer_norm": _layer_norm,
    "gelu": F.gelu,
    "embedding": _embedding,
    "logsumexp": lambda x: torch.logsumexp(x, dim=-1),
    "cross_entropy": cross_entropy_from_logits,
    "expectile": expectile_penalty,
    "huber": huber_penalty,
    "select": _select,
    "sum": lambda x: x.sum(),
    "mean": lambda x: x.mean(),
}


@dataclass(frozen=True, eq=False)
class Expr:
    """A node in an immutable expression DAG.

    Leaves are named inputs (``op == "input"``) or constants. Non-tensor
    arguments such as ``tau`` go in ``params``.
    """

    op: str
    args: tuple["Expr", ...] = ()
    params: tuple = ()
    name: str = ""
    value: torch.Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.op not in OPS and self.op not in ("input", "const"):
            raise ValueError(f"unknown operation {self.op!r}")

    def label(self) -> str:
        return self.name or self.op

    def __add__(self, other):
        return add(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return const(torch.as_tensor(x, dtype=torch.get_default_dtype()))


def var(name: str) -> Expr:
    return Expr("input", name=name)


def const(value: torch.Tensor, name: str = "") -> Expr:
    return Expr("const", value=value, name=name)


def _node(op):
    def build(*args, params=(), name=""):
        return Expr(op, tuple(_lift(a) for a in args), tuple(params), name)

    build.__name__ = op
    return build


matmul = _node("matmul")
add = _node("add")
mul = _node("mul")
softmax = _node("softmax")
layer_norm = _node("layer_norm")
gelu = _node("gelu")
embedding = _node("embedding")
logsumexp = _node("logsumexp")
cross_entropy = _node("cross_entropy")
select = _node("select")
reduce_sum = _node("sum")
reduce_mean = _node("mean")


def expectile(u, tau: float, name: str = "") -> Expr:
    return Expr("expectile", (_lift(u),), (tau,), name)


def huber(u, delta: float = 1.0, name: str = "") -> Expr:
    return Expr("huber", (_lift(u),), (delta,), name)


def _eval(expr: Expr, inputs: Mapping[str, torch.Tensor], memo: dict[int, torch.Tensor]) -> torch.Tensor:
    key = id(expr)
    if key in memo:
        return memo[key]
    if expr.op == "input":
        if expr.name not in inputs:
            raise KeyError(f"unbound input {expr.name!r}")
        out = inputs[expr.name]
    elif expr.op == "const":
        out = expr.value
    else:
        args = [_eval(a, inputs, memo) for a in expr.args]
        try:
            out = OPS[expr.op](*args, *expr.params)
        except RuntimeError as exc:
            shapes = ", ".join(str(tuple(a.shape)) for a in args)
            raise ShapeError(f"node {expr.label()!r} ({expr.op}) cannot take shapes {shapes}: {exc}") from None
    memo[key] = out
    return out


def evaluate(expr: Expr, inputs: Mapping[str, torch.Tensor]) -> torch.Tensor:
    return _eval(expr, inputs, {})


def gradient(expr: Expr, inputs: Mapping[str, torch.Tensor], wrt: Iterable[str]) -> dict[str, torch.Tensor]:
    wrt = list(wrt)
    missing = [n for n in wrt if n not in inputs]
    if missing:
        raise GradientError(f"cannot differentiate with respect to unbound inputs {missing}")
    leaves = {k: (v.detach().clone().requires_grad_(k in wrt) if v.is_floating_point() else v) for k, v in inputs.items()}
    out = evaluate(expr, leaves)
    if out.numel() != 1:
        raise GradientError(f"gradient needs a scalar root, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out.reshape(()), [leaves[n] for n in wrt], allow_unused=True)
    return {n: (torch.zeros_like(leaves[n]) if g is None else g) for n, g in zip(wrt, grads)}


def finite_difference_check(
    fn: Expr | Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    inputs: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    wrt: Iterable[str] | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    Raise ``floor`` for deep networks where roundoff in the central difference
    (about 1e-11 absolute) dominates near-zero gradient entries.
    Inputs must be float64.
    """
    f = (lambda env: evaluate(fn, env)) if isinstance(fn, Expr) else fn
    names = list(wrt) if wrt is not None else [k for k, v in inputs.items() if v.is_floating_point()]
    for n in names:
        if inputs[n].dtype != CHECK_DTYPE:
            raise GradientError(f"finite-difference checks run in float64; {n!r} is {inputs[n].dtype}")
    leaves = {k: (v.detach().clone().requires_grad_(k in names) if v.is_floating_point() else v) for k, v in inputs.items()}
    out = f(leaves)
    if out.numel() != 1:
        raise GradientError("finite-difference check needs a scalar function")
    analytic = torch.autograd.grad(out.reshape(()), [leaves[n] for n in names], allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        probe = {k: v.detach().clone() for k, v in inputs.items()}
        for n, g in zip(names, analytic):
            g = torch.zeros_like(probe[n]) if g is None else g
            flat = probe[n].view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = f(probe).item()
                flat[i] = orig - eps
                lo = f(probe).item()
                flat[i] = orig
                num = (hi - lo) / (2 * eps)
                ana = gflat[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst


def module_inputs(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in module.named_parameters()}


def functional_loss(module: torch.nn.Module, loss_fn: Callable[[torch.nn.Module], torch.Tensor]):
    """Wrap ``loss_fn(module)`` as a function of a name -> parameter mapping.

    Parameters are swapped in for the duration of the call, so any code path
    that runs the module sees them.
    """

    def f(params: Mapping[str, torch.Tensor]) -> torch.Tensor:
        with _swapped(module, {k: v for k, v in params.items() if k in dict(module.named_parameters())}):
            return loss_fn(module)

    return f


@contextlib.contextmanager
def _swapped(module: torch.nn.Module, params: Mapping[str, torch.Tensor]):
    saved = {}
    for name, value in params.items():
        owner, attr = _owner(module, name)
        saved[name] = owner._parameters[attr]
        owner._parameters[attr] = value
    try:
        yield
    finally:
        for name, value in saved.items():
            owner, attr = _owner(module, name)
            owner._parameters[attr] = value


def _owner(module: torch.nn.Module, name: str):
    *path, attr = name.split(".")
    for p in path:
        module = getattr(module, p)
    return module, attr


# -- AdamW --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_update(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor | None],
    state: OptimizerState,
) -> tuple[Mapping[str, torch.Tensor], OptimizerState]:
    """One decoupled-weight-decay Adam step, applied in place.

    Parameters without a gradient are left alone but still share the step
    counter used for bias correction.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError(name, f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if p.shape != g.shape:
                raise ShapeError(f"gradient for {name!r} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            m = state.exp_avg.setdefault(name, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            if state.weight_decay:
                p.mul_(1.0 - state.lr * state.weight_decay)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / bc1)
    return params, state


def grad_norm(grads: Iterable[torch.Tensor | None]) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(g.double().square().sum())
    return math.sqrt(total)
