"""Masked sequence losses for ILQL and its baselines.

Layout: the model output at position p conditions on tokens[0..p] and scores
the action tokens[p + 1]. Every loss is summed over agent-action positions
and divided by the number of such positions in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .compute import NonFiniteError, cross_entropy_from_logits, expectile_penalty, huber_penalty
from .model import min_target_q
from .wordle import BOS_ID, Trajectory

AWR_MAX_WEIGHT = 20.0


@dataclass
class Batch:
    tokens: torch.Tensor  # [B, T] long, right-padded
    action_mask: torch.Tensor  # [B, T] bool
    rewards: torch.Tensor  # [B, T]
    done: torch.Tensor  # [B] bool
    lengths: torch.Tensor  # [B] long
    # Per prediction position p (0..T-2), aligned with the action at p + 1:
    next_pred: torch.Tensor  # [B, T-1] long, prediction index of the successor history
    terminal: torch.Tensor  # [B, T-1] bool, no successor to bootstrap from

    @property
    def act(self) -> torch.Tensor:
        return self.action_mask[:, 1:]

    @property
    def actions(self) -> torch.Tensor:
        return self.tokens[:, 1:]

    @property
    def step_rewards(self) -> torch.Tensor:
        return self.rewards[:, 1:]

    @property
    def n_actions(self) -> int:
        return int(self.act.sum())


def collate(trajs: Sequence[Trajectory], dtype: torch.dtype | None = None) -> Batch:
    dtype = dtype or torch.get_default_dtype()
    b = len(trajs)
    t = max(len(tr.tokens) for tr in trajs)
    tokens = torch.full((b, t), BOS_ID, dtype=torch.long)
    mask = torch.zeros((b, t), dtype=torch.bool)
    rewards = torch.zeros((b, t), dtype=dtype)
    next_pred = torch.zeros((b, max(t - 1, 1)), dtype=torch.long)
    terminal = torch.zeros((b, max(t - 1, 1)), dtype=torch.bool)
    for i, tr in enumerate(trajs):
        n = len(tr.tokens)
        tokens[i, :n] = torch.tensor(tr.tokens)
        mask[i, :n] = torch.tensor(tr.action_mask)
        rewards[i, :n] = torch.tensor(tr.rewards, dtype=dtype)
        # Successor of the action at j is the history just before the next action.
        following = None
        for j in range(n - 1, 0, -1):
            if tr.action_mask[j]:
                if following is not None:
                    next_pred[i, j - 1] = following - 1
                elif tr.done:
                    terminal[i, j - 1] = True
                else:
                    next_pred[i, j - 1] = n - 1
                following = j
    return Batch(
        tokens=tokens,
        action_mask=mask,
        rewards=rewards,
        done=torch.tensor([tr.done for tr in trajs]),
        lengths=torch.tensor([len(tr.tokens) for tr in trajs]),
        next_pred=next_pred,
        terminal=terminal,
    )


def td_target(r, v_next, gamma: float, terminal):
    """r + gamma * v_next, with v_next read as 0 on terminal transitions."""
    if isinstance(v_next, torch.Tensor):
        return r + gamma * torch.where(torch.as_tensor(terminal), torch.zeros_like(v_next), v_next)
    return r + (0.0 if terminal else gamma * v_next)


@dataclass
class LossParts:
    total: torch.Tensor
    q: torch.Tensor
    v: torch.Tensor
    cql: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        names = ("total_loss", "q_loss", "v_loss", "cql_loss")
        return {k: float(t.detach()) for k, t in zip(names, (self.total, self.q, self.v, self.cql))}


def _checked(parts: LossParts) -> LossParts:
    for name in ("q", "v", "cql", "total"):
        if not torch.isfinite(getattr(parts, name)):
            raise NonFiniteError(name, f"non-finite {name} loss")
    return parts


def _at_actions(rows: torch.Tensor, batch: Batch) -> torch.Tensor:
    """rows[b, p, actions[b, p]] for every prediction position p."""
    return rows[:, :-1].gather(-1, batch.actions.unsqueeze(-1)).squeeze(-1)


def _masked_mean(x: torch.Tensor, batch: Batch) -> torch.Tensor:
    m = batch.act.to(x.dtype)
    return (x * m).sum() / m.sum().clamp(min=1.0)


def _successor(values: torch.Tensor, batch: Batch) -> torch.Tensor:
    """values[b, next_pred[b, p]] with terminal positions zeroed; values is [B, T]."""
    picked = values.gather(1, batch.next_pred)
    return torch.where(batch.terminal, torch.zeros_like(picked), picked)


def _value_terms(batch, q1, q2, v, target_q1, target_q2, tau, alpha):
    qhat = _at_actions(min_target_q(target_q1, target_q2), batch).detach()
    v_loss = _masked_mean(expectile_penalty(qhat - v[:, :-1], tau), batch)
    ce = 0.5 * (cross_entropy_from_logits(q1[:, :-1], batch.actions) + cross_entropy_from_logits(q2[:, :-1], batch.actions))
    cql = alpha * _masked_mean(ce, batch)
    return v_loss, cql


def _q_squared(batch, q1, q2, target):
    q1a, q2a = _at_actions(q1, batch), _at_actions(q2, batch)
    return _masked_mean((target - q1a).square() + (target - q2a).square(), batch)


def ilql_loss(batch: Batch, online, target, tau: float, alpha: float, gamma: float) -> LossParts:
    """TD regression for both Q heads on r + gamma * V(successor), expectile V fit to
    the min target Q at the taken action, and an NLL penalty on the Q logits."""
    q1, q2, v = online(batch.tokens)
    with torch.no_grad():
        tq1, tq2, _ = target(batch.tokens)
    return ilql_terms(batch, q1, q2, v, tq1, tq2, tau, alpha, gamma)


def ilql_terms(batch: Batch, q1, q2, v, tq1, tq2, tau: float, alpha: float, gamma: float, v_boot=None) -> LossParts:
    """ILQL on precomputed head outputs. ``v_boot`` supplies the bootstrap values
    (default: ``v`` detached), so gradient checks can hold them fixed."""
    v_boot = v.detach() if v_boot is None else v_boot
    td = td_target(batch.step_rewards, _successor(v_boot, batch), gamma, batch.terminal)
    q_loss = _q_squared(batch, q1, q2, td)
    v_loss, cql = _value_terms(batch, q1, q2, v, tq1, tq2, tau, alpha)
    return _checked(LossParts(q_loss + v_loss + cql, q_loss, v_loss, cql))


def per_token_cql_loss(batch: Batch, online, target, alpha: float, gamma: float) -> LossParts:
    """As ILQL, but bootstrapping from the hard max of the successor's target Q row.

    V is still fit (at the mean, tau = 0.5) so the model can drive extraction,
    but it does not enter the backup.
    """
    q1, q2, v = online(batch.tokens)
    with torch.no_grad():
        tq1, tq2, _ = target(batch.tokens)
        best_next = _successor(min_target_q(tq1, tq2).max(dim=-1).values, batch)
    td = td_target(batch.step_rewards, best_next, gamma, batch.terminal)
    q_loss = _q_squared(batch, q1, q2, td)
    v_loss, cql = _value_terms(batch, q1, q2, v, tq1, tq2, 0.5, alpha)
    return _checked(LossParts(q_loss + v_loss + cql, q_loss, v_loss, cql))


def psi_loss(batch: Batch, online, target, pi_beta_logits: torch.Tensor, c: float, alpha: float, gamma: float, delta: float = 1.0) -> LossParts:
    """Huber regression of Q onto r / c + log pi_beta(a|h) + gamma * logsumexp Q_target(successor)."""
    q1, q2, v = online(batch.tokens)
    with torch.no_grad():
        tq1, tq2, _ = target(batch.tokens)
        soft_next = _successor(torch.logsumexp(min_target_q(tq1, tq2), dim=-1), batch)
        log_pi = -cross_entropy_from_logits(pi_beta_logits[:, :-1], batch.actions)
    base = batch.step_rewards / c + log_pi + gamma * soft_next
    q_loss = _masked_mean(huber_penalty(base - _at_actions(q1, batch), delta) + huber_penalty(base - _at_actions(q2, batch), delta), batch)
    v_loss, cql = _value_terms(batch, q1, q2, v, tq1, tq2, 0.5, alpha)
    return _checked(LossParts(q_loss + v_loss + cql, q_loss, v_loss, cql))


def bc_loss(batch: Batch, lm) -> torch.Tensor:
    """Mean NLL of the agent's own tokens; color tokens carry no loss."""
    logits = lm(batch.tokens)
    loss = _masked_mean(cross_entropy_from_logits(logits[:, :-1], batch.actions), batch)
    if not torch.isfinite(loss):
        raise NonFiniteError("bc", "non-finite behavior-cloning loss")
    return loss


def advantage_weights(qhat: torch.Tensor, v: torch.Tensor, beta: float, max_weight: float = AWR_MAX_WEIGHT) -> torch.Tensor:
    return torch.exp(beta * (qhat - v)).clamp(max=max_weight)


def awr_extraction_loss(batch: Batch, lm, qhat: torch.Tensor, v: torch.Tensor, beta: float, max_weight: float = AWR_MAX_WEIGHT) -> torch.Tensor:
    """Advantage-weighted NLL; ``qhat`` and ``v`` are [B, T-1] values at the taken actions."""
    logits = lm(batch.tokens)
    w = advantage_weights(qhat.detach(), v.detach(), beta, max_weight)
    loss = _masked_mean(w * cross_entropy_from_logits(logits[:, :-1], batch.actions), batch)
    if not torch.isfinite(loss):
        raise NonFiniteError("awr", "non-finite AWR loss")
    return loss


@torch.no_grad()
def value_estimates(value_model, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """min(Q1, Q2) at the taken actions and V at their histories, both [B, T-1]."""
    q1, q2, v = value_model(batch.tokens)
    return _at_actions(min_target_q(q1, q2), batch), v[:, :-1]
