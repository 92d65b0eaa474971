"""Causal transformer with an LM head (behavior policy) or Q1/Q2/V heads."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .wordle import VOCAB_SIZE

FORMAT_VERSION = 1
LM, VALUE = "lm", "value"


class SequenceTooLong(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    dropout: float = 0.1
    head: str = LM

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.head not in (LM, VALUE):
            raise ValueError(f"head must be {LM!r} or {VALUE!r}, got {self.head!r}")

    def with_head(self, head: str) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "head": head})


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc = nn.Linear(cfg.d_model, cfg.d_ff)
        self.fc_out = nn.Linear(cfg.d_ff, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(b, t, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // self.n_heads)
        causal = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1)
        att = torch.softmax(att.masked_fill(causal, float("-inf")), dim=-1)
        att = self.drop(att)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.drop(self.proj(y))
        return x + self.drop(self.fc_out(F.gelu(self.fc(self.ln2(x)))))


class Trunk(nn.Module):
    """GPT-2 style pre-norm decoder with learned absolute positions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        t = tokens.shape[-1]
        if t > self.cfg.max_seq_len:
            raise SequenceTooLong(f"sequence of {t} tokens exceeds max_seq_len={self.cfg.max_seq_len}; truncate first")
        if tokens.numel() and int(tokens.max()) >= self.cfg.vocab_size:
            raise ValueError(f"token id {int(tokens.max())} outside vocabulary of {self.cfg.vocab_size}")
        h = self.drop(self.tok(tokens) + self.pos(torch.arange(t, device=tokens.device)))
        for block in self.blocks:
            h = block(h)
        return self.ln_f(h)


def mlp_head(d_model: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.ReLU(), nn.Linear(2 * d_model, out))


class LanguageModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = Trunk(cfg)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.lm_head(self.trunk(tokens))


class ValueModel(nn.Module):
    """Shared trunk feeding two independent Q heads and one V head (no dropout in heads)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = Trunk(cfg)
        self.q1 = mlp_head(cfg.d_model, cfg.vocab_size)
        self.q2 = mlp_head(cfg.d_model, cfg.vocab_size)
        self.v = mlp_head(cfg.d_model, 1)

    def forward(self, tokens: torch.Tensor):
        h = self.trunk(tokens)
        return self.q1(h), self.q2(h), self.v(h).squeeze(-1)


def _init(module: nn.Module, generator: torch.Generator, std: float) -> None:
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)
        elif ".ln" in name or name.startswith("ln") or "ln_f" in name:
            nn.init.ones_(p)
        else:
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)


def init_weights(config: ModelConfig, seed: int, std: float = 0.02) -> LanguageModel | ValueModel:
    """Fresh model, deterministic in ``seed``. Each Q head draws its own weights."""
    model = LanguageModel(config) if config.head == LM else ValueModel(config)
    _init(model, torch.Generator().manual_seed(int(seed)), std)
    return model


def _batched(tokens) -> tuple[torch.Tensor, bool]:
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() == 1:
        return tokens.unsqueeze(0), True
    return tokens, False


def forward_lm(model: LanguageModel, tokens) -> torch.Tensor:
    """Next-token logits per position; [len, vocab] for 1-D input, else [batch, len, vocab]."""
    x, single = _batched(tokens)
    out = model(x)
    return out[0] if single else out


def forward_value(model: ValueModel, tokens):
    x, single = _batched(tokens)
    q1, q2, v = model(x)
    return (q1[0], q2[0], v[0]) if single else (q1, q2, v)


def make_target(online: ValueModel) -> ValueModel:
    target = copy.deepcopy(online)
    target.requires_grad_(False)
    target.eval()
    return target


def polyak_update(target: nn.Module, online: nn.Module, rate: float) -> nn.Module:
    """target <- (1 - rate) * target + rate * online, in place."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"Polyak rate must be in [0, 1], got {rate}")
    tp, op = dict(target.named_parameters()), dict(online.named_parameters())
    if tp.keys() != op.keys():
        raise ValueError("target and online parameter names differ")
    with torch.no_grad():
        for name, t in tp.items():
            o = op[name]
            if t.shape != o.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(o.shape)}")
            if rate == 1.0:
                t.copy_(o)
            else:
                t.mul_(1.0 - rate).add_(o, alpha=rate)
    return target


def min_target_q(q1: torch.Tensor, q2: torch.Tensor) -> torch.Tensor:
    if q1.shape != q2.shape:
        raise ValueError(f"Q heads disagree in shape: {tuple(q1.shape)} vs {tuple(q2.shape)}")
    return torch.minimum(q1, q2)


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: nn.Module, seed: int = 0, train_config: dict | None = None, step: int = 0) -> Path:
    """Directory of raw little-endian float32 arrays plus a JSON manifest."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    params = []
    for name, p in model.named_parameters():
        arr = p.detach().to(torch.float32).numpy().astype("<f4")
        arr.tofile(path / "params" / f"{name}.f32")
        params.append({"name": name, "shape": list(arr.shape)})
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.cfg),
        "head": model.cfg.head,
        "seed": seed,
        "train_config": train_config or {},
        "step": step,
        "params": params,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise CheckpointError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    cfg = ModelConfig(**manifest["model_config"])
    model = init_weights(cfg, seed=0)
    own = dict(model.named_parameters())
    listed = [p["name"] for p in manifest["params"]]
    if listed != list(own):
        raise CheckpointError(f"checkpoint parameters do not match the {cfg.head} model layout")
    with torch.no_grad():
        for entry in manifest["params"]:
            arr = np.fromfile(path / "params" / f"{entry['name']}.f32", dtype="<f4")
            shape = tuple(entry["shape"])
            if arr.size != math.prod(shape) or tuple(own[entry["name"]].shape) != shape:
                raise CheckpointError(f"parameter {entry['name']} has the wrong size on disk")
            own[entry["name"]].copy_(torch.from_numpy(arr.reshape(shape)))
    model.eval()
    return model, manifest
