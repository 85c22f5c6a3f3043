"""Core numeric building blocks: masked attention, losses, Adam, schedules,
and a finite-difference gradient checker.

All tensors are float32 torch tensors on CPU. Every op here is a pure
function of its inputs; optimizer state is the only mutable object and is
single-writer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch

log = logging.getLogger(__name__)

# Stand-in for -inf in masked softmax logits. Large enough that exp()
# underflows to exactly 0.0 in float32, so masked positions contribute
# nothing bitwise.
MASK_FILL = -1e9


class DimensionError(ValueError):
    """Shapes of an op's operands are inconsistent."""


class DegenerateMaskError(ValueError):
    """An attention mask leaves some query row with no visible key."""


class NonFiniteError(RuntimeError):
    """A gradient or loss value is NaN/inf."""


@dataclass
class AttentionMask:
    kind: str  # "causal" | "non_causal" | "custom"
    allowed: torch.Tensor  # bool [T_q, T_k]

    @classmethod
    def causal(cls, t_q: int, t_k: int | None = None) -> "AttentionMask":
        t_k = t_q if t_k is None else t_k
        idx_q = torch.arange(t_q).unsqueeze(1)
        idx_k = torch.arange(t_k).unsqueeze(0)
        return cls("causal", idx_k <= idx_q)

    @classmethod
    def non_causal(cls, t_q: int, t_k: int | None = None) -> "AttentionMask":
        t_k = t_q if t_k is None else t_k
        return cls("non_causal", torch.ones(t_q, t_k, dtype=torch.bool))

    @classmethod
    def custom(cls, allowed: torch.Tensor) -> "AttentionMask":
        return cls("custom", allowed.bool())

    def validate(self, t_q: int, t_k: int) -> None:
        if tuple(self.allowed.shape) != (t_q, t_k):
            raise DimensionError(
                f"mask is {tuple(self.allowed.shape)}, expected ({t_q}, {t_k})"
            )
        rows = self.allowed.any(dim=1)
        if not bool(rows.all()):
            bad = int((~rows).nonzero()[0])
            raise DegenerateMaskError(f"query row {bad} has no allowed key")


def masked_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: AttentionMask
) -> torch.Tensor:
    """Single-head scaled dot-product attention with a boolean mask.

    output[i] = sum_j softmax_row(q kᵀ / sqrt(d), disallowed -> -inf)[i, j] v[j]
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("q/k/v must be 2-D [T, d]")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"q dim {q.shape[1]} != k dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"k rows {k.shape[0]} != v rows {v.shape[0]}")
    mask.validate(q.shape[0], k.shape[0])
    scores = q @ k.T / math.sqrt(q.shape[1])
    scores = scores.masked_fill(~mask.allowed, MASK_FILL)
    weights = torch.softmax(scores, dim=1)
    return weights @ v


def cross_entropy(
    logits: torch.Tensor, targets: torch.Tensor, ignore_id: int = -100
) -> tuple[torch.Tensor, int]:
    """Mean token-level cross entropy over non-ignored positions.

    Returns (loss, contributing_count); loss is 0 when every target is
    ignored.
    """
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(
            f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}"
        )
    keep = targets != ignore_id
    n = int(keep.sum())
    if n == 0:
        return logits.sum() * 0.0, 0
    kept_logits = logits[keep]
    kept_targets = targets[keep]
    if int(kept_targets.min()) < 0 or int(kept_targets.max()) >= logits.shape[1]:
        raise IndexError("target id outside vocabulary")
    logp = torch.log_softmax(kept_logits, dim=1)
    loss = -logp[torch.arange(n), kept_targets].mean()
    return loss, n


@dataclass
class OptimizerState:
    """Per-parameter Adam moments keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step_count: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"grad shape mismatch for {name}")
        if not bool(torch.isfinite(g).all()):
            pos = int((~torch.isfinite(g)).flatten().nonzero()[0])
            raise NonFiniteError(f"non-finite gradient in {name} at flat index {pos}")
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        m_hat = m / bc1
        v_hat = v / bc2
        p.add_(m_hat / (v_hat.sqrt() + state.eps), alpha=-lr)


class Adam:
    """Convenience wrapper tying an OptimizerState to a module's parameters."""

    def __init__(self, module: torch.nn.Module):
        self.module = module
        self.state = OptimizerState()

    def step(self, lr: float) -> None:
        params = dict(self.module.named_parameters())
        grads = {
            n: p.grad for n, p in params.items() if p.grad is not None
        }
        adam_step({n: p.data for n, p in params.items()}, grads, self.state, lr)

    def zero_grad(self) -> None:
        self.module.zero_grad(set_to_none=True)


_clamp_logged = False


def cosine_lr(
    step: int,
    warmup_steps: int,
    lr_min: float,
    lr_max: float,
    total_steps: int,
) -> float:
    """Linear warmup from 0 to lr_max, then cosine decay to lr_min."""
    global _clamp_logged
    if lr_min > lr_max:
        raise ValueError("lr_min must not exceed lr_max")
    if step > total_steps:
        if not _clamp_logged:
            log.warning("cosine_lr: step %d > total %d, clamping", step, total_steps)
            _clamp_logged = True
        return lr_min
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * step / warmup_steps
    if total_steps == warmup_steps:
        return lr_max
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_min + (lr_max - lr_min) * 0.5 * (1.0 + math.cos(math.pi * frac))


def grad_check(
    loss_fn,
    params: list[torch.Tensor],
    eps: float = 1e-3,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    Samples at most max_coords coordinates per tensor so the cost stays
    O(forward). loss_fn must be a pure deterministic function of params.
    """
    for p in params:
        p.requires_grad_(True)
    loss = loss_fn()
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError("loss is non-finite")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        n = p.numel()
        idx = (
            torch.arange(n)
            if n <= max_coords
            else torch.randperm(n, generator=gen)[:max_coords]
        )
        flat = p.data.view(-1)
        for i in idx.tolist():
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                hi = float(loss_fn())
            flat[i] = orig - eps
            with torch.no_grad():
                lo = float(loss_fn())
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            ad = float(g.view(-1)[i])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst
