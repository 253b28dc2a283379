"""Contrastive training objectives and the momentum dictionary queue.

All losses accept plain tensors, preserve the input dtype, and reduce by the
arithmetic mean over the batch.  Gradients flow only where the method allows:
the queue and MoCo keys are constants, and the siamese loss detaches its
target branches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

from .errors import ValidationError

_NORM_ATOL = 1e-4


@dataclass
class LossValue:
    """Scalar objective plus diagnostic similarity statistics."""

    value: torch.Tensor  # 0-dim, differentiable
    aux: dict[str, float]

    def item(self) -> float:
        return float(self.value.detach())


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1)


def _require_normalized(x: torch.Tensor, name: str) -> None:
    norms = x.norm(dim=-1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=_NORM_ATOL):
        raise ValidationError(f"{name} rows must be L2-normalized")


def _require_nonzero_rows(x: torch.Tensor, name: str) -> None:
    if (x.norm(dim=-1) < 1e-12).any():
        raise ValidationError(f"{name} contains a zero-norm row")


# ---------------------------------------------------------------------------
# Momentum dictionary queue
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QueueState:
    """Fixed-capacity FIFO of unit-norm key embeddings."""

    keys: torch.Tensor  # [K, D]
    write_cursor: int
    filled: int

    @classmethod
    def create(cls, capacity: int, dim: int, dtype: torch.dtype = torch.float32) -> "QueueState":
        if capacity < 1:
            raise ValidationError(f"queue capacity must be >= 1, got {capacity}")
        return cls(keys=torch.zeros(capacity, dim, dtype=dtype), write_cursor=0, filled=0)

    @property
    def capacity(self) -> int:
        return self.keys.shape[0]

    def negatives(self) -> torch.Tensor:
        """The filled keys, in storage order (order irrelevant to the loss)."""
        return self.keys[: self.filled] if self.filled < self.capacity else self.keys

    def fifo_order(self) -> torch.Tensor:
        """Filled keys from oldest to newest."""
        if self.filled < self.capacity:
            return self.keys[: self.filled]
        return torch.cat([self.keys[self.write_cursor :], self.keys[: self.write_cursor]])


def queue_push(queue: QueueState, keys: torch.Tensor) -> QueueState:
    """Enqueue a batch of unit-norm keys, evicting the oldest entries on wrap."""
    batch = keys.shape[0]
    if batch == 0:
        return queue
    if batch > queue.capacity:
        raise ValidationError(f"cannot push {batch} keys into a queue of capacity {queue.capacity}")
    _require_normalized(keys, "keys")
    new_keys = queue.keys.clone()
    cursor = queue.write_cursor
    detached = keys.detach().to(new_keys.dtype)
    first = min(batch, queue.capacity - cursor)
    new_keys[cursor : cursor + first] = detached[:first]
    if first < batch:  # wrap around
        new_keys[: batch - first] = detached[first:]
    return QueueState(
        keys=new_keys,
        write_cursor=(cursor + batch) % queue.capacity,
        filled=min(queue.filled + batch, queue.capacity),
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def info_nce(
    q: torch.Tensor, k_pos: torch.Tensor, queue: QueueState | None, tau: float
) -> LossValue:
    """Dictionary-lookup contrastive loss over one positive and the queued negatives.

    Mean over the batch of ``-log(exp(q.k+ / tau) / sum_i exp(q.k_i / tau))``
    where the sum runs over the positive plus every filled queue entry.
    """
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    if q.shape != k_pos.shape:
        raise ValidationError(f"query/key shape mismatch: {tuple(q.shape)} vs {tuple(k_pos.shape)}")
    _require_normalized(q, "q")
    _require_normalized(k_pos, "k_pos")

    l_pos = (q * k_pos).sum(dim=1, keepdim=True)
    logits = l_pos
    neg_mean = 0.0
    if queue is not None and queue.filled > 0:
        negatives = queue.negatives().to(q.dtype)
        l_neg = q @ negatives.t()
        logits = torch.cat([l_pos, l_neg], dim=1)
        neg_mean = float(l_neg.detach().mean())
    loss = -F.log_softmax(logits / tau, dim=1)[:, 0].mean()
    return LossValue(
        value=loss,
        aux={"pos_sim": float(l_pos.detach().mean()), "neg_sim": neg_mean},
    )


def momentum_update(theta_k, theta_q, m: float):
    """Elementwise convex combination ``m * theta_k + (1 - m) * theta_q``.

    Accepts a tensor or a mapping of named tensors; returns the same kind.
    """
    if not 0.0 <= m <= 1.0:
        raise ValidationError(f"momentum must be in [0, 1], got {m}")
    if isinstance(theta_k, Mapping):
        if set(theta_k) != set(theta_q):
            raise ValidationError("parameter name sets differ")
        return {name: momentum_update(theta_k[name], theta_q[name], m) for name in theta_k}
    if theta_k.shape != theta_q.shape:
        raise ValidationError(f"parameter shape mismatch: {tuple(theta_k.shape)} vs {tuple(theta_q.shape)}")
    return m * theta_k + (1.0 - m) * theta_q


@torch.no_grad()
def momentum_update_module(key_module: torch.nn.Module, query_module: torch.nn.Module, m: float) -> None:
    """In-place momentum update of a key network's parameters toward the query's.

    Buffers (batch-norm running statistics) are not touched; the key network
    maintains its own through its forward passes.
    """
    if not 0.0 <= m <= 1.0:
        raise ValidationError(f"momentum must be in [0, 1], got {m}")
    query_params = dict(query_module.named_parameters())
    for name, param in key_module.named_parameters():
        param.mul_(m).add_(query_params[name], alpha=1.0 - m)


def nt_xent(z: torch.Tensor, tau: float, pair_index: torch.Tensor | None = None) -> LossValue:
    """Normalized temperature-scaled cross entropy over in-batch pairs.

    ``z`` stacks both views, and by default row ``i`` pairs with ``i + N``
    (and vice versa).  Cosine similarity is used, so rows need not be
    pre-normalized.  The mean runs over all ``2N`` anchors.
    """
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    total = z.shape[0]
    if total < 2 or total % 2 != 0:
        raise ValidationError(f"expected an even batch of >= 2 embeddings, got {total}")
    _require_nonzero_rows(z, "z")
    if pair_index is None:
        n = total // 2
        pair_index = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])

    normalized = l2_normalize(z)
    sim = normalized @ normalized.t()
    logits = sim / tau
    logits.fill_diagonal_(float("-inf"))  # anchors never match themselves
    loss = F.cross_entropy(logits, pair_index.to(logits.device))
    pos_sim = sim[torch.arange(total), pair_index].detach().mean()
    return LossValue(value=loss, aux={"pos_sim": float(pos_sim), "neg_sim": float(sim.detach().mean())})


def neg_cosine(p: torch.Tensor, z: torch.Tensor) -> LossValue:
    """Mean negative cosine similarity between prediction and target rows."""
    if p.shape != z.shape:
        raise ValidationError(f"shape mismatch: {tuple(p.shape)} vs {tuple(z.shape)}")
    _require_nonzero_rows(p, "p")
    _require_nonzero_rows(z, "z")
    cos = (l2_normalize(p) * l2_normalize(z)).sum(dim=1)
    return LossValue(value=-cos.mean(), aux={"pos_sim": float(cos.detach().mean()), "neg_sim": 0.0})


def simsiam_loss(
    p1: torch.Tensor, z1: torch.Tensor, p2: torch.Tensor, z2: torch.Tensor
) -> LossValue:
    """Symmetrized negative cosine loss with stop-gradient on the target branches.

    ``0.5 * D(p1, stopgrad(z2)) + 0.5 * D(p2, stopgrad(z1))``; gradients never
    flow into the producers of ``z1`` and ``z2``.
    """
    first = neg_cosine(p1, z2.detach())
    second = neg_cosine(p2, z1.detach())
    value = 0.5 * first.value + 0.5 * second.value
    pos = 0.5 * (first.aux["pos_sim"] + second.aux["pos_sim"])
    return LossValue(value=value, aux={"pos_sim": pos, "neg_sim": 0.0})
