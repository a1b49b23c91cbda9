"""Two-encoder state for phase-1: momentum parameter update and the FIFO
negative queue.

Single-writer contract: only the training loop mutates these objects.
``NegativeQueue.snapshot`` returns an independent copy and may be read
concurrently.
"""

from __future__ import annotations

from typing import Iterable

import torch
import torch.nn.functional as F
from torch import nn

UNIT_NORM_TOL = 1e-5


class MomentumEncoderPair:
    """Flat parameter vectors of the query encoder and its momentum twin.

    ``key`` starts as an exact copy of ``query`` and is only ever moved by
    the momentum rule, never by gradient descent.
    """

    def __init__(self, query: torch.Tensor, momentum: float = 0.999):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {momentum}")
        self.query = query
        self.key = query.detach().clone()
        self.momentum = momentum


def momentum_update(pair: MomentumEncoderPair) -> MomentumEncoderPair:
    """Move the key vector toward the query vector: k <- eta*k + (1-eta)*q."""
    if pair.key.shape != pair.query.shape:
        raise ValueError(
            f"layout mismatch: key {tuple(pair.key.shape)} vs query {tuple(pair.query.shape)}"
        )
    with torch.no_grad():
        pair.key.mul_(pair.momentum).add_(pair.query, alpha=1.0 - pair.momentum)
    return pair


@torch.no_grad()
def copy_into_key_encoder(query_encoder: nn.Module, key_encoder: nn.Module) -> None:
    """Initialize the key encoder as an exact, gradient-free copy of the query encoder."""
    for p_q, p_k in zip(query_encoder.parameters(), key_encoder.parameters()):
        p_k.data.copy_(p_q.data)
        p_k.requires_grad = False
    for b_q, b_k in zip(query_encoder.buffers(), key_encoder.buffers()):
        b_k.data.copy_(b_q.data)


@torch.no_grad()
def momentum_update_modules(
    query_encoder: nn.Module, key_encoder: nn.Module, momentum: float
) -> None:
    """Apply the momentum rule parameter-by-parameter across two same-layout modules."""
    q_params = list(query_encoder.parameters())
    k_params = list(key_encoder.parameters())
    if len(q_params) != len(k_params):
        raise ValueError("query and key encoders have different parameter counts")
    for p_q, p_k in zip(q_params, k_params):
        if p_q.shape != p_k.shape:
            raise ValueError(f"layout mismatch: {tuple(p_q.shape)} vs {tuple(p_k.shape)}")
        p_k.data.mul_(momentum).add_(p_q.data, alpha=1.0 - momentum)


class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm key embeddings.

    Backed by a circular [K, D] buffer.  ``snapshot`` returns the stored
    keys oldest-first; an enqueue of B keys overwrites exactly the B
    oldest entries and advances the cursor by B mod K.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._buffer = torch.zeros(capacity, dim)
        self._cursor = 0
        self._count = 0

    @property
    def count(self) -> int:
        return self._count

    @property
    def is_ready(self) -> bool:
        return self._count == self.capacity

    def enqueue(self, keys: torch.Tensor) -> "NegativeQueue":
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ValueError(f"keys must be [B, {self.dim}], got {tuple(keys.shape)}")
        b = keys.shape[0]
        if b > self.capacity:
            raise ValueError(f"cannot enqueue {b} keys into a queue of capacity {self.capacity}")
        norms = keys.norm(dim=1)
        if ((norms - 1.0).abs() > UNIT_NORM_TOL).any():
            raise ValueError("keys must be unit-norm")
        keys = keys.detach()
        # Re-normalize defensively; guards against accumulated drift.
        keys = F.normalize(keys, dim=1)
        end = self._cursor + b
        if end <= self.capacity:
            self._buffer[self._cursor:end] = keys
        else:
            first = self.capacity - self._cursor
            self._buffer[self._cursor:] = keys[:first]
            self._buffer[:end - self.capacity] = keys[first:]
        self._cursor = end % self.capacity
        self._count = min(self.capacity, self._count + b)
        return self

    def snapshot(self) -> torch.Tensor:
        """All K stored keys, oldest first, as an independent copy."""
        if not self.is_ready:
            raise RuntimeError(
                f"queue not warm-started: holds {self._count} of {self.capacity} keys"
            )
        return torch.cat([self._buffer[self._cursor:], self._buffer[:self._cursor]]).clone()

    def warm_start(self, source: Iterable[torch.Tensor]) -> "NegativeQueue":
        """Consume a stream of key batches; the queue ends up holding the
        most recent K keys of the stream.  The stream must supply at least
        K keys in total."""
        for keys in source:
            for start in range(0, keys.shape[0], self.capacity):
                self.enqueue(keys[start:start + self.capacity])
        if not self.is_ready:
            raise RuntimeError(
                f"warm-start stream supplied only {self._count} of {self.capacity} keys"
            )
        return self

    @classmethod
    def random_filled(
        cls, capacity: int, dim: int, generator: torch.Generator | None = None
    ) -> "NegativeQueue":
        """Queue pre-filled with unit-normalized Gaussian vectors.

        Lets the contrastive loss run from step 1 when no real keys exist yet.
        """
        queue = cls(capacity, dim)
        keys = torch.randn(capacity, dim, generator=generator)
        queue.enqueue(F.normalize(keys, dim=1))
        return queue
