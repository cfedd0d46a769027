"""Sequence packing: fit tokenized conversations into fixed-budget rows.

First-fit-decreasing over (id, token_count) pairs. Samples are never split
across rows, so a conversation always trains as one contiguous unit; the FFD
pre-sort also makes the packing independent of input order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

__all__ = [
    "PackError",
    "TokenCounter",
    "PackedBatch",
    "count_tokens",
    "pack_ffd",
    "pack_report",
    "DEFAULT_CAPACITY",
]

DEFAULT_CAPACITY = 16_384
DEFAULT_BYTES_PER_TOKEN = 3.2
# flat allowance per message for role tags and chat-template markup
TOKENS_PER_MESSAGE = 8

MODE_BYTE = "byte"
MODE_PRECOMPUTED = "precomputed"


class PackError(Exception):
    """Invalid counter setup or a sample that cannot fit any batch."""


@dataclass(frozen=True)
class TokenCounter:
    mode: str = MODE_BYTE
    bytes_per_token: float = DEFAULT_BYTES_PER_TOKEN

    def __post_init__(self) -> None:
        if self.mode not in (MODE_BYTE, MODE_PRECOMPUTED):
            raise PackError(f"unknown counter mode {self.mode!r}")
        if not self.bytes_per_token > 0:
            raise PackError("bytes_per_token must be > 0")

    @classmethod
    def parse(cls, text: str) -> "TokenCounter":
        """CLI shorthand: ``byte:3.2`` or ``precomputed``."""
        if text == MODE_PRECOMPUTED:
            return cls(mode=MODE_PRECOMPUTED)
        if text == MODE_BYTE:
            return cls(mode=MODE_BYTE)
        if text.startswith(f"{MODE_BYTE}:"):
            return cls(mode=MODE_BYTE, bytes_per_token=float(text.split(":", 1)[1]))
        raise PackError(f"cannot parse counter spec {text!r}")


def count_tokens(conversation, counter: TokenCounter) -> int:
    """Estimate (or pass through) the token footprint of one conversation."""
    if counter.mode == MODE_PRECOMPUTED:
        if conversation.token_count is None:
            raise PackError(
                f"conversation {conversation.id!r} has no precomputed token_count"
            )
        return conversation.token_count
    total_bytes = sum(len(m.content.encode("utf-8")) for m in conversation.messages)
    return math.ceil(total_bytes / counter.bytes_per_token) + TOKENS_PER_MESSAGE * len(
        conversation.messages
    )


@dataclass
class PackedBatch:
    capacity: int
    items: list[tuple[str, int]] = field(default_factory=list)
    used: int = 0

    def fits(self, tokens: int) -> bool:
        return self.used + tokens <= self.capacity

    def add(self, sample_id: str, tokens: int) -> None:
        self.items.append((sample_id, tokens))
        self.used += tokens

    def utilization(self) -> float:
        return self.used / self.capacity

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "used": self.used,
            "items": [{"id": i, "tokens": t} for i, t in self.items],
        }


def pack_ffd(
    samples: Sequence[tuple[str, int]] | Iterable[tuple[str, int]],
    capacity: int = DEFAULT_CAPACITY,
) -> list[PackedBatch]:
    """First-fit-decreasing; ties in size break on id so packing is canonical."""
    if capacity <= 0:
        raise PackError("capacity must be positive")
    samples = list(samples)
    for sample_id, tokens in samples:
        if tokens < 0:
            raise PackError(f"sample {sample_id!r} has negative token count")
        if tokens > capacity:
            raise PackError(
                f"sample {sample_id!r} holds {tokens} tokens, over the capacity {capacity}"
            )
    batches: list[PackedBatch] = []
    for sample_id, tokens in sorted(samples, key=lambda s: (-s[1], s[0])):
        for batch in batches:
            if batch.fits(tokens):
                batch.add(sample_id, tokens)
                break
        else:
            batch = PackedBatch(capacity=capacity)
            batch.add(sample_id, tokens)
            batches.append(batch)
    return batches


def pack_report(batches: Sequence[PackedBatch]) -> dict:
    """Batch count plus utilization summary and a 10-bin histogram."""
    if not batches:
        return {
            "batch_count": 0,
            "mean_utilization": None,
            "min_utilization": None,
            "histogram": [0] * 10,
        }
    utilizations = [b.utilization() for b in batches]
    histogram = [0] * 10
    for u in utilizations:
        histogram[min(int(u * 10), 9)] += 1
    return {
        "batch_count": len(batches),
        "mean_utilization": sum(utilizations) / len(utilizations),
        "min_utilization": min(utilizations),
        "histogram": histogram,
    }


def batches_to_jsonl(batches: Sequence[PackedBatch]) -> str:
    return "".join(json.dumps(b.to_dict(), ensure_ascii=False) + "\n" for b in batches)
