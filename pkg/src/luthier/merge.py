"""Pairwise checkpoint merging by linear or spherical linear interpolation.

Both methods blend a base model ``w0`` with a fine-tuned model ``w1`` under a
single coefficient ``alpha`` (the fine-tuned model's share):

    linear:  w = (1 - alpha) * w0 + alpha * w1
    slerp:   w = sin((1 - alpha) * theta) / sin(theta) * w0
               + sin(alpha * theta) / sin(theta) * w1

``theta`` is the angle between the two tensors, taken per tensor from the
flattened, normalized vectors; the interpolation weights are applied to the
original (unnormalized) buffers so the alpha = 0 / alpha = 1 boundaries stay
exact. Near-parallel tensors (sin(theta) below an epsilon) fall back to linear
interpolation.
"""

from __future__ import annotations

import fnmatch
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor_archive import (
    TensorArchive,
    TensorData,
    TensorMeta,
    narrow_from_f32,
    read_tensor,
    widen_to_f32,
    write_archive,
)

__all__ = [
    "MergeError",
    "Override",
    "MergeSpec",
    "TensorReport",
    "lerp",
    "slerp",
    "merge_archives",
    "report_to_jsonl",
]

METHOD_LINEAR = "linear"
METHOD_SLERP = "slerp"
POLICY_ERROR = "error"
POLICY_TAKE_FINE_TUNED = "take_fine_tuned"


class MergeError(Exception):
    """Invalid merge request or corrupt (non-finite) tensor data."""


@dataclass(frozen=True)
class Override:
    """Per-tensor rule: first glob that matches a tensor name wins."""

    pattern: str
    method: str
    alpha: float


@dataclass(frozen=True)
class MergeSpec:
    method: str
    alpha: float
    overrides: tuple[Override, ...] = ()
    mismatch_policy: str = POLICY_ERROR
    parallel_fallback_epsilon: float = 1e-6

    def __post_init__(self) -> None:
        _validate_rule(self.method, self.alpha)
        for rule in self.overrides:
            _validate_rule(rule.method, rule.alpha)
        if self.mismatch_policy not in (POLICY_ERROR, POLICY_TAKE_FINE_TUNED):
            raise MergeError(f"unknown mismatch_policy {self.mismatch_policy!r}")
        if not self.parallel_fallback_epsilon > 0:
            raise MergeError("parallel_fallback_epsilon must be > 0")

    def resolve(self, name: str) -> tuple[str, float]:
        for rule in self.overrides:
            if fnmatch.fnmatchcase(name, rule.pattern):
                return rule.method, rule.alpha
        return self.method, self.alpha


def _validate_rule(method: str, alpha: float) -> None:
    if method not in (METHOD_LINEAR, METHOD_SLERP):
        raise MergeError(f"unknown merge method {method!r}")
    if not 0.0 <= alpha <= 1.0:
        raise MergeError(f"alpha must be in [0, 1], got {alpha}")


@dataclass
class TensorReport:
    name: str
    method: str
    alpha: float
    theta: float | None = None
    fallback_used: bool = False
    max_abs_delta_from_base: float | None = 0.0

    def to_dict(self) -> dict:
        out: dict = {"name": self.name, "method": self.method, "alpha": self.alpha}
        if self.theta is not None:
            out["theta"] = self.theta
        out["fallback_used"] = self.fallback_used
        out["max_abs_delta_from_base"] = self.max_abs_delta_from_base
        return out


def report_to_jsonl(reports: Sequence[TensorReport]) -> str:
    return "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in reports)


def _check_finite(values: np.ndarray, label: str) -> None:
    finite = np.isfinite(values)
    if not finite.all():
        index = int(np.argmin(finite))
        raise MergeError(f"non-finite value in {label} at flat index {index}")


def _check_lengths(w0: np.ndarray, w1: np.ndarray) -> None:
    if w0.size != w1.size:
        raise MergeError(f"length mismatch: {w0.size} vs {w1.size} elements")


def lerp(w0: np.ndarray, w1: np.ndarray, alpha: float) -> np.ndarray:
    """Elementwise (1 - alpha) * w0 + alpha * w1 in float64, returned as float32."""
    w0 = np.asarray(w0, dtype=np.float32).reshape(-1)
    w1 = np.asarray(w1, dtype=np.float32).reshape(-1)
    _check_lengths(w0, w1)
    _check_finite(w0, "w0")
    _check_finite(w1, "w1")
    # Exact copies at the boundaries (avoids -0.0 + 0.0 sign churn).
    if alpha == 0.0:
        return w0.copy()
    if alpha == 1.0:
        return w1.copy()
    out = (1.0 - alpha) * w0.astype(np.float64) + alpha * w1.astype(np.float64)
    return out.astype(np.float32)


def slerp(
    w0: np.ndarray,
    w1: np.ndarray,
    alpha: float,
    epsilon: float = 1e-6,
) -> tuple[np.ndarray, float, bool]:
    """Spherical interpolation of two flattened buffers.

    Returns ``(values, theta, fallback)``. The angle comes from the normalized
    vectors with the dot product clamped to [-1, 1]; when sin(theta) < epsilon
    (parallel or antiparallel) or either vector has zero norm, the result is
    the linear interpolation and ``fallback`` is True.
    """
    w0 = np.asarray(w0, dtype=np.float32).reshape(-1)
    w1 = np.asarray(w1, dtype=np.float32).reshape(-1)
    _check_lengths(w0, w1)
    if w0.size == 0:
        raise MergeError("slerp requires at least one element")
    _check_finite(w0, "w0")
    _check_finite(w1, "w1")

    a = w0.astype(np.float64)
    b = w1.astype(np.float64)
    norm0 = math.sqrt(float(np.dot(a, a)))
    norm1 = math.sqrt(float(np.dot(b, b)))
    if norm0 == 0.0 or norm1 == 0.0:
        return lerp(w0, w1, alpha), 0.0, True

    cos_theta = float(np.dot(a, b)) / (norm0 * norm1)
    cos_theta = max(-1.0, min(1.0, cos_theta))
    theta = math.acos(cos_theta)
    sin_theta = math.sin(theta)
    if sin_theta < epsilon:
        return lerp(w0, w1, alpha), theta, True

    if alpha == 0.0:
        return w0.copy(), theta, False
    if alpha == 1.0:
        return w1.copy(), theta, False
    s0 = math.sin((1.0 - alpha) * theta) / sin_theta
    s1 = math.sin(alpha * theta) / sin_theta
    out = (s0 * a + s1 * b).astype(np.float32)
    return out, theta, False


def merge_archives(
    base: TensorArchive,
    fine_tuned: TensorArchive,
    spec: MergeSpec,
    out: str | Path,
) -> list[TensorReport]:
    """Merge two archives tensor by tensor and write the result to ``out``.

    Output preserves the base archive's tensor order and metadata; each tensor
    is computed in float32 (float64 accumulation) and narrowed back to the
    base dtype. Under the ``take_fine_tuned`` policy, names present in only
    one archive are copied through (fine-tuned extras appended after the base
    ordering); under ``error`` any name-set difference is fatal. A shape or
    dtype mismatch on a shared name is always fatal.
    """
    base_names = set(base.entries)
    ft_names = set(fine_tuned.entries)
    if spec.mismatch_policy == POLICY_ERROR and base_names != ft_names:
        only_base = sorted(base_names - ft_names)
        only_ft = sorted(ft_names - base_names)
        parts = []
        if only_base:
            parts.append(f"only in base: {only_base}")
        if only_ft:
            parts.append(f"only in fine-tuned: {only_ft}")
        raise MergeError("tensor name sets differ; " + "; ".join(parts))

    for name in sorted(base_names & ft_names):
        m0, m1 = base.entries[name], fine_tuned.entries[name]
        if m0.shape != m1.shape or m0.dtype != m1.dtype:
            raise MergeError(
                f"tensor {name!r} differs between archives: "
                f"{m0.dtype}{list(m0.shape)} vs {m1.dtype}{list(m1.shape)}"
            )

    ordered = [(name, "merge") for name in base.entries if name in ft_names]
    if spec.mismatch_policy == POLICY_TAKE_FINE_TUNED:
        ordered = [
            (name, "merge" if name in ft_names else "take_base") for name in base.entries
        ]
        ordered += [
            (name, "take_fine_tuned") for name in fine_tuned.entries if name not in base_names
        ]

    out_entries: list[tuple[str, TensorData]] = []
    reports: list[TensorReport] = []
    for name, route in ordered:
        if route == "take_base":
            data = read_tensor(base, name)
            out_entries.append((name, data))
            reports.append(
                TensorReport(name=name, method=route, alpha=0.0, max_abs_delta_from_base=0.0)
            )
            continue
        if route == "take_fine_tuned":
            data = read_tensor(fine_tuned, name)
            out_entries.append((name, data))
            reports.append(
                TensorReport(name=name, method=route, alpha=1.0, max_abs_delta_from_base=None)
            )
            continue
        out_entries.append(_merge_one(base, fine_tuned, spec, name, reports))

    write_archive(out_entries, base.metadata, out)
    return reports


def _merge_one(
    base: TensorArchive,
    fine_tuned: TensorArchive,
    spec: MergeSpec,
    name: str,
    reports: list[TensorReport],
) -> tuple[str, TensorData]:
    meta = base.entries[name]
    method, alpha = spec.resolve(name)
    w0 = widen_to_f32(read_tensor(base, name).values, meta.dtype)
    w1 = widen_to_f32(read_tensor(fine_tuned, name).values, meta.dtype)
    try:
        _check_finite(w0, f"base tensor {name!r}")
        _check_finite(w1, f"fine-tuned tensor {name!r}")
        if w0.size == 0:
            merged = w0
            theta: float | None = 0.0 if method == METHOD_SLERP else None
            fallback = method == METHOD_SLERP
        elif method == METHOD_LINEAR:
            merged = lerp(w0, w1, alpha)
            theta = None
            fallback = False
        else:
            merged, theta, fallback = slerp(w0, w1, alpha, spec.parallel_fallback_epsilon)
    except MergeError as exc:
        raise MergeError(f"tensor {name!r}: {exc}") from exc

    raw = narrow_from_f32(merged, meta.dtype)
    if w0.size:
        written = widen_to_f32(raw, meta.dtype)
        max_delta = float(np.max(np.abs(written - w0)))
    else:
        max_delta = 0.0
    reports.append(
        TensorReport(
            name=name,
            method=method,
            alpha=alpha,
            theta=theta,
            fallback_used=fallback,
            max_abs_delta_from_base=max_delta,
        )
    )
    data = TensorData(
        meta=TensorMeta(dtype=meta.dtype, shape=meta.shape, data_offsets=(0, len(raw))),
        values=raw,
    )
    return name, data
