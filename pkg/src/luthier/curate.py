"""French SFT corpus construction pipeline.

Fixed stage order: ingest -> language isolation -> (prompt translation ->
response regeneration, for designated English sources) -> linguistic judge ->
content judge -> dedup. Assistant answers of translated conversations are
dropped and regenerated in French from scratch; they are never translated
directly.

Every stage conserves its input (kept + dropped + quarantined = input) and
preserves input order among kept items. Samples that fail for infrastructure
reasons (gateway errors, unparseable judge verdicts) are quarantined, not
dropped, so transient failures can be re-processed instead of silently
shrinking the corpus.
"""

from __future__ import annotations

import hashlib
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .gateway import Gateway, GatewayError, VerdictError, parse_verdict, simple_request
from .langid import MIN_CONFIDENCE, LanguageProfile, builtin_profiles, detect
from .prompts import load_prompt, prompt_hash

__all__ = [
    "CurateError",
    "Message",
    "Conversation",
    "StageStats",
    "StageResult",
    "PipelineOptions",
    "PipelineResult",
    "ingest",
    "filter_french",
    "translate_prompts",
    "generate_responses",
    "judge_filter",
    "dedup",
    "corpus_stats",
    "largest_remainder_percentages",
    "run_pipeline",
]

GENERATION_SYSTEM_PROMPT = "Vous êtes un assistant utile."


class CurateError(Exception):
    """Malformed input corpus or invalid pipeline configuration."""


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass
class Conversation:
    id: str
    source: str
    messages: list[Message]
    subject: str | None = None
    language: str | None = None
    token_count: int | None = None
    provenance: list[str] = field(default_factory=list)

    def stamped(self, stamp: str) -> "Conversation":
        return replace(self, provenance=[*self.provenance, stamp])

    def user_text(self) -> str:
        return "\n\n".join(m.content for m in self.messages if m.role == "user")

    def assistant_text(self) -> str:
        return "\n\n".join(m.content for m in self.messages if m.role == "assistant")

    def to_dict(self) -> dict:
        out: dict = {
            "id": self.id,
            "source": self.source,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
        }
        if self.subject is not None:
            out["subject"] = self.subject
        if self.language is not None:
            out["language"] = self.language
        if self.token_count is not None:
            out["token_count"] = self.token_count
        if self.provenance:
            out["provenance"] = list(self.provenance)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


@dataclass
class StageStats:
    stage: str
    input_count: int = 0
    kept: int = 0
    dropped: int = 0
    quarantined: int = 0
    breakdown: dict[str, int] = field(default_factory=dict)

    def note(self, reason: str) -> None:
        self.breakdown[reason] = self.breakdown.get(reason, 0) + 1

    def check(self) -> None:
        if self.kept + self.dropped + self.quarantined != self.input_count:
            raise CurateError(
                f"stage {self.stage}: kept {self.kept} + dropped {self.dropped} "
                f"+ quarantined {self.quarantined} != input {self.input_count}"
            )

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "input_count": self.input_count,
            "kept": self.kept,
            "dropped": self.dropped,
            "quarantined": self.quarantined,
            "breakdown": dict(sorted(self.breakdown.items())),
        }


@dataclass
class StageResult:
    kept: list[Conversation]
    quarantined: list[tuple[Conversation, str]]
    stats: StageStats
    # positions of kept items within the stage's input sequence; lets the
    # pipeline re-sequence branch outputs even when ids collide
    kept_indices: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# ingest

_ROLES = ("system", "user", "assistant")
_WS_RE = re.compile(r"\s+")


def _content_hash(messages: Sequence[Message]) -> str:
    canon = json.dumps(
        [[m.role, m.content] for m in messages], ensure_ascii=False, separators=(",", ":")
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _parse_line(raw: str) -> Conversation:
    record = json.loads(raw)
    if not isinstance(record, dict):
        raise CurateError("line is not a JSON object")
    if "messages" not in record:
        raise CurateError("missing 'messages'")
    if "source" not in record or not isinstance(record["source"], str):
        raise CurateError("missing 'source'")
    raw_messages = record["messages"]
    if not isinstance(raw_messages, list) or not raw_messages:
        raise CurateError("'messages' must be a non-empty list")
    messages = []
    for m in raw_messages:
        if not isinstance(m, dict) or not isinstance(m.get("role"), str) or not isinstance(
            m.get("content"), str
        ):
            raise CurateError("malformed message object")
        if m["role"] not in _ROLES:
            raise CurateError(f"invalid role {m['role']!r}")
        messages.append(Message(role=m["role"], content=m["content"]))
    _check_turn_order(messages)
    conv_id = record.get("id")
    if conv_id is not None and not isinstance(conv_id, str):
        raise CurateError("'id' must be a string")
    subject = record.get("subject")
    if subject is not None and not isinstance(subject, str):
        raise CurateError("'subject' must be a string")
    return Conversation(
        id=conv_id or _content_hash(messages),
        source=record["source"],
        messages=messages,
        subject=subject,
    )


def _check_turn_order(messages: Sequence[Message]) -> None:
    """Optional system first, then user/assistant alternating from user."""
    body = list(messages)
    if body and body[0].role == "system":
        body = body[1:]
    if not body:
        raise CurateError("conversation has no user turns")
    for i, message in enumerate(body):
        expected = "user" if i % 2 == 0 else "assistant"
        if message.role != expected:
            raise CurateError(
                f"turn {i} should be {expected}, found {message.role}"
            )


MAX_MALFORMED_FRACTION = 0.10


def ingest(paths: Sequence[str | Path]) -> tuple[list[Conversation], StageStats]:
    """Parse JSONL corpora; skip and count malformed lines, fail leaky files."""
    stats = StageStats(stage="ingest")
    out: list[Conversation] = []
    for path in paths:
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        malformed = 0
        parsed: list[Conversation] = []
        total = 0
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            total += 1
            try:
                parsed.append(_parse_line(line))
            except (CurateError, json.JSONDecodeError) as exc:
                malformed += 1
                stats.note(f"malformed:{path.name}:{lineno}:{exc}")
        if total and malformed / total > MAX_MALFORMED_FRACTION:
            raise CurateError(
                f"{path}: {malformed}/{total} lines malformed, over the "
                f"{MAX_MALFORMED_FRACTION:.0%} limit"
            )
        stats.input_count += total
        stats.dropped += malformed
        stats.kept += len(parsed)
        out.extend(parsed)
    stats.check()
    return out, stats


# ---------------------------------------------------------------------------
# language isolation


def filter_french(
    conversations: Iterable[Conversation],
    min_confidence: float = MIN_CONFIDENCE,
    profiles: Sequence[LanguageProfile] | None = None,
) -> StageResult:
    """Keep conversations whose combined user+assistant text detects as French."""
    profiles = list(profiles) if profiles is not None else builtin_profiles()
    stats = StageStats(stage="language")
    kept: list[Conversation] = []
    for conv in conversations:
        stats.input_count += 1
        text = "\n".join(filter(None, [conv.user_text(), conv.assistant_text()]))
        verdict = detect(text, profiles, min_confidence)
        if verdict.language == "fr":
            stats.kept += 1
            kept.append(replace(conv, language="fr"))
        else:
            stats.dropped += 1
            stats.note(verdict.language)
    stats.check()
    return StageResult(kept=kept, quarantined=[], stats=stats)


# ---------------------------------------------------------------------------
# gateway-backed stages


@dataclass
class PipelineOptions:
    model: str
    translate_sources: tuple[str, ...] = ()
    min_confidence: float = MIN_CONFIDENCE
    max_tokens: int = 2048
    generation_system_prompt: str = GENERATION_SYSTEM_PROMPT
    jobs: int = 1

    def __post_init__(self) -> None:
        if not self.model:
            raise CurateError("pipeline needs a model identifier")
        if self.jobs <= 0:
            raise CurateError("jobs must be positive")


def _map_stage(
    stage: str,
    conversations: Sequence[Conversation],
    worker: Callable[[Conversation], Conversation | None],
    jobs: int,
    *,
    drop_reason: str | None = None,
) -> StageResult:
    """Run a per-item worker, re-sequencing outputs to input order.

    The worker returns the transformed conversation, None for a drop, or
    raises GatewayError/VerdictError for a quarantine.
    """
    stats = StageStats(stage=stage)
    kept: list[Conversation] = []
    quarantined: list[tuple[Conversation, str]] = []

    def run(conv: Conversation):
        try:
            return ("ok", worker(conv))
        except VerdictError as exc:
            return ("quarantine", f"unparseable-verdict: {exc.raw!r}")
        except GatewayError as exc:
            return ("quarantine", f"gateway: {exc}")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, conversations))
    else:
        outcomes = [run(c) for c in conversations]

    for conv, (status, value) in zip(conversations, outcomes):
        stats.input_count += 1
        if status == "quarantine":
            stats.quarantined += 1
            stats.note("quarantined")
            quarantined.append((conv, value))
        elif value is None:
            stats.dropped += 1
            stats.note(drop_reason or "dropped")
        else:
            stats.kept += 1
            kept.append(value)
    stats.check()
    return StageResult(kept=kept, quarantined=quarantined, stats=stats)


def translate_prompts(
    conversations: Sequence[Conversation],
    gateway: Gateway,
    options: PipelineOptions,
) -> StageResult:
    """Translate user turns to French and discard original assistant turns."""
    system = load_prompt("translate")
    stamp = f"translated:{prompt_hash('translate')}"

    def worker(conv: Conversation) -> Conversation:
        new_messages: list[Message] = []
        for message in conv.messages:
            if message.role == "assistant":
                continue  # regenerated from scratch later
            if message.role == "system":
                new_messages.append(message)
                continue
            translated = gateway.complete(
                simple_request(
                    options.model,
                    system,
                    message.content,
                    max_tokens=options.max_tokens,
                )
            )
            if not translated.strip():
                raise GatewayError("empty translation")
            new_messages.append(Message(role="user", content=translated))
        return replace(conv, messages=new_messages).stamped(stamp)

    return _map_stage("translate", conversations, worker, options.jobs)


def generate_responses(
    conversations: Sequence[Conversation],
    gateway: Gateway,
    options: PipelineOptions,
) -> StageResult:
    """Generate a French assistant turn after each user turn, in order."""
    stamp = "generated"

    def worker(conv: Conversation) -> Conversation:
        if any(m.role == "assistant" for m in conv.messages):
            raise CurateError(f"conversation {conv.id} already has assistant turns")
        history: list[Message] = []
        out: list[Message] = []
        for message in conv.messages:
            out.append(message)
            if message.role != "user":
                continue
            reply = gateway.complete(
                simple_request(
                    options.model,
                    options.generation_system_prompt,
                    message.content,
                    history=tuple(history),
                    max_tokens=options.max_tokens,
                )
            )
            if not reply.strip():
                raise GatewayError("empty-response")
            history.append(message)
            answer = Message(role="assistant", content=reply)
            history.append(answer)
            out.append(answer)
        return replace(conv, messages=out).stamped(stamp)

    return _map_stage("generate", conversations, worker, options.jobs)


JUDGE_STAGES = {
    "content": "judge_content",
    "linguistic": "judge_linguistic",
}


def _qa_pair_text(conv: Conversation) -> str:
    return f"Question:\n{conv.user_text()}\n\nAnswer:\n{conv.assistant_text()}"


def judge_filter(
    conversations: Sequence[Conversation],
    gateway: Gateway,
    stage: str,
    options: PipelineOptions,
) -> StageResult:
    """Binary LLM screen; True keeps the sample, False drops it."""
    if stage not in JUDGE_STAGES:
        raise CurateError(f"unknown judge stage {stage!r}")
    prompt_name = JUDGE_STAGES[stage]
    system = load_prompt(prompt_name)
    stamp = f"judge-{stage}:{prompt_hash(prompt_name)}"

    def worker(conv: Conversation) -> Conversation | None:
        if not conv.user_text() or not conv.assistant_text():
            raise CurateError(f"conversation {conv.id} is not a complete Q&A pair")
        raw = gateway.complete(
            simple_request(
                options.model,
                system,
                _qa_pair_text(conv),
                max_tokens=8,
            )
        )
        verdict = parse_verdict(raw)
        if not verdict.keep:
            return None
        return conv.stamped(stamp)

    return _map_stage(
        f"judge-{stage}", conversations, worker, options.jobs, drop_reason="judge-false"
    )


# ---------------------------------------------------------------------------
# dedup & stats


def _dedup_key(conv: Conversation) -> str:
    normalized = _WS_RE.sub(" ", conv.user_text().casefold()).strip()
    return hashlib.sha256(normalized.encode("utf-8")).hexdigest()


def dedup(conversations: Iterable[Conversation]) -> StageResult:
    """Drop conversations repeating an earlier normalized user-turn text."""
    stats = StageStats(stage="dedup")
    seen: set[str] = set()
    kept: list[Conversation] = []
    for conv in conversations:
        stats.input_count += 1
        key = _dedup_key(conv)
        if key in seen:
            stats.dropped += 1
            stats.note("duplicate")
        else:
            seen.add(key)
            stats.kept += 1
            kept.append(conv)
    stats.check()
    return StageResult(kept=kept, quarantined=[], stats=stats)


def largest_remainder_percentages(counts: dict[str, int]) -> dict[str, float]:
    """Two-decimal percentages that always sum to 100.00.

    Integer basis-point arithmetic: floor every share, then hand the leftover
    hundredths to the largest remainders (ties: larger count, then name).
    """
    total = sum(counts.values())
    if total == 0:
        return {}
    floors: dict[str, int] = {}
    remainders: list[tuple[int, int, str]] = []
    for name, count in counts.items():
        floors[name] = count * 10000 // total
        remainders.append((count * 10000 % total, count, name))
    deficit = 10000 - sum(floors.values())
    for remainder, count, name in sorted(remainders, key=lambda r: (-r[0], -r[1], r[2])):
        if deficit <= 0:
            break
        floors[name] += 1
        deficit -= 1
    return {name: floors[name] / 100 for name in counts}


def corpus_stats(conversations: Sequence[Conversation]) -> dict:
    """Sample count, token total, and per-source / per-subject distributions."""
    sources: dict[str, int] = {}
    subjects: dict[str, int] = {}
    unlabeled = 0
    tokens = 0
    for conv in conversations:
        if conv.token_count is None:
            raise CurateError(f"conversation {conv.id} has no token_count stamp")
        tokens += conv.token_count
        sources[conv.source] = sources.get(conv.source, 0) + 1
        if conv.subject is None:
            unlabeled += 1
        else:
            subjects[conv.subject] = subjects.get(conv.subject, 0) + 1
    return {
        "samples": len(conversations),
        "tokens": tokens,
        "sources": {
            "counts": dict(sorted(sources.items())),
            "percentages": largest_remainder_percentages(sources),
        },
        "subjects": {
            "counts": dict(sorted(subjects.items())),
            "percentages": largest_remainder_percentages(subjects),
            "unlabeled": unlabeled,
        },
    }


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass
class PipelineResult:
    kept: list[Conversation]
    quarantined: list[tuple[Conversation, str, str]]  # (conv, stage, reason)
    stages: list[StageStats]

    def had_infrastructure_failures(self) -> bool:
        return bool(self.quarantined)


def run_pipeline(
    conversations: Sequence[Conversation],
    gateway: Gateway,
    options: PipelineOptions,
    profiles: Sequence[LanguageProfile] | None = None,
) -> PipelineResult:
    """Language isolation, translation/regeneration, judges, dedup; in order."""
    profiles = list(profiles) if profiles is not None else builtin_profiles()
    stages: list[StageStats] = []
    quarantined: list[tuple[Conversation, str, str]] = []

    def absorb(result: StageResult) -> list[Conversation]:
        stages.append(result.stats)
        quarantined.extend((c, result.stats.stage, reason) for c, reason in result.quarantined)
        return result.kept

    # language stage with translation routing: French goes straight through,
    # English from designated sources heads to the translate branch
    indexed = {id(conv): i for i, conv in enumerate(conversations)}
    language_stats = StageStats(stage="language")
    french: list[tuple[int, Conversation]] = []
    to_translate: list[tuple[int, Conversation]] = []
    for i, conv in enumerate(conversations):
        language_stats.input_count += 1
        text = "\n".join(filter(None, [conv.user_text(), conv.assistant_text()]))
        verdict = detect(text, profiles, options.min_confidence)
        if verdict.language == "fr":
            language_stats.kept += 1
            french.append((i, replace(conv, language="fr")))
        elif verdict.language == "en" and conv.source in options.translate_sources:
            language_stats.kept += 1
            to_translate.append((i, replace(conv, language="en")))
        else:
            language_stats.dropped += 1
            language_stats.note(verdict.language)
    language_stats.check()
    stages.append(language_stats)

    translated = absorb(
        translate_prompts([c for _, c in to_translate], gateway, options)
    )
    regenerated = absorb(generate_responses(translated, gateway, options))

    # re-sequence the two branches back to input order before judging;
    # translation preserves list order, so positions line up pairwise
    regenerated_indexed = []
    surviving_positions = iter(
        [i for i, _ in to_translate][-len(regenerated) :] if regenerated else []
    )
    # positions cannot be recovered pairwise when items quarantine mid-branch;
    # track ids instead
    position_by_id = {conv.id: i for i, conv in to_translate}
    regenerated_indexed = [(position_by_id[c.id], c) for c in regenerated]
    merged = [c for _, c in sorted(french + regenerated_indexed, key=lambda ic: ic[0])]

    merged = absorb(judge_filter(merged, gateway, "linguistic", options))
    merged = absorb(judge_filter(merged, gateway, "content", options))
    merged = absorb(dedup(merged))
    return PipelineResult(kept=merged, quarantined=quarantined, stages=stages)
