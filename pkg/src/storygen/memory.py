"""Dual memory store.

Long-term memory is an append-only list of short facts. Round 0 holds the
Starter's settings (topic, characters, goal, first outline) and is never
truncated when rendered, since it is what keeps later rounds on theme. Every
later round adds facts summarized by the backend. Short-term memory is a
sliding window over the two most recent outlines.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from collections import deque
from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

from storygen.backend import Backend
from storygen.models import Outline, StorySettings
from storygen.prompts import DEFAULT_PROMPTS, PromptLibrary
from storygen.trace import RunTrace

logger = logging.getLogger(__name__)

SHORT_TERM_SIZE = 2
DEFAULT_BUDGET_CHARS = 6000
MIN_BUDGET_CHARS = 500

_FACT_RE = re.compile(r"^\s*(?:[-*]\s*)?FACT:\s*(.+?)\s*$", re.MULTILINE | re.IGNORECASE)


class AlreadyInitialized(RuntimeError):
    pass


class BudgetTooSmall(ValueError):
    def __init__(self, needed: int, budget: int) -> None:
        super().__init__(f"round-0 entries need {needed} chars, budget is {budget}")
        self.needed = needed
        self.budget = budget


class ParseError(ValueError):
    pass


class EntryKind(str, Enum):
    SETTING = "setting"
    CHARACTER = "character"
    GOAL = "goal"
    OUTLINE_FACT = "outline_fact"
    STORY_FACT = "story_fact"


@dataclass(frozen=True)
class LongTermEntry:
    round_index: int
    kind: EntryKind
    text: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EntryKind(self.kind))
        if self.round_index < 0:
            raise ValueError("round_index must be >= 0")
        if not self.text.strip():
            raise ValueError("entry text must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {"round_index": self.round_index, "kind": self.kind.value, "text": self.text}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LongTermEntry:
        return cls(data["round_index"], EntryKind(data["kind"]), data["text"])


class LongTermMemory:
    def __init__(self, entries: Iterable[LongTermEntry] = ()) -> None:
        self._entries: list[LongTermEntry] = []
        self._lock = threading.Lock()
        self.extend(entries)

    @property
    def entries(self) -> tuple[LongTermEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    @property
    def max_round(self) -> int | None:
        with self._lock:
            return self._entries[-1].round_index if self._entries else None

    def anchors(self) -> tuple[LongTermEntry, ...]:
        return tuple(e for e in self.entries if e.round_index == 0)

    def facts(self) -> tuple[LongTermEntry, ...]:
        return tuple(e for e in self.entries if e.round_index > 0)

    def extend(self, entries: Iterable[LongTermEntry]) -> None:
        with self._lock:
            for entry in entries:
                if self._entries and entry.round_index < self._entries[-1].round_index:
                    raise ValueError("long-term rounds must be nondecreasing")
                self._entries.append(entry)

    def __len__(self) -> int:
        return len(self._entries)


class ShortTermMemory:
    def __init__(self, outlines: Iterable[Outline] = ()) -> None:
        self._window: deque[Outline] = deque(maxlen=SHORT_TERM_SIZE)
        self._lock = threading.Lock()
        for outline in outlines:
            self.push(outline)

    @property
    def window(self) -> tuple[Outline, ...]:
        with self._lock:
            return tuple(self._window)

    def push(self, outline: Outline) -> tuple[Outline, ...]:
        with self._lock:
            self._window.append(outline)
            return tuple(self._window)

    def __len__(self) -> int:
        return len(self._window)


def starter_entries(settings: StorySettings) -> list[LongTermEntry]:
    entries = [LongTermEntry(0, EntryKind.SETTING, f"Topic: {settings.topic}. Language: {settings.language}.")]
    for ch in settings.characters:
        text = f"{ch.name}: {ch.description}" if ch.description else ch.name
        entries.append(LongTermEntry(0, EntryKind.CHARACTER, text))
    entries.append(LongTermEntry(0, EntryKind.GOAL, settings.main_goal))
    entries.append(LongTermEntry(0, EntryKind.OUTLINE_FACT, settings.first_outline))
    return entries


def parse_facts(text: str) -> list[str]:
    facts = [m.group(1) for m in _FACT_RE.finditer(text)]
    facts = [f for f in facts if f.strip()]
    if not facts:
        raise ParseError("no FACT: lines in summarizer response")
    return facts


_ANCHOR_HEADER = "## Story premise"
_OUTLINE_HEADER = "\n## Recent outlines"
_FACT_HEADER = "\n## Story facts (most recent first)"


def anchor_line(entry: LongTermEntry) -> str:
    return f"- [{entry.kind.value}] {entry.text}"


def outline_line(outline: Outline) -> str:
    return f"- (part {outline.round_index}) {outline.text}"


def fact_line(entry: LongTermEntry) -> str:
    return f"- (part {entry.round_index}) {entry.text}"


def render_context(
    long: LongTermMemory,
    short: ShortTermMemory,
    budget_chars: int = DEFAULT_BUDGET_CHARS,
) -> str:
    """Prompt-ready memory block of at most ``budget_chars`` characters.

    Priority: every round-0 entry (never cut), then the short-term outlines
    newest first, then later facts newest first. Each of the last two stops at
    the first item that no longer fits, so the rendered facts are always a
    most-recent-first prefix.
    """
    if budget_chars < MIN_BUDGET_CHARS:
        raise ValueError(f"budget_chars must be >= {MIN_BUDGET_CHARS}")
    lines = [_ANCHOR_HEADER, *(anchor_line(e) for e in long.anchors())]
    used = len("\n".join(lines))
    if used > budget_chars:
        raise BudgetTooSmall(used, budget_chars)

    def take(header: str, candidates: list[str]) -> list[str]:
        nonlocal used
        taken: list[str] = []
        for line in candidates:
            cost = len(line) + 1 + (0 if taken else len(header) + 1)
            if used + cost > budget_chars:
                break
            used += cost
            taken.append(line)
        return taken

    outlines = take(_OUTLINE_HEADER, [outline_line(o) for o in reversed(short.window)])
    if outlines:
        lines.append(_OUTLINE_HEADER)
        lines.extend(reversed(outlines))
    facts = take(_FACT_HEADER, [fact_line(e) for e in reversed(long.facts())])
    if facts:
        lines.append(_FACT_HEADER)
        lines.extend(facts)
    return "\n".join(lines)


class MemoryStore:
    """Long-term and short-term memory of one run."""

    def __init__(self, long_term: LongTermMemory | None = None, short_term: ShortTermMemory | None = None) -> None:
        self.long_term = long_term or LongTermMemory()
        self.short_term = short_term or ShortTermMemory()

    @property
    def initialized(self) -> bool:
        return any(e.round_index == 0 for e in self.long_term.entries)

    def record_starter(self, settings: StorySettings) -> list[LongTermEntry]:
        if self.initialized:
            raise AlreadyInitialized("starter settings already recorded")
        entries = starter_entries(settings)
        self.long_term.extend(entries)
        return entries

    def push_outline(self, outline: Outline) -> tuple[Outline, ...]:
        return self.short_term.push(outline)

    def summarize_round(
        self,
        round_index: int,
        outline: Outline,
        segment_text: str,
        backend: Backend,
        *,
        prompts: PromptLibrary = DEFAULT_PROMPTS,
        trace: RunTrace | None = None,
    ) -> list[LongTermEntry]:
        """Ask the backend for this round's facts and append them.

        An unparseable reply is kept whole as one story_fact instead of failing.
        """
        if round_index < 1:
            raise ValueError("summarized rounds start at 1")
        last = self.long_term.max_round
        if last is not None and round_index <= last:
            raise ValueError(f"round {round_index} is not after existing round {last}")
        goal = next((e.text for e in self.long_term.anchors() if e.kind is EntryKind.GOAL), "")
        request = prompts.request(
            "memory_summarizer",
            goal=goal,
            round_index=round_index,
            outline=outline.text,
            segment=segment_text or "(empty)",
        )
        reply = backend.complete(request).text
        try:
            texts = parse_facts(reply)
        except ParseError as exc:
            fallback = reply.strip() or outline.text
            logger.warning("round %d summary degraded to one entry: %s", round_index, exc)
            if trace is not None:
                trace.add("memory_parse_degraded", round=round_index, error=str(exc))
            texts = [fallback]
        entries = [LongTermEntry(round_index, EntryKind.STORY_FACT, t) for t in texts]
        self.long_term.extend(entries)
        return entries

    def render(self, budget_chars: int = DEFAULT_BUDGET_CHARS) -> str:
        return render_context(self.long_term, self.short_term, budget_chars)

    def anchor_chars(self) -> int:
        return len("\n".join([_ANCHOR_HEADER, *(anchor_line(e) for e in self.long_term.anchors())]))

    def dump(self) -> dict[str, str]:
        """File contents keyed by path relative to the run directory."""
        return {
            "memory/long_term.json": _dumps([e.to_dict() for e in self.long_term.entries]),
            "memory/short_term.json": _dumps([o.to_dict() for o in self.short_term.window]),
        }

    def save(self, run_dir: str | Path) -> None:
        for rel, text in self.dump().items():
            path = Path(run_dir) / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, run_dir: str | Path) -> MemoryStore:
        base = Path(run_dir) / "memory"
        return cls.from_json(
            (base / "long_term.json").read_text(encoding="utf-8"),
            (base / "short_term.json").read_text(encoding="utf-8"),
        )

    @classmethod
    def from_json(cls, long_text: str, short_text: str) -> MemoryStore:
        long_data = json.loads(long_text)
        short_data = json.loads(short_text)
        if len(short_data) > SHORT_TERM_SIZE:
            raise ValueError("short-term window holds more than two outlines")
        return cls(
            LongTermMemory(LongTermEntry.from_dict(d) for d in long_data),
            ShortTermMemory(Outline.from_dict(d) for d in short_data),
        )


def _dumps(data: Any) -> str:
    return json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True) + "\n"
