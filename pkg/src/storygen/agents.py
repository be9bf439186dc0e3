"""Role agents: Starter, plain outline writer, writer/reader expander, Ender.

Each agent renders its template, makes its backend call(s), and parses the
reply. They hold no state; the pipeline calls them one at a time.
"""

from __future__ import annotations

import re

from storygen.backend import Backend
from storygen.memory import LongTermMemory, anchor_line, fact_line
from storygen.models import (
    Character,
    DialogueTranscript,
    Origin,
    Outline,
    StorySegment,
    StorySettings,
    count_words,
)
from storygen.prompts import DEFAULT_PROMPTS, PromptLibrary

__all__ = [
    "ParseError",
    "count_words",
    "expand_with_dialogue",
    "parse_settings",
    "run_ender",
    "run_starter",
    "write_plain_outline",
]

ENDER_STORY_TAIL_CHARS = 6000
ENDER_MAX_FACTS = 30

_SECTION_RE = re.compile(r"^\s*\**\s*(CHARACTERS|GOAL|OUTLINE)\s*\**\s*:\s*\**[ \t]*", re.MULTILINE | re.IGNORECASE)


class ParseError(ValueError):
    """Reply could not be parsed; ``raw`` keeps the reply for inspection."""

    def __init__(self, message: str, raw: str) -> None:
        super().__init__(message)
        self.raw = raw


def _parse_character(line: str) -> Character | None:
    line = re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", line).strip()
    if not line:
        return None
    for sep in (":", " - ", " \u2013 ", " \u2014 "):
        if sep in line:
            name, desc = line.split(sep, 1)
            if name.strip():
                return Character(name.strip().strip("*").strip(), desc.strip())
    return Character(line)


def parse_settings(reply: str, topic: str, language: str) -> StorySettings:
    matches = list(_SECTION_RE.finditer(reply))
    sections: dict[str, str] = {}
    for m, nxt in zip(matches, matches[1:] + [None]):
        end = nxt.start() if nxt else len(reply)
        sections.setdefault(m.group(1).upper(), reply[m.end():end].strip())
    for name in ("CHARACTERS", "GOAL", "OUTLINE"):
        if not sections.get(name):
            raise ParseError(f"starter reply has no {name} section", reply)
    characters = tuple(c for c in map(_parse_character, sections["CHARACTERS"].splitlines()) if c)
    if not characters:
        raise ParseError("starter reply lists no characters", reply)
    return StorySettings(
        topic=topic,
        language=language,
        characters=characters,
        main_goal=" ".join(sections["GOAL"].split()),
        first_outline=sections["OUTLINE"],
    )


def run_starter(
    topic: str,
    language: str,
    backend: Backend,
    *,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> StorySettings:
    if not topic.strip():
        raise ValueError("topic must be non-empty")
    reply = backend.complete(prompts.request("starter", topic=topic, language=language)).text
    return parse_settings(reply, topic, language)


def write_plain_outline(
    context: str,
    backend: Backend,
    round_index: int,
    *,
    language: str = "English",
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> Outline:
    request = prompts.request("plain_outline", memory=context, round_index=round_index, language=language)
    return Outline(round_index, backend.complete(request).text.strip(), Origin.PLAIN)


def expand_with_dialogue(
    outline: Outline,
    context: str,
    rounds: int,
    backend: Backend,
    *,
    single_agent: bool = False,
    language: str = "English",
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> StorySegment:
    """Expand an outline into prose.

    Per round the writer drafts (``writer_sim``) and the reader critiques
    (``reader_sim``); after the last round the writer makes one final edit
    (``writer_edit``). ``single_agent`` is the ablation: one ``writer_sim``
    call whose draft is the final text.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if outline.round_index < 1:
        raise ValueError("only loop outlines (round >= 1) are expanded")
    common = {"memory": context, "outline": outline.text, "language": language}
    if single_agent:
        draft = backend.complete(
            prompts.request("writer_sim", previous_draft="(none)", feedback="(none)", **common)
        ).text.strip()
        return StorySegment(outline.round_index, draft, DialogueTranscript((), draft))

    exchanged: list[tuple[str, str]] = []
    draft, feedback = "(none)", "(none)"
    for _ in range(rounds):
        draft = backend.complete(
            prompts.request("writer_sim", previous_draft=draft, feedback=feedback, **common)
        ).text.strip()
        feedback = backend.complete(prompts.request("reader_sim", draft=draft or "(empty)", **common)).text.strip()
        exchanged.append((draft, feedback))
    final = backend.complete(
        prompts.request("writer_edit", draft=draft or "(empty)", feedback=feedback or "(none)", **common)
    ).text.strip()
    return StorySegment(outline.round_index, final, DialogueTranscript(tuple(exchanged), final))


def run_ender(
    story_so_far: str,
    long_term: LongTermMemory,
    backend: Backend,
    round_index: int,
    *,
    language: str = "English",
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> StorySegment:
    """Write the ending, checking it against the round-0 goal and first outline."""
    anchors = long_term.anchors()
    goal = next((e.text for e in anchors if e.kind.value == "goal"), None)
    first_outline = next((e.text for e in anchors if e.kind.value == "outline_fact"), None)
    if goal is None or first_outline is None:
        raise ValueError("long-term memory has no round-0 goal/outline")
    facts = list(reversed(long_term.facts()))[:ENDER_MAX_FACTS]
    request = prompts.request(
        "ender",
        anchors="\n".join(anchor_line(e) for e in anchors),
        goal=goal,
        first_outline=first_outline,
        facts="\n".join(fact_line(e) for e in reversed(facts)) or "(none)",
        recent_story=story_so_far[-ENDER_STORY_TAIL_CHARS:] or "(empty)",
        language=language,
    )
    ending = backend.complete(request).text.strip()
    return StorySegment(round_index, ending, DialogueTranscript((), ending))
