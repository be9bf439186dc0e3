"""Value types passed between agents, memory and the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any


def count_words(text: str) -> int:
    """Whitespace-delimited token count; the unit of every length target."""
    return len(text.split())


class Origin(str, Enum):
    STARTER = "starter"
    PLAIN = "plain"
    TWIST = "twist"


@dataclass(frozen=True)
class Character:
    name: str
    description: str = ""

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValueError("character name must be non-empty")


@dataclass(frozen=True)
class StorySettings:
    topic: str
    language: str
    characters: tuple[Character, ...]
    main_goal: str
    first_outline: str

    def __post_init__(self) -> None:
        for name in ("topic", "language", "main_goal", "first_outline"):
            if not getattr(self, name).strip():
                raise ValueError(f"StorySettings.{name} must be non-empty")
        if not self.characters:
            raise ValueError("StorySettings needs at least one character")
        object.__setattr__(self, "characters", tuple(self.characters))

    def to_dict(self) -> dict[str, Any]:
        return {
            "topic": self.topic,
            "language": self.language,
            "characters": [{"name": c.name, "description": c.description} for c in self.characters],
            "main_goal": self.main_goal,
            "first_outline": self.first_outline,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StorySettings:
        return cls(
            topic=data["topic"],
            language=data["language"],
            characters=tuple(Character(c["name"], c.get("description", "")) for c in data["characters"]),
            main_goal=data["main_goal"],
            first_outline=data["first_outline"],
        )


@dataclass(frozen=True)
class Outline:
    """One round's outline. Round 0 is reserved for the Starter's first outline."""

    round_index: int
    text: str
    origin: Origin

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", Origin(self.origin))
        if not self.text.strip():
            raise ValueError("outline text must be non-empty")
        if self.round_index < 0:
            raise ValueError("round_index must be >= 0")
        if (self.round_index == 0) != (self.origin is Origin.STARTER):
            raise ValueError("round 0 is exactly the Starter outline")

    def to_dict(self) -> dict[str, Any]:
        return {"round_index": self.round_index, "text": self.text, "origin": self.origin.value}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Outline:
        return cls(data["round_index"], data["text"], Origin(data["origin"]))


@dataclass(frozen=True)
class DialogueTranscript:
    """Writer drafts and reader feedback, one pair per dialogue round.

    Single-agent expansion leaves ``rounds`` empty and ``final_text`` is the draft.
    """

    rounds: tuple[tuple[str, str], ...]
    final_text: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "rounds": [{"writer_draft": d, "reader_feedback": f} for d, f in self.rounds],
            "final_text": self.final_text,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DialogueTranscript:
        rounds = tuple((r["writer_draft"], r["reader_feedback"]) for r in data["rounds"])
        return cls(rounds, data["final_text"])


@dataclass(frozen=True)
class StorySegment:
    round_index: int
    text: str
    transcript: DialogueTranscript
    word_count: int = field(init=False)

    def __post_init__(self) -> None:
        if self.round_index < 1:
            raise ValueError("segment round_index must be positive")
        object.__setattr__(self, "word_count", count_words(self.text))

    def to_dict(self) -> dict[str, Any]:
        return {
            "round_index": self.round_index,
            "text": self.text,
            "word_count": self.word_count,
            "transcript": self.transcript.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StorySegment:
        seg = cls(data["round_index"], data["text"], DialogueTranscript.from_dict(data["transcript"]))
        if "word_count" in data and data["word_count"] != seg.word_count:
            raise ValueError("stored word_count disagrees with text")
        return seg
