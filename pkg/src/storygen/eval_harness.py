"""Story evaluation: pairwise LLM judging, single-story scoring, tallies, and
the human-annotator questionnaire (Markdown) with a parser for it."""

from __future__ import annotations

import json
import logging
import math
import re
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from storygen.backend import Backend
from storygen.models import StorySettings
from storygen.prompts import DEFAULT_PROMPTS, PromptLibrary

logger = logging.getLogger(__name__)

METRICS = ("interestingness", "commonsense", "no_theme_drift", "relevance", "readability")

_METRIC_LABELS = {
    "interestingness": "INTERESTINGNESS",
    "commonsense": "COMMONSENSE",
    "no_theme_drift": "NO_THEME_DRIFT",
    "relevance": "RELEVANCE",
    "readability": "READABILITY",
}


class Choice(str, Enum):
    A = "A"
    B = "B"
    BOTH = "Both"
    NEITHER = "Neither"

    def swapped(self) -> Choice:
        return {Choice.A: Choice.B, Choice.B: Choice.A}.get(self, self)


class EmptyInput(ValueError):
    pass


class ScoreParseError(ValueError):
    pass


@dataclass(frozen=True)
class StoryPair:
    story_a: str
    story_b: str
    settings: StorySettings
    provenance: tuple[str, str] = ("A", "B")

    def __post_init__(self) -> None:
        if not self.story_a.strip() or not self.story_b.strip():
            raise ValueError("both stories must be non-empty")

    def swapped(self) -> StoryPair:
        return StoryPair(self.story_b, self.story_a, self.settings, self.provenance[::-1])


@dataclass(frozen=True)
class JudgeVerdict:
    """Per-metric choices plus the overall pick.

    ``overall`` is None only when the judge's reply had no usable OVERALL line.
    """

    choices: dict[str, Choice]
    overall: Choice | None
    rationale: str = ""
    warnings: tuple[str, ...] = ()
    swapped: bool = False

    def __post_init__(self) -> None:
        if set(self.choices) != set(METRICS):
            raise ValueError(f"verdict needs exactly the metrics {METRICS}")
        if self.overall not in (None, Choice.A, Choice.B):
            raise ValueError("overall must be A or B")

    def to_dict(self) -> dict[str, Any]:
        return {
            "choices": {m: self.choices[m].value for m in METRICS},
            "overall": self.overall.value if self.overall else None,
            "rationale": self.rationale,
            "warnings": list(self.warnings),
            "swapped": self.swapped,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> JudgeVerdict:
        return cls(
            {m: Choice(data["choices"][m]) for m in METRICS},
            Choice(data["overall"]) if data.get("overall") else None,
            data.get("rationale", ""),
            tuple(data.get("warnings", ())),
            bool(data.get("swapped", False)),
        )


def _parse_choice(raw: str) -> Choice | None:
    word = re.sub(r"[^a-z]", " ", raw.lower()).split()
    if not word:
        return None
    first = word[1] if word[0] == "story" and len(word) > 1 else word[0]
    return {"a": Choice.A, "b": Choice.B, "both": Choice.BOTH, "neither": Choice.NEITHER}.get(first)


def parse_verdict(reply: str) -> JudgeVerdict:
    lines: dict[str, str] = {}
    for line in reply.splitlines():
        key, sep, value = line.partition(":")
        if sep:
            key = re.sub(r"[^A-Z_]", "", key.strip().upper().replace(" ", "_").replace("-", "_"))
            lines.setdefault(key, value.strip())
    warnings = []
    choices = {}
    for metric in METRICS:
        choice = _parse_choice(lines.get(_METRIC_LABELS[metric], ""))
        if choice is None:
            warnings.append(f"unparseable {metric}; recorded as Neither")
            choice = Choice.NEITHER
        choices[metric] = choice
    overall = _parse_choice(lines.get("OVERALL", ""))
    if overall not in (Choice.A, Choice.B):
        warnings.append("unparseable overall choice")
        overall = None
    return JudgeVerdict(choices, overall, lines.get("RATIONALE", ""), tuple(warnings))


def _character_names(settings: StorySettings) -> str:
    return " and ".join(c.name for c in settings.characters)


def judge_pair(pair: StoryPair, backend: Backend, *, prompts: PromptLibrary = DEFAULT_PROMPTS) -> JudgeVerdict:
    request = prompts.request(
        "judge",
        topic=pair.settings.topic,
        characters=_character_names(pair.settings),
        goal=pair.settings.main_goal,
        story_a=pair.story_a,
        story_b=pair.story_b,
    )
    verdict = parse_verdict(backend.complete(request).text)
    for warning in verdict.warnings:
        logger.warning("judge: %s", warning)
    return verdict


def _unswap(verdict: JudgeVerdict) -> JudgeVerdict:
    return JudgeVerdict(
        {m: c.swapped() for m, c in verdict.choices.items()},
        verdict.overall.swapped() if verdict.overall else None,
        verdict.rationale,
        verdict.warnings,
        swapped=True,
    )


def judge_pair_debiased(
    pair: StoryPair, backend: Backend, *, prompts: PromptLibrary = DEFAULT_PROMPTS
) -> tuple[JudgeVerdict, JudgeVerdict]:
    """Judge in both presentation orders; the second verdict is mapped back
    to the original A/B labels. Both count as separate votes in ``tally``."""
    first = judge_pair(pair, backend, prompts=prompts)
    second = judge_pair(pair.swapped(), backend, prompts=prompts)
    return first, _unswap(second)


def judge_many(
    pairs: Sequence[StoryPair],
    backend: Backend,
    *,
    debias: bool = False,
    max_in_flight: int = 4,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> list[JudgeVerdict]:
    """Judge pairs concurrently; verdicts come back in input order."""

    def one(pair: StoryPair) -> list[JudgeVerdict]:
        if debias:
            return list(judge_pair_debiased(pair, backend, prompts=prompts))
        return [judge_pair(pair, backend, prompts=prompts)]

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        results = list(pool.map(one, pairs))
    return [v for group in results for v in group]


_NUMBER_RE = re.compile(r"(?<![\w.])[-+]?\d+(?:\.\d+)?")


def parse_score(reply: str) -> float:
    m = _NUMBER_RE.search(reply)
    if m is None:
        raise ScoreParseError(f"no numeric score in {reply[:80]!r}")
    score = float(m.group())
    if not 0.0 <= score <= 10.0:
        raise ScoreParseError(f"score {score} outside [0, 10]")
    return score


def score_story(story: str, backend: Backend, *, prompts: PromptLibrary = DEFAULT_PROMPTS) -> float:
    return parse_score(backend.complete(prompts.request("scorer", story=story)).text)


def mean_score(scores: Sequence[float]) -> float:
    if not scores:
        raise EmptyInput("no scores to average")
    return math.fsum(scores) / len(scores)


def score_many(
    stories: Sequence[str],
    backend: Backend,
    *,
    max_in_flight: int = 4,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> list[float]:
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        return list(pool.map(lambda s: score_story(s, backend, prompts=prompts), stories))


@dataclass
class MetricTally:
    credited_a: int
    credited_b: int
    total: int

    @property
    def percent_a(self) -> float:
        return 100.0 * self.credited_a / self.total

    @property
    def percent_b(self) -> float:
        return 100.0 * self.credited_b / self.total


@dataclass
class Tally:
    metrics: dict[str, MetricTally]
    overall: MetricTally
    total: int = field(init=False)

    def __post_init__(self) -> None:
        self.total = self.overall.total

    def to_dict(self) -> dict[str, Any]:
        def row(t: MetricTally) -> dict[str, Any]:
            return {
                "credited_a": t.credited_a,
                "credited_b": t.credited_b,
                "total": t.total,
                "percent_a": t.percent_a,
                "percent_b": t.percent_b,
            }

        return {"total": self.total, "metrics": {m: row(t) for m, t in self.metrics.items()},
                "overall": row(self.overall)}


def tally(verdicts: Sequence[JudgeVerdict]) -> Tally:
    """Percent of verdicts crediting each side. Both credits both sides,
    Neither credits none; a missing overall pick credits none."""
    if not verdicts:
        raise EmptyInput("no verdicts to tally")
    n = len(verdicts)
    metrics = {}
    for metric in METRICS:
        a = sum(v.choices[metric] in (Choice.A, Choice.BOTH) for v in verdicts)
        b = sum(v.choices[metric] in (Choice.B, Choice.BOTH) for v in verdicts)
        metrics[metric] = MetricTally(a, b, n)
    overall = MetricTally(
        sum(v.overall is Choice.A for v in verdicts),
        sum(v.overall is Choice.B for v in verdicts),
        n,
    )
    return Tally(metrics, overall)


# -- questionnaire ---------------------------------------------------------

QUESTIONS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("After reading these two stories, which one do you think is better?", ("Story A", "Story B")),
    (
        "Which story do you think is more appealing and interesting, A or B?",
        ("Story A", "Story B", "Both are appealing and interesting.", "Neither are appealing and interesting."),
    ),
    (
        "Which story do you think is more logical and rational, A or B?",
        ("Story A", "Story B", "Both are logical and rational.", "Neither are logical and rational."),
    ),
    (
        "Which story do you think its beginning and ending share a same theme, A or B?",
        (
            "Story A",
            "Story B",
            "Both have same theme in their beginning and ending.",
            "Neither have same theme in their beginning and ending.",
        ),
    ),
    (
        "Which story do you think is more consistent with the premise, A or B?",
        ("Story A", "Story B", "Both are consistent with the premise.", "Neither are consistent with the premise."),
    ),
    (
        "Which story do you think is more readable, A or B?",
        ("Story A", "Story B", "Both are readable.", "Neither are readable."),
    ),
)

_INTRO = (
    "# Story quality survey\n\n"
    "Below are the settings shared by two stories, followed by the two stories, A and B. "
    "Read the settings and both stories, then answer each question from your own impression."
)


def emit_questionnaire(pair: StoryPair) -> str:
    s = pair.settings
    parts = [
        _INTRO,
        "## Settings of the two stories",
        f"- **Topic**: {s.topic}\n- **Main character**: {_character_names(s)}\n- **Main Goal**: {s.main_goal}",
        "## Story A",
        pair.story_a.strip(),
        "## Story B",
        pair.story_b.strip(),
        "## Questions",
    ]
    qlines = []
    for i, (question, options) in enumerate(QUESTIONS, 1):
        qlines.append(f"{i}. {question}")
        qlines.extend(f"    {chr(ord('a') + j)}. {opt}" for j, opt in enumerate(options))
    parts.append("\n".join(qlines))
    return "\n\n".join(parts) + "\n"


@dataclass
class ParsedQuestionnaire:
    settings: dict[str, str]
    story_a: str
    story_b: str
    questions: list[tuple[str, list[str]]]


class QuestionnaireFormatError(ValueError):
    pass


_SECTION_SPLIT_RE = re.compile(r"^## (.+)$", re.MULTILINE)
_SETTING_RE = re.compile(r"^- \*\*(.+?)\*\*: (.*)$", re.MULTILINE)
_QUESTION_RE = re.compile(r"^(\d+)\. (.+)$")
_OPTION_RE = re.compile(r"^ {4}([a-z])\. (.+)$")


def parse_questionnaire(text: str) -> ParsedQuestionnaire:
    pieces = _SECTION_SPLIT_RE.split(text)
    sections = {name.strip(): body.strip("\n") for name, body in zip(pieces[1::2], pieces[2::2])}
    needed = ("Settings of the two stories", "Story A", "Story B", "Questions")
    missing = [n for n in needed if n not in sections]
    if missing:
        raise QuestionnaireFormatError(f"missing sections: {missing}")
    settings = dict(_SETTING_RE.findall(sections["Settings of the two stories"]))
    questions: list[tuple[str, list[str]]] = []
    for line in sections["Questions"].splitlines():
        if not line.strip():
            continue
        if m := _QUESTION_RE.match(line):
            if int(m.group(1)) != len(questions) + 1:
                raise QuestionnaireFormatError(f"question numbering broken at {line!r}")
            questions.append((m.group(2), []))
        elif (m := _OPTION_RE.match(line)) and questions:
            questions[-1][1].append(m.group(2))
        else:
            raise QuestionnaireFormatError(f"unexpected line in questions: {line!r}")
    return ParsedQuestionnaire(settings, sections["Story A"].strip(), sections["Story B"].strip(), questions)


def write_verdicts_jsonl(verdicts: Sequence[JudgeVerdict]) -> str:
    return "".join(json.dumps(v.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for v in verdicts)
