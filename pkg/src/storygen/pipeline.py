"""Four-stage generation loop with tracing and checkpoint/resume.

Stages run Starter -> (OutlineWriting -> Expanding -> LengthCheck)+ ->
Ending -> Done. LengthCheck sends the run back to OutlineWriting until the
body (ending excluded) reaches ``target_words``.

When a run directory is given, a checkpoint is written after every completed
stage. A failure inside a stage rolls the in-memory state back to the last
checkpoint, records an ``abort`` event and raises ``PipelineAborted``; calling
``run()`` again, or ``resume()`` on the directory, repeats only the failed
stage.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any

from storygen import agents
from storygen import knowledge_graph as kg
from storygen.backend import Backend, BackendConfig, ChatRequest, ChatResponse, ScriptedBackend, request_digest, text_digest
from storygen.memory import MIN_BUDGET_CHARS, BudgetTooSmall, MemoryStore
from storygen.models import Outline, StorySegment, StorySettings, count_words
from storygen.prompts import PromptLibrary
from storygen.similarity import DEFAULT_THRESHOLD, Strategy, decide_strategy
from storygen.trace import RunTrace

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
KG_STORY_TAIL_CHARS = 4000


class Stage(str, Enum):
    STARTER = "Starter"
    OUTLINE_WRITING = "OutlineWriting"
    EXPANDING = "Expanding"
    LENGTH_CHECK = "LengthCheck"
    ENDING = "Ending"
    DONE = "Done"


LEGAL_TRANSITIONS: dict[Stage, frozenset[Stage]] = {
    Stage.STARTER: frozenset({Stage.OUTLINE_WRITING}),
    Stage.OUTLINE_WRITING: frozenset({Stage.EXPANDING}),
    Stage.EXPANDING: frozenset({Stage.LENGTH_CHECK}),
    Stage.LENGTH_CHECK: frozenset({Stage.OUTLINE_WRITING, Stage.ENDING}),
    Stage.ENDING: frozenset({Stage.DONE}),
    Stage.DONE: frozenset(),
}


class PipelineAborted(RuntimeError):
    def __init__(self, stage: Stage, cause: BaseException, run_dir: Path | None) -> None:
        where = f"; checkpoint in {run_dir}" if run_dir else ""
        super().__init__(f"run aborted in {stage.value}: {type(cause).__name__}: {cause}{where}")
        self.stage = stage
        self.cause = cause
        self.run_dir = run_dir


class NoProgressError(RuntimeError):
    pass


class CorruptCheckpoint(RuntimeError):
    pass


@dataclass
class RunConfig:
    topic: str
    language: str = "English"
    target_words: int = 10_000
    similarity_threshold: float = DEFAULT_THRESHOLD
    invert_gate: bool = False
    dialogue_rounds: int = 1
    extraction_mode: kg.ExtractionMode = kg.ExtractionMode.THREE_AGENT
    disable_twist: bool = False
    single_agent_expander: bool = False
    memory_budget_chars: int = 6000
    max_zero_progress_rounds: int = 3
    prompts_dir: str | None = None
    backend: BackendConfig = field(default_factory=BackendConfig)

    def __post_init__(self) -> None:
        self.extraction_mode = kg.ExtractionMode(self.extraction_mode)
        if not self.topic.strip():
            raise ValueError("topic must be non-empty")
        if self.target_words < 1:
            raise ValueError("target_words must be >= 1")
        if not 0.0 < self.similarity_threshold < 1.0:
            raise ValueError("similarity_threshold must lie in (0, 1)")
        if self.dialogue_rounds < 1:
            raise ValueError("dialogue_rounds must be >= 1")
        if self.memory_budget_chars < MIN_BUDGET_CHARS:
            raise ValueError(f"memory_budget_chars must be >= {MIN_BUDGET_CHARS}")
        if self.max_zero_progress_rounds < 1:
            raise ValueError("max_zero_progress_rounds must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["extraction_mode"] = self.extraction_mode.value
        data["backend"] = self.backend.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        data = dict(data)
        data["backend"] = BackendConfig.from_dict(data.get("backend", {}))
        return cls(**data)


@dataclass
class RunState:
    config: RunConfig
    stage: Stage = Stage.STARTER
    round: int = 0
    settings: StorySettings | None = None
    memory: MemoryStore = field(default_factory=MemoryStore)
    outlines: list[Outline] = field(default_factory=list)
    segments: list[StorySegment] = field(default_factory=list)
    graphs: dict[int, kg.KnowledgeGraph] = field(default_factory=dict)
    ending: StorySegment | None = None
    zero_progress: int = 0
    trace: RunTrace = field(default_factory=RunTrace)

    @property
    def total_words(self) -> int:
        return sum(s.word_count for s in self.segments)

    def body_text(self) -> str:
        return "\n\n".join(s.text for s in self.segments)

    def story_text(self) -> str:
        parts = [s.text for s in self.segments]
        if self.ending is not None:
            parts.append(self.ending.text)
        return "\n\n".join(parts)

    def current_outline(self) -> Outline:
        if not self.outlines or self.outlines[-1].round_index != self.round:
            raise RuntimeError(f"no outline for round {self.round}")
        return self.outlines[-1]


def _dumps(data: Any) -> str:
    return json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True) + "\n"


def snapshot_files(state: RunState, backend_cursor: dict[str, int] | None = None) -> dict[str, str]:
    """Every checkpoint file's content, keyed by path relative to the run dir."""
    files: dict[str, str] = {}
    if state.settings is not None:
        files["settings.json"] = _dumps(state.settings.to_dict())
    for o in state.outlines:
        files[f"outlines/round_{o.round_index}.json"] = _dumps(o.to_dict())
    for s in state.segments:
        files[f"segments/round_{s.round_index}.json"] = _dumps(s.to_dict())
    if state.ending is not None:
        files["segments/ending.json"] = _dumps(state.ending.to_dict())
    for k, g in sorted(state.graphs.items()):
        files[f"kg/round_{k}.json"] = kg.serialize_graph(g)
    files.update(state.memory.dump())
    files["trace.json"] = _dumps(state.trace.to_list())
    files["checkpoint.json"] = _dumps(
        {
            "format": CHECKPOINT_FORMAT,
            "stage": state.stage.value,
            "round": state.round,
            "zero_progress": state.zero_progress,
            "config": state.config.to_dict(),
            "has_settings": state.settings is not None,
            "outline_rounds": [o.round_index for o in state.outlines],
            "segment_rounds": [s.round_index for s in state.segments],
            "kg_rounds": sorted(state.graphs),
            "has_ending": state.ending is not None,
            "backend_cursor": backend_cursor,
        }
    )
    if state.stage is Stage.DONE and state.trace.stages()[-1:] == [Stage.DONE.value]:
        files["story.md"] = f"# {state.config.topic}\n\n{state.story_text()}\n"
    return files


def _state_from_files(read) -> tuple[RunState, dict[str, int] | None]:
    meta = json.loads(read("checkpoint.json"))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    config = RunConfig.from_dict(meta["config"])
    settings = StorySettings.from_dict(json.loads(read("settings.json"))) if meta["has_settings"] else None
    outlines = [Outline.from_dict(json.loads(read(f"outlines/round_{k}.json"))) for k in meta["outline_rounds"]]
    segments = [StorySegment.from_dict(json.loads(read(f"segments/round_{k}.json"))) for k in meta["segment_rounds"]]
    ending = StorySegment.from_dict(json.loads(read("segments/ending.json"))) if meta["has_ending"] else None
    graphs = {k: kg.parse_graph(read(f"kg/round_{k}.json")) for k in meta["kg_rounds"]}
    memory = MemoryStore.from_json(read("memory/long_term.json"), read("memory/short_term.json"))
    state = RunState(
        config=config,
        stage=Stage(meta["stage"]),
        round=int(meta["round"]),
        settings=settings,
        memory=memory,
        outlines=outlines,
        segments=segments,
        graphs=graphs,
        ending=ending,
        zero_progress=int(meta["zero_progress"]),
        trace=RunTrace.from_list(json.loads(read("trace.json"))),
    )
    return state, meta.get("backend_cursor")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_files(files: dict[str, str], run_dir: str | Path) -> None:
    # checkpoint.json last, so a crash mid-write leaves the previous one pointing at complete files
    base = Path(run_dir)
    for rel in sorted(files, key=lambda r: r == "checkpoint.json"):
        _atomic_write(base / rel, files[rel])


def checkpoint(state: RunState, run_dir: str | Path, backend_cursor: dict[str, int] | None = None) -> None:
    write_files(snapshot_files(state, backend_cursor), run_dir)


def load_checkpoint(run_dir: str | Path) -> tuple[RunState, dict[str, int] | None]:
    """Rebuild a RunState (and the saved scripted-backend cursor, if any)."""
    base = Path(run_dir)

    def read(rel: str) -> str:
        return (base / rel).read_text(encoding="utf-8")

    try:
        return _state_from_files(read)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"cannot resume from {base}: {exc}") from exc


class _TracedBackend:
    """Forwards calls and records each one (digests, error marker) in the trace."""

    def __init__(self, inner: Backend, trace_of) -> None:
        self.inner = inner
        self._trace_of = trace_of

    def complete(self, request: ChatRequest) -> ChatResponse:
        trace: RunTrace = self._trace_of()
        try:
            response = self.inner.complete(request)
        except Exception as exc:
            trace.add("call", role_tag=request.role_tag, request_digest=request_digest(request),
                      response_digest=None, error=f"{type(exc).__name__}: {exc}")
            raise
        trace.add("call", role_tag=request.role_tag, request_digest=request_digest(request),
                  response_digest=text_digest(response.text), error=None)
        return response


class StoryPipeline:
    def __init__(
        self,
        config: RunConfig,
        backend: Backend,
        run_dir: str | Path | None = None,
        *,
        prompts: PromptLibrary | None = None,
        state: RunState | None = None,
    ) -> None:
        self.config = config
        self.backend = backend
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.prompts = prompts or PromptLibrary(
            config.prompts_dir, temperature=config.backend.temperature, max_tokens=config.backend.max_tokens
        )
        self.state = state or RunState(config=config)
        self._llm = _TracedBackend(backend, lambda: self.state.trace)
        self._snapshot = snapshot_files(self.state, self._cursor())

    @classmethod
    def resume(
        cls,
        run_dir: str | Path,
        backend: Backend,
        *,
        restore_cursor: bool = False,
        prompts: PromptLibrary | None = None,
    ) -> StoryPipeline:
        """Reopen a run directory. ``restore_cursor`` fast-forwards a fresh
        ScriptedBackend to the position saved with the checkpoint."""
        state, cursor = load_checkpoint(run_dir)
        if restore_cursor:
            if not isinstance(backend, ScriptedBackend):
                raise TypeError("restore_cursor needs a ScriptedBackend")
            if cursor is None:
                raise CorruptCheckpoint("checkpoint has no scripted-backend cursor")
            backend.restore_cursor(cursor)
        pipeline = cls(state.config, backend, run_dir, prompts=prompts, state=state)
        pipeline.state.trace.add("resume", stage=state.stage.value, round=state.round)
        return pipeline

    def _cursor(self) -> dict[str, int] | None:
        return self.backend.cursor() if isinstance(self.backend, ScriptedBackend) else None

    @property
    def finished(self) -> bool:
        return self.state.stage is Stage.DONE and self.state.trace.stages()[-1:] == [Stage.DONE.value]

    def run(self) -> tuple[str, RunState]:
        while not self.finished:
            self.step()
        return self.state.story_text(), self.state

    def step(self) -> Stage:
        """Execute the current stage once; returns the stage now pending."""
        state = self.state
        stage = state.stage
        if self.finished:
            return stage
        state.trace.add("stage", stage=stage.value, round=state.round)
        handler = {
            Stage.STARTER: self._starter,
            Stage.OUTLINE_WRITING: self._outline_writing,
            Stage.EXPANDING: self._expanding,
            Stage.LENGTH_CHECK: self._length_check,
            Stage.ENDING: self._ending,
            Stage.DONE: lambda: Stage.DONE,
        }[stage]
        try:
            nxt = handler()
        except Exception as exc:
            self._abort(stage, exc)
            raise PipelineAborted(stage, exc, self.run_dir) from exc
        if stage is not Stage.DONE:
            if nxt not in LEGAL_TRANSITIONS[stage]:
                raise RuntimeError(f"illegal transition {stage.value} -> {nxt.value}")
            state.stage = nxt
        self._commit()
        return state.stage

    def _commit(self) -> None:
        self._snapshot = snapshot_files(self.state, self._cursor())
        if self.run_dir is not None:
            write_files(self._snapshot, self.run_dir)

    def _abort(self, stage: Stage, exc: Exception) -> None:
        logger.error("aborting in %s: %s", stage.value, exc)
        restored, _ = _state_from_files(self._snapshot.__getitem__)
        restored.trace.add("abort", stage=stage.value, round=restored.round, error=f"{type(exc).__name__}: {exc}")
        self.state = restored
        self._snapshot = snapshot_files(restored, json.loads(self._snapshot["checkpoint.json"])["backend_cursor"])
        if self.run_dir is not None:
            write_files(self._snapshot, self.run_dir)

    # -- stage handlers ---------------------------------------------------

    def _context(self) -> str:
        try:
            return self.state.memory.render(self.config.memory_budget_chars)
        except BudgetTooSmall as exc:
            budget = exc.needed + MIN_BUDGET_CHARS
            self.state.trace.add("context_budget_expanded", configured=exc.budget, used=budget)
            return self.state.memory.render(budget)

    def _starter(self) -> Stage:
        state = self.state
        settings = agents.run_starter(self.config.topic, self.config.language, self._llm, prompts=self.prompts)
        state.settings = settings
        state.memory.record_starter(settings)
        starter_outline = Outline(0, settings.first_outline, "starter")
        state.memory.push_outline(starter_outline)
        state.outlines.append(starter_outline)
        return Stage.OUTLINE_WRITING

    def _outline_writing(self) -> Stage:
        state, cfg = self.state, self.config
        state.round += 1
        k = state.round
        window = state.memory.short_term.window
        if cfg.disable_twist:
            state.trace.add("gate_skipped", round=k, reason="twist_disabled")
            strategy = Strategy.PLAIN
        elif k == 1 or len(window) < 2:
            state.trace.add("gate_skipped", round=k, reason="single_outline")
            strategy = Strategy.PLAIN
        else:
            decision = decide_strategy(window[-1], window[-2], cfg.similarity_threshold, invert=cfg.invert_gate)
            state.trace.add("gate", round=k, **decision.to_dict())
            strategy = decision.strategy

        context = self._context()
        outline = None
        if strategy is Strategy.TWIST:
            outline = self._twist_outline(k, context)
        if outline is None:
            outline = agents.write_plain_outline(
                context, self._llm, k, language=cfg.language, prompts=self.prompts
            )
        state.memory.push_outline(outline)
        state.outlines.append(outline)
        state.trace.add("outline", round=k, origin=outline.origin.value)
        return Stage.EXPANDING

    def _twist_outline(self, k: int, context: str) -> Outline | None:
        state, cfg = self.state, self.config
        assert state.settings is not None
        story_context = context + "\n\n## Recent story\n" + (state.body_text()[-KG_STORY_TAIL_CHARS:] or "(none)")
        graph = kg.extract_graph(
            story_context, state.settings.main_goal, cfg.extraction_mode, self._llm,
            prompts=self.prompts, trace=state.trace,
        )
        try:
            graph, _, _ = kg.generate_obstacle(graph, self._llm, prompts=self.prompts, trace=state.trace)
        except kg.ParseError as exc:
            state.graphs[k] = graph
            state.trace.add("twist_fallback", round=k, error=str(exc))
            logger.warning("round %d: obstacle reply unparseable, writing a plain outline", k)
            return None
        state.graphs[k] = graph
        return kg.write_twist_outline(graph, context, self._llm, k, language=cfg.language, prompts=self.prompts)

    def _expanding(self) -> Stage:
        state, cfg = self.state, self.config
        outline = state.current_outline()
        segment = agents.expand_with_dialogue(
            outline,
            self._context(),
            cfg.dialogue_rounds,
            self._llm,
            single_agent=cfg.single_agent_expander,
            language=cfg.language,
            prompts=self.prompts,
        )
        state.memory.summarize_round(
            state.round, outline, segment.text, self._llm, prompts=self.prompts, trace=state.trace
        )
        state.segments.append(segment)
        return Stage.LENGTH_CHECK

    def _length_check(self) -> Stage:
        state, cfg = self.state, self.config
        segment = state.segments[-1]
        state.zero_progress = state.zero_progress + 1 if segment.word_count == 0 else 0
        total = state.total_words
        state.trace.add("words", round=state.round, segment_words=segment.word_count,
                        total_words=total, target_words=cfg.target_words)
        if state.zero_progress >= cfg.max_zero_progress_rounds:
            raise NoProgressError(f"{state.zero_progress} consecutive rounds added no words")
        return Stage.ENDING if total >= cfg.target_words else Stage.OUTLINE_WRITING

    def _ending(self) -> Stage:
        state = self.state
        state.ending = agents.run_ender(
            state.body_text(), state.memory.long_term, self._llm, state.round + 1,
            language=self.config.language, prompts=self.prompts,
        )
        return Stage.DONE


def run(
    config: RunConfig,
    backend: Backend,
    run_dir: str | Path | None = None,
    *,
    prompts: PromptLibrary | None = None,
) -> tuple[str, RunState]:
    """Generate a whole story; returns (story text, final state)."""
    return StoryPipeline(config, backend, run_dir, prompts=prompts).run()


def resume(
    run_dir: str | Path,
    backend: Backend,
    *,
    restore_cursor: bool = False,
    prompts: PromptLibrary | None = None,
) -> tuple[str, RunState]:
    """Continue a checkpointed run to completion."""
    return StoryPipeline.resume(run_dir, backend, restore_cursor=restore_cursor, prompts=prompts).run()
