from __future__ import annotations

import json
import re
from pathlib import Path

import pytest

from storygen.backend import ScriptedBackend, TransportError
from storygen.demo import DEMO_GOAL, build_script
from storygen.knowledge_graph import ExtractionMode
from storygen.models import Origin
from storygen.pipeline import (
    CorruptCheckpoint,
    NoProgressError,
    PipelineAborted,
    RunConfig,
    RunState,
    Stage,
    StoryPipeline,
    checkpoint,
    load_checkpoint,
    resume,
    run,
    snapshot_files,
)
from storygen.similarity import Strategy

STAGE_PATTERN = re.compile(r"^Starter( OutlineWriting Expanding LengthCheck)+ Ending Done$")
KG_ROLES = {"kg_extract", "kg_info", "kg_abstract", "kg_obstacle", "twist_outline"}


def config(target: int = 100, **kw) -> RunConfig:
    return RunConfig(topic="A lighthouse mystery", target_words=target, **kw)


def call_roles(state: RunState) -> list[str]:
    return [e["role_tag"] for e in state.trace.of_kind("call")]


def read_tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_two_round_plain_run() -> None:
    backend = ScriptedBackend(build_script(2, 60))
    story, state = run(config(100), backend)
    assert state.stage is Stage.DONE and state.round == 2
    assert state.total_words == 120
    assert backend.remaining() == 0
    assert story.endswith("the key was home.")
    assert STAGE_PATTERN.match(" ".join(state.trace.stages()))
    assert [o.origin for o in state.outlines] == [Origin.STARTER, Origin.PLAIN, Origin.PLAIN]
    assert state.settings is not None and state.settings.main_goal == DEMO_GOAL


def test_stop_condition_uses_body_only() -> None:
    # 3 rounds of 40 words: 80 < 100 after round 2 even though the ending adds words
    _, state = run(config(100), ScriptedBackend(build_script(3, 40)))
    assert state.round == 3
    assert [e["total_words"] for e in state.trace.of_kind("words")] == [40, 80, 120]


def test_similar_outlines_trigger_twist_from_round_two() -> None:
    backend = ScriptedBackend(build_script(3, 40, similar_outlines=True))
    _, state = run(config(120), backend)
    assert [o.origin for o in state.outlines[1:]] == [Origin.PLAIN, Origin.TWIST, Origin.TWIST]
    gates = state.trace.of_kind("gate")
    assert [g["round"] for g in gates] == [2, 3]
    assert all(g["score"] == pytest.approx(1.0) and g["strategy"] == "twist" for g in gates)
    assert sorted(state.graphs) == [2, 3]
    for graph in state.graphs.values():
        assert graph.goal.label == DEMO_GOAL and graph.obstacles


def test_disable_twist_never_calls_kg() -> None:
    backend = ScriptedBackend(build_script(4, 30, similar_outlines=True, disable_twist=True))
    _, state = run(config(120, disable_twist=True), backend)
    assert not KG_ROLES & set(call_roles(state))
    assert not state.trace.of_kind("gate")
    assert len(state.trace.of_kind("gate_skipped")) == 4


def test_invert_gate_flips_direction() -> None:
    # dissimilar outlines with an inverted gate must twist at round 2; script it by hand
    script = build_script(2, 60)
    idx = [i for i, (r, _) in enumerate(script) if r == "plain_outline"][1]
    script[idx:idx + 1] = [
        ("kg_info", "notes"),
        ("kg_abstract", "(Mara, seeks, key)"),
        ("kg_obstacle", f"NODE: fog | EDGE: fog -hides-> {DEMO_GOAL}"),
        ("twist_outline", "fog rolls in"),
    ]
    backend = ScriptedBackend(script)
    _, state = run(config(100, invert_gate=True), backend)
    gate = state.trace.of_kind("gate")[0]
    assert gate["inverted"] and gate["strategy"] == "twist" and gate["score"] == 0.0
    assert state.outlines[2].origin is Origin.TWIST


def test_gate_consistency_and_memory_sync() -> None:
    backend = ScriptedBackend(build_script(4, 30, similar_outlines=True))
    pipeline = StoryPipeline(config(120), backend)
    while not pipeline.finished:
        stage = pipeline.step()
        st = pipeline.state
        if stage is Stage.LENGTH_CHECK:
            k = st.round
            assert st.memory.long_term.max_round == k
            window = st.memory.short_term.window
            assert [o.round_index for o in window] == [k - 1, k]
            assert window[-1] == st.outlines[-1]
    st = pipeline.state
    fallbacks = {e["round"] for e in st.trace.of_kind("twist_fallback")}
    by_round = {o.round_index: o for o in st.outlines}
    for gate in st.trace.of_kind("gate"):
        if gate["round"] in fallbacks:
            continue
        want = Origin.TWIST if gate["strategy"] == Strategy.TWIST.value else Origin.PLAIN
        assert by_round[gate["round"]].origin is want


def test_twist_fallback_when_obstacle_unparseable() -> None:
    script = build_script(2, 60, similar_outlines=True)
    script = [(r, "no node here" if r == "kg_obstacle" else t) for r, t in script]
    idx = [i for i, (r, _) in enumerate(script) if r == "twist_outline"][0]
    script[idx] = ("plain_outline", "a plain outline after all")
    _, state = run(config(100), ScriptedBackend(script))
    assert state.trace.of_kind("twist_fallback")[0]["round"] == 2
    assert state.outlines[2].origin is Origin.PLAIN
    assert 2 in state.graphs


@pytest.mark.parametrize("mode", list(ExtractionMode))
def test_extraction_modes(mode: ExtractionMode) -> None:
    backend = ScriptedBackend(build_script(2, 60, similar_outlines=True, extraction_mode=mode))
    _, state = run(config(100, extraction_mode=mode), backend)
    roles = call_roles(state)
    if mode is ExtractionMode.SINGLE_AGENT:
        assert "kg_extract" in roles and "kg_info" not in roles
    else:
        assert roles.index("kg_info") < roles.index("kg_abstract") < roles.index("kg_obstacle")
    assert backend.remaining() == 0


def test_single_agent_expander() -> None:
    backend = ScriptedBackend(build_script(2, 60, single_agent_expander=True))
    _, state = run(config(100, single_agent_expander=True), backend)
    roles = call_roles(state)
    assert "reader_sim" not in roles and "writer_edit" not in roles
    assert roles.count("writer_sim") == 2


def test_dialogue_rounds_three() -> None:
    backend = ScriptedBackend(build_script(1, 100, dialogue_rounds=3))
    _, state = run(config(100, dialogue_rounds=3), backend)
    assert call_roles(state)[2:9] == ["writer_sim", "reader_sim"] * 3 + ["writer_edit"]
    assert len(state.segments[0].transcript.rounds) == 3


def test_zero_progress_aborts() -> None:
    backend = ScriptedBackend(build_script(3, 0))
    with pytest.raises(PipelineAborted) as info:
        run(config(100, max_zero_progress_rounds=3), backend)
    assert isinstance(info.value.cause, NoProgressError)
    assert info.value.stage is Stage.LENGTH_CHECK


def test_run_dir_layout(tmp_path: Path) -> None:
    story, state = run(config(100), ScriptedBackend(build_script(2, 60, similar_outlines=True)), tmp_path)
    for rel in ("settings.json", "outlines/round_0.json", "outlines/round_2.json", "segments/round_1.json",
                "segments/ending.json", "kg/round_2.json", "memory/long_term.json", "memory/short_term.json",
                "trace.json", "checkpoint.json", "story.md"):
        assert (tmp_path / rel).is_file(), rel
    assert (tmp_path / "story.md").read_text() == f"# A lighthouse mystery\n\n{story}\n"
    assert json.loads((tmp_path / "trace.json").read_text()) == state.trace.to_list()
    assert not list(tmp_path.rglob("*.tmp"))


def test_checkpoint_idempotent(tmp_path: Path) -> None:
    _, state = run(config(100), ScriptedBackend(build_script(2, 60)))
    checkpoint(state, tmp_path / "a")
    first = read_tree(tmp_path / "a")
    loaded, _ = load_checkpoint(tmp_path / "a")
    checkpoint(loaded, tmp_path / "b")
    assert read_tree(tmp_path / "b") == first
    assert snapshot_files(loaded) == snapshot_files(state)


def test_load_checkpoint_errors(tmp_path: Path) -> None:
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path)
    run(config(100), ScriptedBackend(build_script(2, 60)), tmp_path / "run")
    (tmp_path / "run" / "segments" / "round_2.json").unlink()
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "run")
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "checkpoint.json").write_text("{not json")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "bad")


def _files_without_trace(root: Path) -> dict[str, bytes]:
    return {k: v for k, v in read_tree(root).items() if k != "trace.json"}


@pytest.mark.parametrize("cut", [1, 5, 9, 14, 20])
def test_resume_after_crash_matches_uninterrupted(tmp_path: Path, cut: int) -> None:
    script = build_script(3, 40, similar_outlines=True)
    story_ref, _ = run(config(120), ScriptedBackend(script), tmp_path / "ref")

    with pytest.raises(PipelineAborted) as info:
        run(config(120), ScriptedBackend(script[:cut]), tmp_path / "crash")
    crashed, _ = load_checkpoint(tmp_path / "crash")
    assert crashed.trace.of_kind("abort")[-1]["stage"] == info.value.stage.value

    story, state = resume(tmp_path / "crash", ScriptedBackend(script), restore_cursor=True)
    assert story == story_ref
    assert _files_without_trace(tmp_path / "crash") == _files_without_trace(tmp_path / "ref")
    assert STAGE_PATTERN.match(" ".join(state.trace.stages()))
    assert [e["kind"] for e in state.trace.events if e["kind"] in ("abort", "resume")] == ["abort", "resume"]


def test_transient_failure_then_rerun_same_instance(tmp_path: Path) -> None:
    script = build_script(2, 60)
    story_ref, _ = run(config(100), ScriptedBackend(script), tmp_path / "ref")

    faulty: list = []
    injected = False
    for role, text in script:
        if role == "writer_edit" and not injected:
            faulty.append((role, TransportError("connection reset")))
            injected = True
        faulty.append((role, text))
    backend = ScriptedBackend(faulty)
    pipeline = StoryPipeline(config(100), backend, tmp_path / "run")
    with pytest.raises(PipelineAborted) as info:
        pipeline.run()
    assert info.value.stage is Stage.EXPANDING
    # the failed stage restarts from its beginning, so its writer_sim/reader_sim replies are replayed
    retry_backend = ScriptedBackend(script)
    retry = StoryPipeline.resume(tmp_path / "run", retry_backend, restore_cursor=True)
    story, _ = retry.run()
    assert story == story_ref
    assert _files_without_trace(tmp_path / "run") == _files_without_trace(tmp_path / "ref")


def test_rerun_same_pipeline_object_after_abort() -> None:
    script = build_script(2, 60)
    story_ref, _ = run(config(100), ScriptedBackend(script))
    cut = [i for i, (r, _) in enumerate(script) if r == "ender"][0]
    backend = ScriptedBackend(script[:cut])
    pipeline = StoryPipeline(config(100), backend)
    with pytest.raises(PipelineAborted):
        pipeline.run()
    assert pipeline.state.stage is Stage.ENDING and pipeline.state.ending is None
    backend.extend(script[cut:])
    story, state = pipeline.run()
    assert story == story_ref
    assert state.trace.stages().count("Ending") == 1


def test_resume_done_run_is_noop(tmp_path: Path) -> None:
    story_ref, _ = run(config(100), ScriptedBackend(build_script(2, 60)), tmp_path)
    before = (tmp_path / "story.md").read_bytes()
    backend = ScriptedBackend()
    story, _ = resume(tmp_path, backend)
    assert story == story_ref and backend.call_log() == []
    assert (tmp_path / "story.md").read_bytes() == before


def test_run_config_validation() -> None:
    with pytest.raises(ValueError):
        RunConfig(topic=" ")
    with pytest.raises(ValueError):
        RunConfig(topic="t", similarity_threshold=1.0)
    with pytest.raises(ValueError):
        RunConfig(topic="t", dialogue_rounds=0)
    cfg = RunConfig(topic="t", extraction_mode="single")
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
