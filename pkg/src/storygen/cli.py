"""Command line entry point: ``storygen <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from storygen import demo, eval_harness
from storygen.backend import Backend, BackendConfig, HttpBackend, ScriptedBackend, dump_script
from storygen.knowledge_graph import ExtractionMode
from storygen.models import StorySettings
from storygen.pipeline import PipelineAborted, RunConfig, StoryPipeline, run


def _add_backend_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("http", "mock"), default="http")
    p.add_argument("--script", help="mock script (JSON array of {role_tag, response})")
    p.add_argument("--endpoint", default=BackendConfig.endpoint)
    p.add_argument("--model", default=BackendConfig.model)
    p.add_argument("--vendor", choices=("openai", "anthropic"), default="openai")
    p.add_argument("--temperature", type=float, default=BackendConfig.temperature)
    p.add_argument("--max-tokens", type=int, default=BackendConfig.max_tokens)
    p.add_argument("--retries", type=int, default=BackendConfig.max_retries)
    p.add_argument("--api-key-env", default=BackendConfig.api_key_env)


def _backend_config(args: argparse.Namespace) -> BackendConfig:
    return BackendConfig(
        kind=args.backend,
        endpoint=args.endpoint,
        model=args.model,
        vendor=args.vendor,
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        max_retries=args.retries,
        api_key_env=args.api_key_env,
        script=str(Path(args.script).resolve()) if args.script else None,
    )


def _make_backend(config: BackendConfig) -> Backend:
    if config.kind == "mock":
        if not config.script:
            raise SystemExit("--backend mock needs --script FILE")
        return ScriptedBackend.from_file(config.script)
    return HttpBackend.from_config(config)


def _load_settings(path: str) -> StorySettings:
    return StorySettings.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _pair(args: argparse.Namespace) -> eval_harness.StoryPair:
    return eval_harness.StoryPair(
        Path(args.a).read_text(encoding="utf-8"),
        Path(args.b).read_text(encoding="utf-8"),
        _load_settings(args.settings),
        (Path(args.a).stem, Path(args.b).stem),
    )


def cmd_generate(args: argparse.Namespace) -> int:
    config = RunConfig(
        topic=args.topic,
        language=args.language,
        target_words=args.target_words,
        similarity_threshold=args.threshold,
        invert_gate=args.invert_gate,
        dialogue_rounds=args.rounds,
        extraction_mode=ExtractionMode(args.kg_mode),
        disable_twist=args.disable_twist,
        single_agent_expander=args.single_agent_expander,
        memory_budget_chars=args.memory_budget,
        prompts_dir=str(Path(args.prompts).resolve()) if args.prompts else None,
        backend=_backend_config(args),
    )
    backend = _make_backend(config.backend)
    try:
        story, state = run(config, backend, args.out)
    except PipelineAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"resume with: storygen resume --dir {args.out}", file=sys.stderr)
        return 2
    print(f"wrote {Path(args.out) / 'story.md'}: {state.total_words} body words in {state.round} rounds")
    return 0


def cmd_resume(args: argparse.Namespace) -> int:
    meta = json.loads((Path(args.dir) / "checkpoint.json").read_text(encoding="utf-8"))
    config = BackendConfig.from_dict(meta["config"]["backend"])
    backend = _make_backend(config)
    try:
        pipeline = StoryPipeline.resume(args.dir, backend, restore_cursor=isinstance(backend, ScriptedBackend))
        _, state = pipeline.run()
    except PipelineAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {Path(args.dir) / 'story.md'}: {state.total_words} body words in {state.round} rounds")
    return 0


def cmd_judge(args: argparse.Namespace) -> int:
    backend = _make_backend(_backend_config(args))
    pair = _pair(args)
    if args.debias:
        verdicts = list(eval_harness.judge_pair_debiased(pair, backend))
    else:
        verdicts = [eval_harness.judge_pair(pair, backend)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "verdicts.jsonl", "a", encoding="utf-8") as fh:
        fh.write(eval_harness.write_verdicts_jsonl(verdicts))
    all_verdicts = [
        eval_harness.JudgeVerdict.from_dict(json.loads(line))
        for line in (out / "verdicts.jsonl").read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    summary = eval_harness.tally(all_verdicts).to_dict()
    (out / "tally.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps([v.to_dict() for v in verdicts], indent=2))
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    backend = _make_backend(_backend_config(args))
    try:
        score = eval_harness.score_story(Path(args.story).read_text(encoding="utf-8"), backend)
    except eval_harness.ScoreParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(score)
    return 0


def cmd_questionnaire(args: argparse.Namespace) -> int:
    Path(args.out).write_text(eval_harness.emit_questionnaire(_pair(args)), encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def cmd_demo_script(args: argparse.Namespace) -> int:
    script = demo.build_script(
        args.rounds,
        args.words,
        similar_outlines=args.similar,
        disable_twist=args.disable_twist,
        dialogue_rounds=args.dialogue_rounds,
        single_agent_expander=args.single_agent_expander,
        extraction_mode=args.kg_mode,
    )
    dump_script(script, args.out)
    print(f"wrote {len(script)} scripted replies to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storygen", description="Multi-agent long story generator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a story")
    g.add_argument("--topic", required=True)
    g.add_argument("--language", default="English")
    g.add_argument("--target-words", type=int, default=10_000)
    g.add_argument("--threshold", type=float, default=0.7)
    g.add_argument("--invert-gate", action="store_true", help="twist on LOW similarity instead")
    g.add_argument("--rounds", type=int, default=1, help="writer/reader dialogue rounds")
    g.add_argument("--kg-mode", choices=("three", "single"), default="three")
    g.add_argument("--disable-twist", action="store_true")
    g.add_argument("--single-agent-expander", action="store_true")
    g.add_argument("--memory-budget", type=int, default=6000)
    g.add_argument("--prompts", help="directory of <role_tag>.txt template overrides")
    g.add_argument("--out", default="run")
    _add_backend_args(g)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("resume", help="continue a checkpointed run")
    r.add_argument("--dir", required=True)
    r.set_defaults(func=cmd_resume)

    j = sub.add_parser("judge", help="pairwise LLM judge")
    j.add_argument("--a", required=True)
    j.add_argument("--b", required=True)
    j.add_argument("--settings", required=True, help="StorySettings JSON")
    j.add_argument("--debias", action="store_true", help="also judge with A/B swapped")
    j.add_argument("--out", default=".", help="directory for verdicts.jsonl and tally.json")
    _add_backend_args(j)
    j.set_defaults(func=cmd_judge)

    s = sub.add_parser("score", help="score one story out of 10")
    s.add_argument("--story", required=True)
    _add_backend_args(s)
    s.set_defaults(func=cmd_score)

    q = sub.add_parser("questionnaire", help="emit the annotator questionnaire")
    q.add_argument("--a", required=True)
    q.add_argument("--b", required=True)
    q.add_argument("--settings", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_questionnaire)

    d = sub.add_parser("demo-script", help="write a mock script for an offline run")
    d.add_argument("--out", required=True)
    d.add_argument("--rounds", type=int, default=3)
    d.add_argument("--words", type=int, default=60)
    d.add_argument("--similar", action="store_true", help="identical outlines, so twists fire")
    d.add_argument("--disable-twist", action="store_true")
    d.add_argument("--dialogue-rounds", type=int, default=1)
    d.add_argument("--single-agent-expander", action="store_true")
    d.add_argument("--kg-mode", choices=("three", "single"), default="three")
    d.set_defaults(func=cmd_demo_script)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
