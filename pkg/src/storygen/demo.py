"""Build mock scripts that drive a complete offline run.

The scripted backend answers FIFO per role tag, so a script only has to hold
the right number of replies per role. ``similar_outlines`` makes every
outline identical (similarity 1.0, so the gate picks a twist from round 2);
otherwise each round's outline uses its own vocabulary (similarity 0.0, plain).
"""

from __future__ import annotations

from storygen.knowledge_graph import ExtractionMode

DEMO_GOAL = "find the lost lighthouse key"
DEMO_CHARACTERS = (("Mara", "a stubborn harbor pilot"), ("Tobin", "her younger brother"))


def words(n: int, tag: str) -> str:
    return " ".join(f"{tag}{i}" for i in range(n))


def starter_reply(outline: str) -> str:
    chars = "\n".join(f"- {name}: {desc}" for name, desc in DEMO_CHARACTERS)
    return f"CHARACTERS:\n{chars}\nGOAL: {DEMO_GOAL}\nOUTLINE: {outline}"


def outline_text(round_index: int, similar: bool) -> str:
    if similar:
        return "the storm keeps the harbor dark while the siblings search for the key"
    return words(12, f"o{round_index}w")


def build_script(
    rounds: int,
    words_per_segment: int = 60,
    *,
    similar_outlines: bool = False,
    disable_twist: bool = False,
    dialogue_rounds: int = 1,
    single_agent_expander: bool = False,
    extraction_mode: ExtractionMode | str = ExtractionMode.THREE_AGENT,
    ending: str = "At dawn the lighthouse shone again and the key was home.",
) -> list[tuple[str, str]]:
    """Replies for ``rounds`` loop iterations plus the ending, in call order."""
    mode = ExtractionMode(extraction_mode)
    script: list[tuple[str, str]] = [("starter", starter_reply(outline_text(0, similar_outlines)))]
    for k in range(1, rounds + 1):
        twist = similar_outlines and not disable_twist and k >= 2
        text = outline_text(k, similar_outlines)
        if twist:
            if mode is ExtractionMode.SINGLE_AGENT:
                script.append(("kg_extract", f"(Mara, seeks, lighthouse key)\n(Mara, pursues, {DEMO_GOAL})"))
            else:
                script.append(("kg_info", "Mara wants the key; Tobin hides a map; the storm blocks the harbor."))
                script.append(("kg_abstract", f"(Mara, pursues, {DEMO_GOAL})\n(Tobin, hides, map)"))
            script.append(("kg_obstacle", f"NODE: smuggler crew {k} | EDGE: smuggler crew {k} -guards-> {DEMO_GOAL}"))
            script.append(("twist_outline", text))
        else:
            script.append(("plain_outline", text))
        segment = words(words_per_segment, f"s{k}w")
        if single_agent_expander:
            script.append(("writer_sim", segment))
        else:
            for r in range(dialogue_rounds):
                script.append(("writer_sim", words(words_per_segment, f"d{k}r{r}w")))
                script.append(("reader_sim", f"Feedback {k}.{r}: tighten the pacing."))
            script.append(("writer_edit", segment))
        script.append(("memory_summarizer", f"FACT: round {k} happened\nFACT: the key is still missing after round {k}"))
    script.append(("ender", ending))
    return script
