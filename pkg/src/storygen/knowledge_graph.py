"""Goal-anchored story knowledge graph and KG-driven twist outlines.

The graph always contains exactly one goal node labelled with the main goal;
extraction inserts it when the backend leaves it out. A twist adds one
obstacle node linked to the goal, then an outline is written from the
augmented graph. Graphs are immutable; every operation returns a new one.

Wire formats:

* extraction replies: one ``(subject, relation, object)`` triple per line;
* obstacle replies: ``NODE: <label> | EDGE: <src> -<relation>-> <dst> | ...``.
"""

from __future__ import annotations

import json
import logging
import re
from collections import deque
from collections.abc import Iterable
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any

from storygen.backend import Backend
from storygen.models import Origin, Outline
from storygen.prompts import DEFAULT_PROMPTS, PromptLibrary
from storygen.trace import RunTrace

logger = logging.getLogger(__name__)

FORCED_RELATION = "blocks progress toward"

_TRIPLE_RE = re.compile(r"\(\s*([^(),\n]+?)\s*,\s*([^(),\n]+?)\s*,\s*([^()\n]+?)\s*\)")
_QUOTES = "\"'`“”‘’"


class ParseError(ValueError):
    pass


class FormatError(ValueError):
    pass


class ExtractionMode(str, Enum):
    SINGLE_AGENT = "single"
    THREE_AGENT = "three"


def node_id(label: str) -> str:
    return " ".join(label.strip().strip(_QUOTES).lower().split())


@dataclass(frozen=True)
class KgNode:
    id: str
    label: str
    is_goal: bool = False
    is_obstacle: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "label": self.label, "is_goal": self.is_goal, "is_obstacle": self.is_obstacle}


@dataclass(frozen=True)
class KgEdge:
    source_id: str
    target_id: str
    relation: str

    def to_dict(self) -> dict[str, Any]:
        return {"source_id": self.source_id, "target_id": self.target_id, "relation": self.relation}


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    nodes: tuple[KgNode, ...]
    edges: tuple[KgEdge, ...] = ()

    @classmethod
    def anchored(cls, main_goal: str) -> KnowledgeGraph:
        if not main_goal.strip():
            raise ValueError("main goal must be non-empty")
        return cls((KgNode(node_id(main_goal), main_goal.strip(), is_goal=True),))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return frozenset(self.nodes) == frozenset(other.nodes) and frozenset(self.edges) == frozenset(other.edges)

    def __hash__(self) -> int:
        return hash((frozenset(self.nodes), frozenset(self.edges)))

    @property
    def goal(self) -> KgNode:
        goals = [n for n in self.nodes if n.is_goal]
        if len(goals) != 1:
            raise ValueError(f"graph has {len(goals)} goal nodes")
        return goals[0]

    @property
    def obstacles(self) -> tuple[KgNode, ...]:
        return tuple(n for n in self.nodes if n.is_obstacle)

    def node(self, nid: str) -> KgNode | None:
        return next((n for n in self.nodes if n.id == nid), None)

    def ids(self) -> set[str]:
        return {n.id for n in self.nodes}

    def degree(self, nid: str) -> int:
        return sum((e.source_id == nid) + (e.target_id == nid) for e in self.edges)

    def component(self, nid: str) -> set[str]:
        """Node ids reachable from ``nid`` ignoring edge direction."""
        adjacent: dict[str, set[str]] = {n.id: set() for n in self.nodes}
        for e in self.edges:
            adjacent[e.source_id].add(e.target_id)
            adjacent[e.target_id].add(e.source_id)
        seen = {nid}
        queue = deque([nid])
        while queue:
            for nxt in adjacent[queue.popleft()] - seen:
                seen.add(nxt)
                queue.append(nxt)
        return seen

    def with_node(self, node: KgNode) -> KnowledgeGraph:
        if node.id in self.ids():
            raise ValueError(f"node {node.id!r} already present")
        return replace(self, nodes=self.nodes + (node,))

    def with_edge(self, edge: KgEdge) -> KnowledgeGraph:
        if edge in self.edges:
            return self
        return replace(self, edges=self.edges + (edge,))

    def check(self) -> None:
        """Raise ValueError if a structural invariant is broken."""
        ids = [n.id for n in self.nodes]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate node ids")
        if any(not n.label.strip() for n in self.nodes):
            raise ValueError("empty node label")
        goal = self.goal
        known = set(ids)
        for e in self.edges:
            if e.source_id not in known or e.target_id not in known:
                raise ValueError(f"dangling edge {e}")
            if e.source_id == e.target_id:
                raise ValueError(f"self-loop on {e.source_id!r}")
            if not e.relation.strip():
                raise ValueError("empty relation")
        reach = self.component(goal.id)
        for obstacle in self.obstacles:
            if self.degree(obstacle.id) < 1 or obstacle.id not in reach:
                raise ValueError(f"obstacle {obstacle.id!r} is not connected to the goal")


def parse_triples(text: str) -> list[tuple[str, str, str]]:
    triples = []
    for m in _TRIPLE_RE.finditer(text):
        parts = tuple(p.strip().strip(_QUOTES).strip() for p in m.groups())
        if all(parts):
            triples.append(parts)
    return triples


def _merge_triples(graph: KnowledgeGraph, triples: Iterable[tuple[str, str, str]]) -> KnowledgeGraph:
    for subject, relation, obj in triples:
        sid, oid = node_id(subject), node_id(obj)
        if not sid or not oid or sid == oid:
            continue
        for nid, label in ((sid, subject), (oid, obj)):
            if graph.node(nid) is None:
                graph = graph.with_node(KgNode(nid, label))
        graph = graph.with_edge(KgEdge(sid, oid, relation))
    return graph


def extract_graph(
    story_context: str,
    main_goal: str,
    mode: ExtractionMode,
    backend: Backend,
    *,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
    trace: RunTrace | None = None,
) -> KnowledgeGraph:
    """Build the goal-anchored graph of the current story.

    Single-agent mode makes one ``kg_extract`` call. Three-agent mode makes a
    ``kg_info`` call for the important information and a ``kg_abstract`` call
    that turns it into triples; the third agent's work happens in
    ``generate_obstacle`` and ``write_twist_outline``. A reply with no triple
    degrades to the bare goal node and is traced, not raised.
    """
    mode = ExtractionMode(mode)
    graph = KnowledgeGraph.anchored(main_goal)
    story = story_context.strip() or "(the story has not started yet)"
    if mode is ExtractionMode.SINGLE_AGENT:
        reply = backend.complete(prompts.request("kg_extract", story=story, goal=main_goal)).text
    else:
        info = backend.complete(prompts.request("kg_info", story=story, goal=main_goal)).text
        reply = backend.complete(
            prompts.request("kg_abstract", information=info.strip() or "(none)", goal=main_goal)
        ).text
    triples = parse_triples(reply)
    if not triples:
        logger.warning("no triple parsed from KG extraction reply")
        if trace is not None:
            trace.add("kg_parse_error", op="extract", error="no valid triple in reply")
    else:
        goal_id = graph.goal.id
        if not any(node_id(s) == goal_id or node_id(o) == goal_id for s, _, o in triples) and trace is not None:
            trace.add("kg_goal_forced", goal=main_goal)
        graph = _merge_triples(graph, triples)
    graph.check()
    if trace is not None:
        trace.add("kg_mutation", op="extract", nodes_before=1, nodes_after=len(graph.nodes),
                  edges_after=len(graph.edges))
    return graph


def _split_edge(spec: str) -> tuple[str, str, str] | None:
    if "->" not in spec:
        return None
    left, dst = spec.rsplit("->", 1)
    if " -" in left:
        src, rel = left.rsplit(" -", 1)
    elif "-" in left:
        src, rel = left.rsplit("-", 1)
    else:
        return None
    src, rel, dst = (p.strip().strip(_QUOTES).strip() for p in (src, rel.rstrip("-"), dst))
    if not (src and rel and dst):
        return None
    return src, rel, dst


def parse_obstacle(text: str) -> tuple[str, list[tuple[str, str, str]]]:
    """Return the obstacle label and its raw ``(src, relation, dst)`` edges."""
    label = None
    edges: list[tuple[str, str, str]] = []
    for part in re.split(r"[|\n]", text):
        part = part.strip().lstrip("-* ").strip()
        head, _, rest = part.partition(":")
        key = head.strip().upper()
        if key == "NODE" and label is None and rest.strip().strip(_QUOTES).strip():
            label = rest.strip().strip(_QUOTES).strip()
        elif key == "EDGE":
            edge = _split_edge(rest)
            if edge is not None:
                edges.append(edge)
    if label is None:
        raise ParseError("no NODE: in obstacle reply")
    return label, edges


def generate_obstacle(
    graph: KnowledgeGraph,
    backend: Backend,
    *,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
    trace: RunTrace | None = None,
) -> tuple[KnowledgeGraph, KgNode, list[KgEdge]]:
    """Add one obstacle node tied to the goal; returns (graph, node, new edges).

    Repairs, all traced: endpoints naming unknown nodes are rewired to the
    goal; edges that end up as self-loops or do not touch the obstacle are
    dropped; if no edge links obstacle and goal, one is added.
    """
    goal = graph.goal
    reply = backend.complete(prompts.request("kg_obstacle", graph=render_graph(graph), goal=goal.label)).text
    label, raw_edges = parse_obstacle(reply)

    base = node_id(label)
    oid, n = base, 1
    while oid in graph.ids():
        n += 1
        oid = f"{base}#obstacle{n}"
    obstacle = KgNode(oid, label, is_obstacle=True)
    before = len(graph.nodes)
    new_graph = graph.with_node(obstacle)

    def resolve(name: str) -> str:
        nid = node_id(name)
        if nid == base:
            return oid
        if nid in graph.ids():
            return nid
        if trace is not None:
            trace.add("kg_edge_rewired", endpoint=name, to=goal.id)
        return goal.id

    new_edges: list[KgEdge] = []
    for src, rel, dst in raw_edges:
        edge = KgEdge(resolve(src), resolve(dst), rel)
        if edge.source_id == edge.target_id or oid not in (edge.source_id, edge.target_id):
            if trace is not None:
                trace.add("kg_edge_dropped", edge=edge.to_dict())
            continue
        if edge not in new_edges:
            new_edges.append(edge)
    if not any(goal.id in (e.source_id, e.target_id) for e in new_edges):
        forced = KgEdge(oid, goal.id, FORCED_RELATION)
        new_edges.append(forced)
        if trace is not None:
            trace.add("kg_edge_forced", edge=forced.to_dict())
    for edge in new_edges:
        new_graph = new_graph.with_edge(edge)
    new_graph.check()
    if trace is not None:
        trace.add("kg_mutation", op="obstacle", nodes_before=before, nodes_after=len(new_graph.nodes),
                  obstacle=label)
    return new_graph, obstacle, new_edges


def render_graph(graph: KnowledgeGraph) -> str:
    """Readable listing used inside prompts; labels appear verbatim."""
    labels = {n.id: n.label for n in graph.nodes}
    lines = [f"GOAL: {graph.goal.label}"]
    lines += [f"OBSTACLE: {n.label}" for n in graph.obstacles]
    others = [n.label for n in graph.nodes if not n.is_goal and not n.is_obstacle]
    if others:
        lines.append("ENTITIES: " + "; ".join(others))
    if graph.edges:
        lines.append("RELATIONS:")
        lines += [f"({labels[e.source_id]}, {e.relation}, {labels[e.target_id]})" for e in graph.edges]
    return "\n".join(lines)


def write_twist_outline(
    graph: KnowledgeGraph,
    memory_context: str,
    backend: Backend,
    round_index: int,
    *,
    language: str = "English",
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> Outline:
    if not graph.obstacles:
        raise ValueError("twist outline needs a graph with an obstacle node")
    obstacle = graph.obstacles[-1]
    request = prompts.request(
        "twist_outline",
        memory=memory_context,
        graph=render_graph(graph),
        obstacle=obstacle.label,
        goal=graph.goal.label,
        round_index=round_index,
        language=language,
    )
    text = backend.complete(request).text.strip()
    return Outline(round_index, text, Origin.TWIST)


def serialize_graph(graph: KnowledgeGraph) -> str:
    payload = {
        "goal_id": graph.goal.id,
        "nodes": sorted((n.to_dict() for n in graph.nodes), key=lambda d: d["id"]),
        "edges": sorted(
            (e.to_dict() for e in graph.edges),
            key=lambda d: (d["source_id"], d["target_id"], d["relation"]),
        ),
    }
    return json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True) + "\n"


def parse_graph(text: str) -> KnowledgeGraph:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"graph is not valid JSON: {exc}") from exc
    try:
        for d in data["nodes"]:
            if not isinstance(d["is_goal"], bool) or not isinstance(d["is_obstacle"], bool):
                raise FormatError(f"node flags must be booleans: {d!r}")
        nodes = tuple(
            KgNode(str(d["id"]), str(d["label"]), d["is_goal"], d["is_obstacle"]) for d in data["nodes"]
        )
        edges = tuple(KgEdge(str(d["source_id"]), str(d["target_id"]), str(d["relation"])) for d in data["edges"])
        goal_id = data["goal_id"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"graph is missing fields: {exc!r}") from exc
    graph = KnowledgeGraph(nodes, edges)
    try:
        graph.check()
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    if graph.goal.id != goal_id:
        raise FormatError("goal_id does not match the goal node")
    return graph


def save_graph(graph: KnowledgeGraph, path: str | Path) -> None:
    Path(path).write_text(serialize_graph(graph), encoding="utf-8")


def load_graph(path: str | Path) -> KnowledgeGraph:
    return parse_graph(Path(path).read_text(encoding="utf-8"))
