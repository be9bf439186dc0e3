"""Multi-agent long story generation."""

from storygen.backend import BackendConfig, ChatRequest, ChatResponse, HttpBackend, ScriptedBackend
from storygen.knowledge_graph import ExtractionMode, KnowledgeGraph
from storygen.memory import MemoryStore
from storygen.models import Outline, StorySegment, StorySettings, count_words
from storygen.pipeline import RunConfig, RunState, Stage, StoryPipeline, resume, run

__all__ = [
    "BackendConfig",
    "ChatRequest",
    "ChatResponse",
    "ExtractionMode",
    "HttpBackend",
    "KnowledgeGraph",
    "MemoryStore",
    "Outline",
    "RunConfig",
    "RunState",
    "ScriptedBackend",
    "Stage",
    "StoryPipeline",
    "StorySegment",
    "StorySettings",
    "count_words",
    "resume",
    "run",
]
