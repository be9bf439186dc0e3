"""Prompt templates, one editable text file per role tag.

A template file has a ``[system]`` section and a ``[user]`` section; both use
``{placeholder}`` fields filled by ``str.format_map``. The packaged defaults
live in ``storygen/prompts/``; a user directory overrides them file by file.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

from storygen.backend import ROLE_TAGS, ChatRequest

_SECTION_RE = re.compile(r"^\[(system|user)\]\s*$", re.MULTILINE)


class TemplateError(ValueError):
    pass


def split_template(raw: str) -> tuple[str, str]:
    parts = _SECTION_RE.split(raw)
    sections: dict[str, str] = {}
    # parts = [preamble, name, body, name, body, ...]
    for name, body in zip(parts[1::2], parts[2::2]):
        sections[name] = body.strip("\n")
    if "user" not in sections:
        raise TemplateError("template has no [user] section")
    return sections.get("system", "").strip(), sections["user"].strip()


class PromptLibrary:
    """Loads templates and turns them into ``ChatRequest`` objects."""

    def __init__(
        self,
        override_dir: str | Path | None = None,
        *,
        temperature: float = 0.7,
        max_tokens: int = 2048,
    ) -> None:
        self.override_dir = Path(override_dir) if override_dir else None
        self.temperature = temperature
        self.max_tokens = max_tokens
        self._cache: dict[str, tuple[str, str]] = {}

    def template(self, role_tag: str) -> tuple[str, str]:
        if role_tag not in ROLE_TAGS:
            raise KeyError(role_tag)
        if role_tag not in self._cache:
            raw = None
            if self.override_dir is not None:
                candidate = self.override_dir / f"{role_tag}.txt"
                if candidate.is_file():
                    raw = candidate.read_text(encoding="utf-8")
            if raw is None:
                raw = resources.files("storygen").joinpath("prompts", f"{role_tag}.txt").read_text(encoding="utf-8")
            self._cache[role_tag] = split_template(raw)
        return self._cache[role_tag]

    def render(self, role_tag: str, **fields: object) -> tuple[str, str]:
        system, user = self.template(role_tag)
        try:
            return system.format_map(fields), user.format_map(fields)
        except KeyError as exc:
            raise TemplateError(f"template {role_tag!r} needs field {exc}") from exc

    def request(self, role_tag: str, **fields: object) -> ChatRequest:
        system, user = self.render(role_tag, **fields)
        return ChatRequest(
            role_tag=role_tag,
            system_text=system,
            user_text=user,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
        )


DEFAULT_PROMPTS = PromptLibrary()
