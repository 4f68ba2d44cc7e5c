"""Prompt templates for sketch queries, shipped as editable data files."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

def _prompt_dir():
    return resources.files("crash2scene").joinpath("data/prompts")


@lru_cache(maxsize=None)
def prompt_text(name: str) -> str:
    """Load a prompt template by name (without the .txt suffix)."""
    return (_prompt_dir() / f"{name}.txt").read_text(encoding="utf-8").strip()


def available_prompts() -> list[str]:
    return sorted(
        entry.name[:-4] for entry in _prompt_dir().iterdir()
        if entry.name.endswith(".txt")
    )
