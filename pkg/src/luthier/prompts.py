"""Loader for the prompt assets shipped with the package.

Prompts are versioned repo assets; pipeline stages stamp the hash of the
prompt they used into each sample's provenance so a prompt edit is visible in
the output data.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources

__all__ = ["load_prompt", "prompt_hash", "PROMPT_NAMES"]

PROMPT_NAMES = (
    "translate",
    "judge_content",
    "judge_linguistic",
    "scholar_extract",
    "scholar_refine",
)


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    if name not in PROMPT_NAMES:
        raise KeyError(f"unknown prompt {name!r}; available: {PROMPT_NAMES}")
    path = resources.files("luthier").joinpath(f"assets/prompts/{name}.txt")
    return path.read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def prompt_hash(name: str) -> str:
    digest = hashlib.sha256(load_prompt(name).encode("utf-8")).hexdigest()
    return digest[:12]
