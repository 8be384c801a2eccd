"""Prompt fragments and prompt rendering for style mining."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

from famix.errors import ConfigurationError

VARIANTS = ("RSP", "RCP", "none")
SHIPPED = {"R1": "r1_random_style.txt", "R2": "r2_random_character.txt"}
STYLE_WORD = "style"
GLOBAL_CONTEXT = "driving"


@dataclass(frozen=True)
class PromptSpec:
    """One mining prompt: ``<fragment> style <class name>``.

    Either part may be dropped (``None``) for the prompt-construction
    ablations; at least one must remain.
    """

    style_fragment: Optional[str]
    class_name: Optional[str]
    suffix: str = STYLE_WORD

    def __post_init__(self):
        if not self.style_fragment and not self.class_name:
            raise ConfigurationError("a prompt needs a style fragment, a class name, or both")

    @property
    def rendered(self) -> str:
        parts = []
        if self.style_fragment:
            parts += [self.style_fragment, self.suffix]
        if self.class_name:
            parts.append(self.class_name)
        return " ".join(parts)


@dataclass(frozen=True)
class PromptSet:
    entries: tuple
    variant: str = "RSP"

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ConfigurationError("prompt set is empty")
        if len(set(entries)) != len(entries):
            raise ConfigurationError("prompt set contains duplicate fragments")
        if any(not e.strip() or "\n" in e for e in entries):
            raise ConfigurationError("prompt fragments must be non-empty single lines")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown prompt-set variant {self.variant!r}")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    @property
    def cardinality(self) -> int:
        return len(self.entries)

    def head(self, n: int) -> "PromptSet":
        """The first ``n`` fragments, used for cardinality sweeps."""
        if not 1 <= n <= len(self.entries):
            raise ConfigurationError(f"cannot take {n} of {len(self.entries)} prompts")
        return PromptSet(self.entries[:n], self.variant)


def read_prompt_set(path) -> PromptSet:
    text = Path(path).read_text(encoding="utf-8")
    return parse_prompt_set(text)


def parse_prompt_set(text: str) -> PromptSet:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("variant:"):
        raise ConfigurationError("prompt file must start with a 'variant: RSP|RCP' header line")
    variant = lines[0].split(":", 1)[1].strip()
    entries = [ln.strip() for ln in lines[1:] if ln.strip()]
    return PromptSet(tuple(entries), variant)


def write_prompt_set(prompts: PromptSet, path) -> None:
    body = "\n".join((f"variant: {prompts.variant}", *prompts.entries)) + "\n"
    Path(path).write_text(body, encoding="utf-8")


def shipped_prompt_set(name: str = "R1") -> PromptSet:
    """Load one of the bundled sets: ``R1`` (style phrases) or ``R2`` (random characters)."""
    try:
        fname = SHIPPED[name]
    except KeyError:
        raise ConfigurationError(f"no shipped prompt set {name!r}; choose from {sorted(SHIPPED)}") from None
    return parse_prompt_set(resources.files("famix.data").joinpath(fname).read_text(encoding="utf-8"))


def resolve_prompt_set(ref: str) -> PromptSet:
    """``R1``/``R2`` (optionally ``R1:5`` for the first five) or a file path."""
    name, _, count = ref.rpartition(":")
    if not name or not count.isdigit():
        name, count = ref, ""
    prompts = shipped_prompt_set(name) if name in SHIPPED else read_prompt_set(name)
    return prompts.head(int(count)) if count else prompts
