"""Access to bundled resource files (templates, lexicons, category lists)."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources as importlib_resources

_PACKAGE = __package__


def _read(relpath: str) -> str:
    root = importlib_resources.files(_PACKAGE) / "resources"
    return (root / relpath).read_text(encoding="utf-8")


def _lines(relpath: str) -> tuple[str, ...]:
    out = []
    for line in _read(relpath).splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return tuple(out)


@lru_cache(maxsize=None)
def template_text(template_name: str) -> str:
    """Raw text of a bundled prompt template (e.g. 'stage1')."""
    return _read(f"templates/{template_name}.txt")


@lru_cache(maxsize=None)
def object_categories() -> tuple[str, ...]:
    """Canonical object-category names, in bundled order."""
    return _lines("object_categories.txt")


@lru_cache(maxsize=None)
def object_synonyms() -> dict[str, tuple[str, ...]]:
    """Per-category synonym phrases for the lexical object-matching fallback."""
    table: dict[str, tuple[str, ...]] = {}
    for line in _lines("object_synonyms.txt"):
        category, _, rest = line.partition(":")
        synonyms = tuple(s.strip() for s in rest.split(",") if s.strip())
        table[category.strip()] = synonyms
    return table


@lru_cache(maxsize=None)
def refusal_lexicon() -> tuple[str, ...]:
    return _lines("refusal_lexicon.txt")


@lru_cache(maxsize=None)
def rationale_skip_words() -> frozenset[str]:
    return frozenset(_lines("rationale_skip_words.txt"))


@lru_cache(maxsize=None)
def default_name_pool_lines() -> tuple[str, ...]:
    return _lines("name_pool.txt")
