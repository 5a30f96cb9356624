"""Disease mention extraction from de-identified notes, and corpus-level merging."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable

from . import prompts
from .deid import PhiCategory, DeidentifiedNote
from .gateway import ChatExchange, Gateway, Shape

_TRAILING = re.compile(r"[\s.,;:!?]+$")
_LEADING = re.compile(r"^[\s,;:]+")
_ANY_PLACEHOLDER = re.compile(
    "|".join(re.escape(c.placeholder) for c in PhiCategory), re.IGNORECASE
)


def normalize(surface: str) -> str:
    """Lowercase, collapse whitespace, strip trailing punctuation."""
    text = " ".join(surface.lower().split())
    text = _LEADING.sub("", text)
    return _TRAILING.sub("", text)


@dataclass(frozen=True)
class EntityMention:
    surface: str
    normalized: str
    note_id: str

    def __post_init__(self) -> None:
        if not self.normalized:
            raise ValueError("mention normalizes to an empty string")


@dataclass
class CandidateEntitySet:
    note_id: str
    mentions: list[EntityMention] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.mentions)

    @classmethod
    def from_strings(cls, note_id: str, strings: Iterable[str]) -> "CandidateEntitySet":
        """Normalize and deduplicate, dropping empties and anything carrying a PHI placeholder."""
        seen: dict[str, EntityMention] = {}
        for s in strings:
            if _ANY_PLACEHOLDER.search(s):
                continue
            norm = normalize(s)
            if not norm or norm in seen:
                continue
            seen[norm] = EntityMention(s.strip(), norm, note_id)
        return cls(note_id, list(seen.values()))


def extract_diseases(note: DeidentifiedNote, gateway: Gateway) -> CandidateEntitySet:
    system, user = prompts.extract_prompt(note.masked_text)
    strings = gateway.complete_structured(ChatExchange(system, user), Shape.LIST_OF_STRINGS)
    return CandidateEntitySet.from_strings(note.note_id, strings)


@dataclass
class CorpusCandidate:
    normalized: str
    surface: str
    note_ids: list[str]

    def to_json(self) -> dict:
        return {"normalized": self.normalized, "surface": self.surface, "note_ids": list(self.note_ids)}


def merge_candidates(sets: Iterable[CandidateEntitySet]) -> list[CorpusCandidate]:
    """Union by normalized form in first-appearance order, keeping the first surface form."""
    merged: dict[str, CorpusCandidate] = {}
    for cset in sets:
        for m in cset.mentions:
            entry = merged.get(m.normalized)
            if entry is None:
                merged[m.normalized] = CorpusCandidate(m.normalized, m.surface, [cset.note_id])
            elif cset.note_id not in entry.note_ids:
                entry.note_ids.append(cset.note_id)
    return list(merged.values())
