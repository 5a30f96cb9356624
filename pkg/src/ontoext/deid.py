"""De-identification agent: PHI extraction by category, then placeholder masking."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from . import prompts
from .gateway import ChatExchange, Gateway, Shape
from .metrics import PRF, macro, prf

logger = logging.getLogger(__name__)


class PhiCategory(str, enum.Enum):
    PERSON = "person"
    LOCATION = "location"
    ORGANIZATION = "organization"
    AGE = "age"
    PHONE_NUMBER = "phone number"
    EMAIL = "email"
    DATE_AND_TIME = "date and time"
    ZIP = "zip"
    PROFESSION = "profession"
    USERNAME = "username"
    ID = "id"
    URL = "url"

    @property
    def placeholder(self) -> str:
        return f"[{self.value.upper()}]"


assert tuple(c.value for c in PhiCategory) == prompts.PHI_CATEGORIES

_ALIASES = {
    "name": PhiCategory.PERSON,
    "names": PhiCategory.PERSON,
    "patient": PhiCategory.PERSON,
    "patient name": PhiCategory.PERSON,
    "doctor": PhiCategory.PERSON,
    "physician": PhiCategory.PERSON,
    "people": PhiCategory.PERSON,
    "persons": PhiCategory.PERSON,
    "address": PhiCategory.LOCATION,
    "city": PhiCategory.LOCATION,
    "state": PhiCategory.LOCATION,
    "country": PhiCategory.LOCATION,
    "street": PhiCategory.LOCATION,
    "locations": PhiCategory.LOCATION,
    "organisation": PhiCategory.ORGANIZATION,
    "organizations": PhiCategory.ORGANIZATION,
    "hospital": PhiCategory.ORGANIZATION,
    "facility": PhiCategory.ORGANIZATION,
    "company": PhiCategory.ORGANIZATION,
    "ages": PhiCategory.AGE,
    "phone": PhiCategory.PHONE_NUMBER,
    "telephone": PhiCategory.PHONE_NUMBER,
    "phone numbers": PhiCategory.PHONE_NUMBER,
    "fax": PhiCategory.PHONE_NUMBER,
    "e mail": PhiCategory.EMAIL,
    "email address": PhiCategory.EMAIL,
    "emails": PhiCategory.EMAIL,
    "date": PhiCategory.DATE_AND_TIME,
    "dates": PhiCategory.DATE_AND_TIME,
    "time": PhiCategory.DATE_AND_TIME,
    "datetime": PhiCategory.DATE_AND_TIME,
    "date time": PhiCategory.DATE_AND_TIME,
    "date/time": PhiCategory.DATE_AND_TIME,
    "zip code": PhiCategory.ZIP,
    "zipcode": PhiCategory.ZIP,
    "postal code": PhiCategory.ZIP,
    "occupation": PhiCategory.PROFESSION,
    "job": PhiCategory.PROFESSION,
    "user name": PhiCategory.USERNAME,
    "mrn": PhiCategory.ID,
    "medical record number": PhiCategory.ID,
    "identifier": PhiCategory.ID,
    "ids": PhiCategory.ID,
    "ssn": PhiCategory.ID,
    "website": PhiCategory.URL,
    "web address": PhiCategory.URL,
    "link": PhiCategory.URL,
    "urls": PhiCategory.URL,
}


def normalize_category(key: str) -> PhiCategory | None:
    """Map a model-produced category key onto the closed set, or None."""
    k = " ".join(re.sub(r"[_\-]+", " ", key).lower().split())
    try:
        return PhiCategory(k)
    except ValueError:
        return _ALIASES.get(k)


@dataclass(frozen=True)
class ClinicalNote:
    note_id: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"note {self.note_id} is empty")


@dataclass
class PhiInventory:
    note_id: str
    entries: dict[PhiCategory, list[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        filled = {}
        for cat in PhiCategory:
            items = [s for s in self.entries.get(cat, []) if s.strip()]
            filled[cat] = list(dict.fromkeys(items))
        self.entries = filled

    def items(self) -> Iterable[tuple[PhiCategory, str]]:
        for cat in PhiCategory:
            for s in self.entries[cat]:
                yield cat, s

    def to_json(self) -> dict:
        return {"note_id": self.note_id, "phi": {c.value: list(v) for c, v in self.entries.items()}}

    @classmethod
    def from_json(cls, data: Mapping) -> "PhiInventory":
        entries: dict[PhiCategory, list[str]] = {}
        for key, values in data.get("phi", {}).items():
            cat = normalize_category(key)
            if cat is None:
                raise ValueError(f"unknown PHI category {key!r}")
            entries.setdefault(cat, []).extend(values)
        return cls(data["note_id"], entries)


@dataclass(frozen=True)
class MaskEntry:
    category: PhiCategory
    original: str
    count: int


@dataclass
class DeidentifiedNote:
    note_id: str
    masked_text: str
    mask_log: list[MaskEntry] = field(default_factory=list)


def extract_phi(note: ClinicalNote, gateway: Gateway) -> PhiInventory:
    """Ask the de-identification agent for PHI and clean up its answer.

    Unknown category keys are mapped through an alias table or dropped;
    strings that do not occur in the note (case-insensitively) are dropped
    as hallucinations.

    Raises:
        FormatError: the agent never produced a parseable mapping.
    """
    system, user = prompts.deid_prompt(note.text)
    raw = gateway.complete_structured(ChatExchange(system, user), Shape.MAPPING_OF_LISTS)
    entries: dict[PhiCategory, list[str]] = {}
    lowered = note.text.lower()
    for key, values in raw.items():
        cat = normalize_category(key)
        if cat is None:
            logger.warning("note %s: dropping unknown PHI category %r", note.note_id, key)
            continue
        for value in values:
            value = value.strip()
            if not value:
                continue
            if value.lower() not in lowered:
                logger.info("note %s: dropping %s string absent from note", note.note_id, cat.value)
                continue
            entries.setdefault(cat, []).append(value)
    return PhiInventory(note.note_id, entries)


_PLACEHOLDER = "|".join(re.escape(c.placeholder) for c in PhiCategory)


def _occurrences(s: str) -> re.Pattern:
    # existing placeholders are matched first so they are never rewritten
    return re.compile(rf"(?P<ph>{_PLACEHOLDER})|(?P<hit>{re.escape(s)})", re.IGNORECASE)


def mask(note: ClinicalNote, inventory: PhiInventory) -> DeidentifiedNote:
    """Replace every inventory string with its category placeholder.

    Every case-insensitive occurrence is replaced, including ones inside a
    longer word ("Kim" in "Kimberly"): over-masking is the safe failure for
    a privacy step. Longer strings go first so a short string cannot split
    a longer one.
    """
    if inventory.note_id != note.note_id:
        raise ValueError(f"inventory for {inventory.note_id} applied to note {note.note_id}")
    pairs = sorted(inventory.items(), key=lambda p: -len(p[1]))
    text = note.text
    log = []
    for cat, s in pairs:
        count = 0

        def swap(m: re.Match) -> str:
            nonlocal count
            if m.group("ph"):
                return m.group(0)
            count += 1
            return cat.placeholder

        text = _occurrences(s).sub(swap, text)
        log.append(MaskEntry(cat, s, count))
    return DeidentifiedNote(note.note_id, text, log)


def surviving_phi(text: str, inventory: PhiInventory) -> list[str]:
    """Inventory strings still present in ``text`` outside placeholders."""
    left = []
    for _, s in inventory.items():
        for m in _occurrences(s).finditer(text):
            if m.group("hit"):
                left.append(s)
                break
    return left


@dataclass
class PhiScores:
    micro: PRF
    macro: PRF
    per_note: dict[str, PRF]


def _keyed(inv: PhiInventory) -> set[tuple[PhiCategory, str]]:
    return {(cat, s.strip().lower()) for cat, s in inv.items()}


def evaluate_phi(
    predicted: Mapping[str, PhiInventory] | Iterable[PhiInventory],
    gold: Mapping[str, PhiInventory] | Iterable[PhiInventory],
) -> PhiScores:
    """String-level PHI scores, micro-pooled and macro-averaged over notes.

    A prediction is correct when the same string (case-insensitive) appears
    under the same category in the gold inventory. Gold notes without a
    prediction count as empty predictions.

    Raises:
        KeyError: a predicted note has no gold inventory.
    """
    if not isinstance(predicted, Mapping):
        predicted = {inv.note_id: inv for inv in predicted}
    if not isinstance(gold, Mapping):
        gold = {inv.note_id: inv for inv in gold}
    for note_id in predicted:
        if note_id not in gold:
            raise KeyError(f"no gold PHI for note {note_id}")
    tp = n_pred = n_gold = 0
    per_note = {}
    for note_id in sorted(gold):
        g = _keyed(gold[note_id])
        p = _keyed(predicted[note_id]) if note_id in predicted else set()
        hits = len(p & g)
        per_note[note_id] = prf(hits, len(p), len(g))
        tp, n_pred, n_gold = tp + hits, n_pred + len(p), n_gold + len(g)
    return PhiScores(prf(tp, n_pred, n_gold), macro(list(per_note.values())), per_note)
