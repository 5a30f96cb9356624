"""Evaluation: fuzzy reference sets, thresholded extraction scores, judge precision."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import kernels, prompts
from .entities import CandidateEntitySet
from .gateway import ChatExchange, FormatError, Gateway, GatewayError, Label
from .metrics import PRF, harmonic, prf
from .deid import DeidentifiedNote
from .ontology import InsertionRecord, Ontology, Origin

logger = logging.getLogger(__name__)

REFERENCE_THRESHOLD = 90
EVAL_THRESHOLDS = (60, 70, 80)

_TOKEN_EDGE = re.compile(r"^\W+|\W+$")


def _norm(s: str) -> str:
    return " ".join(s.lower().split())


def fuzzy_ratio(a: str, b: str) -> int:
    """0-100 similarity: 100 * (1 - edit distance / longer length), rounded half up.

    Compared after lowercasing and whitespace collapsing. Only equal
    strings score 100.
    """
    return kernels.ratio(_norm(a), _norm(b))


def words(text: str) -> list[str]:
    """Lowercased whitespace tokens with leading/trailing punctuation removed."""
    out = []
    for tok in text.lower().split():
        tok = _TOKEN_EDGE.sub("", tok)
        if tok:
            out.append(tok)
    return out


def windows(tokens: Sequence[str], n: int) -> list[str]:
    """All contiguous spans of ``n - 1``, ``n`` and ``n + 1`` tokens, joined by spaces."""
    out: list[str] = []
    for width in (n - 1, n, n + 1):
        if width < 1:
            continue
        for i in range(len(tokens) - width + 1):
            out.append(" ".join(tokens[i : i + width]))
    return out


def scan_occurrence(term: str, text: str, floor: int = 0) -> int:
    """How well ``term`` appears in ``text``: best ratio over word windows.

    With ``floor`` set, scores below it may be reported lower than the true
    maximum (they are pruned), which is harmless for threshold tests.
    """
    term_tokens = words(term)
    if not term_tokens:
        raise ValueError("term must contain at least one word")
    return kernels.max_ratio(" ".join(term_tokens), windows(words(text), len(term_tokens)), floor)


@dataclass
class ReferenceSet:
    note_id: str
    terms: list[str] = field(default_factory=list)


def build_reference(
    note: DeidentifiedNote,
    onto: Ontology,
    threshold: int = REFERENCE_THRESHOLD,
) -> ReferenceSet:
    """Seed ontology names that occur in the masked note at or above ``threshold``.

    Terms come out in ontology order, deduplicated by normalized name.
    """
    if not 0 <= threshold <= 100:
        raise ValueError("threshold must be in [0, 100]")
    tokens = words(note.masked_text)
    by_width: dict[int, list[str]] = {}
    seen: set[str] = set()
    found = []
    for concept in onto.concepts.values():
        if concept.obsolete or concept.origin is not Origin.SEED:
            continue
        key = " ".join(words(concept.name))
        if not key or key in seen:
            continue
        n = key.count(" ") + 1
        if n not in by_width:
            by_width[n] = windows(tokens, n)
        if kernels.max_ratio(key, by_width[n], threshold) >= threshold:
            seen.add(key)
            found.append(concept.name)
    return ReferenceSet(note.note_id, found)


@dataclass
class MatchResult:
    scores: PRF
    tp: int
    n_pred: int
    n_ref: int
    pairs: list[tuple[str, str, int]]
    flagged: bool = False


def match_at(predictions: Sequence[str], reference: Sequence[str], threshold: int) -> MatchResult:
    """Greedy one-to-one fuzzy matching of predictions against reference terms.

    Pairs are taken in order of descending score; ties resolve by reference
    order, then prediction order. A pair counts when its score reaches
    ``threshold``.
    """
    scored = []
    for i, p in enumerate(predictions):
        for j, r in enumerate(reference):
            s = fuzzy_ratio(p, r)
            if s >= threshold:
                scored.append((-s, j, i))
    scored.sort()
    used_p: set[int] = set()
    used_r: set[int] = set()
    pairs = []
    for neg, j, i in scored:
        if i in used_p or j in used_r:
            continue
        used_p.add(i)
        used_r.add(j)
        pairs.append((predictions[i], reference[j], -neg))
    tp = len(pairs)
    flagged = not reference and bool(predictions)
    return MatchResult(prf(tp, len(predictions), len(reference)), tp, len(predictions), len(reference), pairs, flagged)


def prf_at(predictions: CandidateEntitySet | Sequence[str], reference: ReferenceSet | Sequence[str], threshold: int) -> PRF:
    preds = [m.normalized for m in predictions.mentions] if isinstance(predictions, CandidateEntitySet) else list(predictions)
    refs = reference.terms if isinstance(reference, ReferenceSet) else list(reference)
    return match_at(preds, refs, threshold).scores


# --------------------------------------------------------------------------
# judge
# --------------------------------------------------------------------------


class JudgeLabel(str, enum.Enum):
    CORRECT = "Correct"
    INCORRECT = "Incorrect"
    NOT_SURE = "Not Sure"


JUDGE_LABEL = Label(
    {
        "correct": JudgeLabel.CORRECT,
        "incorrect": JudgeLabel.INCORRECT,
        "not correct": JudgeLabel.INCORRECT,
        "wrong": JudgeLabel.INCORRECT,
        "not sure": JudgeLabel.NOT_SURE,
        "unsure": JudgeLabel.NOT_SURE,
        "uncertain": JudgeLabel.NOT_SURE,
    }
)


@dataclass(frozen=True)
class JudgeVerdict:
    label: JudgeLabel
    new_entity: str
    parent_name: str
    relation: str = "is-a"
    error: str = ""

    def to_json(self) -> dict:
        return {
            "label": self.label.value,
            "new_entity": self.new_entity,
            "parent_name": self.parent_name,
            "relation": self.relation,
            "error": self.error,
        }


def judge_extension(
    triplets: Iterable[tuple[str, str, str] | InsertionRecord],
    gateway: Gateway,
    onto: Ontology | None = None,
) -> list[JudgeVerdict]:
    """One judge verdict per (new entity, parent name, relation) triplet.

    Insertion records need ``onto`` to resolve parent names. Unparseable
    replies and transport failures both come back as Not Sure, the latter
    with ``error`` set.
    """
    verdicts = []
    for item in triplets:
        if isinstance(item, InsertionRecord):
            if onto is None:
                raise ValueError("insertion records need the ontology to name parents")
            item = (item.new_entity, onto[item.parent_id].name, "is-a")
        new, parent, relation = item
        system, user = prompts.judge_prompt(new, parent, relation)
        try:
            label = gateway.complete_structured(ChatExchange(system, user), JUDGE_LABEL)
            verdicts.append(JudgeVerdict(JudgeLabel(label), new, parent, relation))
        except FormatError:
            logger.warning("judge reply for %r unparseable; counting as Not Sure", new)
            verdicts.append(JudgeVerdict(JudgeLabel.NOT_SURE, new, parent, relation))
        except GatewayError as exc:
            logger.error("judge call for %r failed: %s", new, exc)
            verdicts.append(JudgeVerdict(JudgeLabel.NOT_SURE, new, parent, relation, error=str(exc)))
    return verdicts


def tally(verdicts: Iterable[JudgeVerdict]) -> dict[str, int]:
    """Counts per label; verdicts whose judge call failed are counted only under "Failed"."""
    counts = {label.value: 0 for label in JudgeLabel}
    counts["Failed"] = 0
    for v in verdicts:
        counts["Failed" if v.error else v.label.value] += 1
    return counts


def judge_precision(verdicts: Iterable[JudgeVerdict] | None = None, *, correct: int | None = None, incorrect: int | None = None) -> float | None:
    """100 * Correct / (Correct + Incorrect); Not Sure is excluded. None when undefined."""
    if verdicts is not None:
        counts = tally(verdicts)
        correct, incorrect = counts["Correct"], counts["Incorrect"]
    if correct is None or incorrect is None:
        raise TypeError("pass verdicts or both correct= and incorrect=")
    denom = correct + incorrect
    return 100.0 * correct / denom if denom else None


__all__ = [
    "EVAL_THRESHOLDS",
    "JUDGE_LABEL",
    "JudgeLabel",
    "JudgeVerdict",
    "MatchResult",
    "REFERENCE_THRESHOLD",
    "ReferenceSet",
    "build_reference",
    "fuzzy_ratio",
    "harmonic",
    "judge_extension",
    "judge_precision",
    "match_at",
    "prf_at",
    "scan_occurrence",
    "tally",
    "words",
]
