"""Hierarchical ontology extension.

Each new entity descends the hierarchy one layer at a time: the most
cosine-similar concept in the current layer becomes the anchor, and the
relation agent decides whether the entity is the anchor (stop), a more
specific kind of it (descend into its children), or neither (insert under
the anchor). A "more specific" verdict at a childless anchor inserts under
that anchor.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import prompts
from .entities import CorpusCandidate
from .gateway import ChatExchange, FormatError, Gateway, GatewayError, Label
from .ontology import DuplicateInsertionError, InsertionRecord, Ontology

logger = logging.getLogger(__name__)

DEPTH_GUARD_OFFSET = 8


class Relation(str, enum.Enum):
    EQUIVALENCE = "Equivalence"
    SUBSETTING = "Subsetting"
    NEITHER = "Neither"


RELATION_LABEL = Label(
    {
        "equivalence": Relation.EQUIVALENCE,
        "equivalent": Relation.EQUIVALENCE,
        "synonym": Relation.EQUIVALENCE,
        "same concept": Relation.EQUIVALENCE,
        "subsetting": Relation.SUBSETTING,
        "subset": Relation.SUBSETTING,
        "subclass": Relation.SUBSETTING,
        "more specific": Relation.SUBSETTING,
        "neither": Relation.NEITHER,
        "unrelated": Relation.NEITHER,
        "not related": Relation.NEITHER,
    }
)


@dataclass(frozen=True)
class RelationVerdict:
    relation: Relation
    rationale: str = ""


@dataclass(frozen=True)
class AnchorMatch:
    candidate_id: str
    similarity: float
    layer: int


@dataclass(frozen=True)
class Step:
    layer: int
    candidates: int
    anchor_id: str
    similarity: float
    verdict: Relation


class OutcomeKind(str, enum.Enum):
    INSERTED = "inserted"
    ALREADY_PRESENT = "already_present"
    FAILED = "failed"


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    concept_id: str | None = None
    reason: str = ""


@dataclass
class ExtensionTrace:
    entity: str
    trace_id: str = ""
    steps: list[Step] = field(default_factory=list)
    outcome: Outcome | None = None
    record: InsertionRecord | None = None

    def to_json(self) -> dict:
        return {
            "trace_id": self.trace_id,
            "entity": self.entity,
            "steps": [
                {
                    "layer": s.layer,
                    "candidates": s.candidates,
                    "anchor_id": s.anchor_id,
                    "similarity": round(s.similarity, 6),
                    "verdict": s.verdict.value,
                }
                for s in self.steps
            ],
            "outcome": {
                "kind": self.outcome.kind.value,
                "concept_id": self.outcome.concept_id,
                "reason": self.outcome.reason,
            }
            if self.outcome
            else None,
            "new_id": self.record.new_id if self.record else None,
        }


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def nearest(
    entity: str,
    candidates: Sequence[str],
    onto: Ontology,
    embedder: Gateway,
    layer: int = 0,
    use_synonyms: bool = False,
) -> AnchorMatch:
    """Most cosine-similar candidate concept to ``entity``; ties go to the earliest.

    Only concept names are embedded unless ``use_synonyms`` is set, in which
    case a candidate scores the best of its name and synonyms.
    """
    if not candidates:
        raise ValueError("no candidates to match against")
    if not entity.strip():
        raise ValueError("entity must be non-empty")
    labels: list[list[str]] = []
    for cid in candidates:
        concept = onto[cid]
        labels.append([concept.name, *concept.synonyms] if use_synonyms else [concept.name])
    flat = [entity] + [t for group in labels for t in group]
    vectors = embedder.embed_many(flat)
    query, rest = vectors[0], iter(vectors[1:])
    best_i, best_sim = 0, -np.inf
    for i, group in enumerate(labels):
        sim = max(cosine(query, next(rest)) for _ in group)
        if sim > best_sim:
            best_i, best_sim = i, sim
    return AnchorMatch(candidates[best_i], float(best_sim), layer)


def classify_relation(entity: str, anchor_id: str, onto: Ontology, gateway: Gateway) -> RelationVerdict:
    """Ask the relation agent how ``entity`` relates to the anchor concept.

    The anchor's first parent is passed as context. Output that never
    yields a label falls back to Neither.
    """
    anchor = onto[anchor_id]
    parents = onto.parents(anchor_id)
    parent_name = onto[parents[0]].name if parents else None
    system, user = prompts.relation_prompt(entity, anchor.name, parent_name)
    exchange = ChatExchange(system, user)
    try:
        relation = gateway.complete_structured(exchange, RELATION_LABEL)
    except FormatError:
        logger.warning("no relation label for %r vs %r; defaulting to Neither", entity, anchor.name)
        return RelationVerdict(Relation.NEITHER, exchange.raw_response)
    return RelationVerdict(Relation(relation), exchange.raw_response)


def extend_one(
    entity: str,
    onto: Ontology,
    gateway: Gateway,
    embedder: Gateway | None = None,
    max_steps: int | None = None,
    trace_id: str = "",
    use_synonyms: bool = False,
) -> ExtensionTrace:
    """Place one entity, mutating ``onto`` only if it gets inserted.

    ``gateway`` serves the relation agent and ``embedder`` the embeddings
    (the same gateway when omitted).
    """
    embedder = embedder or gateway
    if max_steps is None:
        max_steps = onto.depth + DEPTH_GUARD_OFFSET
    trace = ExtensionTrace(entity, trace_id)
    try:
        candidates = onto.root_layer()
        layer = 0
        while True:
            if layer >= max_steps:
                trace.outcome = Outcome(OutcomeKind.FAILED, reason=f"depth guard of {max_steps} layers reached")
                return trace
            match = nearest(entity, candidates, onto, embedder, layer, use_synonyms)
            verdict = classify_relation(entity, match.candidate_id, onto, gateway)
            trace.steps.append(Step(layer, len(candidates), match.candidate_id, match.similarity, verdict.relation))
            if verdict.relation is Relation.EQUIVALENCE:
                trace.outcome = Outcome(OutcomeKind.ALREADY_PRESENT, match.candidate_id)
                return trace
            if verdict.relation is Relation.SUBSETTING:
                children = onto.children(match.candidate_id)
                if children:
                    candidates = children
                    layer += 1
                    continue
            return _insert(trace, onto, match.candidate_id, entity)
    except GatewayError as exc:
        trace.outcome = Outcome(OutcomeKind.FAILED, reason=f"{type(exc).__name__}: {exc}")
        return trace


def _insert(trace: ExtensionTrace, onto: Ontology, parent: str, entity: str) -> ExtensionTrace:
    try:
        trace.record = onto.insert_child(parent, entity, trace.trace_id)
    except DuplicateInsertionError as exc:
        trace.outcome = Outcome(OutcomeKind.ALREADY_PRESENT, exc.existing_id, reason="duplicate child name")
        return trace
    trace.outcome = Outcome(OutcomeKind.INSERTED, parent)
    return trace


def extend_all(
    entities: Iterable[CorpusCandidate | str],
    onto: Ontology,
    gateway: Gateway,
    embedder: Gateway | None = None,
    depth_guard_offset: int = DEPTH_GUARD_OFFSET,
    inplace: bool = False,
    use_synonyms: bool = False,
) -> tuple[Ontology, list[ExtensionTrace]]:
    """Place entities one after another; each insertion is visible to the next entity."""
    extended = onto if inplace else onto.copy()
    max_steps = onto.depth + depth_guard_offset
    traces = []
    for i, ent in enumerate(entities, 1):
        name = ent.normalized if isinstance(ent, CorpusCandidate) else ent
        traces.append(extend_one(name, extended, gateway, embedder, max_steps, f"T{i:05d}", use_synonyms))
    return extended, traces


def insertion_records(traces: Iterable[ExtensionTrace]) -> list[InsertionRecord]:
    return [t.record for t in traces if t.record is not None]


def write_traces(traces: Iterable[ExtensionTrace], sink) -> None:
    for t in traces:
        sink.write(json.dumps(t.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
