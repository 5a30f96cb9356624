"""Disease ontology storage: OBO parsing, hierarchy queries, insertion, serialization."""

from __future__ import annotations

import enum
import io
import json
import logging
import re
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Iterable

logger = logging.getLogger(__name__)

INSERTED_PREFIX = "EXT:"


class OntologyError(Exception):
    pass


class OboParseError(OntologyError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(OntologyError):
    pass


class UnknownConceptError(OntologyError, KeyError):
    def __str__(self) -> str:
        return f"unknown concept id: {self.args[0]!r}"


class DuplicateInsertionError(OntologyError):
    def __init__(self, parent_id: str, name: str, existing_id: str):
        self.parent_id = parent_id
        self.name = name
        self.existing_id = existing_id
        super().__init__(f"{parent_id} already has a child named {name!r} ({existing_id})")


class Origin(str, enum.Enum):
    SEED = "seed"
    INSERTED = "inserted"


def normalize_name(name: str) -> str:
    return " ".join(name.split()).lower()


@dataclass
class Concept:
    id: str
    name: str
    synonyms: list[str] = field(default_factory=list)
    obsolete: bool = False
    origin: Origin = Origin.SEED

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("concept id must be non-empty")
        if not self.name.strip():
            raise ValueError(f"concept {self.id} has an empty name")


@dataclass(frozen=True)
class InsertionRecord:
    new_entity: str
    new_id: str
    parent_id: str
    layer: int
    trace_ref: str = ""


@dataclass
class ValidationReport:
    acyclic: bool
    dangling_edges: list[tuple[str, str]]
    depth: int
    concept_count: int
    edge_count: int
    cycle_nodes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.acyclic and not self.dangling_edges


class Ontology:
    """A concept hierarchy stored as parent -> ordered child lists.

    Seed child lists keep file order and insertions append, so iteration
    order (and therefore argmax tie-breaking downstream) is reproducible.
    Reads may run concurrently; :meth:`insert_child` takes an exclusive lock.
    """

    def __init__(self) -> None:
        self.concepts: dict[str, Concept] = {}
        self.child_edges: dict[str, list[str]] = {}
        self.parent_edges: dict[str, list[str]] = {}
        self._lock = threading.RLock()
        self._next_serial = 1

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, concept_id: object) -> bool:
        return concept_id in self.concepts

    def __getitem__(self, concept_id: str) -> Concept:
        try:
            return self.concepts[concept_id]
        except KeyError:
            raise UnknownConceptError(concept_id) from None

    @property
    def edge_count(self) -> int:
        return sum(len(kids) for kids in self.child_edges.values())

    def edges(self) -> list[tuple[str, str]]:
        return [(p, c) for p, kids in self.child_edges.items() for c in kids]

    def add_concept(self, concept: Concept) -> None:
        if concept.id in self.concepts:
            raise OntologyError(f"duplicate concept id {concept.id}")
        self.concepts[concept.id] = concept

    def add_edge(self, parent: str, child: str) -> None:
        kids = self.child_edges.setdefault(parent, [])
        if child not in kids:
            kids.append(child)
            self.parent_edges.setdefault(child, []).append(parent)

    def parents(self, concept_id: str) -> list[str]:
        self[concept_id]
        return list(self.parent_edges.get(concept_id, ()))

    def children(self, concept_id: str) -> list[str]:
        """Direct, non-obsolete children in stored order."""
        self[concept_id]
        return [c for c in self.child_edges.get(concept_id, ()) if not self.concepts[c].obsolete]

    @property
    def roots(self) -> list[str]:
        return [
            cid
            for cid, c in self.concepts.items()
            if not c.obsolete and not self.parent_edges.get(cid)
        ]

    def root_layer(self) -> list[str]:
        """The top candidate layer for descent.

        A single universal root (e.g. DO's "disease") is skipped in favour of
        its children; a forest returns its roots.
        """
        roots = self.roots
        if not roots:
            raise OntologyError("ontology has no (non-obsolete) concepts")
        if len(roots) == 1:
            kids = self.children(roots[0])
            if kids:
                return kids
        return roots

    def find_child_by_name(self, parent: str, name: str) -> str | None:
        key = normalize_name(name)
        for cid in self.child_edges.get(parent, ()):
            if normalize_name(self.concepts[cid].name) == key:
                return cid
        return None

    def node_depth(self, concept_id: str) -> int:
        """Longest edge distance from any root down to ``concept_id``."""
        self[concept_id]
        memo: dict[str, int] = {}
        stack = [concept_id]
        while stack:
            cid = stack[-1]
            pending = [p for p in self.parent_edges.get(cid, ()) if p not in memo]
            if pending:
                stack.extend(pending)
                continue
            stack.pop()
            memo[cid] = max((memo[p] + 1 for p in self.parent_edges.get(cid, ())), default=0)
        return memo[concept_id]

    def _new_id(self) -> str:
        while True:
            cid = f"{INSERTED_PREFIX}{self._next_serial:07d}"
            self._next_serial += 1
            if cid not in self.concepts:
                return cid

    def insert_child(self, parent: str, name: str, trace_ref: str = "") -> InsertionRecord:
        """Add a new concept named ``name`` as the sole child-edge target of ``parent``."""
        clean = " ".join(name.split())
        if not clean:
            raise ValueError("inserted concept name must be non-empty")
        with self._lock:
            self[parent]
            existing = self.find_child_by_name(parent, clean)
            if existing is not None:
                raise DuplicateInsertionError(parent, clean, existing)
            new_id = self._new_id()
            self.add_concept(Concept(new_id, clean, origin=Origin.INSERTED))
            self.add_edge(parent, new_id)
            return InsertionRecord(clean, new_id, parent, self.node_depth(parent), trace_ref)

    def copy(self) -> "Ontology":
        other = Ontology()
        for c in self.concepts.values():
            other.concepts[c.id] = Concept(c.id, c.name, list(c.synonyms), c.obsolete, c.origin)
        other.child_edges = {p: list(k) for p, k in self.child_edges.items()}
        other.parent_edges = {c: list(p) for c, p in self.parent_edges.items()}
        other._next_serial = self._next_serial
        return other

    def _kahn(self) -> list[str]:
        indegree = {cid: 0 for cid in self.concepts}
        for _, child in self.edges():
            if child in indegree:
                indegree[child] += 1
        queue = deque(cid for cid, d in indegree.items() if d == 0)
        order = []
        while queue:
            cid = queue.popleft()
            order.append(cid)
            for child in self.child_edges.get(cid, ()):
                if child in indegree:
                    indegree[child] -= 1
                    if indegree[child] == 0:
                        queue.append(child)
        return order

    def topological_order(self) -> list[str] | None:
        """Kahn ordering over child edges, or None if a cycle exists."""
        order = self._kahn()
        return order if len(order) == len(self.concepts) else None

    def validate(self) -> ValidationReport:
        dangling = [
            (p, c) for p, c in self.edges() if p not in self.concepts or c not in self.concepts
        ]
        order = self._kahn()
        acyclic = len(order) == len(self.concepts)
        depth = 0
        cycle_nodes: list[str] = []
        if acyclic:
            levels: dict[str, int] = {}
            for cid in order:
                levels[cid] = max(
                    (levels[p] + 1 for p in self.parent_edges.get(cid, ()) if p in levels),
                    default=1,
                )
            depth = max(levels.values(), default=0)
        else:
            # nodes Kahn never releases sit on or below a cycle
            released = set(order)
            cycle_nodes = sorted(cid for cid in self.concepts if cid not in released)
        return ValidationReport(
            acyclic=acyclic,
            dangling_edges=dangling,
            depth=depth,
            concept_count=len(self.concepts),
            edge_count=self.edge_count,
            cycle_nodes=cycle_nodes,
        )

    @property
    def depth(self) -> int:
        """Number of levels on the longest root-to-leaf path."""
        return self.validate().depth


# --------------------------------------------------------------------------
# OBO I/O
# --------------------------------------------------------------------------

_SYNONYM_RE = re.compile(r'^"((?:[^"\\]|\\.)*)"')
_TAG_RE = re.compile(r"^([A-Za-z_][\w-]*):\s?(.*)$")


def _strip_trailing_comment(value: str) -> str:
    # OBO trailing modifiers `{...}` and comments ` ! ...`
    value = re.sub(r"\s\{[^}]*\}\s*$", "", value)
    bang = value.find(" !")
    if bang >= 0:
        value = value[:bang]
    return value.strip()


def _unescape(value: str) -> str:
    return re.sub(r"\\(.)", lambda m: {"n": "\n", "t": "\t"}.get(m.group(1), m.group(1)), value)


def parse_obo(source: IO[str] | str | Iterable[str]) -> Ontology:
    """Parse the ``[Term]`` stanzas of an OBO flat file.

    Only ``id``, ``name``, ``is_a``, ``synonym`` and ``is_obsolete`` are read;
    other stanza types and tags are ignored. ``is_a`` targets that are not
    defined in the file are dropped with a warning.

    Raises:
        OboParseError: a term lacks ``id`` or ``name``, or an id repeats.
        ValidationError: the loaded hierarchy contains a cycle.
    """
    if isinstance(source, str):
        source = io.StringIO(source)

    onto = Ontology()
    pending_edges: list[tuple[str, str, int]] = []
    term: dict | None = None

    def close(stanza: dict | None) -> None:
        if stanza is None:
            return
        start = stanza["line"]
        if not stanza.get("id"):
            raise OboParseError("[Term] stanza has no id", start)
        if not stanza.get("name"):
            raise OboParseError(f"[Term] {stanza['id']} has no name", start)
        if stanza["id"] in onto.concepts:
            raise OboParseError(f"duplicate term id {stanza['id']}", start)
        onto.add_concept(
            Concept(stanza["id"], stanza["name"], stanza["synonyms"], stanza["obsolete"])
        )
        for parent, lineno in stanza["is_a"]:
            pending_edges.append((parent, stanza["id"], lineno))

    for lineno, raw in enumerate(source, 1):
        line = raw.strip()
        if not line or line.startswith("!"):
            continue
        if line.startswith("[") and line.endswith("]"):
            close(term)
            term = (
                {"line": lineno, "id": None, "name": None, "synonyms": [], "obsolete": False, "is_a": []}
                if line == "[Term]"
                else None
            )
            continue
        if term is None:
            continue
        m = _TAG_RE.match(line)
        if not m:
            raise OboParseError(f"malformed tag-value line {line!r}", lineno)
        tag, value = m.group(1), m.group(2)
        if tag == "id":
            term["id"] = _strip_trailing_comment(value)
        elif tag == "name":
            term["name"] = _unescape(value.strip())
        elif tag == "is_a":
            target = _strip_trailing_comment(value).split()
            if not target:
                raise OboParseError("empty is_a", lineno)
            term["is_a"].append((target[0], lineno))
        elif tag == "synonym":
            sm = _SYNONYM_RE.match(value.strip())
            if sm:
                term["synonyms"].append(_unescape(sm.group(1)))
        elif tag == "is_obsolete":
            term["obsolete"] = value.strip().lower() == "true"
    close(term)

    for parent, child, lineno in pending_edges:
        if parent not in onto.concepts:
            logger.warning("line %d: is_a target %s of %s is not defined; edge dropped", lineno, parent, child)
            continue
        onto.add_edge(parent, child)

    if onto.topological_order() is None:
        report = onto.validate()
        raise ValidationError(f"cycle detected among {', '.join(report.cycle_nodes[:10])}")
    return onto


def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace("\n", "\\n").replace('"', '\\"')


def _term_stanza(onto: Ontology, concept: Concept) -> str:
    lines = ["[Term]", f"id: {concept.id}", f"name: {concept.name}"]
    for syn in concept.synonyms:
        lines.append(f'synonym: "{_escape(syn)}" EXACT []')
    for parent in onto.parent_edges.get(concept.id, ()):
        lines.append(f"is_a: {parent} ! {onto.concepts[parent].name}")
    if concept.obsolete:
        lines.append("is_obsolete: true")
    return "\n".join(lines) + "\n"


def dump_obo(onto: Ontology, sink: IO[str], concept_ids: Iterable[str] | None = None) -> None:
    """Write ``[Term]`` stanzas (all concepts by default) in insertion order."""
    sink.write("format-version: 1.2\n")
    ids = list(onto.concepts) if concept_ids is None else list(concept_ids)
    for cid in ids:
        sink.write("\n")
        sink.write(_term_stanza(onto, onto[cid]))


def serialize_extension(
    onto: Ontology,
    records: list[InsertionRecord],
    sink: IO[str],
    obo_sink: IO[str] | None = None,
) -> None:
    """Write insertion records as JSON lines and, optionally, their OBO stanzas.

    Output depends only on the arguments, so identical inputs give identical bytes.
    """
    for rec in records:
        parent = onto[rec.parent_id]
        row = {
            "new_entity": rec.new_entity,
            "new_id": rec.new_id,
            "parent_id": rec.parent_id,
            "parent_name": parent.name,
            "layer": rec.layer,
        }
        sink.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    if obo_sink is not None:
        obo_sink.write(f"! ontology extension: {len(records)} inserted term(s)\n")
        dump_obo(onto, obo_sink, [r.new_id for r in records])
