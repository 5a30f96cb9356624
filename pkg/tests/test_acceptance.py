"""Acceptance gate: eight end-to-end criteria, each with a runtime budget.

Every criterion prints one PASS/FAIL line. Run standalone with
``python3 tests/test_acceptance.py`` or through pytest.
"""

from __future__ import annotations

import io
import math
import random
import re
import string
import sys
import tempfile
import time
from collections import Counter
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import DATA, DISEASES, NOTES, PHI, THREE_LAYER, SimulatedAgents, three_layer_obo  # noqa: E402

from ontoext.deid import ClinicalNote, PhiCategory, PhiInventory, mask  # noqa: E402
from ontoext.evalkit import JudgeLabel, JudgeVerdict, fuzzy_ratio, judge_precision, match_at  # noqa: E402
from ontoext.extend import OutcomeKind, extend_all  # noqa: E402
from ontoext.gateway import Gateway, ProviderConfig, ScriptedBackend  # noqa: E402
from ontoext.metrics import harmonic  # noqa: E402
from ontoext.ontology import Concept, Ontology, dump_obo, parse_obo  # noqa: E402
from ontoext.pipeline import PipelineConfig, run_all  # noqa: E402

SCRIPTED = ProviderConfig(model="scripted", kind="scripted", embed_fallback="trigram")


def scripted(responder=None, embeddings=None) -> Gateway:
    backend = ScriptedBackend(embeddings=embeddings, responder=responder, embed_fallback="trigram")
    return Gateway(SCRIPTED, backend=backend, sleep=lambda s: None)


_REL = re.compile(r'New concept: "(.*)"\nExisting ontology concept: "(.*?)"')


# --------------------------------------------------------------------------
# 1. judge precision on published verdict counts
# --------------------------------------------------------------------------

# (correct, incorrect, not sure) -> precision, one row per judged system
JUDGE_ROWS = [((617, 158, 106), 79.613), ((293, 461, 99), 38.859), ((268, 463, 53), 36.662), ((241, 318, 322), 43.113)]


def criterion_1():
    got = []
    for (c, i, n), want in JUDGE_ROWS:
        verdicts = (
            [JudgeVerdict(JudgeLabel.CORRECT, "x", "y")] * c
            + [JudgeVerdict(JudgeLabel.INCORRECT, "x", "y")] * i
            + [JudgeVerdict(JudgeLabel.NOT_SURE, "x", "y")] * n
        )
        p = judge_precision(verdicts)
        got.append(p)
        if abs(p - want) > 0.001:
            return False, f"{c}/{c + i} gave {p:.4f}, expected {want}"
    return True, "precisions " + ", ".join(f"{p:.3f}" for p in got)


# --------------------------------------------------------------------------
# 2. harmonic F1 of published precision/recall pairs
# --------------------------------------------------------------------------

# threshold -> (precision, recall, published F1)
PR_ROWS = {60: (0.2120, 0.3528, 0.2649), 70: (0.1932, 0.3215, 0.2414), 80: (0.1606, 0.2672, 0.2006)}


def criterion_2():
    worst = 0.0
    for t, (p, r, f1) in PR_ROWS.items():
        diff = abs(harmonic(p, r) - f1)
        worst = max(worst, diff)
        if diff > 0.0001:
            return False, f"T={t}: harmonic({p}, {r}) = {harmonic(p, r):.5f}, published {f1}"
    return True, f"max deviation {worst:.6f}"


# --------------------------------------------------------------------------
# 3. placement equals an independent walk of the scripted transcript
# --------------------------------------------------------------------------

ENTITIES = [
    "latent tuberculosis", "pulmonary tuberculosis", "avian influenza", "seasonal influenza",
    "bacterial sepsis", "viral hepatitis", "inflammatory breast cancer", "lobular carcinoma",
    "lung adenocarcinoma", "non-small cell lung cancer", "gestational diabetes", "type 1 diabetes mellitus",
    "familial hypercholesterolemia", "hypertriglyceridemia", "metabolic syndrome", "gout",
    "cancer", "influenza", "oral cancer", "ketoacidosis",
]
REPLY_FORMS = ["{}", "{}.", "Answer: {}", "```\n{}\n```", "The relationship is **{}**.", "{} - based on the hierarchy"]
DIM = 8


def _transcript(seed: int = 7):
    rng = random.Random(seed)
    names = [n for root, kids in THREE_LAYER.items() for n in [root, *kids, *(g for gs in kids.values() for g in gs)]]
    embeddings = {n: [rng.gauss(0, 1) for _ in range(DIM)] for n in names + ENTITIES}
    verdicts = {}
    for e in ENTITIES:
        for a in names + ENTITIES:
            verdicts[(e, a)] = rng.choices(["Subsetting", "Neither", "Equivalence"], weights=[5, 3, 1])[0]
    forms = {key: rng.choice(REPLY_FORMS) for key in verdicts}
    return embeddings, verdicts, forms


def _oracle_walk(embeddings, verdicts, guard):
    """Brute-force replay on plain lists: no ontology code, no numpy.

    Returns (outcome, parent or matched name, anchor names visited) per entity.

    Nodes are (name, serial) pairs so an entity sharing a seed concept's
    name stays a separate node.
    """
    kids: dict[tuple[str, int], list[tuple[str, int]]] = {}
    top = []
    for root, children in THREE_LAYER.items():
        r = (root, len(kids))
        kids[r] = []
        top.append(r)
        for child, grandchildren in children.items():
            c = (child, len(kids))
            kids[c] = []
            kids[r].append(c)
            for g in grandchildren:
                node = (g, len(kids))
                kids[node] = []
                kids[c].append(node)

    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    placements = []
    for e in ENTITIES:
        layer, path = top, []
        while True:
            if len(path) >= guard:
                placements.append(("failed", None, path))
                break
            scores = [cos(embeddings[e], embeddings[name]) for name, _ in layer]
            anchor = layer[scores.index(max(scores))]
            path.append(anchor[0])
            v = verdicts[(e, anchor[0])]
            if v == "Equivalence":
                placements.append(("present", anchor[0], path))
                break
            if v == "Subsetting" and kids[anchor]:
                layer = kids[anchor]
                continue
            if any(name.lower() == e.lower() for name, _ in kids[anchor]):
                placements.append(("present", e, path))
            else:
                node = (e, len(kids))
                kids[node] = []
                kids[anchor].append(node)
                placements.append(("inserted", anchor[0], path))
            break
    return placements


def criterion_3():
    embeddings, verdicts, forms = _transcript()

    def responder(ex):
        m = _REL.search(ex.user_prompt)
        key = (m.group(1), m.group(2))
        return forms[key].format(verdicts[key])

    onto = parse_obo(three_layer_obo())
    if len(onto) != 15 or onto.depth != 3:
        return False, "fixture is not a 3-layer, 15-concept ontology"
    extended, traces = extend_all(ENTITIES, onto, scripted(responder, embeddings))
    got = []
    for t in traces:
        path = [extended[s.anchor_id].name for s in t.steps]
        if t.outcome.kind is OutcomeKind.INSERTED:
            got.append(("inserted", extended[t.record.parent_id].name, path))
        elif t.outcome.kind is OutcomeKind.ALREADY_PRESENT:
            got.append(("present", extended[t.outcome.concept_id].name, path))
        else:
            got.append(("failed", None, path))
    want = _oracle_walk(embeddings, verdicts, guard=onto.depth + 8)
    matches = sum(g == w for g, w in zip(got, want))
    kinds = Counter(k for k, _, _ in want)
    deepest = max(len(t.steps) for t in traces)
    detail = f"{matches}/{len(ENTITIES)} placements match ({dict(kinds)}, deepest walk {deepest} steps)"
    return matches == len(ENTITIES) == len(got), detail


# --------------------------------------------------------------------------
# 4. hierarchy invariants under random insertion sequences
# --------------------------------------------------------------------------


def _random_dag(rng: random.Random, n: int) -> Ontology:
    onto = Ontology()
    for i in range(n):
        onto.add_concept(Concept(f"R:{i}", f"concept {i} {rng.choice(string.ascii_lowercase) * 3}"))
    for child in range(1, n):
        if rng.random() < 0.15:
            continue  # leaves some extra roots
        for parent in rng.sample(range(child), k=min(child, rng.randint(1, 3))):
            onto.add_edge(f"R:{parent}", f"R:{child}")
    return onto


def _acyclic(onto: Ontology) -> bool:
    state: dict[str, int] = {}

    def visit(node) -> bool:
        state[node] = 1
        for k in onto.child_edges.get(node, []):
            if state.get(k) == 1 or (k not in state and not visit(k)):
                return False
        state[node] = 2
        return True

    return all(visit(n) for n in onto.concepts if n not in state)


def criterion_4(sequences: int = 500):
    total_inserted = 0
    for seq in range(sequences):
        rng = random.Random(seq)
        seed_onto = _random_dag(rng, rng.randint(1, 25))
        before_edges = set(seed_onto.edges())
        n_concepts, depth = len(seed_onto), seed_onto.depth
        entities = [f"entity {seq} {k} {rng.choice(string.ascii_lowercase) * 2}" for k in range(rng.randint(0, 10))]
        verdict_rng = random.Random(seq + 10**6)

        def responder(ex, r=verdict_rng):
            return r.choice(["Subsetting", "Subsetting", "Neither", "Equivalence"])

        extended, traces = extend_all(entities, seed_onto, scripted(responder))
        inserted = sum(t.outcome.kind is OutcomeKind.INSERTED for t in traces)
        total_inserted += inserted
        ext_edges = extended.edges()
        problems = []
        if not _acyclic(extended):
            problems.append("cycle")
        if len(extended) != n_concepts + inserted:
            problems.append(f"|E~|={len(extended)} vs {n_concepts}+{inserted}")
        if len(ext_edges) - len(before_edges) != inserted:
            problems.append(f"edge growth {len(ext_edges) - len(before_edges)} vs {inserted}")
        if extended.depth < depth:
            problems.append(f"depth fell {depth}->{extended.depth}")
        if not before_edges <= set(ext_edges):
            problems.append("seed edge lost")
        if len(seed_onto) != n_concepts:
            problems.append("seed ontology mutated")
        if problems:
            return False, f"sequence {seq}: {', '.join(problems)}"
    return True, f"{sequences} sequences, {total_inserted} insertions, invariants held"


# --------------------------------------------------------------------------
# 5. masking completeness and idempotence
# --------------------------------------------------------------------------

_FIRST = ["John", "Ann", "Maria", "Kim", "Lee", "Omar", "Priya", "Wei", "Fatima", "Jose"]
_LAST = ["Smith", "Patel", "Nguyen", "Garcia", "Okafor", "Cohen", "Kowalski", "Haddad"]
_CITY = ["Decatur", "Marietta", "Athens", "Savannah", "Macon", "Roswell"]
_ORG = ["Mercy Hospital", "Grady Clinic", "St. Luke's Medical Center", "Northside Urgent Care"]
_JOB = ["teacher", "electrician", "nurse practitioner", "truck driver", "accountant"]
_CLINICAL = [
    "Presents with cough and fever.", "Lungs clear bilaterally.", "Denies chest pain.",
    "Continue metformin.", "Follow up in two weeks.", "Labs pending.", "No acute distress.",
]


def _synthetic_note(rng: random.Random, idx: int) -> tuple[ClinicalNote, PhiInventory]:
    person = f"{rng.choice(_FIRST)} {rng.choice(_LAST)}"
    doctor = rng.choice(_LAST)
    phi = {
        PhiCategory.PERSON: [person, doctor],
        PhiCategory.LOCATION: [rng.choice(_CITY)],
        PhiCategory.ORGANIZATION: [rng.choice(_ORG)],
        PhiCategory.AGE: [str(rng.randint(18, 95))],
        PhiCategory.PHONE_NUMBER: [f"({rng.randint(200, 999)}) {rng.randint(200, 999)}-{rng.randint(1000, 9999)}"],
        PhiCategory.EMAIL: [f"{person.split()[0].lower()}{rng.randint(1, 99)}@mail.example.org"],
        PhiCategory.DATE_AND_TIME: [f"{rng.randint(1, 12):02d}/{rng.randint(1, 28):02d}/20{rng.randint(10, 24)}"],
        PhiCategory.ZIP: [str(rng.randint(30000, 31999))],
        PhiCategory.PROFESSION: [rng.choice(_JOB)],
        PhiCategory.USERNAME: [f"user_{rng.randint(1000, 9999)}"],
        PhiCategory.ID: [f"MRN{rng.randint(100000, 999999)}"],
        PhiCategory.URL: [f"https://portal.example.org/p/{rng.randint(100, 999)}"],
    }
    sentences = [
        f"Patient {person}, age {phi[PhiCategory.AGE][0]}, works as a {phi[PhiCategory.PROFESSION][0]}.",
        f"Seen at {phi[PhiCategory.ORGANIZATION][0]} in {phi[PhiCategory.LOCATION][0]} {phi[PhiCategory.ZIP][0]} "
        f"on {phi[PhiCategory.DATE_AND_TIME][0]} by Dr. {doctor}.",
        f"Contact {phi[PhiCategory.PHONE_NUMBER][0]} or {phi[PhiCategory.EMAIL][0]}; portal login "
        f"{phi[PhiCategory.USERNAME][0]} at {phi[PhiCategory.URL][0]}.",
        f"Record {phi[PhiCategory.ID][0]}.",
        f"{person.upper()} agreed with the plan; {doctor.lower()} to review.",
    ]
    sentences += rng.sample(_CLINICAL, 3)
    rng.shuffle(sentences)
    note = ClinicalNote(f"syn{idx:02d}", " ".join(sentences))
    return note, PhiInventory(note.note_id, phi)


def criterion_5(n: int = 50):
    rng = random.Random(5)
    clean = idempotent = 0
    for i in range(n):
        note, inv = _synthetic_note(rng, i)
        once = mask(note, inv).masked_text
        low = once.lower()
        if not any(s.lower() in low for _, s in inv.items()):
            clean += 1
        if mask(ClinicalNote(note.note_id, once), inv).masked_text == once:
            idempotent += 1
    return clean == idempotent == n, f"no surviving PHI {clean}/{n}, idempotent {idempotent}/{n}"


# --------------------------------------------------------------------------
# 6. fuzzy metric properties
# --------------------------------------------------------------------------

FIXTURE_PREDICTIONS = [
    "pneumonia", "community acquired pneumonia", "type 2 diabetes", "hypertension", "asthma exacerbation",
    "breast cancer", "anemia", "ckd stage 3", "migraine headaches", "sepsis", "copd",
]
FIXTURE_REFERENCE = [
    "pneumonia", "type 2 diabetes mellitus", "hypertension", "asthma", "breast cancer",
    "anemia", "chronic kidney disease", "migraine", "chronic obstructive pulmonary disease",
]


def criterion_6(pairs: int = 1000):
    rng = random.Random(6)
    alphabet = string.ascii_letters + "  -'"
    for _ in range(pairs):
        a = "".join(rng.choices(alphabet, k=rng.randint(0, 30)))
        b = a if rng.random() < 0.1 else "".join(rng.choices(alphabet, k=rng.randint(0, 30)))
        if fuzzy_ratio(a, b) != fuzzy_ratio(b, a):
            return False, f"asymmetric on {a!r}, {b!r}"
        if fuzzy_ratio(a, a) != 100:
            return False, f"self-similarity below 100 on {a!r}"
    tps = [match_at(FIXTURE_PREDICTIONS, FIXTURE_REFERENCE, t).tp for t in range(0, 101, 5)]
    if tps != sorted(tps, reverse=True):
        return False, f"TP counts not monotone: {tps}"
    for _ in range(200):
        preds = rng.sample(FIXTURE_PREDICTIONS, rng.randint(0, len(FIXTURE_PREDICTIONS)))
        refs = rng.sample(FIXTURE_REFERENCE, rng.randint(0, len(FIXTURE_REFERENCE)))
        counts = [match_at(preds, refs, t).tp for t in (60, 70, 80, 90, 100)]
        if counts != sorted(counts, reverse=True):
            return False, f"TP counts not monotone on subsample: {counts}"
    return True, f"{pairs} pairs symmetric, self=100; fixture TP by threshold {tps[12:]} (T=60..100)"


# --------------------------------------------------------------------------
# 7. determinism of the full pipeline
# --------------------------------------------------------------------------


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def criterion_7():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        notes = tmp / "notes"
        notes.mkdir()
        for note_id, text in NOTES.items():
            (notes / f"{note_id}.txt").write_text(text, encoding="utf-8")
        trees = []
        for run in ("a", "b"):
            agents = SimulatedAgents({NOTES[k]: v for k, v in PHI.items()}, DISEASES)
            gw = scripted(agents)
            config = PipelineConfig(
                notes=notes, ontology=DATA / "do_excerpt.obo", output=tmp / run,
                chat=SCRIPTED, embedding=SCRIPTED, judge=SCRIPTED, workers=4,
            )
            run_all(config, {"chat": gw, "embedding": gw, "judge": gw})
            trees.append(_tree(tmp / run))
    a, b = trees
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    if differing:
        return False, f"outputs differ: {differing[:5]}"
    return True, f"{len(a)} output files byte-identical across two runs"


# --------------------------------------------------------------------------
# 8. OBO round trip
# --------------------------------------------------------------------------


def _multisets(onto: Ontology):
    return (
        Counter(onto.concepts),
        Counter((c.id, c.name) for c in onto.concepts.values()),
        Counter(onto.edges()),
    )


def criterion_8():
    with open(DATA / "do_excerpt.obo", encoding="utf-8") as fh:
        first = parse_obo(fh)
    buf = io.StringIO()
    dump_obo(first, buf)
    second = parse_obo(buf.getvalue())
    ids, names, is_a = _multisets(first)
    same = (ids, names, is_a) == _multisets(second)
    return same and len(ids) == 200, f"{len(ids)} terms, {sum(is_a.values())} is_a edges, round trip {'identical' if same else 'DIFFERS'}"


# --------------------------------------------------------------------------

CRITERIA = [
    (1, "judge precision on published counts", criterion_1, 1.0),
    (2, "harmonic F1 of published Pr/Re pairs", criterion_2, 1.0),
    (3, "extension matches brute-force walk", criterion_3, 5.0),
    (4, "hierarchy invariants under fuzzing", criterion_4, 30.0),
    (5, "masking completeness and idempotence", criterion_5, 5.0),
    (6, "fuzzy metric properties", criterion_6, 10.0),
    (7, "pipeline determinism", criterion_7, 30.0),
    (8, "OBO round trip", criterion_8, 5.0),
]


def evaluate(number, title, fn, budget):
    start = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # reported as a failure line, then re-raised by the test
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    elapsed = time.perf_counter() - start
    in_time = elapsed < budget
    verdict = "PASS" if ok and in_time else "FAIL"
    line = f"[{verdict}] criterion {number}: {title}: {detail} ({elapsed:.2f}s, budget {budget:.0f}s)"
    return ok, in_time, line


@pytest.mark.parametrize("number, title, fn, budget", CRITERIA, ids=[f"criterion_{c[0]}" for c in CRITERIA])
def test_criterion(number, title, fn, budget, capsys):
    ok, in_time, line = evaluate(number, title, fn, budget)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line
    assert in_time, line


if __name__ == "__main__":
    results = [evaluate(*c) for c in CRITERIA]
    for _, _, line in results:
        print(line)
    sys.exit(0 if all(ok and t for ok, t, _ in results) else 1)
