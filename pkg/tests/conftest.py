from __future__ import annotations

import json
import re
from pathlib import Path

import pytest

from ontoext.gateway import ChatExchange, Gateway, ProviderConfig, ScriptedBackend
from ontoext.ontology import Ontology, parse_obo

DATA = Path(__file__).parent / "data"

TINY_OBO = """format-version: 1.2

[Term]
id: DOID:4
name: disease

[Term]
id: DOID:14566
name: disease of cellular proliferation
is_a: DOID:4 ! disease

[Term]
id: DOID:162
name: cancer
synonym: "malignant neoplasm" EXACT []
is_a: DOID:14566 ! disease of cellular proliferation

[Term]
id: DOID:1612
name: breast cancer
is_a: DOID:162 ! cancer

[Term]
id: DOID:7
name: disease of anatomical entity
is_a: DOID:4 ! disease
"""

# three roots, two children each, one grandchild per child: 15 concepts, 3 layers
THREE_LAYER = {
    "infectious disease": {"bacterial infection": ["tuberculosis"], "viral infection": ["influenza"]},
    "cancer": {"breast cancer": ["ductal carcinoma"], "lung cancer": ["small cell lung cancer"]},
    "metabolic disease": {"diabetes mellitus": ["type 2 diabetes mellitus"], "lipid disorder": ["hypercholesterolemia"]},
}


def three_layer_obo() -> str:
    out = ["format-version: 1.2", ""]
    n = 0

    def term(name, parent):
        nonlocal n
        n += 1
        cid = f"T:{n:03d}"
        out.extend(["[Term]", f"id: {cid}", f"name: {name}"])
        if parent:
            out.append(f"is_a: {parent}")
        out.append("")
        return cid

    for root, kids in THREE_LAYER.items():
        rid = term(root, None)
        for kid, grandkids in kids.items():
            kid_id = term(kid, rid)
            for g in grandkids:
                term(g, kid_id)
    return "\n".join(out)


@pytest.fixture
def tiny() -> Ontology:
    return parse_obo(TINY_OBO)


@pytest.fixture
def three_layer() -> Ontology:
    return parse_obo(three_layer_obo())


@pytest.fixture
def do_excerpt() -> Ontology:
    with open(DATA / "do_excerpt.obo", encoding="utf-8") as fh:
        return parse_obo(fh)


def scripted_gateway(backend: ScriptedBackend, **config) -> Gateway:
    return Gateway(ProviderConfig(model="scripted", kind="scripted", **config), backend=backend, sleep=lambda s: None)


def by_name(onto: Ontology, name: str) -> str:
    for cid, c in onto.concepts.items():
        if c.name == name:
            return cid
    raise KeyError(name)


# --------------------------------------------------------------------------
# rule-based stand-ins for the four agents, used by end-to-end tests
# --------------------------------------------------------------------------

_NOTE_RE = re.compile(r'Clinical note:\n"""\n(.*)\n"""', re.DOTALL)
_REL_RE = re.compile(r'New concept: "(.*)"\nExisting ontology concept: "(.*?)"')
_JUDGE_RE = re.compile(r'New node: "(.*)"\nNode from the original ontology: "(.*)"')


class SimulatedAgents:
    """Deterministic responders keyed on prompt content."""

    def __init__(self, phi_by_text: dict[str, dict], diseases: list[str]):
        self.phi_by_text = phi_by_text
        self.diseases = diseases

    def __call__(self, exchange: ChatExchange) -> str:
        user = exchange.user_prompt
        if "protected health information" in user:
            text = _NOTE_RE.search(user).group(1)
            return "```json\n" + json.dumps(self.phi_by_text.get(text, {})) + "\n```"
        if "List every disease" in user:
            text = _NOTE_RE.search(user).group(1).lower()
            found = [d for d in self.diseases if d.lower() in text]
            return "Diseases found: " + json.dumps(found)
        m = _REL_RE.search(user)
        if m:
            entity, anchor = m.group(1).lower(), m.group(2).lower()
            if entity == anchor:
                return "Equivalence"
            if set(anchor.split()) <= set(entity.split()):
                return "Subsetting"
            return "Neither"
        m = _JUDGE_RE.search(user)
        if m:
            new, parent = m.group(1).lower(), m.group(2).lower()
            if set(parent.split()) <= set(new.split()):
                return "Correct"
            if len(new) % 3 == 0:
                return "Not Sure"
            return "Incorrect"
        raise AssertionError(f"unexpected prompt: {user[:80]}")


NOTES = {
    "note01": (
        "Patient John Smith, 45, seen on 3/2/2021 at Mercy Hospital.\n"
        "History of type 2 diabetes mellitus and hypertension. Now presents with "
        "community-acquired pneumonia. Call 555-123-4567 with results."
    ),
    "note02": (
        "Ms. Ann Lee (MRN 889231) was evaluated by Dr. Patel in Annville.\n"
        "Findings consistent with triple-negative breast cancer. Prior asthma. "
        "Email ann.lee@example.com for follow-up."
    ),
    "note03": (
        "Follow-up for chronic kidney disease stage 3 and anemia.\n"
        "Reports intermittent migraine. Seen 04/05/2022 by nurse practitioner Kim."
    ),
}

PHI = {
    "note01": {"person": ["John Smith"], "age": ["45"], "date and time": ["3/2/2021"],
               "organization": ["Mercy Hospital"], "phone number": ["555-123-4567"]},
    "note02": {"person": ["Ann Lee", "Patel"], "id": ["889231"], "location": ["Annville"],
               "email": ["ann.lee@example.com"], "name": ["Ann"]},
    "note03": {"date and time": ["04/05/2022"], "person": ["Kim"], "profession": ["nurse practitioner"]},
}

DISEASES = [
    "type 2 diabetes mellitus", "hypertension", "community-acquired pneumonia",
    "triple-negative breast cancer", "asthma", "chronic kidney disease stage 3", "anemia", "migraine",
]


@pytest.fixture
def notes_dir(tmp_path) -> Path:
    d = tmp_path / "notes"
    d.mkdir()
    for note_id, text in NOTES.items():
        (d / f"{note_id}.txt").write_text(text, encoding="utf-8")
    return d


@pytest.fixture
def agents() -> SimulatedAgents:
    return SimulatedAgents({NOTES[k]: v for k, v in PHI.items()}, DISEASES)
