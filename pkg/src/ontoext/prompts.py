"""Prompt templates for the four agents.

Scripted fixtures are keyed on the rendered prompts, so any wording change
here invalidates recorded fixture directories.
"""

from __future__ import annotations

PHI_CATEGORIES = (
    "person",
    "location",
    "organization",
    "age",
    "phone number",
    "email",
    "date and time",
    "zip",
    "profession",
    "username",
    "id",
    "url",
)

DEID_SYSTEM = (
    "You are a careful clinical privacy officer. You find protected health "
    "information (PHI) in clinical notes so that it can be removed."
)

DEID_USER = """Extract every piece of protected health information from the clinical note below.
Use exactly these PHI categories: {categories}.
Copy each item verbatim from the note. If a category has no items, give an empty list.
Return a single JSON object mapping each category to a list of strings, and nothing else.

Clinical note:
\"\"\"
{text}
\"\"\""""

EXTRACT_SYSTEM = (
    "You are an experienced clinician reviewing de-identified clinical notes. "
    "You recognise disease entities precisely and ignore everything else."
)

EXTRACT_USER = """List every disease mentioned in the de-identified clinical note below.
Only include diseases and disorders: no symptoms, medications, procedures, tests or anatomy.
Ignore bracketed placeholders such as [PERSON] or [DATE AND TIME].
Return a flat JSON list of unique disease names as strings, and nothing else.

Clinical note:
\"\"\"
{text}
\"\"\""""

RELATION_SYSTEM = (
    "You are a biomedical ontology curator deciding where a new disease concept "
    "belongs in the Disease Ontology hierarchy."
)

RELATION_USER = """New concept: "{entity}"
Existing ontology concept: "{anchor}"{parent_line}

Decide the relationship between the new concept and the existing concept:
- Equivalence: they refer to the same medical concept.
- Subsetting: the new concept is a more specific kind of the existing concept.
- Neither: they are not hierarchically related.

Answer with exactly one word: Equivalence, Subsetting, or Neither."""

JUDGE_SYSTEM = (
    "You are an expert reviewer of biomedical ontologies. You check whether newly "
    "added parent-child relationships in a disease ontology are correct."
)

JUDGE_USER = """A new node was added to the Disease Ontology.
New node: "{new_node}"
Node from the original ontology: "{parent}"
Relationship: "{new_node}" {relation} "{parent}"

Is this relationship correct? Answer with exactly one of: Correct, Incorrect, Not Sure."""


def deid_prompt(text: str) -> tuple[str, str]:
    return DEID_SYSTEM, DEID_USER.format(categories=", ".join(PHI_CATEGORIES), text=text)


def extract_prompt(text: str) -> tuple[str, str]:
    return EXTRACT_SYSTEM, EXTRACT_USER.format(text=text)


def relation_prompt(entity: str, anchor: str, parent: str | None = None) -> tuple[str, str]:
    parent_line = f'\nIts parent in the ontology: "{parent}"' if parent else ""
    return RELATION_SYSTEM, RELATION_USER.format(entity=entity, anchor=anchor, parent_line=parent_line)


def judge_prompt(new_node: str, parent: str, relation: str = "is-a") -> tuple[str, str]:
    return JUDGE_SYSTEM, JUDGE_USER.format(new_node=new_node, parent=parent, relation=relation)
