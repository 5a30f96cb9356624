"""Extend a disease ontology with entities mined from de-identified clinical notes."""

__version__ = "0.1.0"

from .ontology import Concept, InsertionRecord, Ontology, parse_obo, serialize_extension  # noqa: E402
from .gateway import ChatExchange, Gateway, ProviderConfig, ScriptedBackend  # noqa: E402
from .deid import ClinicalNote, PhiCategory, PhiInventory, extract_phi, mask  # noqa: E402
from .entities import CandidateEntitySet, extract_diseases, merge_candidates  # noqa: E402
from .extend import Relation, cosine, extend_all, extend_one, nearest  # noqa: E402
from .evalkit import build_reference, fuzzy_ratio, judge_precision, prf_at, scan_occurrence  # noqa: E402

__all__ = [
    "CandidateEntitySet",
    "ChatExchange",
    "ClinicalNote",
    "Concept",
    "Gateway",
    "InsertionRecord",
    "Ontology",
    "PhiCategory",
    "PhiInventory",
    "ProviderConfig",
    "Relation",
    "ScriptedBackend",
    "build_reference",
    "cosine",
    "extend_all",
    "extend_one",
    "extract_diseases",
    "extract_phi",
    "fuzzy_ratio",
    "judge_precision",
    "mask",
    "merge_candidates",
    "nearest",
    "parse_obo",
    "prf_at",
    "scan_occurrence",
    "serialize_extension",
]
