"""Staged, resumable pipeline: deid -> extract -> extend -> eval, then report.

Every stage writes its outputs atomically under ``<output>/<stage>/`` and a
``manifest.json`` recording per-item status plus a hash of its inputs. A
stage whose inputs hash the same as the recorded run, and whose outputs are
intact, is skipped. Only ``deid`` reads raw notes; later stages see masked
text alone.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, prompts
from .deid import ClinicalNote, DeidentifiedNote, PhiInventory, evaluate_phi, extract_phi, mask
from .entities import CorpusCandidate, extract_diseases, merge_candidates
from .evalkit import EVAL_THRESHOLDS, REFERENCE_THRESHOLD, build_reference, judge_extension, judge_precision, match_at, tally
from .extend import extend_all, insertion_records, write_traces
from .gateway import Gateway, GatewayError, ProviderConfig
from .metrics import PRF, macro, prf
from .ontology import Ontology, dump_obo, parse_obo, serialize_extension

logger = logging.getLogger(__name__)

STAGES = ("deid", "extract", "extend", "eval")


class ConfigError(Exception):
    pass


class StageOrderError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    notes: Path
    ontology: Path
    output: Path
    chat: ProviderConfig
    embedding: ProviderConfig
    judge: ProviderConfig
    reference_threshold: int = REFERENCE_THRESHOLD
    eval_thresholds: tuple[int, ...] = EVAL_THRESHOLDS
    workers: int = 4
    depth_guard_offset: int = 8
    scripted_only: bool = False
    phi_gold: Path | None = None

    def __post_init__(self) -> None:
        for t in (self.reference_threshold, *self.eval_thresholds):
            if not 0 <= t <= 100:
                raise ConfigError(f"threshold {t} outside [0, 100]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.depth_guard_offset < 0:
            raise ConfigError("depth_guard_offset must be >= 0")
        if not self.notes.exists():
            raise ConfigError(f"notes input {self.notes} does not exist")
        if not self.ontology.exists():
            raise ConfigError(f"seed ontology {self.ontology} does not exist")
        if self.phi_gold is not None and not self.phi_gold.exists():
            raise ConfigError(f"PHI gold file {self.phi_gold} does not exist")
        if self.scripted_only:
            for p in (self.chat, self.embedding, self.judge):
                if p.kind != "scripted":
                    raise ConfigError(f"scripted_only is set but provider {p.model!r} is {p.kind!r}")

    def stage_dir(self, stage: str) -> Path:
        return self.output / stage


_PATH_KEYS = ("notes", "ontology", "output", "phi_gold")


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Read a TOML config; relative paths resolve against the file's directory.

    ``overrides`` are applied on top (``None`` values are ignored).
    """
    data: dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.resolve().parent
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value

    providers = data.pop("providers", {})
    try:
        chat = ProviderConfig.from_mapping(providers.get("chat", {"model": "scripted", "kind": "scripted"}))
        embedding = ProviderConfig.from_mapping(providers.get("embedding", providers.get("chat", {"model": "scripted", "kind": "scripted"})))
        judge = ProviderConfig.from_mapping(providers.get("judge", providers.get("chat", {"model": "scripted", "kind": "scripted"})))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad provider config: {exc}") from exc
    for p in (chat, embedding, judge):
        if p.fixtures and not Path(p.fixtures).is_absolute():
            p.fixtures = str(base / p.fixtures)

    missing = [k for k in ("notes", "ontology", "output") if k not in data]
    if missing:
        raise ConfigError(f"config is missing {', '.join(missing)}")
    for key in _PATH_KEYS:
        if data.get(key) is not None:
            p = Path(data[key])
            data[key] = p if p.is_absolute() else base / p
    if "eval_thresholds" in data:
        data["eval_thresholds"] = tuple(int(t) for t in data["eval_thresholds"])
    known = set(PipelineConfig.__dataclass_fields__) - {"chat", "embedding", "judge"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(chat=chat, embedding=embedding, judge=judge, **data)


# --------------------------------------------------------------------------
# manifests and atomic I/O
# --------------------------------------------------------------------------


@dataclass
class StageManifest:
    stage: str
    status: str = "complete"  # "complete" or "partial"
    input_hash: str = ""
    items: dict[str, dict[str, str]] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    skipped: bool = False

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.items.items() if v.get("status") != "ok"]

    def to_json(self) -> str:
        data = asdict(self)
        data.pop("skipped")
        data["version"] = __version__
        return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def load(cls, path: Path) -> "StageManifest":
        data = json.loads(path.read_text(encoding="utf-8"))
        data.pop("version", None)
        return cls(**data)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    return sha256_bytes(path.read_bytes())


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows)


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _provider_fingerprint(p: ProviderConfig) -> dict:
    # credentials are referenced by variable name only, never by value
    return {"kind": p.kind, "model": p.model, "endpoint": p.endpoint if p.kind == "openai" else None,
            "fixtures": _dir_hash(Path(p.fixtures)) if p.fixtures and Path(p.fixtures).exists() else None,
            "embed_fallback": p.embed_fallback}


def _dir_hash(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(sha256_file(path).encode())
    return h.hexdigest()


def _hash_inputs(parts: dict) -> str:
    return sha256_bytes(json.dumps(parts, sort_keys=True).encode())


def _manifest_path(config: PipelineConfig, stage: str) -> Path:
    return config.stage_dir(stage) / "manifest.json"


def _outputs_intact(config: PipelineConfig, manifest: StageManifest) -> bool:
    for rel, digest in manifest.outputs.items():
        p = config.output / rel
        if not p.exists() or sha256_file(p) != digest:
            return False
    return True


def _require(config: PipelineConfig, stage: str) -> StageManifest:
    path = _manifest_path(config, stage)
    if not path.exists():
        raise StageOrderError(f"stage {stage!r} has not been run yet")
    manifest = StageManifest.load(path)
    if manifest.status not in ("complete", "partial"):
        raise StageOrderError(f"stage {stage!r} did not finish")
    return manifest


class _Writer:
    """Collects a stage's outputs and their hashes."""

    def __init__(self, config: PipelineConfig, stage: str):
        self.config = config
        self.root = config.stage_dir(stage)
        self.outputs: dict[str, str] = {}

    def write(self, rel: str, text: str) -> Path:
        path = self.root / rel
        atomic_write(path, text)
        self.outputs[str(path.relative_to(self.config.output))] = sha256_bytes(text.encode("utf-8"))
        return path


def _map(config: PipelineConfig, fn: Callable, items: list) -> list:
    if config.workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(fn, items))


def _guarded(fn: Callable) -> Callable:
    def run(item):
        try:
            return fn(item), None
        except (GatewayError, ValueError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    return run


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------


def load_notes(path: Path) -> list[ClinicalNote]:
    """Notes from a directory of ``*.txt`` files or a JSONL file of {note_id, text}."""
    if path.is_dir():
        files = sorted(path.glob("*.txt"))
        return [ClinicalNote(f.stem, f.read_text(encoding="utf-8")) for f in files]
    return [ClinicalNote(str(r["note_id"]), r["text"]) for r in _read_jsonl(path)]


def load_ontology(path: Path) -> Ontology:
    with open(path, encoding="utf-8") as fh:
        return parse_obo(fh)


def _masked_notes(config: PipelineConfig, manifest: StageManifest) -> list[DeidentifiedNote]:
    out = []
    for note_id, item in sorted(manifest.items.items()):
        if item.get("status") == "ok":
            text = (config.stage_dir("deid") / "masked" / f"{note_id}.txt").read_text(encoding="utf-8")
            out.append(DeidentifiedNote(note_id, text))
    return out


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def _finish(config: PipelineConfig, stage: str, input_hash: str, items: dict, writer: _Writer) -> StageManifest:
    status = "complete" if all(v["status"] == "ok" for v in items.values()) else "partial"
    manifest = StageManifest(stage, status, input_hash, dict(sorted(items.items())), dict(sorted(writer.outputs.items())))
    atomic_write(_manifest_path(config, stage), manifest.to_json())
    return manifest


def _stage_deid(config: PipelineConfig, gateways: dict[str, Gateway]) -> tuple[str, Callable[[], StageManifest]]:
    notes = load_notes(config.notes)
    input_hash = _hash_inputs({
        "notes": {n.note_id: sha256_bytes(n.text.encode()) for n in notes},
        "chat": _provider_fingerprint(config.chat),
        "prompt": sha256_bytes((prompts.DEID_SYSTEM + prompts.DEID_USER).encode()),
    })

    def run() -> StageManifest:
        writer = _Writer(config, "deid")
        masked_dir = config.stage_dir("deid") / "masked"
        if masked_dir.exists():
            shutil.rmtree(masked_dir)
        gw = gateways["chat"]
        results = _map(config, _guarded(lambda n: extract_phi(n, gw)), notes)
        items, inventories, logs = {}, [], []
        for note, (inv, err) in zip(notes, results):
            if inv is None:
                items[note.note_id] = {"status": "failed", "reason": err}
                continue
            masked = mask(note, inv)
            writer.write(f"masked/{note.note_id}.txt", masked.masked_text)
            inventories.append(inv.to_json())
            logs.append({
                "note_id": note.note_id,
                "log": [{"category": e.category.value, "original": e.original, "count": e.count} for e in masked.mask_log],
            })
            items[note.note_id] = {"status": "ok"}
        writer.write("inventory.jsonl", _jsonl(inventories))
        writer.write("mask_log.jsonl", _jsonl(logs))
        return _finish(config, "deid", input_hash, items, writer)

    return input_hash, run


def _stage_extract(config: PipelineConfig, gateways: dict[str, Gateway]) -> tuple[str, Callable[[], StageManifest]]:
    deid = _require(config, "deid")
    notes = _masked_notes(config, deid)
    input_hash = _hash_inputs({
        "masked": {n.note_id: sha256_bytes(n.masked_text.encode()) for n in notes},
        "chat": _provider_fingerprint(config.chat),
        "prompt": sha256_bytes((prompts.EXTRACT_SYSTEM + prompts.EXTRACT_USER).encode()),
    })

    def run() -> StageManifest:
        writer = _Writer(config, "extract")
        gw = gateways["chat"]
        results = _map(config, _guarded(lambda n: extract_diseases(n, gw)), notes)
        items, sets = {}, []
        for note, (cset, err) in zip(notes, results):
            if cset is None:
                items[note.note_id] = {"status": "failed", "reason": err}
                continue
            sets.append(cset)
            items[note.note_id] = {"status": "ok"}
        writer.write("candidates.jsonl", _jsonl(
            {"note_id": s.note_id, "mentions": [{"surface": m.surface, "normalized": m.normalized} for m in s.mentions]}
            for s in sets
        ))
        writer.write("corpus.jsonl", _jsonl(c.to_json() for c in merge_candidates(sets)))
        return _finish(config, "extract", input_hash, items, writer)

    return input_hash, run


def _stage_extend(config: PipelineConfig, gateways: dict[str, Gateway]) -> tuple[str, Callable[[], StageManifest]]:
    _require(config, "extract")
    corpus_path = config.stage_dir("extract") / "corpus.jsonl"
    input_hash = _hash_inputs({
        "corpus": sha256_file(corpus_path),
        "ontology": sha256_file(config.ontology),
        "chat": _provider_fingerprint(config.chat),
        "embedding": _provider_fingerprint(config.embedding),
        "prompt": sha256_bytes((prompts.RELATION_SYSTEM + prompts.RELATION_USER).encode()),
        "depth_guard_offset": config.depth_guard_offset,
    })

    def run() -> StageManifest:
        writer = _Writer(config, "extend")
        seed = load_ontology(config.ontology)
        corpus = [CorpusCandidate(**r) for r in _read_jsonl(corpus_path)]
        extended, traces = extend_all(
            corpus, seed, gateways["chat"], gateways["embedding"], config.depth_guard_offset
        )
        records = insertion_records(traces)
        rec_buf, obo_buf, trace_buf, full_buf = io.StringIO(), io.StringIO(), io.StringIO(), io.StringIO()
        serialize_extension(extended, records, rec_buf, obo_buf)
        write_traces(traces, trace_buf)
        dump_obo(extended, full_buf)
        writer.write("insertions.jsonl", rec_buf.getvalue())
        writer.write("extension.obo", obo_buf.getvalue())
        writer.write("traces.jsonl", trace_buf.getvalue())
        writer.write("extended.obo", full_buf.getvalue())
        items = {}
        for t in traces:
            ok = t.outcome is not None and t.outcome.kind.value != "failed"
            items[t.entity] = {"status": "ok"} if ok else {"status": "failed", "reason": t.outcome.reason if t.outcome else "no outcome"}
        return _finish(config, "extend", input_hash, items, writer)

    return input_hash, run


def _prf_json(s: PRF) -> dict:
    return {k: round(v, 6) for k, v in s.as_dict().items()}


def _stage_eval(config: PipelineConfig, gateways: dict[str, Gateway]) -> tuple[str, Callable[[], StageManifest]]:
    deid = _require(config, "deid")
    _require(config, "extract")
    _require(config, "extend")
    notes = _masked_notes(config, deid)
    candidates_path = config.stage_dir("extract") / "candidates.jsonl"
    insertions_path = config.stage_dir("extend") / "insertions.jsonl"
    input_hash = _hash_inputs({
        "masked": {n.note_id: sha256_bytes(n.masked_text.encode()) for n in notes},
        "candidates": sha256_file(candidates_path),
        "insertions": sha256_file(insertions_path),
        "ontology": sha256_file(config.ontology),
        "judge": _provider_fingerprint(config.judge),
        "prompt": sha256_bytes((prompts.JUDGE_SYSTEM + prompts.JUDGE_USER).encode()),
        "thresholds": [config.reference_threshold, *config.eval_thresholds],
        "phi_gold": sha256_file(config.phi_gold) if config.phi_gold else None,
        "inventory": sha256_file(config.stage_dir("deid") / "inventory.jsonl"),
    })

    def run() -> StageManifest:
        writer = _Writer(config, "eval")
        seed = load_ontology(config.ontology)
        predicted = {
            r["note_id"]: [m["normalized"] for m in r["mentions"]] for r in _read_jsonl(candidates_path)
        }
        refs = _map(config, lambda n: build_reference(n, seed, config.reference_threshold), notes)
        writer.write("references.jsonl", _jsonl({"note_id": r.note_id, "terms": r.terms} for r in refs))

        items: dict[str, dict[str, str]] = {}
        extraction: dict[str, Any] = {}
        for t in config.eval_thresholds:
            per_note, tp, n_pred, n_ref, flagged = {}, 0, 0, 0, []
            for ref in refs:
                res = match_at(predicted.get(ref.note_id, []), ref.terms, t)
                per_note[ref.note_id] = res.scores
                tp, n_pred, n_ref = tp + res.tp, n_pred + res.n_pred, n_ref + res.n_ref
                if res.flagged:
                    flagged.append(ref.note_id)
            extraction[str(t)] = {
                "micro": _prf_json(prf(tp, n_pred, n_ref)),
                "macro": _prf_json(macro(list(per_note.values()))),
                "tp": tp,
                "predictions": n_pred,
                "references": n_ref,
                "empty_reference_notes": flagged,
                "per_note": {k: _prf_json(v) for k, v in per_note.items()},
            }
        for ref in refs:
            items[f"note:{ref.note_id}"] = {"status": "ok"}

        rows = _read_jsonl(insertions_path)
        triplets = [(r["new_entity"], r["parent_name"], "is-a") for r in rows]
        verdicts = judge_extension(triplets, gateways["judge"])
        writer.write("judge.jsonl", _jsonl(v.to_json() for v in verdicts))
        for row, v in zip(rows, verdicts):
            items[f"judge:{row['new_id']}"] = {"status": "failed", "reason": v.error} if v.error else {"status": "ok"}
        counts = tally(verdicts)
        precision = judge_precision(verdicts)
        by_layer: dict[str, int] = {}
        for r in rows:
            by_layer[str(r["layer"])] = by_layer.get(str(r["layer"]), 0) + 1

        summary: dict[str, Any] = {
            "reference_threshold": config.reference_threshold,
            "extraction": extraction,
            "judge": {"tally": counts, "precision": None if precision is None else round(precision, 3)},
            "insertions": {"total": len(rows), "by_layer": dict(sorted(by_layer.items(), key=lambda kv: int(kv[0])))},
        }
        if config.phi_gold is not None:
            gold = {inv.note_id: inv for inv in map(PhiInventory.from_json, _read_jsonl(config.phi_gold))}
            pred = {
                inv.note_id: inv
                for inv in map(PhiInventory.from_json, _read_jsonl(config.stage_dir("deid") / "inventory.jsonl"))
            }
            scores = evaluate_phi({k: v for k, v in pred.items() if k in gold}, gold)
            summary["phi"] = {"micro": _prf_json(scores.micro), "macro": _prf_json(scores.macro)}
        writer.write("summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return _finish(config, "eval", input_hash, items, writer)

    return input_hash, run


_STAGE_FUNCS = {"deid": _stage_deid, "extract": _stage_extract, "extend": _stage_extend, "eval": _stage_eval}


def build_gateways(config: PipelineConfig) -> dict[str, Gateway]:
    return {"chat": Gateway(config.chat), "embedding": Gateway(config.embedding), "judge": Gateway(config.judge)}


def run_stage(config: PipelineConfig, stage: str, gateways: dict[str, Gateway] | None = None, force: bool = False) -> StageManifest:
    """Run one stage, or skip it if its inputs and outputs are unchanged.

    Raises:
        StageOrderError: a predecessor stage has not run.
    """
    if stage not in _STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    gateways = gateways or build_gateways(config)
    input_hash, run = _STAGE_FUNCS[stage](config, gateways)
    path = _manifest_path(config, stage)
    if not force and path.exists():
        previous = StageManifest.load(path)
        if previous.status == "complete" and previous.input_hash == input_hash and _outputs_intact(config, previous):
            logger.info("stage %s unchanged; skipping", stage)
            previous.skipped = True
            return previous
    logger.info("running stage %s", stage)
    return run()


def run_all(config: PipelineConfig, gateways: dict[str, Gateway] | None = None, force: bool = False) -> list[StageManifest]:
    gateways = gateways or build_gateways(config)
    return [run_stage(config, s, gateways, force) for s in STAGES]


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def _collect_failures(config: PipelineConfig) -> dict[str, list[str]]:
    out = {}
    for stage in STAGES:
        path = _manifest_path(config, stage)
        if path.exists():
            out[stage] = StageManifest.load(path).failed
    return out


def format_report(report: dict) -> str:
    lines = ["Extraction against fuzzy reference (threshold %d)" % report["reference_threshold"], ""]
    thresholds = list(report["extraction"])
    header = "{:<8}".format("") + "".join(f"{'T=' + t:^27}" for t in thresholds)
    lines.append(header)
    lines.append("{:<8}".format("") + "".join(f"{'Pr':>9}{'Re':>9}{'F1':>9}" for _ in thresholds))
    for agg in ("micro", "macro"):
        row = f"{agg:<8}"
        for t in thresholds:
            s = report["extraction"][t][agg]
            row += f"{s['precision']:>9.4f}{s['recall']:>9.4f}{s['f1']:>9.4f}"
        lines.append(row)
    lines.append("")
    if "phi" in report:
        lines.append("De-identification (string-level)")
        lines.append(f"{'':<8}{'Pr':>9}{'Re':>9}{'F1':>9}")
        for agg in ("micro", "macro"):
            s = report["phi"][agg]
            lines.append(f"{agg:<8}{s['precision']:>9.4f}{s['recall']:>9.4f}{s['f1']:>9.4f}")
        lines.append("")
    lines.append("Extension judged by LLM")
    t = report["judge"]["tally"]
    p = report["judge"]["precision"]
    lines.append(f"{'Correct':>9}{'Incorrect':>11}{'Not Sure':>10}{'Failed':>8}{'Precision':>11}")
    lines.append(f"{t['Correct']:>9}{t['Incorrect']:>11}{t['Not Sure']:>10}{t['Failed']:>8}{'n/a' if p is None else format(p, '.3f'):>11}")
    lines.append("")
    ins = report["insertions"]
    if ins["total"] == 0:
        lines.append("Insertions: none (empty extension)")
    else:
        by_layer = ", ".join(f"depth {k}: {v}" for k, v in ins["by_layer"].items())
        lines.append(f"Insertions: {ins['total']} ({by_layer})")
    failures = report["failures"]
    if any(failures.values()):
        lines.append("Failures: " + "; ".join(f"{s}: {len(v)}" for s, v in failures.items() if v))
    else:
        lines.append("Failures: none")
    return "\n".join(lines) + "\n"


def report(config: PipelineConfig) -> dict:
    """Assemble the run report from eval outputs and write report.json / report.txt."""
    path = _manifest_path(config, "eval")
    summary_path = config.stage_dir("eval") / "summary.json"
    if not path.exists() or not summary_path.exists():
        raise StageOrderError("eval outputs missing; run the eval stage first")
    doc = json.loads(summary_path.read_text(encoding="utf-8"))
    doc["failures"] = _collect_failures(config)
    doc["empty_extension"] = doc["insertions"]["total"] == 0
    atomic_write(config.output / "report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    atomic_write(config.output / "report.txt", format_report(doc))
    return doc
