"""Reviewer/refiner loop over all sections, plus table and diagram visuals."""

from __future__ import annotations

import copy
import difflib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import networkx as nx
from pydantic import BaseModel, Field, field_validator

import config
from backend_gateway import Gateway, extract_json_object
from draft_engine import SectionDraft, SurveyDocument, citation_markers, strip_markers
from corpus_store import normalize_title
from errors import ParseFailedAfterRepairs
from run_trace import RunTrace

logger = logging.getLogger(__name__)

ASPECTS = ("clarity", "terminology", "logical-alignment", "fluency")
ASPECT_SYNONYMS = {
    "readability": "clarity",
    "exposition": "clarity",
    "precision": "clarity",
    "consistency": "terminology",
    "wording": "terminology",
    "coherence": "logical-alignment",
    "logic": "logical-alignment",
    "flow": "logical-alignment",
    "structure": "logical-alignment",
    "transition": "logical-alignment",
    "transitions": "logical-alignment",
    "style": "fluency",
    "grammar": "fluency",
    "tone": "fluency",
}
VISUAL_KINDS = ("table", "diagram")
VISUAL_STATES = ("proposed", "validated", "revised", "rejected")


class PolishConfig(BaseModel):
    iterations: int = Field(default=config.REVIEW_ITERATIONS, ge=0)
    visuals: bool = True
    max_cols: int = Field(default=config.MAX_TABLE_COLS, ge=1)
    max_cell_chars: int = Field(default=config.MAX_CELL_CHARS, ge=1)
    max_diagram_nodes: int = Field(default=config.MAX_DIAGRAM_NODES, ge=1)


# --- review and refine --------------------------------------------------

@dataclass(frozen=True)
class Issue:
    aspect: str
    note: str


@dataclass
class Critique:
    node_id: str
    issues: list[Issue] = field(default_factory=list)
    severity: int = 0


class ReviewShape(BaseModel):
    issues: list[dict[str, Any]] = Field(default_factory=list)
    severity: int = 0

    @field_validator("severity", mode="before")
    @classmethod
    def _clamp(cls, value: Any) -> Any:
        try:
            return min(max(int(value), 0), 3)
        except (TypeError, ValueError):
            return value


def normalize_aspect(aspect: str) -> Optional[str]:
    """Map a reviewer aspect onto the four allowed ones, or None."""
    key = aspect.strip().lower().replace("_", "-").replace(" ", "-")
    if key in ASPECTS:
        return key
    if key in ASPECT_SYNONYMS:
        return ASPECT_SYNONYMS[key]
    close = difflib.get_close_matches(key, ASPECTS, n=1, cutoff=0.6)
    return close[0] if close else None


def review_section(gateway: Gateway, document: SurveyDocument, node_id: str) -> Critique:
    if node_id not in document.sections:
        raise KeyError(f"no section '{node_id}' in the document")
    request = gateway.request(
        "review-section",
        SURVEY=document.render(anchors=True),
        TARGET=document.sections[node_id].heading,
        **{"TARGET ID": f"{{#{node_id}}}"},
    )
    shape = gateway.generate_structured(request, ReviewShape)
    issues: list[Issue] = []
    for raw in shape.issues:
        aspect = normalize_aspect(str(raw.get("aspect", "")))
        note = str(raw.get("note", "")).strip()
        if aspect is None:
            logger.warning("[PolishEngine] Dropping review issue with aspect %r", raw.get("aspect"))
            continue
        issues.append(Issue(aspect, note))
    severity = shape.severity if issues else 0
    if issues and severity == 0:
        severity = 1
    return Critique(node_id=node_id, issues=issues, severity=severity)


def _allowed_marker(draft: SectionDraft):
    normalized = {normalize_title(m): m for m in draft.citations}

    def resolve(marker: str) -> Optional[str]:
        if marker in draft.citations:
            return marker
        return normalized.get(normalize_title(marker))

    return resolve


def refine_section(
    gateway: Gateway,
    draft: SectionDraft,
    critique: Critique,
    trace: Optional[RunTrace] = None,
) -> SectionDraft:
    """Apply a critique; the refiner may only keep or drop existing citations."""
    if critique.severity == 0:
        return draft
    request = gateway.request(
        "refine-section",
        SECTION=draft.heading,
        DRAFT=draft.body,
        CRITIQUE="\n".join(f"- {i.aspect}: {i.note}" for i in critique.issues),
        CITATIONS="; ".join(draft.citations) or "(none)",
    )
    body = gateway.generate(request).text.strip()
    resolve = _allowed_marker(draft)
    body, removed = strip_markers(body, lambda m: resolve(m) is not None)
    if removed:
        logger.warning("[PolishEngine] Refiner introduced citations in %s: %s", draft.node_id, removed)
        if trace is not None:
            trace.log("citation_stripped", node_id=draft.node_id, markers=removed, stage="refine")
    citations = {m: draft.citations[resolve(m)] for m in citation_markers(body)}  # type: ignore[index]
    return replace(draft, body=body, citations=citations)


def run_review_iterations(
    gateway: Gateway,
    document: SurveyDocument,
    iterations: int = config.REVIEW_ITERATIONS,
    trace: Optional[RunTrace] = None,
) -> SurveyDocument:
    """Review then refine every section in document order, ``iterations`` times."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    document = copy.deepcopy(document)
    for iteration in range(iterations):
        for node_id in document.order():
            critique = review_section(gateway, document, node_id)
            if trace is not None:
                trace.log("review", iteration=iteration, node_id=node_id, severity=critique.severity)
            document.sections[node_id] = refine_section(gateway, document.sections[node_id], critique, trace)
    return document


# --- visuals ------------------------------------------------------------

@dataclass
class VisualSpec:
    visual_id: str
    kind: str
    requirement: str
    caption: str = ""
    header: list[str] = field(default_factory=list)
    rows: list[list[str]] = field(default_factory=list)
    nodes: list[str] = field(default_factory=list)
    edges: list[tuple[str, str]] = field(default_factory=list)
    status: str = "proposed"
    history: list[str] = field(default_factory=lambda: ["proposed"])

    def with_status(self, status: str) -> "VisualSpec":
        return replace(self, status=status, history=self.history + [status])

    def payload(self) -> dict[str, Any]:
        if self.kind == "table":
            return {"kind": "table", "caption": self.caption, "header": self.header, "rows": self.rows}
        return {"kind": "diagram", "caption": self.caption, "nodes": self.nodes, "edges": [list(e) for e in self.edges]}

    def label(self) -> str:
        name = "Table" if self.kind == "table" else "Figure"
        return f"{name} {self.visual_id.rsplit('-', 1)[-1]}"

    def render_block(self) -> str:
        lines = [f"**{self.label()}.** {self.caption}", ""]
        if self.kind == "table":
            clean = lambda cell: cell.replace("|", "/").replace("[", "(").replace("]", ")")
            lines.append("| " + " | ".join(clean(c) for c in self.header) + " |")
            lines.append("|" + "---|" * len(self.header))
            lines += ["| " + " | ".join(clean(c) for c in row) + " |" for row in self.rows]
        else:
            ids = {name: f"n{i}" for i, name in enumerate(self.nodes)}
            lines += ["```", "graph TD"]
            lines += [f'  {ids[n]}("{n}")' for n in self.nodes]
            lines += [f"  {ids[a]} --> {ids[b]}" for a, b in self.edges if a in ids and b in ids]
            lines.append("```")
        return "\n".join(lines)

    def to_dict(self) -> dict[str, Any]:
        return {
            "visual_id": self.visual_id,
            "kind": self.kind,
            "requirement": self.requirement,
            "caption": self.caption,
            "header": self.header,
            "rows": self.rows,
            "nodes": self.nodes,
            "edges": [list(e) for e in self.edges],
            "status": self.status,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "VisualSpec":
        data = dict(data)
        data["edges"] = [tuple(e) for e in data.get("edges", [])]
        return cls(**data)


class VisualList(BaseModel):
    visuals: list[dict[str, Any]] = Field(default_factory=list)


class CritiqueList(BaseModel):
    issues: list[str] = Field(default_factory=list)

    @field_validator("issues", mode="before")
    @classmethod
    def _strings(cls, value: Any) -> Any:
        if isinstance(value, list):
            return [str(v) for v in value if str(v).strip()]
        return value


class PlacementShape(BaseModel):
    paragraph: int


def _cells(values: Any) -> list[str]:
    return [str(v) for v in values] if isinstance(values, list) else []


def spec_from_payload(visual_id: str, raw: dict[str, Any]) -> Optional[VisualSpec]:
    """Build a spec from a backend object; None for unknown kinds or ragged tables."""
    kind = str(raw.get("kind", "")).strip().lower()
    if kind not in VISUAL_KINDS:
        return None
    spec = VisualSpec(
        visual_id=visual_id,
        kind=kind,
        requirement=str(raw.get("requirement", "")).strip(),
        caption=str(raw.get("caption", "")).strip(),
    )
    if kind == "table":
        spec.header = _cells(raw.get("header"))
        spec.rows = [_cells(r) for r in raw.get("rows", []) if isinstance(r, list)]
        if not spec.header or any(len(r) != len(spec.header) for r in spec.rows):
            return None
    else:
        spec.nodes = _cells(raw.get("nodes"))
        spec.edges = [
            (str(e[0]), str(e[1])) for e in raw.get("edges", []) if isinstance(e, (list, tuple)) and len(e) == 2
        ]
    return spec


def propose_visuals(gateway: Gateway, draft: SectionDraft) -> list[VisualSpec]:
    """Proposed specs with section-local ids ``{kind}-{n}``; ragged tables are dropped."""
    request = gateway.request("propose-visuals", SECTION=draft.heading, BODY=draft.body)
    shape = gateway.generate_structured(request, VisualList)
    counts: Counter = Counter()
    specs: list[VisualSpec] = []
    for raw in shape.visuals:
        kind = str(raw.get("kind", "")).strip().lower()
        spec = spec_from_payload(f"{kind}-{counts[kind] + 1}", raw)
        if spec is None:
            logger.warning("[PolishEngine] Rejected malformed %s proposal in %s", kind or "visual", draft.node_id)
            continue
        counts[kind] += 1
        specs.append(spec)
    return specs


def structural_issues(spec: VisualSpec, limits: PolishConfig) -> list[str]:
    issues: list[str] = []
    if not spec.caption.strip():
        issues.append("caption absent")
    if spec.kind == "table":
        cols = len(spec.header)
        if cols > limits.max_cols:
            issues.append(f"oversized layout: {cols} columns")
        if any(len(r) != cols for r in spec.rows):
            issues.append("ragged rows")
        longest = max((len(c) for r in [spec.header] + spec.rows for c in r), default=0)
        if longest > limits.max_cell_chars:
            issues.append(f"unreadable text: cell of {longest} characters")
    else:
        graph = nx.DiGraph()
        graph.add_nodes_from(spec.nodes)
        if graph.number_of_nodes() > limits.max_diagram_nodes:
            issues.append(f"oversized layout: {graph.number_of_nodes()} nodes")
        if graph.number_of_nodes() < len(spec.nodes):
            issues.append("duplicate node labels")
        dangling = [e for e in spec.edges if e[0] not in graph or e[1] not in graph]
        if dangling:
            issues.append(f"dangling edges: {len(dangling)}")
        graph.add_edges_from(e for e in spec.edges if e not in dangling)
        if nx.number_of_selfloops(graph):
            issues.append("self-referencing edges")
        longest = max((len(n) for n in spec.nodes), default=0)
        if longest > limits.max_cell_chars:
            issues.append(f"unreadable text: label of {longest} characters")
    return issues


def validate_visual(gateway: Gateway, spec: VisualSpec, limits: Optional[PolishConfig] = None) -> list[str]:
    """Structural checks plus one backend readability critique."""
    limits = limits or PolishConfig()
    issues = structural_issues(spec, limits)
    request = gateway.request("visual-critique", VISUAL=json.dumps(spec.payload(), sort_keys=True))
    try:
        issues += gateway.generate_structured(request, CritiqueList).issues
    except ParseFailedAfterRepairs as e:
        logger.warning("[PolishEngine] Visual critique for %s unusable: %s", spec.visual_id, e)
    return issues


def revise_visual(
    gateway: Gateway,
    spec: VisualSpec,
    issues: Sequence[str],
    limits: Optional[PolishConfig] = None,
) -> VisualSpec:
    """Ask for a corrected spec; it is revised only if it then validates with no issues."""
    if not issues:
        raise ValueError("issues must be non-empty")
    limits = limits or PolishConfig()
    request = gateway.request(
        "revise-visual",
        VISUAL=json.dumps(spec.payload(), sort_keys=True),
        ISSUES="\n".join(f"- {i}" for i in issues),
        **{
            "MAX COLS": limits.max_cols,
            "MAX CHARS": limits.max_cell_chars,
            "MAX NODES": limits.max_diagram_nodes,
        },
    )
    payload = extract_json_object(gateway.generate(request).text)
    if payload is not None and isinstance(payload.get("visuals"), list):
        payload = payload["visuals"][0] if payload["visuals"] and isinstance(payload["visuals"][0], dict) else None
    if payload is not None:
        payload.setdefault("kind", spec.kind)
        payload.setdefault("requirement", spec.requirement)
        revised = spec_from_payload(spec.visual_id, payload)
        if revised is not None and not validate_visual(gateway, revised, limits):
            revised.history = list(spec.history)
            return revised.with_status("revised")
    logger.info("[PolishEngine] Visual %s rejected after revision", spec.visual_id)
    return spec.with_status("rejected")


def reference_visuals(gateway: Gateway, draft: SectionDraft, visuals: Sequence[VisualSpec]) -> SectionDraft:
    """Mention each visual once, after the paragraph the backend picks."""
    for v in visuals:
        if v.status not in ("validated", "revised"):
            raise ValueError(f"visual {v.visual_id} is {v.status}")
    body = draft.body
    for visual in visuals:
        marker = f"<<{visual.visual_id}>>"
        if marker in body:
            continue
        paragraphs = body.split("\n\n")
        request = gateway.request(
            "place-visual",
            PARAGRAPHS="\n".join(f"[{i}] {p}" for i, p in enumerate(paragraphs)),
            VISUAL=f"{visual.label()}: {visual.caption}",
        )
        try:
            index = gateway.generate_structured(request, PlacementShape).paragraph
        except ParseFailedAfterRepairs:
            index = len(paragraphs) - 1
        index = min(max(index, 0), len(paragraphs) - 1)
        paragraphs[index] = f"{paragraphs[index].rstrip()} (see {marker})"
        body = "\n\n".join(paragraphs)
    return draft if body == draft.body else replace(draft, body=body)


def number_visuals(document_visuals: Sequence[tuple[str, list[VisualSpec]]]) -> list[tuple[str, list[VisualSpec]]]:
    """Renumber kept visuals sequentially per kind in document order; rejected ones keep their ids."""
    counts: Counter = Counter()
    out = []
    for node_id, specs in document_visuals:
        renamed = []
        for spec in specs:
            if spec.status == "rejected":
                renamed.append(spec)
                continue
            counts[spec.kind] += 1
            renamed.append(replace(spec, visual_id=f"{spec.kind}-{counts[spec.kind]}"))
        out.append((node_id, renamed))
    return out


def polish_document(
    gateway: Gateway,
    document: SurveyDocument,
    polish_config: Optional[PolishConfig] = None,
    trace: Optional[RunTrace] = None,
    run: Any = None,
) -> SurveyDocument:
    """Review iterations, then visuals for every drafted leaf section."""
    cfg = polish_config or PolishConfig()
    document = run_review_iterations(gateway, document, cfg.iterations, trace)
    if not cfg.visuals:
        return document

    leaves = [nid for nid in document.order() if not document.sections[nid].stub]

    def visuals_for(node_id: str) -> list[VisualSpec]:
        checked = []
        for spec in propose_visuals(gateway, document.sections[node_id]):
            issues = validate_visual(gateway, spec, cfg)
            spec = spec.with_status("validated") if not issues else revise_visual(gateway, spec, issues, cfg)
            checked.append(spec)
        return checked

    proposals = list(zip(leaves, gateway.fan_out(visuals_for, leaves)))
    numbered = number_visuals(proposals)
    for node_id, specs in numbered:
        for spec in specs:
            if trace is not None:
                trace.log("visual", node_id=node_id, visual_id=spec.visual_id, status=spec.status)
        if run is not None and specs:
            run.write_json(f"{config.VISUAL_DIR}/{node_id}.json", [s.to_dict() for s in specs])
        kept = [s for s in specs if s.status in ("validated", "revised")]
        if kept:
            document.sections[node_id] = reference_visuals(gateway, document.sections[node_id], kept)
            document.visuals[node_id] = kept
    return document
