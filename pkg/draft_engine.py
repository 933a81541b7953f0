"""Section drafting grounded in paper cards, citation resolution and assembly."""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Any, Callable, Iterable, Optional, Sequence

from pydantic import BaseModel, Field

import config
from backend_gateway import REPAIR_NOTE, Gateway
from card_engine import CardCache, PaperCard, format_paper_list
from corpus_store import CorpusStore, normalize_title
from errors import CardExtractionFailed
from outline_engine import OutlineNode
from run_trace import RunTrace

logger = logging.getLogger(__name__)

CITE_RE = re.compile(r"\[([^\[\]]+)\]")
STRIP_RE = re.compile(r"([ \t]*)\[([^\[\]]+)\]")
VISUAL_REF_RE = re.compile(r"<<(table|diagram)-(\d+)>>")
VISUAL_NAMES = {"table": "Table", "diagram": "Figure"}


class DraftConfig(BaseModel):
    section_k: int = Field(default=config.SECTION_RETRIEVAL_K, ge=0)
    target_words: int = Field(default=config.TARGET_WORDS, ge=1)
    card_budget: Optional[int] = Field(default=None, ge=1)


def citation_markers(body: str) -> list[str]:
    """Individual markers in order of appearance; ``[A; B]`` yields A and B."""
    markers: list[str] = []
    for group in CITE_RE.findall(body):
        for part in group.split(";"):
            part = part.strip()
            if part and part not in markers:
                markers.append(part)
    return markers


def strip_markers(body: str, keep: Callable[[str], bool]) -> tuple[str, list[str]]:
    """Drop markers failing ``keep``; empty bracket groups vanish with their leading space."""
    removed: list[str] = []

    def rewrite(match: re.Match) -> str:
        parts = [p.strip() for p in match.group(2).split(";") if p.strip()]
        kept = [p for p in parts if keep(p)]
        removed.extend(p for p in parts if p not in kept)
        if len(kept) == len(parts):
            return match.group(0)
        return f"{match.group(1)}[{'; '.join(kept)}]" if kept else ""

    return STRIP_RE.sub(rewrite, body), removed


@dataclass
class SectionDraft:
    node_id: str
    heading: str
    body: str
    citations: dict[str, str] = field(default_factory=dict)
    evidence: list[str] = field(default_factory=list)
    stub: bool = False

    @property
    def word_count(self) -> int:
        return len(self.body.split())

    def cited_ids(self) -> list[str]:
        return list(dict.fromkeys(self.citations.values()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "heading": self.heading,
            "body": self.body,
            "citations": dict(self.citations),
            "evidence": list(self.evidence),
            "stub": self.stub,
            "word_count": self.word_count,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SectionDraft":
        return cls(
            node_id=data["node_id"],
            heading=data["heading"],
            body=data["body"],
            citations=dict(data.get("citations", {})),
            evidence=list(data.get("evidence", [])),
            stub=bool(data.get("stub", False)),
        )


def retrieve_for_section(
    store: CorpusStore,
    cards: CardCache,
    description: str,
    k: int,
    cutoff: Optional[date] = None,
) -> list[PaperCard]:
    """Top-k papers for a section description, carded (existing cards reused)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    out: list[PaperCard] = []
    for hit in store.retrieve(description, k, cutoff):
        try:
            out.append(cards.get_or_extract(store.get(hit.paper_id), description))
        except CardExtractionFailed as e:
            logger.warning("[DraftEngine] No card for %s: %s", hit.paper_id, e)
    return out


def evidence_pool(
    node: OutlineNode,
    cards: CardCache,
    retrieved: Sequence[PaperCard],
    budget: Optional[int] = None,
) -> list[PaperCard]:
    """Relinked cards first, then section-retrieved ones, deduplicated and truncated."""
    pool: dict[str, PaperCard] = {}
    for pid in sorted(node.linked_papers):
        card = cards.get(pid)
        if card is not None:
            pool[pid] = card
    for card in retrieved:
        pool.setdefault(card.paper_id, card)
    limit = budget if budget is not None else len(node.linked_papers) + len(retrieved)
    return list(pool.values())[:limit]


def _marker_lookup(cards: Sequence[PaperCard]) -> dict[str, str]:
    lookup: dict[str, str] = {}
    for card in cards:
        lookup[normalize_title(card.title)] = card.paper_id
        lookup[card.paper_id.lower()] = card.paper_id
    return lookup


def draft_subsection(
    gateway: Gateway,
    node: OutlineNode,
    cards: Sequence[PaperCard],
    *,
    topic: str,
    target_words: int = config.TARGET_WORDS,
    trace: Optional[RunTrace] = None,
) -> SectionDraft:
    """
    Draft one leaf from its description and evidence cards.  Markers must name
    a provided card; one repair is requested, then unknown markers are stripped.
    """
    if not cards:
        raise ValueError(f"no evidence cards for section '{node.title}'")
    lookup = _marker_lookup(cards)

    def known(marker: str) -> bool:
        return marker.lower() in lookup or normalize_title(marker) in lookup

    request = gateway.request(
        "draft-subsection",
        TOPIC=topic,
        SECTION=node.title,
        DESCRIPTION=node.description,
        **{"PAPER LIST": format_paper_list(cards), "SURVEY LEN": target_words},
    )
    body = gateway.generate(request).text.strip()
    unknown = [m for m in citation_markers(body) if not known(m)]
    if unknown:
        logger.info("[DraftEngine] %s cites unknown works %s, re-prompting", node.node_id, unknown)
        error = "these citations are not in the paper list: " + "; ".join(unknown)
        body = gateway.generate(replace(request, repair_notes=(REPAIR_NOTE.format(error=error),))).text.strip()
        body, removed = strip_markers(body, known)
        if removed:
            logger.warning("[DraftEngine] Stripped unknown citations from %s: %s", node.node_id, removed)
            if trace is not None:
                trace.log("citation_stripped", node_id=node.node_id, markers=removed, stage="draft")
    citations = {
        m: lookup.get(m.lower()) or lookup[normalize_title(m)]
        for m in citation_markers(body)
    }
    return SectionDraft(
        node_id=node.node_id,
        heading=node.title,
        body=body,
        citations=citations,
        evidence=[c.paper_id for c in cards],
    )


def draft_stub(gateway: Gateway, node: OutlineNode, topic: str) -> SectionDraft:
    """Short citation-free connective paragraph for a section with children."""
    request = gateway.request(
        "draft-stub",
        TOPIC=topic,
        SECTION=node.title,
        DESCRIPTION=node.description,
        CHILDREN="\n".join(f"- {c.title}: {c.description}" for c in node.children),
    )
    body, _ = strip_markers(gateway.generate(request).text.strip(), lambda m: False)
    return SectionDraft(node_id=node.node_id, heading=node.title, body=body, stub=True)


def resolve_citations(draft: SectionDraft, store: CorpusStore, trace: Optional[RunTrace] = None) -> SectionDraft:
    """Map every marker to a corpus id; unresolvable markers leave the body."""
    citations: dict[str, str] = {}

    def resolvable(marker: str) -> bool:
        known = draft.citations.get(marker)
        if known is not None and known in store:
            citations[marker] = known
            return True
        pid = store.resolve(marker)
        if pid is None:
            return False
        citations[marker] = pid
        return True

    body, removed = strip_markers(draft.body, resolvable)
    if removed:
        logger.warning("[DraftEngine] Unresolvable citations in %s: %s", draft.node_id, removed)
        if trace is not None:
            trace.log("citation_stripped", node_id=draft.node_id, markers=removed, stage="resolve")
    ordered = {m: citations[m] for m in citation_markers(body)}
    if body == draft.body and ordered == draft.citations:
        return draft
    return replace(draft, body=body, citations=ordered)


def draft_document(
    gateway: Gateway,
    store: CorpusStore,
    cards: CardCache,
    outline: OutlineNode,
    draft_config: DraftConfig,
    *,
    cutoff: Optional[date] = None,
    trace: Optional[RunTrace] = None,
) -> "SurveyDocument":
    """Draft every leaf (concurrently through the gateway) and a stub per inner section."""
    topic = outline.title
    nodes = [n for n, depth in outline.walk() if depth >= 1]

    def draft_node(node: OutlineNode) -> SectionDraft:
        if node.children:
            return draft_stub(gateway, node, topic)
        query = f"{node.title}\n{node.description}"
        retrieved = retrieve_for_section(store, cards, query, draft_config.section_k, cutoff)
        budget = draft_config.card_budget or (draft_config.section_k + len(node.linked_papers))
        pool = evidence_pool(node, cards, retrieved, budget)
        if not pool:
            logger.warning("[DraftEngine] No evidence for %s; writing a connective paragraph", node.node_id)
            if trace is not None:
                trace.log("no_evidence", node_id=node.node_id)
            return draft_stub(gateway, node, topic)
        draft = draft_subsection(
            gateway, node, pool, topic=topic, target_words=draft_config.target_words, trace=trace
        )
        return resolve_citations(draft, store, trace)

    drafts = gateway.fan_out(draft_node, nodes)
    for draft in drafts:
        if trace is not None:
            trace.log("drafted", node_id=draft.node_id, words=draft.word_count, citations=len(draft.citations))
    return SurveyDocument(topic=topic, outline=outline, sections={d.node_id: d for d in drafts})


@dataclass
class SurveyDocument:
    topic: str
    outline: OutlineNode
    sections: dict[str, SectionDraft] = field(default_factory=dict)
    visuals: dict[str, list[Any]] = field(default_factory=dict)

    def order(self) -> list[str]:
        return [n.node_id for n, depth in self.outline.walk() if depth >= 1 and n.node_id in self.sections]

    def cited_ids(self) -> list[str]:
        ids: list[str] = []
        for node_id in self.order():
            for pid in self.sections[node_id].cited_ids():
                if pid not in ids:
                    ids.append(pid)
        return ids

    def render(self, store: Optional[CorpusStore] = None, anchors: bool = False) -> str:
        """
        Markdown survey.  With ``anchors`` every heading carries ``{#node_id}``
        so a reviewer can be pointed at one section.
        """
        lines = [f"# {self.topic}", ""]
        for node, depth in self.outline.walk():
            if depth == 0 or node.node_id not in self.sections:
                continue
            draft = self.sections[node.node_id]
            heading = f"{'#' * (depth + 1)} {draft.heading}"
            lines += [f"{heading} {{#{node.node_id}}}" if anchors else heading, ""]
            lines += [VISUAL_REF_RE.sub(_visual_label, draft.body), ""]
            for visual in self.visuals.get(node.node_id, []):
                lines += [visual.render_block(), ""]
        if store is not None:
            lines += ["## References", ""]
            for pid in self.cited_ids():
                title = store.get(pid).title if pid in store else pid
                lines.append(f"- {pid}: {title}")
            lines.append("")
        return "\n".join(lines).rstrip() + "\n"

    def digest(self) -> str:
        return hashlib.sha1(self.render(anchors=True).encode("utf-8")).hexdigest()[:12]

    def to_dict(self) -> dict[str, Any]:
        return {
            "topic": self.topic,
            "outline": self.outline.to_dict(),
            "sections": [self.sections[k].to_dict() for k in self.order()],
            "visuals": {k: [v.to_dict() for v in vs] for k, vs in sorted(self.visuals.items())},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SurveyDocument":
        from polish_engine import VisualSpec

        return cls(
            topic=data["topic"],
            outline=OutlineNode.from_dict(data["outline"]),
            sections={d["node_id"]: SectionDraft.from_dict(d) for d in data.get("sections", [])},
            visuals={k: [VisualSpec.from_dict(v) for v in vs] for k, vs in data.get("visuals", {}).items()},
        )


def _visual_label(match: re.Match) -> str:
    return f"{VISUAL_NAMES[match.group(1)]} {match.group(2)}"


def cited_markers(sections: Iterable[SectionDraft]) -> set[str]:
    return {m for s in sections for m in citation_markers(s.body)}
