"""Recurrent outline generation.

The loop seeds retrieval keywords, turns the retrieved papers into cards,
queues them per keyword and consumes them batch by batch.  Each batch
proposes a candidate outline that replaces the current one only when the two
are similar enough.  When the pool runs dry the loop either stops (paper
budget met and the outline judged complete) or expands the keyword set from
the current outline.  The research outline is finally refined into a
writing outline and every consulted paper is relinked to a leaf section.

Outlines are exchanged with the backend as heading-delimited text::

    # Topic
    ## Section
    > one-line description
    ### Subsection
    > description
"""

from __future__ import annotations

import copy
import hashlib
import logging
import random
import re
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Any, Iterator, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

import config
from backend_gateway import REPAIR_NOTE, Gateway, KeywordList, dedupe_keywords
from card_engine import CardCache, CardPool, PaperCard, format_cards, sample_batch
from corpus_store import CorpusStore
from errors import CardExtractionFailed, EmptyReply, MalformedOutline, NoSeeds
from run_trace import RunTrace

logger = logging.getLogger(__name__)

HEADING_RE = re.compile(r"^(#{1,9})\s+(.*?)\s*#*\s*$")
NUMBERING_RE = re.compile(r"^(?:\d+(?:\.\d+)*\.?|[IVX]+\.)\s+")
WORD_RE = re.compile(r"\w+")
INTRO_RE = re.compile(r"\b(introduction|overview|motivation)\b", re.IGNORECASE)
CONCLUSION_RE = re.compile(
    r"\b(conclusions?|concluding|outlook|future\s+(work|directions?|research|perspectives?)"
    r"|open\s+(problems|challenges|questions))\b",
    re.IGNORECASE,
)
# Strictly below 1.0 for outlines whose canonical forms differ.
SIM_CAP = 1.0 - 1e-9


@dataclass
class OutlineNode:
    node_id: str
    title: str
    description: str = ""
    children: list["OutlineNode"] = field(default_factory=list)
    linked_papers: set[str] = field(default_factory=set)

    def walk(self, depth: int = 0) -> Iterator[tuple["OutlineNode", int]]:
        yield self, depth
        for child in self.children:
            yield from child.walk(depth + 1)

    def leaves(self) -> list["OutlineNode"]:
        return [n for n, _ in self.walk() if not n.children]

    def find(self, node_id: str) -> Optional["OutlineNode"]:
        return next((n for n, _ in self.walk() if n.node_id == node_id), None)

    def depth(self) -> int:
        return max(d for _, d in self.walk())

    def size(self) -> int:
        return sum(1 for _ in self.walk())

    def copy(self) -> "OutlineNode":
        return copy.deepcopy(self)

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "title": self.title,
            "description": self.description,
            "linked_papers": sorted(self.linked_papers),
            "children": [c.to_dict() for c in self.children],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "OutlineNode":
        return cls(
            node_id=data["node_id"],
            title=data["title"],
            description=data.get("description", ""),
            children=[cls.from_dict(c) for c in data.get("children", [])],
            linked_papers=set(data.get("linked_papers", [])),
        )


# --- text form ----------------------------------------------------------

def _canonical(text: str) -> str:
    return " ".join(text.strip().lower().split())


def assign_node_ids(root: OutlineNode) -> OutlineNode:
    """Ids are a hash of the lowercase title path; repeated paths get a suffix."""
    used: dict[str, int] = {}

    def visit(node: OutlineNode, path: str) -> None:
        base = hashlib.sha1(path.encode("utf-8")).hexdigest()[:8]
        used[base] = used.get(base, 0) + 1
        node.node_id = base if used[base] == 1 else f"{base}-{used[base]}"
        for child in node.children:
            visit(child, f"{path}>{_canonical(child.title)}")

    visit(root, _canonical(root.title))
    return root


def parse_outline(text: str, topic: str) -> OutlineNode:
    """
    Parse the heading format.  The root is always titled ``topic``; a missing
    ``#`` line is tolerated.  Raises :class:`MalformedOutline` on depth > 3,
    skipped levels, a second root or an empty title.
    """
    root = OutlineNode("", topic.strip())
    stack: list[OutlineNode] = [root]
    seen_root = False
    current = root
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("```"):
            continue
        match = HEADING_RE.match(line)
        if match:
            level = len(match.group(1)) - 1
            title = NUMBERING_RE.sub("", match.group(2)).strip()
            if level == 0:
                if seen_root or len(stack) > 1:
                    raise MalformedOutline("outline has more than one root heading")
                seen_root = True
                current = root
                continue
            if level > config.MAX_OUTLINE_DEPTH:
                raise MalformedOutline(f"heading '{title}' is deeper than {config.MAX_OUTLINE_DEPTH} levels")
            if level > len(stack):
                raise MalformedOutline(f"heading '{title}' skips a level")
            if not title:
                raise MalformedOutline("outline contains an empty heading")
            del stack[level:]
            current = OutlineNode("", title)
            stack[-1].children.append(current)
            stack.append(current)
            continue
        note = line[1:].strip() if line.startswith(">") else line
        if note:
            current.description = f"{current.description} {note}".strip()
    return assign_node_ids(root)


def validate_outline(root: OutlineNode) -> None:
    for node, depth in root.walk():
        if not node.title.strip():
            raise MalformedOutline("outline node with an empty title")
        if depth > config.MAX_OUTLINE_DEPTH:
            raise MalformedOutline(f"node '{node.title}' is deeper than {config.MAX_OUTLINE_DEPTH} levels")
        if depth >= 1 and not node.description.strip():
            raise MalformedOutline(f"section '{node.title}' has no description")


def serialize_outline(root: OutlineNode) -> str:
    lines: list[str] = []
    for node, depth in root.walk():
        lines.append(f"{'#' * (depth + 1)} {node.title}")
        if node.description:
            lines.append(f"> {node.description}")
    return "\n".join(lines) + "\n"


def outline_hash(root: OutlineNode) -> str:
    return hashlib.sha1(serialize_outline(root).encode("utf-8")).hexdigest()[:12]


def canonical_paths(root: OutlineNode) -> list[str]:
    """Sorted lowercase title paths ``parent>child``; the structure Sim compares."""
    paths: list[str] = []

    def visit(node: OutlineNode, prefix: str) -> None:
        path = f"{prefix}>{_canonical(node.title)}" if prefix else _canonical(node.title)
        paths.append(path)
        for child in node.children:
            visit(child, path)

    visit(root, "")
    return sorted(paths)


def is_intro_title(title: str) -> bool:
    return bool(INTRO_RE.search(title))


def is_conclusion_title(title: str) -> bool:
    return bool(CONCLUSION_RE.search(title))


# --- similarity gate ----------------------------------------------------

def _title_tokens(root: OutlineNode) -> set[str]:
    return {w for node, _ in root.walk() for w in WORD_RE.findall(node.title.lower())}


def _depth_profile(root: OutlineNode) -> np.ndarray:
    profile = np.zeros(config.MAX_OUTLINE_DEPTH + 1)
    for _, depth in root.walk():
        profile[min(depth, config.MAX_OUTLINE_DEPTH)] += 1
    return profile


def outline_similarity(
    a: OutlineNode,
    b: OutlineNode,
    method: str = "lexical",
    gateway: Optional[Gateway] = None,
) -> float:
    """
    Symmetric similarity in [0, 1]; exactly 1.0 iff the canonical path lists
    are identical.  ``lexical`` blends title-token Jaccard with the cosine of
    the per-depth node counts; ``embedding`` compares embeddings of the
    canonical forms.
    """
    paths_a, paths_b = canonical_paths(a), canonical_paths(b)
    if paths_a == paths_b:
        return 1.0
    if method == "embedding":
        if gateway is None:
            raise ValueError("embedding similarity needs a gateway")
        va = gateway.embed("\n".join(paths_a)).values
        vb = gateway.embed("\n".join(paths_b)).values
        cos = float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
        score = (1.0 + cos) / 2.0
    else:
        ta, tb = _title_tokens(a), _title_tokens(b)
        union = ta | tb
        jaccard = len(ta & tb) / len(union) if union else 1.0
        pa, pb = _depth_profile(a), _depth_profile(b)
        depth_cos = float(pa @ pb / (np.linalg.norm(pa) * np.linalg.norm(pb)))
        score = config.SIM_TITLE_WEIGHT * jaccard + config.SIM_DEPTH_WEIGHT * depth_cos
    return float(min(max(score, 0.0), SIM_CAP))


def gate_update(
    current: OutlineNode,
    candidate: OutlineNode,
    tau: float,
    trace: Optional[RunTrace] = None,
    method: str = "lexical",
    gateway: Optional[Gateway] = None,
) -> OutlineNode:
    """Return ``candidate`` when its similarity to ``current`` is >= ``tau``."""
    sim = outline_similarity(current, candidate, method, gateway)
    accepted = sim >= tau
    chosen = candidate if accepted else current
    if trace is not None:
        trace.log_update(accepted, sim, tau, outline_hash(chosen))
    logger.debug("[OutlineEngine] Gate sim=%.4f tau=%.2f -> %s", sim, tau, "accept" if accepted else "reject")
    return chosen


# --- backend-driven steps -----------------------------------------------

def _require_topic(topic: str) -> str:
    if not topic or not topic.strip():
        raise ValueError("topic must be non-empty")
    return topic.strip()


def init_outline(gateway: Gateway, topic: str) -> OutlineNode:
    topic = _require_topic(topic)
    try:
        text = gateway.generate(gateway.request("init-outline", TOPIC=topic)).text
    except EmptyReply:
        return assign_node_ids(OutlineNode("", topic))
    try:
        outline = parse_outline(text, topic)
        validate_outline(outline)
    except MalformedOutline as e:
        logger.warning("[OutlineEngine] Initial outline unusable (%s); starting from the empty root", e)
        return assign_node_ids(OutlineNode("", topic))
    return outline


def seed_queries(gateway: Gateway, topic: str) -> list[str]:
    topic = _require_topic(topic)
    request = gateway.request("seed-queries", TOPIC=topic)
    keywords = dedupe_keywords(gateway.generate_structured(request, KeywordList).keywords)
    if not keywords:
        note = REPAIR_NOTE.format(error="the keyword list was empty")
        keywords = dedupe_keywords(
            gateway.generate_structured(replace(request, repair_notes=(note,)), KeywordList).keywords
        )
    if not keywords:
        raise NoSeeds(f"no seed keywords for topic '{topic}'")
    return keywords


def _generate_outline(gateway: Gateway, request, topic: str) -> OutlineNode:
    """Generate and parse an outline, re-prompting once with the parse error."""
    error = ""
    for attempt in range(2):
        notes = (REPAIR_NOTE.format(error=error),) if attempt else ()
        text = gateway.generate(replace(request, repair_notes=notes)).text
        try:
            outline = parse_outline(text, topic)
            validate_outline(outline)
            return outline
        except MalformedOutline as e:
            error = str(e)
            logger.info("[OutlineEngine] %s reply malformed: %s", request.role_tag, error)
    raise MalformedOutline(error)


def update_outline(gateway: Gateway, current: OutlineNode, batch: Sequence[PaperCard], keyword: str) -> OutlineNode:
    if not batch:
        raise ValueError("batch must be non-empty")
    request = gateway.request(
        "outline-update",
        TOPIC=current.title,
        KEYWORD=keyword,
        OUTLINE=serialize_outline(current),
        CARDS=format_cards(batch),
    )
    return _generate_outline(gateway, request, current.title)


def expand_queries(gateway: Gateway, outline: OutlineNode, history: Sequence[str]) -> list[str]:
    request = gateway.request(
        "expand-queries",
        TOPIC=outline.title,
        OUTLINE=serialize_outline(outline),
        HISTORY="\n".join(history) or "(none)",
    )
    return dedupe_keywords(gateway.generate_structured(request, KeywordList).keywords, exclude=history)


class StopDecision(BaseModel):
    decision: Literal["yes", "no"]
    reason: str = ""

    @field_validator("decision", mode="before")
    @classmethod
    def _normalize(cls, value: Any) -> Any:
        if isinstance(value, bool):
            return "yes" if value else "no"
        return str(value).strip().strip(".").lower()


class OutlineRunConfig(BaseModel):
    n: int = Field(default=config.RETRIEVAL_SIZE, ge=1)
    m: int = Field(default=config.REFERENCE_SIZE, ge=0)
    B: int = Field(default=config.BATCH_SIZE, ge=1)
    N_min: int = Field(default=config.N_MIN, ge=1)
    N_max: int = Field(default=config.N_MAX, ge=1)
    tau: float = Field(default=config.SIMILARITY_THRESHOLD, ge=0.0, le=1.0)
    max_sections: int = Field(default=config.MAX_SECTIONS, ge=1)
    seed: int = config.DEFAULT_SEED
    cutoff: Optional[date] = None
    drain_on_budget: bool = True
    similarity: Literal["lexical", "embedding"] = "lexical"

    @model_validator(mode="after")
    def _budget_order(self) -> "OutlineRunConfig":
        if self.N_min > self.N_max:
            raise ValueError("N_min must not exceed N_max")
        return self

    @classmethod
    def paper_scale(cls, **overrides: Any) -> "OutlineRunConfig":
        values: dict[str, Any] = {
            "N_min": config.PAPER_N_MIN,
            "N_max": config.PAPER_N_MAX,
            "max_sections": config.MAX_SECTIONS,
        }
        values.update(overrides)
        return cls(**values)


def should_stop(
    gateway: Gateway,
    outline: OutlineNode,
    history: Sequence[str],
    consulted_count: int,
    run_config: OutlineRunConfig,
) -> bool:
    if consulted_count < run_config.N_min:
        return False
    if consulted_count >= run_config.N_max:
        return True
    request = gateway.request(
        "stop-check",
        TOPIC=outline.title,
        OUTLINE=serialize_outline(outline),
        HISTORY="\n".join(history) or "(none)",
    )
    return gateway.generate_structured(request, StopDecision).decision == "yes"


# --- the loop -----------------------------------------------------------

class RecurrentOutliner:
    """
    One execution of the recurrent outline loop over a frozen store.

    ``run`` (a :class:`run_store.RunDirectory`) receives a numbered outline
    snapshot per accepted update and a pool snapshot after every pop.
    """

    def __init__(
        self,
        gateway: Gateway,
        store: CorpusStore,
        run_config: OutlineRunConfig,
        *,
        trace: Optional[RunTrace] = None,
        cards: Optional[CardCache] = None,
        run: Any = None,
    ):
        self.gateway = gateway
        self.store = store
        self.config = run_config
        self.trace = trace or RunTrace()
        self.cards = cards or CardCache(gateway)
        self.run = run
        self.pool = CardPool()
        self.rng = random.Random(run_config.seed)
        self._snapshots = 0
        self._pops = 0

    def _snapshot_outline(self, outline: OutlineNode) -> None:
        if self.run is not None:
            self.run.write_text(f"{config.OUTLINE_DIR}/{self._snapshots:03d}.md", serialize_outline(outline))
        self._snapshots += 1

    def _snapshot_pool(self) -> None:
        if self.run is not None:
            self.run.write_json(f"{config.POOL_DIR}/{self._pops:03d}.json", self.pool.to_dict())

    def _candidates(self, keyword: str) -> list[str]:
        """Retrieve(keyword, n) followed by the m best references of the hits."""
        hits = self.store.retrieve(keyword, self.config.n, self.config.cutoff)
        ids = [h.paper_id for h in hits]
        if self.config.m > 0 and ids:
            refs: set[str] = set()
            for pid in ids:
                refs.update(r.paper_id for r in self.store.top_refs(pid, self.config.m))
            refs.difference_update(ids)
            if self.config.cutoff is not None:
                refs = {r for r in refs if self.store.get(r).published < self.config.cutoff}
            if refs:
                query = self.store.query_vector(keyword)
                ids += [h.paper_id for h in self.store.rank_ids(query, refs, self.config.m)]
        return ids

    def fetch(self, keywords: Sequence[str]) -> int:
        """Retrieve, card and push every keyword in order; returns papers added."""
        planned: list[tuple[str, list[str]]] = []
        claimed = set(self.pool.consulted)
        for keyword in keywords:
            room = self.config.N_max - len(claimed)
            fresh = [pid for pid in self._candidates(keyword) if pid not in claimed]
            fresh = fresh[: max(room, 0)]
            claimed.update(fresh)
            planned.append((keyword, fresh))

        jobs = [(kw, pid) for kw, ids in planned for pid in ids]

        def card_for(job: tuple[str, str]) -> Union[PaperCard, CardExtractionFailed]:
            keyword, pid = job
            try:
                return self.cards.get_or_extract(self.store.get(pid), keyword)
            except CardExtractionFailed as e:
                return e

        results = dict(zip(jobs, self.gateway.fan_out(card_for, jobs)))
        before = len(self.pool.consulted)
        for keyword, ids in planned:
            cards: list[PaperCard] = []
            for pid in ids:
                result = results[(keyword, pid)]
                if isinstance(result, CardExtractionFailed):
                    logger.warning("[OutlineEngine] Skipping %s: %s", pid, result)
                    self.trace.log("card_failed", paper_id=pid, keyword=keyword, error=str(result))
                    continue
                cards.append(result)
            kept = self.pool.push(keyword, cards)
            self.trace.log(
                "pushed",
                keyword=keyword,
                paper_ids=[c.paper_id for c in kept],
                consulted=len(self.pool.consulted),
            )
        return len(self.pool.consulted) - before

    def consume(self, outline: OutlineNode) -> OutlineNode:
        keyword, cards = self.pool.pop()
        self._pops += 1
        self.trace.log("popped", keyword=keyword, cards=len(cards), consulted=len(self.pool.consulted))
        remaining = list(cards)
        while remaining:
            batch, remaining = sample_batch(remaining, self.config.B, self.rng)
            candidate = update_outline(self.gateway, outline, batch, keyword)
            chosen = gate_update(outline, candidate, self.config.tau, self.trace, self.config.similarity, self.gateway)
            self.trace.log("batch_consumed", keyword=keyword, paper_ids=[c.paper_id for c in batch])
            if chosen is candidate:
                outline = candidate
                self._snapshot_outline(outline)
        self._snapshot_pool()
        return outline

    def run_loop(self, topic: str) -> tuple[OutlineNode, CardPool, RunTrace]:
        topic = _require_topic(topic)
        cfg = self.config
        outline = init_outline(self.gateway, topic)
        self._snapshot_outline(outline)
        seeds = seed_queries(self.gateway, topic)
        self.trace.log("seeded", keywords=seeds)
        self.fetch(seeds)

        while True:
            consulted = len(self.pool.consulted)
            if not self.pool.is_empty():
                if consulted >= cfg.N_max and not cfg.drain_on_budget:
                    reason = "budget_max"
                    break
                outline = self.consume(outline)
                continue
            if consulted >= cfg.N_max:
                reason = "budget_max"
                break
            if consulted >= cfg.N_min:
                signal = should_stop(self.gateway, outline, self.pool.history, consulted, cfg)
                self.trace.log("stop_checked", signal=signal, consulted=consulted)
                if signal:
                    reason = "complete"
                    break
            keywords = expand_queries(self.gateway, outline, self.pool.history)
            keywords = [k for k in keywords if not self.pool.knows(k)]
            added = self.fetch(keywords) if keywords else 0
            self.trace.log("expanded", keywords=keywords, new_papers=added, consulted=len(self.pool.consulted))
            if added == 0:
                reason = "corpus_exhausted"
                break

        self.trace.log("stopped", reason=reason, consulted=len(self.pool.consulted))
        logger.info("[OutlineEngine] Stopped (%s) after consulting %d papers", reason, len(self.pool.consulted))
        return outline, self.pool, self.trace


def run_recurrent_outline(
    gateway: Gateway,
    store: CorpusStore,
    topic: str,
    run_config: OutlineRunConfig,
    *,
    trace: Optional[RunTrace] = None,
    cards: Optional[CardCache] = None,
    run: Any = None,
) -> tuple[OutlineNode, CardPool, RunTrace]:
    return RecurrentOutliner(gateway, store, run_config, trace=trace, cards=cards, run=run).run_loop(topic)


# --- refinement and relinking -------------------------------------------

def _refine_issues(outline: OutlineNode, max_sections: int) -> list[str]:
    sections = outline.children
    issues = []
    if len(sections) > max_sections:
        issues.append(f"{len(sections)} top-level sections exceed the maximum of {max_sections}")
    if not sections or not is_intro_title(sections[0].title):
        issues.append("the first section must be the introduction")
    if not sections or not is_conclusion_title(sections[-1].title):
        issues.append("the last section must cover future directions or the conclusion")
    return issues


def refine_outline(
    gateway: Gateway,
    research_outline: OutlineNode,
    max_sections: int = config.MAX_SECTIONS,
    trace: Optional[RunTrace] = None,
) -> OutlineNode:
    """Writing-oriented outline: introduction first, conclusion-role last, bounded width."""
    request = gateway.request(
        "refine-outline",
        TOPIC=research_outline.title,
        OUTLINE=serialize_outline(research_outline),
        **{"MAX SECTIONS": max_sections},
    )
    issues: list[str] = []
    for attempt in range(2):
        notes = (REPAIR_NOTE.format(error="; ".join(issues)),) if attempt else ()
        outline = _generate_outline(gateway, replace(request, repair_notes=notes), research_outline.title)
        issues = _refine_issues(outline, max_sections)
        if not issues:
            if trace is not None:
                trace.log("refined", sections=[c.title for c in outline.children])
            return outline
        logger.info("[OutlineEngine] Refined outline rejected: %s", "; ".join(issues))
    raise MalformedOutline("; ".join(issues))


def relink_papers(
    gateway: Gateway,
    outline: OutlineNode,
    cards: Sequence[PaperCard],
    trace: Optional[RunTrace] = None,
) -> OutlineNode:
    """Attach every card's paper to the most similar leaf (ties go to the earlier leaf)."""
    outline = outline.copy()
    leaves = outline.leaves()
    for leaf in leaves:
        leaf.linked_papers = set()
    if cards:
        leaf_vecs = np.vstack([gateway.embed(f"{leaf.title}\n{leaf.description}").values for leaf in leaves])
        leaf_vecs = leaf_vecs / np.linalg.norm(leaf_vecs, axis=1, keepdims=True)
        for card in cards:
            vec = gateway.embed(card.text()).values
            scores = leaf_vecs @ (vec / np.linalg.norm(vec))
            leaves[int(np.argmax(scores))].linked_papers.add(card.paper_id)
    unlinked = [leaf.node_id for leaf in leaves if not leaf.linked_papers]
    if trace is not None:
        for node_id in unlinked:
            trace.log("leaf_unlinked", node_id=node_id)
        trace.log("relinked", papers=len(cards), unlinked=unlinked)
    return outline
