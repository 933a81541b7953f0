"""Paper cards and the keyword -> cards pool driving the outline loop."""

from __future__ import annotations

import json
import logging
import os
import random
import re
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence, Union

from pydantic import BaseModel, Field, field_validator

import config
from backend_gateway import Gateway
from corpus_store import PaperRecord
from errors import BackendFailure, CardExtractionFailed, DuplicateKeyword, PoolEmpty

logger = logging.getLogger(__name__)

EMPTY_CARD_NOTE = (
    "Your previous reply contained no statements. Every list must hold at least "
    "one short statement taken from the paper."
)
CARD_FIELDS = ("contributions", "methods", "findings")


def clean_statements(items: Sequence[str]) -> list[str]:
    """Trim, collapse whitespace, drop blanks and repeated statements."""
    seen: set[str] = set()
    out: list[str] = []
    for item in items:
        text = " ".join(str(item).split())
        if text and text.lower() not in seen:
            seen.add(text.lower())
            out.append(text)
    return out


@dataclass
class PaperCard:
    paper_id: str
    title: str
    contributions: list[str] = field(default_factory=list)
    methods: list[str] = field(default_factory=list)
    findings: list[str] = field(default_factory=list)
    source_keyword: str = ""

    def statements(self) -> list[str]:
        return self.contributions + self.methods + self.findings

    def is_empty(self) -> bool:
        return not self.statements()

    def text(self) -> str:
        """Card content used for similarity against outline nodes."""
        return " ".join([self.title] + self.statements())

    def to_dict(self) -> dict[str, Any]:
        return {
            "paper_id": self.paper_id,
            "title": self.title,
            "contributions": list(self.contributions),
            "methods": list(self.methods),
            "findings": list(self.findings),
            "source_keyword": self.source_keyword,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PaperCard":
        return cls(**{k: data[k] for k in ("paper_id", "title", *CARD_FIELDS, "source_keyword") if k in data})


class CardShape(BaseModel):
    contributions: list[str] = Field(default_factory=list)
    methods: list[str] = Field(default_factory=list)
    findings: list[str] = Field(default_factory=list)

    @field_validator("contributions", "methods", "findings", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [value]
        if isinstance(value, list):
            return [v for v in value if isinstance(v, str)]
        return value


def card_inputs(paper: PaperRecord, max_chars: int = config.CARD_INPUT_CHARS) -> dict[str, str]:
    """Title, abstract and first body section, truncated to ``max_chars`` in total."""
    abstract = paper.abstract.strip()[:max_chars]
    body = paper.first_section()[: max(max_chars - len(abstract), 0)]
    return {"TITLE": paper.title, "ABSTRACT": abstract or "(none)", "BODY": body or "(none)"}


def extract_card(
    gateway: Gateway,
    paper: PaperRecord,
    keyword: str,
    max_chars: int = config.CARD_INPUT_CHARS,
) -> PaperCard:
    """Distill ``paper`` into a card; an empty card gets one repair re-prompt."""
    request = gateway.request("card-extract", KEYWORD=keyword, **card_inputs(paper, max_chars))
    try:
        shape = gateway.generate_structured(request, CardShape)
        card = _to_card(paper, keyword, shape)
        if card.is_empty():
            logger.info("[CardEngine] Empty card for %s, re-prompting", paper.paper_id)
            shape = gateway.generate_structured(replace(request, repair_notes=(EMPTY_CARD_NOTE,)), CardShape)
            card = _to_card(paper, keyword, shape)
    except BackendFailure as e:
        raise CardExtractionFailed(f"{paper.paper_id}: {e}") from e
    if card.is_empty():
        raise CardExtractionFailed(f"{paper.paper_id}: card has no statements after repair")
    return card


def _to_card(paper: PaperRecord, keyword: str, shape: CardShape) -> PaperCard:
    return PaperCard(
        paper_id=paper.paper_id,
        title=paper.title,
        contributions=clean_statements(shape.contributions),
        methods=clean_statements(shape.methods),
        findings=clean_statements(shape.findings),
        source_keyword=keyword,
    )


def format_cards(cards: Sequence[PaperCard]) -> str:
    """Cards as prompt text: ``[id] Title`` then one indented line per field."""
    blocks = []
    for card in cards:
        lines = [f"[{card.paper_id}] {card.title}"]
        for name in CARD_FIELDS:
            values = getattr(card, name)
            if values:
                lines.append(f"  {name}: " + "; ".join(values))
        blocks.append("\n".join(lines))
    return "\n".join(blocks)


def format_paper_list(cards: Sequence[PaperCard]) -> str:
    blocks = []
    for card in cards:
        lines = [f"paper_title: {card.title}"]
        for name in CARD_FIELDS:
            lines.append(f"{name}: " + "; ".join(getattr(card, name)))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def _norm_keyword(keyword: str) -> str:
    return " ".join(keyword.lower().split())


class CardPool:
    """
    FIFO map keyword -> cards plus the consulted-paper set and the list of
    activated keywords.  A paper is consulted at most once per run.
    """

    def __init__(self) -> None:
        self.entries: "OrderedDict[str, list[PaperCard]]" = OrderedDict()
        self.consulted: set[str] = set()
        self.history: list[str] = []
        self._seen: set[str] = set()

    def __len__(self) -> int:
        return len(self.entries)

    def is_empty(self) -> bool:
        return not self.entries

    def knows(self, keyword: str) -> bool:
        return _norm_keyword(keyword) in self._seen

    def push(self, keyword: str, cards: Sequence[PaperCard]) -> list[PaperCard]:
        """Queue ``keyword``; returns the cards kept after dropping consulted papers."""
        if self.knows(keyword):
            raise DuplicateKeyword(f"keyword '{keyword}' was already queued or activated")
        kept: list[PaperCard] = []
        for card in cards:
            if card.paper_id in self.consulted:
                continue
            self.consulted.add(card.paper_id)
            kept.append(card)
        self.entries[keyword] = kept
        self._seen.add(_norm_keyword(keyword))
        return kept

    def pop(self) -> tuple[str, list[PaperCard]]:
        if not self.entries:
            raise PoolEmpty("card pool is empty")
        keyword, cards = self.entries.popitem(last=False)
        self.history.append(keyword)
        return keyword, cards

    def to_dict(self) -> dict[str, Any]:
        return {
            "entries": [[k, [c.to_dict() for c in v]] for k, v in self.entries.items()],
            "consulted": sorted(self.consulted),
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CardPool":
        pool = cls()
        for keyword, cards in data.get("entries", []):
            pool.entries[keyword] = [PaperCard.from_dict(c) for c in cards]
            pool._seen.add(_norm_keyword(keyword))
        pool.consulted = set(data.get("consulted", []))
        pool.history = list(data.get("history", []))
        pool._seen.update(_norm_keyword(k) for k in pool.history)
        return pool


def sample_batch(
    cards: Sequence[PaperCard],
    B: int,
    seed: Union[int, random.Random],
) -> tuple[list[PaperCard], list[PaperCard]]:
    """Seeded sampling without replacement; the remainder keeps input order."""
    if B < 1:
        raise ValueError("batch size must be >= 1")
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    chosen = set(rng.sample(range(len(cards)), min(B, len(cards))))
    batch = [c for i, c in enumerate(cards) if i in chosen]
    remainder = [c for i, c in enumerate(cards) if i not in chosen]
    return batch, remainder


def _card_filename(paper_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", paper_id) + ".json"


class CardCache:
    """
    Cards of one run keyed by paper id.  Each paper is extracted once; with a
    directory the cards are persisted as ``<paper_id>.json`` and reloaded.
    """

    def __init__(self, gateway: Gateway, directory: Optional[str] = None, max_chars: int = config.CARD_INPUT_CHARS):
        self.gateway = gateway
        self.directory = directory
        self.max_chars = max_chars
        self.cards: dict[str, PaperCard] = {}
        self._lock = threading.Lock()
        self._paper_locks: dict[str, threading.Lock] = {}
        if directory and os.path.isdir(directory):
            for name in sorted(os.listdir(directory)):
                if name.endswith(".json"):
                    with open(os.path.join(directory, name), "r", encoding="utf-8") as f:
                        card = PaperCard.from_dict(json.load(f))
                    self.cards[card.paper_id] = card

    def __contains__(self, paper_id: object) -> bool:
        return paper_id in self.cards

    def get(self, paper_id: str) -> Optional[PaperCard]:
        return self.cards.get(paper_id)

    def put(self, card: PaperCard) -> None:
        with self._lock:
            self.cards[card.paper_id] = card
            if self.directory:
                os.makedirs(self.directory, exist_ok=True)
                with open(os.path.join(self.directory, _card_filename(card.paper_id)), "w", encoding="utf-8") as f:
                    json.dump(card.to_dict(), f, indent=2, sort_keys=True)
                    f.write("\n")

    def _paper_lock(self, paper_id: str) -> threading.Lock:
        with self._lock:
            return self._paper_locks.setdefault(paper_id, threading.Lock())

    def get_or_extract(self, paper: PaperRecord, keyword: str) -> PaperCard:
        card = self.cards.get(paper.paper_id)
        if card is not None:
            return card
        with self._paper_lock(paper.paper_id):
            card = self.cards.get(paper.paper_id)
            if card is None:
                card = extract_card(self.gateway, paper, keyword, self.max_chars)
                self.put(card)
        return card
