"""Deterministic scripted backend used by tests and ``--backend mock``.

A script maps a role tag to the replies for successive calls of that role,
so ``(role_tag, call_index) -> reply`` fully determines a run.  Entries may be
a list of strings (the last one repeats once exhausted), a single string or a
callable ``(request, call_index) -> str``.  Roles absent from the script fall
back to built-in responders that derive a plausible reply from the request
bindings, which lets the full pipeline run offline.

Embeddings are a seeded hash of the text: every lowercase word maps to a
pseudo-random gaussian vector, the vectors are summed and L2-normalized, so
texts that share words have correlated vectors.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import defaultdict
from functools import lru_cache
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

import config
from backend_gateway import PromptRequest, Usage
from errors import TransportError

logger = logging.getLogger(__name__)

ScriptEntry = Union[str, Sequence[str], Callable[[PromptRequest, int], str]]

WORD_RE = re.compile(r"\w+")
CITE_RE = re.compile(r"\[([^\[\]]+)\]")


@lru_cache(maxsize=65536)
def _word_vector(word: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{word}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    vec = rng.standard_normal(dim)
    vec.setflags(write=False)
    return vec


def hash_embedding(text: str, dim: int = config.MOCK_EMBEDDING_DIM, seed: int = 0) -> np.ndarray:
    words = WORD_RE.findall(text.lower()) or [text]
    vec = np.zeros(dim)
    for word in words:
        vec = vec + _word_vector(word, dim, seed)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec = _word_vector(text, dim, seed).copy()
        norm = np.linalg.norm(vec)
    return vec / norm


class MockBackend:
    """
    Scripted backend.

    Parameters
    ----------
    script : dict, optional
        role tag -> reply list / reply / callable.
    embeddings : dict, optional
        Exact text -> vector overrides (normalized on use).
    failures : int
        The first ``failures`` calls (completions and embeddings) raise
        :class:`TransportError`, simulating an unreachable endpoint.
    defaults : bool
        Use the built-in responders for unscripted roles.
    """

    def __init__(
        self,
        script: Optional[dict[str, ScriptEntry]] = None,
        *,
        embeddings: Optional[dict[str, Sequence[float]]] = None,
        dim: int = config.MOCK_EMBEDDING_DIM,
        seed: int = 0,
        failures: int = 0,
        defaults: bool = True,
        backend_id: str = "mock",
    ):
        self.script = dict(script or {})
        self.embeddings = {k: np.asarray(v, dtype=np.float64) for k, v in (embeddings or {}).items()}
        self.dim = dim
        self.seed = seed
        self.failures = failures
        self.defaults = defaults
        self.backend_id = backend_id
        self.call_counts: dict[str, int] = defaultdict(int)
        self.calls: list[tuple[str, str]] = []
        self.attempts = 0

    @classmethod
    def from_file(cls, path: str, **kwargs: Any) -> "MockBackend":
        with open(path, "r", encoding="utf-8") as f:
            return cls(json.load(f), **kwargs)

    def _maybe_fail(self) -> None:
        self.attempts += 1
        if self.failures > 0:
            self.failures -= 1
            raise TransportError("mock endpoint unreachable")

    def complete(self, prompt: str, request: PromptRequest) -> tuple[str, Optional[Usage]]:
        self._maybe_fail()
        role = request.role_tag
        index = self.call_counts[role]
        self.call_counts[role] += 1
        self.calls.append((role, prompt))
        entry = self.script.get(role)
        if entry is None:
            if not self.defaults or role not in DEFAULT_RESPONDERS:
                raise KeyError(f"mock backend has no reply for role '{role}'")
            return DEFAULT_RESPONDERS[role](request, index), None
        if callable(entry):
            return entry(request, index), None
        if isinstance(entry, str):
            return entry, None
        if not entry:
            raise KeyError(f"mock script for role '{role}' is empty")
        return entry[min(index, len(entry) - 1)], None

    def embed(self, text: str) -> Sequence[float]:
        self._maybe_fail()
        if text in self.embeddings:
            vec = self.embeddings[text]
            return vec / np.linalg.norm(vec)
        return hash_embedding(text, self.dim, self.seed)

    def calls_for(self, role: str) -> int:
        return self.call_counts.get(role, 0)


class RecordingBackend:
    """Wraps a backend and records replies per role tag as a replayable script."""

    def __init__(self, inner: Any):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.replies: dict[str, list[str]] = defaultdict(list)

    def complete(self, prompt: str, request: PromptRequest) -> tuple[str, Optional[Usage]]:
        text, usage = self.inner.complete(prompt, request)
        self.replies[request.role_tag].append(text)
        return text, usage

    def embed(self, text: str) -> Sequence[float]:
        return self.inner.embed(text)

    def script(self) -> dict[str, list[str]]:
        return {role: list(texts) for role, texts in self.replies.items()}

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.script(), f, indent=2, sort_keys=True)


# --- built-in responders -------------------------------------------------

def _sentences(text: str) -> list[str]:
    parts = re.split(r"(?<=[.!?])\s+", " ".join(text.split()))
    return [p.strip() for p in parts if len(p.strip()) > 3]


def _short(text: str, words: int) -> str:
    return " ".join(text.split()[:words])


def _card_titles(cards_text: str) -> list[str]:
    return re.findall(r"^\[[^\]]+\] (.+)$", cards_text, flags=re.MULTILINE)


def _paper_titles(paper_list: str) -> list[str]:
    return [t.strip() for t in re.findall(r"^paper_title: (.+)$", paper_list, flags=re.MULTILINE)]


def _init_outline(request: PromptRequest, index: int) -> str:
    return f"# {request.bindings['TOPIC']}\n"


def _seed_queries(request: PromptRequest, index: int) -> str:
    topic = request.bindings["TOPIC"]
    return json.dumps({"keywords": [topic, f"{topic} methods", f"{topic} evaluation"]})


def _card_extract(request: PromptRequest, index: int) -> str:
    b = request.bindings
    sents = _sentences(b["ABSTRACT"]) or [b["TITLE"]]
    body = _sentences(b["BODY"])
    card = {
        "contributions": [sents[0]],
        "methods": [sents[1] if len(sents) > 1 else f"The paper studies {b['TITLE']}."],
        "findings": [body[0] if body else sents[-1]],
    }
    return json.dumps(card)


def _outline_update(request: PromptRequest, index: int) -> str:
    from outline_engine import OutlineNode, parse_outline, serialize_outline

    b = request.bindings
    outline = parse_outline(b["OUTLINE"], b["TOPIC"])
    keyword = b["KEYWORD"]
    section = next((c for c in outline.children if c.title.lower() == keyword.lower()), None)
    if section is None:
        outline.children.append(OutlineNode(
            node_id="",
            title=keyword[:1].upper() + keyword[1:],
            description=f"Work on {keyword}.",
        ))
    else:
        titles = _card_titles(b["CARDS"])
        if titles:
            title = _short(titles[0], 4)
            if all(c.title != title for c in section.children):
                section.children.append(OutlineNode(
                    node_id="",
                    title=title,
                    description=f"Approaches related to {titles[0]}.",
                ))
    return serialize_outline(outline)


def _expand_queries(request: PromptRequest, index: int) -> str:
    b = request.bindings
    topic = b["TOPIC"]
    history = {h.strip().lower() for h in b["HISTORY"].splitlines() if h.strip()}
    candidates = [f"{topic} {suffix}" for suffix in ("applications", "benchmarks", "challenges", "theory", "efficiency")]
    fresh = [c for c in candidates if c.lower() not in history][:2]
    return json.dumps({"keywords": fresh})


def _stop_check(request: PromptRequest, index: int) -> str:
    return json.dumps({"decision": "yes", "reason": "The outline covers the main directions."})


def _refine_outline(request: PromptRequest, index: int) -> str:
    from outline_engine import OutlineNode, is_conclusion_title, is_intro_title, parse_outline, serialize_outline

    b = request.bindings
    outline = parse_outline(b["OUTLINE"], b["TOPIC"])
    limit = int(b["MAX SECTIONS"])
    body = [c for c in outline.children if not is_intro_title(c.title) and not is_conclusion_title(c.title)]
    body = body[: max(limit - 2, 0)]
    intro = OutlineNode("", "Introduction", f"Motivation and scope of a survey on {outline.title}.")
    future = OutlineNode("", "Future Directions", f"Open problems and research directions for {outline.title}.")
    outline.children = [intro] + body + [future]
    return serialize_outline(outline)


def _draft_subsection(request: PromptRequest, index: int) -> str:
    b = request.bindings
    titles = _paper_titles(b["PAPER LIST"])
    section = b["SECTION"]
    paragraphs = [f"This subsection discusses {section.lower()}. {b['DESCRIPTION']}"]
    for i in range(0, min(len(titles), 4), 2):
        group = titles[i:i + 2]
        cites = "; ".join(group)
        paragraphs.append(
            f"Recent studies report progress on {section.lower()} [{cites}]. "
            f"These results motivate further analysis of the open questions."
        )
    return "\n\n".join(paragraphs)


def _draft_stub(request: PromptRequest, index: int) -> str:
    b = request.bindings
    return (
        f"This section examines {b['SECTION'].lower()}. "
        f"It is organized into the subsections that follow, each focusing on one aspect of the theme."
    )


def _review_section(request: PromptRequest, index: int) -> str:
    return json.dumps({"issues": [], "severity": 0})


def _refine_section(request: PromptRequest, index: int) -> str:
    return request.bindings["DRAFT"]


def _propose_visuals(request: PromptRequest, index: int) -> str:
    b = request.bindings
    titles: list[str] = []
    for group in CITE_RE.findall(b["BODY"]):
        for t in group.split(";"):
            t = t.strip()
            if t and t not in titles:
                titles.append(t)
    if len(titles) < 2:
        return json.dumps({"visuals": []})
    rows = [[_short(t, 8), "cited in this section"] for t in titles[:4]]
    return json.dumps({"visuals": [{
        "kind": "table",
        "requirement": f"Compare the works discussed in {b['SECTION']}.",
        "caption": f"Works discussed in {b['SECTION']}.",
        "header": ["Work", "Role"],
        "rows": rows,
    }]})


def _visual_critique(request: PromptRequest, index: int) -> str:
    return json.dumps({"issues": []})


def _revise_visual(request: PromptRequest, index: int) -> str:
    b = request.bindings
    visual = json.loads(b["VISUAL"])
    max_cols, max_chars, max_nodes = int(b["MAX COLS"]), int(b["MAX CHARS"]), int(b["MAX NODES"])
    if visual.get("kind") == "table":
        visual["header"] = [c[:max_chars] for c in visual.get("header", [])[:max_cols]]
        visual["rows"] = [[c[:max_chars] for c in row[:max_cols]] for row in visual.get("rows", [])]
    else:
        nodes = [n[:max_chars] for n in visual.get("nodes", [])[:max_nodes]]
        visual["nodes"] = nodes
        visual["edges"] = [e for e in visual.get("edges", []) if e[0][:max_chars] in nodes and e[1][:max_chars] in nodes]
    if not visual.get("caption"):
        visual["caption"] = visual.get("requirement") or "Overview."
    return json.dumps(visual)


def _place_visual(request: PromptRequest, index: int) -> str:
    count = len(re.findall(r"^\[\d+\]", request.bindings["PARAGRAPHS"], flags=re.MULTILINE))
    return json.dumps({"paragraph": max(count - 1, 0)})


def _criteria_judge(request: PromptRequest, index: int) -> str:
    survey = request.bindings["SURVEY"]
    score = 3 + len(survey.split()) % 3
    return json.dumps({"rationale": f"The survey has {len(survey.split())} words.", "score": score})


def _nli_check(request: PromptRequest, index: int) -> str:
    b = request.bindings
    claim = {w for w in WORD_RE.findall(b["CLAIM"].lower()) if len(w) > 3}
    source = {w for w in WORD_RE.findall(b["SOURCE"].lower()) if len(w) > 3}
    return "Yes" if len(claim & source) >= 2 else "No"


def _arena_review(request: PromptRequest, index: int) -> str:
    b = request.bindings
    first, second = len(b["CONTENT 1"]), len(b["CONTENT 2"])
    if first == second:
        chosen = "1" if b["TITLE 1"] <= b["TITLE 2"] else "2"
    else:
        chosen = "1" if first > second else "2"
    return json.dumps({
        "paper_1_review": "Paper 1 reviewed.",
        "paper_2_review": "Paper 2 reviewed.",
        "chosen_paper": chosen,
    })


DEFAULT_RESPONDERS: dict[str, Callable[[PromptRequest, int], str]] = {
    "init-outline": _init_outline,
    "seed-queries": _seed_queries,
    "card-extract": _card_extract,
    "outline-update": _outline_update,
    "expand-queries": _expand_queries,
    "stop-check": _stop_check,
    "refine-outline": _refine_outline,
    "draft-subsection": _draft_subsection,
    "draft-stub": _draft_stub,
    "review-section": _review_section,
    "refine-section": _refine_section,
    "propose-visuals": _propose_visuals,
    "visual-critique": _visual_critique,
    "revise-visual": _revise_visual,
    "place-visual": _place_visual,
    "criteria-judge": _criteria_judge,
    "nli-check": _nli_check,
    "arena-review": _arena_review,
}
