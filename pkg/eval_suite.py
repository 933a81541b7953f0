"""Criteria scoring and NLI-based citation precision/recall for finished surveys."""

from __future__ import annotations

import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

from pydantic import BaseModel, field_validator

import config
from backend_gateway import REPAIR_NOTE, Gateway
from corpus_store import CorpusStore, PaperRecord
from draft_engine import CITE_RE
from errors import EmptyClaims, ScoreOutOfRange, UnparseableVerdict

logger = logging.getLogger(__name__)

CRITERIA = ("coverage", "structure", "relevance")
SCORE_TAG_RE = re.compile(r"<SCORE>\s*(\d+)\s*</SCORE>", re.IGNORECASE)
VERDICTS = {"yes": True, "no": False}


@dataclass(frozen=True)
class Judge:
    """A named evaluator backed by its own gateway (one model per judge)."""

    judge_id: str
    gateway: Gateway


# --- criteria scoring ---------------------------------------------------

@dataclass(frozen=True)
class CriterionScore:
    survey_id: str
    criterion: str
    judge_id: str
    score: int
    rationale: str


class ScoreShape(BaseModel):
    rationale: str
    score: int

    @field_validator("rationale")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("rationale must be non-empty")
        return value


def score_tag_fallback(text: str) -> Optional[dict]:
    match = SCORE_TAG_RE.search(text)
    if match is None:
        return None
    rationale = SCORE_TAG_RE.sub("", text).strip() or "(no rationale)"
    return {"rationale": rationale, "score": int(match.group(1))}


def load_criteria(gateway: Gateway) -> dict[str, dict[str, Any]]:
    return gateway.prompts.load_json(config.CRITERIA_FILE)


def score_criterion(
    judge: Judge,
    survey: str,
    criterion: str,
    *,
    topic: str,
    survey_id: str = "survey",
) -> CriterionScore:
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion '{criterion}'")
    if not survey.strip():
        raise ValueError("survey text must be non-empty")
    rubric = load_criteria(judge.gateway)[criterion]
    bindings = {
        "TOPIC": topic,
        "SURVEY": survey,
        "CRITERION DESCRIPTION": rubric["description"],
    }
    for i, text in enumerate(rubric["scores"], start=1):
        bindings[f"SCORE {i} DESCRIPTION"] = text
    request = judge.gateway.request("criteria-judge", **bindings)
    for attempt in range(2):
        shape = judge.gateway.generate_structured(request, ScoreShape, fallback=score_tag_fallback)
        if 1 <= shape.score <= 5:
            return CriterionScore(survey_id, criterion, judge.judge_id, shape.score, shape.rationale)
        logger.info("[EvalSuite] %s gave %s score %d, re-prompting", judge.judge_id, criterion, shape.score)
        note = REPAIR_NOTE.format(error=f"score {shape.score} is outside 1-5")
        request = replace(request, repair_notes=(note,))
    raise ScoreOutOfRange(f"{judge.judge_id} scored {criterion} {shape.score}")


def aggregate_scores(scores: Sequence[CriterionScore]) -> dict[str, dict[str, float]]:
    """Mean over judges per (survey, criterion) plus ``avg`` over criteria."""
    grouped: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for s in scores:
        grouped[s.survey_id][s.criterion].append(s.score)
    out: dict[str, dict[str, float]] = {}
    for survey_id, per in grouped.items():
        means = {c: sum(v) / len(v) for c, v in per.items()}
        means["avg"] = sum(means.values()) / len(means)
        out[survey_id] = means
    return out


# --- claims and NLI -----------------------------------------------------

@dataclass(frozen=True)
class Claim:
    text: str
    source_ids: tuple[str, ...]


@dataclass(frozen=True)
class CitationJudgment:
    claim: str
    source_id: str
    verdict: bool


def survey_body(text: str) -> str:
    """Survey text without the bibliography, code blocks and table rows."""
    body = re.split(r"^#{1,6}\s+References\s*$", text, maxsplit=1, flags=re.MULTILINE)[0]
    body = re.sub(r"^```.*?^```\s*$", "", body, flags=re.MULTILINE | re.DOTALL)
    lines = [l for l in body.splitlines() if not l.lstrip().startswith("|")]
    return "\n".join(lines)


def split_sentences(text: str) -> list[str]:
    """Sentence split that never breaks inside a bracketed citation group."""
    sentences: list[str] = []
    for paragraph in re.split(r"\n\s*\n", text):
        lines = [l for l in paragraph.splitlines() if l.strip() and not l.lstrip().startswith("#")]
        chunk = " ".join(" ".join(lines).split())
        depth = 0
        start = 0
        for i, ch in enumerate(chunk):
            if ch == "[":
                depth += 1
            elif ch == "]":
                depth = max(depth - 1, 0)
            elif ch in ".!?" and depth == 0 and (i + 1 == len(chunk) or chunk[i + 1] == " "):
                sentence = chunk[start:i + 1].strip()
                if sentence:
                    sentences.append(sentence)
                start = i + 1
        tail = chunk[start:].strip()
        if tail:
            sentences.append(tail)
    return sentences


def extract_claims(survey: str, resolve: Callable[[str], Optional[str]]) -> list[Claim]:
    """Every sentence carrying at least one resolvable citation marker."""
    claims: list[Claim] = []
    for sentence in split_sentences(survey_body(survey)):
        groups = CITE_RE.findall(sentence)
        if not groups:
            continue
        ids: list[str] = []
        for group in groups:
            for marker in group.split(";"):
                pid = resolve(marker.strip()) if marker.strip() else None
                if pid is not None and pid not in ids:
                    ids.append(pid)
        if not ids:
            logger.debug("[EvalSuite] No resolvable source in: %s", sentence)
            continue
        text = " ".join(CITE_RE.sub("", sentence).split()).replace(" .", ".")
        claims.append(Claim(text, tuple(ids)))
    return claims


def parse_verdict(text: str) -> Optional[bool]:
    word = text.strip().strip("\"'").strip().rstrip(".!").strip().lower()
    return VERDICTS.get(word)


def source_text(paper: PaperRecord, max_chars: int = config.CARD_INPUT_CHARS) -> str:
    return f"{paper.title}\n{paper.abstract}\n{paper.first_section()}"[:max_chars]


def nli_check(judge: Judge, claim: str, source: PaperRecord) -> CitationJudgment:
    request = judge.gateway.request("nli-check", CLAIM=claim, SOURCE=source_text(source))
    reply = ""
    for attempt in range(2):
        reply = judge.gateway.generate(request).text
        verdict = parse_verdict(reply)
        if verdict is not None:
            return CitationJudgment(claim, source.paper_id, verdict)
        note = REPAIR_NOTE.format(error="reply with exactly 'Yes' or 'No'")
        request = replace(request, repair_notes=(note,))
    raise UnparseableVerdict(f"verdict {reply!r} is neither yes nor no")


def citation_metrics(judgments: Sequence[Sequence[CitationJudgment]], strict: bool = False) -> tuple[float, float]:
    """
    ``(precision, recall)`` over per-claim judgment groups.  A claim counts as
    supported when any cited source supports it, or all of them when ``strict``.
    """
    if not judgments:
        raise EmptyClaims("no citation-bearing claims")
    pairs = 0
    true_pairs = 0
    supported = 0
    for group in judgments:
        if not group:
            raise ValueError("every claim needs at least one judgment")
        verdicts = [j.verdict for j in group]
        pairs += len(verdicts)
        true_pairs += sum(verdicts)
        supported += all(verdicts) if strict else any(verdicts)
    return true_pairs / pairs, supported / len(judgments)


# --- one survey end to end ----------------------------------------------

@dataclass
class SurveyEvaluation:
    survey_id: str
    scores: list[CriterionScore] = field(default_factory=list)
    claims: int = 0
    precision: Optional[float] = None
    recall: Optional[float] = None

    def means(self) -> dict[str, float]:
        return aggregate_scores(self.scores).get(self.survey_id, {})

    def to_dict(self) -> dict[str, Any]:
        return {
            "survey_id": self.survey_id,
            "means": self.means(),
            "scores": [vars(s) for s in self.scores],
            "claims": self.claims,
            "precision": self.precision,
            "recall": self.recall,
        }


def evaluate_survey(
    judges: Sequence[Judge],
    store: CorpusStore,
    survey: str,
    *,
    topic: str,
    survey_id: str,
    strict: bool = False,
) -> SurveyEvaluation:
    """All criteria from every judge; citation metrics from the first judge."""
    if not judges:
        raise ValueError("at least one judge is required")
    result = SurveyEvaluation(survey_id)
    for judge in judges:
        for criterion in CRITERIA:
            result.scores.append(score_criterion(judge, survey, criterion, topic=topic, survey_id=survey_id))
    claims = extract_claims(survey, store.resolve)
    result.claims = len(claims)
    if claims:
        nli_judge = judges[0]
        groups = [[nli_check(nli_judge, c.text, store.get(pid)) for pid in c.source_ids] for c in claims]
        result.precision, result.recall = citation_metrics(groups, strict)
    else:
        logger.info("[EvalSuite] %s has no citation-bearing claims", survey_id)
    return result


def score_table(evaluations: Sequence[SurveyEvaluation]) -> str:
    """Per-survey criteria means, their average and citation metrics as a markdown grid."""
    header = "| Survey | Coverage | Structure | Relevance | Avg. | Recall | Precision |"
    lines = [header, "|---|---|---|---|---|---|---|"]
    fmt = lambda v: "-" if v is None else f"{v:.2f}"
    for ev in evaluations:
        m = ev.means()
        lines.append(
            f"| {ev.survey_id} | {fmt(m.get('coverage'))} | {fmt(m.get('structure'))} | "
            f"{fmt(m.get('relevance'))} | {fmt(m.get('avg'))} | {fmt(ev.recall)} | {fmt(ev.precision)} |"
        )
    return "\n".join(lines) + "\n"
