"""Pairwise survey arena: bidirectional multi-judge verdicts, Elo and rank summaries."""

from __future__ import annotations

import itertools
import json
import logging
import os
import random
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Literal, Mapping, Optional, Sequence

from pydantic import BaseModel, Field, field_validator

import config
from errors import MissingTopicData, ParseFailedAfterRepairs
from eval_suite import Judge
from rank_metrics import MetaEvalRow, meta_evaluate, meta_table
from run_store import write_json_line

logger = logging.getLogger(__name__)

CAPTION_RE = re.compile(r"^\*\*((?:Table|Figure) \d+)\.\*\*\s*(.*)$", re.MULTILINE)


# --- manifest -----------------------------------------------------------

class ArenaSurvey(BaseModel):
    id: str
    role: Literal["system", "human"]
    path: str
    system: Optional[str] = None
    title: Optional[str] = None
    citations: Optional[float] = None
    scores: Optional[dict[str, float]] = None
    content: str = ""

    def display_title(self) -> str:
        if self.title:
            return self.title
        match = re.search(r"^#\s+(.+)$", self.content, re.MULTILINE)
        return match.group(1).strip() if match else self.id

    def figures(self) -> str:
        found = [f"{label}: {caption}" for label, caption in CAPTION_RE.findall(self.content)]
        return "\n".join(found) or "(none)"

    def system_name(self) -> str:
        return self.system or self.id


class ArenaTopic(BaseModel):
    topic: str
    surveys: list[ArenaSurvey]

    def systems(self) -> list[ArenaSurvey]:
        return [s for s in self.surveys if s.role == "system"]

    def humans(self) -> list[ArenaSurvey]:
        return [s for s in self.surveys if s.role == "human"]


class ArenaManifest(BaseModel):
    topics: list[ArenaTopic] = Field(default_factory=list)


def load_arena_manifest(path: str) -> ArenaManifest:
    """Read the manifest and the survey files it names (paths relative to it)."""
    with open(path, "r", encoding="utf-8") as f:
        manifest = ArenaManifest.model_validate(json.load(f))
    base = os.path.dirname(os.path.abspath(path))
    for topic in manifest.topics:
        if len(topic.surveys) < 2:
            raise MissingTopicData(f"topic '{topic.topic}' lists fewer than two surveys")
        for survey in topic.surveys:
            with open(os.path.join(base, survey.path), "r", encoding="utf-8") as f:
                survey.content = f.read()
    return manifest


# --- judging ------------------------------------------------------------

@dataclass(frozen=True)
class PairwiseOutcome:
    topic: str
    first_id: str
    second_id: str
    judge_id: str
    winner: Optional[str]  # "first" | "second"; None when the verdict was void

    def __post_init__(self) -> None:
        if self.first_id == self.second_id:
            raise ValueError("a survey cannot be compared with itself")

    @property
    def void(self) -> bool:
        return self.winner is None

    def winner_id(self) -> str:
        return self.first_id if self.winner == "first" else self.second_id

    def loser_id(self) -> str:
        return self.second_id if self.winner == "first" else self.first_id

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class ArenaVerdict(BaseModel):
    paper_1_review: str = ""
    paper_2_review: str = ""
    chosen_paper: Literal["1", "2"]

    @field_validator("chosen_paper", mode="before")
    @classmethod
    def _as_text(cls, value: Any) -> Any:
        return str(value).strip()


def judge_pair(judge: Judge, topic: str, first: ArenaSurvey, second: ArenaSurvey) -> PairwiseOutcome:
    request = judge.gateway.request(
        "arena-review",
        TOPIC=topic,
        **{
            "TITLE 1": first.display_title(),
            "FIGURES 1": first.figures(),
            "CONTENT 1": first.content,
            "TITLE 2": second.display_title(),
            "FIGURES 2": second.figures(),
            "CONTENT 2": second.content,
        },
    )
    try:
        verdict = judge.gateway.generate_structured(request, ArenaVerdict)
        winner: Optional[str] = "first" if verdict.chosen_paper == "1" else "second"
    except ParseFailedAfterRepairs as e:
        logger.warning("[Arena] Void verdict from %s on %s vs %s: %s", judge.judge_id, first.id, second.id, e)
        winner = None
    return PairwiseOutcome(topic, first.id, second.id, judge.judge_id, winner)


def arena_round(topic: str, survey_a: ArenaSurvey, survey_b: ArenaSurvey, judges: Sequence[Judge]) -> list[PairwiseOutcome]:
    """Every judge sees the pair in both presentation orders."""
    if survey_a.id == survey_b.id:
        raise ValueError("arena round needs two distinct surveys")
    if not judges:
        raise ValueError("at least one judge is required")
    outcomes: list[PairwiseOutcome] = []
    for judge in judges:
        outcomes.append(judge_pair(judge, topic, survey_a, survey_b))
        outcomes.append(judge_pair(judge, topic, survey_b, survey_a))
    return outcomes


def arena_pairs(topic: ArenaTopic, pair_scope: str = config.PAIR_SCOPE) -> list[tuple[ArenaSurvey, ArenaSurvey]]:
    if pair_scope == "cross-only":
        return [(s, h) for s in sorted(topic.systems(), key=lambda x: x.id) for h in sorted(topic.humans(), key=lambda x: x.id)]
    if pair_scope == "all-pairs":
        return list(itertools.combinations(sorted(topic.surveys, key=lambda x: x.id), 2))
    raise ValueError(f"unknown pair scope '{pair_scope}'")


def run_arena(
    manifest: ArenaManifest,
    judges: Sequence[Judge],
    pair_scope: str = config.PAIR_SCOPE,
    log_path: Optional[str] = None,
) -> list[PairwiseOutcome]:
    outcomes: list[PairwiseOutcome] = []
    for topic in manifest.topics:
        pairs = arena_pairs(topic, pair_scope)
        if not pairs:
            raise MissingTopicData(f"topic '{topic.topic}' has no pairs under scope {pair_scope}")
        rounds = judges[0].gateway.fan_out(lambda p: arena_round(topic.topic, p[0], p[1], judges), pairs)
        for round_outcomes in rounds:
            for outcome in round_outcomes:
                if log_path:
                    write_json_line(log_path, outcome.to_dict())
                outcomes.append(outcome)
    void = sum(o.void for o in outcomes)
    logger.info("[Arena] %d outcomes, %d void", len(outcomes), void)
    return outcomes


# --- Elo ----------------------------------------------------------------

@dataclass(frozen=True)
class EloParams:
    initial: float = config.ELO_INITIAL
    K: float = config.ELO_K
    shuffles: int = config.ELO_SHUFFLES
    seed: int = config.DEFAULT_SEED


def expected_score(r_a: float, r_b: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))


def elo_update(r_winner: float, r_loser: float, K: float) -> tuple[float, float]:
    delta = K * (1.0 - expected_score(r_winner, r_loser))
    return r_winner + delta, r_loser - delta


def replay_elo(order: Sequence[PairwiseOutcome], roster: Sequence[str], params: EloParams) -> dict[str, float]:
    ratings = {sid: params.initial for sid in roster}
    for o in order:
        w, l = o.winner_id(), o.loser_id()
        ratings[w], ratings[l] = elo_update(ratings[w], ratings[l], params.K)
    return ratings


@dataclass
class RatingTable:
    ratings: dict[str, dict[str, float]] = field(default_factory=dict)

    def ordering(self, topic: str) -> list[str]:
        table = self.ratings[topic]
        return sorted(table, key=lambda sid: (-table[sid], sid))

    def ranks(self, topic: str) -> dict[str, int]:
        return {sid: r for r, sid in enumerate(self.ordering(topic), start=1)}

    def to_dict(self) -> dict[str, Any]:
        return {t: {"ratings": self.ratings[t], "ranks": self.ranks(t)} for t in sorted(self.ratings)}


def compute_elo(
    outcomes: Sequence[PairwiseOutcome],
    params: EloParams = EloParams(),
    roster: Optional[Mapping[str, Sequence[str]]] = None,
) -> RatingTable:
    """
    Online Elo replayed over ``params.shuffles`` seeded random orders per
    topic; the final rating is the mean over orders.  Void outcomes are skipped.
    """
    by_topic: dict[str, list[PairwiseOutcome]] = defaultdict(list)
    members: dict[str, set[str]] = defaultdict(set)
    for topic, ids in (roster or {}).items():
        members[topic].update(ids)
    for o in outcomes:
        members[o.topic].update((o.first_id, o.second_id))
        if not o.void:
            by_topic[o.topic].append(o)
    table = RatingTable()
    for topic in sorted(members):
        ids = sorted(members[topic])
        games = by_topic.get(topic, [])
        rng = random.Random(f"{params.seed}:{topic}")
        totals = {sid: 0.0 for sid in ids}
        shuffles = max(params.shuffles, 1)
        for _ in range(shuffles):
            order = list(games)
            rng.shuffle(order)
            for sid, rating in replay_elo(order, ids, params).items():
                totals[sid] += rating
        table.ratings[topic] = {sid: totals[sid] / shuffles for sid in ids}
    return table


# --- aggregation and reports --------------------------------------------

@dataclass(frozen=True)
class SystemSummary:
    system: str
    avg_rank: float
    above_human: float
    topics: int


def aggregate_rankings(
    table: RatingTable,
    systems: Mapping[str, Mapping[str, str]],
    humans: Mapping[str, Sequence[str]],
) -> list[SystemSummary]:
    """
    ``systems`` maps topic -> {system name: survey id}; ``humans`` maps topic ->
    human survey ids.  Avg. Rank is the mean rank over topics; >Human% the mean
    per-topic fraction of human surveys ranked strictly below the system.
    """
    names = sorted({name for per in systems.values() for name in per})
    ranks_by_system: dict[str, list[int]] = defaultdict(list)
    beaten_by_system: dict[str, list[float]] = defaultdict(list)
    for topic in sorted(systems):
        if topic not in table.ratings:
            raise MissingTopicData(f"no ratings for topic '{topic}'")
        human_ids = list(humans.get(topic, []))
        if not human_ids:
            raise MissingTopicData(f"topic '{topic}' has no human surveys")
        ranks = table.ranks(topic)
        for name in names:
            sid = systems[topic].get(name)
            if sid is None or sid not in ranks:
                raise MissingTopicData(f"system '{name}' has no survey in topic '{topic}'")
            missing = [h for h in human_ids if h not in ranks]
            if missing:
                raise MissingTopicData(f"topic '{topic}' lacks ratings for {missing}")
            ranks_by_system[name].append(ranks[sid])
            beaten_by_system[name].append(sum(ranks[h] > ranks[sid] for h in human_ids) / len(human_ids))
    return [
        SystemSummary(
            system=name,
            avg_rank=sum(ranks_by_system[name]) / len(ranks_by_system[name]),
            above_human=sum(beaten_by_system[name]) / len(beaten_by_system[name]),
            topics=len(ranks_by_system[name]),
        )
        for name in names
    ]


def ranking_table(summaries: Sequence[SystemSummary]) -> str:
    lines = ["| System | Avg. Rank | >Human% |", "|---|---|---|"]
    lines += [f"| {s.system} | {s.avg_rank:.2f} | {s.above_human * 100:.0f}% |" for s in summaries]
    return "\n".join(lines) + "\n"


def manifest_rosters(manifest: ArenaManifest) -> tuple[dict[str, dict[str, str]], dict[str, list[str]], dict[str, list[str]]]:
    """(systems per topic, humans per topic, full roster per topic)."""
    systems = {t.topic: {s.system_name(): s.id for s in t.systems()} for t in manifest.topics}
    humans = {t.topic: [h.id for h in t.humans()] for t in manifest.topics}
    roster = {t.topic: [s.id for s in t.surveys] for t in manifest.topics}
    return systems, humans, roster


def meta_evaluation(manifest: ArenaManifest, table: RatingTable) -> Optional[list[MetaEvalRow]]:
    """Arena (and criteria-score) rankings of human surveys against citation counts."""
    arena_topics = {}
    score_topics = {}
    for t in manifest.topics:
        cited = {h.id: h.citations for h in t.humans() if h.citations is not None}
        if len(cited) < 2:
            continue
        ratings = table.ratings.get(t.topic, {})
        arena_topics[t.topic] = ({i: ratings[i] for i in cited if i in ratings}, cited)
        scored = {h.id: sum(h.scores.values()) / len(h.scores) for h in t.humans() if h.scores and h.id in cited}
        if len(scored) >= 2:
            score_topics[t.topic] = (scored, cited)
    if not arena_topics:
        return None
    rows = [meta_evaluate("Arena", arena_topics)]
    if score_topics:
        rows.append(meta_evaluate("Scoring", score_topics))
    return rows


def write_reports(
    out_dir: str,
    table: RatingTable,
    summaries: Sequence[SystemSummary],
    meta_rows: Optional[Sequence[MetaEvalRow]],
) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    ratings_path = os.path.join(out_dir, "ratings.json")
    with open(ratings_path, "w", encoding="utf-8") as f:
        json.dump(table.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    paths.append(ratings_path)
    rank_path = os.path.join(out_dir, "rankings.md")
    with open(rank_path, "w", encoding="utf-8") as f:
        f.write(ranking_table(summaries))
    paths.append(rank_path)
    if meta_rows:
        meta_path = os.path.join(out_dir, "meta_evaluation.md")
        with open(meta_path, "w", encoding="utf-8") as f:
            f.write(meta_table(meta_rows))
        paths.append(meta_path)
    return paths
