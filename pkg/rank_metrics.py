"""Rank correlation and ranking-quality metrics used for meta-evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from errors import LengthMismatch

logger = logging.getLogger(__name__)


def ranks_from_scores(scores: Mapping[str, float]) -> dict[str, int]:
    """Rank 1 for the highest score; ties broken by ascending id."""
    order = sorted(scores, key=lambda i: (-scores[i], i))
    return {item: rank for rank, item in enumerate(order, start=1)}


def spearman(rank_x: Sequence[int], rank_y: Sequence[int]) -> float:
    """Spearman's rho for two tie-free rankings: 1 - 6 sum(d^2) / (n (n^2 - 1))."""
    if len(rank_x) != len(rank_y):
        raise LengthMismatch(f"rankings have lengths {len(rank_x)} and {len(rank_y)}")
    n = len(rank_x)
    if n < 2:
        raise ValueError("spearman needs at least two items")
    x = np.asarray(rank_x, dtype=np.int64)
    y = np.asarray(rank_y, dtype=np.int64)
    expected = np.arange(1, n + 1)
    if not (np.array_equal(np.sort(x), expected) and np.array_equal(np.sort(y), expected)):
        raise ValueError("rankings must be permutations of 1..n")
    d2 = int(np.sum((x - y) ** 2))
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))


def _gain(rel: float, gain: str) -> float:
    if gain == "linear":
        return float(rel)
    if gain == "exponential":
        return float(2.0 ** rel - 1.0)
    raise ValueError(f"unknown gain '{gain}'")


def dcg(relevances: Iterable[float], gain: str = "linear") -> float:
    return sum(_gain(r, gain) / np.log2(i + 2) for i, r in enumerate(relevances))


def ndcg_at_k(
    ranking: Sequence[str],
    relevance: Mapping[str, float],
    k: int,
    gain: str = "linear",
) -> float:
    """nDCG@k with log2 discount; the ideal order sorts by relevance, ties by id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    missing = [i for i in ranking if i not in relevance]
    if missing:
        raise ValueError(f"no relevance for {missing}")
    if any(relevance[i] < 0 for i in ranking):
        raise ValueError("relevance must be non-negative")
    ideal = sorted(ranking, key=lambda i: (-relevance[i], i))
    idcg = dcg((relevance[i] for i in ideal[:k]), gain)
    if idcg == 0.0:
        return 1.0
    return dcg((relevance[i] for i in ranking[:k]), gain) / idcg


@dataclass(frozen=True)
class MetaEvalRow:
    method: str
    spearman: Optional[float]
    ndcg2: Optional[float]
    ndcg3: Optional[float]
    topics: int


def meta_evaluate(
    method: str,
    topics: Mapping[str, tuple[Mapping[str, float], Mapping[str, float]]],
    gain: str = "linear",
) -> MetaEvalRow:
    """
    Agreement between a ranking method and citation counts, averaged over topics.

    ``topics`` maps a topic to ``(method_scores, citation_counts)`` over the
    same human surveys; a higher method score means a better rank.
    """
    rhos: list[float] = []
    n2: list[float] = []
    n3: list[float] = []
    for topic, (scores, citations) in sorted(topics.items()):
        ids = sorted(set(scores) & set(citations))
        if len(ids) < 2:
            logger.info("[RankMetrics] Skipping %s: fewer than two rated surveys", topic)
            continue
        method_rank = ranks_from_scores({i: scores[i] for i in ids})
        citation_rank = ranks_from_scores({i: citations[i] for i in ids})
        rhos.append(spearman([method_rank[i] for i in ids], [citation_rank[i] for i in ids]))
        ordering = sorted(ids, key=lambda i: method_rank[i])
        rel = {i: float(citations[i]) for i in ids}
        n2.append(ndcg_at_k(ordering, rel, 2, gain))
        n3.append(ndcg_at_k(ordering, rel, 3, gain))
    mean = lambda xs: float(np.mean(xs)) if xs else None
    return MetaEvalRow(method, mean(rhos), mean(n2), mean(n3), len(rhos))


def meta_table(rows: Sequence[MetaEvalRow]) -> str:
    fmt = lambda v: "-" if v is None else f"{v:.4f}"
    lines = ["| Rank Method | rho_s | nDCG@2 | nDCG@3 |", "|---|---|---|---|"]
    lines += [f"| {r.method} | {fmt(r.spearman)} | {fmt(r.ndcg2)} | {fmt(r.ndcg3)} |" for r in rows]
    return "\n".join(lines) + "\n"
