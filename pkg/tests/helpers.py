"""Shared fixtures: offline gateways and small synthetic corpora."""

import os
import random
from datetime import date, timedelta
from typing import Optional

import config
from backend_gateway import Budget, Gateway
from corpus_store import CorpusStore, PaperRecord
from mock_backend import MockBackend

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SAMPLES = os.path.join(REPO_ROOT, "samples")

THEMES = [
    ("retrieval", ["dense", "retriever", "passage", "index", "query"]),
    ("generation", ["decoder", "generator", "fluency", "language", "model"]),
    ("evaluation", ["benchmark", "judge", "metric", "human", "preference"]),
    ("planning", ["outline", "section", "hierarchy", "plan", "structure"]),
    ("citation", ["citation", "support", "evidence", "claim", "source"]),
]


def mock_gateway(
    script: Optional[dict] = None,
    *,
    failures: int = 0,
    budget: Optional[Budget] = None,
    retries: int = config.RETRY_LIMIT,
    repairs: int = config.STRUCTURED_REPAIRS,
    defaults: bool = True,
    backend_id: str = "mock",
    embeddings: Optional[dict] = None,
) -> tuple[Gateway, MockBackend]:
    backend = MockBackend(script, failures=failures, defaults=defaults, backend_id=backend_id, embeddings=embeddings)
    gateway = Gateway(backend, budget=budget, retries=retries, repairs=repairs, sleep=lambda _: None)
    return gateway, backend


def synthetic_records(count: int = 30, seed: int = 0) -> list[PaperRecord]:
    """Papers spread over a few themes, each citing earlier papers of its theme."""
    rng = random.Random(seed)
    records: list[PaperRecord] = []
    for i in range(count):
        theme, words = THEMES[i % len(THEMES)]
        picked = rng.sample(words, 3)
        earlier = [r.paper_id for r in records if r.paper_id.startswith(f"{theme[:3]}-")]
        records.append(PaperRecord(
            paper_id=f"{theme[:3]}-{i:03d}",
            title=f"{picked[0].title()} {picked[1]} methods for {theme} study {i}",
            abstract=f"We study {theme} with {picked[0]} {picked[1]} and {picked[2]}. Results improve {theme} quality.",
            body=f"# Introduction\n{theme.title()} matters for {picked[2]}.\n# Method\nWe use {picked[0]} {picked[1]}.",
            published=date(2020, 1, 1) + timedelta(days=30 * i),
            references=rng.sample(earlier, min(3, len(earlier))),
        ))
    return records


def synthetic_store(count: int = 30, seed: int = 0, gateway: Optional[Gateway] = None) -> CorpusStore:
    gateway = gateway or mock_gateway()[0]
    store = CorpusStore(gateway)
    store.ingest(synthetic_records(count, seed))
    return store
