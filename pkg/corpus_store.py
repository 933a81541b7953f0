"""Retrieval database: exact cosine top-k, id/title lookup and date cutoffs."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import date
from typing import Any, Iterable, Optional, Union

import numpy as np

import config
from backend_gateway import EmbeddingVector, Gateway
from errors import (
    AmbiguousTitle,
    CorpusFormatError,
    EmptyQuery,
    NotFound,
    SurveyError,
    UnknownPaper,
)

logger = logging.getLogger(__name__)


def normalize_title(title: str) -> str:
    return " ".join(title.lower().split())


def parse_date(value: Union[str, date]) -> date:
    if isinstance(value, date):
        return value
    return date.fromisoformat(str(value).strip())


@dataclass
class PaperRecord:
    paper_id: str
    title: str
    abstract: str = ""
    body: str = ""
    published: date = date(1970, 1, 1)
    references: list[str] = field(default_factory=list)
    embedding: Optional[EmbeddingVector] = None

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PaperRecord":
        return cls(
            paper_id=str(data.get("id") or data.get("paper_id") or "").strip(),
            title=str(data.get("title") or "").strip(),
            abstract=str(data.get("abstract") or ""),
            body=str(data.get("body_markdown") or data.get("body") or ""),
            published=parse_date(data.get("published") or "1970-01-01"),
            references=[str(r) for r in data.get("references") or []],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.paper_id,
            "title": self.title,
            "abstract": self.abstract,
            "body_markdown": self.body,
            "published": self.published.isoformat(),
            "references": list(self.references),
        }

    def embed_text(self) -> str:
        return f"{self.title}\n{self.abstract}"

    def first_section(self) -> str:
        """Body text up to the second heading."""
        lines = self.body.splitlines()
        out: list[str] = []
        headings = 0
        for line in lines:
            if line.lstrip().startswith("#"):
                headings += 1
                if headings > 1:
                    break
            out.append(line)
        return "\n".join(out).strip()


@dataclass(frozen=True)
class RetrievalHit:
    paper_id: str
    score: float
    rank: int


@dataclass
class IngestReport:
    inserted: int = 0
    skipped: int = 0
    rejected: int = 0
    errors: list[str] = field(default_factory=list)

    def summary(self) -> str:
        return f"inserted {self.inserted}, skipped {self.skipped}, rejected {self.rejected}"


def load_corpus_file(path: str) -> list[PaperRecord]:
    """
    Read a corpus dump: a JSONL file (one record per line) or a directory of
    ``.json`` files (one record per file).  Parse errors name the line.
    """
    records: list[PaperRecord] = []
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            if not name.endswith(".json"):
                continue
            with open(os.path.join(path, name), "r", encoding="utf-8") as f:
                try:
                    records.append(PaperRecord.from_dict(json.load(f)))
                except (ValueError, TypeError) as e:
                    raise CorpusFormatError(1, f"{name}: {e}") from e
        return records
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
                if not isinstance(data, dict):
                    raise ValueError("record is not an object")
                records.append(PaperRecord.from_dict(data))
            except (ValueError, TypeError) as e:
                raise CorpusFormatError(lineno, str(e)) from e
    return records


class CorpusStore:
    """
    In-memory exact vector index over :class:`PaperRecord` objects.

    Reads may run concurrently; :meth:`ingest` holds the write lock.  Vectors
    are stored L2-normalized so a dot product is the cosine similarity.
    """

    def __init__(self, gateway: Gateway, dim: Optional[int] = None):
        self.gateway = gateway
        self.dim = dim
        self.records: dict[str, PaperRecord] = {}
        self._order: list[str] = []
        self._vectors: list[np.ndarray] = []
        self._title_index: dict[str, list[str]] = {}
        self._matrix: Optional[np.ndarray] = None
        self._id_rank: Optional[np.ndarray] = None
        self._published: Optional[np.ndarray] = None
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, paper_id: object) -> bool:
        return paper_id in self.records

    # --- writes -----------------------------------------------------------

    def _add(self, record: PaperRecord, vector: np.ndarray) -> None:
        self.records[record.paper_id] = record
        self._order.append(record.paper_id)
        self._vectors.append(vector)
        self._title_index.setdefault(normalize_title(record.title), []).append(record.paper_id)
        self._matrix = None

    def _unit(self, embedding: EmbeddingVector) -> np.ndarray:
        if self.dim is None:
            self.dim = embedding.dim
        if embedding.dim != self.dim:
            raise ValueError(f"embedding dim {embedding.dim} != store dim {self.dim}")
        norm = embedding.norm()
        if norm == 0.0:
            raise ValueError("zero embedding")
        return embedding.values / norm

    def ingest(self, records: Iterable[Union[PaperRecord, dict]]) -> IngestReport:
        report = IngestReport()
        with self._lock:
            for item in records:
                record = item if isinstance(item, PaperRecord) else PaperRecord.from_dict(item)
                if not record.paper_id or not record.title.strip():
                    report.rejected += 1
                    report.errors.append(f"{record.paper_id or '<no id>'}: empty id or title")
                    continue
                if record.paper_id in self.records:
                    report.skipped += 1
                    continue
                try:
                    embedding = self.gateway.embed(record.embed_text())
                    vector = self._unit(embedding)
                except (SurveyError, ValueError) as e:
                    report.rejected += 1
                    report.errors.append(f"{record.paper_id}: embedding failed: {e}")
                    logger.warning("[CorpusStore] Rejected %s: %s", record.paper_id, e)
                    continue
                record.embedding = EmbeddingVector(vector)
                self._add(record, vector)
                report.inserted += 1
        logger.info("[CorpusStore] Ingest: %s", report.summary())
        return report

    # --- reads ------------------------------------------------------------

    def _index(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        with self._lock:
            if self._matrix is None:
                n = len(self._order)
                dim = self.dim or 1
                self._matrix = np.vstack(self._vectors) if n else np.zeros((0, dim))
                ranks = np.empty(n, dtype=np.int64)
                ranks[np.argsort(np.array(self._order, dtype=object), kind="stable")] = np.arange(n)
                self._id_rank = ranks
                self._published = np.array(
                    [self.records[pid].published.toordinal() for pid in self._order], dtype=np.int64
                )
            return self._matrix, self._id_rank, self._published  # type: ignore[return-value]

    def query_vector(self, query: str) -> np.ndarray:
        if not query or not query.strip():
            raise EmptyQuery("query must be non-empty")
        return self._unit(self.gateway.embed(query))

    def _rank(self, scores: np.ndarray, rows: np.ndarray, id_rank: np.ndarray, k: int) -> list[RetrievalHit]:
        # Scores equal to SCORE_DECIMALS places are ties, broken by id.
        keys = np.round(scores, config.SCORE_DECIMALS)
        order = np.lexsort((id_rank[rows], -keys))[:k]
        return [
            RetrievalHit(paper_id=self._order[int(rows[i])], score=float(scores[i]), rank=r + 1)
            for r, i in enumerate(order)
        ]

    def retrieve(self, query: str, k: int, cutoff: Optional[date] = None) -> list[RetrievalHit]:
        """Top-k by cosine over records published strictly before ``cutoff``."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not query or not query.strip():
            raise EmptyQuery("query must be non-empty")
        if not self._order:
            return []
        q = self.query_vector(query)
        matrix, id_rank, published = self._index()
        rows = np.arange(len(self._order))
        if cutoff is not None:
            rows = rows[published < cutoff.toordinal()]
        if rows.size == 0:
            return []
        scores = matrix[rows] @ q
        return self._rank(scores, rows, id_rank, k)

    def rank_ids(self, vector: np.ndarray, paper_ids: Iterable[str], k: Optional[int] = None) -> list[RetrievalHit]:
        """Rank the given stored papers by cosine to ``vector`` (ties by id)."""
        matrix, id_rank, _ = self._index()
        position = {pid: i for i, pid in enumerate(self._order)}
        rows = np.array(sorted({position[p] for p in paper_ids if p in position}), dtype=np.int64)
        if rows.size == 0:
            return []
        scores = matrix[rows] @ vector
        return self._rank(scores, rows, id_rank, k if k is not None else rows.size)

    def vector(self, paper_id: str) -> np.ndarray:
        record = self.get(paper_id)
        assert record.embedding is not None
        return record.embedding.values

    def get(self, paper_id: str) -> PaperRecord:
        try:
            return self.records[paper_id]
        except KeyError:
            raise UnknownPaper(f"unknown paper '{paper_id}'") from None

    def lookup(self, key: str) -> PaperRecord:
        """Resolve an id first, then a case/whitespace-insensitive title."""
        key = key.strip()
        if key in self.records:
            return self.records[key]
        ids = self._title_index.get(normalize_title(key), [])
        if len(ids) > 1:
            raise AmbiguousTitle(f"title '{key}' matches {len(ids)} papers: {sorted(ids)}")
        if not ids:
            raise NotFound(f"no paper with id or title '{key}'")
        return self.records[ids[0]]

    def resolve(self, key: str) -> Optional[str]:
        try:
            return self.lookup(key).paper_id
        except (NotFound, AmbiguousTitle):
            return None

    def top_refs(self, paper_id: str, m: int) -> list[PaperRecord]:
        """The ``m`` resolvable references most similar to the citing paper."""
        citing = self.get(paper_id)
        if m < 1:
            return []
        resolved: list[str] = []
        for ref in citing.references:
            pid = self.resolve(ref)
            if pid is not None and pid != paper_id and pid not in resolved:
                resolved.append(pid)
        hits = self.rank_ids(self.vector(paper_id), resolved, m)
        return [self.records[h.paper_id] for h in hits]

    def snapshot_id(self) -> str:
        digest = hashlib.sha1()
        digest.update(self.gateway.backend_id.encode("utf-8"))
        for pid in sorted(self._order):
            digest.update(b"\0" + pid.encode("utf-8"))
        return digest.hexdigest()[:12]

    # --- persistence ------------------------------------------------------

    def save(self, path: str) -> None:
        with self._lock:
            os.makedirs(path, exist_ok=True)
            manifest = {
                "format_version": config.STORE_FORMAT_VERSION,
                "dim": self.dim,
                "count": len(self._order),
                "embed_backend": self.gateway.backend_id,
            }
            matrix, _, _ = self._index()
            np.save(os.path.join(path, config.STORE_VECTORS), matrix)
            with open(os.path.join(path, config.STORE_RECORDS), "w", encoding="utf-8") as f:
                for pid in self._order:
                    f.write(json.dumps(self.records[pid].to_dict(), sort_keys=True) + "\n")
            with open(os.path.join(path, config.STORE_MANIFEST), "w", encoding="utf-8") as f:
                json.dump(manifest, f, indent=2, sort_keys=True)

    @classmethod
    def exists(cls, path: str) -> bool:
        return os.path.exists(os.path.join(path, config.STORE_MANIFEST))

    @classmethod
    def load(cls, path: str, gateway: Gateway) -> "CorpusStore":
        with open(os.path.join(path, config.STORE_MANIFEST), "r", encoding="utf-8") as f:
            manifest = json.load(f)
        if manifest.get("format_version") != config.STORE_FORMAT_VERSION:
            raise SurveyError(f"unsupported store format {manifest.get('format_version')}")
        if manifest.get("embed_backend") != gateway.backend_id:
            logger.warning(
                "[CorpusStore] Store embedded with %s, querying with %s",
                manifest.get("embed_backend"), gateway.backend_id,
            )
        store = cls(gateway, manifest.get("dim"))
        matrix = np.load(os.path.join(path, config.STORE_VECTORS))
        with open(os.path.join(path, config.STORE_RECORDS), "r", encoding="utf-8") as f:
            for i, line in enumerate(l for l in f if l.strip()):
                record = PaperRecord.from_dict(json.loads(line))
                record.embedding = EmbeddingVector(matrix[i])
                store._add(record, matrix[i])
        return store
