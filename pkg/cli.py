"""Command line interface: ingest a corpus, write surveys, evaluate and rank them.

    python cli.py ingest   --corpus samples/corpus.jsonl --store store/
    python cli.py survey   --topic "Retrieval-Augmented Generation" --store store/ --out runs/rag
    python cli.py evaluate --survey runs/rag/survey.md --store store/ --out eval/
    python cli.py arena    --manifest samples/arena/manifest.json --out arena/
    python cli.py trace    --run runs/rag --plot similarity.png

``--backend mock`` (or ``mock:SCRIPT.json``) runs fully offline; ``live``
talks to the endpoint described by ``--backend-config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional, Sequence

from pydantic import BaseModel, Field

import config
from arena import (
    EloParams,
    aggregate_rankings,
    compute_elo,
    load_arena_manifest,
    manifest_rosters,
    meta_evaluation,
    run_arena,
    write_reports,
)
from backend_gateway import BackendConfig, Budget, Gateway, LiveBackend
from card_engine import CardCache
from corpus_store import CorpusStore, IngestReport, load_corpus_file, parse_date
from draft_engine import DraftConfig, SurveyDocument, draft_document
from errors import NotFound, StageFailed, SurveyError
from eval_suite import Judge, evaluate_survey, score_table
from mock_backend import MockBackend
from outline_engine import (
    OutlineNode,
    OutlineRunConfig,
    refine_outline,
    relink_papers,
    run_recurrent_outline,
    serialize_outline,
)
from polish_engine import PolishConfig, polish_document
from run_store import RunDirectory, RunManifest, config_hash
from run_trace import Clock, LogicalClock, RunTrace, load_events, summarize, wall_clock
import trace_plot

logger = logging.getLogger(__name__)

STAGES = ("outline", "draft", "polish")


class SurveyConfig(BaseModel):
    outline: OutlineRunConfig = Field(default_factory=OutlineRunConfig)
    draft: DraftConfig = Field(default_factory=DraftConfig)
    polish: PolishConfig = Field(default_factory=PolishConfig)

    @classmethod
    def load(cls, path: Optional[str] = None, *, seed: Optional[int] = None, cutoff: Optional[str] = None) -> "SurveyConfig":
        """Defaults, then the JSON file, then command-line overrides."""
        data: dict[str, Any] = {}
        if path:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        survey_config = cls.model_validate(data)
        overrides: dict[str, Any] = {}
        if seed is not None:
            overrides["seed"] = seed
        if cutoff is not None:
            overrides["cutoff"] = parse_date(cutoff)
        if overrides:
            outline = OutlineRunConfig.model_validate({**survey_config.outline.model_dump(), **overrides})
            survey_config = survey_config.model_copy(update={"outline": outline})
        return survey_config

    def stage_hashes(self) -> dict[str, str]:
        dumped = self.model_dump(mode="json")
        return {stage: config_hash(dumped[key]) for stage, key in zip(STAGES, ("outline", "draft", "polish"))}


# --- backends -----------------------------------------------------------

@dataclass
class BackendChoice:
    kind: str
    script: Optional[str] = None
    backend_config: BackendConfig = field(default_factory=BackendConfig)

    @classmethod
    def parse(cls, value: str, config_path: Optional[str] = None) -> "BackendChoice":
        backend_config = BackendConfig.load(config_path)
        if value == "live":
            return cls("live", None, backend_config)
        if value == "mock":
            return cls("mock", None, backend_config)
        if value.startswith("mock:"):
            return cls("mock", value[len("mock:"):], backend_config)
        raise ValueError(f"unknown backend '{value}' (expected live, mock or mock:SCRIPT)")

    @property
    def is_mock(self) -> bool:
        return self.kind == "mock"

    def backend(self, model: Optional[str] = None, backend_id: str = "mock") -> Any:
        if self.kind == "live":
            cfg = self.backend_config if model is None else self.backend_config.model_copy(update={"model": model})
            return LiveBackend(cfg)
        if self.script:
            return MockBackend.from_file(self.script, backend_id=backend_id)
        return MockBackend(backend_id=backend_id)

    def gateway(self, seed: int = config.DEFAULT_SEED, backend: Any = None) -> Gateway:
        cfg = self.backend_config
        return Gateway(
            backend if backend is not None else self.backend(),
            budget=Budget(cfg.max_requests, cfg.max_tokens),
            retries=cfg.retries,
            repairs=cfg.repairs,
            decode=cfg.decode(seed),
        )

    def judges(self, count: int, seed: int = config.DEFAULT_SEED) -> list[Judge]:
        if count < 1:
            raise ValueError("at least one judge is required")
        if self.kind == "live":
            models = self.backend_config.judge_models or [self.backend_config.model]
            if count > len(models):
                raise ValueError(f"{count} judges requested but only {len(models)} judge models configured")
            return [Judge(m, self.gateway(seed, self.backend(model=m))) for m in models[:count]]
        ids = [f"mock-judge-{i}" for i in range(1, count + 1)]
        return [Judge(j, self.gateway(seed, self.backend(backend_id=j))) for j in ids]

    def clock(self) -> Clock:
        return LogicalClock() if self.is_mock else wall_clock


# --- commands -----------------------------------------------------------

def cmd_ingest(corpus_path: str, store_path: str, gateway: Gateway) -> IngestReport:
    records = load_corpus_file(corpus_path)
    store = CorpusStore.load(store_path, gateway) if CorpusStore.exists(store_path) else CorpusStore(gateway)
    report = store.ingest(records)
    store.save(store_path)
    for error in report.errors:
        logger.warning("[CLI] %s", error)
    print(report.summary())
    return report


def _open_store(store_path: str, gateway_factory: Callable[[], Gateway]) -> tuple[Gateway, CorpusStore]:
    # Checked before any backend is touched.
    if not CorpusStore.exists(store_path):
        raise NotFound(f"no corpus store at {store_path}")
    gateway = gateway_factory()
    return gateway, CorpusStore.load(store_path, gateway)


class SurveyRun:
    """
    The outline -> draft -> polish stages of one run directory.  Every stage
    records its state in the manifest; a finished stage is loaded from its
    artifacts instead of being recomputed.
    """

    def __init__(
        self,
        gateway: Gateway,
        store: CorpusStore,
        topic: str,
        survey_config: SurveyConfig,
        run: RunDirectory,
    ):
        if not topic or not topic.strip():
            raise ValueError("topic must be non-empty")
        self.gateway = gateway
        self.store = store
        self.topic = topic.strip()
        self.config = survey_config
        self.run = run
        self.trace = RunTrace(run.file(config.TRACE_LOG), run.clock)
        self.cards = CardCache(gateway, run.file(config.CARD_DIR))
        self.manifest = self._open_manifest()
        if isinstance(run.clock, LogicalClock):
            run.clock.advance_past(*(t for stamps in self.manifest.timestamps.values() for t in stamps.values()))

    def _open_manifest(self) -> RunManifest:
        dumped = self.config.model_dump(mode="json")
        run_id = config_hash({
            "topic": self.topic,
            "corpus": self.store.snapshot_id(),
            "backend": self.gateway.backend_id,
            "config": dumped,
        })
        manifest = self.run.load_manifest()
        if manifest is None:
            manifest = RunManifest(
                run_id=run_id,
                topic=self.topic,
                corpus_snapshot=self.store.snapshot_id(),
                backend_id=self.gateway.backend_id,
                decode=asdict(self.gateway.decode),
                config_hashes=self.config.stage_hashes(),
                stages={s: "pending" for s in STAGES},
            )
            self.run.write_json(config.RUN_CONFIG, dumped)
            self.run.save_manifest(manifest)
        elif manifest.run_id != run_id:
            raise StageFailed(f"{self.run.path} holds run {manifest.run_id}, not {run_id}")
        return manifest

    def stage(self, name: str, compute: Callable[[], Any], load: Callable[[], Any]) -> Any:
        status = self.manifest.status(name)
        if status == "done":
            logger.info("[CLI] Stage %s already done, loading artifacts", name)
            return load()
        if status == "running":
            # Left behind by an interrupted process.
            self.run.set_stage(self.manifest, name, "failed")
        self.run.set_stage(self.manifest, name, "running")
        try:
            result = compute()
        except Exception as e:
            self.trace.log("stage_failed", stage=name, error=str(e))
            self.run.set_stage(self.manifest, name, "failed")
            raise
        self.run.set_stage(self.manifest, name, "done")
        return result

    # outline

    def _compute_outline(self) -> OutlineNode:
        cfg = self.config.outline
        research, pool, _ = run_recurrent_outline(
            self.gateway, self.store, self.topic, cfg, trace=self.trace, cards=self.cards, run=self.run
        )
        writing = refine_outline(self.gateway, research, cfg.max_sections, self.trace)
        consulted = [self.cards.get(pid) for pid in sorted(pool.consulted)]
        writing = relink_papers(self.gateway, writing, [c for c in consulted if c is not None], self.trace)
        self.run.write_text("research_outline.md", serialize_outline(research))
        self.run.write_text("outline.md", serialize_outline(writing))
        self.run.write_json(config.OUTLINE_STATE, {
            "research": research.to_dict(),
            "writing": writing.to_dict(),
            "consulted": sorted(pool.consulted),
        })
        return writing

    def _load_outline(self) -> OutlineNode:
        return OutlineNode.from_dict(self.run.read_json(config.OUTLINE_STATE)["writing"])

    def outline(self) -> OutlineNode:
        return self.stage("outline", self._compute_outline, self._load_outline)

    # draft

    def _compute_draft(self, outline: OutlineNode) -> SurveyDocument:
        document = draft_document(
            self.gateway, self.store, self.cards, outline, self.config.draft,
            cutoff=self.config.outline.cutoff, trace=self.trace,
        )
        for node_id in document.order():
            self.run.write_json(f"{config.DRAFT_DIR}/{node_id}.json", document.sections[node_id].to_dict())
        self.run.write_json(f"{config.DRAFT_DIR}/{config.DRAFT_STATE}", document.to_dict())
        return document

    def _load_draft(self) -> SurveyDocument:
        return SurveyDocument.from_dict(self.run.read_json(f"{config.DRAFT_DIR}/{config.DRAFT_STATE}"))

    def draft(self, outline: OutlineNode) -> SurveyDocument:
        return self.stage("draft", lambda: self._compute_draft(outline), self._load_draft)

    # polish

    def _compute_polish(self, document: SurveyDocument) -> str:
        document = polish_document(self.gateway, document, self.config.polish, self.trace, self.run)
        self.run.write_json(config.SURVEY_STATE, document.to_dict())
        return self.run.write_text(config.SURVEY_FILE, document.render(self.store))

    def polish(self, document: SurveyDocument) -> str:
        return self.stage("polish", lambda: self._compute_polish(document), lambda: self.run.file(config.SURVEY_FILE))

    def survey(self) -> str:
        if self.manifest.status("polish") == "done":
            return self.run.file(config.SURVEY_FILE)
        return self.polish(self.draft(self.outline()))


def cmd_outline(
    topic: str,
    survey_config: SurveyConfig,
    store_path: str,
    out_dir: str,
    gateway_factory: Callable[[], Gateway],
    clock: Clock = wall_clock,
) -> str:
    gateway, store = _open_store(store_path, gateway_factory)
    with RunDirectory(out_dir, clock) as run:
        SurveyRun(gateway, store, topic, survey_config, run).outline()
        path = run.file("outline.md")
    print(path)
    return path


def cmd_survey(
    topic: str,
    survey_config: SurveyConfig,
    store_path: str,
    out_dir: str,
    gateway_factory: Callable[[], Gateway],
    clock: Clock = wall_clock,
) -> str:
    gateway, store = _open_store(store_path, gateway_factory)
    with RunDirectory(out_dir, clock) as run:
        path = SurveyRun(gateway, store, topic, survey_config, run).survey()
    print(path)
    return path


def survey_topic(text: str, fallback: str) -> str:
    for line in text.splitlines():
        if line.startswith("# "):
            return line[2:].strip()
    return fallback


def cmd_evaluate(
    survey_paths: Sequence[str],
    store_path: str,
    out_dir: str,
    judges_factory: Callable[[], list[Judge]],
    gateway_factory: Callable[[], Gateway],
    *,
    topic: Optional[str] = None,
    strict: bool = False,
) -> list[str]:
    gateway, store = _open_store(store_path, gateway_factory)
    judges = judges_factory()
    evaluations = []
    for path in survey_paths:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        survey_id = os.path.splitext(os.path.basename(path))[0]
        evaluations.append(
            evaluate_survey(judges, store, text, topic=topic or survey_topic(text, survey_id), survey_id=survey_id, strict=strict)
        )
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, config.EVAL_FILE)
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump([e.to_dict() for e in evaluations], f, indent=2, sort_keys=True)
        f.write("\n")
    table_path = os.path.join(out_dir, config.SCORE_TABLE)
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(score_table(evaluations))
    print(score_table(evaluations), end="")
    return [json_path, table_path]


def cmd_arena(
    manifest_path: str,
    out_dir: str,
    judges: Sequence[Judge],
    *,
    pair_scope: str = config.PAIR_SCOPE,
    params: EloParams = EloParams(),
) -> list[str]:
    manifest = load_arena_manifest(manifest_path)
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, config.ARENA_LOG)
    if os.path.exists(log_path):
        os.remove(log_path)
    outcomes = run_arena(manifest, judges, pair_scope, log_path)
    systems, humans, roster = manifest_rosters(manifest)
    table = compute_elo(outcomes, params, roster)
    summaries = aggregate_rankings(table, systems, humans)
    meta_rows = meta_evaluation(manifest, table)
    if meta_rows is None:
        print("meta-evaluation skipped: no citation counts in manifest")
    paths = [log_path] + write_reports(out_dir, table, summaries, meta_rows)
    for path in paths:
        print(path)
    return paths


def cmd_trace(run_dir: str, plot: Optional[str] = None, graph: Optional[str] = None) -> dict[str, Any]:
    trace_path = os.path.join(run_dir, config.TRACE_LOG)
    if not os.path.exists(trace_path):
        raise NotFound(f"no trace in {run_dir}")
    summary = summarize(load_events(trace_path))
    print(json.dumps(summary, indent=2, sort_keys=True))
    if plot:
        trace_plot.plot_similarity_history(run_dir, plot)
    if graph:
        state = os.path.join(run_dir, config.OUTLINE_STATE)
        if os.path.exists(state):
            with open(state, "r", encoding="utf-8") as f:
                root = OutlineNode.from_dict(json.load(f)["writing"])
        else:
            manifest = RunDirectory(run_dir).load_manifest()
            root = trace_plot.latest_outline(run_dir, manifest.topic if manifest else "Survey")
        if root is None:
            print("No outline found")
        else:
            trace_plot.plot_outline(root, graph)
    return summary


# --- entry point --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Write and evaluate literature surveys with a recurrent outline loop")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def backend_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--backend", default="mock", help="live, mock or mock:SCRIPT.json")
        p.add_argument("--backend-config", default=None, help="JSON backend configuration for live runs")
        p.add_argument("--seed", type=int, default=None, help="Decode and sampling seed")

    p = sub.add_parser("ingest", help="Embed a corpus dump into a store")
    p.add_argument("--corpus", required=True)
    p.add_argument("--store", required=True)
    backend_flags(p)

    for name, text in (("outline", "Run the recurrent outline stage"), ("survey", "Write a full survey")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--topic", required=True)
        p.add_argument("--store", required=True)
        p.add_argument("--out", required=True, help="Run directory")
        p.add_argument("--config", default=None, help="JSON stage configuration")
        p.add_argument("--cutoff", default=None, help="Only papers published before YYYY-MM-DD")
        backend_flags(p)

    p = sub.add_parser("evaluate", help="Criteria scores and citation precision/recall")
    p.add_argument("--survey", required=True, nargs="+")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--topic", default=None)
    p.add_argument("--judges", type=int, default=config.JUDGE_COUNT)
    p.add_argument("--strict", action="store_true", help="Every cited source must support a claim")
    backend_flags(p)

    p = sub.add_parser("arena", help="Pairwise arena, Elo ratings and rank summaries")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--judges", type=int, default=config.JUDGE_COUNT)
    p.add_argument("--pair-scope", choices=("cross-only", "all-pairs"), default=config.PAIR_SCOPE)
    p.add_argument("--shuffles", type=int, default=config.ELO_SHUFFLES)
    backend_flags(p)

    p = sub.add_parser("trace", help="Summarize (and plot) a run trace")
    p.add_argument("--run", required=True)
    p.add_argument("--plot", default=None, help="Similarity history image")
    p.add_argument("--graph", default=None, help="Outline graph image")
    return parser


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "trace":
        cmd_trace(args.run, args.plot, args.graph)
        return
    choice = BackendChoice.parse(args.backend, args.backend_config)
    seed = config.DEFAULT_SEED if args.seed is None else args.seed
    if args.command == "ingest":
        cmd_ingest(args.corpus, args.store, choice.gateway(seed))
    elif args.command in ("outline", "survey"):
        survey_config = SurveyConfig.load(args.config, seed=args.seed, cutoff=args.cutoff)
        command = cmd_outline if args.command == "outline" else cmd_survey
        command(
            args.topic, survey_config, args.store, args.out,
            lambda: choice.gateway(survey_config.outline.seed), choice.clock(),
        )
    elif args.command == "evaluate":
        cmd_evaluate(
            args.survey, args.store, args.out,
            lambda: choice.judges(args.judges, seed), lambda: choice.gateway(seed),
            topic=args.topic, strict=args.strict,
        )
    elif args.command == "arena":
        params = EloParams(shuffles=args.shuffles, seed=seed)
        cmd_arena(args.manifest, args.out, choice.judges(args.judges, seed), pair_scope=args.pair_scope, params=params)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        dispatch(args)
    except (SurveyError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
