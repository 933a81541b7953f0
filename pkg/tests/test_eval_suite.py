import json
import unittest

from corpus_store import CorpusStore
from errors import EmptyClaims, ScoreOutOfRange, UnparseableVerdict
from eval_suite import (
    CitationJudgment,
    CriterionScore,
    Judge,
    SurveyEvaluation,
    aggregate_scores,
    citation_metrics,
    evaluate_survey,
    extract_claims,
    nli_check,
    parse_verdict,
    score_criterion,
    score_table,
    split_sentences,
    survey_body,
)
from tests.helpers import mock_gateway

SURVEY = """# Retrieval

## Dense Methods

Dense retrievers encode passages with dual encoders [Dense Retrieval]. This section is short.
Sparse matching remains a strong baseline [Sparse Retrieval; Dense Retrieval]. Many systems combine both.
Outlines help long documents. Planning comes first.

| Work | Role |
|---|---|
| Dense Retrieval [a] | cited. |

## References

- a: Dense Retrieval
- b: Sparse Retrieval
"""


def _store() -> CorpusStore:
    gateway, _ = mock_gateway()
    store = CorpusStore(gateway)
    store.ingest([
        {"id": "a", "title": "Dense Retrieval", "abstract": "Dense retrievers encode passages with dual encoders."},
        {"id": "b", "title": "Sparse Retrieval", "abstract": "Sparse matching with bm25 remains strong."},
    ])
    return store


def _judge(script=None, name="j0") -> tuple[Judge, object]:
    gateway, backend = mock_gateway(script)
    return Judge(name, gateway), backend


def _group(*verdicts: bool) -> list[CitationJudgment]:
    return [CitationJudgment("claim", f"p{i}", v) for i, v in enumerate(verdicts)]


class TestCriteriaScoring(unittest.TestCase):
    def test_scripted_score(self):
        judge, _ = _judge({"criteria-judge": json.dumps({"rationale": "r", "score": 5})})
        score = score_criterion(judge, SURVEY, "coverage", topic="Retrieval")
        self.assertEqual((score.score, score.rationale, score.judge_id), (5, "r", "j0"))

    def test_score_tag_fallback(self):
        judge, _ = _judge({"criteria-judge": "Solid structure overall. <SCORE>4</SCORE>"})
        score = score_criterion(judge, SURVEY, "structure", topic="Retrieval")
        self.assertEqual(score.score, 4)
        self.assertEqual(score.rationale, "Solid structure overall.")

    def test_out_of_range_twice(self):
        judge, backend = _judge({"criteria-judge": json.dumps({"rationale": "r", "score": 7})})
        with self.assertRaises(ScoreOutOfRange):
            score_criterion(judge, SURVEY, "relevance", topic="Retrieval")
        self.assertEqual(backend.calls_for("criteria-judge"), 2)

    def test_preconditions(self):
        judge, _ = _judge()
        with self.assertRaises(ValueError):
            score_criterion(judge, SURVEY, "novelty", topic="Retrieval")
        with self.assertRaises(ValueError):
            score_criterion(judge, "   ", "coverage", topic="Retrieval")

    def test_rubric_is_bound(self):
        judge, backend = _judge()
        score_criterion(judge, SURVEY, "coverage", topic="Retrieval")
        prompt = backend.calls[0][1]
        self.assertIn("comprehensively covers all key and peripheral topics", prompt)
        self.assertNotIn("[SCORE 5 DESCRIPTION]", prompt)

    def test_aggregate_over_judges(self):
        scores = [CriterionScore("s", "coverage", f"j{i}", v, "r") for i, v in enumerate([4, 5, 5])]
        scores.append(CriterionScore("s", "structure", "j0", 3, "r"))
        means = aggregate_scores(scores)["s"]
        self.assertAlmostEqual(means["coverage"], 4.6667, places=4)
        self.assertAlmostEqual(means["avg"], (14 / 3 + 3) / 2)


class TestClaims(unittest.TestCase):
    def test_cited_sentences_only(self):
        claims = extract_claims(SURVEY, _store().resolve)
        self.assertEqual(len(claims), 2)
        self.assertEqual(claims[0].source_ids, ("a",))
        self.assertEqual(claims[1].source_ids, ("b", "a"))
        self.assertEqual(claims[0].text, "Dense retrievers encode passages with dual encoders.")

    def test_no_citations(self):
        self.assertEqual(extract_claims("# T\n\nPlain text. More text.\n", _store().resolve), [])

    def test_unresolvable_markers_are_ignored(self):
        claims = extract_claims("Claim one [Unknown Work]. Claim two [a; Unknown Work].", _store().resolve)
        self.assertEqual([c.source_ids for c in claims], [("a",)])

    def test_twenty_sentences(self):
        sentences = [f"Finding number {i} holds [{'a' if i % 2 else 'Sparse Retrieval'}]." for i in range(20)]
        text = "## Body\n\n" + " ".join(sentences[:10]) + "\n\n" + " ".join(sentences[10:])
        claims = extract_claims(text, _store().resolve)
        self.assertEqual(len(claims), 20)
        self.assertEqual([c.source_ids[0] for c in claims], ["a" if i % 2 else "b" for i in range(20)])

    def test_brackets_do_not_split(self):
        text = "Results hold [Dr. Smith et al. Study; Other]. Next one."
        self.assertEqual(split_sentences(text), ["Results hold [Dr. Smith et al. Study; Other].", "Next one."])

    def test_body_drops_references_and_tables(self):
        body = survey_body(SURVEY)
        self.assertNotIn("## References", body)
        self.assertNotIn("| Work |", body)


class TestNli(unittest.TestCase):
    def test_verdicts(self):
        self.assertTrue(parse_verdict("Yes"))
        self.assertFalse(parse_verdict(" no. "))
        self.assertIsNone(parse_verdict("maybe"))
        store = _store()
        judge, _ = _judge({"nli-check": "YES"})
        self.assertTrue(nli_check(judge, "claim", store.get("a")).verdict)
        judge, backend = _judge({"nli-check": "maybe"})
        with self.assertRaises(UnparseableVerdict):
            nli_check(judge, "claim", store.get("a"))
        self.assertEqual(backend.calls_for("nli-check"), 2)

    def test_recall(self):
        groups = [_group(True)] * 7 + [_group(False)] * 3
        precision, recall = citation_metrics(groups)
        self.assertAlmostEqual(recall, 0.70)
        self.assertAlmostEqual(precision, 0.70)

    def test_precision(self):
        verdicts = [True] * 16 + [False] * 9
        groups = [_group(*verdicts[i:i + 5]) for i in range(0, 25, 5)]
        precision, _ = citation_metrics(groups)
        self.assertAlmostEqual(precision, 0.64)

    def test_extremes(self):
        self.assertEqual(citation_metrics([_group(True, True), _group(True)]), (1.0, 1.0))
        self.assertEqual(citation_metrics([_group(False), _group(False, False)]), (0.0, 0.0))
        with self.assertRaises(EmptyClaims):
            citation_metrics([])

    def test_strict_support(self):
        groups = [_group(True, False), _group(True)]
        self.assertEqual(citation_metrics(groups)[1], 1.0)
        self.assertEqual(citation_metrics(groups, strict=True)[1], 0.5)


class TestEvaluateSurvey(unittest.TestCase):
    def test_three_judges(self):
        store = _store()
        judges = [_judge(name=f"j{i}") for i in range(3)]
        result = evaluate_survey([j for j, _ in judges], store, SURVEY, topic="Retrieval", survey_id="s1")
        self.assertEqual(len(result.scores), 9)
        self.assertEqual(result.claims, 2)
        self.assertEqual(judges[0][1].calls_for("nli-check"), 3)
        self.assertEqual(judges[1][1].calls_for("nli-check"), 0)
        self.assertTrue(0.0 <= result.precision <= 1.0)
        self.assertEqual(set(result.means()), {"coverage", "structure", "relevance", "avg"})
        self.assertEqual(result.to_dict()["survey_id"], "s1")
        with self.assertRaises(ValueError):
            evaluate_survey([], store, SURVEY, topic="Retrieval", survey_id="s1")

    def test_score_table(self):
        evaluation = SurveyEvaluation("s1", [CriterionScore("s1", c, "j0", 4, "r")
                                             for c in ("coverage", "structure", "relevance")])
        table = score_table([evaluation])
        self.assertIn("| s1 | 4.00 | 4.00 | 4.00 | 4.00 | - | - |", table)


if __name__ == "__main__":
    unittest.main()
