import json
import os
import random
import tempfile
import time
import unittest

from backend_gateway import Gateway
from card_engine import CardCache, CardPool, PaperCard, extract_card, format_cards, sample_batch
from corpus_store import PaperRecord
from errors import CardExtractionFailed, DuplicateKeyword, PoolEmpty
from mock_backend import MockBackend
from tests.helpers import mock_gateway

PAPER = PaperRecord(paper_id="p1", title="Dense Retrieval", abstract="We retrieve passages.", body="# Intro\nText.")


def _card(pid: str) -> PaperCard:
    return PaperCard(paper_id=pid, title=f"Paper {pid}", contributions=[f"c {pid}"])


class TestExtractCard(unittest.TestCase):
    def test_scripted_card(self):
        reply = json.dumps({"contributions": ["c1"], "methods": ["m1"], "findings": ["f1"]})
        gateway, _ = mock_gateway({"card-extract": reply})
        card = extract_card(gateway, PAPER, "retrieval")
        self.assertEqual(card.statements(), ["c1", "m1", "f1"])
        self.assertEqual(card.source_keyword, "retrieval")

    def test_duplicate_statements_collapse(self):
        reply = json.dumps({"contributions": ["c1", " c1 "], "methods": ["m1"], "findings": []})
        gateway, _ = mock_gateway({"card-extract": reply})
        self.assertEqual(extract_card(gateway, PAPER, "k").contributions, ["c1"])

    def test_empty_card_is_repaired_once(self):
        empty = json.dumps({"contributions": [], "methods": [], "findings": []})
        full = json.dumps({"contributions": ["c1"], "methods": [], "findings": []})
        gateway, backend = mock_gateway({"card-extract": [empty, full]})
        self.assertEqual(extract_card(gateway, PAPER, "k").contributions, ["c1"])
        self.assertEqual(backend.calls_for("card-extract"), 2)

    def test_empty_twice_fails(self):
        empty = json.dumps({"contributions": [], "methods": [], "findings": []})
        gateway, backend = mock_gateway({"card-extract": empty})
        with self.assertRaises(CardExtractionFailed):
            extract_card(gateway, PAPER, "k")
        self.assertEqual(backend.calls_for("card-extract"), 2)

    def test_backend_failure_becomes_extraction_failure(self):
        gateway, _ = mock_gateway({"card-extract": "no json"}, repairs=0)
        with self.assertRaises(CardExtractionFailed):
            extract_card(gateway, PAPER, "k")

    def test_format_cards(self):
        text = format_cards([PaperCard("p1", "Dense Retrieval", ["c1"], [], ["f1", "f2"])])
        self.assertEqual(text, "[p1] Dense Retrieval\n  contributions: c1\n  findings: f1; f2")


class TestCardPool(unittest.TestCase):
    def test_push_tracks_consulted(self):
        pool = CardPool()
        pool.push("in-context learning", [_card("a"), _card("b"), _card("c")])
        self.assertEqual(len(pool), 1)
        self.assertEqual(len(pool.consulted), 3)
        kept = pool.push("prompting", [_card("c"), _card("d")])
        self.assertEqual([c.paper_id for c in kept], ["d"])
        self.assertEqual(len(pool.consulted), 4)

    def test_duplicate_keyword(self):
        pool = CardPool()
        pool.push("k1", [_card("a")])
        with self.assertRaises(DuplicateKeyword):
            pool.push(" K1 ", [])
        pool.pop()
        with self.assertRaises(DuplicateKeyword):
            pool.push("k1", [])

    def test_pop_is_fifo(self):
        pool = CardPool()
        pool.push("k1", [_card("a")])
        pool.push("k2", [_card("b")])
        keyword, cards = pool.pop()
        self.assertEqual(keyword, "k1")
        self.assertEqual(list(pool.entries), ["k2"])
        self.assertEqual(pool.history, ["k1"])
        pool.pop()
        self.assertEqual(pool.history, ["k1", "k2"])
        with self.assertRaises(PoolEmpty):
            pool.pop()

    def test_round_trip(self):
        pool = CardPool()
        pool.push("k1", [_card("a")])
        pool.push("k2", [_card("b")])
        pool.pop()
        restored = CardPool.from_dict(json.loads(json.dumps(pool.to_dict())))
        self.assertEqual(restored.to_dict(), pool.to_dict())
        self.assertTrue(restored.knows("k1"))


class TestSampleBatch(unittest.TestCase):
    def test_partition(self):
        cards = [_card(str(i)) for i in range(7)]
        rng = random.Random(3)
        sizes, seen, remaining = [], [], cards
        while remaining:
            batch, remaining = sample_batch(remaining, 3, rng)
            sizes.append(len(batch))
            seen += [c.paper_id for c in batch]
        self.assertEqual(sizes, [3, 3, 1])
        self.assertEqual(sorted(seen), sorted(c.paper_id for c in cards))

    def test_small_list(self):
        cards = [_card("a"), _card("b")]
        batch, remainder = sample_batch(cards, 5, 0)
        self.assertEqual(len(batch), 2)
        self.assertEqual(remainder, [])

    def test_deterministic(self):
        cards = [_card(str(i)) for i in range(10)]
        self.assertEqual(sample_batch(cards, 4, 11), sample_batch(cards, 4, 11))
        with self.assertRaises(ValueError):
            sample_batch(cards, 0, 1)


class TestCardCache(unittest.TestCase):
    def test_extracts_once_and_persists(self):
        with tempfile.TemporaryDirectory() as tmp:
            gateway, backend = mock_gateway()
            cache = CardCache(gateway, os.path.join(tmp, "cards"))
            first = cache.get_or_extract(PAPER, "k1")
            second = cache.get_or_extract(PAPER, "k2")
            self.assertIs(first, second)
            self.assertEqual(backend.calls_for("card-extract"), 1)
            reloaded = CardCache(gateway, os.path.join(tmp, "cards"))
            self.assertEqual(reloaded.get("p1"), first)

    def test_concurrent_callers_extract_once(self):
        calls = []
        reply = json.dumps({"contributions": ["c1"], "methods": ["m1"], "findings": ["f1"]})

        def slow_extract(request, index):
            calls.append(index)
            time.sleep(0.05)
            return reply

        gateway = Gateway(MockBackend({"card-extract": slow_extract}), deterministic=False, workers=8)
        cache = CardCache(gateway)
        cards = gateway.fan_out(lambda keyword: cache.get_or_extract(PAPER, keyword), [f"k{i}" for i in range(8)])
        self.assertEqual(len(calls), 1)
        self.assertTrue(all(card is cards[0] for card in cards))


if __name__ == "__main__":
    unittest.main()
