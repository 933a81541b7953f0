import json
import os
import threading
import time
import unittest
from types import SimpleNamespace
from unittest.mock import patch

from backend_gateway import (
    BackendConfig,
    Budget,
    DecodeParams,
    Gateway,
    KeywordList,
    LiveBackend,
    PromptLibrary,
    dedupe_keywords,
    extract_json_object,
    make_request,
)
from errors import (
    BackendFailure,
    BindingIncomplete,
    BudgetExceeded,
    EmptyReply,
    EmptyText,
    ParseFailedAfterRepairs,
    TemplateMissing,
    TransportExhausted,
)
from tests.helpers import mock_gateway


class TestPromptLibrary(unittest.TestCase):
    def test_render_binds_every_placeholder(self):
        prompts = PromptLibrary()
        text = prompts.render("nli_check", {"CLAIM": "Dense retrieval helps.", "SOURCE": "A paper."})
        self.assertIn("Dense retrieval helps.", text)
        self.assertNotIn("[CLAIM]", text)

    def test_missing_and_unused_bindings(self):
        prompts = PromptLibrary()
        with self.assertRaises(BindingIncomplete):
            prompts.render("nli_check", {"CLAIM": "x"})
        with self.assertRaises(BindingIncomplete):
            prompts.render("nli_check", {"CLAIM": "x", "SOURCE": "y", "EXTRA": "z"})

    def test_bound_text_is_not_reexpanded(self):
        prompts = PromptLibrary()
        text = prompts.render("nli_check", {"CLAIM": "[SOURCE]", "SOURCE": "paper"})
        self.assertIn("[SOURCE]", text)

    def test_unknown_template(self):
        with self.assertRaises(TemplateMissing):
            PromptLibrary().template("no_such_role")

    def test_role_tag_maps_to_template(self):
        request = make_request("arena-review", {"TOPIC": "x"})
        self.assertEqual(request.template_id, "arena_review")

    def test_every_role_has_a_template(self):
        from mock_backend import DEFAULT_RESPONDERS

        prompts = PromptLibrary()
        for role in DEFAULT_RESPONDERS:
            self.assertTrue(prompts.placeholders(role.replace("-", "_")), role)


class TestGateway(unittest.TestCase):
    def test_transient_failures_are_retried(self):
        gateway, backend = mock_gateway({"nli-check": "Yes"}, failures=2, retries=3)
        reply = gateway.generate(gateway.request("nli-check", CLAIM="a", SOURCE="b"))
        self.assertEqual(reply.text, "Yes")
        self.assertEqual(backend.attempts, 3)

    def test_unreachable_backend_exhausts_retries(self):
        gateway, backend = mock_gateway({"nli-check": "Yes"}, failures=100, retries=2)
        with self.assertRaises(TransportExhausted) as ctx:
            gateway.generate(gateway.request("nli-check", CLAIM="a", SOURCE="b"))
        self.assertEqual(ctx.exception.attempts, 3)
        self.assertEqual(backend.attempts, 3)

    def test_structured_reply_repaired(self):
        gateway, backend = mock_gateway({"seed-queries": ["not json", "```json\n{\"keywords\": [\"rag\"]}\n```"]})
        shape = gateway.generate_structured(gateway.request("seed-queries", TOPIC="RAG"), KeywordList)
        self.assertEqual(shape.keywords, ["rag"])
        self.assertEqual(backend.calls_for("seed-queries"), 2)
        # The repair prompt carries the parse error.
        self.assertIn("could not be used", backend.calls[1][1])

    def test_parse_failure_after_repairs(self):
        gateway, backend = mock_gateway({"seed-queries": "no object here"}, repairs=2)
        with self.assertRaises(ParseFailedAfterRepairs) as ctx:
            gateway.generate_structured(gateway.request("seed-queries", TOPIC="RAG"), KeywordList)
        self.assertEqual(ctx.exception.calls, 3)
        self.assertEqual(backend.calls_for("seed-queries"), 3)

    def test_request_budget(self):
        gateway, _ = mock_gateway({"nli-check": "No"}, budget=Budget(max_requests=1))
        request = gateway.request("nli-check", CLAIM="a", SOURCE="b")
        gateway.generate(request)
        with self.assertRaises(BudgetExceeded):
            gateway.generate(request)
        self.assertEqual(gateway.usage()["requests"], 1)

    def test_request_budget_under_concurrency(self):
        class SlowBackend:
            backend_id = "slow"

            def __init__(self):
                self.calls = 0
                self._lock = threading.Lock()

            def complete(self, prompt, request):
                with self._lock:
                    self.calls += 1
                time.sleep(0.05)
                return "Yes", None

            def embed(self, text):
                return [1.0]

        backend = SlowBackend()
        gateway = Gateway(backend, budget=Budget(max_requests=3), deterministic=False, workers=8)
        request = gateway.request("nli-check", CLAIM="a", SOURCE="b")

        def attempt(_):
            try:
                gateway.generate(request)
                return True
            except BudgetExceeded:
                return False

        results = gateway.fan_out(attempt, list(range(8)))
        self.assertEqual(sum(results), 3)
        self.assertEqual(backend.calls, 3)
        self.assertEqual(gateway.usage()["requests"], 3)

    def test_failed_call_releases_tokens(self):
        gateway, _ = mock_gateway({"nli-check": "Yes"}, failures=100, retries=0, budget=Budget(max_tokens=10_000))
        request = gateway.request("nli-check", CLAIM="a", SOURCE="b")
        with self.assertRaises(TransportExhausted):
            gateway.generate(request)
        self.assertEqual(gateway.budget._pending, 0)
        self.assertEqual(gateway.usage(), {"requests": 1, "input_tokens": 0, "output_tokens": 0})

    def test_empty_reply(self):
        gateway, _ = mock_gateway({"nli-check": "   "})
        with self.assertRaises(EmptyReply):
            gateway.generate(gateway.request("nli-check", CLAIM="a", SOURCE="b"))

    def test_embedding(self):
        gateway, _ = mock_gateway()
        vec = gateway.embed("dense retrieval")
        self.assertAlmostEqual(vec.norm(), 1.0, places=9)
        self.assertEqual(vec, gateway.embed("dense retrieval"))
        with self.assertRaises(EmptyText):
            gateway.embed("  ")

    def test_fan_out_keeps_order(self):
        gateway, _ = mock_gateway()
        self.assertEqual(gateway.fan_out(lambda x: x * 2, [3, 1, 2]), [6, 2, 4])


class TestHelpers(unittest.TestCase):
    def test_extract_json_object_tolerates_prose(self):
        obj = extract_json_object('Sure! {"a": 1} and {"b": 2}')
        self.assertEqual(obj, {"a": 1})
        self.assertIsNone(extract_json_object("[1, 2]"))

    def test_dedupe_keywords(self):
        out = dedupe_keywords(["  RAG ", "rag", "", "dense  retrieval", "Known"], exclude=["known"])
        self.assertEqual(out, ["RAG", "dense retrieval"])

    def test_keyword_list_drops_non_strings(self):
        shape = KeywordList.model_validate(json.loads('{"keywords": ["a", 3, null, "b"]}'))
        self.assertEqual(shape.keywords, ["a", "b"])


@patch("backend_gateway.load_dotenv", None)
class TestLiveBackend(unittest.TestCase):
    def _reply(self, content):
        usage = SimpleNamespace(prompt_tokens=12, completion_tokens=3)
        return SimpleNamespace(choices=[SimpleNamespace(message=SimpleNamespace(content=content))], usage=usage)

    @patch.dict(os.environ, {"SURVEY_LOOP_TEST_KEY": "sk-test"})
    @patch("backend_gateway.OpenAI")
    def test_complete_passes_decode_params(self, client_cls):
        client = client_cls.return_value
        client.chat.completions.create.return_value = self._reply("  Yes \n")
        backend = LiveBackend(BackendConfig(model="m-1", api_key_env="SURVEY_LOOP_TEST_KEY"))
        request = make_request("nli-check", {"CLAIM": "a", "SOURCE": "b"}, DecodeParams(0.2, 64, 5))

        text, usage = backend.complete("prompt text", request)
        self.assertEqual(text, "Yes")
        self.assertEqual((usage.input_tokens, usage.output_tokens), (12, 3))
        self.assertEqual(backend.backend_id, "live:m-1")
        client_cls.assert_called_once_with(api_key="sk-test", base_url=None)
        kwargs = client.chat.completions.create.call_args.kwargs
        self.assertEqual(kwargs["messages"], [{"role": "user", "content": "prompt text"}])
        self.assertEqual((kwargs["temperature"], kwargs["max_tokens"], kwargs["seed"]), (0.2, 64, 5))

    @patch.dict(os.environ, {"SURVEY_LOOP_TEST_KEY": "sk-test"})
    @patch("backend_gateway.OpenAI")
    def test_embed(self, client_cls):
        client = client_cls.return_value
        client.embeddings.create.return_value = SimpleNamespace(data=[SimpleNamespace(embedding=[0.1, 0.2])])
        backend = LiveBackend(BackendConfig(embedding_model="e-1", api_key_env="SURVEY_LOOP_TEST_KEY"))
        self.assertEqual(list(backend.embed("text")), [0.1, 0.2])
        client.embeddings.create.assert_called_once_with(model="e-1", input="text")

    @patch("backend_gateway.OpenAI")
    def test_missing_key(self, client_cls):
        with self.assertRaises(BackendFailure):
            LiveBackend(BackendConfig(api_key_env="SURVEY_LOOP_UNSET_KEY"))
        client_cls.assert_not_called()


if __name__ == "__main__":
    unittest.main()
