import json
import os
import tempfile
import unittest
from unittest.mock import patch

import config
from errors import RunLocked, StageFailed
from run_store import RunDirectory, RunManifest, config_hash, pid_alive, write_json_line
from run_trace import LogicalClock, RunTrace, load_events, summarize


def _manifest() -> RunManifest:
    return RunManifest(run_id="r1", topic="RAG", corpus_snapshot="s1", backend_id="mock")


class TestRunTrace(unittest.TestCase):
    def test_events_are_sequenced(self):
        trace = RunTrace(clock=LogicalClock())
        trace.log("seeded", keywords=["a"])
        trace.log_update(True, 0.8, 0.6, "abc")
        self.assertEqual([e["seq"] for e in trace.events], [0, 1])
        self.assertEqual(trace.events[0]["time"], "t000001")
        self.assertEqual(trace.of_kind("update_accepted")[0]["sim"], 0.8)
        self.assertIsNone(trace.stop_reason())

    def test_sink_is_reloaded(self):
        with tempfile.TemporaryDirectory() as tmp:
            sink = os.path.join(tmp, "trace", "events.jsonl")
            trace = RunTrace(sink, clock=LogicalClock())
            trace.log("stopped", reason="complete", consulted=4)
            with open(sink, "a", encoding="utf-8") as f:
                f.write("{broken\n")
            reopened = RunTrace(sink)
            self.assertEqual(len(reopened), 1)
            self.assertEqual(reopened.stop_reason(), "complete")
            self.assertEqual(reopened.log("warning", message="x")["seq"], 1)

    def test_logical_clock_continues_after_reload(self):
        with tempfile.TemporaryDirectory() as tmp:
            sink = os.path.join(tmp, "events.jsonl")
            first = RunTrace(sink, clock=LogicalClock())
            first.log("seeded", keywords=["a"])
            first.log("popped", keyword="a", cards=0, consulted=0)
            resumed = RunTrace(sink, clock=LogicalClock())
            self.assertEqual(resumed.log("stopped", reason="complete")["time"], "t000003")
            self.assertEqual([e["time"] for e in load_events(sink)], ["t000001", "t000002", "t000003"])

    def test_advance_past_ignores_foreign_stamps(self):
        clock = LogicalClock()
        clock.advance_past("t000007", "2026-01-01T00:00:00Z", None, "t000004")
        self.assertEqual(clock(), "t000008")

    def test_summarize(self):
        trace = RunTrace(clock=LogicalClock())
        trace.log_update(True, 0.9, 0.5, "a")
        trace.log_update(False, 0.2, 0.5, "a")
        trace.log("stopped", reason="budget_max", consulted=12)
        summary = summarize(trace.events)
        self.assertEqual(summary["stop_reason"], "budget_max")
        self.assertEqual(summary["consulted"], 12)
        self.assertEqual(summary["acceptance_rate"], 0.5)
        self.assertEqual(summary["last_similarity"], 0.2)
        self.assertEqual(summarize([])["acceptance_rate"], None)

    def test_missing_file(self):
        self.assertEqual(load_events("/nonexistent/events.jsonl"), [])


class TestRunManifest(unittest.TestCase):
    def test_stage_transitions(self):
        manifest = _manifest()
        self.assertEqual(manifest.status("outline"), "pending")
        manifest.advance("outline", "running", "t1")
        manifest.advance("outline", "failed", "t2")
        self.assertEqual(manifest.failed(), ["outline"])
        manifest.advance("outline", "running", "t3")
        manifest.advance("outline", "done", "t4")
        self.assertEqual(manifest.timestamps["outline"]["done"], "t4")
        with self.assertRaises(StageFailed):
            manifest.advance("outline", "running", "t5")
        with self.assertRaises(StageFailed):
            manifest.advance("draft", "done", "t5")

    def test_config_hash_is_order_free(self):
        self.assertEqual(config_hash({"a": 1, "b": [1, 2]}), config_hash({"b": [1, 2], "a": 1}))
        self.assertNotEqual(config_hash({"a": 1}), config_hash({"a": 2}))


class TestRunDirectory(unittest.TestCase):
    def test_lock_is_exclusive(self):
        with tempfile.TemporaryDirectory() as tmp:
            with RunDirectory(tmp) as run:
                self.assertTrue(run.exists(config.RUN_LOCK))
                with self.assertRaises(RunLocked):
                    RunDirectory(tmp).acquire()
            self.assertFalse(os.path.exists(os.path.join(tmp, config.RUN_LOCK)))
            RunDirectory(tmp).acquire()

    def _write_lock(self, tmp: str, content: str) -> None:
        with open(os.path.join(tmp, config.RUN_LOCK), "w", encoding="utf-8") as f:
            f.write(content)

    def test_dead_owner_lock_is_reclaimed(self):
        with tempfile.TemporaryDirectory() as tmp:
            self._write_lock(tmp, "4242")
            with patch("run_store.pid_alive", return_value=False) as alive:
                with RunDirectory(tmp) as run:
                    self.assertEqual(run.read_text(config.RUN_LOCK), str(os.getpid()))
            alive.assert_called_once_with(4242)
            self.assertFalse(os.path.exists(os.path.join(tmp, config.RUN_LOCK)))

    def test_live_or_unreadable_owner_keeps_lock(self):
        with tempfile.TemporaryDirectory() as tmp:
            self._write_lock(tmp, "4242")
            with patch("run_store.pid_alive", return_value=True):
                with self.assertRaises(RunLocked):
                    RunDirectory(tmp).acquire()
            self._write_lock(tmp, "")
            with self.assertRaises(RunLocked):
                RunDirectory(tmp).acquire()
            self.assertEqual(os.listdir(tmp), [config.RUN_LOCK])

    def test_pid_alive(self):
        self.assertTrue(pid_alive(os.getpid()))
        self.assertFalse(pid_alive(0))
        with patch("run_store.os.kill", side_effect=ProcessLookupError):
            self.assertFalse(pid_alive(4242))
        with patch("run_store.os.kill", side_effect=PermissionError):
            self.assertTrue(pid_alive(1))

    def test_manifest_persists(self):
        with tempfile.TemporaryDirectory() as tmp:
            run = RunDirectory(tmp, clock=LogicalClock())
            self.assertIsNone(run.load_manifest())
            manifest = _manifest()
            run.set_stage(manifest, "outline", "running")
            loaded = run.load_manifest()
            self.assertEqual(loaded.status("outline"), "running")
            self.assertEqual(loaded.timestamps["outline"]["running"], "t000001")

    def test_json_is_sorted(self):
        with tempfile.TemporaryDirectory() as tmp:
            run = RunDirectory(tmp)
            run.write_json("nested/data.json", {"b": 1, "a": 2})
            self.assertTrue(run.read_text("nested/data.json").startswith('{\n  "a"'))
            path = os.path.join(tmp, "log.jsonl")
            write_json_line(path, {"z": 1, "y": 2})
            write_json_line(path, {"x": 3})
            with open(path, "r", encoding="utf-8") as f:
                lines = f.read().splitlines()
            self.assertEqual(lines[0], '{"y": 2, "z": 1}')
            self.assertEqual(json.loads(lines[1]), {"x": 3})


if __name__ == "__main__":
    unittest.main()
