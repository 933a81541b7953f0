"""Run directory ownership, manifest and snapshot files."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from typing import Any, Optional

from pydantic import BaseModel, Field

import config
from errors import RunLocked, StageFailed
from run_trace import Clock, wall_clock

logger = logging.getLogger(__name__)

STAGE_STATES = ("pending", "running", "done", "failed")
ALLOWED_MOVES = {
    "pending": {"running"},
    "running": {"done", "failed"},
    "failed": {"running"},
    "done": set(),
}


def config_hash(data: Any) -> str:
    blob = json.dumps(data, sort_keys=True, default=str)
    return hashlib.sha1(blob.encode("utf-8")).hexdigest()[:12]


def write_json_line(path: str, entry: dict) -> None:
    """Append one JSON object as a line."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def pid_alive(pid: int) -> bool:
    if pid <= 0:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class RunManifest(BaseModel):
    run_id: str
    topic: str
    corpus_snapshot: str
    backend_id: str
    decode: dict[str, Any] = Field(default_factory=dict)
    config_hashes: dict[str, str] = Field(default_factory=dict)
    stages: dict[str, str] = Field(default_factory=dict)
    timestamps: dict[str, dict[str, str]] = Field(default_factory=dict)

    def status(self, stage: str) -> str:
        return self.stages.get(stage, "pending")

    def advance(self, stage: str, state: str, now: str) -> None:
        current = self.status(stage)
        if state not in ALLOWED_MOVES[current]:
            raise StageFailed(f"stage '{stage}' cannot move from {current} to {state}")
        self.stages[stage] = state
        self.timestamps.setdefault(stage, {})[state] = now

    def failed(self) -> list[str]:
        return [s for s, state in self.stages.items() if state == "failed"]


class RunDirectory:
    """
    One run directory, owned by one process through a lock file.

    All artifacts are written relative to ``path``; JSON is written with
    sorted keys so identical runs produce identical bytes.
    """

    def __init__(self, path: str, clock: Clock = wall_clock):
        self.path = path
        self.clock = clock
        self._locked = False

    def file(self, *parts: str) -> str:
        return os.path.join(self.path, *parts)

    def exists(self, *parts: str) -> bool:
        return os.path.exists(self.file(*parts))

    def _owner(self) -> Optional[int]:
        try:
            with open(self.file(config.RUN_LOCK), "r", encoding="utf-8") as f:
                return int(f.read().strip())
        except (FileNotFoundError, ValueError):
            return None

    def _create_lock(self) -> None:
        fd = os.open(self.file(config.RUN_LOCK), os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))

    def acquire(self) -> None:
        """Take the lock file; a lock whose owner process is gone is reclaimed once."""
        os.makedirs(self.path, exist_ok=True)
        try:
            self._create_lock()
        except FileExistsError:
            owner = self._owner()
            if owner is None or pid_alive(owner):
                raise RunLocked(f"run directory {self.path} is owned by another process") from None
            logger.warning("[RunStore] Reclaiming lock of dead process %d in %s", owner, self.path)
            try:
                os.remove(self.file(config.RUN_LOCK))
            except FileNotFoundError:
                pass
            try:
                self._create_lock()
            except FileExistsError:
                raise RunLocked(f"run directory {self.path} is owned by another process") from None
        self._locked = True

    def release(self) -> None:
        if self._locked:
            try:
                os.remove(self.file(config.RUN_LOCK))
            except FileNotFoundError:
                pass
            self._locked = False

    def __enter__(self) -> "RunDirectory":
        self.acquire()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.release()

    def write_text(self, relpath: str, text: str) -> str:
        path = self.file(relpath)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def write_json(self, relpath: str, data: Any) -> str:
        return self.write_text(relpath, json.dumps(data, indent=2, sort_keys=True) + "\n")

    def read_json(self, relpath: str) -> Any:
        with open(self.file(relpath), "r", encoding="utf-8") as f:
            return json.load(f)

    def read_text(self, relpath: str) -> str:
        with open(self.file(relpath), "r", encoding="utf-8") as f:
            return f.read()

    # --- manifest ---------------------------------------------------------

    def load_manifest(self) -> Optional[RunManifest]:
        if not self.exists(config.RUN_MANIFEST):
            return None
        return RunManifest.model_validate(self.read_json(config.RUN_MANIFEST))

    def save_manifest(self, manifest: RunManifest) -> None:
        self.write_json(config.RUN_MANIFEST, manifest.model_dump())

    def set_stage(self, manifest: RunManifest, stage: str, state: str) -> None:
        manifest.advance(stage, state, self.clock())
        self.save_manifest(manifest)
        logger.info("[RunStore] %s -> %s", stage, state)
