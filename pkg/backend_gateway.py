"""Uniform access to text-generation and embedding services.

Every pipeline stage receives a :class:`Gateway` handle and never talks to a
network client directly.  The gateway renders prompt templates, enforces
request/token budgets, retries transient transport failures with exponential
backoff and parses structured (JSON) replies, re-prompting with the parse
error when a reply does not match the requested shape.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Optional, Protocol, Sequence, Type, TypeVar

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator

import config
from errors import (
    BackendFailure,
    BindingIncomplete,
    BudgetExceeded,
    EmptyReply,
    EmptyText,
    ParseFailedAfterRepairs,
    TemplateMissing,
    TransportError,
    TransportExhausted,
)

# The OpenAI client is optional; without it only the mock backend is usable.
try:
    from openai import OpenAI  # type: ignore
    import openai  # type: ignore
except Exception:
    OpenAI = None  # type: ignore
    openai = None  # type: ignore

try:
    from dotenv import load_dotenv  # type: ignore
except Exception:
    load_dotenv = None  # type: ignore

logger = logging.getLogger(__name__)

PLACEHOLDER_RE = re.compile(r"\[([A-Z][A-Z0-9_ ]*[A-Z0-9])\]")
REPAIR_NOTE = (
    "Your previous reply could not be used: {error}\n"
    "Answer again and follow the required output format exactly."
)

T = TypeVar("T")
M = TypeVar("M", bound=BaseModel)


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = config.DEFAULT_TEMPERATURE
    max_output_tokens: int = config.DEFAULT_MAX_OUTPUT_TOKENS
    seed: int = config.DEFAULT_SEED

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be > 0")


@dataclass(frozen=True)
class PromptRequest:
    role_tag: str
    template_id: str
    bindings: dict[str, str]
    decode_params: DecodeParams = field(default_factory=DecodeParams)
    repair_notes: tuple[str, ...] = ()


def make_request(role_tag: str, bindings: dict[str, Any], decode: Optional[DecodeParams] = None) -> PromptRequest:
    """Build a request whose template id is derived from the role tag."""
    return PromptRequest(
        role_tag=role_tag,
        template_id=role_tag.replace("-", "_"),
        bindings={k: str(v) for k, v in bindings.items()},
        decode_params=decode or DecodeParams(),
    )


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens


@dataclass(frozen=True)
class GenerationResult:
    text: str
    usage: Usage
    backend_id: str


class EmbeddingVector:
    """Fixed-dimension real vector returned by :meth:`Gateway.embed`."""

    __slots__ = ("values",)

    def __init__(self, values: Iterable[float]):
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.size == 0:
            raise ValueError("embedding must have a positive dimension")
        arr.setflags(write=False)
        self.values = arr

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"EmbeddingVector(dim={self.dim})"


class Backend(Protocol):
    backend_id: str

    def complete(self, prompt: str, request: PromptRequest) -> tuple[str, Optional[Usage]]:
        ...

    def embed(self, text: str) -> Sequence[float]:
        ...


def approx_tokens(text: str) -> int:
    return len(text.split())


class PromptLibrary:
    """Plain-text templates with ``[PLACEHOLDER]`` markers, one file per template."""

    def __init__(self, prompt_dir: Optional[str] = None):
        self.prompt_dir = prompt_dir or os.path.join(os.path.dirname(os.path.abspath(__file__)), config.PROMPT_DIR)
        self._cache: dict[str, str] = {}

    def template(self, template_id: str) -> str:
        if template_id not in self._cache:
            path = os.path.join(self.prompt_dir, f"{template_id}.txt")
            if not os.path.exists(path):
                raise TemplateMissing(f"no template '{template_id}' in {self.prompt_dir}")
            with open(path, "r", encoding="utf-8") as f:
                self._cache[template_id] = f.read()
        return self._cache[template_id]

    def placeholders(self, template_id: str) -> set[str]:
        return set(PLACEHOLDER_RE.findall(self.template(template_id)))

    def render(self, template_id: str, bindings: dict[str, str]) -> str:
        text = self.template(template_id)
        wanted = self.placeholders(template_id)
        missing = wanted - set(bindings)
        unused = set(bindings) - wanted
        if missing:
            raise BindingIncomplete(f"template '{template_id}' missing bindings: {sorted(missing)}")
        if unused:
            raise BindingIncomplete(f"template '{template_id}' got unused bindings: {sorted(unused)}")
        # Single pass so bound text containing markers is never re-expanded.
        return PLACEHOLDER_RE.sub(lambda m: bindings[m.group(1)], text)

    def load_json(self, name: str) -> Any:
        with open(os.path.join(self.prompt_dir, name), "r", encoding="utf-8") as f:
            return json.load(f)


class Budget:
    """
    Monotone request/token accounting with optional ceilings.

    A request is counted when it is reserved, so concurrent callers can never
    pass the request ceiling together.  The prompt estimate is held as pending
    tokens until :meth:`record` swaps it for the reported usage, or
    :meth:`release` drops it after a failed call.  A failed call still counts
    as a request.
    """

    def __init__(self, max_requests: Optional[int] = None, max_tokens: Optional[int] = None):
        self.max_requests = max_requests
        self.max_tokens = max_tokens
        self.requests = 0
        self.input_tokens = 0
        self.output_tokens = 0
        self._pending = 0
        self._lock = threading.Lock()

    @property
    def tokens(self) -> int:
        return self.input_tokens + self.output_tokens

    def reserve(self, input_tokens: int) -> int:
        """Fail before a call that would cross a ceiling; returns the held estimate."""
        input_tokens = max(input_tokens, 0)
        with self._lock:
            if self.max_requests is not None and self.requests >= self.max_requests:
                raise BudgetExceeded(f"request budget {self.max_requests} reached")
            if self.max_tokens is not None and self.tokens + self._pending + input_tokens > self.max_tokens:
                raise BudgetExceeded(f"token budget {self.max_tokens} would be crossed by the prompt")
            self.requests += 1
            self._pending += input_tokens
        return input_tokens

    def release(self, reserved: int) -> None:
        with self._lock:
            self._pending -= reserved

    def record(self, usage: Usage, reserved: int = 0) -> None:
        with self._lock:
            self._pending -= reserved
            self.input_tokens += max(usage.input_tokens, 0)
            self.output_tokens += max(usage.output_tokens, 0)
            crossed = self.max_tokens is not None and self.tokens > self.max_tokens
        if crossed:
            raise BudgetExceeded(f"token budget {self.max_tokens} crossed ({self.tokens} used)")

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {
                "requests": self.requests,
                "input_tokens": self.input_tokens,
                "output_tokens": self.output_tokens,
            }


class BackendConfig(BaseModel):
    endpoint: Optional[str] = None
    model: str = config.DEFAULT_GENERATION_MODEL
    embedding_model: str = config.DEFAULT_EMBEDDING_MODEL
    api_key_env: str = config.API_KEY_ENV
    max_requests: Optional[int] = None
    max_tokens: Optional[int] = None
    temperature: float = config.DEFAULT_TEMPERATURE
    max_output_tokens: int = Field(default=config.DEFAULT_MAX_OUTPUT_TOKENS, gt=0)
    retries: int = Field(default=config.RETRY_LIMIT, ge=0)
    repairs: int = Field(default=config.STRUCTURED_REPAIRS, ge=0)
    judge_models: list[str] = Field(default_factory=list)

    @classmethod
    def load(cls, path: Optional[str]) -> "BackendConfig":
        if not path:
            return cls()
        with open(path, "r", encoding="utf-8") as f:
            return cls.model_validate(json.load(f))

    def decode(self, seed: int = config.DEFAULT_SEED) -> DecodeParams:
        return DecodeParams(self.temperature, self.max_output_tokens, seed)


class LiveBackend:
    """OpenAI-compatible chat and embedding endpoint."""

    def __init__(self, backend_config: BackendConfig):
        if OpenAI is None:
            raise BackendFailure("openai package is not installed")
        if load_dotenv is not None:
            load_dotenv()
        api_key = os.getenv(backend_config.api_key_env)
        if not api_key:
            raise BackendFailure(f"environment variable {backend_config.api_key_env} is not set")
        self.config = backend_config
        self.client = OpenAI(api_key=api_key, base_url=backend_config.endpoint)
        self.backend_id = f"live:{backend_config.model}"

    def _transient(self) -> tuple[type, ...]:
        names = ("APIConnectionError", "APITimeoutError", "RateLimitError", "InternalServerError")
        return tuple(getattr(openai, n) for n in names if openai is not None and hasattr(openai, n))

    def complete(self, prompt: str, request: PromptRequest) -> tuple[str, Optional[Usage]]:
        params = request.decode_params
        try:
            response = self.client.chat.completions.create(
                model=self.config.model,
                messages=[{"role": "user", "content": prompt}],
                temperature=params.temperature,
                max_tokens=params.max_output_tokens,
                seed=params.seed,
            )
        except self._transient() as e:
            raise TransportError(str(e)) from e
        text = (response.choices[0].message.content or "").strip()
        usage = None
        if getattr(response, "usage", None) is not None:
            usage = Usage(response.usage.prompt_tokens or 0, response.usage.completion_tokens or 0)
        return text, usage

    def embed(self, text: str) -> Sequence[float]:
        try:
            response = self.client.embeddings.create(model=self.config.embedding_model, input=text)
        except self._transient() as e:
            raise TransportError(str(e)) from e
        return response.data[0].embedding


class StructuredParseError(ValueError):
    pass


def extract_json_object(text: str) -> Optional[dict]:
    """Return the first JSON object embedded in ``text``, tolerating fences and prose."""
    cleaned = re.sub(r"```(?:json)?", "", text)
    decoder = json.JSONDecoder()
    for match in re.finditer(r"\{", cleaned):
        try:
            obj, _ = decoder.raw_decode(cleaned[match.start():])
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def parse_structured(
    text: str,
    shape: Type[M],
    fallback: Optional[Callable[[str], Optional[dict]]] = None,
) -> M:
    obj = extract_json_object(text)
    if obj is None and fallback is not None:
        obj = fallback(text)
    if obj is None:
        raise StructuredParseError("reply contains no JSON object")
    try:
        return shape.model_validate(obj)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first.get("loc", ())) or "object"
        raise StructuredParseError(f"field '{loc}': {first.get('msg')}") from e


class Gateway:
    """
    Shared handle to one backend.

    Parameters
    ----------
    backend : Backend
        Object providing ``complete`` and ``embed``.
    prompts : PromptLibrary, optional
        Template source; defaults to the bundled ``prompts/`` directory.
    budget : Budget, optional
        Request/token ceilings; unlimited when omitted.
    retries : int
        Transient failures are retried this many times (``retries + 1``
        attempts in total) with delays ``base_delay * 2**i``.
    repairs : int
        Re-prompts issued by :meth:`generate_structured` after a parse failure.
    deterministic : bool
        Serialize backend calls in submission order and run fan-outs
        sequentially.
    """

    def __init__(
        self,
        backend: Backend,
        prompts: Optional[PromptLibrary] = None,
        budget: Optional[Budget] = None,
        *,
        retries: int = config.RETRY_LIMIT,
        base_delay: float = config.RETRY_BASE_DELAY,
        repairs: int = config.STRUCTURED_REPAIRS,
        deterministic: bool = True,
        workers: int = 4,
        decode: Optional[DecodeParams] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.prompts = prompts or PromptLibrary()
        self.budget = budget or Budget()
        self.retries = retries
        self.base_delay = base_delay
        self.repairs = repairs
        self.deterministic = deterministic
        self.workers = workers
        self.decode = decode or DecodeParams()
        self._sleep = sleep
        self._call_lock = threading.Lock()

    @property
    def backend_id(self) -> str:
        return self.backend.backend_id

    def request(self, role_tag: str, **bindings: Any) -> PromptRequest:
        return make_request(role_tag, bindings, self.decode)

    def _with_retries(self, fn: Callable[[], T], what: str) -> T:
        last_error: Optional[Exception] = None
        attempts = self.retries + 1
        for attempt in range(attempts):
            try:
                if self.deterministic:
                    with self._call_lock:
                        return fn()
                return fn()
            except TransportError as e:
                last_error = e
                logger.warning("[Gateway] %s attempt %d/%d failed: %s", what, attempt + 1, attempts, e)
                if attempt < attempts - 1:
                    self._sleep(self.base_delay * (2 ** attempt))
        raise TransportExhausted(attempts, last_error)

    def generate(self, request: PromptRequest) -> GenerationResult:
        prompt = self.prompts.render(request.template_id, request.bindings)
        if request.repair_notes:
            prompt = prompt + "\n\n" + "\n\n".join(request.repair_notes)
        input_estimate = approx_tokens(prompt)
        reserved = self.budget.reserve(input_estimate)
        try:
            text, usage = self._with_retries(lambda: self.backend.complete(prompt, request), request.role_tag)
        except Exception:
            self.budget.release(reserved)
            raise
        if usage is None:
            usage = Usage(input_estimate, approx_tokens(text))
        self.budget.record(usage, reserved)
        if not text or not text.strip():
            raise EmptyReply(f"backend returned empty text for '{request.role_tag}'")
        logger.debug("[Gateway] %s -> %d chars", request.role_tag, len(text))
        return GenerationResult(text=text, usage=usage, backend_id=self.backend_id)

    def generate_structured(
        self,
        request: PromptRequest,
        shape: Type[M],
        *,
        repairs: Optional[int] = None,
        fallback: Optional[Callable[[str], Optional[dict]]] = None,
    ) -> M:
        """Parse the reply into ``shape``, re-prompting with the parse error on failure."""
        repairs = self.repairs if repairs is None else repairs
        notes = list(request.repair_notes)
        last_error = ""
        for attempt in range(repairs + 1):
            result = self.generate(replace(request, repair_notes=tuple(notes)))
            try:
                return parse_structured(result.text, shape, fallback)
            except StructuredParseError as e:
                last_error = str(e)
                logger.info("[Gateway] %s reply unparseable (%s)", request.role_tag, last_error)
                notes.append(REPAIR_NOTE.format(error=last_error))
        raise ParseFailedAfterRepairs(repairs + 1, last_error)

    def embed(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise EmptyText("cannot embed empty text")
        values = self._with_retries(lambda: self.backend.embed(text), "embed")
        return EmbeddingVector(values)

    def fan_out(self, fn: Callable[[Any], T], items: Sequence[Any]) -> list[T]:
        """Apply ``fn`` to every item; results keep input order."""
        if self.deterministic or self.workers <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def usage(self) -> dict[str, int]:
        return self.budget.snapshot()


class KeywordList(BaseModel):
    keywords: list[str] = Field(default_factory=list)

    @field_validator("keywords", mode="before")
    @classmethod
    def _drop_non_strings(cls, value: Any) -> Any:
        if isinstance(value, list):
            return [v for v in value if isinstance(v, str)]
        return value


def dedupe_keywords(keywords: Iterable[str], exclude: Iterable[str] = ()) -> list[str]:
    """Trim, drop blanks and case-insensitive duplicates (also against ``exclude``)."""
    seen = {k.strip().lower() for k in exclude}
    result: list[str] = []
    for kw in keywords:
        kw = " ".join(kw.split())
        if kw and kw.lower() not in seen:
            seen.add(kw.lower())
            result.append(kw)
    return result
