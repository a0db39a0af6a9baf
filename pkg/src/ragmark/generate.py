"""Assemble grounded prompts, call a chat-completion endpoint, and record
answers with per-call latency.

A scripted stub client ships alongside the HTTP client so the whole
pipeline runs offline: the echo stub answers with the first sentence of
the retrieved context, and the playback stub replays canned answers.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import requests

from ragmark.chunk import split_sentences
from ragmark.retrieve import HybridRetriever, RankedList, RetrievalResult, SOURCE_BM25, SOURCE_FUSED, SOURCE_VECTOR

logger = logging.getLogger(__name__)

LLM_API_KEY_ENV = "RAGMARK_LLM_API_KEY"

PROMPT_TEMPLATE_VERSION = "grounded-qa/1"

SYSTEM_INSTRUCTION = (
    "You answer questions about a website using only the context supplied "
    "in the user message. Never draw on outside knowledge."
)

_PROMPT_TEMPLATE = """Answer the question using ONLY the context below. \
If the context does not contain the answer, reply exactly "I don't know."

Context:
{context}

Question: {question}

Answer:"""

_EMPTY_CONTEXT = "No context was retrieved."

# Event names emitted while answering a question.
EVENT_RETRIEVAL_DONE = "retrieval-done"
EVENT_PROMPT_BUILT = "prompt-built"
EVENT_LLM_FIRST_BYTE = "llm-first-byte"
EVENT_LLM_DONE = "llm-done"

EventCallback = Callable[[str, dict], None]


class LlmError(RuntimeError):
    def __init__(self, message: str, status: int | None = None, retryable: bool = False) -> None:
        super().__init__(message)
        self.status = status
        self.retryable = retryable


@dataclass(frozen=True)
class LlmSpec:
    endpoint: str
    model_name: str
    temperature: float = 0.0
    max_output_tokens: int = 512
    timeout: float = 30.0
    retries: int = 2
    backoff_base: float = 1.0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


def build_prompt(question: str, context_text: str) -> str:
    """Deterministic grounded-QA prompt; template version
    PROMPT_TEMPLATE_VERSION.
    """
    if not question:
        raise ValueError("question must be non-empty")
    context = context_text if context_text else _EMPTY_CONTEXT
    return _PROMPT_TEMPLATE.format(context=context, question=question)


def llm_complete(
    spec: LlmSpec,
    prompt: str,
    api_key: str | None = None,
    session: requests.Session | None = None,
) -> tuple[str, float]:
    """Send a (system, user) chat to the endpoint and return the first
    completion's text plus wall-clock latency for the whole call.

    Timeouts and 5xx responses are retried with exponential backoff;
    other 4xx responses fail immediately.
    """
    if api_key is None:
        api_key = os.environ.get(LLM_API_KEY_ENV)
    session = session or requests.Session()
    headers = {}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    payload = {
        "model": spec.model_name,
        "temperature": spec.temperature,
        "max_tokens": spec.max_output_tokens,
        "messages": [
            {"role": "system", "content": SYSTEM_INSTRUCTION},
            {"role": "user", "content": prompt},
        ],
    }
    start = time.perf_counter()
    delay = spec.backoff_base
    last_error: LlmError | None = None
    for attempt in range(spec.retries + 1):
        try:
            resp = session.post(spec.endpoint, json=payload, headers=headers, timeout=spec.timeout)
        except requests.Timeout:
            last_error = LlmError("request timed out", retryable=True)
        except requests.RequestException as exc:
            last_error = LlmError(f"request failed: {exc}", retryable=True)
        else:
            if resp.status_code // 100 == 2:
                text = resp.json()["choices"][0]["message"]["content"]
                return text, time.perf_counter() - start
            if resp.status_code // 100 == 5:
                last_error = LlmError(
                    f"server error {resp.status_code}", status=resp.status_code, retryable=True
                )
            else:
                raise LlmError(
                    f"request rejected with status {resp.status_code}: {resp.text[:200]}",
                    status=resp.status_code,
                    retryable=False,
                )
        if attempt < spec.retries:
            time.sleep(delay)
            delay *= 2
    assert last_error is not None
    raise LlmError(f"retries exhausted: {last_error}", status=last_error.status, retryable=True)


class LlmClient(Protocol):
    model_name: str

    def complete(self, prompt: str) -> tuple[str, float]: ...


class HttpLlm:
    def __init__(self, spec: LlmSpec, api_key: str | None = None) -> None:
        self.spec = spec
        self.model_name = spec.model_name
        self.api_key = api_key
        self.session = requests.Session()

    def complete(self, prompt: str) -> tuple[str, float]:
        return llm_complete(self.spec, prompt, api_key=self.api_key, session=self.session)


_CONTEXT_BLOCK_RE = re.compile(r"Context:\n(.*?)\n\nQuestion:", re.DOTALL)
_QUESTION_LINE_RE = re.compile(r"Question: (.*)")


def context_from_prompt(prompt: str) -> str:
    m = _CONTEXT_BLOCK_RE.search(prompt)
    return m.group(1) if m else ""


def question_from_prompt(prompt: str) -> str:
    m = _QUESTION_LINE_RE.search(prompt)
    return m.group(1) if m else ""


class EchoLlm:
    """Offline stub: answers with the first sentence of the prompt's
    context block.

    Reported latency is scripted (default 0.0) so runs are reproducible;
    pass ``delay`` to simulate inference time, in which case the measured
    wall-clock latency is reported instead.
    """

    def __init__(self, model_name: str = "echo-stub", fixed_latency: float | None = 0.0, delay: float = 0.0) -> None:
        self.model_name = model_name
        self.fixed_latency = fixed_latency
        self.delay = delay

    def complete(self, prompt: str) -> tuple[str, float]:
        start = time.perf_counter()
        if self.delay > 0:
            time.sleep(self.delay)
        context = context_from_prompt(prompt)
        if not context or context == _EMPTY_CONTEXT:
            answer = "I don't know."
        else:
            sentences = split_sentences(context)
            answer = sentences[0] if sentences else "I don't know."
        latency = time.perf_counter() - start if self.fixed_latency is None else self.fixed_latency
        return answer, latency


class ScriptedLlm:
    """Offline stub that plays back canned answers keyed by question text,
    falling back to echo behaviour for unknown questions.
    """

    def __init__(
        self,
        answers: dict[str, str] | None = None,
        model_name: str = "scripted-stub",
        fixed_latency: float = 0.0,
    ) -> None:
        self.answers = answers or {}
        self.model_name = model_name
        self.fixed_latency = fixed_latency
        self._echo = EchoLlm(model_name=model_name, fixed_latency=fixed_latency)

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "ScriptedLlm":
        answers = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                answers[rec["question"]] = rec["answer"]
        return cls(answers=answers, **kwargs)

    def complete(self, prompt: str) -> tuple[str, float]:
        question = question_from_prompt(prompt)
        if question in self.answers:
            return self.answers[question], self.fixed_latency
        return self._echo.complete(prompt)


_EMPTY_RANKED = {
    SOURCE_BM25: RankedList(items=(), source=SOURCE_BM25),
    SOURCE_VECTOR: RankedList(items=(), source=SOURCE_VECTOR),
    SOURCE_FUSED: RankedList(items=(), source=SOURCE_FUSED),
}


def _empty_retrieval(query: str, k: int) -> RetrievalResult:
    return RetrievalResult(
        query=query,
        k=k,
        fused=_EMPTY_RANKED[SOURCE_FUSED],
        bm25=_EMPTY_RANKED[SOURCE_BM25],
        vector=_EMPTY_RANKED[SOURCE_VECTOR],
        context_text="",
        chunk_texts=(),
    )


@dataclass(frozen=True)
class QARecord:
    question: str
    k: int
    retrieval: RetrievalResult
    prompt: str
    answer: str
    latency_seconds: float
    model_name: str
    timestamp: float
    error: str | None = None
    source_chunk_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.latency_seconds < 0:
            raise ValueError("latency_seconds must be >= 0")
        if not self.answer and self.error is None:
            raise ValueError("empty answer requires a recorded error")

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "k": self.k,
            "retrieval": self.retrieval.to_dict(),
            "prompt": self.prompt,
            "answer": self.answer,
            "latency_seconds": self.latency_seconds,
            "model_name": self.model_name,
            "timestamp": self.timestamp,
            "error": self.error,
            "source_chunk_ids": list(self.source_chunk_ids),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QARecord":
        return cls(
            question=data["question"],
            k=data["k"],
            retrieval=RetrievalResult.from_dict(data["retrieval"]),
            prompt=data["prompt"],
            answer=data["answer"],
            latency_seconds=data["latency_seconds"],
            model_name=data["model_name"],
            timestamp=data["timestamp"],
            error=data.get("error"),
            source_chunk_ids=tuple(data.get("source_chunk_ids", ())),
        )


def write_records(records: Sequence[QARecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")


def read_records(path: str | Path) -> list[QARecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(QARecord.from_dict(json.loads(line)))
    return records


def answer_question(
    question: str,
    k: int,
    retriever: HybridRetriever,
    llm: LlmClient,
    events: Sequence[EventCallback] = (),
    now: Callable[[], float] = time.time,
) -> QARecord:
    """Retrieve context, build the grounded prompt, and call the LLM.

    Retrieval and LLM failures are captured in the record's error field so
    batch runs continue; only precondition violations raise.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not question:
        raise ValueError("question must be non-empty")

    def emit(name: str, **payload) -> None:
        for callback in events:
            callback(name, payload)

    error: str | None = None
    try:
        retrieval = retriever.retrieve(question, k)
    except Exception as exc:
        logger.warning("retrieval failed for %r: %s", question, exc)
        retrieval = _empty_retrieval(question, k)
        error = f"retrieval: {exc}"
    emit(EVENT_RETRIEVAL_DONE, question=question, k=k, retrieved=len(retrieval.fused.items))

    prompt = build_prompt(question, retrieval.context_text)
    emit(EVENT_PROMPT_BUILT, prompt_chars=len(prompt))

    answer = ""
    latency = 0.0
    if error is None:
        try:
            answer, latency = llm.complete(prompt)
        except Exception as exc:
            logger.warning("LLM call failed for %r: %s", question, exc)
            error = f"llm: {exc}"
        else:
            if not answer:
                error = "llm: empty completion"
    # Responses are read whole, so first-byte coincides with completion.
    emit(EVENT_LLM_FIRST_BYTE, latency_seconds=latency)
    emit(EVENT_LLM_DONE, latency_seconds=latency, error=error)

    return QARecord(
        question=question,
        k=k,
        retrieval=retrieval,
        prompt=prompt,
        answer=answer,
        latency_seconds=latency,
        model_name=llm.model_name,
        timestamp=now(),
        error=error,
        source_chunk_ids=tuple(retrieval.fused.ids()),
    )


def run_batch(
    questions: Sequence[str],
    k: int,
    retriever: HybridRetriever,
    llm: LlmClient,
    max_in_flight: int = 1,
    events: Sequence[EventCallback] = (),
    now: Callable[[], float] = time.time,
) -> list[QARecord]:
    """Answer a batch of questions, emitting records in input order
    regardless of completion order. No record is dropped: failures are
    carried in the record's error field.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")
    if max_in_flight == 1:
        return [answer_question(q, k, retriever, llm, events, now) for q in questions]
    with ThreadPoolExecutor(max_workers=max_in_flight) as executor:
        futures = [
            executor.submit(answer_question, q, k, retriever, llm, events, now)
            for q in questions
        ]
        return [f.result() for f in futures]
