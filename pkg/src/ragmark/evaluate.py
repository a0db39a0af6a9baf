"""Score answered questions with lexical, embedding-based, and judge-based
metrics.

Lexical overlap uses clipped multiset counts over lowercased word tokens
(pure punctuation dropped, stopwords kept). Embedding metrics report the
raw cosine separately and clamp the headline value into [0, 1]. Judge
metrics go through a relevance interface with two implementations: an HTTP
LLM judge and a deterministic offline judge built on the hashed
bag-of-words embedder.

A metric that cannot be computed is reported as absent (None), never as a
silent default.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple, Protocol

from ragmark.chunk import split_sentences, tokenize
from ragmark.embed import DEFAULT_TEST_DIM, EmbeddingVector, cosine, deterministic_embed
from ragmark.generate import LlmClient, QARecord
from ragmark.retrieve import RetrievalResult

logger = logging.getLogger(__name__)

Embedder = Callable[[str], EmbeddingVector]


class QuestionCategory(str, Enum):
    REASON_DENSE = "reason_dense"
    REASON_SPARSE = "reason_sparse"
    FACTUAL_DENSE = "factual_dense"
    FACTUAL_SPARSE = "factual_sparse"


@dataclass(frozen=True)
class EvalCase:
    question: str
    category: QuestionCategory
    expected_output: str
    record: QARecord


@dataclass
class MetricScores:
    """Per-case scores; None marks a metric that was not computable."""

    unigram_precision: float | None = None
    unigram_recall: float | None = None
    rouge1_f: float | None = None
    query_context_cosine: float | None = None
    csga: float | None = None
    contextual_precision: float | None = None
    contextual_recall: float | None = None
    contextual_relevancy: float | None = None
    answer_relevancy: float | None = None
    extras: dict[str, float] = field(default_factory=dict)

    PRIMARY_FIELDS = (
        "unigram_precision",
        "unigram_recall",
        "rouge1_f",
        "query_context_cosine",
        "csga",
        "contextual_precision",
        "contextual_recall",
        "contextual_relevancy",
        "answer_relevancy",
    )

    def __post_init__(self) -> None:
        for name in self.PRIMARY_FIELDS:
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")

    def to_dict(self) -> dict:
        data = {name: getattr(self, name) for name in self.PRIMARY_FIELDS}
        data["extras"] = dict(self.extras)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "MetricScores":
        kwargs = {name: data.get(name) for name in cls.PRIMARY_FIELDS}
        return cls(extras=dict(data.get("extras", {})), **kwargs)


def lexical_tokens(text: str) -> list[str]:
    """Lowercased word tokens with pure-punctuation tokens dropped;
    stopwords are kept.
    """
    return [t for t in tokenize(text.lower()) if any(c.isalnum() for c in t)]


def _clipped_overlap(candidate: Counter, reference: Counter) -> int:
    return sum(min(count, reference[token]) for token, count in candidate.items())


def unigram_precision(candidate: str, reference: str) -> float | None:
    """Fraction of candidate tokens also present in the reference, with
    multiset clipping. Absent when the candidate has no tokens.
    """
    cand = Counter(lexical_tokens(candidate))
    total = sum(cand.values())
    if total == 0:
        return None
    return _clipped_overlap(cand, Counter(lexical_tokens(reference))) / total


def unigram_recall(candidate: str, reference: str) -> float | None:
    """Fraction of reference tokens recovered by the candidate. Absent when
    the reference has no tokens.
    """
    ref = Counter(lexical_tokens(reference))
    total = sum(ref.values())
    if total == 0:
        return None
    return _clipped_overlap(Counter(lexical_tokens(candidate)), ref) / total


class RougeScore(NamedTuple):
    precision: float
    recall: float
    f1: float


def rouge1(candidate: str, reference: str) -> RougeScore | None:
    """Unigram overlap precision/recall and their harmonic mean."""
    precision = unigram_precision(candidate, reference)
    recall = unigram_recall(candidate, reference)
    if precision is None or recall is None:
        return None
    if precision + recall == 0.0:
        return RougeScore(precision, recall, 0.0)
    return RougeScore(precision, recall, 2.0 * precision * recall / (precision + recall))


class QueryContextSimilarity(NamedTuple):
    full: float | None
    per_chunk_mean: float | None


def query_context_similarity(
    question: str, retrieval: RetrievalResult, embedder: Embedder
) -> QueryContextSimilarity:
    """Cosine between the query and the concatenated context, plus the mean
    of per-chunk cosines as a secondary statistic.
    """
    if not retrieval.context_text:
        return QueryContextSimilarity(None, None)
    query_vec = embedder(question)
    full = cosine(query_vec, embedder(retrieval.context_text))
    chunk_values = [cosine(query_vec, embedder(text)) for text in retrieval.chunk_texts]
    mean = sum(chunk_values) / len(chunk_values) if chunk_values else None
    return QueryContextSimilarity(full, mean)


def csga(answer: str, expected_output: str, embedder: Embedder) -> float | None:
    """Cosine between the generated answer and the reference answer."""
    if not answer or not expected_output:
        return None
    return cosine(embedder(answer), embedder(expected_output))


class Judge(Protocol):
    def is_relevant(self, candidate: str, target: str) -> bool: ...


DEFAULT_JUDGE_THRESHOLD = 0.3


def mock_judge(
    text_a: str,
    text_b: str,
    threshold: float = DEFAULT_JUDGE_THRESHOLD,
    dim: int = DEFAULT_TEST_DIM,
    seed: int = 0,
) -> bool:
    """Deterministic offline relevance call: cosine of hashed bag-of-words
    embeddings against a threshold.
    """
    return cosine(deterministic_embed(text_a, dim, seed), deterministic_embed(text_b, dim, seed)) >= threshold


class MockJudge:
    def __init__(
        self,
        threshold: float = DEFAULT_JUDGE_THRESHOLD,
        dim: int = DEFAULT_TEST_DIM,
        seed: int = 0,
    ) -> None:
        self.threshold = threshold
        self.dim = dim
        self.seed = seed

    def is_relevant(self, candidate: str, target: str) -> bool:
        return mock_judge(candidate, target, self.threshold, self.dim, self.seed)


_JUDGE_PROMPT_VERSION = "relevance-judge/1"

_JUDGE_PROMPT = """Does the following passage contain information relevant to the target text? \
Answer with a single word: yes or no.

Passage:
{candidate}

Target:
{target}

Answer:"""


class LlmJudge:
    """Relevance judge backed by a chat-completion client; prompt version
    _JUDGE_PROMPT_VERSION.
    """

    def __init__(self, llm: LlmClient) -> None:
        self.llm = llm

    def is_relevant(self, candidate: str, target: str) -> bool:
        prompt = _JUDGE_PROMPT.format(candidate=candidate, target=target)
        text, _ = self.llm.complete(prompt)
        return text.strip().lower().startswith("yes")


class JudgeFailure(RuntimeError):
    """The judge could not label a case."""


class ContextualPrecision(NamedTuple):
    plain: float
    rank_weighted: float


def contextual_precision(case: EvalCase, judge: Judge) -> ContextualPrecision | None:
    """Fraction of retrieved chunks the judge deems relevant to the
    expected output, plus the rank-weighted variant (mean over relevant
    positions i of relevant_count(1..i)/i).
    """
    chunks = case.record.retrieval.chunk_texts
    if not chunks:
        return None
    labels = [judge.is_relevant(chunk, case.expected_output) for chunk in chunks]
    plain = sum(labels) / len(labels)
    weighted_terms = []
    relevant_so_far = 0
    for i, label in enumerate(labels, start=1):
        if label:
            relevant_so_far += 1
            weighted_terms.append(relevant_so_far / i)
    rank_weighted = sum(weighted_terms) / len(weighted_terms) if weighted_terms else 0.0
    return ContextualPrecision(plain, rank_weighted)


def contextual_recall(case: EvalCase, judge: Judge) -> float | None:
    """Fraction of expected-output statements attributable to the retrieved
    context. Statements are the expected output's sentences.
    """
    statements = split_sentences(case.expected_output)
    if not statements:
        return None
    context = case.record.retrieval.context_text
    if not context:
        return None
    attributable = sum(judge.is_relevant(stmt, context) for stmt in statements)
    return attributable / len(statements)


def contextual_relevancy(case: EvalCase, judge: Judge) -> float | None:
    """Fraction of context sentences relevant to the question."""
    context = case.record.retrieval.context_text
    if not context:
        return None
    sentences = split_sentences(context)
    if not sentences:
        return None
    relevant = sum(judge.is_relevant(sent, case.question) for sent in sentences)
    return relevant / len(sentences)


def answer_relevancy(case: EvalCase, judge: Judge) -> float | None:
    """Fraction of answer sentences relevant to the question."""
    answer = case.record.answer
    if not answer:
        return None
    sentences = split_sentences(answer)
    if not sentences:
        return None
    relevant = sum(judge.is_relevant(sent, case.question) for sent in sentences)
    return relevant / len(sentences)


def _clamp_unit(value: float | None) -> float | None:
    if value is None:
        return None
    return max(0.0, min(1.0, value))


def score_case(case: EvalCase, embedder: Embedder, judge: Judge | None = None) -> MetricScores:
    """Compute every metric for one case.

    Lexical metrics are computed against the expected output (headline
    fields) and against the retrieved context (extras), since either can
    serve as the reference. Raw cosines are kept in extras before clamping.
    """
    answer = case.record.answer
    expected = case.expected_output
    context = case.record.retrieval.context_text

    scores = MetricScores()
    scores.unigram_precision = unigram_precision(answer, expected)
    scores.unigram_recall = unigram_recall(answer, expected)
    rouge = rouge1(answer, expected)
    scores.rouge1_f = rouge.f1 if rouge else None

    for name, value in (
        ("unigram_precision_vs_context", unigram_precision(answer, context)),
        ("unigram_recall_vs_context", unigram_recall(answer, context)),
    ):
        if value is not None:
            scores.extras[name] = value

    similarity = query_context_similarity(case.question, case.record.retrieval, embedder)
    if similarity.full is not None:
        scores.extras["query_context_cosine_raw"] = similarity.full
        scores.query_context_cosine = _clamp_unit(similarity.full)
    if similarity.per_chunk_mean is not None:
        scores.extras["query_context_cosine_chunk_mean"] = similarity.per_chunk_mean

    csga_value = csga(answer, expected, embedder)
    if csga_value is not None:
        scores.extras["csga_raw"] = csga_value
        scores.csga = _clamp_unit(csga_value)

    if judge is not None:
        try:
            precision = contextual_precision(case, judge)
            if precision is not None:
                scores.contextual_precision = precision.plain
                scores.extras["contextual_precision_rank_weighted"] = precision.rank_weighted
            scores.contextual_recall = contextual_recall(case, judge)
            scores.contextual_relevancy = contextual_relevancy(case, judge)
            scores.answer_relevancy = answer_relevancy(case, judge)
        except JudgeFailure as exc:
            logger.warning("judge failed for %r: %s", case.question, exc)
    return scores
