"""Orchestrate category-tagged question sets across top-k sweeps, aggregate
scores per category, and emit plot-ready report files.

Sweep results are persisted incrementally as JSON lines so an interrupted
sweep resumes by skipping completed (question, k) pairs. Report emission is
a pure function of the aggregated results: identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from ragmark import __version__
from ragmark.chunk import SplitterConfig
from ragmark.evaluate import Embedder, EvalCase, Judge, MetricScores, QuestionCategory, score_case
from ragmark.generate import PROMPT_TEMPLATE_VERSION, LlmClient, LlmSpec, QARecord, answer_question
from ragmark.retrieve import HybridRetriever

logger = logging.getLogger(__name__)

RAW_RESULTS_FILE = "raw_results.jsonl"
SUMMARY_CSV = "summary.csv"
CURVES_CSV = "curves.csv"
LATENCY_HISTOGRAM_CSV = "latency_histogram.csv"
RUN_SUMMARY_JSON = "run_summary.json"

CATEGORY_ORDER = (
    QuestionCategory.REASON_DENSE,
    QuestionCategory.REASON_SPARSE,
    QuestionCategory.FACTUAL_DENSE,
    QuestionCategory.FACTUAL_SPARSE,
)


@dataclass(frozen=True)
class QuestionItem:
    question: str
    category: QuestionCategory
    expected_output: str


@dataclass(frozen=True)
class QuestionSet:
    name: str
    entries: tuple[QuestionItem, ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("question set must contain at least one question")

    def categories(self) -> list[QuestionCategory]:
        seen = dict.fromkeys(item.category for item in self.entries)
        return list(seen)


def load_question_set(path: str | Path, name: str | None = None) -> QuestionSet:
    """JSON-lines file with question, category, expected_output fields."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            entries.append(
                QuestionItem(
                    question=rec["question"],
                    category=QuestionCategory(rec["category"]),
                    expected_output=rec.get("expected_output", ""),
                )
            )
    return QuestionSet(name=name or Path(path).stem, entries=tuple(entries))


@dataclass(frozen=True)
class SweepConfig:
    k_values: tuple[int, ...] = tuple(range(1, 11))
    splitter: SplitterConfig = field(default_factory=SplitterConfig)
    model: LlmSpec | None = None
    judge: str = "mock"
    bm25_pinned_k: int | None = None

    def __post_init__(self) -> None:
        if not self.k_values:
            raise ValueError("k_values must be non-empty")
        if any(k < 1 for k in self.k_values):
            raise ValueError("k values must be positive")
        if any(a >= b for a, b in zip(self.k_values, self.k_values[1:])):
            raise ValueError("k_values must be strictly increasing")


@dataclass
class Pipeline:
    """Everything a sweep needs to answer and score one question."""

    retriever: HybridRetriever
    llm: LlmClient
    embedder: Embedder
    judge: Judge | None = None
    now: Callable[[], float] = time.time


@dataclass(frozen=True)
class SweepRow:
    question_index: int
    question: str
    category: QuestionCategory
    k: int
    record: QARecord
    scores: MetricScores

    def to_dict(self) -> dict:
        return {
            "question_index": self.question_index,
            "question": self.question,
            "category": self.category.value,
            "k": self.k,
            "record": self.record.to_dict(),
            "scores": self.scores.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SweepRow":
        return cls(
            question_index=data["question_index"],
            question=data["question"],
            category=QuestionCategory(data["category"]),
            k=data["k"],
            record=QARecord.from_dict(data["record"]),
            scores=MetricScores.from_dict(data["scores"]),
        )


def read_rows(path: str | Path) -> list[SweepRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(SweepRow.from_dict(json.loads(line)))
    return rows


def run_sweep(
    questions: QuestionSet,
    cfg: SweepConfig,
    pipeline: Pipeline,
    out_path: str | Path | None = None,
) -> list[SweepRow]:
    """Answer and score every (question, k) pair.

    When ``out_path`` is given, each finished row is appended immediately
    and pairs already present in the file are skipped, so a killed sweep
    picks up where it left off. Per-pair failures are recorded in the row
    and the sweep continues.
    """
    done: dict[tuple[int, int], SweepRow] = {}
    if out_path is not None and Path(out_path).exists():
        for row in read_rows(out_path):
            done[(row.question_index, row.k)] = row
        if done:
            logger.info("resuming sweep: %d rows already complete", len(done))

    if pipeline.retriever.bm25_k is None and cfg.bm25_pinned_k is not None:
        pipeline.retriever.bm25_k = cfg.bm25_pinned_k

    out_fh = open(out_path, "a", encoding="utf-8") if out_path is not None else None
    rows: list[SweepRow] = []
    try:
        for qi, item in enumerate(questions.entries):
            for k in cfg.k_values:
                key = (qi, k)
                if key in done:
                    rows.append(done[key])
                    continue
                record = answer_question(
                    item.question, k, pipeline.retriever, pipeline.llm, now=pipeline.now
                )
                case = EvalCase(
                    question=item.question,
                    category=item.category,
                    expected_output=item.expected_output,
                    record=record,
                )
                scores = score_case(case, pipeline.embedder, pipeline.judge)
                row = SweepRow(
                    question_index=qi,
                    question=item.question,
                    category=item.category,
                    k=k,
                    record=record,
                    scores=scores,
                )
                rows.append(row)
                if out_fh is not None:
                    out_fh.write(json.dumps(row.to_dict(), ensure_ascii=False) + "\n")
                    out_fh.flush()
    finally:
        if out_fh is not None:
            out_fh.close()
    return rows


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def median_lower(values: Sequence[float]) -> float:
    """Median that is always an observed value: the lower-middle element
    for even counts.
    """
    if not values:
        raise ValueError("median of empty sequence")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class MetricSummary:
    average: float
    median: float
    count: int
    excluded: int


@dataclass
class CategoryReport:
    category: QuestionCategory
    metrics: dict[str, MetricSummary]
    latency_average: float
    latency_median: float
    latency_values: list[float]
    csga_range: tuple[float, float] | None
    rows: list[SweepRow]


def aggregate(rows: Iterable[SweepRow], category: QuestionCategory) -> CategoryReport:
    """Collapse a category's raw (question, k) matrix into per-metric
    average/median, latency statistics, and the csga range. Absent values
    are excluded, with exclusion counts kept alongside.
    """
    selected = [row for row in rows if row.category == category]
    if not selected:
        raise ValueError(f"no rows for category {category.value}")
    metrics: dict[str, MetricSummary] = {}
    for name in MetricScores.PRIMARY_FIELDS:
        values = [
            getattr(row.scores, name) for row in selected if getattr(row.scores, name) is not None
        ]
        if values:
            metrics[name] = MetricSummary(
                average=_mean(values),
                median=median_lower(values),
                count=len(values),
                excluded=len(selected) - len(values),
            )
    latencies = [row.record.latency_seconds for row in selected]
    csga_values = [row.scores.csga for row in selected if row.scores.csga is not None]
    return CategoryReport(
        category=category,
        metrics=metrics,
        latency_average=_mean(latencies),
        latency_median=median_lower(latencies),
        latency_values=latencies,
        csga_range=(min(csga_values), max(csga_values)) if csga_values else None,
        rows=selected,
    )


def latency_histogram(
    values: Sequence[float], bin_width: float = 0.5
) -> list[tuple[float, float, int]]:
    """Fixed-width bins from the smallest to the largest value, inclusive
    of empty bins in between: [lo, lo+width) each.
    """
    if not values:
        return []
    first = math.floor(min(values) / bin_width)
    last = math.floor(max(values) / bin_width)
    counts = [0] * (last - first + 1)
    for v in values:
        counts[math.floor(v / bin_width) - first] += 1
    return [
        (round((first + i) * bin_width, 10), round((first + i + 1) * bin_width, 10), count)
        for i, count in enumerate(counts)
    ]


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    return f"{value:.6g}"


# Rows of the per-category summary table: metric, statistic, and how to
# pull the cell value out of a CategoryReport.
_SUMMARY_LAYOUT: list[tuple[str, str]] = [
    ("unigram_precision", "average"),
    ("unigram_precision", "median"),
    ("unigram_recall", "average"),
    ("unigram_recall", "median"),
    ("rouge1_f", "average"),
    ("rouge1_f", "median"),
    ("query_context_cosine", "average"),
    ("query_context_cosine", "median"),
    ("csga", "average"),
    ("csga", "median"),
    ("contextual_precision", "average"),
    ("contextual_recall", "average"),
    ("contextual_relevancy", "average"),
    ("contextual_relevancy", "median"),
    ("answer_relevancy", "average"),
]


def emit_report(
    reports: dict[QuestionCategory, CategoryReport],
    out_dir: str | Path,
    run_config: dict | None = None,
) -> list[Path]:
    """Write the report files:

    - summary.csv: one row per (metric, statistic), one column per category
    - curves.csv: per-question top-k series of the plotted quantities
    - latency_histogram.csv: 0.5-second bins over all latencies
    - run_summary.json: config echo, versions, and latency aggregates

    Emission is deterministic: identical reports give byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    categories = [c for c in CATEGORY_ORDER if c in reports]
    categories += [c for c in reports if c not in categories]

    summary_path = out / SUMMARY_CSV
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "statistic"] + [c.value for c in categories])
        for metric, statistic in _SUMMARY_LAYOUT:
            cells = []
            for cat in categories:
                summary = reports[cat].metrics.get(metric)
                cells.append(_fmt(getattr(summary, statistic)) if summary else "")
            writer.writerow([metric, statistic] + cells)
        writer.writerow(
            ["latency_seconds", "average"] + [_fmt(reports[c].latency_average) for c in categories]
        )
        writer.writerow(
            ["latency_seconds", "median"] + [_fmt(reports[c].latency_median) for c in categories]
        )
        range_cells = []
        for cat in categories:
            rng = reports[cat].csga_range
            range_cells.append(f"[{_fmt(rng[0])},{_fmt(rng[1])}]" if rng else "")
        writer.writerow(["csga", "range"] + range_cells)

    curves_path = out / CURVES_CSV
    with open(curves_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "question_index",
                "category",
                "k",
                "query_context_cosine",
                "query_context_cosine_chunk_mean",
                "unigram_precision",
                "unigram_recall",
                "csga",
            ]
        )
        all_rows = [row for cat in categories for row in reports[cat].rows]
        for row in sorted(all_rows, key=lambda r: (r.question_index, r.k)):
            writer.writerow(
                [
                    row.question_index,
                    row.category.value,
                    row.k,
                    _fmt(row.scores.query_context_cosine),
                    _fmt(row.scores.extras.get("query_context_cosine_chunk_mean")),
                    _fmt(row.scores.unigram_precision),
                    _fmt(row.scores.unigram_recall),
                    _fmt(row.scores.csga),
                ]
            )

    histogram_path = out / LATENCY_HISTOGRAM_CSV
    all_latencies = [v for cat in categories for v in reports[cat].latency_values]
    with open(histogram_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_start", "bin_end", "count"])
        for lo, hi, count in latency_histogram(all_latencies):
            writer.writerow([_fmt(lo), _fmt(hi), count])

    summary_json_path = out / RUN_SUMMARY_JSON
    payload = {
        "config": run_config or {},
        "versions": {"ragmark": __version__, "prompt_template": PROMPT_TEMPLATE_VERSION},
        "categories": {
            cat.value: {
                "rows": len(reports[cat].rows),
                "latency_average": reports[cat].latency_average,
                "latency_median": reports[cat].latency_median,
                "metric_exclusions": {
                    name: summary.excluded
                    for name, summary in sorted(reports[cat].metrics.items())
                    if summary.excluded
                },
            }
            for cat in categories
        },
    }
    summary_json_path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return [summary_path, curves_path, histogram_path, summary_json_path]
