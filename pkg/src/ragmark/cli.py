"""Command-line interface.

Every stage of the pipeline is a subcommand: crawl, chunk, embed, index,
query, ask, run, eval, sweep, report. Stages communicate through files, so
each can be re-run independently. Offline operation is first-class: pages
can be served from a local directory, the deterministic embedding provider
needs no network, and stub LLM clients stand in for hosted models.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from ragmark import __version__
from ragmark.chunk import STRATEGY_RECURSIVE, STRATEGY_SENTENCE, SplitterConfig, read_chunks, split_document, write_chunks
from ragmark.config import load_config, llm_spec_from_config, provider_spec_from_config
from ragmark.embed import (
    DEFAULT_TEST_DIM,
    KIND_DETERMINISTIC,
    EmbeddingCache,
    EmbeddingProviderSpec,
    build_provider,
    embed_texts,
)
from ragmark.evaluate import EvalCase, LlmJudge, MockJudge, score_case
from ragmark.experiment import (
    Pipeline,
    RAW_RESULTS_FILE,
    SweepConfig,
    aggregate,
    emit_report,
    load_question_set,
    read_rows,
    run_sweep,
)
from ragmark.generate import EchoLlm, HttpLlm, ScriptedLlm, answer_question, read_records, write_records
from ragmark.ingest import CrawlLimits, DirectoryFetcher, HttpFetcher, crawl, load_corpus, load_sitemap
from ragmark.retrieve import HybridRetriever, load_index, read_vectors_file, save_index, write_vectors_file

logger = logging.getLogger(__name__)


def parse_k_values(spec: str) -> tuple[int, ...]:
    """'1..10' for an inclusive range, or a comma-separated list '1,3,5'."""
    spec = spec.strip()
    if ".." in spec:
        lo, _, hi = spec.partition("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(part) for part in spec.split(","))


def _load_config_arg(path: str | None) -> dict[str, str]:
    return load_config(path) if path else {}


def _provider_from_args(args, config: dict[str, str]) -> EmbeddingProviderSpec:
    overrides = {}
    if getattr(args, "provider", None):
        if args.provider in ("det", "deterministic", "deterministic_test"):
            overrides["kind"] = "deterministic_test"
        elif args.provider in ("http", "http_api"):
            overrides["kind"] = "http_api"
        else:
            overrides["kind"] = "http_api"
            overrides["model_name"] = args.provider
    return provider_spec_from_config(config, **overrides)


def _spec_to_meta(spec: EmbeddingProviderSpec) -> dict:
    return dataclasses.asdict(spec)


def _spec_from_meta(meta: dict) -> EmbeddingProviderSpec:
    if not meta:
        return EmbeddingProviderSpec(
            kind=KIND_DETERMINISTIC, model_name="hashed-bag-of-words", dim=DEFAULT_TEST_DIM
        )
    names = {f.name for f in dataclasses.fields(EmbeddingProviderSpec)}
    return EmbeddingProviderSpec(**{k: v for k, v in meta.items() if k in names})


def _build_llm(args, config: dict[str, str]):
    stub = getattr(args, "stub", None)
    if stub:
        if stub == "echo":
            return EchoLlm()
        if stub.startswith("scripted:"):
            return ScriptedLlm.from_file(stub.split(":", 1)[1])
        raise SystemExit(f"unknown stub {stub!r}; use echo or scripted:<file>")
    model = getattr(args, "model", None)
    if model:
        return HttpLlm(llm_spec_from_config(config, model_name=model))
    if config.get("llm.endpoint"):
        return HttpLlm(llm_spec_from_config(config))
    return EchoLlm()


def _build_retriever(index_dir: str, cache_dir: str | None = None, bm25_k: int | None = None) -> HybridRetriever:
    loaded = load_index(index_dir)
    spec = _spec_from_meta(loaded.meta.get("provider", {}))
    provider = build_provider(spec)
    cache = EmbeddingCache(cache_dir) if cache_dir else None

    def embed_query(text: str):
        return embed_texts([text], provider, cache)[0]

    return HybridRetriever(
        bm25_index=loaded.bm25,
        vector_index=loaded.vectors,
        chunk_texts=loaded.chunk_text_map(),
        embed_query=embed_query,
        bm25_k=bm25_k,
        query_prefix=spec.query_prefix,
    )


def _embedder_from_index(index_dir: str):
    meta = load_index(index_dir).meta
    spec = _spec_from_meta(meta.get("provider", {}))
    provider = build_provider(spec)

    def embed_one(text: str):
        return embed_texts([text], provider)[0]

    return embed_one


def cmd_crawl(args) -> int:
    fetcher = DirectoryFetcher(args.site_dir) if args.site_dir else HttpFetcher(timeout=args.timeout)
    seeds = load_sitemap(args.sitemap, fetcher)
    if not seeds:
        print("sitemap contains no page URLs", file=sys.stderr)
        return 1
    limits = CrawlLimits(
        max_pages=args.max_pages,
        max_concurrent_fetches=args.concurrency,
        per_request_timeout=args.timeout,
        retry_count=args.retries,
    )
    documents = crawl(seeds, fetcher, limits, args.out, politeness_delay=args.delay)
    print(f"crawled {len(documents)} pages into {args.out}")
    return 0


def cmd_chunk(args) -> int:
    cfg = SplitterConfig(strategy=args.strategy, max_tokens=args.max_tokens, overlap_tokens=args.overlap)
    documents = load_corpus(args.corpus)
    chunks = [chunk for doc in documents for chunk in split_document(doc, cfg)]
    write_chunks(chunks, args.out)
    print(f"wrote {len(chunks)} chunks from {len(documents)} documents to {args.out}")
    return 0


def cmd_embed(args) -> int:
    config = _load_config_arg(args.config)
    spec = _provider_from_args(args, config)
    provider = build_provider(spec)
    cache = EmbeddingCache(args.cache) if args.cache else None
    chunks = read_chunks(args.chunks)
    if not chunks:
        print("no chunks to embed", file=sys.stderr)
        return 1
    vectors = embed_texts([c.text for c in chunks], provider, cache)
    write_vectors_file(args.out, list(zip((c.chunk_id for c in chunks), vectors)))
    Path(str(args.out) + ".meta.json").write_text(
        json.dumps({"provider": _spec_to_meta(spec)}, indent=2, sort_keys=True), encoding="utf-8"
    )
    print(f"embedded {len(chunks)} chunks with {provider.provider_id} to {args.out}")
    return 0


def cmd_index(args) -> int:
    chunks = read_chunks(args.chunks)
    entries = read_vectors_file(args.vectors)
    meta_path = Path(str(args.vectors) + ".meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    save_index(args.out, chunks, entries, k1=args.k1, b=args.b, meta=meta)
    print(f"indexed {len(chunks)} chunks into {args.out}")
    return 0


def cmd_query(args) -> int:
    retriever = _build_retriever(args.index, bm25_k=args.bm25_k)
    result = retriever.retrieve(args.q, args.k)
    for rank, (chunk_id, score) in enumerate(result.fused.items, start=1):
        print(f"{rank}\t{chunk_id}\t{score:.6f}")
    return 0


def cmd_ask(args) -> int:
    config = _load_config_arg(args.config)
    retriever = _build_retriever(args.index, bm25_k=args.bm25_k)
    llm = _build_llm(args, config)
    record = answer_question(args.q, args.k, retriever, llm)
    print(record.answer)
    if args.show_sources:
        for chunk_id in record.source_chunk_ids:
            print(f"source: {chunk_id}", file=sys.stderr)
    if record.error:
        print(f"error: {record.error}", file=sys.stderr)
        return 1
    return 0


def cmd_run(args) -> int:
    config = _load_config_arg(args.config)
    retriever = _build_retriever(args.index, bm25_k=args.bm25_k)
    llm = _build_llm(args, config)
    questions = []
    with open(args.questions, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                questions.append(json.loads(line)["question"])
    records = [answer_question(q, args.k, retriever, llm) for q in questions]
    write_records(records, args.out)
    failures = sum(1 for r in records if r.error)
    print(f"answered {len(records)} questions ({failures} errors) into {args.out}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config_arg(args.config)
    records = read_records(args.records)
    truth = {item.question: item for item in load_question_set(args.truth).entries}
    if args.judge == "mock":
        judge = MockJudge()
    else:
        judge = LlmJudge(_build_llm(args, config))
    embedder = (
        _embedder_from_index(args.index)
        if args.index
        else (lambda text: embed_texts([text], build_provider(provider_spec_from_config(config)))[0])
    )
    scored = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for record in records:
            item = truth.get(record.question)
            if item is None:
                logger.warning("no ground truth for question %r; skipping", record.question)
                continue
            case = EvalCase(
                question=record.question,
                category=item.category,
                expected_output=item.expected_output,
                record=record,
            )
            scores = score_case(case, embedder, judge)
            fh.write(
                json.dumps(
                    {
                        "question": record.question,
                        "category": item.category.value,
                        "k": record.k,
                        "scores": scores.to_dict(),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
            scored += 1
    print(f"scored {scored} records into {args.out}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config_arg(args.config)
    questions = load_question_set(args.questions)
    retriever = _build_retriever(args.index, bm25_k=args.bm25_k)
    llm = _build_llm(args, config)
    judge = MockJudge() if args.judge == "mock" else LlmJudge(llm)
    embedder = _embedder_from_index(args.index)
    cfg = SweepConfig(k_values=parse_k_values(args.k), judge=args.judge, bm25_pinned_k=args.bm25_k)
    pipeline = Pipeline(retriever=retriever, llm=llm, embedder=embedder, judge=judge)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(questions, cfg, pipeline, out_dir / RAW_RESULTS_FILE)
    print(f"swept {len(questions.entries)} questions x k={list(cfg.k_values)}: {len(rows)} rows")
    return 0


def cmd_report(args) -> int:
    rows = read_rows(Path(args.in_dir) / RAW_RESULTS_FILE)
    categories = sorted({row.category for row in rows}, key=lambda c: c.value)
    reports = {cat: aggregate(rows, cat) for cat in categories}
    paths = emit_report(reports, args.out, run_config={"source": str(args.in_dir)})
    for path in paths:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ragmark", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ragmark {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("crawl", help="fetch a sitemap and crawl its pages into a text corpus")
    p.add_argument("--sitemap", required=True, help="sitemap URL or local XML file")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--max-pages", type=int, default=1000)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--retries", type=int, default=1)
    p.add_argument("--delay", type=float, default=0.0, help="per-host politeness delay (s)")
    p.add_argument("--site-dir", help="serve page URLs from this local directory instead of the network")
    p.set_defaults(func=cmd_crawl)

    p = sub.add_parser("chunk", help="split a crawled corpus into chunks")
    p.add_argument("--corpus", required=True)
    p.add_argument("--strategy", choices=[STRATEGY_RECURSIVE, STRATEGY_SENTENCE], default=STRATEGY_RECURSIVE)
    p.add_argument("--max-tokens", type=int, default=1024)
    p.add_argument("--overlap", type=int, default=102)
    p.add_argument("--out", required=True, help="chunks JSONL file")
    p.set_defaults(func=cmd_chunk)

    p = sub.add_parser("embed", help="embed chunks, caching vectors on disk")
    p.add_argument("--chunks", required=True)
    p.add_argument("--provider", default="det", help="det, http, or an HTTP model name")
    p.add_argument("--cache", help="embedding cache directory")
    p.add_argument("--out", required=True, help="vectors file")
    p.add_argument("--config")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("index", help="build the retrieval index directory")
    p.add_argument("--chunks", required=True)
    p.add_argument("--vectors", required=True)
    p.add_argument("--out", required=True, help="index directory")
    p.add_argument("--k1", type=float, default=1.5)
    p.add_argument("--b", type=float, default=0.75)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="print the fused ranking for a query")
    p.add_argument("--index", required=True)
    p.add_argument("--q", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--bm25-k", type=int, help="pin the BM25 side to a fixed k")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("ask", help="answer one question against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--q", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--model", help="HTTP model name (requires --config with llm.endpoint)")
    p.add_argument("--stub", help="offline stand-in: echo or scripted:<file>")
    p.add_argument("--bm25-k", type=int)
    p.add_argument("--config")
    p.add_argument("--show-sources", action="store_true")
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("run", help="answer a batch of questions into a records file")
    p.add_argument("--questions", required=True, help="JSONL with a question field per line")
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True, help="records JSONL file")
    p.add_argument("--model")
    p.add_argument("--stub")
    p.add_argument("--bm25-k", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score answered records against ground truth")
    p.add_argument("--records", required=True)
    p.add_argument("--truth", required=True, help="JSONL with question, category, expected_output")
    p.add_argument("--judge", choices=["mock", "llm"], default="mock")
    p.add_argument("--out", required=True, help="scores JSONL file")
    p.add_argument("--index", help="reuse the index's embedding provider for metrics")
    p.add_argument("--model")
    p.add_argument("--stub")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a top-k sweep over a question set")
    p.add_argument("--questions", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--k", default="1..10", help="'1..10' or '1,3,5'")
    p.add_argument("--model")
    p.add_argument("--stub")
    p.add_argument("--judge", choices=["mock", "llm"], default="mock")
    p.add_argument("--bm25-k", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate sweep results into report files")
    p.add_argument("--in", dest="in_dir", required=True, help="sweep output directory")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
