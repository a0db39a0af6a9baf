"""Shared fixtures: a small static website, fake fetchers, a scripted HTTP
stub server, and a builder for the fully offline pipeline (directory-served
crawl, deterministic embeddings, echo LLM, deterministic judge).
"""

from __future__ import annotations

import http.server
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ragmark.chunk import SplitterConfig, split_document
from ragmark.embed import DeterministicProvider, EmbeddingCache, embed_texts
from ragmark.evaluate import MockJudge, QuestionCategory
from ragmark.experiment import Pipeline, QuestionItem, QuestionSet
from ragmark.generate import EchoLlm
from ragmark.ingest import (
    CrawlLimits,
    DirectoryFetcher,
    FetchResponse,
    FetchTimeout,
    crawl,
    load_sitemap,
)
from ragmark.retrieve import HybridRetriever, VectorIndex, bm25_build

SITE_HOST = "http://fixture.test"

_PAGE_TEMPLATE = """<!DOCTYPE html>
<html>
<head>
<style>body {{ margin: 0; }}</style>
<script>var tracker = "{name}";</script>
</head>
<body>
{body}
<footer>&copy; 2024 Innovation Center</footer>
</body>
</html>
"""

SITE_PAGES = {
    "index.html": (
        "<nav><a href='/about.html'>About</a> <a href='/programs.html'>Programs</a></nav>"
        "<p>The innovation center helps founders turn research into companies.</p>"
        "<p>Startups join the incubation program because it provides mentorship and seed funding. "
        "The accelerator supports forty startups each year.</p>"
    ),
    "about.html": (
        "<p>The innovation center was founded in 2015.</p>"
        "<p>Startups join the incubation program because it provides mentorship and seed funding. "
        "The accelerator supports forty startups each year. "
        "Our staff includes engineers and designers.</p>"
    ),
    "programs.html": (
        "<p>Startups join the incubation program because it provides mentorship and seed funding.</p>"
        "<p>The accelerator supports forty startups each year. "
        "Workshops run every month during autumn. Mentors meet founders weekly.</p>"
    ),
    "research.html": (
        "<p>The research lab moved to the north campus because it needed larger laboratories.</p>"
        "<p>Scientists at the lab study battery storage and solar materials. "
        "Visiting fellows publish joint papers.</p>"
    ),
    "admissions.html": (
        "<p>The accelerator supports forty startups each year.</p>"
        "<p>Applications open in January and close in March. "
        "Interviews happen over two weeks. Admitted teams relocate in June.</p>"
    ),
    "contact.html": (
        "<p>Write to hello at example dot org for general enquiries.</p>"
        "<p>The office sits beside the harbour. Visitors park near the gate.</p>"
    ),
    "faq.html": (
        "<p>Founders often ask about equity terms.</p>"
        "<p>Startups join the incubation program because it provides mentorship and seed funding. "
        "The program takes no equity in the first year.</p>"
    ),
}

SITE_QUESTIONS = [
    QuestionItem(
        question="Why do startups join the incubation program?",
        category=QuestionCategory.REASON_DENSE,
        expected_output=(
            "Startups join the incubation program because it provides mentorship and seed funding."
        ),
    ),
    QuestionItem(
        question="Why did the research lab move to the north campus?",
        category=QuestionCategory.REASON_SPARSE,
        expected_output=(
            "The research lab moved to the north campus because it needed larger laboratories."
        ),
    ),
    QuestionItem(
        question="How many startups does the accelerator support each year?",
        category=QuestionCategory.FACTUAL_DENSE,
        expected_output="The accelerator supports forty startups each year.",
    ),
    QuestionItem(
        question="When was the innovation center founded?",
        category=QuestionCategory.FACTUAL_SPARSE,
        expected_output="The innovation center was founded in 2015.",
    ),
]


def site_question_set() -> QuestionSet:
    return QuestionSet(name="fixture-site", entries=tuple(SITE_QUESTIONS))


def build_site(root: Path) -> Path:
    """Write the fixture site (pages plus sitemap.xml) under root."""
    root.mkdir(parents=True, exist_ok=True)
    urls = []
    for name, body in SITE_PAGES.items():
        (root / name).write_text(_PAGE_TEMPLATE.format(name=name, body=body), encoding="utf-8")
        urls.append(f"{SITE_HOST}/{name}")
    locs = "\n".join(f"  <url><loc>{url}</loc></url>" for url in urls)
    sitemap = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        '<urlset xmlns="http://www.sitemaps.org/schemas/sitemap/0.9">\n'
        f"{locs}\n"
        "</urlset>\n"
    )
    (root / "sitemap.xml").write_text(sitemap, encoding="utf-8")
    return root


@dataclass
class FakeFetcher:
    """Serves canned responses and records every fetch.

    Values can be FetchResponse instances, plain HTML strings (served as
    200 text/html), or the string "timeout" to raise FetchTimeout.
    """

    responses: dict[str, object]
    calls: list[str] = field(default_factory=list)

    def fetch(self, url: str) -> FetchResponse:
        self.calls.append(url)
        value = self.responses.get(url)
        if value is None:
            return FetchResponse(status=404, content_type="text/html", body=b"missing")
        if value == "timeout":
            raise FetchTimeout(f"scripted timeout for {url}")
        if isinstance(value, FetchResponse):
            return value
        return FetchResponse(status=200, content_type="text/html", body=str(value).encode("utf-8"))


@dataclass
class CountingLlm:
    """Wraps an LLM client, counting completions."""

    inner: object
    calls: int = 0
    model_name: str = "counting-stub"

    def complete(self, prompt: str):
        self.calls += 1
        return self.inner.complete(prompt)


class _ScriptedHandler(http.server.BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        self.server.requests.append(json.loads(body))
        delay, status, payload = self.server.script[
            min(len(self.server.requests) - 1, len(self.server.script) - 1)
        ]
        if delay:
            time.sleep(delay)
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


class StubServer:
    """Local HTTP endpoint that plays back a script of
    (delay_seconds, status, json_payload) responses and records every
    request body. The last script entry repeats for extra requests.
    """

    def __init__(self, script):
        self.server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _ScriptedHandler)
        self.server.script = script
        self.server.requests = []
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()

    @property
    def endpoint(self) -> str:
        return f"http://127.0.0.1:{self.server.server_port}/v1"

    @property
    def requests(self):
        return self.server.requests


PLATEAU_QUESTION = "alpha bravo charlie delta"

# Exactly three chunks share vocabulary with the question; the rest are
# disjoint, so their hashed bag-of-words vectors are near-orthogonal to it.
PLATEAU_RELEVANT = [
    "alpha bravo charlie delta",
    "alpha bravo charlie echo",
    "alpha bravo foxtrot golf",
]
PLATEAU_DISTRACTORS = [
    "harbor winds carry salt mist",
    "violins play quiet evening music",
    "mountain snow covers granite ridges",
    "bakers knead dough before dawn",
    "turbines spin above coastal cliffs",
    "library shelves hold dusty atlases",
    "gardeners prune roses in spring",
]


def build_plateau_retriever(dim: int = 256, seed: int = 0) -> HybridRetriever:
    from ragmark.chunk import Chunk, token_count

    texts = PLATEAU_RELEVANT + PLATEAU_DISTRACTORS
    chunks = [
        Chunk(chunk_id=f"p{i:02d}", doc_id="plateau", text=t, token_count=token_count(t), ordinal=i)
        for i, t in enumerate(texts)
    ]
    provider = DeterministicProvider(dim=dim, seed=seed)
    vectors = embed_texts([c.text for c in chunks], provider)
    return HybridRetriever(
        bm25_index=bm25_build(chunks),
        vector_index=VectorIndex.build(list(zip([c.chunk_id for c in chunks], vectors))),
        chunk_texts={c.chunk_id: c.text for c in chunks},
        embed_query=lambda q: embed_texts([q], provider)[0],
    )


def build_offline_pipeline(
    site_dir: Path,
    corpus_dir: Path,
    cache_dir: Path | None = None,
    splitter: SplitterConfig | None = None,
    dim: int = 256,
    seed: int = 0,
    now=lambda: 0.0,
) -> tuple[Pipeline, QuestionSet]:
    """Crawl the fixture site from disk and assemble the offline pipeline."""
    fetcher = DirectoryFetcher(site_dir)
    seeds = load_sitemap(f"{SITE_HOST}/sitemap.xml", fetcher)
    documents = crawl(seeds, fetcher, CrawlLimits(max_pages=50), corpus_dir)

    cfg = splitter or SplitterConfig()
    chunks = [chunk for doc in documents for chunk in split_document(doc, cfg)]

    provider = DeterministicProvider(dim=dim, seed=seed)
    cache = EmbeddingCache(cache_dir) if cache_dir else None
    vectors = embed_texts([c.text for c in chunks], provider, cache)
    vector_index = VectorIndex.build(list(zip([c.chunk_id for c in chunks], vectors)))
    bm25_index = bm25_build(chunks)

    def embed_one(text: str):
        return embed_texts([text], provider, cache)[0]

    retriever = HybridRetriever(
        bm25_index=bm25_index,
        vector_index=vector_index,
        chunk_texts={c.chunk_id: c.text for c in chunks},
        embed_query=embed_one,
    )
    pipeline = Pipeline(
        retriever=retriever,
        llm=EchoLlm(),
        embedder=embed_one,
        judge=MockJudge(),
        now=now,
    )
    return pipeline, site_question_set()
