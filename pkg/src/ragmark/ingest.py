"""Fetch a site's sitemap, crawl the listed pages, and persist a clean
text corpus.

The crawler visits sitemap URLs breadth-first, strips markup, and writes
one UTF-8 text file per page plus a TSV manifest recording the outcome of
every attempted URL. Page fetching goes through a small interface so the
whole pipeline can run against a local directory instead of the network.
"""

from __future__ import annotations

import hashlib
import html.parser
import logging
import re
import threading
import time
import unicodedata
import xml.etree.ElementTree as ET
from collections import deque
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol
from urllib.parse import urlparse

import requests

logger = logging.getLogger(__name__)


class SitemapParseError(ValueError):
    """Sitemap XML could not be parsed."""


class FetchError(RuntimeError):
    """A page could not be fetched (network-level failure)."""


class FetchTimeout(FetchError):
    """The fetch exceeded its deadline."""


class CrawlError(RuntimeError):
    """The crawl as a whole failed."""


_URL_SCHEMES = ("http", "https")


@dataclass(frozen=True)
class SitemapEntry:
    url: str
    is_sitemap: bool = False

    def __post_init__(self) -> None:
        parsed = urlparse(self.url)
        if parsed.scheme not in _URL_SCHEMES or not parsed.netloc:
            raise ValueError(f"not an absolute http(s) URL: {self.url!r}")


@dataclass(frozen=True)
class Document:
    """One crawled page's cleaned text plus source URL."""

    id: str
    url: str
    text: str
    fetched_at: float

    def __post_init__(self) -> None:
        if not re.fullmatch(r"[A-Za-z0-9_.-]+", self.id):
            raise ValueError(f"id is not filesystem-safe: {self.id!r}")
        if "  " in self.text or self.text != self.text.strip():
            raise ValueError("text must be stripped with single spaces only")


@dataclass(frozen=True)
class CrawlLimits:
    max_pages: int = 1000
    max_concurrent_fetches: int = 4
    per_request_timeout: float = 10.0
    retry_count: int = 1

    def __post_init__(self) -> None:
        if self.max_pages < 1:
            raise ValueError("max_pages must be >= 1")
        if self.max_concurrent_fetches < 1:
            raise ValueError("max_concurrent_fetches must be >= 1")
        if self.retry_count < 0:
            raise ValueError("retry_count must be >= 0")


@dataclass(frozen=True)
class FetchResponse:
    status: int
    content_type: str
    body: bytes


class Fetcher(Protocol):
    def fetch(self, url: str) -> FetchResponse: ...


class HttpFetcher:
    """Fetches pages over the network with a shared session."""

    def __init__(self, timeout: float = 10.0, user_agent: str = "ragmark/0.1") -> None:
        self.timeout = timeout
        self.session = requests.Session()
        self.session.headers.update({"User-Agent": user_agent})

    def fetch(self, url: str) -> FetchResponse:
        try:
            resp = self.session.get(url, timeout=self.timeout)
        except requests.Timeout as exc:
            raise FetchTimeout(f"timeout fetching {url}") from exc
        except requests.RequestException as exc:
            raise FetchError(f"error fetching {url}: {exc}") from exc
        content_type = resp.headers.get("Content-Type", "").split(";")[0].strip()
        return FetchResponse(status=resp.status_code, content_type=content_type, body=resp.content)


_SUFFIX_CONTENT_TYPES = {
    ".html": "text/html",
    ".htm": "text/html",
    ".xml": "application/xml",
    ".txt": "text/plain",
    ".pdf": "application/pdf",
    ".json": "application/json",
}


class DirectoryFetcher:
    """Serves a URL's path from a local directory tree.

    ``http://any.host/a/b.html`` maps to ``<root>/a/b.html``; a trailing
    slash (or empty path) maps to ``index.html`` in that directory. Missing
    files yield a 404 response.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def fetch(self, url: str) -> FetchResponse:
        path = urlparse(url).path
        if not path or path.endswith("/"):
            path += "index.html"
        rel = path.lstrip("/")
        candidates = [self.root / rel]
        if not Path(rel).suffix:
            candidates.append(self.root / (rel + ".html"))
        for cand in candidates:
            if cand.is_file():
                content_type = _SUFFIX_CONTENT_TYPES.get(cand.suffix.lower(), "application/octet-stream")
                return FetchResponse(status=200, content_type=content_type, body=cand.read_bytes())
        return FetchResponse(status=404, content_type="text/plain", body=b"not found")


def _local_name(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _byte_offset(text: str, line: int, column: int) -> int:
    lines = text.split("\n")
    offset = sum(len(ln.encode("utf-8")) + 1 for ln in lines[: line - 1])
    if line - 1 < len(lines):
        offset += len(lines[line - 1][:column].encode("utf-8"))
    return offset


def parse_sitemap(xml_text: str) -> list[SitemapEntry]:
    """Extract <loc> URLs from a sitemap, in document order and deduplicated.

    For a sitemap index the returned entries are the nested sitemap URLs,
    flagged so callers know to fetch and parse them in turn.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, column = exc.position
        offset = _byte_offset(xml_text, line, column)
        raise SitemapParseError(f"malformed sitemap XML at byte offset {offset}: {exc}") from exc

    parent_is_sitemap = {}
    for parent in root.iter():
        nested = _local_name(parent.tag) == "sitemap"
        for child in parent:
            if _local_name(child.tag) == "loc":
                parent_is_sitemap[id(child)] = nested

    entries: list[SitemapEntry] = []
    seen: set[str] = set()
    for elem in root.iter():
        if _local_name(elem.tag) != "loc" or not elem.text:
            continue
        url = elem.text.strip()
        if not url or url in seen:
            continue
        try:
            entry = SitemapEntry(url=url, is_sitemap=parent_is_sitemap.get(id(elem), False))
        except ValueError:
            logger.warning("skipping non-http(s) sitemap entry: %s", url)
            continue
        seen.add(url)
        entries.append(entry)
    return entries


_SKIP_CONTENT_TAGS = {"script", "style", "template", "noscript"}

_INLINE_TAGS = {
    "a", "abbr", "b", "bdi", "bdo", "cite", "code", "data", "dfn", "em", "i",
    "kbd", "mark", "q", "s", "small", "span", "strong", "sub", "sup", "time",
    "u", "var", "wbr",
}


class _TextExtractor(html.parser.HTMLParser):
    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self._skip_depth = 0
        self.parts: list[str] = []

    def handle_starttag(self, tag: str, attrs) -> None:
        if tag in _SKIP_CONTENT_TAGS:
            self._skip_depth += 1
        elif tag not in _INLINE_TAGS:
            self.parts.append(" ")

    def handle_endtag(self, tag: str) -> None:
        if tag in _SKIP_CONTENT_TAGS:
            self._skip_depth = max(0, self._skip_depth - 1)
        elif tag not in _INLINE_TAGS:
            self.parts.append(" ")

    def handle_data(self, data: str) -> None:
        if not self._skip_depth:
            self.parts.append(data)


def extract_text(html_input: str | bytes) -> str:
    """Visible text of an HTML page: tags removed, script/style dropped,
    entities decoded, whitespace collapsed.

    Lenient by construction; the worst case is an empty string.
    """
    if isinstance(html_input, bytes):
        html_input = html_input.decode("utf-8", errors="replace")
    extractor = _TextExtractor()
    try:
        extractor.feed(html_input)
        extractor.close()
    except Exception:
        logger.debug("HTML parse aborted; keeping text gathered so far", exc_info=True)
    text = "".join(extractor.parts)
    text = unicodedata.normalize("NFC", text)
    text = "".join(
        ch for ch in text if ch.isspace() or unicodedata.category(ch) not in ("Cc", "Cf")
    )
    return re.sub(r"\s+", " ", text).strip()


_SCHEME_RE = re.compile(r"^[a-zA-Z][a-zA-Z0-9+.-]*://")
_UNSAFE_CHAR_RE = re.compile(r"[^A-Za-z0-9.-]")


def url_to_filename(url: str, taken: Mapping[str, str] | None = None) -> str:
    """Deterministic URL-to-filename mapping: scheme stripped, unsafe
    characters replaced by underscores, ``.txt`` suffix.

    ``taken`` maps already-assigned filenames to their URLs; when the base
    name belongs to a different URL, an 8-hex-digit hash of the full URL is
    appended before the suffix.
    """
    if not url:
        raise ValueError("url must be non-empty")
    base = _UNSAFE_CHAR_RE.sub("_", _SCHEME_RE.sub("", url)) + ".txt"
    if taken is not None and taken.get(base, url) != url:
        digest = hashlib.sha256(url.encode("utf-8")).hexdigest()[:8]
        base = f"{base[:-4]}_{digest}.txt"
    return base


@dataclass(frozen=True)
class ManifestRow:
    url: str
    filename: str
    status: str
    bytes: int
    fetched_at: float


MANIFEST_COLUMNS = ("url", "filename", "status", "bytes", "fetched_at")


def write_manifest(rows: Iterable[ManifestRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for row in rows:
            fh.write(
                f"{row.url}\t{row.filename}\t{row.status}\t{row.bytes}\t{row.fetched_at:.0f}\n"
            )


def read_manifest(path: str | Path) -> list[ManifestRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(f"unexpected manifest header: {header}")
        for line in fh:
            url, filename, status, nbytes, fetched_at = line.rstrip("\n").split("\t")
            rows.append(ManifestRow(url, filename, status, int(nbytes), float(fetched_at)))
    return rows


def _is_html(content_type: str) -> bool:
    # A missing content type is treated as HTML rather than dropped.
    if not content_type:
        return True
    return content_type in ("text/html", "application/xhtml+xml")


class _HostThrottle:
    """Enforces a fixed delay between requests to the same host."""

    def __init__(self, delay: float) -> None:
        self.delay = delay
        self._last: dict[str, float] = {}
        self._lock = threading.Lock()

    def wait(self, url: str) -> None:
        if self.delay <= 0:
            return
        host = urlparse(url).netloc
        while True:
            with self._lock:
                now = time.monotonic()
                last = self._last.get(host)
                if last is None or now - last >= self.delay:
                    self._last[host] = now
                    return
                remaining = self.delay - (now - last)
            time.sleep(remaining)


@dataclass
class _FetchOutcome:
    url: str
    status: str
    text: str = ""
    nbytes: int = 0
    fetched_at: float = 0.0


def _fetch_page(url: str, fetcher: Fetcher, limits: CrawlLimits, throttle: _HostThrottle) -> _FetchOutcome:
    attempts = limits.retry_count + 1
    last_status = "failed:error"
    for attempt in range(attempts):
        throttle.wait(url)
        try:
            resp = fetcher.fetch(url)
        except FetchTimeout:
            last_status = "failed:timeout"
            continue
        except FetchError as exc:
            logger.debug("fetch error for %s: %s", url, exc)
            last_status = "failed:connection"
            continue
        if resp.status // 100 == 2:
            if not _is_html(resp.content_type):
                return _FetchOutcome(url, "skipped:content-type", fetched_at=time.time())
            text = extract_text(resp.body)
            return _FetchOutcome(url, "ok", text=text, nbytes=len(resp.body), fetched_at=time.time())
        last_status = f"failed:{resp.status}"
        if resp.status // 100 == 4:
            break  # client errors are permanent; retrying will not help
    return _FetchOutcome(url, last_status, fetched_at=time.time())


def crawl(
    seeds: list[SitemapEntry],
    fetcher: Fetcher,
    limits: CrawlLimits,
    store_dir: str | Path,
    politeness_delay: float = 0.0,
) -> list[Document]:
    """Fetch seed URLs breadth-first, persisting cleaned text under
    ``<store_dir>/docs`` and a manifest of every attempt at
    ``<store_dir>/manifest.tsv``.

    Each URL is fetched at most once; the crawl stops after
    ``limits.max_pages`` successful fetches. Individual failures are
    recorded and skipped; the crawl itself fails only if the store is
    unwritable or no page could be fetched at all.
    """
    if not seeds:
        raise ValueError("seeds must be non-empty")
    store = Path(store_dir)
    docs_dir = store / "docs"
    docs_dir.mkdir(parents=True, exist_ok=True)

    queue: deque[str] = deque()
    enqueued: set[str] = set()
    for entry in seeds:
        if entry.url not in enqueued:
            enqueued.add(entry.url)
            queue.append(entry.url)

    throttle = _HostThrottle(politeness_delay)
    assigned: dict[str, str] = {}  # filename -> url
    manifest: list[ManifestRow] = []
    documents: list[Document] = []

    def process(outcome: _FetchOutcome) -> None:
        if outcome.status != "ok":
            manifest.append(ManifestRow(outcome.url, "", outcome.status, 0, outcome.fetched_at))
            return
        filename = url_to_filename(outcome.url, taken=assigned)
        assigned[filename] = outcome.url
        (docs_dir / filename).write_text(outcome.text, encoding="utf-8")
        manifest.append(
            ManifestRow(outcome.url, filename, "ok", outcome.nbytes, outcome.fetched_at)
        )
        documents.append(
            Document(
                id=filename[: -len(".txt")],
                url=outcome.url,
                text=outcome.text,
                fetched_at=outcome.fetched_at,
            )
        )

    with ThreadPoolExecutor(max_workers=limits.max_concurrent_fetches) as executor:
        pending: set[Future[_FetchOutcome]] = set()
        while True:
            while (
                queue
                and len(documents) + len(pending) < limits.max_pages
                and len(pending) < limits.max_concurrent_fetches
            ):
                url = queue.popleft()
                pending.add(executor.submit(_fetch_page, url, fetcher, limits, throttle))
            if not pending:
                break
            done, pending = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                process(fut.result())

    write_manifest(manifest, store / "manifest.tsv")
    if not documents:
        raise CrawlError("crawl produced no documents (all seeds failed or were skipped)")
    return documents


def load_sitemap(
    source: str,
    fetcher: Fetcher | None = None,
    max_depth: int = 3,
) -> list[SitemapEntry]:
    """Resolve a sitemap (URL, local file path, or raw XML) into page
    entries, following nested sitemap indexes up to ``max_depth`` levels.
    """
    if fetcher is None:
        fetcher = HttpFetcher()

    def read(src: str) -> str:
        if _SCHEME_RE.match(src):
            resp = fetcher.fetch(src)
            if resp.status // 100 != 2:
                raise CrawlError(f"sitemap fetch failed with status {resp.status}: {src}")
            return resp.body.decode("utf-8", errors="replace")
        path = Path(src)
        if path.is_file():
            return path.read_text(encoding="utf-8")
        return src  # raw XML text

    pages: list[SitemapEntry] = []
    seen_pages: set[str] = set()
    seen_maps: set[str] = set()
    frontier = [source]
    for _ in range(max_depth + 1):
        nested: list[str] = []
        for src in frontier:
            for entry in parse_sitemap(read(src)):
                if entry.is_sitemap:
                    if entry.url not in seen_maps:
                        seen_maps.add(entry.url)
                        nested.append(entry.url)
                elif entry.url not in seen_pages:
                    seen_pages.add(entry.url)
                    pages.append(entry)
        if not nested:
            break
        frontier = nested
    return pages


def load_corpus(store_dir: str | Path) -> list[Document]:
    """Read back documents persisted by crawl, in manifest order."""
    store = Path(store_dir)
    documents = []
    for row in read_manifest(store / "manifest.tsv"):
        if row.status != "ok":
            continue
        text = (store / "docs" / row.filename).read_text(encoding="utf-8")
        documents.append(
            Document(
                id=row.filename[: -len(".txt")],
                url=row.url,
                text=text,
                fetched_at=row.fetched_at,
            )
        )
    return documents
