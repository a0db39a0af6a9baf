import json

import pytest

from helpers import SITE_HOST, SITE_PAGES, site_question_set
from ragmark.cli import main, parse_k_values


def run_cli(*argv: str) -> int:
    return main(list(argv))


def write_truth(path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in site_question_set().entries:
            fh.write(
                json.dumps(
                    {
                        "question": item.question,
                        "category": item.category.value,
                        "expected_output": item.expected_output,
                    }
                )
                + "\n"
            )


class TestParseKValues:
    def test_range(self):
        assert parse_k_values("1..10") == tuple(range(1, 11))

    def test_list(self):
        assert parse_k_values("1,3,5") == (1, 3, 5)

    def test_single(self):
        assert parse_k_values("4") == (4,)


@pytest.fixture(scope="module")
def workspace(shared_site_dir, tmp_path_factory, capfd_disabled=None):
    """Corpus, chunks, vectors, and index built once through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    chunks = root / "chunks.jsonl"
    vectors = root / "vectors.bin"
    index = root / "index"

    assert run_cli(
        "crawl",
        "--sitemap", f"{SITE_HOST}/sitemap.xml",
        "--site-dir", str(shared_site_dir),
        "--out", str(corpus),
    ) == 0
    assert run_cli(
        "chunk", "--corpus", str(corpus), "--strategy", "recursive", "--out", str(chunks)
    ) == 0
    assert run_cli(
        "embed", "--chunks", str(chunks), "--provider", "det",
        "--cache", str(root / "cache"), "--out", str(vectors),
    ) == 0
    assert run_cli(
        "index", "--chunks", str(chunks), "--vectors", str(vectors), "--out", str(index)
    ) == 0
    return root


class TestPipelineCommands:
    def test_crawl_wrote_corpus(self, workspace):
        docs = list((workspace / "corpus" / "docs").iterdir())
        assert len(docs) == len(SITE_PAGES)
        assert (workspace / "corpus" / "manifest.tsv").exists()

    def test_chunks_file_format(self, workspace):
        lines = (workspace / "chunks.jsonl").read_text().splitlines()
        assert len(lines) == len(SITE_PAGES)  # small pages fit in one chunk each
        rec = json.loads(lines[0])
        assert set(rec) == {"chunk_id", "doc_id", "text", "token_count", "ordinal"}

    def test_index_layout(self, workspace):
        index = workspace / "index"
        for name in ("vectors.bin", "vectors.ids", "bm25.tsv", "chunks.jsonl", "meta.json"):
            assert (index / name).exists()
        first = (workspace / "index" / "bm25.tsv").read_text().splitlines()
        assert all(len(line.split("\t")) == 3 for line in first)

    def test_query_ranking(self, workspace, capsys):
        assert run_cli(
            "query", "--index", str(workspace / "index"),
            "--q", "when was the innovation center founded", "--k", "3",
        ) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 3
        assert "about" in out[0]

    def test_ask_with_echo_stub(self, workspace, capsys):
        assert run_cli(
            "ask", "--index", str(workspace / "index"),
            "--q", "When was the innovation center founded?", "--k", "3", "--stub", "echo",
        ) == 0
        answer = capsys.readouterr().out.strip()
        assert answer == "The innovation center was founded in 2015."

    def test_run_eval_roundtrip(self, workspace, tmp_path, capsys):
        questions = tmp_path / "questions.jsonl"
        truth = tmp_path / "truth.jsonl"
        write_truth(truth)
        write_truth(questions)  # run only reads the question field
        records = tmp_path / "records.jsonl"
        scores = tmp_path / "scores.jsonl"
        assert run_cli(
            "run", "--questions", str(questions), "--index", str(workspace / "index"),
            "--k", "3", "--stub", "echo", "--out", str(records),
        ) == 0
        assert run_cli(
            "eval", "--records", str(records), "--truth", str(truth),
            "--judge", "mock", "--index", str(workspace / "index"), "--out", str(scores),
        ) == 0
        rows = [json.loads(line) for line in scores.read_text().splitlines()]
        assert len(rows) == 4
        for row in rows:
            assert set(row) == {"question", "category", "k", "scores"}

    def test_sweep_and_report(self, workspace, tmp_path, capsys):
        questions = tmp_path / "questions.jsonl"
        write_truth(questions)
        sweep_dir = tmp_path / "sweep"
        report_dir = tmp_path / "report"
        assert run_cli(
            "sweep", "--questions", str(questions), "--index", str(workspace / "index"),
            "--k", "1..3", "--stub", "echo", "--judge", "mock", "--out", str(sweep_dir),
        ) == 0
        raw = (sweep_dir / "raw_results.jsonl").read_text().splitlines()
        assert len(raw) == 12  # 4 questions x 3 k values
        assert run_cli(
            "report", "--in", str(sweep_dir), "--out", str(report_dir)
        ) == 0
        for name in ("summary.csv", "curves.csv", "latency_histogram.csv", "run_summary.json"):
            assert (report_dir / name).exists()

    def test_crawl_local_sitemap_file(self, shared_site_dir, tmp_path):
        assert run_cli(
            "crawl",
            "--sitemap", str(shared_site_dir / "sitemap.xml"),
            "--site-dir", str(shared_site_dir),
            "--out", str(tmp_path / "corpus2"),
            "--max-pages", "2",
        ) == 0
        docs = list((tmp_path / "corpus2" / "docs").iterdir())
        assert len(docs) == 2
