import pytest

from helpers import StubServer
from ragmark.cli import main
from ragmark.config import ConfigError, llm_spec_from_config, load_config, provider_spec_from_config


def write_config(path, text: str):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadConfig:
    def test_parses_key_value_lines(self, tmp_path):
        cfg = load_config(
            write_config(
                tmp_path / "ragmark.conf",
                "# a comment\n"
                "llm.endpoint = http://api.test/v1\n"
                "llm.model = my-model\n"
                "\n"
                "embed.dim = 64\n",
            )
        )
        assert cfg["llm.endpoint"] == "http://api.test/v1"
        assert cfg["embed.dim"] == "64"

    def test_values_may_contain_equals(self, tmp_path):
        cfg = load_config(write_config(tmp_path / "c", "llm.endpoint = http://x/?a=b\n"))
        assert cfg["llm.endpoint"] == "http://x/?a=b"

    def test_bad_line_reports_location(self, tmp_path):
        with pytest.raises(ConfigError, match=":2:"):
            load_config(write_config(tmp_path / "c", "a = 1\nnot a pair\n"))


class TestSpecBuilders:
    def test_llm_spec_with_overrides(self, tmp_path):
        cfg = load_config(
            write_config(
                tmp_path / "c",
                "llm.endpoint = http://api.test/v1\nllm.model = base\nllm.temperature = 0.2\n",
            )
        )
        spec = llm_spec_from_config(cfg, model_name="override")
        assert spec.model_name == "override"  # flag wins over config
        assert spec.endpoint == "http://api.test/v1"
        assert spec.temperature == 0.2

    def test_llm_spec_requires_endpoint(self):
        with pytest.raises(ConfigError):
            llm_spec_from_config({"llm.model": "m"})

    def test_provider_defaults_to_deterministic(self):
        spec = provider_spec_from_config({})
        assert spec.kind == "deterministic_test"
        assert spec.dim == 256

    def test_provider_http_from_config(self):
        spec = provider_spec_from_config(
            {
                "embed.kind": "http_api",
                "embed.model": "big-embedder",
                "embed.endpoint": "http://api.test/embed",
                "embed.dim": "1024",
                "embed.query_prefix": "query: ",
            }
        )
        assert spec.kind == "http_api"
        assert spec.dim == 1024
        assert spec.query_prefix == "query: "


class TestCliWithConfig:
    def test_ask_through_http_model(self, shared_site_dir, tmp_path, capsys):
        corpus = tmp_path / "corpus"
        chunks = tmp_path / "chunks.jsonl"
        vectors = tmp_path / "vectors.bin"
        index = tmp_path / "index"
        for argv in (
            ["crawl", "--sitemap", "http://fixture.test/sitemap.xml",
             "--site-dir", str(shared_site_dir), "--out", str(corpus)],
            ["chunk", "--corpus", str(corpus), "--out", str(chunks)],
            ["embed", "--chunks", str(chunks), "--out", str(vectors)],
            ["index", "--chunks", str(chunks), "--vectors", str(vectors), "--out", str(index)],
        ):
            assert main(argv) == 0
        capsys.readouterr()

        payload = {"choices": [{"message": {"content": "A canned hosted answer."}}]}
        with StubServer([(0, 200, payload)]) as stub:
            config = write_config(
                tmp_path / "ragmark.conf",
                f"llm.endpoint = {stub.endpoint}\nllm.model = default-model\n",
            )
            assert main(
                ["ask", "--index", str(index), "--q", "Why do startups join?",
                 "--k", "2", "--model", "hosted-model", "--config", str(config)]
            ) == 0
            sent = stub.requests[0]
        assert capsys.readouterr().out.strip() == "A canned hosted answer."
        assert sent["model"] == "hosted-model"
        assert any("Why do startups join?" in m["content"] for m in sent["messages"])
