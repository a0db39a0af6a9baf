"""Flat key-value configuration files.

Format: one ``key = value`` pair per line; blank lines and lines starting
with ``#`` are ignored. Keys are dotted names, e.g.::

    llm.endpoint = https://api.example.com/chat/completions
    llm.model = open-llm-8b-instruct
    embed.kind = http_api
    embed.model = org/embedding-model-v1
    embed.endpoint = https://api.example.com/embeddings
    embed.dim = 1024
    embed.query_prefix =
    prompt.version = grounded-qa/1

Command-line flags override config values.
"""

from __future__ import annotations

from pathlib import Path

from ragmark.embed import (
    DEFAULT_TEST_DIM,
    KIND_DETERMINISTIC,
    EmbeddingProviderSpec,
)
from ragmark.generate import LlmSpec


class ConfigError(ValueError):
    pass


def load_config(path: str | Path) -> dict[str, str]:
    config: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            config[key.strip()] = value.strip()
    return config


def llm_spec_from_config(config: dict[str, str], **overrides) -> LlmSpec:
    fields = {
        "endpoint": config.get("llm.endpoint", ""),
        "model_name": config.get("llm.model", ""),
    }
    if "llm.temperature" in config:
        fields["temperature"] = float(config["llm.temperature"])
    if "llm.max_output_tokens" in config:
        fields["max_output_tokens"] = int(config["llm.max_output_tokens"])
    if "llm.timeout" in config:
        fields["timeout"] = float(config["llm.timeout"])
    if "llm.retries" in config:
        fields["retries"] = int(config["llm.retries"])
    fields.update({k: v for k, v in overrides.items() if v is not None})
    if not fields["endpoint"] or not fields["model_name"]:
        raise ConfigError("llm.endpoint and llm.model are required for HTTP models")
    return LlmSpec(**fields)


def provider_spec_from_config(config: dict[str, str], **overrides) -> EmbeddingProviderSpec:
    fields = {
        "kind": config.get("embed.kind", KIND_DETERMINISTIC),
        "model_name": config.get("embed.model", "hashed-bag-of-words"),
        "dim": int(config.get("embed.dim", DEFAULT_TEST_DIM)),
        "endpoint": config.get("embed.endpoint", ""),
        "seed": int(config.get("embed.seed", 0)),
        "query_prefix": config.get("embed.query_prefix", ""),
    }
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return EmbeddingProviderSpec(**fields)
