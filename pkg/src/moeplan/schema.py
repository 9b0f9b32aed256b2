"""Structural validation of JSON documents against the shipped schemas."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("moeplan").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_config_document(doc) -> None:
    from .config import ConfigError

    try:
        jsonschema.validate(doc, load_schema("config"))
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
