from __future__ import annotations

import json
import logging
import re
from collections.abc import Sequence
from typing import Any

from lark import Lark, LarkError, Token, Transformer
from lark.exceptions import VisitError

from .config_grammar import EXPERIMENT


LOGGER = logging.getLogger(__name__)


experiment_parser = Lark(EXPERIMENT, parser="lalr")

_INTEGER = re.compile(r"[+-]?\d+")


class ConfigError(ValueError):
    pass


def _merge(items: Sequence[tuple[str, Any]]) -> dict[str, Any]:
    result: dict[str, Any] = {}
    for key, value in items:
        if key in result:
            msg = f"Duplicate key {key!r}"
            raise ConfigError(msg)
        result[key] = value
    return result


class ExperimentTransformer(Transformer[Token, Any]):
    def start(self, children: list[tuple[str, Any]]) -> dict[str, Any]:
        return _merge(children)

    def pair(self, children: list[Any]) -> tuple[str, Any]:
        name, value = children
        return str(name), value

    def section(self, children: list[Any]) -> tuple[str, dict[str, Any]]:
        name, *items = children
        return str(name), _merge(items)

    def string(self, children: list[Token]) -> str:
        return str(json.loads(children[0]))

    def number(self, children: list[Token]) -> int | float:
        text = str(children[0])
        return int(text) if _INTEGER.fullmatch(text) else float(text)

    def true(self, children: list[Token]) -> bool:
        return True

    def false(self, children: list[Token]) -> bool:
        return False

    def word(self, children: list[Token]) -> str:
        return str(children[0])

    def array(self, children: list[Any]) -> list[Any]:
        return list(children)


def parse_experiment(text: str) -> dict[str, Any]:
    """Nested mapping from the key-value experiment language."""
    try:
        tree = experiment_parser.parse(text)
        return ExperimentTransformer().transform(tree)
    except VisitError as ex:
        if isinstance(ex.orig_exc, ConfigError):
            raise ex.orig_exc from None
        msg = "Failed to interpret experiment config"
        raise ConfigError(msg) from ex
    except LarkError as ex:
        LOGGER.info("Failed to parse experiment config: %s", ex, exc_info=True)
        msg = f"Failed to parse experiment config: {ex}"
        raise ConfigError(msg) from ex
