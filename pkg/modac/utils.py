# -*- coding: utf-8 -*-
"""
Utility Functions.

Helpers shared across the package: logging, seeded random streams and
stable hashing of configuration dictionaries.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import zlib
from typing import Any, Dict, Iterable, Union

import numpy as np
from rich.console import Console
from rich.logging import RichHandler

SeedKey = Union[int, str]

_stderr_console = Console(stderr=True)


def get_logger(name: str) -> logging.Logger:
    """Creates and configures a logger instance."""
    logger = logging.getLogger(name)
    logger.setLevel(os.environ.get("MODAC_LOG_LEVEL", "INFO").upper())

    # One handler per logger, rendered by rich on stderr
    if not logger.handlers:
        handler = RichHandler(console=_stderr_console, show_path=False, log_time_format="%Y-%m-%d %H:%M:%S")
        handler.setFormatter(logging.Formatter("%(name)s - %(message)s"))
        logger.addHandler(handler)

    logger.propagate = False
    return logger


def set_log_level(level: Union[int, str]) -> None:
    """Applies ``level`` to every logger created through :func:`get_logger`."""
    for name, obj in logging.Logger.manager.loggerDict.items():
        if isinstance(obj, logging.Logger) and name.startswith("modac"):
            obj.setLevel(level)


def _key_to_int(key: SeedKey) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def derive_rng(seed: int, *keys: SeedKey) -> np.random.Generator:
    """Returns an independent generator for the stream named by ``keys``.

    The same (seed, keys) always yields the same stream; different key paths
    yield statistically independent streams.
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def canonical_json(data: Dict[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(data: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of ``data``."""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def standard_error(values: Iterable[float]) -> float:
    """Standard error of the mean; ``nan`` for fewer than two finite values."""
    arr = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if arr.size < 2:
        return float("nan")
    return float(arr.std(ddof=1) / np.sqrt(arr.size))
