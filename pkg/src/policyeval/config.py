"""Flat ``key = value`` configuration files.

Grammar, one entry per line::

    # comment
    key = value

Keys are dotted identifiers. Blank lines and ``#`` comments are skipped.
Later duplicates override earlier ones; key order of first appearance is
preserved.
"""

from __future__ import annotations

import hashlib
import re

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not _KEY.match(key):
            raise ConfigError(f"{source}:{lineno}: invalid key {key!r}")
        out[key] = value.strip()
    return out


def read_kv(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), source=str(path))


def dump_kv(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def config_hash(items: dict) -> str:
    """Order-independent digest of a configuration mapping."""
    canon = "".join(f"{k}={items[k]}\n" for k in sorted(items))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
