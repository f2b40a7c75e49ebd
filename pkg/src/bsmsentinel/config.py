"""Key-value config files and environment-variable overrides.

Config files are plain text, one ``key = value`` per line; ``#`` starts a
comment. Any key can be overridden through the environment by upper-casing
it, replacing dots with underscores, and prefixing ``BSMSENTINEL_``
(e.g. ``em_threshold`` -> ``BSMSENTINEL_EM_THRESHOLD``).
"""

from __future__ import annotations

import os

ENV_PREFIX = "BSMSENTINEL_"


class ConfigError(ValueError):
    def __init__(self, message: str, path=None, line_no=None):
        where = ""
        if path is not None:
            where = f"{path}:{line_no}: " if line_no is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line_no = line_no


def read_kv_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"expected 'key = value', got {text!r}", path, line_no)
            key, _, value = text.partition("=")
            key = key.strip().lower()
            value = value.strip()
            if not key:
                raise ConfigError("empty key", path, line_no)
            values[key] = value
    return values


def env_key(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


def apply_env_overrides(
    values: dict[str, str], allowed=None, environ=None
) -> dict[str, str]:
    """Return ``values`` with BSMSENTINEL_-prefixed environment overrides.

    Keys already present are always overridable; ``allowed`` additionally
    names keys the environment may introduce when absent from the file.
    """
    environ = os.environ if environ is None else environ
    merged = dict(values)
    candidates = set(merged)
    if allowed is not None:
        candidates.update(allowed)
    for key in candidates:
        override = environ.get(env_key(key))
        if override is not None:
            merged[key] = override
    return merged
