"""Flat key=value config files shared by the corpus filter, trainer, and CLI.

Format: one ``key = value`` pair per line, ``#`` starts a comment, blank
lines ignored. Keys are validated against an allowed set by the caller;
unknown keys are errors, never warnings.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Malformed config text or an unknown/invalid key."""


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse flat key=value text into an ordered dict of strings."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_kv_file(path: str | Path) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text(encoding="utf-8"))


def format_kv(pairs: dict[str, object]) -> str:
    """Render pairs back to the flat file format (deterministic order)."""
    return "".join(f"{key} = {value}\n" for key, value in pairs.items())


def check_known_keys(pairs: dict[str, str], allowed: set[str], context: str) -> None:
    unknown = sorted(set(pairs) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown {context} config key(s): {', '.join(unknown)}; "
            f"allowed: {', '.join(sorted(allowed))}"
        )


def coerce(value: str, kind: type, key: str):
    """Convert a raw string value, raising ConfigError with the key name."""
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from exc
