"""Parser for the ``key = value`` config files used by the CLI.

Format: UTF-8 text, one ``key = value`` pair per line, ``#`` starts a
comment (full-line or trailing), blank lines ignored. Keys may repeat;
the last occurrence wins. Unknown keys are rejected by the callers that
own each key set, not here.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ValidationError


def read_kv(path: str | Path) -> dict[str, str]:
    """Read a key=value file into an ordered dict of raw string values."""
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValidationError(f"{path}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def reject_unknown(kv: dict[str, str], known: set[str], context: str) -> None:
    """Raise if ``kv`` contains a key outside ``known``, naming the key."""
    for key in kv:
        if key not in known:
            raise ValidationError(f"{context}: unknown key '{key}'")


def parse_int(kv: dict[str, str], key: str, default: int) -> int:
    if key not in kv:
        return default
    try:
        return int(kv[key])
    except ValueError:
        raise ValidationError(f"key '{key}': expected integer, got {kv[key]!r}") from None


def parse_float(kv: dict[str, str], key: str, default: float) -> float:
    if key not in kv:
        return default
    try:
        return float(kv[key])
    except ValueError:
        raise ValidationError(f"key '{key}': expected number, got {kv[key]!r}") from None
