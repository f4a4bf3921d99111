"""Line-based ``key=value`` files with ``#`` comments."""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Malformed or incomplete configuration; message carries the location."""


def parse_kv(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Map each key to ``(raw value, line number)``; duplicates are an error."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {out[key][1]})")
        out[key] = (value, lineno)
    return out


def read_kv(path: str | Path) -> dict[str, tuple[str, int]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    return parse_kv(text, str(path))


def format_kv(items: dict[str, object]) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in items.items())


def _fmt(v: object) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)
