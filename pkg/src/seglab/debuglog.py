"""Append-only debug log of ``component:event key=value`` records.

SEGLAB_LOG_PATH picks the file and an empty value turns logging off. Writing
a record never raises.
"""

from __future__ import annotations

import os
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

DEFAULT_LOG_PATH = Path.home() / ".seglab" / "log" / "seglab.log"
_WRITE_LOCK = threading.Lock()


def log_path_from_env(raw: str | None) -> Path | None:
    if raw is None:
        return DEFAULT_LOG_PATH
    raw = raw.strip()
    return Path(raw).expanduser() if raw else None


_LOG_PATH = log_path_from_env(os.environ.get("SEGLAB_LOG_PATH"))


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return format(value, ".9g")
    text = str(value)
    if not text or any(c.isspace() for c in text):
        return repr(text)
    return text


def format_event(component: str, event: str, **fields: Any) -> str:
    parts = [f"{component}:{event}"]
    parts.extend(f"{key}={_format_value(value)}" for key, value in fields.items())
    return " ".join(parts)


def log_event(component: str, event: str, **fields: Any) -> None:
    path = _LOG_PATH
    if path is None:
        return
    record = f"{datetime.now(timezone.utc).isoformat()} {format_event(component, event, **fields)}\n"
    try:
        with _WRITE_LOCK:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("a", encoding="utf-8") as handle:
                handle.write(record)
    except OSError:
        pass
