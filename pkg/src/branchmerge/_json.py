from __future__ import annotations

import json
from typing import Any


def dumps(obj: Any) -> bytes:
    """Canonical encoding: insertion-ordered keys, compact, UTF-8, trailing newline."""
    return (json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False) + "\n").encode(
        "utf-8"
    )


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)
