"""JSON writing with exact float round trips.

The stock encoder formats floats with `repr`, which round-trips but emits a
variable number of digits.  Output files here are diffed byte-for-byte across
reruns, so floats are pinned to 17 significant digits, enough to identify any
float64 uniquely.  Reading uses the standard parser.
"""

from __future__ import annotations

import json
import math
from typing import Any


def format_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"cannot serialize non-finite float {x!r}")
    return format(float(x), ".17g")


def dumps(obj: Any, indent: int = 2) -> str:
    pieces: list[str] = []
    _encode(obj, pieces, indent, 0)
    pieces.append("\n")
    return "".join(pieces)


def _encode(obj: Any, out: list[str], indent: int, level: int) -> None:
    pad = " " * (indent * level)
    inner = " " * (indent * (level + 1))
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(format_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (key, value) in enumerate(obj.items()):
            if not isinstance(key, str):
                raise TypeError(f"JSON keys must be strings, got {type(key).__name__}")
            out.append(f"{inner}{json.dumps(key)}: ")
            _encode(value, out, indent, level + 1)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(f"{pad}}}")
    elif isinstance(obj, (list, tuple)):
        if len(obj) == 0:
            out.append("[]")
            return
        out.append("[\n")
        for i, value in enumerate(obj):
            out.append(inner)
            _encode(value, out, indent, level + 1)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(f"{pad}]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_file(path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))


def read_file(path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
