"""Small JSON writer that prints floats in shortest round-trip form (exact on reload).

The stdlib encoder uses the shortest round-trip repr; the file formats here
fix the precision explicitly so documents are stable across platforms.
"""
from __future__ import annotations

import json
import math
from typing import Any

import numpy as np


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite float {x!r}")
    return repr(float(x))


def _encode(obj: Any, out: list, indent: int | None, level: int) -> None:
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        obj = int(obj)
    if obj is None or isinstance(obj, (bool, str)):
        out.append(json.dumps(obj))
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(_fmt_float(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
        end = "" if indent is None else "\n" + " " * (indent * level)
        out.append("{")
        for n, (k, v) in enumerate(obj.items()):
            if n:
                out.append(",")
            out.append(pad + json.dumps(str(k)) + ": ")
            _encode(v, out, indent, level + 1)
        out.append(end + "}")
    elif isinstance(obj, (list, tuple)):
        # numeric rows stay on one line to keep matrices readable
        out.append("[")
        flat = all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj)
        pad = "" if indent is None or flat else "\n" + " " * (indent * (level + 1))
        end = "" if indent is None or flat else "\n" + " " * (indent * level)
        for n, v in enumerate(obj):
            if n:
                out.append(", " if flat else ",")
            out.append(pad)
            _encode(v, out, indent, level + 1)
        out.append(end + "]")
    else:
        raise TypeError(f"cannot serialise object of type {type(obj).__name__}")


def dumps(obj: Any, indent: int | None = 1) -> str:
    out: list[str] = []
    _encode(obj, out, indent, 0)
    return "".join(out)


def loads(text: str, what: str = "document") -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(
            f"could not parse {what}: {exc.msg} at line {exc.lineno} column {exc.colno}"
        ) from exc
