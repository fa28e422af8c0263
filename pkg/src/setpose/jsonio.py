"""Canonical JSON emission for golden-file comparisons.

Keys are sorted, floats are printed with exactly six decimal places, and the
separators are fixed, so equal values always serialize to identical bytes.
"""

from __future__ import annotations

import json
from typing import Mapping, Sequence

import numpy as np


def canonical_dumps(obj) -> str:
    out: list[str] = []
    _write(obj, out)
    return "".join(out)


def _write(o, out: list[str]) -> None:
    if o is None:
        out.append("null")
    elif o is True:
        out.append("true")
    elif o is False:
        out.append("false")
    elif isinstance(o, (int, np.integer)):
        out.append(str(int(o)))
    elif isinstance(o, (float, np.floating)):
        out.append(f"{float(o):.6f}")
    elif isinstance(o, str):
        out.append(json.dumps(o))
    elif isinstance(o, Mapping):
        out.append("{")
        for i, key in enumerate(sorted(o)):
            if i:
                out.append(",")
            if not isinstance(key, str):
                raise TypeError(f"non-string key: {key!r}")
            out.append(json.dumps(key))
            out.append(":")
            _write(o[key], out)
        out.append("}")
    elif isinstance(o, (Sequence, np.ndarray)):
        out.append("[")
        for i, item in enumerate(o):
            if i:
                out.append(",")
            _write(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_dumps(obj))
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
