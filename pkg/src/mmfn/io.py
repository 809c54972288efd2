"""Model files, JSON rendering and plain-text tables.

Model files are JSON objects with keys ``d``, ``m``, ``lambda``, ``mu``,
``P`` and ``Q`` (row-major nested lists).  Machine output prints every float
with 17 significant digits and writes non-finite values as the strings
``"inf"``, ``"-inf"`` and ``"nan"`` so that files stay strict JSON; parsing
and re-rendering a report reproduces it byte for byte.
"""
from __future__ import annotations

import json
import math

import numpy as np

from .errors import MmfnError
from .model import MmfnModel

__all__ = ["ParseError", "parse_model", "load_model", "dump_model", "render_json", "render_table",
           "fmt17", "fmt6"]

KEYS = ("d", "m", "lambda", "mu", "P", "Q")


class ParseError(MmfnError, ValueError):
    """The model file is not valid JSON or does not have the expected layout."""


def _matrix(obj: dict, key: str, rows: int, cols: int) -> np.ndarray:
    val = obj[key]
    if not isinstance(val, list) or len(val) != rows:
        raise ParseError(f"{key}: expected {rows} rows")
    out = np.empty((rows, cols))
    for r, row in enumerate(val):
        if not isinstance(row, list) or len(row) != cols:
            raise ParseError(f"{key}: row {r + 1} must have {cols} entries")
        for c, x in enumerate(row):
            if isinstance(x, bool) or not isinstance(x, (int, float)):
                raise ParseError(f"{key}[{r + 1}][{c + 1}]: not a number")
            if not math.isfinite(x):
                raise ParseError(f"{key}[{r + 1}][{c + 1}]: not finite")
            out[r, c] = float(x)
    return out


def parse_model(text: str) -> MmfnModel:
    """Build a model from JSON text; negative rates are rejected here."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError("model file must hold a JSON object")
    missing = [k for k in KEYS if k not in obj]
    if missing:
        raise ParseError("missing keys: " + ", ".join(missing))
    d, m = obj["d"], obj["m"]
    for name, val in (("d", d), ("m", m)):
        if isinstance(val, bool) or not isinstance(val, int) or val < 1:
            raise ParseError(f"{name} must be a positive integer")
    lam = _matrix(obj, "lambda", d, m)
    mu = _matrix(obj, "mu", d, m)
    P = _matrix(obj, "P", d, d)
    Q = _matrix(obj, "Q", m, m)
    for name, arr in (("lambda", lam), ("mu", mu)):
        neg = np.argwhere(arr < 0)
        if neg.size:
            k, i = neg[0]
            raise ParseError(f"{name}[{k + 1}][{i + 1}] is negative")
    return MmfnModel(lam, mu, P, Q)


def load_model(path) -> MmfnModel:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    return parse_model(text)


def dump_model(model: MmfnModel) -> str:
    return render_json(model.to_dict())


def fmt17(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    s = f"{x:.17g}"
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def fmt6(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, (bool, np.bool_)):
        return "yes" if x else "no"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6g}"
    return str(x)


def _plain(obj):
    """Convert numpy containers and scalars to Python equivalents."""
    if isinstance(obj, np.ndarray):
        return [_plain(x) for x in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        seq = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [_plain(x) for x in seq]
    return obj


def _emit(obj, indent: int, level: int, out: list) -> None:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(fmt17(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = list(obj.items())
        for n, (k, v) in enumerate(items):
            out.append(pad + json.dumps(k, ensure_ascii=False) + ": ")
            _emit(v, indent, level + 1, out)
            out.append(",\n" if n < len(items) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, list):
        if not obj:
            out.append("[]")
            return
        if all(isinstance(x, (int, float, bool, str)) or x is None for x in obj):
            parts = []
            for x in obj:
                buf = []
                _emit(x, indent, level + 1, buf)
                parts.append("".join(buf))
            out.append("[" + ", ".join(parts) + "]")
            return
        out.append("[\n")
        for n, v in enumerate(obj):
            out.append(pad)
            _emit(v, indent, level + 1, out)
            out.append(",\n" if n < len(obj) - 1 else "\n")
        out.append(end + "]")
    else:
        raise TypeError(f"cannot render {type(obj).__name__}")


def render_json(obj, indent: int = 2) -> str:
    """Deterministic JSON text with 17-digit floats and quoted non-finite values."""
    out: list = []
    _emit(_plain(obj), indent, 0, out)
    return "".join(out) + "\n"


def render_table(rows, headers) -> str:
    """Fixed-width table with 6 significant digits."""
    cells = [[fmt6(x) for x in row] for row in rows]
    text = [[isinstance(x, str) for x in row] for row in rows]
    widths = [max([len(h)] + [len(r[i]) for r in cells]) for i, h in enumerate(headers)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    sep = "  ".join("-" * w for w in widths)
    body = ["  ".join(c.ljust(w) if t else c.rjust(w) for c, t, w in zip(r, tr, widths))
            for r, tr in zip(cells, text)]
    return "\n".join([line, sep] + body) + "\n"
