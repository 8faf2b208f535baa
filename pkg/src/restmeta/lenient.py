"""Tolerant JSON recovery for language model output.

The repair pipeline runs in a fixed order so the result is deterministic:

1. strip Markdown code fences
2. cut out the outermost ``[...]`` (or ``{...}``) block
3. rewrite single-quoted strings and bare keys as JSON strings
4. map ``True``/``False``/``None`` to ``true``/``false``/``null``
5. drop trailing commas before ``]`` and ``}``

Every pass except the first is string-aware: nothing inside a string literal
is touched.
"""

from __future__ import annotations

import json
import re
from typing import Any, Iterator

from .errors import NoArrayFound

_FENCE = re.compile(r"```[A-Za-z0-9_+-]*[ \t]*")
_IDENT_START = re.compile(r"[A-Za-z_$]")
_IDENT = re.compile(r"[A-Za-z0-9_$]*")
_PY_LITERALS = {"True": "true", "False": "false", "None": "null"}
_CLOSERS = {"[": "]", "{": "}"}
_HEX2 = re.compile(r"[0-9A-Fa-f]{2}")
_HEX8 = re.compile(r"[0-9A-Fa-f]{8}")


def strip_fences(text: str) -> str:
    return _FENCE.sub("", text)


def _scan_string(text: str, start: int) -> tuple[int, bool]:
    """Return (index past the literal opening at ``start``, whether it was closed)."""
    quote = text[start]
    i = start + 1
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            i += 2
            continue
        if ch == quote:
            return i + 1, True
        i += 1
    return len(text), False


def _skip_string(text: str, start: int) -> int:
    return _scan_string(text, start)[0]


def _matching_close(text: str, start: int) -> int | None:
    opener = text[start]
    closer = _CLOSERS[opener]
    depth = 0
    i = start
    while i < len(text):
        ch = text[i]
        if ch in "\"'":
            i = _skip_string(text, i)
            continue
        if ch == opener:
            depth += 1
        elif ch == closer:
            depth -= 1
            if depth == 0:
                return i
        i += 1
    return None


def candidate_blocks(text: str, opener: str = "[") -> Iterator[str]:
    """Yield balanced blocks starting at each ``opener``, outermost-first."""
    pos = text.find(opener)
    while pos != -1:
        end = _matching_close(text, pos)
        if end is not None:
            yield text[pos : end + 1]
        pos = text.find(opener, pos + 1)


def repair_quotes(text: str) -> str:
    out: list[str] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == '"':
            j, closed = _scan_string(text, i)
            body = text[i + 1 : j - 1] if closed else text[i + 1 : j]
            out.append('"' + _requote(body, '"') + ('"' if closed else ""))
            i = j
        elif ch == "'":
            j, closed = _scan_string(text, i)
            body = text[i + 1 : j - 1] if closed else text[i + 1 : j]
            out.append('"' + _requote(body) + '"')
            i = j
        elif _IDENT_START.match(ch) and (i == 0 or not (text[i - 1].isalnum() or text[i - 1] in "_$.")):
            m = _IDENT.match(text, i + 1)
            word = text[i : m.end()]
            k = m.end()
            while k < n and text[k] in " \t\r\n":
                k += 1
            if k < n and text[k] == ":" and word not in _PY_LITERALS:
                out.append(json.dumps(word))
            else:
                out.append(word)
            i = m.end()
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _requote(body: str, quote: str = "'") -> str:
    """Rewrite the inside of a string literal as a JSON string body.

    Handles Python escapes JSON lacks (``\\xNN``, ``\\UNNNNNNNN``, ``\\'``) and
    escapes bare double quotes when the literal was single-quoted.
    """
    out: list[str] = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\" and i + 1 < len(body):
            nxt = body[i + 1]
            if nxt == "'":
                out.append("'")
                i += 2
                continue
            if nxt == "x" and _HEX2.fullmatch(body[i + 2 : i + 4]):
                out.append("\\u00" + body[i + 2 : i + 4])
                i += 4
                continue
            if nxt == "U" and _HEX8.fullmatch(body[i + 2 : i + 10]):
                out.append(json.dumps(chr(int(body[i + 2 : i + 10], 16)))[1:-1])
                i += 10
                continue
            out.append(ch + nxt)
            i += 2
            continue
        out.append('\\"' if ch == '"' and quote == "'" else ch)
        i += 1
    return "".join(out)


def _outside_strings(text: str, fn) -> str:
    out: list[str] = []
    last = 0
    i = 0
    while i < len(text):
        if text[i] == '"':
            out.append(fn(text[last:i]))
            j = _skip_string(text, i)
            out.append(text[i:j])
            last = i = j
        else:
            i += 1
    out.append(fn(text[last:]))
    return "".join(out)


_LITERAL_RE = re.compile(r"\b(True|False|None)\b")
_TRAILING_COMMA_RE = re.compile(r",(\s*[\]}])")


def map_literals(text: str) -> str:
    return _outside_strings(text, lambda s: _LITERAL_RE.sub(lambda m: _PY_LITERALS[m.group(1)], s))


def drop_trailing_commas(text: str) -> str:
    # Trailing commas may straddle a string boundary only in broken input; a
    # per-chunk regex is enough for the supported repair classes.
    return _outside_strings(text, lambda s: _TRAILING_COMMA_RE.sub(r"\1", s))


def repair_block(block: str) -> str:
    return drop_trailing_commas(map_literals(repair_quotes(block)))


def _prefer(values: list[Any]) -> Any:
    for value in values:
        if any(isinstance(v, dict) for v in value):
            return value
    return values[0]


def loads_array(text: str) -> list:
    """Recover the most plausible JSON array from ``text``.

    Raises :class:`NoArrayFound` when nothing array-shaped survives repair.
    """
    try:
        value = json.loads(text)
        if isinstance(value, list):
            return value
    except ValueError:
        pass
    stripped = strip_fences(text)
    found: list[list] = []
    for block in candidate_blocks(stripped, "["):
        try:
            value = json.loads(repair_block(block))
        except ValueError:
            continue
        if isinstance(value, list):
            if any(isinstance(v, dict) for v in value):
                return value
            found.append(value)
    if found:
        return _prefer(found)
    raise NoArrayFound("no JSON array could be recovered from the model output")


def loads_object(text: str) -> dict | None:
    """Recover the outermost JSON object from ``text``, or None."""
    try:
        value = json.loads(text)
        if isinstance(value, dict):
            return value
    except ValueError:
        pass
    for block in candidate_blocks(strip_fences(text), "{"):
        try:
            value = json.loads(repair_block(block))
        except ValueError:
            continue
        if isinstance(value, dict):
            return value
    return None
