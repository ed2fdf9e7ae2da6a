"""Hierarchical key expressions and selectors.

A key expression is a `/`-separated chunk path where a chunk is either a
literal, `*` (exactly one chunk) or `**` (zero or more chunks).  A selector
is a key expression plus an optional `?(k=v;k=v)` property predicate.
Expressions are canonicalized on parse: adjacent `**` chunks collapse, so
equal canonical text means equal match language for the forms we emit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

STAR = "*"
DSTAR = "**"

_FORBIDDEN_CHUNK_CHARS = frozenset("/?")


class KeyExprError(ValueError):
    """Base class for key-expression parse and use errors."""


class EmptyInput(KeyExprError):
    pass


class MissingLeadingSeparator(KeyExprError):
    pass


class EmptyChunk(KeyExprError):
    pass


class InvalidWildcard(KeyExprError):
    pass


class InvalidChunkCharacter(KeyExprError):
    pass


class NonConcretePath(KeyExprError):
    pass


class MalformedPredicate(KeyExprError):
    pass


@dataclass(frozen=True)
class KeyExpr:
    """Canonical parsed key expression. Build via parse_key_expr()."""

    chunks: tuple[str, ...]

    @property
    def text(self) -> str:
        return "/" + "/".join(self.chunks)

    @property
    def is_concrete(self) -> bool:
        return not any(c in (STAR, DSTAR) for c in self.chunks)

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class Selector:
    """Key expression plus ordered (name, value) properties."""

    key: KeyExpr
    properties: tuple[tuple[str, str], ...] = ()

    @property
    def text(self) -> str:
        if not self.properties:
            return self.key.text
        pred = ";".join(f"{k}={v}" for k, v in self.properties)
        return f"{self.key.text}?({pred})"

    def __str__(self) -> str:
        return self.text


def _validate_chunk(chunk: str) -> str:
    if chunk == "":
        raise EmptyChunk("empty chunk")
    if chunk in (STAR, DSTAR):
        return chunk
    if "*" in chunk:
        raise InvalidWildcard(f"wildcard must occupy a whole chunk: {chunk!r}")
    bad = _FORBIDDEN_CHUNK_CHARS.intersection(chunk)
    if bad:
        raise InvalidChunkCharacter(f"forbidden character {sorted(bad)!r} in chunk {chunk!r}")
    return chunk


def parse_key_expr(text: str) -> KeyExpr:
    """Parse and canonicalize a key expression.

    Raises EmptyInput, MissingLeadingSeparator, EmptyChunk, InvalidWildcard
    or InvalidChunkCharacter. Parsing the rendered text of the result yields
    an equal value.
    """
    if text == "":
        raise EmptyInput("empty key expression")
    if not text.startswith("/"):
        raise MissingLeadingSeparator(f"key expression must start with '/': {text!r}")
    raw = text[1:].split("/")
    chunks: list[str] = []
    for part in raw:
        chunk = _validate_chunk(part)
        if chunk == DSTAR and chunks and chunks[-1] == DSTAR:
            continue  # adjacent ** collapse
        chunks.append(chunk)
    return KeyExpr(tuple(chunks))


def parse_selector(text: str) -> Selector:
    """Parse a selector: key expression, optional `?(k=v;k=v)` predicate."""
    key_text, sep, pred = text.partition("?")
    key = parse_key_expr(key_text)
    if not sep:
        return Selector(key)
    if not (pred.startswith("(") and pred.endswith(")")):
        raise MalformedPredicate(f"predicate must be parenthesized: {pred!r}")
    body = pred[1:-1]
    props: list[tuple[str, str]] = []
    seen: set[str] = set()
    if body:
        for pair in body.split(";"):
            name, eq, value = pair.partition("=")
            if not eq or not name:
                raise MalformedPredicate(f"expected name=value, got {pair!r}")
            if name in seen:
                raise MalformedPredicate(f"duplicate property name {name!r}")
            seen.add(name)
            props.append((name, value))
    return Selector(key, tuple(props))


def key_matches(expr: KeyExpr, path: KeyExpr) -> bool:
    """True iff the concrete `path` is in the language of `expr`.

    `*` consumes exactly one chunk, `**` zero or more. Raises NonConcretePath
    if `path` contains wildcards.
    """
    if not path.is_concrete:
        raise NonConcretePath(f"path must be concrete: {path.text}")
    return _matches(expr.chunks, path.chunks)


def _matches(ec: tuple[str, ...], pc: tuple[str, ...]) -> bool:
    le, lp = len(ec), len(pc)

    @lru_cache(maxsize=None)
    def rec(i: int, j: int) -> bool:
        if i == le:
            return j == lp
        c = ec[i]
        if c == DSTAR:
            return rec(i + 1, j) or (j < lp and rec(i, j + 1))
        if j == lp:
            return False
        if c == STAR or c == pc[j]:
            return rec(i + 1, j + 1)
        return False

    try:
        return rec(0, 0)
    finally:
        rec.cache_clear()


def key_intersects(a: KeyExpr, b: KeyExpr) -> bool:
    """True iff some concrete path matches both expressions."""
    ac, bc = a.chunks, b.chunks
    la, lb = len(ac), len(bc)

    @lru_cache(maxsize=None)
    def rec(i: int, j: int) -> bool:
        if i == la and j == lb:
            return True
        if i == la:
            return all(c == DSTAR for c in bc[j:])
        if j == lb:
            return all(c == DSTAR for c in ac[i:])
        ca, cb = ac[i], bc[j]
        if ca == DSTAR and (rec(i + 1, j) or rec(i, j + 1)):
            return True
        if cb == DSTAR and (rec(i, j + 1) or rec(i + 1, j)):
            return True
        if ca != DSTAR and cb != DSTAR:
            if ca == STAR or cb == STAR or ca == cb:
                return rec(i + 1, j + 1)
        return False

    try:
        return rec(0, 0)
    finally:
        rec.cache_clear()
