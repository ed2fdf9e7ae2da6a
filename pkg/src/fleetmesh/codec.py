"""Tagged value encodings and the transcoding matrix.

Five encodings: RAW (opaque bytes), TEXT (UTF-8), PROPERTIES (`k=v;k=v`),
TREE (string-keyed maps/lists/strings, JSON wire form) and RELATIONAL
(header row plus uniform data rows, comma-delimited lines).

Payloads are stored canonically so Value equality is byte equality:
PROPERTIES pairs and RELATIONAL columns are name-sorted, TREE renders as
compact sorted-key JSON. make_value() canonicalizes; the documented
grammars are in docs/formats.md.

Supported transcodings: identity, TEXT<->RAW, PROPERTIES<->TREE (flat
string map), RELATIONAL<->TREE (list of uniform flat string maps), and
anything->RAW. Everything else is UnsupportedTranscoding; a supported edge
can still fail per-value with LossyStructure (e.g. a nested TREE asked to
become PROPERTIES).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum


class CodecError(ValueError):
    pass


class PayloadViolatesEncoding(CodecError):
    pass


class UnsupportedTranscoding(CodecError):
    pass


class LossyStructure(CodecError):
    pass


class EncodingTag(Enum):
    RAW = "RAW"
    TEXT = "TEXT"
    PROPERTIES = "PROPERTIES"
    TREE = "TREE"
    RELATIONAL = "RELATIONAL"


@dataclass(frozen=True)
class Value:
    """A tagged payload in canonical serialized form."""

    tag: EncodingTag
    payload: bytes

    def __repr__(self) -> str:
        body = self.payload if len(self.payload) <= 40 else self.payload[:37] + b"..."
        return f"Value({self.tag.value}, {body!r})"


# --------------------------------------------------------- per-tag grammar

def _parse_properties(payload: bytes) -> dict[str, str]:
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise PayloadViolatesEncoding(f"properties payload not UTF-8: {exc}") from None
    pairs: dict[str, str] = {}
    if text == "":
        return pairs
    for pair in text.split(";"):
        name, eq, value = pair.partition("=")
        if not eq or not name:
            raise PayloadViolatesEncoding(f"expected name=value, got {pair!r}")
        if name in pairs:
            raise PayloadViolatesEncoding(f"duplicate property {name!r}")
        pairs[name] = value
    return pairs


def _render_properties(pairs: dict[str, str]) -> bytes:
    for name, value in pairs.items():
        if "=" in name or ";" in name or not name:
            raise LossyStructure(f"name {name!r} not representable as a property")
        if ";" in value:
            raise LossyStructure(f"value {value!r} not representable as a property")
    return ";".join(f"{k}={pairs[k]}" for k in sorted(pairs)).encode("utf-8")


def _check_tree(node, depth=0) -> None:
    if depth > 64:
        raise PayloadViolatesEncoding("tree too deep")
    if isinstance(node, str):
        return
    if isinstance(node, list):
        for item in node:
            _check_tree(item, depth + 1)
        return
    if isinstance(node, dict):
        for key, item in node.items():
            if not isinstance(key, str):
                raise PayloadViolatesEncoding(f"non-string tree key {key!r}")
            _check_tree(item, depth + 1)
        return
    raise PayloadViolatesEncoding(f"tree nodes must be map/list/string, got {type(node).__name__}")


def _parse_tree(payload: bytes):
    try:
        node = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PayloadViolatesEncoding(f"tree payload is not valid JSON: {exc}") from None
    _check_tree(node)
    return node


def _render_tree(node) -> bytes:
    return json.dumps(node, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _parse_relational(payload: bytes) -> tuple[list[str], list[list[str]]]:
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise PayloadViolatesEncoding(f"relational payload not UTF-8: {exc}") from None
    if text == "":
        raise PayloadViolatesEncoding("relational payload needs a header row")
    lines = text.split("\n")
    header = lines[0].split(",")
    if any(not col for col in header):
        raise PayloadViolatesEncoding("empty column name")
    if len(set(header)) != len(header):
        raise PayloadViolatesEncoding("duplicate column name")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != len(header):
            raise PayloadViolatesEncoding(f"row {i} has {len(fields)} fields, header has {len(header)}")
        rows.append(fields)
    return header, rows


def _render_relational(header: list[str], rows: list[list[str]]) -> bytes:
    for cell in header + [c for row in rows for c in row]:
        if "," in cell or "\n" in cell:
            raise LossyStructure(f"cell {cell!r} not representable in a relational row")
    order = sorted(range(len(header)), key=lambda i: header[i])
    lines = [",".join(header[i] for i in order)]
    lines.extend(",".join(row[i] for i in order) for row in rows)
    return "\n".join(lines).encode("utf-8")


def make_value(tag: EncodingTag, payload: bytes) -> Value:
    """Validate payload against the tag's grammar and canonicalize it."""
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    if tag is EncodingTag.RAW:
        return Value(tag, bytes(payload))
    if tag is EncodingTag.TEXT:
        try:
            payload.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PayloadViolatesEncoding(f"text payload not UTF-8: {exc}") from None
        return Value(tag, bytes(payload))
    if tag is EncodingTag.PROPERTIES:
        return Value(tag, _render_properties(_parse_properties(payload)))
    if tag is EncodingTag.TREE:
        return Value(tag, _render_tree(_parse_tree(payload)))
    if tag is EncodingTag.RELATIONAL:
        return Value(tag, _render_relational(*_parse_relational(payload)))
    raise CodecError(f"unknown tag {tag!r}")


def text_value(text: str) -> Value:
    return make_value(EncodingTag.TEXT, text.encode("utf-8"))


def properties_value(pairs: dict[str, str]) -> Value:
    return Value(EncodingTag.PROPERTIES, _render_properties(dict(pairs)))


def tree_value(node) -> Value:
    _check_tree(node)
    return Value(EncodingTag.TREE, _render_tree(node))


def as_properties(value: Value) -> dict[str, str]:
    if value.tag is not EncodingTag.PROPERTIES:
        raise CodecError(f"expected PROPERTIES, got {value.tag.value}")
    return _parse_properties(value.payload)


def as_tree(value: Value):
    if value.tag is not EncodingTag.TREE:
        raise CodecError(f"expected TREE, got {value.tag.value}")
    return _parse_tree(value.payload)


def as_text(value: Value) -> str:
    if value.tag is not EncodingTag.TEXT:
        raise CodecError(f"expected TEXT, got {value.tag.value}")
    return value.payload.decode("utf-8")


# ------------------------------------------------------------- transcoding

_EDGES = {
    (EncodingTag.TEXT, EncodingTag.RAW),
    (EncodingTag.RAW, EncodingTag.TEXT),
    (EncodingTag.PROPERTIES, EncodingTag.TREE),
    (EncodingTag.TREE, EncodingTag.PROPERTIES),
    (EncodingTag.RELATIONAL, EncodingTag.TREE),
    (EncodingTag.TREE, EncodingTag.RELATIONAL),
}


def transcode_support(source: EncodingTag, target: EncodingTag) -> bool:
    """Pure matrix lookup; transcode may still raise LossyStructure for
    structurally deep inputs on a supported edge."""
    if source == target or target is EncodingTag.RAW:
        return True
    return (source, target) in _EDGES


def transcode(value: Value, target: EncodingTag) -> Value:
    source = value.tag
    if source == target:
        return value
    if target is EncodingTag.RAW:
        return Value(EncodingTag.RAW, value.payload)
    if (source, target) not in _EDGES:
        raise UnsupportedTranscoding(f"no edge {source.value} -> {target.value}")

    if source is EncodingTag.RAW and target is EncodingTag.TEXT:
        try:
            value.payload.decode("utf-8")
        except UnicodeDecodeError:
            raise LossyStructure("raw bytes are not valid UTF-8") from None
        return Value(EncodingTag.TEXT, value.payload)
    if source is EncodingTag.TEXT and target is EncodingTag.RAW:
        return Value(EncodingTag.RAW, value.payload)

    if source is EncodingTag.PROPERTIES and target is EncodingTag.TREE:
        return tree_value(dict(_parse_properties(value.payload)))
    if source is EncodingTag.TREE and target is EncodingTag.PROPERTIES:
        node = _parse_tree(value.payload)
        if not isinstance(node, dict) or not all(isinstance(v, str) for v in node.values()):
            raise LossyStructure("only a flat map of strings converts to PROPERTIES")
        return Value(EncodingTag.PROPERTIES, _render_properties(node))

    if source is EncodingTag.RELATIONAL and target is EncodingTag.TREE:
        header, rows = _parse_relational(value.payload)
        return tree_value([dict(zip(header, row)) for row in rows])
    if source is EncodingTag.TREE and target is EncodingTag.RELATIONAL:
        node = _parse_tree(value.payload)
        if not isinstance(node, list) or not node:
            raise LossyStructure("only a non-empty list of records converts to RELATIONAL")
        keysets = set()
        for rec in node:
            if not isinstance(rec, dict) or not all(isinstance(v, str) for v in rec.values()):
                raise LossyStructure("records must be flat maps of strings")
            keysets.add(frozenset(rec))
        if len(keysets) != 1:
            raise LossyStructure("records must share one column set")
        header = sorted(keysets.pop())
        if not header:
            raise LossyStructure("records need at least one column")
        rows = [[rec[col] for col in header] for rec in node]
        return Value(EncodingTag.RELATIONAL, _render_relational(header, rows))

    raise UnsupportedTranscoding(f"no edge {source.value} -> {target.value}")


def flatten(value: Value) -> list[tuple[str, str]]:
    """(path, leaf) pairs of the structured content; used by the semantic
    preservation checks. RAW/TEXT flatten to a single root pair."""
    if value.tag in (EncodingTag.RAW, EncodingTag.TEXT):
        return [("", value.payload.decode("utf-8", errors="replace"))]
    if value.tag is EncodingTag.PROPERTIES:
        return sorted(_parse_properties(value.payload).items())
    if value.tag is EncodingTag.RELATIONAL:
        header, rows = _parse_relational(value.payload)
        out = []
        for i, row in enumerate(rows):
            out.extend((f"{i}.{col}", cell) for col, cell in zip(header, row))
        return sorted(out)
    node = _parse_tree(value.payload)
    out: list[tuple[str, str]] = []

    def walk(prefix, n):
        if isinstance(n, str):
            out.append((prefix, n))
        elif isinstance(n, list):
            for i, item in enumerate(n):
                walk(f"{prefix}.{i}" if prefix else str(i), item)
        else:
            for k in sorted(n):
                walk(f"{prefix}.{k}" if prefix else k, n[k])

    walk("", node)
    return sorted(out)
