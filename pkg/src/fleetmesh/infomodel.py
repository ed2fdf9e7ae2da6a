"""Schema registry and controller fan-out.

Schemas bind a key scope to a typed field list; samples published under
a bound scope are checked field by field, everything else passes (open
world).  A control domain groups one logical controller with M actuator
endpoints and dispatches validated commands to all of them, collecting
per-actuator results without aborting the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .codec import EncodingTag, LossyStructure, Value, as_properties, transcode
from .keyspace import KeyExpr, key_intersects, key_matches, parse_key_expr


class InfoModelError(ValueError):
    pass


class BadSchema(InfoModelError):
    pass


class ScopeConflict(InfoModelError):
    pass


class ValidationFailed(InfoModelError):
    def __init__(self, key_text: str, violations: Sequence[str]):
        self.key_text = key_text
        self.violations = list(violations)
        super().__init__(f"{key_text}: " + "; ".join(self.violations))


class CommandInvalid(InfoModelError):
    pass


class FieldKind(Enum):
    INT = "INT"
    REAL = "REAL"
    TEXT = "TEXT"
    ENUM = "ENUM"


@dataclass(frozen=True)
class Field:
    name: str
    kind: FieldKind
    unit: str = ""
    values: Tuple[str, ...] = ()
    lo: Optional[float] = None
    hi: Optional[float] = None

    def __post_init__(self):
        if not self.name:
            raise BadSchema("empty field name")
        if self.kind is FieldKind.ENUM:
            if not self.values:
                raise BadSchema(f"field {self.name}: ENUM needs at least one value")
        elif self.values:
            raise BadSchema(f"field {self.name}: values only allowed on ENUM")
        has_range = self.lo is not None or self.hi is not None
        if has_range and self.kind not in (FieldKind.INT, FieldKind.REAL):
            raise BadSchema(f"field {self.name}: range only allowed on INT/REAL")
        if self.lo is not None and self.hi is not None and self.lo > self.hi:
            raise BadSchema(f"field {self.name}: empty range [{self.lo}, {self.hi}]")

    def check(self, text: str) -> Optional[str]:
        """None if `text` satisfies this field, else a violation message."""
        if self.kind is FieldKind.TEXT:
            return None
        if self.kind is FieldKind.ENUM:
            if text in self.values:
                return None
            return f"{self.name}: {text!r} not in {sorted(self.values)}"
        try:
            num = int(text) if self.kind is FieldKind.INT else float(text)
        except ValueError:
            return f"{self.name}: {text!r} is not {self.kind.value}"
        if self.lo is not None and num < self.lo:
            return f"{self.name}: {num} below {self.lo}"
        if self.hi is not None and num > self.hi:
            return f"{self.name}: {num} above {self.hi}"
        return None


@dataclass(frozen=True)
class Schema:
    scope: KeyExpr
    fields: Tuple[Field, ...]

    def __post_init__(self):
        if isinstance(self.scope, str):
            object.__setattr__(self, "scope", parse_key_expr(self.scope))
        object.__setattr__(self, "fields", tuple(self.fields))
        if not self.fields:
            raise BadSchema("schema needs at least one field")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise BadSchema("duplicate field names")

    def field_map(self) -> Dict[str, Field]:
        return {f.name: f for f in self.fields}


def _as_flat_map(value: Value) -> Tuple[Optional[Dict[str, str]], Optional[str]]:
    """Flat string map view of a sample value, or a reason it has none."""
    if value.tag is EncodingTag.PROPERTIES:
        return as_properties(value), None
    if value.tag is EncodingTag.TREE:
        try:
            return as_properties(transcode(value, EncodingTag.PROPERTIES)), None
        except LossyStructure as exc:
            return None, f"value shape: {exc}"
    return None, f"value encoding {value.tag.value} has no field map"


def _bare_text(value: Value) -> Optional[str]:
    if value.tag is EncodingTag.TEXT:
        return value.payload.decode("utf-8")
    if value.tag is EncodingTag.RAW:
        try:
            return value.payload.decode("utf-8")
        except UnicodeDecodeError:
            return None
    return None


def validate_value(schema: Schema, value: Value) -> List[str]:
    """Violation messages for `value` under `schema`; empty means ok."""
    fmap, reason = _as_flat_map(value)
    if fmap is None:
        # a bare text can satisfy a one-field schema on its own
        if len(schema.fields) == 1:
            text = _bare_text(value)
            if text is not None:
                bad = schema.fields[0].check(text)
                return [bad] if bad else []
        return [reason or "value not checkable"]
    out = []
    for f in schema.fields:
        if f.name not in fmap:
            out.append(f"{f.name}: missing")
            continue
        bad = f.check(fmap[f.name])
        if bad:
            out.append(bad)
    return out


class SchemaRegistry:
    """Bound schemas, at most one per key scope, scopes pairwise disjoint."""

    def __init__(self):
        self._schemas: List[Schema] = []

    @property
    def schemas(self) -> Tuple[Schema, ...]:
        return tuple(self._schemas)

    def register(self, schema: Schema) -> None:
        for existing in self._schemas:
            if key_intersects(existing.scope, schema.scope):
                raise ScopeConflict(
                    f"{schema.scope.text} intersects bound scope {existing.scope.text}"
                )
        self._schemas.append(schema)

    def schema_for(self, path: KeyExpr) -> Optional[Schema]:
        for schema in self._schemas:
            if key_matches(schema.scope, path):
                return schema
        return None

    def validate(self, path: KeyExpr, value: Value) -> List[str]:
        schema = self.schema_for(path)
        if schema is None:
            return []
        return validate_value(schema, value)


def bind_validation(fabric, registry: SchemaRegistry) -> None:
    """Make every put() through `fabric` enforce the registry's schemas."""

    def checker(key: KeyExpr, value: Value) -> None:
        violations = registry.validate(key, value)
        if violations:
            raise ValidationFailed(key.text, violations)

    fabric.set_validator(checker)


# ------------------------------------------------------- controller fan-out

@dataclass(frozen=True)
class Actuator:
    actuator_id: str
    schema: Schema
    handler: Callable[[Value], object]


@dataclass(frozen=True)
class DispatchResult:
    actuator: str
    ok: bool
    detail: object = None


@dataclass
class ControlDomain:
    controller_id: str
    actuators: List[Actuator] = field(default_factory=list)

    def __post_init__(self):
        if not self.actuators:
            raise InfoModelError("a control domain needs at least one actuator")
        ids = [a.actuator_id for a in self.actuators]
        if len(set(ids)) != len(ids):
            raise InfoModelError("duplicate actuator ids")


def control_fanout(
    domain: ControlDomain,
    command: Value,
    targets: Optional[Sequence[str]] = None,
) -> List[DispatchResult]:
    """Dispatch one validated command to every (selected) actuator.

    Validation runs against each target's command schema before any
    handler is invoked; a single violation aborts with CommandInvalid
    and zero dispatches.  Handler failures never abort the batch.
    """
    if targets is None:
        selected = list(domain.actuators)
    else:
        by_id = {a.actuator_id: a for a in domain.actuators}
        missing = [t for t in targets if t not in by_id]
        if missing:
            raise InfoModelError(f"unknown actuators: {missing}")
        selected = [by_id[t] for t in targets]
    for act in selected:
        violations = validate_value(act.schema, command)
        if violations:
            raise CommandInvalid(f"{act.actuator_id}: " + "; ".join(violations))
    results = []
    for act in selected:
        try:
            results.append(DispatchResult(act.actuator_id, True, act.handler(command)))
        except Exception as exc:
            results.append(DispatchResult(act.actuator_id, False, str(exc)))
    return results


# --------------------------------------------------------- shipped examples

def _schema(scope: str, *fields: Field) -> Schema:
    return Schema(parse_key_expr(scope), fields)


V2X_SCHEMAS: Tuple[Schema, ...] = (
    _schema(
        "/v2x/ota/**",
        Field("image", FieldKind.TEXT),
        Field("version", FieldKind.TEXT),
    ),
    _schema(
        "/v2x/hdmap/**",
        Field("tile", FieldKind.TEXT),
        Field("zoom", FieldKind.INT, lo=0, hi=22),
    ),
    _schema(
        "/v2x/adas/**",
        Field("hazard", FieldKind.ENUM, values=("obstacle", "pedestrian", "vehicle")),
        Field("distance_m", FieldKind.REAL, unit="m", lo=0, hi=1000),
    ),
    _schema(
        "/v2x/traffic/**",
        Field("phase", FieldKind.ENUM, values=("Red", "Yellow", "Green")),
        Field("countdown_s", FieldKind.INT, unit="s", lo=0, hi=300),
    ),
)
