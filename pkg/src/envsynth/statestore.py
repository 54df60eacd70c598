"""Canonical document store for environment state.

A :class:`StateDoc` is an immutable value: a tree of records, lists and
scalars that conforms to an :class:`AttributeSchema`.  Updates go through
path-copying helpers, so a rollout can hold its own lineage of docs while
sharing unchanged subtrees with every other rollout started from the same
snapshot.

Scalars are ``str``, ``int``, ``bool`` and fixed-scale ``Decimal``.  Binary
floats are rejected everywhere.  Records are :class:`Record` (a read-only
dict with sorted keys) and lists are :class:`VList` (a tuple); both memoize
their structural digest so re-hashing after a small update only touches
the updated path.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from decimal import Context, Decimal, InvalidOperation
from functools import cached_property
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")
KINDS = ("scalar", "list", "record")
SCALAR_KINDS = ("text", "integer", "decimal", "boolean", "reference")
DECIMAL_TAG = "$decimal"
DECIMAL_CONTEXT = Context(prec=80)
CHUNK = 64  # list items per cached digest chunk

PathKey = Union[str, int]
Path = tuple  # tuple[PathKey, ...]


class StateError(Exception):
    pass


class SchemaViolation(StateError):
    pass


class SchemaMismatch(StateError):
    pass


class PathError(StateError):
    """Raised when a concrete path does not exist in a document."""


# ---------------------------------------------------------------------------
# Immutable containers
# ---------------------------------------------------------------------------


class Record(dict):
    """Read-only dict.  Built once, never mutated."""

    __slots__ = ("_digest",)

    def _readonly(self, *args, **kwargs):
        raise TypeError("Record is immutable")

    __setitem__ = __delitem__ = _readonly
    update = pop = popitem = clear = setdefault = _readonly
    __ior__ = _readonly

    def __reduce__(self):
        return (Record, (dict(self),))


class VList(tuple):
    """Tuple used for list values; carries digest and key-index caches."""

    def __new__(cls, items: Iterable = ()):
        return super().__new__(cls, items)


def freeze(value: Any) -> Any:
    """Convert plain containers into :class:`Record` / :class:`VList`.

    Record keys are sorted.  Floats raise :class:`SchemaViolation`.
    """
    if isinstance(value, float):
        raise SchemaViolation("binary floating-point values are not allowed")
    if isinstance(value, Mapping):
        return Record((k, freeze(value[k])) for k in sorted(value))
    if isinstance(value, (list, tuple)):
        return VList(freeze(v) for v in value)
    if isinstance(value, Decimal):
        if not value.is_finite():
            raise SchemaViolation(f"non-finite decimal {value!r}")
        return value.copy_abs() if value.is_zero() else value
    return value


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Attribute:
    """One attribute (or record field) of the state structure.

    ``kind`` is the container shape.  ``value_kind`` is the scalar kind for
    scalars and lists of scalars, or ``"record"`` for records and lists of
    records (in which case ``fields`` describes the record).  Keyed lists
    name their key field in ``key``; references name the keyed list they
    point into in ``ref``.
    """

    name: str
    kind: str = "scalar"
    value_kind: str = "text"
    description: str = ""
    scale: int = 2
    fields: tuple = ()
    key: str | None = None
    ref: str | None = None
    volatile: bool = False

    def element(self) -> "Attribute":
        if self.kind != "list":
            raise SchemaViolation(f"{self.name} is not a list")
        kind = "record" if self.value_kind == "record" else "scalar"
        return replace(self, kind=kind, key=None, volatile=False)

    def field(self, name: str) -> "Attribute":
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def to_json(self) -> dict:
        out: dict[str, Any] = {
            "name": self.name,
            "kind": self.kind,
            "value_kind": self.value_kind,
            "description": self.description,
        }
        if self.value_kind == "decimal":
            out["scale"] = self.scale
        if self.fields:
            out["fields"] = [f.to_json() for f in self.fields]
        if self.key:
            out["key"] = self.key
        if self.ref:
            out["ref"] = self.ref
        if self.volatile:
            out["volatile"] = True
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "Attribute":
        return cls(
            name=obj["name"],
            kind=obj.get("kind", "scalar"),
            value_kind=obj.get("value_kind", "record" if obj.get("fields") else "text"),
            description=obj.get("description", ""),
            scale=int(obj.get("scale", 2)),
            fields=tuple(cls.from_json(f) for f in obj.get("fields", ())),
            key=obj.get("key"),
            ref=obj.get("ref"),
            volatile=bool(obj.get("volatile", False)),
        )


@dataclass(frozen=True)
class AttributeSchema:
    schema_id: str
    attributes: tuple

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        problems = self.problems()
        if problems:
            raise SchemaViolation("; ".join(problems))

    # The whole schema is itself a record attribute; this keeps path
    # navigation uniform from the root down.
    @cached_property
    def root(self) -> Attribute:
        return Attribute(name="", kind="record", value_kind="record", fields=self.attributes)

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(canonical_json(self.to_json()).encode()).hexdigest()

    def attribute(self, name: str) -> Attribute:
        return self.root.field(name)

    def problems(self) -> list[str]:
        out: list[str] = []
        if not NAME_RE.match(self.schema_id or ""):
            out.append(f"bad schema_id {self.schema_id!r}")
        keyed = {a.name for a in self.attributes if a.kind == "list" and a.key}
        self._check_fields(self.attributes, "", keyed, out)
        return out

    def _check_fields(self, attrs: Sequence[Attribute], prefix: str, keyed: set, out: list) -> None:
        seen = set()
        for a in attrs:
            where = prefix + a.name
            if not NAME_RE.match(a.name):
                out.append(f"bad attribute name {where!r}")
            if a.name in seen:
                out.append(f"duplicate attribute {where!r}")
            seen.add(a.name)
            if a.kind not in KINDS:
                out.append(f"{where}: unknown kind {a.kind!r}")
            if a.value_kind == "record":
                if a.kind == "scalar" or not a.fields:
                    out.append(f"{where}: record values need fields")
                self._check_fields(a.fields, where + ".", keyed, out)
            elif a.value_kind not in SCALAR_KINDS:
                out.append(f"{where}: unknown value_kind {a.value_kind!r}")
            elif a.kind == "record" or a.fields:
                out.append(f"{where}: scalar value_kind with record shape")
            if a.value_kind == "decimal" and a.scale < 0:
                out.append(f"{where}: negative scale")
            if a.value_kind == "reference" and a.ref not in keyed:
                out.append(f"{where}: reference to unknown keyed collection {a.ref!r}")
            if a.key is not None:
                if a.kind != "list" or a.value_kind != "record":
                    out.append(f"{where}: only lists of records carry a key")
                else:
                    try:
                        kf = a.field(a.key)
                    except KeyError:
                        out.append(f"{where}: key field {a.key!r} missing")
                    else:
                        if kf.kind != "scalar" or kf.value_kind not in ("text", "integer"):
                            out.append(f"{where}: key field must be a text/integer scalar")

    def slot(self, path: Sequence[PathKey]) -> Attribute:
        """Schema node for a concrete or schema path (indices optional)."""
        attr = self.root
        for seg in path:
            if isinstance(seg, int):
                attr = attr.element()
                continue
            if attr.kind == "list":
                attr = attr.element()
            if attr.kind != "record":
                raise PathError(f"cannot descend into {attr.name!r} with {seg!r}")
            try:
                attr = attr.field(seg)
            except KeyError:
                raise PathError(f"unknown attribute {seg!r}") from None
        return attr

    def to_json(self) -> dict:
        return {"schema_id": self.schema_id, "attributes": [a.to_json() for a in self.attributes]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "AttributeSchema":
        return cls(obj["schema_id"], tuple(Attribute.from_json(a) for a in obj["attributes"]))

    @classmethod
    def load(cls, path) -> "AttributeSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


def parse_path(text: str | Sequence[PathKey]) -> Path:
    if not isinstance(text, str):
        return tuple(text)
    if text == "":
        return ()
    return tuple(int(s) if s.isdigit() else s for s in text.split("."))


def format_path(path: Sequence[PathKey]) -> str:
    return ".".join(str(s) for s in path)


def schema_path(path: Sequence[PathKey]) -> tuple:
    """Drop list indices: ``users.3.balance`` -> ``users.balance``."""
    return tuple(s for s in path if not isinstance(s, int))


# ---------------------------------------------------------------------------
# Canonicalization
# ---------------------------------------------------------------------------


def _canon(value: Any, attr: Attribute, path: tuple) -> Any:
    if isinstance(value, float):
        raise SchemaViolation(f"{format_path(path)}: binary float not allowed")
    if attr.kind == "list":
        if not isinstance(value, (list, tuple)):
            raise SchemaViolation(f"{format_path(path)}: expected list, got {type(value).__name__}")
        el = attr.element()
        out = VList(_canon(v, el, path + (i,)) for i, v in enumerate(value))
        if attr.key and len(key_index(out, attr.key)) != len(out):
            raise SchemaViolation(f"{format_path(path)}: duplicate {attr.key} values")
        return out
    if attr.kind == "record":
        if not isinstance(value, Mapping):
            raise SchemaViolation(f"{format_path(path)}: expected record, got {type(value).__name__}")
        names = {f.name for f in attr.fields}
        if set(value) != names:
            missing = sorted(names - set(value))
            extra = sorted(set(value) - names)
            raise SchemaViolation(f"{format_path(path)}: missing {missing} extra {extra}")
        fields = sorted(attr.fields, key=lambda f: f.name)
        return Record((f.name, _canon(value[f.name], f, path + (f.name,))) for f in fields)
    return _canon_scalar(value, attr, path)


def _canon_scalar(value: Any, attr: Attribute, path: tuple) -> Any:
    vk = attr.value_kind
    ok = False
    if vk in ("text", "reference"):
        ok = isinstance(value, str)
    elif vk == "integer":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif vk == "boolean":
        ok = isinstance(value, bool)
    elif vk == "decimal":
        if isinstance(value, int) and not isinstance(value, bool):
            value = Decimal(value)
        if isinstance(value, Decimal) and value.is_finite():
            try:
                value = value.quantize(Decimal(1).scaleb(-attr.scale), context=DECIMAL_CONTEXT)
            except InvalidOperation:
                raise SchemaViolation(f"{format_path(path)}: decimal {value!r} out of range") from None
            if value.is_zero():
                value = value.copy_abs()
            ok = True
    if not ok:
        raise SchemaViolation(f"{format_path(path)}: expected {vk}, got {value!r}")
    return value


def canonical_value(value: Any, attr: Attribute, path: Sequence[PathKey] = ()) -> Any:
    """Canonicalize one value against a schema slot."""
    return _canon(value, attr, tuple(path))


def iter_scalars(value: Any, attr: Attribute, path: tuple = ()) -> Iterator[tuple[tuple, Attribute, Any]]:
    if attr.kind == "list":
        el = attr.element()
        for i, v in enumerate(value):
            yield from iter_scalars(v, el, path + (i,))
    elif attr.kind == "record":
        for f in attr.fields:
            yield from iter_scalars(value[f.name], f, path + (f.name,))
    else:
        yield path, attr, value


def key_index(items: VList, key: str) -> dict:
    """``{key value: position}`` for a list of records; cached per list."""
    cache = items.__dict__.setdefault("_key_index", {})
    idx = cache.get(key)
    if idx is None:
        idx = {}
        for i, rec in enumerate(items):
            idx.setdefault(rec[key], i)
        cache[key] = idx
    return idx


def _check_references(root: Record, schema: AttributeSchema) -> None:
    for path, attr, value in iter_scalars(root, schema.root):
        if attr.value_kind == "reference":
            target = schema.attribute(attr.ref)
            if value not in key_index(root[attr.ref], target.key):
                raise SchemaViolation(f"{format_path(path)}: dangling reference {value!r} into {attr.ref}")


# ---------------------------------------------------------------------------
# Documents
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StateDoc:
    """An immutable, schema-conformant state document.

    Build with :meth:`from_data` (canonicalizes and validates).  The raw
    constructor trusts its ``root`` and is used by the path-copying helpers.
    """

    schema: AttributeSchema
    root: Record

    @property
    def schema_id(self) -> str:
        return self.schema.schema_id

    @classmethod
    def from_data(cls, schema: AttributeSchema, data: Mapping) -> "StateDoc":
        root = _canon(data, schema.root, ())
        _check_references(root, schema)
        return cls(schema, root)

    def get(self, path: str | Sequence[PathKey]) -> Any:
        node: Any = self.root
        for seg in parse_path(path):
            try:
                node = node[seg]
            except (KeyError, IndexError, TypeError):
                raise PathError(f"no such path {format_path(parse_path(path))!r}") from None
        return node

    def has(self, path: str | Sequence[PathKey]) -> bool:
        try:
            self.get(path)
        except PathError:
            return False
        return True

    def set(self, path: str | Sequence[PathKey], value: Any) -> "StateDoc":
        """Replace the value at an existing path (canonicalized for its slot)."""
        path = parse_path(path)
        if not path:
            return StateDoc.from_data(self.schema, value)
        self.get(path)
        slot = self.schema.slot(path)
        new = _canon(value, slot, path)
        self._check_written_refs(new, slot, path)
        self._check_written_key(path, new)
        root = _update(self.root, path, lambda old: new)
        return StateDoc(self.schema, root)

    def append(self, path: str | Sequence[PathKey], value: Any) -> "StateDoc":
        path = parse_path(path)
        seq = self.get(path)
        slot = self.schema.slot(path)
        if slot.kind != "list":
            raise PathError(f"{format_path(path)} is not a list")
        el = slot.element()
        new = _canon(value, el, path + (len(seq),))
        self._check_written_refs(new, el, path + (len(seq),))
        if slot.key and new[slot.key] in key_index(seq, slot.key):
            raise SchemaViolation(f"{format_path(path)}: duplicate {slot.key} {new[slot.key]!r}")
        root = _update(self.root, path, lambda old: _appended(old, new, slot.key))
        return StateDoc(self.schema, root)

    def _check_written_key(self, path: tuple, new: Any) -> None:
        # writing a whole record or its key field inside a keyed list
        for cut in (len(path) - 1, len(path) - 2):
            if cut < 0 or not isinstance(path[cut], int):
                continue
            coll = self.schema.slot(path[:cut])
            if coll.kind != "list" or not coll.key:
                continue
            if cut == len(path) - 1:
                value = new[coll.key]
            elif path[-1] == coll.key:
                value = new
            else:
                return
            at = key_index(self.get(path[:cut]), coll.key).get(value)
            if at is not None and at != path[cut]:
                raise SchemaViolation(f"{format_path(path)}: duplicate {coll.key} {value!r}")
            return

    def _check_written_refs(self, value: Any, slot: Attribute, path: tuple) -> None:
        for p, attr, v in iter_scalars(value, slot, path):
            if attr.value_kind == "reference":
                target = self.schema.attribute(attr.ref)
                if v not in key_index(self.root[attr.ref], target.key):
                    raise SchemaViolation(f"{format_path(p)}: dangling reference {v!r} into {attr.ref}")

    def to_json(self) -> dict:
        return encode_value(self.root)

    @classmethod
    def from_json(cls, schema: AttributeSchema, obj: Mapping) -> "StateDoc":
        return cls.from_data(schema, decode_value(obj))

    @property
    def digest(self) -> bytes:
        return doc_digest(self)

    def snapshot(self) -> "Snapshot":
        return Snapshot(doc_digest(self), self)

    def __eq__(self, other):
        if not isinstance(other, StateDoc):
            return NotImplemented
        return self.schema == other.schema and encode_value(self.root) == encode_value(other.root)

    __hash__ = None  # type: ignore[assignment]


def _update(node: Any, path: tuple, fn) -> Any:
    if not path:
        return fn(node)
    seg, rest = path[0], path[1:]
    if isinstance(node, Mapping):
        if seg not in node:
            raise PathError(f"no key {seg!r}")
        child = _update(node[seg], rest, fn)
        return Record((k, child if k == seg else v) for k, v in node.items())
    if isinstance(node, tuple) and isinstance(seg, int):
        if not 0 <= seg < len(node):
            raise PathError(f"index {seg} out of range")
        child = _update(node[seg], rest, fn)
        out = VList(node[:seg] + (child,) + node[seg + 1 :])
        _carry_index_on_replace(node, out, seg, child)
        _carry_chunks(node, out, seg)
        return out
    raise PathError(f"cannot descend into {type(node).__name__} with {seg!r}")


def _carry_index_on_replace(old: VList, new: VList, pos: int, child: Any) -> None:
    cache = getattr(old, "__dict__", {}).get("_key_index")
    if not cache or not isinstance(child, Mapping):
        return
    kept = {}
    for key, idx in cache.items():
        if child.get(key) == old[pos].get(key):
            kept[key] = idx
    if kept:
        new.__dict__["_key_index"] = kept


def _appended(old: VList, item: Any, key: str | None) -> VList:
    out = VList(old + (item,))
    _carry_chunks(old, out, len(old))
    cache = getattr(old, "__dict__", {}).get("_key_index")
    if cache and key in cache:
        idx = dict(cache[key])
        idx.setdefault(item[key], len(old))
        out.__dict__["_key_index"] = {key: idx}
    return out


def canonicalize(doc: StateDoc) -> StateDoc:
    """Re-derive the canonical form of ``doc``: sorted keys, scaled decimals.

    Raises :class:`SchemaViolation` when an entry does not match the schema
    or a reference dangles.
    """
    return StateDoc.from_data(doc.schema, doc.root)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def encode_value(value: Any) -> Any:
    """Value -> JSON-compatible object.  Decimals become ``{"$decimal": "1.50"}``."""
    if isinstance(value, Decimal):
        return {DECIMAL_TAG: str(value)}
    if isinstance(value, float):
        raise SchemaViolation("binary floating-point values are not allowed")
    if isinstance(value, Mapping):
        return {k: encode_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [encode_value(v) for v in value]
    return value


def decode_value(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        if len(obj) == 1 and DECIMAL_TAG in obj:
            return Decimal(obj[DECIMAL_TAG])
        return {k: decode_value(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [decode_value(v) for v in obj]
    if isinstance(obj, float):
        raise SchemaViolation("binary floating-point values are not allowed")
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dumps_value(value: Any) -> str:
    return canonical_json(encode_value(value))


def loads_value(text: str) -> Any:
    return decode_value(json.loads(text, parse_float=Decimal))


# ---------------------------------------------------------------------------
# Comparison, hashing, diff
# ---------------------------------------------------------------------------


def strip_volatile(value: Any, attr: Attribute) -> Any:
    if attr.kind == "list":
        el = attr.element()
        if el.kind == "scalar":
            return value
        return VList(strip_volatile(v, el) for v in value)
    if attr.kind == "record":
        return Record(
            (f.name, strip_volatile(value[f.name], f))
            for f in sorted(attr.fields, key=lambda f: f.name)
            if not f.volatile
        )
    return value


def comparison_bytes(doc: StateDoc) -> bytes:
    """Canonical serialization with volatile attributes removed."""
    return canonical_json(encode_value(strip_volatile(doc.root, doc.schema.root))).encode()


def _require_same_schema(a: StateDoc, b: StateDoc) -> None:
    if a.schema_id != b.schema_id or a.schema != b.schema:
        raise SchemaMismatch(f"{a.schema_id!r} vs {b.schema_id!r}")


def state_equal(a: StateDoc, b: StateDoc) -> bool:
    """Reward predicate: canonical forms byte-identical, volatile attributes ignored."""
    _require_same_schema(a, b)
    return comparison_bytes(canonicalize(a)) == comparison_bytes(canonicalize(b))


def _scalar_digest(value: Any) -> bytes:
    return hashlib.sha256(b"s" + canonical_json(encode_value(value)).encode()).digest()


def _node_digest(value: Any, attr: Attribute, tag: str) -> bytes:
    if attr.kind == "scalar":
        return _scalar_digest(value)
    cached = value._digest if isinstance(value, Record) and hasattr(value, "_digest") else (
        value.__dict__.get("_digest") if isinstance(value, VList) else None
    )
    if cached is not None and cached[0] == tag:
        return cached[1]
    h = hashlib.sha256()
    if attr.kind == "list":
        h.update(b"l")
        for chunk in _chunk_digests(value, attr.element(), tag):
            h.update(chunk)
    else:
        h.update(b"r")
        for f in sorted(attr.fields, key=lambda f: f.name):
            if f.volatile:
                continue
            h.update(f.name.encode() + b"\0")
            h.update(_node_digest(value[f.name], f, tag))
    digest = h.digest()
    if isinstance(value, Record):
        value._digest = (tag, digest)
    elif isinstance(value, VList):
        value.__dict__["_digest"] = (tag, digest)
    return digest


def _chunk_digests(items: VList, el: Attribute, tag: str) -> list[bytes]:
    # fixed-size chunks keep re-hashing after a single-item edit O(CHUNK)
    cached = items.__dict__.get("_chunks")
    chunks = list(cached[1]) if cached and cached[0] == tag else [None] * -(-len(items) // CHUNK)
    for c, d in enumerate(chunks):
        if d is None:
            h = hashlib.sha256(b"c")
            for v in items[c * CHUNK : (c + 1) * CHUNK]:
                h.update(_node_digest(v, el, tag))
            chunks[c] = h.digest()
    items.__dict__["_chunks"] = (tag, tuple(chunks))
    return chunks


def _carry_chunks(old: VList, new: VList, dirty: int) -> None:
    cached = old.__dict__.get("_chunks")
    if not cached:
        return
    chunks = list(cached[1]) + [None] * (-(-len(new) // CHUNK) - len(cached[1]))
    chunks[dirty // CHUNK] = None
    new.__dict__["_chunks"] = (cached[0], tuple(chunks))


def doc_digest(doc: StateDoc) -> bytes:
    """32-byte structural digest of the canonical, volatile-stripped document."""
    tag = doc.schema.fingerprint
    root = _node_digest(doc.root, doc.schema.root, tag)
    return hashlib.sha256(b"doc\0" + doc.schema_id.encode() + b"\0" + root).digest()


@dataclass(frozen=True)
class Snapshot:
    doc_hash: bytes
    payload: StateDoc

    @classmethod
    def of(cls, doc: StateDoc) -> "Snapshot":
        doc = canonicalize(doc)
        return cls(doc_digest(doc), doc)

    def to_json(self) -> dict:
        return {"doc_hash": self.doc_hash.hex(), "payload": self.payload.to_json()}

    @classmethod
    def from_json(cls, schema: AttributeSchema, obj: Mapping, verify: bool = True) -> "Snapshot":
        doc = StateDoc.from_json(schema, obj["payload"])
        digest = doc_digest(doc)
        if verify and digest.hex() != obj["doc_hash"]:
            raise StateError("snapshot digest does not match payload")
        return cls(digest, doc)


@dataclass(frozen=True)
class DiffEntry:
    path: tuple
    before: Any = None
    after: Any = None

    def to_json(self) -> dict:
        return {
            "path": format_path(self.path),
            "before": encode_value(self.before),
            "after": encode_value(self.after),
        }


def _same_scalar(a: Any, b: Any) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, Decimal):
        return str(a) == str(b)
    return a == b


def _diff(a: Any, b: Any, attr: Attribute, path: tuple, out: list, volatile: bool) -> None:
    # added/removed elements keep their volatile fields so the diff can be applied
    if attr.kind == "record" and isinstance(a, Mapping) and isinstance(b, Mapping):
        for f in sorted(attr.fields, key=lambda f: f.name):
            if f.volatile and not volatile:
                continue
            _diff(a[f.name], b[f.name], f, path + (f.name,), out, volatile)
        return
    if attr.kind == "list" and isinstance(a, tuple) and isinstance(b, tuple):
        el = attr.element()
        common = min(len(a), len(b))
        for i in range(common):
            _diff(a[i], b[i], el, path + (i,), out, volatile)
        for i in range(common, len(b)):
            out.append(DiffEntry(path + (i,), None, b[i]))
        for i in reversed(range(common, len(a))):
            out.append(DiffEntry(path + (i,), a[i], None))
        return
    if not _same_scalar(a, b):
        out.append(DiffEntry(path, a, b))


def diff(a: StateDoc, b: StateDoc, include_volatile: bool = False) -> list[DiffEntry]:
    """Changes turning ``a`` into ``b``.

    Empty iff :func:`state_equal` (volatile attributes are skipped unless
    ``include_volatile``).  List additions come in ascending index order and
    removals in descending order, so :func:`apply_diff` can replay entries
    front to back.
    """
    _require_same_schema(a, b)
    out: list[DiffEntry] = []
    _diff(a.root, b.root, a.schema.root, (), out, include_volatile)
    return out


def _apply_one(node: Any, entry: DiffEntry) -> Any:
    *head, last = entry.path

    def edit(container):
        if isinstance(container, Mapping):
            items = dict(container)
            if entry.after is None:
                items.pop(last, None)
            else:
                items[last] = entry.after
            return Record((k, items[k]) for k in sorted(items))
        seq = list(container)
        if entry.after is None:
            if last != len(seq) - 1:
                raise PathError(f"can only remove the tail of a list, not index {last}")
            seq.pop()
        elif entry.before is None and last == len(seq):
            seq.append(entry.after)
        else:
            seq[last] = entry.after
        return VList(seq)

    return _update(node, tuple(head), edit)


def apply_diff(doc: StateDoc, entries: Iterable[DiffEntry]) -> StateDoc:
    root: Any = doc.root
    for entry in entries:
        if not entry.path:
            root = entry.after
        else:
            root = _apply_one(root, entry)
    return StateDoc.from_data(doc.schema, root)


def to_plain(value: Any) -> Any:
    """Record/VList tree -> plain dict/list tree (handy in tests and prompts)."""
    if isinstance(value, Mapping):
        return {k: to_plain(v) for k, v in value.items()}
    if isinstance(value, tuple):
        return [to_plain(v) for v in value]
    return value
