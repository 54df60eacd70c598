"""Tools as declarative effect programs over a :class:`StateDoc`.

A tool's body is a short list of steps::

    {"op": "get",     "path": "users[user_id=$user_id].balance", "as": "bal"}
    {"op": "filter",  "path": "orders", "where": ["==", "$item.user_id", "$user_id"], "as": "mine"}
    {"op": "compute", "expr": ["+", "$bal", "$amount"], "as": "new_bal"}
    {"op": "assert",  "check": [">=", "$bal", "$amount"], "code": "insufficient_funds"}
    {"op": "set",     "path": "users[user_id=$user_id].balance", "value": "$new_bal"}
    {"op": "append",  "path": "orders", "value": {"record": {...}}}
    {"op": "return",  "value": {"record": {"balance": "$new_bal"}}}

Expressions are JSON: ``"$name.field.0"`` reads a parameter or binding,
other strings are text literals, ints and booleans are themselves,
``{"dec": "1.50"}`` is a decimal, ``{"text": "$raw"}`` escapes a literal
starting with ``$``, ``{"record": {...}}`` builds a record and
``[op, arg, ...]`` applies an operator.

Path segments are attribute names, list indices, or key selectors of the
form ``name[field=$var]`` / ``name[field=LITERAL]``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from decimal import ROUND_HALF_EVEN, Decimal, DivisionByZero, InvalidOperation
from pathlib import Path as FsPath
from typing import Any, Iterable, Mapping, Sequence

from .statestore import (
    DECIMAL_CONTEXT,
    NAME_RE,
    Attribute,
    AttributeSchema,
    PathError,
    Record,
    SchemaViolation,
    StateDoc,
    VList,
    canonical_json,
    decode_value,
    encode_value,
    freeze,
    key_index,
    schema_path,
)

log = logging.getLogger(__name__)

PARAM_KINDS = ("text", "integer", "decimal", "boolean", "reference")
STEP_OPS = ("get", "filter", "compute", "set", "append", "assert", "return")

ARITH = ("+", "-", "*", "/")
COMPARE = ("==", "!=", "<", "<=", ">", ">=")


class ToolError(Exception):
    """Raised inside the engine; always converted to a failed ToolCallResult."""

    category = "ToolError"

    def __init__(self, detail: str = ""):
        super().__init__(detail)
        self.detail = detail

    @property
    def code(self) -> str:
        return f"{self.category}:{self.detail}" if self.detail else self.category


class ArgKindMismatch(ToolError):
    category = "ArgKindMismatch"


class EffectAssertFailed(ToolError):
    category = "EffectAssertFailed"


class UnknownPath(ToolError):
    category = "UnknownPath"


class EffectTypeError(ToolError):
    category = "EffectTypeError"


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Param:
    name: str
    value_kind: str = "text"
    required: bool = True
    description: str = ""

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "value_kind": self.value_kind,
            "required": self.required,
            "description": self.description,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Param":
        return cls(obj["name"], obj.get("value_kind", "text"), bool(obj.get("required", True)), obj.get("description", ""))


@dataclass(frozen=True)
class Step:
    op: str
    path: str | None = None
    expr: Any = None
    binding: str | None = None
    code: str | None = None

    def to_json(self) -> dict:
        out: dict[str, Any] = {"op": self.op}
        if self.path is not None:
            out["path"] = self.path
        if self.op == "filter":
            out["where"] = self.expr
        elif self.op == "compute":
            out["expr"] = self.expr
        elif self.op == "assert":
            out["check"] = self.expr
        elif self.op in ("set", "append", "return"):
            out["value"] = self.expr
        if self.binding is not None:
            out["as"] = self.binding
        if self.code is not None:
            out["code"] = self.code
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "Step":
        op = obj["op"]
        expr = obj.get("expr", obj.get("where", obj.get("check", obj.get("value"))))
        return cls(op=op, path=obj.get("path"), expr=expr, binding=obj.get("as"), code=obj.get("code"))


@dataclass(frozen=True)
class ToolSpec:
    """One tool of an environment: signature plus effect program.

    ``returns`` maps output field names to kinds (``"text"``, ``"decimal"``,
    ``["record", {...}]`` lists, ...); it is what the dependency-graph
    heuristic matches against other tools' parameters.
    """

    name: str
    description: str
    params: tuple
    returns: Any
    effect: tuple
    reads: tuple = ()
    writes: tuple = ()

    @property
    def is_read_only(self) -> bool:
        return not self.writes

    def param(self, name: str) -> Param:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "params": [p.to_json() for p in self.params],
            "returns": self.returns,
            "effect": [s.to_json() for s in self.effect],
            "reads": list(self.reads),
            "writes": list(self.writes),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ToolSpec":
        return cls(
            name=obj["name"],
            description=obj.get("description", ""),
            params=tuple(Param.from_json(p) for p in obj.get("params", ())),
            returns=obj.get("returns", {}),
            effect=tuple(Step.from_json(s) for s in obj.get("effect", ())),
            reads=tuple(obj.get("reads", ())),
            writes=tuple(obj.get("writes", ())),
        )

    @classmethod
    def load(cls, path) -> "ToolSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    @property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_json()).encode()).hexdigest()


@dataclass(frozen=True)
class ToolCallResult:
    ok: bool
    value: Any = None
    error_code: str | None = None
    state_after_hash: str = ""

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "value": encode_value(self.value),
            "error_code": self.error_code,
            "state_after_hash": self.state_after_hash,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ToolCallResult":
        return cls(obj["ok"], freeze(decode_value(obj.get("value"))), obj.get("error_code"), obj.get("state_after_hash", ""))


@dataclass(frozen=True)
class Diagnostic:
    code: str
    step: int | None
    message: str

    def __str__(self) -> str:
        where = "" if self.step is None else f"step {self.step}: "
        return f"{self.code}: {where}{self.message}"


# ---------------------------------------------------------------------------
# Path templates
# ---------------------------------------------------------------------------

_SEG_RE = re.compile(r"^([a-z][a-z0-9_]*)(?:\[([a-z][a-z0-9_]*)=([^\]]+)\])?$")


@dataclass(frozen=True)
class Segment:
    name: str | None = None  # attribute name
    index: int | None = None
    select_field: str | None = None
    select_value: str | None = None  # "$var" or literal text


def _split_path(text: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "." and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return parts


@lru_cache(maxsize=4096)
def parse_template(text: str) -> tuple[Segment, ...]:
    segs = []
    for part in _split_path(text):
        if part.isdigit():
            segs.append(Segment(index=int(part)))
            continue
        m = _SEG_RE.match(part)
        if not m:
            raise ValueError(f"bad path segment {part!r} in {text!r}")
        segs.append(Segment(name=m.group(1), select_field=m.group(2), select_value=m.group(3)))
    return tuple(segs)


def template_schema_path(text: str) -> tuple:
    return tuple(s.name for s in parse_template(text) if s.name is not None)


# ---------------------------------------------------------------------------
# Expression evaluation
# ---------------------------------------------------------------------------


def _is_num(x: Any) -> bool:
    return isinstance(x, (int, Decimal)) and not isinstance(x, bool)


def _scale(x: Any) -> int:
    if isinstance(x, Decimal):
        return max(0, -x.as_tuple().exponent)
    return 0


def _lookup_var(ref: str, scope: Mapping) -> Any:
    name, *rest = ref[1:].split(".")
    if name not in scope:
        raise EffectTypeError(f"unbound {name}")
    value = scope[name]
    for seg in rest:
        try:
            value = value[int(seg)] if seg.isdigit() else value[seg]
        except (KeyError, IndexError, TypeError):
            raise UnknownPath(ref) from None
    return value


def _values_equal(a: Any, b: Any) -> bool:
    if _is_num(a) and _is_num(b):
        return Decimal(a) == Decimal(b)
    if isinstance(a, bool) or isinstance(b, bool):
        return type(a) is type(b) and a == b
    return a == b


def evaluate(expr: Any, scope: Mapping) -> Any:
    """Evaluate an effect expression against params and bindings."""
    if isinstance(expr, bool) or (isinstance(expr, int)):
        return expr
    if isinstance(expr, float):
        raise EffectTypeError("float literal")
    if isinstance(expr, str):
        return _lookup_var(expr, scope) if expr.startswith("$") else expr
    if isinstance(expr, Mapping):
        if "dec" in expr:
            return Decimal(expr["dec"])
        if "text" in expr:
            return expr["text"]
        if "record" in expr:
            return Record((k, evaluate(v, scope)) for k, v in sorted(expr["record"].items()))
        raise EffectTypeError(f"unknown literal {expr!r}")
    if isinstance(expr, list) and expr:
        return _apply(expr[0], expr[1:], scope)
    raise EffectTypeError(f"bad expression {expr!r}")


def _apply(op: str, args: list, scope: Mapping) -> Any:
    if op == "and":
        return all(_bool(evaluate(a, scope)) for a in args)
    if op == "or":
        return any(_bool(evaluate(a, scope)) for a in args)
    if op == "if":
        cond, then, other = args
        return evaluate(then if _bool(evaluate(cond, scope)) else other, scope)
    if op == "filter":
        seq = _list(evaluate(args[0], scope))
        return VList(item for item in seq if _bool(evaluate(args[1], {**scope, "item": item})))
    vals = [evaluate(a, scope) for a in args]
    if op in ARITH:
        a, b = vals
        if not (_is_num(a) and _is_num(b)):
            raise EffectTypeError(f"{op} needs numbers")
        if op == "/":
            if b == 0:
                raise EffectAssertFailed("division_by_zero")
            scale = max(_scale(a), _scale(b), 2)
            q = DECIMAL_CONTEXT.divide(Decimal(a), Decimal(b))
            return q.quantize(Decimal(1).scaleb(-scale), rounding=ROUND_HALF_EVEN, context=DECIMAL_CONTEXT)
        if isinstance(a, int) and isinstance(b, int):
            return a + b if op == "+" else a - b if op == "-" else a * b
        fn = {"+": DECIMAL_CONTEXT.add, "-": DECIMAL_CONTEXT.subtract, "*": DECIMAL_CONTEXT.multiply}[op]
        return fn(Decimal(a), Decimal(b))
    if op == "neg":
        (a,) = vals
        if not _is_num(a):
            raise EffectTypeError("neg needs a number")
        return -a
    if op in ("min", "max"):
        if not all(_is_num(v) for v in vals):
            raise EffectTypeError(f"{op} needs numbers")
        return (min if op == "min" else max)(vals, key=Decimal)
    if op in COMPARE:
        a, b = vals
        if op == "==":
            return _values_equal(a, b)
        if op == "!=":
            return not _values_equal(a, b)
        if _is_num(a) and _is_num(b):
            a, b = Decimal(a), Decimal(b)
        elif not (isinstance(a, str) and isinstance(b, str)):
            raise EffectTypeError(f"{op} needs two numbers or two texts")
        return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[op]
    if op == "not":
        return not _bool(vals[0])
    if op == "concat":
        if not all(isinstance(v, str) for v in vals):
            raise EffectTypeError("concat needs text")
        return "".join(vals)
    if op == "str":
        (a,) = vals
        if not _is_num(a):
            raise EffectTypeError("str needs a number")
        return str(a)
    if op == "len":
        return len(_list(vals[0]))
    if op == "sum":
        seq = _list(vals[0])
        if len(vals) > 1:
            seq = [item[vals[1]] for item in seq]
        total: Any = 0
        for v in seq:
            if not _is_num(v):
                raise EffectTypeError("sum needs numbers")
            total = total + v if isinstance(total, int) and isinstance(v, int) else DECIMAL_CONTEXT.add(Decimal(total), Decimal(v))
        return total
    if op == "pluck":
        return VList(item[vals[1]] for item in _list(vals[0]))
    if op == "contains":
        return any(_values_equal(x, vals[1]) for x in _list(vals[0]))
    if op == "list":
        return VList(vals)
    raise EffectTypeError(f"unknown operator {op!r}")


def _bool(x: Any) -> bool:
    if not isinstance(x, bool):
        raise EffectTypeError("expected boolean")
    return x


def _list(x: Any) -> tuple:
    if not isinstance(x, tuple):
        raise EffectTypeError("expected list")
    return x


# ---------------------------------------------------------------------------
# Static checking
# ---------------------------------------------------------------------------

ANY = "any"


def slot_type(attr: Attribute) -> Any:
    if attr.kind == "list":
        return ("list", slot_type(attr.element()))
    if attr.kind == "record":
        return ("record", {f.name: slot_type(f) for f in attr.fields})
    return "text" if attr.value_kind == "reference" else attr.value_kind


def kind_type(kind: Any) -> Any:
    """Type of a declared return/param kind (``"decimal"``, ``["list", ...]``, ``{...}``)."""
    if isinstance(kind, str):
        return "text" if kind == "reference" else kind
    if isinstance(kind, Mapping):
        return ("record", {k: kind_type(v) for k, v in kind.items()})
    if isinstance(kind, list) and len(kind) == 2 and kind[0] == "list":
        return ("list", kind_type(kind[1]))
    return ANY


def assignable(src: Any, dst: Any) -> bool:
    if src == ANY or dst == ANY or src == dst:
        return True
    if src == "integer" and dst == "decimal":
        return True
    if isinstance(src, tuple) and isinstance(dst, tuple) and src[0] == dst[0]:
        if src[0] == "list":
            return assignable(src[1], dst[1])
        return set(src[1]) == set(dst[1]) and all(assignable(src[1][k], dst[1][k]) for k in src[1])
    return False


def _numeric(t: Any) -> bool:
    return t in ("integer", "decimal", ANY)


class _Checker:
    def __init__(self, spec: ToolSpec, schema: AttributeSchema):
        self.spec = spec
        self.schema = schema
        self.diags: list[Diagnostic] = []
        self.step: int | None = None
        self.guarded: set[str] = set()

    def err(self, code: str, message: str) -> None:
        self.diags.append(Diagnostic(code, self.step, message))

    # -- paths ---------------------------------------------------------------

    def path(self, text: str, env: Mapping) -> Attribute | None:
        try:
            segs = parse_template(text)
        except ValueError as exc:
            self.err("UnknownPath", str(exc))
            return None
        attr = self.schema.root
        for seg in segs:
            if seg.index is not None:
                if attr.kind != "list":
                    self.err("UnknownPath", f"{text}: index into non-list")
                    return None
                attr = attr.element()
                continue
            if attr.kind == "list":
                attr = attr.element()
            if attr.kind != "record":
                self.err("UnknownPath", f"{text}: cannot descend into {attr.name!r}")
                return None
            try:
                attr = attr.field(seg.name)
            except KeyError:
                self.err("UnknownPath", f"{text}: no attribute {seg.name!r}")
                return None
            if seg.select_field is not None:
                if attr.kind != "list" or attr.value_kind != "record":
                    self.err("UnknownPath", f"{text}: selector on non-collection {seg.name!r}")
                    return None
                try:
                    sel = attr.element().field(seg.select_field)
                except KeyError:
                    self.err("UnknownPath", f"{text}: no field {seg.select_field!r} to select on")
                    return None
                operand = seg.select_value
                if operand.startswith("$"):
                    t = self.expr(operand, env)
                    if not assignable(t, slot_type(sel)):
                        self.err("TypeMismatch", f"{text}: selector operand is {t}, field is {slot_type(sel)}")
                attr = attr.element()
        return attr

    def covered(self, text: str, declared: Iterable[str]) -> bool:
        target = template_schema_path(text)
        for d in declared:
            dp = tuple(d.split("."))
            if target[: len(dp)] == dp:
                return True
        return False

    # -- expressions ---------------------------------------------------------

    def expr(self, e: Any, env: Mapping) -> Any:
        if isinstance(e, bool):
            return "boolean"
        if isinstance(e, int):
            return "integer"
        if isinstance(e, float):
            self.err("FloatLiteral", f"binary float literal {e!r}")
            return "decimal"
        if isinstance(e, str):
            if not e.startswith("$"):
                return "text"
            name, *rest = e[1:].split(".")
            if name not in env:
                self.err("UseBeforeDef", f"{name!r} used before definition")
                return ANY
            t = env[name]
            for seg in rest:
                if t == ANY:
                    return ANY
                if seg.isdigit() and isinstance(t, tuple) and t[0] == "list":
                    t = t[1]
                elif isinstance(t, tuple) and t[0] == "record" and seg in t[1]:
                    t = t[1][seg]
                else:
                    self.err("UnknownPath", f"{e}: no member {seg!r}")
                    return ANY
            return t
        if isinstance(e, Mapping):
            if "dec" in e:
                try:
                    Decimal(e["dec"])
                except (InvalidOperation, TypeError):
                    self.err("TypeMismatch", f"bad decimal literal {e['dec']!r}")
                return "decimal"
            if "text" in e:
                return "text"
            if "record" in e:
                return ("record", {k: self.expr(v, env) for k, v in e["record"].items()})
            self.err("UnknownOp", f"unknown literal {e!r}")
            return ANY
        if isinstance(e, list) and e and isinstance(e[0], str):
            return self.op(e[0], e[1:], env)
        self.err("UnknownOp", f"bad expression {e!r}")
        return ANY

    def op(self, op: str, args: list, env: Mapping) -> Any:
        arity = {"neg": 1, "not": 1, "str": 1, "len": 1, "if": 3, "filter": 2, "pluck": 2, "contains": 2}
        if op in ARITH or op in COMPARE:
            arity[op] = 2
        if op in arity and len(args) != arity[op]:
            self.err("TypeMismatch", f"{op} takes {arity[op]} arguments")
            return ANY
        if op == "filter":
            seq = self.expr(args[0], env)
            item = self.want_list(seq, "filter")
            self.want(self.expr(args[1], {**env, "item": item}), "boolean", "filter predicate")
            return seq
        ts = [self.expr(a, env) for a in args]
        if op in ARITH:
            if op == "/":
                self.check_guard(args[1])
            for t in ts:
                if not _numeric(t):
                    self.err("TypeMismatch", f"{op} operand is {t}")
            if op == "/" or "decimal" in ts:
                return "decimal"
            return ANY if ANY in ts else "integer"
        if op in ("min", "max"):
            for t in ts:
                if not _numeric(t):
                    self.err("TypeMismatch", f"{op} operand is {t}")
            return "decimal" if "decimal" in ts else "integer"
        if op == "neg":
            if not _numeric(ts[0]):
                self.err("TypeMismatch", f"neg operand is {ts[0]}")
            return ts[0]
        if op in COMPARE:
            a, b = ts
            if op in ("==", "!="):
                if not (assignable(a, b) or assignable(b, a)):
                    self.err("TypeMismatch", f"comparing {a} with {b}")
            elif not ((_numeric(a) and _numeric(b)) or (a in ("text", ANY) and b in ("text", ANY))):
                self.err("TypeMismatch", f"ordering {a} with {b}")
            return "boolean"
        if op in ("and", "or", "not"):
            for t in ts:
                self.want(t, "boolean", op)
            return "boolean"
        if op == "if":
            self.want(ts[0], "boolean", "if condition")
            return ts[1] if ts[1] != ANY else ts[2]
        if op == "concat":
            for t in ts:
                self.want(t, "text", "concat")
            return "text"
        if op == "str":
            if not _numeric(ts[0]):
                self.err("TypeMismatch", f"str operand is {ts[0]}")
            return "text"
        if op == "len":
            self.want_list(ts[0], "len")
            return "integer"
        if op == "sum":
            if not 1 <= len(ts) <= 2:
                self.err("TypeMismatch", "sum takes 1 or 2 arguments")
                return ANY
            item = self.want_list(ts[0], "sum")
            if len(args) == 2:
                if not isinstance(args[1], str) or args[1].startswith("$"):
                    self.err("TypeMismatch", "sum field must be a literal name")
                    return ANY
                item = self.member(item, args[1])
            if not _numeric(item):
                self.err("TypeMismatch", f"sum over {item}")
            return item if item != ANY else ANY
        if op == "pluck":
            item = self.want_list(ts[0], "pluck")
            if not isinstance(args[1], str) or args[1].startswith("$"):
                self.err("TypeMismatch", "pluck field must be a literal name")
                return ANY
            return ("list", self.member(item, args[1]))
        if op == "contains":
            self.want_list(ts[0], "contains")
            return "boolean"
        if op == "list":
            elems = [t for t in ts if t != ANY]
            return ("list", elems[0] if elems else ANY)
        self.err("UnknownOp", f"unknown operator {op!r}")
        return ANY

    def member(self, t: Any, name: str) -> Any:
        if t == ANY:
            return ANY
        if isinstance(t, tuple) and t[0] == "record" and name in t[1]:
            return t[1][name]
        self.err("UnknownPath", f"no member {name!r} in {t}")
        return ANY

    def want(self, t: Any, expected: str, what: str) -> None:
        if t not in (expected, ANY):
            self.err("TypeMismatch", f"{what} expects {expected}, got {t}")

    def want_list(self, t: Any, what: str) -> Any:
        if isinstance(t, tuple) and t[0] == "list":
            return t[1]
        if t != ANY:
            self.err("TypeMismatch", f"{what} expects a list, got {t}")
        return ANY

    def check_guard(self, divisor: Any) -> None:
        if isinstance(divisor, int) and not isinstance(divisor, bool) and divisor != 0:
            return
        if isinstance(divisor, Mapping) and "dec" in divisor:
            try:
                if Decimal(divisor["dec"]) != 0:
                    return
            except (InvalidOperation, TypeError):
                pass
        if canonical_json(divisor) not in self.guarded:
            self.err("UnguardedDivision", f"divisor {divisor!r} not guarded by a prior assert")

    def note_guards(self, pred: Any) -> None:
        if isinstance(pred, list) and pred:
            if pred[0] == "and":
                for p in pred[1:]:
                    self.note_guards(p)
            elif len(pred) == 3 and pred[0] in (">", "!=") and pred[2] == 0:
                self.guarded.add(canonical_json(pred[1]))
            elif len(pred) == 3 and pred[0] in ("<", "!=") and pred[1] == 0:
                self.guarded.add(canonical_json(pred[2]))

    # -- program -------------------------------------------------------------

    def run(self) -> list[Diagnostic]:
        spec = self.spec
        if not NAME_RE.match(spec.name):
            self.err("BadName", f"tool name {spec.name!r}")
        env: dict[str, Any] = {}
        for p in spec.params:
            if p.value_kind not in PARAM_KINDS:
                self.err("UnknownParamKind", f"{p.name}: {p.value_kind!r}")
            if p.name in env:
                self.err("DuplicateBinding", f"parameter {p.name!r} declared twice")
            env[p.name] = kind_type(p.value_kind)
        for declared in (*spec.reads, *spec.writes):
            try:
                self.schema.slot(tuple(declared.split(".")))
            except (PathError, SchemaViolation):
                self.err("UnknownPath", f"declared path {declared!r} not in schema")
        if not spec.effect:
            self.err("MissingReturn", "empty effect program")
        for i, step in enumerate(spec.effect):
            self.step = i
            if step.op not in STEP_OPS:
                self.err("UnknownOp", f"unknown step {step.op!r}")
                continue
            if step.op == "return" and i != len(spec.effect) - 1:
                self.err("ReturnNotLast", "return must be the last step")
            if step.op in ("get", "filter", "compute"):
                if not step.binding or not NAME_RE.match(step.binding):
                    self.err("BadName", f"binding name {step.binding!r}")
                    continue
                if step.binding in env:
                    self.err("DuplicateBinding", f"{step.binding!r} already bound")
            if step.op in ("get", "filter", "set", "append"):
                if not step.path:
                    self.err("UnknownPath", "missing path")
                    continue
            if step.op == "get":
                attr = self.path(step.path, env)
                if attr is not None and not self.covered(step.path, (*spec.reads, *spec.writes)):
                    self.err("UndeclaredRead", f"{step.path} not in reads")
                env[step.binding] = slot_type(attr) if attr else ANY
            elif step.op == "filter":
                attr = self.path(step.path, env)
                if attr is not None and not self.covered(step.path, (*spec.reads, *spec.writes)):
                    self.err("UndeclaredRead", f"{step.path} not in reads")
                t = slot_type(attr) if attr else ANY
                item = t[1] if isinstance(t, tuple) and t[0] == "list" else ANY
                if attr is not None and attr.kind != "list":
                    self.err("TypeMismatch", f"filter over non-list {step.path}")
                self.want(self.expr(step.expr, {**env, "item": item}), "boolean", "filter predicate")
                env[step.binding] = t
            elif step.op == "compute":
                env[step.binding] = self.expr(step.expr, env)
            elif step.op in ("set", "append"):
                attr = self.path(step.path, env)
                if attr is not None and not self.covered(step.path, spec.writes):
                    self.err("UndeclaredWrite", f"{step.path} not in writes")
                vt = self.expr(step.expr, env)
                if attr is None:
                    continue
                if step.op == "append":
                    if attr.kind != "list":
                        self.err("TypeMismatch", f"append to non-list {step.path}")
                        continue
                    target = slot_type(attr.element())
                else:
                    target = slot_type(attr)
                if not assignable(vt, target):
                    self.err("TypeMismatch", f"{step.op} {step.path}: value is {vt}, slot is {target}")
            elif step.op == "assert":
                self.want(self.expr(step.expr, env), "boolean", "assert")
                if not step.code:
                    self.err("MissingCode", "assert needs an error code")
                self.note_guards(step.expr)
            elif step.op == "return":
                rt = self.expr(step.expr, env)
                declared = kind_type(spec.returns)
                if spec.returns and not assignable(rt, declared):
                    self.err("TypeMismatch", f"returns {rt}, declared {declared}")
        self.step = None
        if spec.effect and spec.effect[-1].op != "return":
            self.err("MissingReturn", "program must end with return")
        return self.diags


def validate_tool(spec: ToolSpec, schema: AttributeSchema) -> list[Diagnostic]:
    """Type-check ``spec`` against ``schema``; an empty list means valid."""
    return _Checker(spec, schema).run()


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _resolve(text: str, doc: StateDoc, scope: Mapping) -> tuple:
    path: list = []
    node: Any = doc.root
    for seg in parse_template(text):
        if seg.index is not None:
            if not isinstance(node, tuple) or not 0 <= seg.index < len(node):
                raise UnknownPath(text)
            path.append(seg.index)
            node = node[seg.index]
            continue
        if not isinstance(node, Mapping) or seg.name not in node:
            raise UnknownPath(text)
        path.append(seg.name)
        node = node[seg.name]
        if seg.select_field is not None:
            operand = seg.select_value
            want = _lookup_var(operand, scope) if operand.startswith("$") else operand
            attr = doc.schema.slot(schema_path(path))
            if attr.key == seg.select_field:
                pos = key_index(node, seg.select_field).get(want)
            else:
                pos = next((i for i, rec in enumerate(node) if _values_equal(rec[seg.select_field], want)), None)
            if pos is None:
                raise UnknownPath(f"{seg.name}[{seg.select_field}={want}]")
            path.append(pos)
            node = node[pos]
    return tuple(path)


def _check_args(spec: ToolSpec, args: Mapping) -> dict:
    scope = {}
    known = {p.name for p in spec.params}
    for name in args:
        if name not in known:
            raise ArgKindMismatch(f"unknown parameter {name}")
    for p in spec.params:
        if p.name not in args:
            if p.required:
                raise ArgKindMismatch(f"missing {p.name}")
            continue
        v = args[p.name]
        vk = p.value_kind
        if vk in ("text", "reference"):
            ok = isinstance(v, str)
        elif vk == "integer":
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif vk == "decimal":
            ok = _is_num(v)
            if isinstance(v, Decimal) and not v.is_finite():
                ok = False
        else:
            ok = isinstance(v, bool)
        if not ok:
            raise ArgKindMismatch(p.name)
        scope[p.name] = v
    return scope


def _hexdigest(doc: StateDoc) -> str:
    return doc.digest.hex()


def execute_tool(spec: ToolSpec, args: Mapping, doc: StateDoc) -> tuple[StateDoc, ToolCallResult]:
    """Run ``spec`` on ``doc``.

    Failures (bad args, failed asserts, missing paths) come back as a failed
    :class:`ToolCallResult` with ``doc`` returned untouched.
    """
    try:
        scope = _check_args(spec, args)
        current = doc
        result: Any = None
        for step in spec.effect:
            op = step.op
            if op == "get":
                node: Any = current.root
                for seg in _resolve(step.path, current, scope):
                    node = node[seg]
                scope[step.binding] = node
            elif op == "filter":
                node = current.root
                for seg in _resolve(step.path, current, scope):
                    node = node[seg]
                scope[step.binding] = VList(
                    item for item in _list(node) if _bool(evaluate(step.expr, {**scope, "item": item}))
                )
            elif op == "compute":
                scope[step.binding] = evaluate(step.expr, scope)
            elif op == "assert":
                if not _bool(evaluate(step.expr, scope)):
                    raise EffectAssertFailed(step.code or "assert")
            elif op in ("set", "append"):
                path = _resolve(step.path, current, scope)
                value = evaluate(step.expr, scope)
                try:
                    current = current.set(path, value) if op == "set" else current.append(path, value)
                except SchemaViolation as exc:
                    raise EffectTypeError(str(exc)) from None
                except PathError:
                    raise UnknownPath(step.path) from None
            elif op == "return":
                result = freeze(evaluate(step.expr, scope))
            else:
                raise EffectTypeError(f"unknown step {op}")
    except ToolError as exc:
        return doc, ToolCallResult(False, None, exc.code, _hexdigest(doc))
    except (ValueError, KeyError, TypeError, IndexError, InvalidOperation, DivisionByZero) as exc:
        # Unvalidated specs can still trip the interpreter; keep it data.
        return doc, ToolCallResult(False, None, f"EffectTypeError:{exc}", _hexdigest(doc))
    return current, ToolCallResult(True, result, None, _hexdigest(current))


def execute_sequence(
    calls: Sequence[tuple[ToolSpec, Mapping]], doc: StateDoc
) -> tuple[StateDoc, list[ToolCallResult]]:
    """Left fold of :func:`execute_tool`; stops after the first failed call.

    The failing step is ``len(results) - 1`` when ``results[-1].ok`` is false.
    """
    results: list[ToolCallResult] = []
    for spec, args in calls:
        doc, res = execute_tool(spec, args, doc)
        results.append(res)
        if not res.ok:
            break
    return doc, results


def failed_step(results: Sequence[ToolCallResult]) -> int | None:
    for i, r in enumerate(results):
        if not r.ok:
            return i
    return None


# ---------------------------------------------------------------------------
# Files and manifests
# ---------------------------------------------------------------------------


def load_tools(directory) -> dict[str, ToolSpec]:
    tools: dict[str, ToolSpec] = {}
    for path in sorted(FsPath(directory).glob("*.json")):
        spec = ToolSpec.load(path)
        if spec.name in tools:
            raise ValueError(f"duplicate tool name {spec.name!r} in {directory}")
        tools[spec.name] = spec
    return tools


def tool_manifest(env_name: str, tools: Iterable[ToolSpec]) -> dict:
    entries = sorted(({"name": t.name, "digest": t.digest} for t in tools), key=lambda e: e["name"])
    digest = hashlib.sha256(canonical_json(entries).encode()).hexdigest()
    return {"environment": env_name, "tools": entries, "digest": digest}


def output_fields(spec: ToolSpec) -> dict[str, Any]:
    """Named outputs of a tool with their types (empty for unnamed returns)."""
    if isinstance(spec.returns, Mapping):
        return {k: kind_type(v) for k, v in spec.returns.items()}
    return {}
