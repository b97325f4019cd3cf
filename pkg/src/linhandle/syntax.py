"""Shared abstract syntax for both calculi.

Types, kinds, terms and handlers, plus the structural operations everything
else leans on: row canonicalisation, capture-avoiding substitution, free
type variables, and alpha-equivalence.

The explicit calculus carries all annotations (linearities on lambdas and
lets, types on binders, effect rows on return/do); the implicit calculus
carries none of them.  One Term type serves both; ``validate_calculus``
rejects mixed forms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Union


class MalformedRowError(Exception):
    """A row with duplicate labels."""


class SubstError(Exception):
    """A substitution binding a variable to the wrong syntactic category."""


# ---------------------------------------------------------------------------
# Linearity

@dataclass(frozen=True, slots=True)
class Lin:
    """Concrete linearity: unlimited or linear."""

    linear: bool

    def __repr__(self) -> str:
        return "LIN" if self.linear else "UNL"


@dataclass(frozen=True, slots=True)
class LinVar:
    name: str

    def __repr__(self) -> str:
        return f"LinVar({self.name})"


UNL = Lin(False)
LIN = Lin(True)

Linearity = Union[Lin, LinVar]


def lin_le(a: Lin, b: Lin) -> bool:
    """Value-linearity order: UNL below LIN (unlimited usable as linear)."""
    return (not a.linear) or b.linear


def lin_join_value(a: Lin, b: Lin) -> Lin:
    """Least upper bound in the value order (LIN wins)."""
    return LIN if (a.linear or b.linear) else UNL


# ---------------------------------------------------------------------------
# Kinds

@dataclass(frozen=True, slots=True)
class TypeKind:
    lin: Linearity


@dataclass(frozen=True, slots=True)
class RowKind:
    lacks: frozenset[str]
    lin: Linearity


@dataclass(frozen=True, slots=True)
class FlexRowKind:
    """Principal kind of a closed row: kindable at every lacks-set disjoint
    from its own labels."""

    dom: frozenset[str]
    lin: Linearity


@dataclass(frozen=True, slots=True)
class PresenceKind:
    lin: Linearity


@dataclass(frozen=True, slots=True)
class EffectKind:
    pass


@dataclass(frozen=True, slots=True)
class CompKind:
    pass


@dataclass(frozen=True, slots=True)
class HandlerKind:
    pass


EFFECT_KIND = EffectKind()
COMP_KIND = CompKind()
HANDLER_KIND = HandlerKind()

Kind = Union[TypeKind, RowKind, FlexRowKind, PresenceKind, EffectKind, CompKind, HandlerKind]


# ---------------------------------------------------------------------------
# Types

@dataclass(frozen=True, slots=True)
class TyVar:
    name: str


@dataclass(frozen=True, slots=True)
class Base:
    """A base type carrying its declared linearity (File is linear, Int is
    unlimited, ...)."""

    name: str
    lin: Lin


@dataclass(frozen=True, slots=True)
class Fun:
    param: "ValueType"
    lin: Linearity
    result: "CompType"


@dataclass(frozen=True, slots=True)
class Forall:
    """Explicit-calculus polymorphic type; the implicit calculus quantifies
    in type schemes instead."""

    lin: Linearity
    var: str
    kind: Kind
    body: "CompType"


@dataclass(frozen=True, slots=True)
class PairT:
    left: "ValueType"
    right: "ValueType"


ValueType = Union[TyVar, Base, Fun, Forall, PairT]


@dataclass(frozen=True, slots=True)
class Absent:
    pass


ABSENT = Absent()


@dataclass(frozen=True, slots=True)
class Present:
    param: ValueType
    lin: Linearity
    result: ValueType


@dataclass(frozen=True, slots=True)
class PresVar:
    name: str


Presence = Union[Absent, Present, PresVar]


@dataclass(frozen=True, slots=True)
class RowType:
    """Label-sorted row; ``tail`` is a row variable name or None for a closed
    row.  Construct through ``row_canon`` (or the ``row`` helper) so the
    canonical-form invariants hold."""

    entries: tuple[tuple[str, Presence], ...]
    tail: Optional[str]

    def presence(self, label: str) -> Optional[Presence]:
        for lbl, p in self.entries:
            if lbl == label:
                return p
        return None

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(lbl for lbl, _ in self.entries)

    def is_closed(self) -> bool:
        return self.tail is None


def row_canon(entries, tail: Optional[str] = None) -> RowType:
    """Canonicalise a row: sort entries by label, reject duplicates, and
    drop absent entries under a closed tail (open rows keep them, since an
    extension may still fill the label)."""
    items = list(entries)
    seen = set()
    for lbl, _ in items:
        if lbl in seen:
            raise MalformedRowError(f"duplicate label {lbl!r} in row")
        seen.add(lbl)
    if tail is None:
        items = [(lbl, p) for lbl, p in items if not isinstance(p, Absent)]
    items.sort(key=lambda e: e[0])
    return RowType(tuple(items), tail)


def row(*entries, tail: Optional[str] = None) -> RowType:
    return row_canon(entries, tail)


EMPTY_ROW = row()


def row_extend(r: RowType, extra, tail: Optional[str] = None) -> RowType:
    """Splice extra entries (and a replacement tail) onto ``r``."""
    return row_canon(list(r.entries) + list(extra), tail if r.tail is None else r.tail)


@dataclass(frozen=True, slots=True)
class CompType:
    result: ValueType
    effects: RowType


@dataclass(frozen=True, slots=True)
class HandlerType:
    input: CompType
    output: CompType


Type = Union[ValueType, Presence, RowType, CompType, HandlerType, Lin, LinVar]


# ---------------------------------------------------------------------------
# Base-type linearity table

BASE_LINEARITY: dict[str, Lin] = {
    "Unit": UNL,
    "Int": UNL,
    "String": UNL,
    "Bool": UNL,
    "File": LIN,
}


def base(name: str, declared: Optional[dict[str, Lin]] = None) -> Base:
    table = declared if declared is not None else BASE_LINEARITY
    try:
        return Base(name, table[name])
    except KeyError:
        raise KeyError(f"unknown base type {name!r}") from None


UNIT = base("Unit")
INT = base("Int")
STRING = base("String")
BOOL = base("Bool")
FILE = base("File")


# ---------------------------------------------------------------------------
# Terms

@dataclass(frozen=True, slots=True)
class Span:
    line: int
    col: int

    def __repr__(self) -> str:
        return f"{self.line}:{self.col}"


def _span_field():
    return field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class Var:
    name: str
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class Const:
    """Literal of a base type.  File constants only arise at runtime (from
    the ``open`` primitive), never in source programs."""

    base: str
    value: object
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class Prim:
    """Primitive constant.  In the explicit calculus a use may carry its
    latent effect row (the operations of the surrounding context); None
    means the empty row.  Implicit-calculus uses carry none and get a
    row-polymorphic scheme instead."""

    name: str
    row: Optional["RowType"] = None
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class Lam:
    lin: Optional[Linearity]
    var: str
    annot: Optional[ValueType]
    body: "Comp"
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class TLam:
    lin: Linearity
    tvar: str
    kind: Kind
    body: "Comp"
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class Rec:
    """Recursive function value; always unlimited."""

    fname: str
    var: str
    annot: Optional[Fun]
    body: "Comp"
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class PairV:
    left: "Value"
    right: "Value"
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class Tagged:
    """Audit-mode wrapper marking a linear value; never in source programs."""

    tag: int
    value: "Value"
    span: Optional[Span] = _span_field()


Value = Union[Var, Const, Prim, Lam, TLam, Rec, PairV, Tagged]


@dataclass(frozen=True, slots=True)
class App:
    fn: Value
    arg: Value
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class TApp:
    fn: Value
    ty: Type
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class Return:
    value: Value
    annot: Optional[RowType] = None
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class Do:
    label: str
    arg: Value
    annot: Optional[RowType] = None
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class Let:
    """Sequencing let: binds the result of a computation."""

    lin: Optional[Linearity]
    var: str
    bound: "Comp"
    body: "Comp"
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class LetVal:
    """Implicit-calculus generalising let over a value."""

    var: str
    value: Value
    body: "Comp"
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class Handler:
    ret_var: str
    ret_body: "Comp"
    clauses: tuple[tuple[str, str, str, "Comp"], ...]  # (label, p, r, body)

    def clause(self, label: str):
        for lbl, p, r, body in self.clauses:
            if lbl == label:
                return (p, r, body)
        return None

    @property
    def labels(self) -> frozenset[str]:
        return frozenset(lbl for lbl, _, _, _ in self.clauses)


@dataclass(frozen=True, slots=True)
class Handle:
    comp: "Comp"
    handler: Handler
    deep: bool = True
    out_presence: tuple[tuple[str, Presence], ...] = ()
    span: Optional[Span] = _span_field()


@dataclass(frozen=True, slots=True)
class PairElim:
    pair: Value
    left: str
    right: str
    body: "Comp"
    span: Optional[Span] = _span_field()


Comp = Union[App, TApp, Return, Do, Let, LetVal, Handle, PairElim]
Term = Union[Value, Comp]


def is_value(t: Term) -> bool:
    return isinstance(t, (Var, Const, Prim, Lam, TLam, Rec, PairV, Tagged))


# ---------------------------------------------------------------------------
# Fresh names

class NameSupply:
    """Monotone counter for generated names; generated names carry a '$'
    prefix so they can never collide with source identifiers."""

    def __init__(self, start: int = 0):
        self.counter = start

    def fresh(self, stem: str) -> str:
        self.counter += 1
        return f"${stem}{self.counter}"


_rename_supply = itertools.count(1)


def _rename(name: str) -> str:
    return f"{name}#{next(_rename_supply)}"


# ---------------------------------------------------------------------------
# Free type variables

VAL, ROW, PRES, LINCAT = "val", "row", "pres", "lin"


def ftv(t) -> set[tuple[str, str]]:
    """Free type variables of a type or term, as (category, name) pairs."""
    out: set[tuple[str, str]] = set()
    _ftv(t, out, frozenset())
    return out


def ftv_ordered(t) -> list[tuple[str, str]]:
    """Free type variables in first-occurrence order."""
    acc: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()

    def visit(x):
        for key in _iter_ftv(x, frozenset()):
            if key not in seen:
                seen.add(key)
                acc.append(key)

    visit(t)
    return acc


def _iter_ftv(t, bound) -> Iterator[tuple[str, str]]:
    out: list[tuple[str, str]] = []
    _ftv(t, out, bound)
    yield from out


def _ftv(t, out, bound) -> None:
    add = out.add if isinstance(out, set) else out.append
    match t:
        case TyVar(name):
            if (VAL, name) not in bound:
                add((VAL, name))
        case Prim(_, row):
            if row is not None:
                _ftv(row, out, bound)
        case Base() | Absent() | Lin() | Const():
            pass
        case LinVar(name):
            if (LINCAT, name) not in bound:
                add((LINCAT, name))
        case PresVar(name):
            if (PRES, name) not in bound:
                add((PRES, name))
        case Fun(param, lin, result):
            _ftv(param, out, bound)
            _ftv(lin, out, bound)
            _ftv(result, out, bound)
        case Forall(lin, var, kind, body):
            _ftv(lin, out, bound)
            _ftv(kind, out, bound)
            _ftv(body, out, bound | {(VAL, var), (ROW, var), (PRES, var)})
        case PairT(a, b):
            _ftv(a, out, bound)
            _ftv(b, out, bound)
        case Present(param, lin, result):
            _ftv(param, out, bound)
            _ftv(lin, out, bound)
            _ftv(result, out, bound)
        case RowType(entries, tail):
            for _, p in entries:
                _ftv(p, out, bound)
            if tail is not None and (ROW, tail) not in bound:
                add((ROW, tail))
        case CompType(result, effects):
            _ftv(result, out, bound)
            _ftv(effects, out, bound)
        case HandlerType(inp, outp):
            _ftv(inp, out, bound)
            _ftv(outp, out, bound)
        case TypeKind(lin) | PresenceKind(lin):
            _ftv(lin, out, bound)
        case RowKind(_, lin) | FlexRowKind(_, lin):
            _ftv(lin, out, bound)
        case EffectKind() | CompKind() | HandlerKind():
            pass
        # terms
        case Var():
            pass
        case Lam(_, _, annot, body):
            if annot is not None:
                _ftv(annot, out, bound)
            _ftv(body, out, bound)
        case TLam(_, tvar, kind, body):
            _ftv(kind, out, bound)
            _ftv(body, out, bound | {(VAL, tvar), (ROW, tvar), (PRES, tvar)})
        case Rec(_, _, annot, body):
            if annot is not None:
                _ftv(annot, out, bound)
            _ftv(body, out, bound)
        case PairV(a, b):
            _ftv(a, out, bound)
            _ftv(b, out, bound)
        case Tagged(_, v):
            _ftv(v, out, bound)
        case App(f, a):
            _ftv(f, out, bound)
            _ftv(a, out, bound)
        case TApp(f, ty):
            _ftv(f, out, bound)
            _ftv(ty, out, bound)
        case Return(v, annot):
            _ftv(v, out, bound)
            if annot is not None:
                _ftv(annot, out, bound)
        case Do(_, v, annot):
            _ftv(v, out, bound)
            if annot is not None:
                _ftv(annot, out, bound)
        case Let(_, _, m, n):
            _ftv(m, out, bound)
            _ftv(n, out, bound)
        case LetVal(_, v, m):
            _ftv(v, out, bound)
            _ftv(m, out, bound)
        case Handle(m, h, _, out_presence):
            _ftv(m, out, bound)
            _ftv(h.ret_body, out, bound)
            for _, _, _, body in h.clauses:
                _ftv(body, out, bound)
            for _, p in out_presence:
                _ftv(p, out, bound)
        case PairElim(v, _, _, m):
            _ftv(v, out, bound)
            _ftv(m, out, bound)
        case _:
            raise TypeError(f"ftv: unhandled node {t!r}")


# ---------------------------------------------------------------------------
# Type substitution

class TSubst:
    """Simultaneous, capture-avoiding type substitution with the variable
    categories kept apart."""

    def __init__(self, vals=None, rows=None, lins=None, pres=None):
        self.vals: dict[str, ValueType] = dict(vals or {})
        self.rows: dict[str, RowType] = dict(rows or {})
        self.lins: dict[str, Linearity] = dict(lins or {})
        self.pres: dict[str, Presence] = dict(pres or {})
        for name, v in self.vals.items():
            if not isinstance(v, (TyVar, Base, Fun, Forall, PairT)):
                raise SubstError(f"value variable {name} bound to non-value type {v!r}")
        for name, r in self.rows.items():
            if not isinstance(r, RowType):
                raise SubstError(f"row variable {name} bound to non-row {r!r}")
        for name, l in self.lins.items():
            if not isinstance(l, (Lin, LinVar)):
                raise SubstError(f"linearity variable {name} bound to non-linearity {l!r}")
        for name, p in self.pres.items():
            if not isinstance(p, (Absent, Present, PresVar)):
                raise SubstError(f"presence variable {name} bound to non-presence {p!r}")

    def is_identity(self) -> bool:
        return not (self.vals or self.rows or self.lins or self.pres)

    def domain(self) -> set[tuple[str, str]]:
        return (
            {(VAL, n) for n in self.vals}
            | {(ROW, n) for n in self.rows}
            | {(LINCAT, n) for n in self.lins}
            | {(PRES, n) for n in self.pres}
        )

    def range_ftv(self) -> set[tuple[str, str]]:
        out: set[tuple[str, str]] = set()
        for v in [*self.vals.values(), *self.rows.values(), *self.lins.values(), *self.pres.values()]:
            out |= ftv(v)
        return out

    def apply(self, t):
        match t:
            case TyVar(name):
                return self.vals.get(name, t)
            case Base() | Absent():
                return t
            case Lin():
                return t
            case LinVar(name):
                return self.lins.get(name, t)
            case PresVar(name):
                return self.pres.get(name, t)
            case Fun(param, lin, result):
                return Fun(self.apply(param), self.apply(lin), self.apply(result))
            case Forall(lin, var, kind, body):
                inner = self._without(var)
                if inner.range_ftv() & {(VAL, var), (ROW, var), (PRES, var)}:
                    newvar = _rename(var)
                    body = _var_to_var(var, newvar).apply(body)
                    return Forall(self.apply(lin), newvar, self.apply(kind), inner.apply(body))
                return Forall(self.apply(lin), var, self.apply(kind), inner.apply(body))
            case PairT(a, b):
                return PairT(self.apply(a), self.apply(b))
            case Present(param, lin, result):
                return Present(self.apply(param), self.apply(lin), self.apply(result))
            case RowType(entries, tail):
                new_entries = [(lbl, self.apply(p)) for lbl, p in entries]
                if tail is not None and tail in self.rows:
                    repl = self.rows[tail]
                    return row_canon(new_entries + list(repl.entries), repl.tail)
                return row_canon(new_entries, tail)
            case CompType(result, effects):
                return CompType(self.apply(result), self.apply(effects))
            case HandlerType(inp, outp):
                return HandlerType(self.apply(inp), self.apply(outp))
            case TypeKind(lin):
                return TypeKind(self.apply(lin))
            case RowKind(lacks, lin):
                return RowKind(lacks, self.apply(lin))
            case PresenceKind(lin):
                return PresenceKind(self.apply(lin))
            case EffectKind() | CompKind() | HandlerKind():
                return t
            case _:
                raise TypeError(f"TSubst.apply: unhandled node {t!r}")

    def _without(self, var: str) -> "TSubst":
        if var not in self.vals and var not in self.rows and var not in self.pres:
            return self
        return TSubst(
            {k: v for k, v in self.vals.items() if k != var},
            {k: v for k, v in self.rows.items() if k != var},
            self.lins,
            {k: v for k, v in self.pres.items() if k != var},
        )


def _var_to_var(old: str, new: str) -> TSubst:
    return TSubst(
        vals={old: TyVar(new)},
        rows={old: RowType((), new)},
        pres={old: PresVar(new)},
    )


def subst_type(t, *, vals=None, rows=None, lins=None, pres=None):
    return TSubst(vals, rows, lins, pres).apply(t)


def subst_type_in_term(term: Term, sub: TSubst) -> Term:
    """Apply a type substitution to every annotation in a term (for
    type-application reduction)."""

    def go(t):
        match t:
            case Var() | Const():
                return t
            case Prim(name, row, span=s):
                return Prim(name, sub.apply(row) if row is not None else None, span=s)
            case Lam(lin, var, annot, body, span=s):
                return Lam(lin, var, sub.apply(annot) if annot is not None else None, go(body), span=s)
            case TLam(lin, tvar, kind, body, span=s):
                if (
                    tvar in sub.vals or tvar in sub.rows or tvar in sub.pres
                ):
                    inner = sub._without(tvar)
                    return TLam(lin, tvar, inner.apply(kind), subst_type_in_term(body, inner), span=s)
                if sub.range_ftv() & {(VAL, tvar), (ROW, tvar), (PRES, tvar)}:
                    newvar = _rename(tvar)
                    body = subst_type_in_term(body, _var_to_var(tvar, newvar))
                    return TLam(lin, newvar, sub.apply(kind), subst_type_in_term(body, sub), span=s)
                return TLam(lin, tvar, sub.apply(kind), go(body), span=s)
            case Rec(f, x, annot, body, span=s):
                return Rec(f, x, sub.apply(annot) if annot is not None else None, go(body), span=s)
            case PairV(a, b, span=s):
                return PairV(go(a), go(b), span=s)
            case Tagged(tag, v, span=s):
                return Tagged(tag, go(v), span=s)
            case App(f, a, span=s):
                return App(go(f), go(a), span=s)
            case TApp(f, ty, span=s):
                return TApp(go(f), sub.apply(ty), span=s)
            case Return(v, annot, span=s):
                return Return(go(v), sub.apply(annot) if annot is not None else None, span=s)
            case Do(lbl, v, annot, span=s):
                return Do(lbl, go(v), sub.apply(annot) if annot is not None else None, span=s)
            case Let(lin, var, m, n, span=s):
                return Let(lin, var, go(m), go(n), span=s)
            case LetVal(var, v, m, span=s):
                return LetVal(var, go(v), go(m), span=s)
            case Handle(m, h, deep, outp, span=s):
                return Handle(go(m), subst_type_in_handler(h, sub), deep,
                              tuple((l, sub.apply(p)) for l, p in outp), span=s)
            case PairElim(v, x, y, m, span=s):
                return PairElim(go(v), x, y, go(m), span=s)
            case _:
                raise TypeError(f"subst_type_in_term: unhandled {t!r}")

    return go(term)


def subst_type_in_handler(h: Handler, sub: TSubst) -> Handler:
    return Handler(
        h.ret_var,
        subst_type_in_term(h.ret_body, sub),
        tuple((lbl, p, r, subst_type_in_term(body, sub)) for lbl, p, r, body in h.clauses),
    )


# ---------------------------------------------------------------------------
# Term (value) substitution

def free_vars(t: Term) -> set[str]:
    out: set[str] = set()

    def go(t, bound):
        match t:
            case Var(name):
                if name not in bound:
                    out.add(name)
            case Const() | Prim():
                pass
            case Lam(_, var, _, body):
                go(body, bound | {var})
            case TLam(_, _, _, body):
                go(body, bound)
            case Rec(f, x, _, body):
                go(body, bound | {f, x})
            case PairV(a, b):
                go(a, bound)
                go(b, bound)
            case Tagged(_, v):
                go(v, bound)
            case App(f, a):
                go(f, bound)
                go(a, bound)
            case TApp(f, _):
                go(f, bound)
            case Return(v, _):
                go(v, bound)
            case Do(_, v, _):
                go(v, bound)
            case Let(_, var, m, n):
                go(m, bound)
                go(n, bound | {var})
            case LetVal(var, v, m):
                go(v, bound)
                go(m, bound | {var})
            case Handle(m, h, _, _):
                go(m, bound)
                go(h.ret_body, bound | {h.ret_var})
                for _, p, r, body in h.clauses:
                    go(body, bound | {p, r})
            case PairElim(v, x, y, m):
                go(v, bound)
                go(m, bound | {x, y})
            case _:
                raise TypeError(f"free_vars: unhandled {t!r}")

    go(t, set())
    return out


def subst_value(term: Term, mapping: dict[str, Value]) -> Term:
    """Capture-avoiding simultaneous substitution of values for term
    variables.  Tagged wrappers in the substituted values are preserved
    verbatim."""
    if not mapping:
        return term
    range_fv: set[str] = set()
    for v in mapping.values():
        range_fv |= free_vars(v)

    def drop(mapping, names):
        m = {k: v for k, v in mapping.items() if k not in names}
        return m

    def binder(names: list[str], mapping, body):
        """Returns (renamed names, body-prepared, mapping) avoiding capture."""
        m = drop(mapping, names)
        if not m:
            return names, body, m
        clashes = [n for n in names if n in range_fv]
        if clashes:
            ren = {n: _rename(n) for n in clashes}
            body = subst_value(body, {n: Var(r) for n, r in ren.items()})
            names = [ren.get(n, n) for n in names]
        return names, body, m

    def go(t, mapping):
        if not mapping:
            return t
        match t:
            case Var(name):
                return mapping.get(name, t)
            case Const() | Prim():
                return t
            case Lam(lin, var, annot, body, span=s):
                [var2], body2, m = binder([var], mapping, body)
                return Lam(lin, var2, annot, go(body2, m), span=s)
            case TLam(lin, tvar, kind, body, span=s):
                return TLam(lin, tvar, kind, go(body, mapping), span=s)
            case Rec(f, x, annot, body, span=s):
                [f2, x2], body2, m = binder([f, x], mapping, body)
                return Rec(f2, x2, annot, go(body2, m), span=s)
            case PairV(a, b, span=s):
                return PairV(go(a, mapping), go(b, mapping), span=s)
            case Tagged(tag, v, span=s):
                return Tagged(tag, go(v, mapping), span=s)
            case App(f, a, span=s):
                return App(go(f, mapping), go(a, mapping), span=s)
            case TApp(f, ty, span=s):
                return TApp(go(f, mapping), ty, span=s)
            case Return(v, annot, span=s):
                return Return(go(v, mapping), annot, span=s)
            case Do(lbl, v, annot, span=s):
                return Do(lbl, go(v, mapping), annot, span=s)
            case Let(lin, var, m_, n, span=s):
                m_2 = go(m_, mapping)
                [var2], n2, mm = binder([var], mapping, n)
                return Let(lin, var2, m_2, go(n2, mm), span=s)
            case LetVal(var, v, m_, span=s):
                v2 = go(v, mapping)
                [var2], m2, mm = binder([var], mapping, m_)
                return LetVal(var2, v2, go(m2, mm), span=s)
            case Handle(m_, h, deep, outp, span=s):
                m2 = go(m_, mapping)
                [rv2], rb2, mret = binder([h.ret_var], mapping, h.ret_body)
                clauses = []
                for lbl, p, r, body in h.clauses:
                    [p2, r2], body2, mc = binder([p, r], mapping, body)
                    clauses.append((lbl, p2, r2, go(body2, mc)))
                return Handle(m2, Handler(rv2, go(rb2, mret), tuple(clauses)), deep, outp, span=s)
            case PairElim(v, x, y, m_, span=s):
                v2 = go(v, mapping)
                [x2, y2], m2, mm = binder([x, y], mapping, m_)
                return PairElim(v2, x2, y2, go(m2, mm), span=s)
            case _:
                raise TypeError(f"subst_value: unhandled {t!r}")

    return go(term, dict(mapping))


# ---------------------------------------------------------------------------
# Alpha equivalence

def alpha_eq(a, b) -> bool:
    """Alpha-equivalence on types and terms (spans ignored)."""
    return _aeq(a, b, {}, {})


def _aeq(a, b, env_a: dict, env_b: dict) -> bool:
    # env maps bound names to shared de-bruijn-ish indices, per side.
    if type(a) is not type(b):
        return False
    match a:
        case TyVar(na):
            nb = b.name
            return env_a.get(("t", na), ("f", na)) == env_b.get(("t", nb), ("f", nb))
        case LinVar(na):
            nb = b.name
            return env_a.get(("t", na), ("f", na)) == env_b.get(("t", nb), ("f", nb))
        case PresVar(na):
            nb = b.name
            return env_a.get(("t", na), ("f", na)) == env_b.get(("t", nb), ("f", nb))
        case Base() | Lin() | Absent():
            return a == b
        case Fun(pa, la, ra):
            return _aeq(pa, b.param, env_a, env_b) and _aeq(la, b.lin, env_a, env_b) and _aeq(ra, b.result, env_a, env_b)
        case Forall(la, va, ka, ca):
            if not _aeq(la, b.lin, env_a, env_b) or ka != b.kind:
                return False
            idx = ("b", len(env_a))
            ea = {**env_a, ("t", va): idx}
            eb = {**env_b, ("t", b.var): idx}
            return _aeq(ca, b.body, ea, eb)
        case PairT(la, ra):
            return _aeq(la, b.left, env_a, env_b) and _aeq(ra, b.right, env_a, env_b)
        case Present(pa, la, ra):
            return _aeq(pa, b.param, env_a, env_b) and _aeq(la, b.lin, env_a, env_b) and _aeq(ra, b.result, env_a, env_b)
        case RowType(ea_, ta):
            if len(ea_) != len(b.entries):
                return False
            for (l1, p1), (l2, p2) in zip(ea_, b.entries):
                if l1 != l2 or not _aeq(p1, p2, env_a, env_b):
                    return False
            tb = b.tail
            if (ta is None) != (tb is None):
                return False
            if ta is None:
                return True
            return env_a.get(("t", ta), ("f", ta)) == env_b.get(("t", tb), ("f", tb))
        case CompType(ra, ea_):
            return _aeq(ra, b.result, env_a, env_b) and _aeq(ea_, b.effects, env_a, env_b)
        case HandlerType(ia, oa):
            return _aeq(ia, b.input, env_a, env_b) and _aeq(oa, b.output, env_a, env_b)
        # terms
        case Var(na):
            nb = b.name
            return env_a.get(("v", na), ("f", na)) == env_b.get(("v", nb), ("f", nb))
        case Const(ba, va):
            return ba == b.base and va == b.value
        case Prim(na, ra):
            if na != b.name or (ra is None) != (b.row is None):
                return False
            return ra is None or _aeq(ra, b.row, env_a, env_b)
        case Lam(la, va, aa, ma):
            if la != b.lin:
                return False
            if (aa is None) != (b.annot is None):
                return False
            if aa is not None and not _aeq(aa, b.annot, env_a, env_b):
                return False
            idx = ("b", len(env_a))
            return _aeq(ma, b.body, {**env_a, ("v", va): idx}, {**env_b, ("v", b.var): idx})
        case TLam(la, ta, ka, ma):
            if la != b.lin or ka != b.kind:
                return False
            idx = ("b", len(env_a))
            return _aeq(ma, b.body, {**env_a, ("t", ta): idx}, {**env_b, ("t", b.tvar): idx})
        case Rec(fa, xa, aa, ma):
            if (aa is None) != (b.annot is None):
                return False
            if aa is not None and not _aeq(aa, b.annot, env_a, env_b):
                return False
            i1, i2 = ("b", len(env_a)), ("b", len(env_a) + 1)
            ea = {**env_a, ("v", fa): i1, ("v", xa): i2}
            eb = {**env_b, ("v", b.fname): i1, ("v", b.var): i2}
            return _aeq(ma, b.body, ea, eb)
        case PairV(la, ra):
            return _aeq(la, b.left, env_a, env_b) and _aeq(ra, b.right, env_a, env_b)
        case Tagged(ta, va):
            return ta == b.tag and _aeq(va, b.value, env_a, env_b)
        case App(fa, aa):
            return _aeq(fa, b.fn, env_a, env_b) and _aeq(aa, b.arg, env_a, env_b)
        case TApp(fa, ta):
            return _aeq(fa, b.fn, env_a, env_b) and _aeq(ta, b.ty, env_a, env_b)
        case Return(va, an):
            if (an is None) != (b.annot is None):
                return False
            if an is not None and not _aeq(an, b.annot, env_a, env_b):
                return False
            return _aeq(va, b.value, env_a, env_b)
        case Do(la, va, an):
            if la != b.label:
                return False
            if (an is None) != (b.annot is None):
                return False
            if an is not None and not _aeq(an, b.annot, env_a, env_b):
                return False
            return _aeq(va, b.arg, env_a, env_b)
        case Let(la, va, ma, na):
            if la != b.lin or not _aeq(ma, b.bound, env_a, env_b):
                return False
            idx = ("b", len(env_a))
            return _aeq(na, b.body, {**env_a, ("v", va): idx}, {**env_b, ("v", b.var): idx})
        case LetVal(va, wa, ma):
            if not _aeq(wa, b.value, env_a, env_b):
                return False
            idx = ("b", len(env_a))
            return _aeq(ma, b.body, {**env_a, ("v", va): idx}, {**env_b, ("v", b.var): idx})
        case Handle(ma, ha, da, oa):
            if da != b.deep or len(oa) != len(b.out_presence):
                return False
            for (l1, p1), (l2, p2) in zip(oa, b.out_presence):
                if l1 != l2 or not _aeq(p1, p2, env_a, env_b):
                    return False
            if not _aeq(ma, b.comp, env_a, env_b):
                return False
            hb = b.handler
            if [l for l, *_ in ha.clauses] != [l for l, *_ in hb.clauses]:
                return False
            idx = ("b", len(env_a))
            if not _aeq(ha.ret_body, hb.ret_body,
                        {**env_a, ("v", ha.ret_var): idx}, {**env_b, ("v", hb.ret_var): idx}):
                return False
            for (l1, p1, r1, m1), (l2, p2, r2, m2) in zip(ha.clauses, hb.clauses):
                i1, i2 = ("b", len(env_a)), ("b", len(env_a) + 1)
                ea = {**env_a, ("v", p1): i1, ("v", r1): i2}
                eb = {**env_b, ("v", p2): i1, ("v", r2): i2}
                if not _aeq(m1, m2, ea, eb):
                    return False
            return True
        case PairElim(va, xa, ya, ma):
            if not _aeq(va, b.pair, env_a, env_b):
                return False
            i1, i2 = ("b", len(env_a)), ("b", len(env_a) + 1)
            ea = {**env_a, ("v", xa): i1, ("v", ya): i2}
            eb = {**env_b, ("v", b.left): i1, ("v", b.right): i2}
            return _aeq(ma, b.body, ea, eb)
        case _:
            raise TypeError(f"alpha_eq: unhandled {a!r}")


# ---------------------------------------------------------------------------
# Calculus validity

class CalculusError(Exception):
    pass


def validate_calculus(term: Term, calculus: str) -> None:
    """Reject terms mixing explicit and implicit forms.

    'feff': all linearity/type/row annotations mandatory; no LetVal.
    'qeff': no annotations, no TLam/TApp; LetVal allowed.
    """
    explicit = calculus == "feff"
    if calculus not in ("feff", "qeff"):
        raise ValueError(f"unknown calculus {calculus!r}")

    def need(cond: bool, msg: str, span) -> None:
        if not cond:
            where = f" at {span}" if span else ""
            raise CalculusError(f"{calculus}: {msg}{where}")

    def go(t):
        match t:
            case Var() | Const():
                pass
            case Prim(_, row, span=s):
                need(row is None or explicit, "primitive effect-row annotation", s)
            case Tagged():
                raise CalculusError("Tagged values may not appear in source programs")
            case Lam(lin, _, annot, body, span=s):
                need((lin is not None) == explicit, "lambda linearity annotation", s)
                need((annot is not None) == explicit, "lambda parameter type annotation", s)
                go(body)
            case TLam(_, _, _, body, span=s):
                need(explicit, "type abstraction is explicit-calculus only", s)
                go(body)
            case Rec(_, _, annot, body, span=s):
                need((annot is not None) == explicit, "rec type annotation", s)
                go(body)
            case PairV(a, b):
                go(a)
                go(b)
            case App(f, a):
                go(f)
                go(a)
            case TApp(f, _, span=s):
                need(explicit, "type application is explicit-calculus only", s)
                go(f)
            case Return(v, annot, span=s):
                need((annot is not None) == explicit, "return effect annotation", s)
                go(v)
            case Do(_, v, annot, span=s):
                need((annot is not None) == explicit, "do effect annotation", s)
                go(v)
            case Let(lin, _, m, n, span=s):
                need((lin is not None) == explicit, "let linearity annotation", s)
                go(m)
                go(n)
            case LetVal(_, v, m, span=s):
                need(not explicit, "generalising let is implicit-calculus only", s)
                go(v)
                go(m)
            case Handle(m, h, _, _):
                go(m)
                go(h.ret_body)
                for _, _, _, body in h.clauses:
                    go(body)
            case PairElim(v, _, _, m):
                go(v)
                go(m)
            case _:
                raise TypeError(f"validate_calculus: unhandled {t!r}")

    go(term)


def erase_tags(term: Term) -> Term:
    """Strip every Tagged wrapper (audit-mode erasure)."""
    match term:
        case Tagged(_, v):
            return erase_tags(v)
        case Var() | Const() | Prim():
            return term
        case Lam() as l:
            return replace(l, body=erase_tags(l.body))
        case TLam() as l:
            return replace(l, body=erase_tags(l.body))
        case Rec() as r:
            return replace(r, body=erase_tags(r.body))
        case PairV(a, b, span=s):
            return PairV(erase_tags(a), erase_tags(b), span=s)
        case App(f, a, span=s):
            return App(erase_tags(f), erase_tags(a), span=s)
        case TApp(f, ty, span=s):
            return TApp(erase_tags(f), ty, span=s)
        case Return() as r:
            return replace(r, value=erase_tags(r.value))
        case Do() as d:
            return replace(d, arg=erase_tags(d.arg))
        case Let() as l:
            return replace(l, bound=erase_tags(l.bound), body=erase_tags(l.body))
        case LetVal() as l:
            return replace(l, value=erase_tags(l.value), body=erase_tags(l.body))
        case Handle() as h:
            handler = Handler(
                h.handler.ret_var,
                erase_tags(h.handler.ret_body),
                tuple((lbl, p, r, erase_tags(body)) for lbl, p, r, body in h.handler.clauses),
            )
            return replace(h, comp=erase_tags(h.comp), handler=handler)
        case PairElim() as p:
            return replace(p, pair=erase_tags(p.pair), body=erase_tags(p.body))
        case _:
            raise TypeError(f"erase_tags: unhandled {term!r}")
