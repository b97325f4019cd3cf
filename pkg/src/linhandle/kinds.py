"""Kinding, subkinding, context linearity and context splitting for the
explicit calculus.

The paper-style kinding is non-deterministic through upcasting; here every
type gets a principal (least) kind and ``kind_check`` compares it with the
goal under subkinding, which makes kinding syntax-directed and lets a
brute-force derivability oracle cross-check it.

Value kinds order unlimited below linear; presence and row kinds order the
other way around (it is always safe to use a control-flow-linear operation
in an unlimited context, never the reverse).
"""

from __future__ import annotations

from typing import Optional

from .syntax import (
    Absent,
    Base,
    CompType,
    COMP_KIND,
    CompKind,
    EffectKind,
    FlexRowKind,
    Forall,
    Fun,
    HANDLER_KIND,
    HandlerKind,
    HandlerType,
    Kind,
    LIN,
    Lin,
    LinVar,
    PairT,
    Present,
    PresVar,
    PresenceKind,
    RowKind,
    RowType,
    TyVar,
    TypeKind,
    UNL,
    ValueType,
    lin_le,
    lin_join_value,
)


class KindError(Exception):
    pass


KindContext = dict[str, Kind]
TypeContext = dict[str, ValueType]


def _need_concrete(y, what: str) -> Lin:
    if isinstance(y, LinVar):
        raise KindError(f"linearity variable {y.name} not allowed in {what}")
    return y


def subkind(k1: Kind, k2: Kind) -> bool:
    """Derivability of k1 <= k2: Type covariant in linearity, Presence and
    Row contravariant; Row kinds must agree on their lacks-sets."""
    match (k1, k2):
        case (TypeKind(a), TypeKind(b)):
            return lin_le(_need_concrete(a, "subkind"), _need_concrete(b, "subkind"))
        case (PresenceKind(a), PresenceKind(b)):
            return lin_le(_need_concrete(b, "subkind"), _need_concrete(a, "subkind"))
        case (RowKind(la, a), RowKind(lb, b)):
            return la == lb and lin_le(_need_concrete(b, "subkind"), _need_concrete(a, "subkind"))
        case (FlexRowKind(dom, a), RowKind(lb, b)):
            # Principal kind of a closed row: kindable at any disjoint lacks-set.
            return not (dom & lb) and lin_le(_need_concrete(b, "subkind"), _need_concrete(a, "subkind"))
        case (FlexRowKind(da, a), FlexRowKind(db, b)):
            return da == db and lin_le(_need_concrete(b, "subkind"), _need_concrete(a, "subkind"))
        case (EffectKind(), EffectKind()) | (CompKind(), CompKind()) | (HandlerKind(), HandlerKind()):
            return True
    return False


def _row_join(a: Lin, b: Lin) -> Lin:
    # Row/presence order puts LIN at the bottom; the join keeps UNL if
    # either part forces it.
    return UNL if (not a.linear or not b.linear) else LIN


def principal_kind(delta: KindContext, t) -> Kind:
    """Least kind of ``t`` under ``delta``; also validates well-formedness
    (unbound variables, duplicate row labels / label-set clashes)."""
    match t:
        case TyVar(name) | PresVar(name):
            try:
                return delta[name]
            except KeyError:
                raise KindError(f"unbound type variable {name}") from None
        case Base(_, lin):
            return TypeKind(lin)
        case Fun(param, lin, result):
            pk = principal_kind(delta, param)
            if not isinstance(pk, TypeKind):
                raise KindError(f"function parameter is not a value type: {param!r}")
            ck = principal_kind(delta, result)
            if not isinstance(ck, CompKind):
                raise KindError("function result is not a computation type")
            return TypeKind(_need_concrete(lin, "function type"))
        case Forall(lin, var, kind, body):
            inner = dict(delta)
            inner[var] = kind
            ck = principal_kind(inner, body)
            if not isinstance(ck, CompKind):
                raise KindError("forall body is not a computation type")
            return TypeKind(_need_concrete(lin, "forall type"))
        case PairT(a, b):
            ka, kb = principal_kind(delta, a), principal_kind(delta, b)
            if not isinstance(ka, TypeKind) or not isinstance(kb, TypeKind):
                raise KindError("pair components must be value types")
            return TypeKind(lin_join_value(
                _need_concrete(ka.lin, "pair"), _need_concrete(kb.lin, "pair")))
        case Absent():
            return PresenceKind(LIN)  # least in the presence order
        case Present(param, lin, result):
            for side in (param, result):
                k = principal_kind(delta, side)
                if not isinstance(k, TypeKind):
                    raise KindError("operation signature sides must be value types")
            return PresenceKind(_need_concrete(lin, "operation signature"))
        case RowType(entries, tail):
            lin = LIN  # least row linearity
            for _, p in entries:
                pk = principal_kind(delta, p)
                if not isinstance(pk, PresenceKind):
                    raise KindError("row entry is not a presence type")
                lin = _row_join(lin, _need_concrete(pk.lin, "row"))
            dom = frozenset(lbl for lbl, _ in entries)
            if tail is None:
                return FlexRowKind(dom, lin)
            tk = delta.get(tail)
            if tk is None:
                raise KindError(f"unbound row variable {tail}")
            if not isinstance(tk, RowKind):
                raise KindError(f"row tail {tail} does not have a row kind")
            if not dom <= tk.lacks:
                clash = sorted(dom - tk.lacks)
                raise KindError(f"label-set clash: row variable {tail} may already contain {clash}")
            lin = _row_join(lin, _need_concrete(tk.lin, "row"))
            return RowKind(tk.lacks - dom, lin)
        case CompType(result, effects):
            rk = principal_kind(delta, result)
            if not isinstance(rk, TypeKind):
                raise KindError("computation result is not a value type")
            ek = principal_kind(delta, effects)
            # K-Effect: effect rows must be kindable with an empty lacks-set.
            if isinstance(ek, RowKind) and ek.lacks:
                raise KindError(
                    f"effect row leaves labels unaccounted for: {sorted(ek.lacks)}")
            return COMP_KIND
        case HandlerType(inp, outp):
            for side in (inp, outp):
                if not isinstance(principal_kind(delta, side), CompKind):
                    raise KindError("handler type sides must be computation types")
            return HANDLER_KIND
    raise KindError(f"principal_kind: not a type: {t!r}")


def kind_check(delta: KindContext, t, k: Kind) -> bool:
    return subkind(principal_kind(delta, t), k)


def value_linearity(delta: KindContext, a: ValueType) -> Lin:
    k = principal_kind(delta, a)
    if not isinstance(k, TypeKind):
        raise KindError(f"not a value type: {a!r}")
    return _need_concrete(k.lin, "value linearity")


def is_linear(delta: KindContext, a: ValueType) -> bool:
    return value_linearity(delta, a).linear


def ctx_linearity(delta: KindContext, gamma: TypeContext, y: Lin) -> bool:
    """All bindings kindable at Type y; linear y is a tautology."""
    return all(kind_check(delta, a, TypeKind(y)) for a in gamma.values())


def row_linearity_check(delta: KindContext, r: RowType, y: Lin) -> bool:
    """All operations in r kindable at Row y; unlimited y is a tautology."""
    k = principal_kind(delta, r)
    lacks = k.lacks if isinstance(k, RowKind) else frozenset()
    return subkind(k, RowKind(lacks, y))


class SplitError(Exception):
    pass


def split_infer(
    delta: KindContext,
    gamma: TypeContext,
    left_uses: set[str],
    right_uses: set[str],
) -> tuple[TypeContext, TypeContext]:
    """Realise the context-splitting judgement from use-sets: unlimited
    bindings are copied to both sides, each linear binding goes to the side
    that uses it, and a linear binding used on both sides is a duplication
    error.  Linear bindings used on neither side are left out; consumption
    is the caller's (binder-scope) check."""
    g1: TypeContext = {}
    g2: TypeContext = {}
    for x, a in gamma.items():
        if is_linear(delta, a):
            if x in left_uses and x in right_uses:
                raise SplitError(f"linear variable {x} used more than once")
            if x in left_uses:
                g1[x] = a
            elif x in right_uses:
                g2[x] = a
        else:
            g1[x] = a
            g2[x] = a
    return g1, g2


def split_valid(delta: KindContext, gamma: TypeContext, g1: TypeContext, g2: TypeContext) -> bool:
    """Declarative check that gamma = g1 + g2."""
    for x, a in gamma.items():
        if is_linear(delta, a):
            if not ((x in g1 and g1[x] == a) ^ (x in g2 and g2[x] == a)):
                if x in g1 or x in g2:
                    return False
        else:
            if g1.get(x) != a or g2.get(x) != a:
                return False
    extra = (set(g1) | set(g2)) - set(gamma)
    return not extra
