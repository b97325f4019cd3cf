"""Syntax-directed type checking for the explicit calculus.

Context splitting is usage-directed: used-variable sets (restricted to
linear bindings) are computed bottom-up, duplication is rejected at merge
points, and consumption is enforced at binder scopes.  This makes the
declarative splitting rules algorithmic; ``kinds.split_infer`` re-validates
the realised splits.

``seq_sub`` switches sequencing from exact effect-row equality to the
trivial row subtyping refinement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import kinds
from .kinds import KindContext, TypeContext, KindError, kind_check, principal_kind
from .prims import PRIM_TYPES
from .pretty import pretty, pretty_type
from .syntax import (
    ABSENT,
    Absent,
    App,
    BASE_LINEARITY,
    Base,
    CompType,
    Const,
    Do,
    Forall,
    Fun,
    Handle,
    Handler,
    HandlerType,
    LIN,
    Lam,
    Let,
    LetVal,
    Lin,
    PairElim,
    PairT,
    PairV,
    Present,
    PresVar,
    Prim,
    Rec,
    Return,
    RowKind,
    RowType,
    Span,
    TApp,
    TLam,
    TSubst,
    Tagged,
    Term,
    TyVar,
    TypeKind,
    UNL,
    Value,
    ValueType,
    Var,
    alpha_eq,
    ftv,
    is_value,
    row_canon,
)


@dataclass
class Diagnostic:
    rule: str
    message: str
    span: Optional[Span] = None
    expected: Optional[str] = None
    actual: Optional[str] = None

    def render(self) -> str:
        loc = f" at {self.span}" if self.span else ""
        extra = ""
        if self.expected is not None:
            extra = f" (expected {self.expected}, got {self.actual})"
        return f"[{self.rule}]{loc}: {self.message}{extra}"

    def to_json(self):
        return {
            "rule": self.rule,
            "message": self.message,
            "span": str(self.span) if self.span else None,
            "expected": self.expected,
            "actual": self.actual,
        }


class CheckError(Exception):
    def __init__(self, diag: Diagnostic):
        super().__init__(diag.render())
        self.diag = diag


def _err(rule, message, span=None, expected=None, actual=None):
    raise CheckError(Diagnostic(rule, message, span, expected, actual))


@dataclass
class CheckResult:
    type: object
    used_linear: frozenset[str]


def _is_linear(delta, a) -> bool:
    try:
        return kinds.is_linear(delta, a)
    except KindError as e:
        _err("K-WellFormed", str(e))


def _merge(delta, gamma, u1: frozenset, u2: frozenset, span, rule) -> frozenset:
    dup = u1 & u2
    if dup:
        x = sorted(dup)[0]
        _err(rule, f"linear variable {x} used more than once", span)
    # Re-validate the realised split against the declarative judgement.
    kinds.split_infer(delta, gamma, set(u1), set(u2))
    return u1 | u2


def _consume(delta, x: str, a: ValueType, used: frozenset, span, rule) -> frozenset:
    if _is_linear(delta, a) and x not in used:
        _err(rule, f"linear variable {x} is never used", span)
    return used - {x}


def _no_linear_capture(used: frozenset, span, rule, what: str):
    if used:
        x = sorted(used)[0]
        _err(rule, f"{what} captures linear variable {x}", span)


def check_value(delta: KindContext, gamma: TypeContext, v: Value, *, seq_sub: bool = False):
    """Synthesize the type of a value; returns (ValueType, used linear vars)."""
    match v:
        case Var(name, span=s):
            if name not in gamma:
                _err("T-Var", f"unbound variable {name}", s)
            a = gamma[name]
            used = frozenset({name}) if _is_linear(delta, a) else frozenset()
            return a, used
        case Const(b, _, span=s):
            if b not in BASE_LINEARITY:
                _err("T-Const", f"unknown base type {b}", s)
            return Base(b, BASE_LINEARITY[b]), frozenset()
        case Prim(name, prow, span=s):
            if name not in PRIM_TYPES:
                _err("T-Prim", f"unknown primitive {name}", s)
            from .prims import prim_type

            ty = prim_type(name, prow)
            try:
                principal_kind(delta, ty)
            except KindError as e:
                _err("T-Prim", f"ill-formed primitive effect annotation: {e}", s)
            return ty, frozenset()
        case Tagged(_, inner):
            # Typing ignores linear tags.
            return check_value(delta, gamma, inner, seq_sub=seq_sub)
        case Lam(lin, x, annot, body, span=s):
            if lin is None or annot is None:
                _err("T-Abs", "explicit calculus requires annotations on lambda", s)
            if not isinstance(principal_kind(delta, annot), TypeKind):
                _err("T-Abs", f"parameter annotation is not a value type", s)
            inner = dict(gamma)
            inner[x] = annot
            c, used = check_comp(delta, inner, body, seq_sub=seq_sub)
            used = _consume(delta, x, annot, used, s, "T-Abs")
            if lin == UNL:
                _no_linear_capture(used, s, "T-Abs", "unlimited function")
            return Fun(annot, lin, c), used
        case TLam(lin, tvar, kind, body, span=s):
            if any(tvar == n for _, n in _ctx_ftv(gamma)):
                _err("T-TAbs", f"type variable {tvar} already free in the context", s)
            inner_delta = dict(delta)
            inner_delta[tvar] = kind
            c, used = check_comp(inner_delta, gamma, body, seq_sub=seq_sub)
            if lin == UNL:
                _no_linear_capture(used, s, "T-TAbs", "unlimited type abstraction")
            return Forall(lin, tvar, kind, c), used
        case Rec(f, x, annot, body, span=s):
            if annot is None:
                _err("T-Rec", "recursive function requires a type annotation", s)
            if not isinstance(annot, Fun) or annot.lin != UNL:
                _err("T-Rec", "recursive functions are unlimited: annotation must be an ->! type", s,
                     expected="A ->! C", actual=pretty_type(annot))
            inner = dict(gamma)
            inner[f] = annot
            inner[x] = annot.param
            c, used = check_comp(delta, inner, body, seq_sub=seq_sub)
            used = _consume(delta, x, annot.param, used, s, "T-Rec")
            used = used - {f}
            if not alpha_eq(c, annot.result):
                _err("T-Rec", "recursive function body does not match its annotation", s,
                     expected=pretty_type(annot.result), actual=pretty_type(c))
            _no_linear_capture(used, s, "T-Rec", "recursive function")
            return annot, used
        case PairV(a, b, span=s):
            ta, ua = check_value(delta, gamma, a, seq_sub=seq_sub)
            tb, ub = check_value(delta, gamma, b, seq_sub=seq_sub)
            used = _merge(delta, gamma, ua, ub, s, "T-Pair")
            return PairT(ta, tb), used
    _err("T-Value", f"not a value: {pretty(v)}", getattr(v, "span", None))


def _ctx_ftv(gamma: TypeContext):
    out = set()
    for a in gamma.values():
        out |= ftv(a)
    return out


def check_comp(delta: KindContext, gamma: TypeContext, m: Term, *, seq_sub: bool = False):
    """Synthesize the computation type of m; returns (CompType, used)."""
    match m:
        case App(f, a, span=s):
            tf, uf = check_value(delta, gamma, f, seq_sub=seq_sub)
            if not isinstance(tf, Fun):
                _err("T-App", "application of a non-function", s,
                     expected="function type", actual=pretty_type(tf))
            ta, ua = check_value(delta, gamma, a, seq_sub=seq_sub)
            if not alpha_eq(ta, tf.param):
                _err("T-App", "argument type mismatch", s,
                     expected=pretty_type(tf.param), actual=pretty_type(ta))
            used = _merge(delta, gamma, uf, ua, s, "T-App")
            return tf.result, used
        case TApp(f, ty, span=s):
            tf, uf = check_value(delta, gamma, f, seq_sub=seq_sub)
            if not isinstance(tf, Forall):
                _err("T-TApp", "type application of a non-polymorphic value", s,
                     expected="forall type", actual=pretty_type(tf))
            if not kind_check(delta, ty, tf.kind):
                _err("T-TApp", "type argument does not fit the quantifier kind", s,
                     expected=str(tf.kind), actual=pretty_type(ty))
            sub = _binding_subst(tf.var, tf.kind, ty)
            return sub.apply(tf.body), uf
        case Return(v, annot, span=s):
            if annot is None:
                _err("T-Return", "explicit calculus requires an effect annotation on return", s)
            tv, uv = check_value(delta, gamma, v, seq_sub=seq_sub)
            c = CompType(tv, annot)
            _well_formed_comp(delta, c, s, "T-Return")
            return c, uv
        case Do(lbl, v, annot, span=s):
            if annot is None:
                _err("T-Do", "explicit calculus requires an effect annotation on do", s)
            p = annot.presence(lbl)
            if not isinstance(p, Present):
                _err("T-Do", f"operation {lbl} is not present in the annotated row", s,
                     actual=pretty_type(annot))
            tv, uv = check_value(delta, gamma, v, seq_sub=seq_sub)
            if not alpha_eq(tv, p.param):
                _err("T-Do", f"operation {lbl} parameter type mismatch", s,
                     expected=pretty_type(p.param), actual=pretty_type(tv))
            c = CompType(p.result, annot)
            _well_formed_comp(delta, c, s, "T-Do")
            return c, uv
        case Let(lin, x, bound, body, span=s):
            if lin is None:
                _err("T-Seq", "explicit calculus requires a linearity annotation on let", s)
            cm, um = check_comp(delta, gamma, bound, seq_sub=seq_sub)
            inner = dict(gamma)
            inner[x] = cm.result
            cn, un = check_comp(delta, inner, body, seq_sub=seq_sub)
            un = _consume(delta, x, cm.result, un, s, "T-Seq")
            # Control-flow linearity: the continuation's used linear portion
            # must fit Y, and the bound computation's row must be kindable
            # at Row Y.
            if lin == UNL and un:
                xbad = sorted(un)[0]
                _err("T-Seq", f"linear variable {xbad} used in a control-flow-unlimited continuation (let!)", s)
            if not kinds.row_linearity_check(delta, cm.effects, lin):
                _err("T-Seq", "bound computation's effect row is not kindable at the let's linearity", s,
                     expected=f"Row {pretty_type(lin)}", actual=pretty_type(cm.effects))
            used = _merge(delta, gamma, um, un, s, "T-Seq")
            if seq_sub:
                rule = "T-SeqSub"
                joined = _row_join_sub(delta, cm.effects, cn.effects, s, rule)
                return CompType(cn.result, joined), used
            if cm.effects != cn.effects:
                _err("T-Seq", "sequenced computations must have equal effect rows", s,
                     expected=pretty_type(cm.effects), actual=pretty_type(cn.effects))
            return CompType(cn.result, cm.effects), used
        case Handle(comp, handler, deep, out_presence, span=s):
            cm, um = check_comp(delta, gamma, comp, seq_sub=seq_sub)
            ht, uh = check_handler(delta, gamma, handler, cm, deep=deep,
                                   out_presence=dict(out_presence), seq_sub=seq_sub)
            used = _merge(delta, gamma, um, uh, s, "T-Handle")
            return ht.output, used
        case PairElim(v, x, y, body, span=s):
            tv, uv = check_value(delta, gamma, v, seq_sub=seq_sub)
            if not isinstance(tv, PairT):
                _err("T-PairElim", "pair elimination of a non-pair value", s,
                     expected="pair type", actual=pretty_type(tv))
            inner = dict(gamma)
            inner[x] = tv.left
            inner[y] = tv.right
            cn, un = check_comp(delta, inner, body, seq_sub=seq_sub)
            un = _consume(delta, y, tv.right, un, s, "T-PairElim")
            un = _consume(delta, x, tv.left, un, s, "T-PairElim")
            used = _merge(delta, gamma, uv, un, s, "T-PairElim")
            return cn, used
        case LetVal(_, _, _, span=s):
            _err("T-LetVal", "generalising let is not part of the explicit calculus", s)
    if is_value(m):
        _err("T-Comp", f"a value is not a computation: {pretty(m)}", getattr(m, "span", None))
    _err("T-Comp", f"not a computation: {m!r}", getattr(m, "span", None))


def _binding_subst(var: str, kind, ty) -> TSubst:
    from .syntax import PresenceKind

    match kind:
        case TypeKind():
            return TSubst(vals={var: ty})
        case RowKind():
            return TSubst(rows={var: ty})
        case PresenceKind():
            return TSubst(pres={var: ty})
    raise KindError(f"cannot instantiate quantifier of kind {kind!r}")


def _well_formed_comp(delta, c: CompType, span, rule):
    try:
        principal_kind(delta, c)
    except KindError as e:
        _err(rule, f"ill-formed computation type: {e}", span)


def _row_join_sub(delta, r1: RowType, r2: RowType, span, rule) -> RowType:
    """Least common supertype of two rows under trivial row subtyping."""
    if r1.tail is not None and r2.tail is not None and r1.tail != r2.tail:
        _err(rule, "rows with different row variables have no common supertype", span,
             expected=pretty_type(r1), actual=pretty_type(r2))
    tail = r1.tail if r1.tail is not None else r2.tail
    entries = dict(r1.entries)
    for lbl, p in r2.entries:
        if lbl in entries:
            here = entries[lbl]
            if isinstance(here, Absent):
                entries[lbl] = p
            elif isinstance(p, Absent):
                pass
            elif here != p:
                _err(rule, f"operation {lbl} has conflicting signatures in sequenced rows", span,
                     expected=pretty_type(here), actual=pretty_type(p))
        else:
            entries[lbl] = p
    joined = row_canon(entries.items(), tail)
    k1 = row_subtype(delta, r1, joined)
    k2 = row_subtype(delta, r2, joined)
    if k1 is None or k2 is None:
        _err(rule, "sequenced rows do not embed into their join", span)
    return joined


def row_subtype(delta: KindContext, r1: RowType, r2: RowType):
    """Trivial row subtyping: every present entry of r1 appears in r2 with
    the identical signature, and an open r1 requires the same tail in r2.
    Returns a witnessing kind (the least kind both rows inhabit), or None."""
    if r1.tail is not None and r1.tail != r2.tail:
        return None
    for lbl, p in r1.entries:
        if isinstance(p, Absent):
            continue
        q = r2.presence(lbl)
        if q is None or q != p:
            return None
    try:
        k1 = principal_kind(delta, r1)
        k2 = principal_kind(delta, r2)
    except KindError:
        return None
    lin = UNL if (not k1.lin.linear or not k2.lin.linear) else LIN
    lacks = k2.lacks if isinstance(k2, RowKind) else frozenset()
    return RowKind(lacks, lin)


def check_handler(
    delta: KindContext,
    gamma: TypeContext,
    h: Handler,
    input_c: CompType,
    *,
    deep: bool = True,
    out_presence: Optional[dict] = None,
    seq_sub: bool = False,
):
    """Check a handler against the computation type it handles; returns
    (HandlerType, used)."""
    out_presence = out_presence or {}
    in_row = input_c.effects
    sigs = {}
    for lbl, p, r, body in h.clauses:
        pres = in_row.presence(lbl)
        if not isinstance(pres, Present):
            _err("T-Handler", f"handled operation {lbl} is not present in the input row",
                 actual=pretty_type(in_row))
        sigs[lbl] = pres
    rest = row_canon([(lbl, p) for lbl, p in in_row.entries if lbl not in sigs], in_row.tail)

    # Output computation type comes from the return clause; handled labels
    # must reappear at their ascribed presence (default absent).
    ret_ctx = dict(gamma)
    ret_ctx[h.ret_var] = input_c.result
    d0, used_ret = check_comp(delta, ret_ctx, h.ret_body, seq_sub=seq_sub)
    used_ret = _consume(delta, h.ret_var, input_c.result, used_ret, None, "T-Handler")
    expected_entries = list(rest.entries) + [
        (lbl, out_presence.get(lbl, ABSENT)) for lbl in sigs
    ]
    expected_row = row_canon(expected_entries, rest.tail)
    if d0.effects != expected_row:
        _err("T-Handler", "return clause's effect row does not match the handler output row",
             expected=pretty_type(expected_row), actual=pretty_type(d0.effects))

    resume_target = d0 if deep else input_c
    used_sets = [used_ret]
    for lbl, p, r, body in h.clauses:
        sig = sigs[lbl]
        ctx = dict(gamma)
        ctx[p] = sig.param
        ctx[r] = Fun(sig.result, sig.lin, resume_target)
        rule = "T-Handler" if deep else "T-ShallowHandler"
        try:
            di, ui = check_comp(delta, ctx, body, seq_sub=seq_sub)
        except CheckError as e:
            # Resumption-linearity violations surface as the handler's fault.
            if sig.lin == LIN and f" {r} " in f" {e.diag.message} ":
                _err(rule, f"linear resumption {r} for {lbl}: {e.diag.message}", e.diag.span)
            raise
        if sig.lin == LIN and r not in ui:
            _err(rule, f"linear resumption {r} for {lbl} is never used")
        ui = _consume(delta, r, ctx[r], ui, None, rule)
        ui = _consume(delta, p, sig.param, ui, None, rule)
        if not alpha_eq(di, d0):
            _err(rule, f"operation clause {lbl} does not match the handler output type",
                 expected=pretty_type(d0), actual=pretty_type(di))
        used_sets.append(ui)

    # Exactly one clause runs, so all clauses must consume the same linear set.
    used = used_sets[0]
    for ui in used_sets[1:]:
        if ui != used:
            diff = sorted(used ^ ui)[0]
            _err("T-Handler" if deep else "T-ShallowHandler",
                 f"linear variable {diff} is consumed by some handler clauses but not all")
    if deep:
        _no_linear_capture(used, None, "T-Handler", "deep handler")
    else:
        # Context linearity must coincide with the control-flow linearity of
        # the unhandled row: a linear capture forces the rest row linear.
        if used and not kinds.row_linearity_check(delta, rest, LIN):
            _err("T-ShallowHandler",
                 "shallow handler captures linear variables but the unhandled row is not control-flow linear",
                 actual=pretty_type(rest))
    return HandlerType(input_c, d0), used


def check_rec(delta: KindContext, gamma: TypeContext, r: Rec, *, seq_sub: bool = False):
    t, used = check_value(delta, gamma, r, seq_sub=seq_sub)
    return t, used


def check_term(delta: KindContext, gamma: TypeContext, t: Term, *, seq_sub: bool = False):
    if is_value(t):
        return check_value(delta, gamma, t, seq_sub=seq_sub)
    return check_comp(delta, gamma, t, seq_sub=seq_sub)


def check_program(term: Term, *, seq_sub: bool = False, delta: Optional[KindContext] = None):
    """Check a closed program; returns its synthesized type."""
    ty, used = check_term(delta or {}, {}, term, seq_sub=seq_sub)
    return ty
