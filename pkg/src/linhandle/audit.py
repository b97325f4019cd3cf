"""Linearity-aware semantics and the run auditor.

Values are tagged with globally fresh integer ids the first time they are
bound, provided they are genuinely linear (not merely upcast).  Each step
reports the multisets of tags introduced and eliminated; the auditor checks
the per-step balance  TL(M) ∪ S = TL(N) ∪ T  and that linear safety is
preserved, so a run certifies that no linear value was discarded or
duplicated.

Tag identity (not value equality) is what the balance equation compares:
duplicating a captured continuation duplicates every tag inside it, and the
imbalance is visible immediately.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from . import semantics
from .check import CheckError, check_value
from .prims import DeltaError, delta as prim_delta
from .pretty import pretty
from .semantics import (
    Frame,
    HandleFrame,
    LetFrame,
    NormalOp,
    NormalReturn,
    OutOfFuel,
    Stepped,
    Stuck,
    bound_labels,
    decompose,
    plug,
)
from .syntax import (
    App,
    BASE_LINEARITY,
    Comp,
    Const,
    Do,
    Handle,
    Handler,
    LIN,
    Lam,
    Let,
    LetVal,
    PairElim,
    PairV,
    Present,
    Prim,
    Rec,
    Return,
    TApp,
    TLam,
    Tagged,
    Term,
    UNL,
    Value,
    Var,
    erase_tags,
    free_vars,
    is_value,
    subst_type_in_term,
    subst_value,
)


class AuditError(Exception):
    pass


class AuditInapplicable(AuditError):
    """A value the auditor must classify does not typecheck (typed mode)."""


_lin_cache: dict[Term, bool] = {}


def lin_value(v: Value, *, untyped: bool = False) -> bool:
    """True iff the closed value is genuinely linear: its synthesized type's
    principal kind is not unlimited.  Tags are transparent to typing.  In
    untyped mode, values that fail to typecheck fall back to their syntactic
    linearity (annotation / base table / pair join)."""
    stripped = erase_tags(v)
    if stripped in _lin_cache:
        return _lin_cache[stripped]
    try:
        from .kinds import is_linear

        ty, _ = check_value({}, {}, stripped)
        out = is_linear({}, ty)
    except CheckError as e:
        if not untyped:
            raise AuditInapplicable(f"value does not typecheck: {e}") from None
        out = _syntactic_lin(stripped)
    _lin_cache[stripped] = out
    return out


def _syntactic_lin(v: Value) -> bool:
    match v:
        case Const(b, _):
            return BASE_LINEARITY.get(b, UNL).linear
        case Prim(_) | Rec():
            return False
        case Lam(lin):
            return lin == LIN
        case TLam(lin):
            return lin == LIN
        case PairV(a, b):
            return _syntactic_lin(a) or _syntactic_lin(b)
        case Tagged(_, inner):
            return True
    return False


_tag_supply = itertools.count(1)


def reset_tags(start: int = 0) -> None:
    global _tag_supply
    _tag_supply = itertools.count(start + 1)


def tag_value(v: Value, *, untyped: bool = False) -> tuple[Value, Counter]:
    """Tag a genuinely linear, not-yet-tagged value with a fresh id."""
    if isinstance(v, Tagged):
        return v, Counter()
    if lin_value(v, untyped=untyped):
        t = next(_tag_supply)
        return Tagged(t, v), Counter({t: 1})
    return v, Counter()


def term_tags(t) -> Counter:
    """TL(-): multiset of tag ids occurring in a term/frame stack."""
    out: Counter = Counter()

    def go(t):
        match t:
            case Tagged(tag, v):
                out[tag] += 1
                go(v)
            case Var() | Const() | Prim():
                pass
            case Lam(_, _, _, body) | TLam(_, _, _, body) | Rec(_, _, _, body):
                go(body)
            case PairV(a, b):
                go(a)
                go(b)
            case App(f, a):
                go(f)
                go(a)
            case TApp(f, _):
                go(f)
            case Return(v, _) | Do(_, v, _):
                go(v)
            case Let(_, _, m, n):
                go(m)
                go(n)
            case LetVal(_, v, m):
                go(v)
                go(m)
            case Handle(m, h, _, _):
                go(m)
                go_handler(h)
            case PairElim(v, _, _, m):
                go(v)
                go(m)
            case LetFrame(_, _, body):
                go(body)
            case HandleFrame(h, _, _):
                go_handler(h)
            case tuple() | list():
                for x in t:
                    go(x)
            case _:
                raise TypeError(f"term_tags: unhandled {t!r}")

    def go_handler(h: Handler):
        go(h.ret_body)
        for _, _, _, body in h.clauses:
            go(body)

    go(t)
    return out


def step_tagged(m: Comp, *, untyped: bool = False):
    """One linearity-aware step: returns (term, S, T, rule) or a terminal
    semantics outcome.  Tag removal fires, with priority, when a tagged
    value sits in an elimination position (function/type-application head,
    pair-elimination scrutinee)."""
    frames, h = decompose(m)

    def tag(v):
        return tag_value(v, untyped=untyped)

    match h:
        case App(Tagged(t, inner), arg):
            return plug(frames, App(inner, arg)), Counter(), Counter({t: 1}), "L-Remove"
        case TApp(Tagged(t, inner), ty):
            return plug(frames, TApp(inner, ty)), Counter(), Counter({t: 1}), "L-Remove"
        case PairElim(Tagged(t, inner), x, y, body):
            return plug(frames, PairElim(inner, x, y, body)), Counter(), Counter({t: 1}), "L-Remove"
        case App(Lam(_, x, _, body), arg):
            v2, s = tag(arg)
            return plug(frames, subst_value(body, {x: v2})), s, Counter(), "L-App"
        case App(Rec(f, x, _, body) as rv, arg):
            v2, s = tag(arg)
            return plug(frames, subst_value(body, {f: rv, x: v2})), s, Counter(), "L-Rec"
        case App(Prim(name), arg):
            try:
                result = prim_delta(name, arg)
            except DeltaError as e:
                return Stuck(m, str(e))
            # A delta step eliminates the argument tags that do not survive
            # into the result.
            eliminated = term_tags(arg) - term_tags(result)
            return plug(frames, result), Counter(), eliminated, "L-Prim"
        case TApp(TLam(_, tvar, kind, body), ty):
            from .check import _binding_subst

            sub = _binding_subst(tvar, kind, ty)
            return plug(frames, subst_type_in_term(body, sub)), Counter(), Counter(), "L-TApp"
        case PairElim(PairV(a, b), x, y, body):
            a2, s1 = tag(a)
            b2, s2 = tag(b)
            return (
                plug(frames, subst_value(body, {x: a2, y: b2})),
                s1 + s2,
                Counter(),
                "L-PairElim",
            )
        case Return(v, _):
            if not frames:
                return NormalReturn(v)
            inner = frames[-1]
            outer = frames[:-1]
            match inner:
                case LetFrame(_, x, body):
                    v2, s = tag(v)
                    return plug(outer, subst_value(body, {x: v2})), s, Counter(), "L-Seq"
                case HandleFrame(handler, _, _):
                    v2, s = tag(v)
                    n = subst_value(handler.ret_body, {handler.ret_var: v2})
                    return plug(outer, n), s, Counter(), "L-Ret"
        case Do(label, v, annot):
            idx = semantics._innermost_handler(frames, label)
            if idx is None:
                return NormalOp(label, v, frames)
            hframe = frames[idx]
            inside = frames[idx + 1 :]
            outer = frames[:idx]
            p, r, body = hframe.handler.clause(label)
            sig = semantics._signature(annot, label)
            k = semantics._continuation(inside, hframe, annot, sig)
            v2, s1 = tag(v)
            k2, s2 = tag(k)
            n = subst_value(body, {p: v2, r: k2})
            rule = "L-Op" if hframe.deep else "L-Op+"
            return plug(outer, n), s1 + s2, Counter(), rule
        case LetVal(x, v, body):
            v2, s = tag(v)
            return plug(frames, subst_value(body, {x: v2})), s, Counter(), "L-LetVal"
        case App(fn, _):
            return Stuck(m, f"application of a non-function value: {pretty(fn)}")
        case TApp(fn, _):
            return Stuck(m, f"type application of a non-type-abstraction: {pretty(fn)}")
        case PairElim(v, _, _, _):
            return Stuck(m, f"pair elimination of a non-pair value: {pretty(v)}")
    return Stuck(m, f"no rule applies: {pretty(h)}")


# ---------------------------------------------------------------------------
# Linear safety

@dataclass(frozen=True)
class SafetyViolation:
    clause: int  # 1: tag under unlimited value, 2: tag in unlimited-op context, 3: tag in handler
    tag: int
    where: str

    def render(self) -> str:
        names = {
            1: "tagged value inside an unlimited value",
            2: "tagged value in the context of an unhandled control-flow-unlimited operation",
            3: "tagged value inside a handler",
        }
        return f"clause {self.clause}: {names[self.clause]} (tag {self.tag}, {self.where})"


def linear_safe(term: Term) -> list[SafetyViolation]:
    """Empty iff no tagged value occurs (1) inside an unlimited
    lambda/type-abstraction/rec value, (2) in the captured context of an
    unhandled unlimited-signature operation, or (3) inside a handler."""
    out: list[SafetyViolation] = []

    def check_clause1(v):
        match v:
            case Lam(lin, _, _, body) if lin == UNL:
                for t in term_tags(body):
                    out.append(SafetyViolation(1, t, pretty(v)[:60]))
            case TLam(lin, _, _, body) if lin == UNL:
                for t in term_tags(body):
                    out.append(SafetyViolation(1, t, pretty(v)[:60]))
            case Rec(_, _, _, body):
                for t in term_tags(body):
                    out.append(SafetyViolation(1, t, pretty(v)[:60]))

    def walk(t):
        if is_value(t):
            check_clause1(t)
        match t:
            case Var() | Const() | Prim():
                return
            case Tagged(_, v):
                walk(v)
            case Lam(_, _, _, body) | TLam(_, _, _, body) | Rec(_, _, _, body):
                walk(body)
            case PairV(a, b):
                walk(a)
                walk(b)
            case App(f, a):
                walk(f)
                walk(a)
            case TApp(f, _):
                walk(f)
            case Return(v, _) | Do(_, v, _):
                walk(v)
            case Let(_, _, m, n):
                walk(m)
                walk(n)
            case LetVal(_, v, m):
                walk(v)
                walk(m)
            case Handle(m, h, _, _):
                walk(m)
                for t_ in term_tags(HandleFrame(h, True)):
                    out.append(SafetyViolation(3, t_, "handler"))
                walk_handler_bodies(h)
            case PairElim(v, _, _, m):
                walk(v)
                walk(m)

        # Clause 2: a computation subterm decomposing to an unhandled
        # unlimited operation must have a tag-free captured context.
        if not is_value(t) and isinstance(t, (Let, Handle)):
            frames, redex = decompose(t)
            if isinstance(redex, Do):
                sig = semantics._signature(redex.annot, redex.label)
                if (
                    sig is not None
                    and sig.lin == UNL
                    and redex.label not in bound_labels(frames)
                ):
                    for t_ in term_tags(list(frames)):
                        out.append(SafetyViolation(2, t_, f"do {redex.label}"))

    def walk_handler_bodies(h: Handler):
        walk(h.ret_body)
        for _, _, _, body in h.clauses:
            walk(body)

    walk(term)
    return out


# ---------------------------------------------------------------------------
# Run auditor

@dataclass
class AuditStep:
    rule: str
    introduced: Counter
    eliminated: Counter
    balanced: bool
    violations: list[SafetyViolation] = field(default_factory=list)


@dataclass
class AuditReport:
    steps: list[AuditStep]
    outcome: object
    final_residual: Counter
    safe_throughout: bool
    balanced_throughout: bool
    duplicate_eliminations: dict[int, int]
    halted_early: bool = False

    @property
    def ok(self) -> bool:
        return (
            self.safe_throughout
            and self.balanced_throughout
            and not self.duplicate_eliminations
            and isinstance(self.outcome, NormalReturn)
        )

    def render_table(self) -> str:
        lines = ["step  rule        +tags        -tags        balanced"]
        for i, s in enumerate(self.steps, 1):
            plus = ",".join(str(t) for t in sorted(s.introduced.elements())) or "-"
            minus = ",".join(str(t) for t in sorted(s.eliminated.elements())) or "-"
            lines.append(f"{i:<5} {s.rule:<11} {plus:<12} {minus:<12} {'yes' if s.balanced else 'NO'}")
            for v in s.violations:
                lines.append(f"      ! {v.render()}")
        res = ",".join(str(t) for t in sorted(self.final_residual.elements())) or "none"
        lines.append(f"residual tags: {res}")
        if self.duplicate_eliminations:
            dups = ", ".join(f"tag {t} eliminated {n}x" for t, n in sorted(self.duplicate_eliminations.items()))
            lines.append(f"duplicate eliminations: {dups}")
        return "\n".join(lines)

    def to_json(self):
        return {
            "steps": [
                {
                    "rule": s.rule,
                    "introduced": sorted(s.introduced.elements()),
                    "eliminated": sorted(s.eliminated.elements()),
                    "balanced": s.balanced,
                    "violations": [v.render() for v in s.violations],
                }
                for s in self.steps
            ],
            "outcome": type(self.outcome).__name__,
            "residual": sorted(self.final_residual.elements()),
            "safe": self.safe_throughout,
            "balanced": self.balanced_throughout,
            "duplicateEliminations": {str(k): v for k, v in self.duplicate_eliminations.items()},
        }


def audit_run(m: Comp, fuel: int = 1000, *, untyped: bool = False) -> AuditReport:
    """Step the linearity-aware semantics, asserting per-step multiset
    balance and linear safety.  Typed mode requires the program to check
    first and halts at the first violation; untyped mode is a best-effort
    bug demonstrator that keeps going and reports everything."""
    if free_vars(m):
        raise AuditError(f"audit requires a closed computation (free: {sorted(free_vars(m))})")
    if not untyped:
        from .check import check_program

        check_program(m)

    steps: list[AuditStep] = []
    introduced_total: Counter = Counter()
    eliminated_total: Counter = Counter()
    safe = not linear_safe(m)
    balanced_all = True
    halted = False
    outcome = None
    count = 0
    while True:
        res = step_tagged(m, untyped=untyped)
        if isinstance(res, (NormalReturn, NormalOp, Stuck)):
            outcome = res
            break
        n, s, t, rule = res
        before = term_tags(m)
        after = term_tags(n)
        balanced = before + s == after + t
        viols = linear_safe(n)
        steps.append(AuditStep(rule, s, t, balanced, viols))
        introduced_total += s
        eliminated_total += t
        if viols:
            safe = False
        if not balanced:
            balanced_all = False
        m = n
        if (viols or not balanced) and not untyped:
            halted = True
            outcome = Stuck(n, "audit violation")
            break
        count += 1
        if count >= fuel:
            outcome = OutOfFuel(m)
            break

    dup = {
        tag: cnt
        for tag, cnt in eliminated_total.items()
        if cnt > introduced_total.get(tag, 0)
    }
    residual = term_tags(m)
    return AuditReport(
        steps=steps,
        outcome=outcome,
        final_residual=residual,
        safe_throughout=safe,
        balanced_throughout=balanced_all,
        duplicate_eliminations=dup,
        halted_early=halted,
    )
