"""Small-step operational semantics with reified evaluation contexts.

A term decomposes into a frame stack (let- and handle-frames, innermost
last) and a redex; the stepper applies exactly one rule at the unique redex
position.  Reified frames are what the operation rules capture as
continuations, and what bound-label computation inspects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .prims import DeltaError, delta as prim_delta
from .pretty import pretty
from .syntax import (
    App,
    Comp,
    Do,
    Handle,
    Handler,
    Lam,
    Let,
    LetVal,
    Linearity,
    PairElim,
    PairV,
    Prim,
    Rec,
    Return,
    RowType,
    TApp,
    TLam,
    Tagged,
    Term,
    TSubst,
    Value,
    Var,
    free_vars,
    is_value,
    subst_type_in_term,
    subst_value,
)


@dataclass(frozen=True)
class LetFrame:
    lin: Optional[Linearity]
    var: str
    body: Comp


@dataclass(frozen=True)
class HandleFrame:
    handler: Handler
    deep: bool
    out_presence: tuple = ()


Frame = LetFrame | HandleFrame


@dataclass(frozen=True)
class Stepped:
    term: Comp
    rule: str


@dataclass(frozen=True)
class NormalReturn:
    value: Value


@dataclass(frozen=True)
class NormalOp:
    label: str
    value: Value
    context: tuple[Frame, ...]


@dataclass(frozen=True)
class OutOfFuel:
    term: Comp


@dataclass(frozen=True)
class Stuck:
    term: Comp
    reason: str


StepOutcome = Stepped | NormalReturn | NormalOp | OutOfFuel | Stuck


class EvalError(Exception):
    pass


def bound_labels(ctx) -> frozenset[str]:
    """Union of handler-clause domains along a context."""
    out: set[str] = set()
    for f in ctx:
        if isinstance(f, HandleFrame):
            out |= f.handler.labels
    return frozenset(out)


def decompose(m: Comp) -> tuple[tuple[Frame, ...], Comp]:
    """Split a computation into its frame stack and redex-position term."""
    frames: list[Frame] = []
    while True:
        match m:
            case Let(lin, var, bound, body):
                frames.append(LetFrame(lin, var, body))
                m = bound
            case Handle(comp, handler, deep, outp):
                frames.append(HandleFrame(handler, deep, outp))
                m = comp
            case _:
                return tuple(frames), m


def plug(frames, m: Comp) -> Comp:
    for f in reversed(frames):
        match f:
            case LetFrame(lin, var, body):
                m = Let(lin, var, m, body)
            case HandleFrame(handler, deep, outp):
                m = Handle(m, handler, deep, outp)
    return m


def _continuation(frames_inside, handle_frame: HandleFrame, annot, sig) -> Lam:
    """Reify the captured continuation for an operation: deep handlers
    re-wrap themselves, shallow ones do not."""
    y = "y"
    inner: Comp = Return(Var(y), annot)
    inner = plug(frames_inside, inner)
    if handle_frame.deep:
        inner = Handle(inner, handle_frame.handler, True, handle_frame.out_presence)
    lin = sig.lin if sig is not None else None
    param_ty = sig.result if sig is not None else None
    return Lam(lin, y, param_ty, inner)


def _signature(annot: Optional[RowType], label: str):
    from .syntax import Present

    if annot is None:
        return None
    p = annot.presence(label)
    return p if isinstance(p, Present) else None


def step(m: Comp) -> StepOutcome:
    """Apply one reduction rule at the unique redex; plain semantics (no
    linear tags allowed)."""
    frames, h = decompose(m)
    match h:
        case App(Tagged(), _) | TApp(Tagged(), _):
            return Stuck(m, "tagged value in plain semantics (use the auditor)")
        case App(Lam(_, x, _, body), arg):
            return Stepped(plug(frames, subst_value(body, {x: arg})), "E-App")
        case App(Rec(f, x, _, body) as rv, arg):
            return Stepped(plug(frames, subst_value(body, {f: rv, x: arg})), "E-Rec")
        case App(Prim(name), arg):
            if not _closed_value(arg):
                return Stuck(m, f"primitive {name} applied to a non-value")
            try:
                return Stepped(plug(frames, prim_delta(name, arg)), "E-Prim")
            except DeltaError as e:
                return Stuck(m, str(e))
        case App(fn, _):
            return Stuck(m, f"application of a non-function value: {pretty(fn)}")
        case TApp(TLam(_, tvar, kind, body), ty):
            from .check import _binding_subst

            sub = _binding_subst(tvar, kind, ty)
            return Stepped(plug(frames, subst_type_in_term(body, sub)), "E-TApp")
        case TApp(fn, _):
            return Stuck(m, f"type application of a non-type-abstraction: {pretty(fn)}")
        case PairElim(PairV(a, b), x, y, body):
            return Stepped(plug(frames, subst_value(body, {x: a, y: b})), "E-PairElim")
        case PairElim(Tagged(), _, _, _):
            return Stuck(m, "tagged value in plain semantics (use the auditor)")
        case PairElim(v, _, _, _):
            return Stuck(m, f"pair elimination of a non-pair value: {pretty(v)}")
        case Return(v, _):
            if not frames:
                return NormalReturn(v)
            inner = frames[-1]
            outer = frames[:-1]
            match inner:
                case LetFrame(_, x, body):
                    return Stepped(plug(outer, subst_value(body, {x: v})), "E-Seq")
                case HandleFrame(handler, _, _):
                    n = subst_value(handler.ret_body, {handler.ret_var: v})
                    return Stepped(plug(outer, n), "E-Ret")
        case Do(label, v, annot):
            idx = _innermost_handler(frames, label)
            if idx is None:
                return NormalOp(label, v, frames)
            hframe = frames[idx]
            inside = frames[idx + 1 :]
            outer = frames[:idx]
            clause = hframe.handler.clause(label)
            p, r, body = clause
            sig = _signature(annot, label)
            k = _continuation(inside, hframe, annot, sig)
            n = subst_value(body, {p: v, r: k})
            rule = "E-Op" if hframe.deep else "E-Op+"
            return Stepped(plug(outer, n), rule)
        case LetVal(x, v, body):
            return Stepped(plug(frames, subst_value(body, {x: v})), "E-LetVal")
    return Stuck(m, f"no rule applies: {pretty(h)}")


def _innermost_handler(frames, label: str) -> Optional[int]:
    for i in range(len(frames) - 1, -1, -1):
        f = frames[i]
        if isinstance(f, HandleFrame) and label in f.handler.labels:
            return i
    return None


def _closed_value(v) -> bool:
    return is_value(v) and not free_vars(v)


@dataclass
class EvalResult:
    outcome: StepOutcome
    steps: int
    trace: list[tuple[str, Comp]]


def evaluate(m: Comp, fuel: int = 1000, trace: bool = False) -> EvalResult:
    """Iterate ``step`` until a non-Stepped outcome or the fuel runs out."""
    if fuel < 0:
        raise ValueError("fuel must be non-negative")
    tr: list[tuple[str, Comp]] = []
    steps = 0
    while True:
        out = step(m)
        if not isinstance(out, Stepped):
            return EvalResult(out, steps, tr)
        steps += 1
        if trace:
            tr.append((out.rule, out.term))
        m = out.term
        if steps >= fuel:
            return EvalResult(OutOfFuel(m), steps, tr)
