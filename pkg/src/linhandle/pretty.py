"""Pretty-printer and JSON-shaped serialization.

The printer emits the ASCII concrete syntax the parser reads back
(``fun!``/``fun@``, ``let!``/``let@``, ``->!``, ``=>@`` ...); with
``unicode=True`` it uses the paper-style glyphs instead (λ•, let◦, →•, ↠◦).
``parse(pretty(t))`` is alpha-identical to ``t`` on the corpus.
"""

from __future__ import annotations

import dataclasses

from .syntax import (
    ABSENT,
    Absent,
    App,
    Base,
    CompKind,
    CompType,
    Const,
    Do,
    EffectKind,
    FlexRowKind,
    Forall,
    Fun,
    Handle,
    Handler,
    HandlerKind,
    HandlerType,
    Kind,
    Lam,
    Let,
    LetVal,
    Lin,
    LinVar,
    LIN,
    PairElim,
    PairT,
    PairV,
    Present,
    PresVar,
    PresenceKind,
    Prim,
    Rec,
    Return,
    RowKind,
    RowType,
    TApp,
    TLam,
    Tagged,
    Term,
    TyVar,
    TypeKind,
    UNL,
    Var,
)


def _lin(y, unicode: bool) -> str:
    match y:
        case Lin(linear):
            if unicode:
                return "◦" if linear else "•"
            return "@" if linear else "!"
        case LinVar(name):
            return name
        case None:
            return ""
    raise TypeError(f"not a linearity: {y!r}")


def _arrow(y, unicode: bool) -> str:
    if isinstance(y, LinVar):
        return f"->{y.name}" if not unicode else f"→{y.name}"
    if unicode:
        return "→◦" if y.linear else "→•"
    return "->@" if y.linear else "->!"


def _sig_arrow(y, unicode: bool) -> str:
    if isinstance(y, LinVar):
        return f"=>{y.name}" if not unicode else f"↠{y.name}"
    if unicode:
        return "↠◦" if y.linear else "↠•"
    return "=>@" if y.linear else "=>!"


def pretty_kind(k: Kind, unicode: bool = False) -> str:
    match k:
        case TypeKind(lin):
            return f"Type{_lin(lin, unicode)}"
        case RowKind(lacks, lin):
            ls = ",".join(sorted(lacks))
            return f"Row[{ls}]{_lin(lin, unicode)}"
        case FlexRowKind(dom, lin):
            ds = ",".join(sorted(dom))
            return f"Row[*{ds}]{_lin(lin, unicode)}"
        case PresenceKind(lin):
            return f"Pres{_lin(lin, unicode)}"
        case EffectKind():
            return "Eff"
        case CompKind():
            return "Comp"
        case HandlerKind():
            return "Handler"
    raise TypeError(f"not a kind: {k!r}")


def pretty_row(r: RowType, unicode: bool = False) -> str:
    parts = []
    for lbl, p in r.entries:
        match p:
            case Absent():
                parts.append(f"{lbl}: Abs")
            case Present(param, lin, result):
                parts.append(
                    f"{lbl}: {pretty_type(param, unicode)} {_sig_arrow(lin, unicode)} {pretty_type(result, unicode)}"
                )
            case PresVar(name):
                parts.append(f"{lbl}: {name}")
    body = ", ".join(parts)
    if r.tail is not None:
        return f"{{{body}; {r.tail}}}" if body else f"{{{r.tail}}}"
    return f"{{{body}}}"


def pretty_type(t, unicode: bool = False) -> str:
    match t:
        case TyVar(name):
            return name
        case Base(name, _):
            return name
        case Fun(param, lin, result):
            return f"{_atom(param, unicode)} {_arrow(lin, unicode)} {pretty_type(result, unicode)}"
        case Forall(lin, var, kind, body):
            q = "∀" if unicode else "forall"
            return f"{q}{_lin(lin, unicode)} {var}^{pretty_kind(kind, unicode)} . {pretty_type(body, unicode)}"
        case PairT(a, b):
            return f"({pretty_type(a, unicode)}, {pretty_type(b, unicode)})"
        case CompType(result, effects):
            bang = "!" if not unicode else " !"
            return f"{_atom(result, unicode)}{bang}{pretty_row(effects, unicode)}"
        case HandlerType(inp, outp):
            return f"{pretty_type(inp, unicode)} => {pretty_type(outp, unicode)}"
        case RowType():
            return pretty_row(t, unicode)
        case Absent():
            return "Abs"
        case Present(param, lin, result):
            return f"{pretty_type(param, unicode)} {_sig_arrow(lin, unicode)} {pretty_type(result, unicode)}"
        case PresVar(name):
            return name
        case Lin() | LinVar():
            return _lin(t, unicode) if not isinstance(t, LinVar) else t.name
    raise TypeError(f"not a type: {t!r}")


def _atom(t, unicode: bool) -> str:
    s = pretty_type(t, unicode)
    if isinstance(t, (Fun, Forall)):
        return f"({s})"
    return s


def _is_value_atom(v) -> bool:
    return isinstance(v, (Var, Const, Prim, PairV, Tagged))


def pretty_value(v, unicode: bool = False) -> str:
    match v:
        case Var(name):
            return name
        case Prim(name, prow):
            if prow is not None:
                return f"{name}^{pretty_row(prow, unicode)}"
            return name
        case Const("Unit", _):
            return "()"
        case Const("Bool", b):
            return "true" if b else "false"
        case Const("Int", n):
            return str(n)
        case Const("String", s):
            return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'
        case Const(b, val):
            return f"<{b}:{val}>"
        case Lam(lin, var, annot, body):
            lam = "λ" if unicode else "fun"
            ann = f": {pretty_type(annot, unicode)}" if annot is not None else ""
            return f"{lam}{_lin(lin, unicode)} {var}{ann} . {pretty_comp(body, unicode)}"
        case TLam(lin, tvar, kind, body):
            lam = "Λ" if unicode else "tfun"
            return f"{lam}{_lin(lin, unicode)} {tvar}^{pretty_kind(kind, unicode)} . {pretty_comp(body, unicode)}"
        case Rec(f, x, annot, body):
            ann = f" : {pretty_type(annot, unicode)}" if annot is not None else ""
            return f"rec {f} {x}{ann} . {pretty_comp(body, unicode)}"
        case PairV(a, b):
            return f"({pretty_value(a, unicode)}, {pretty_value(b, unicode)})"
        case Tagged(tag, inner):
            return f"⌈{pretty_value(inner, unicode)}⌉{tag}" if unicode else f"<#{tag} {pretty_value(inner, unicode)}>"
    raise TypeError(f"not a value: {v!r}")


def _varg(v, unicode: bool) -> str:
    s = pretty_value(v, unicode)
    if _is_value_atom(v):
        return s
    return f"({s})"


def pretty_comp(m, unicode: bool = False) -> str:
    match m:
        case App(f, a):
            return f"{_varg(f, unicode)} {_varg(a, unicode)}"
        case TApp(f, ty):
            return f"{_varg(f, unicode)} [{pretty_type(ty, unicode)}]"
        case Return(v, annot):
            ann = f"^{pretty_row(annot, unicode)}" if annot is not None else ""
            return f"return{ann} {_varg(v, unicode)}"
        case Do(lbl, v, annot):
            ann = f"^{pretty_row(annot, unicode)}" if annot is not None else ""
            return f"do{ann} {lbl} {_varg(v, unicode)}"
        case Let(lin, var, bound, body):
            kw = f"let{_lin(lin, unicode)}" if lin is not None else "let"
            arrow = "←" if unicode else "<-"
            return f"{kw} {var} {arrow} {pretty_comp(bound, unicode)} in {pretty_comp(body, unicode)}"
        case LetVal(var, v, body):
            return f"let {var} = {pretty_value(v, unicode)} in {pretty_comp(body, unicode)}"
        case Handle(comp, handler, deep, outp):
            kw = "handle" if deep else "shallow handle"
            h = pretty_handler(handler, unicode)
            asc = ""
            if outp:
                inner = ", ".join(f"{l}: {pretty_type(p, unicode)}" for l, p in outp)
                asc = f" ^{{{inner}}}"
            return f"{kw} ({pretty_comp(comp, unicode)}) with {h}{asc}"
        case PairElim(v, x, y, body):
            return f"let ({x}, {y}) = {pretty_value(v, unicode)} in {pretty_comp(body, unicode)}"
    if dataclasses.is_dataclass(m):
        return pretty_value(m, unicode)
    raise TypeError(f"not a computation: {m!r}")


def pretty_handler(h: Handler, unicode: bool = False) -> str:
    arrow = "↦" if unicode else "|->"
    parts = [f"return {h.ret_var} {arrow} {pretty_comp(h.ret_body, unicode)}"]
    for lbl, p, r, body in h.clauses:
        parts.append(f"{lbl} {p} {r} {arrow} {pretty_comp(body, unicode)}")
    return "{" + ", ".join(parts) + "}"


def pretty(t, unicode: bool = False) -> str:
    """Print a term or type."""
    from .syntax import is_value

    if isinstance(t, (TyVar, Base, Fun, Forall, PairT, CompType, HandlerType,
                      RowType, Absent, Present, PresVar, Lin, LinVar)):
        return pretty_type(t, unicode)
    if is_value(t):
        return pretty_value(t, unicode)
    return pretty_comp(t, unicode)


# ---------------------------------------------------------------------------
# JSON-shaped serialization

def to_json(t):
    """Structural serialization of types/terms as plain dicts/lists."""
    match t:
        case None:
            return None
        case bool() | int() | str():
            return t
        case ():
            return []
        case Lin(linear):
            return {"$": "Lin", "linear": linear}
        case tuple():
            return [to_json(x) for x in t]
        case frozenset():
            return sorted(t)
    if dataclasses.is_dataclass(t):
        out = {"$": type(t).__name__}
        for f in dataclasses.fields(t):
            if f.name == "span":
                continue
            out[f.name] = to_json(getattr(t, f.name))
        return out
    if isinstance(t, dict):
        return {k: to_json(v) for k, v in t.items()}
    return repr(t)
