"""Algorithm-W-style type inference for the implicit calculus.

Each rule threads a quintuple: inferred type, substitution, emitted
predicate set, used-variable set, and the fresh-name supply.  Constraints
are emitted (not checked) and factorised to atomic form on the way out;
satisfiability is the solver's job.  Unification is eager.

Inference also records a derivation tree so the syntax-directed rules can
be re-validated against the final substitution and predicate set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .prims import PRIM_SIGS
from .pretty import pretty, pretty_type
from .qualified import (
    GlobalSig,
    Lacks,
    LinLe,
    Pred,
    RowLe,
    TypeScheme,
    apply_pred,
    apply_preds,
    apply_scheme,
    factorise_env_le,
    factorise_pred,
    factorise_scheme_le,
    gen,
    instantiate,
    mono,
    rowvar,
)
from .syntax import (
    App,
    BASE_LINEARITY,
    Base,
    CompType,
    Const,
    Do,
    Fun,
    Handle,
    Handler,
    HandlerType,
    Lam,
    Let,
    LetVal,
    LinVar,
    NameSupply,
    PairElim,
    PairT,
    PairV,
    Present,
    Prim,
    Rec,
    Return,
    RowType,
    Span,
    TSubst,
    Term,
    TyVar,
    UNL,
    Value,
    Var,
    is_value,
    row_canon,
)
from .unification import UnifyError, compose, unify


class InferError(Exception):
    def __init__(self, msg: str, span: Optional[Span] = None, rule: str = ""):
        loc = f" at {span}" if span else ""
        tag = f"[{rule}] " if rule else ""
        super().__init__(f"{tag}{msg}{loc}")
        self.span = span
        self.rule = rule


@dataclass
class InferOut:
    type: object
    subst: TSubst
    preds: frozenset
    used: frozenset[str]
    deriv: "Deriv"


@dataclass
class Deriv:
    """One node of the recorded inference derivation.  ``ctx`` is the
    context at entry (before this node's substitutions); ``type`` carries
    this node's prefix substitution already applied."""

    rule: str
    term: object
    ctx: dict[str, TypeScheme]
    type: object
    used: frozenset[str]
    children: list["Deriv"] = field(default_factory=list)
    info: dict = field(default_factory=dict)


Env = dict[str, TypeScheme]


def _restrict(gamma: Env, names) -> Env:
    return {x: s for x, s in gamma.items() if x in names}


def _apply_ctx(sub: TSubst, gamma: Env) -> Env:
    if sub.is_identity():
        return gamma
    return {x: apply_scheme(sub, s) for x, s in gamma.items()}


def _extend(gamma: Env, **bindings) -> Env:
    out = dict(gamma)
    out.update(bindings)
    return out


class Inferencer:
    def __init__(self, sig: GlobalSig, supply: Optional[NameSupply] = None):
        self.sig = sig
        self.supply = supply or NameSupply()

    # -- constraint helpers -------------------------------------------------
    def mk_leq(self, gamma: Env, rhs) -> frozenset:
        return factorise_env_le(gamma, rhs, self.supply)

    def mk_unl(self, gamma: Env) -> frozenset:
        return self.mk_leq(gamma, UNL)

    def mk_sub(self, r1: RowType, r2: RowType) -> frozenset:
        return factorise_pred(RowLe(r1, r2), self.supply)

    def mk_lack(self, r: RowType, labels) -> frozenset:
        return factorise_pred(Lacks(r, frozenset(labels)), self.supply)

    def fresh_val(self) -> TyVar:
        return TyVar(self.supply.fresh("a"))

    def fresh_row(self) -> RowType:
        return rowvar(self.supply.fresh("mu"))

    def fresh_lin(self) -> LinVar:
        return LinVar(self.supply.fresh("phi"))

    def _unify(self, a, b, span, rule) -> TSubst:
        try:
            return unify(a, b, self.supply)
        except UnifyError as e:
            raise InferError(f"cannot unify {pretty_type(a)} with {pretty_type(b)}: {e}", span, rule) from None

    # -- values -------------------------------------------------------------
    def infer_value(self, gamma: Env, v: Value) -> InferOut:
        match v:
            case Var(x, span=s):
                if x not in gamma:
                    raise InferError(f"unbound variable {x}", s, "TI-Var")
                sch = gamma[x]
                preds, ty, inst = instantiate(sch, self.supply)
                d = Deriv("Var", v, dict(gamma), ty, frozenset({x}),
                          info={"scheme": sch, "inst": inst, "preds": preds})
                return InferOut(ty, TSubst(), preds, frozenset({x}), d)
            case Const(b, _, span=s):
                if b not in BASE_LINEARITY:
                    raise InferError(f"unknown base type {b}", s, "TI-Const")
                ty = Base(b, BASE_LINEARITY[b])
                return InferOut(ty, TSubst(), frozenset(), frozenset(),
                                Deriv("Const", v, dict(gamma), ty, frozenset()))
            case Prim(name, prow, span=s):
                if name not in PRIM_SIGS:
                    raise InferError(f"unknown primitive {name}", s, "TI-Prim")
                if prow is not None:
                    raise InferError("primitive effect annotations are explicit-calculus only", s, "TI-Prim")
                param, result = PRIM_SIGS[name]
                mu = self.fresh_row()
                ty = Fun(param, UNL, CompType(result, mu))
                return InferOut(ty, TSubst(), frozenset(), frozenset(),
                                Deriv("Prim", v, dict(gamma), ty, frozenset()))
            case Lam(lin, x, annot, body, span=s):
                if lin is not None or annot is not None:
                    raise InferError("implicit calculus takes no annotations on lambda", s, "TI-Abs")
                alpha, phi = self.fresh_val(), self.fresh_lin()
                out = self.infer_comp(_extend(gamma, **{x: mono(alpha)}), body)
                th = out.subst
                q = self.mk_leq(_restrict(_apply_ctx(th, gamma), out.used), phi)
                if x not in out.used:
                    q |= factorise_pred(LinLe(th.apply(alpha), UNL), self.supply)
                ty = Fun(th.apply(alpha), phi, out.type)
                used = out.used - {x}
                d = Deriv("Abs", v, dict(gamma), ty, used, [out.deriv],
                          info={"alpha": alpha, "phi": phi})
                return InferOut(ty, th, out.preds | q, used, d)
            case PairV(a, b, span=s):
                o1 = self.infer_value(gamma, a)
                o2 = self.infer_value(_apply_ctx(o1.subst, gamma), b)
                th = compose(o2.subst, o1.subst)
                shared = o1.used & o2.used
                q = self.mk_unl(_restrict(_apply_ctx(th, gamma), shared))
                ty = PairT(o2.subst.apply(o1.type), o2.type)
                used = o1.used | o2.used
                d = Deriv("Pair", v, dict(gamma), ty, used, [o1.deriv, o2.deriv])
                return InferOut(ty, th, apply_preds(o2.subst, o1.preds) | o2.preds | q, used, d)
            case Rec(f, x, annot, body, span=s):
                if annot is not None:
                    raise InferError("implicit calculus takes no annotation on rec", s, "TI-Rec")
                alpha, beta, mur = self.fresh_val(), self.fresh_val(), self.fresh_row()
                cf = CompType(beta, mur)
                fty = Fun(alpha, UNL, cf)
                out = self.infer_comp(_extend(gamma, **{f: mono(fty), x: mono(alpha)}), body)
                th2 = self._unify(out.type, out.subst.apply(cf), s, "TI-Rec")
                th = compose(th2, out.subst)
                used = out.used - {f, x}
                q = self.mk_unl(_restrict(_apply_ctx(th, gamma), used))
                if x not in out.used:
                    q |= factorise_pred(LinLe(th.apply(alpha), UNL), self.supply)
                ty = Fun(th.apply(alpha), UNL, th2.apply(out.type))
                d = Deriv("Rec", v, dict(gamma), ty, used, [out.deriv],
                          info={"alpha": alpha})
                return InferOut(ty, th, apply_preds(th2, out.preds) | q, used, d)
        raise InferError(f"not an implicit-calculus value: {pretty(v)}", getattr(v, "span", None))

    # -- computations -------------------------------------------------------
    def infer_comp(self, gamma: Env, m) -> InferOut:
        match m:
            case App(fv, av, span=s):
                o1 = self.infer_value(gamma, fv)
                o2 = self.infer_value(_apply_ctx(o1.subst, gamma), av)
                alpha, mu, phi = self.fresh_val(), self.fresh_row(), self.fresh_lin()
                goal = Fun(o2.type, phi, CompType(alpha, mu))
                th3 = self._unify(o2.subst.apply(o1.type), goal, s, "TI-App")
                th = compose(th3, compose(o2.subst, o1.subst))
                preds = apply_preds(th3, apply_preds(o2.subst, o1.preds) | o2.preds)
                shared = o1.used & o2.used
                q = self.mk_unl(_restrict(_apply_ctx(th, gamma), shared))
                ty = th3.apply(CompType(alpha, mu))
                used = o1.used | o2.used
                d = Deriv("App", m, dict(gamma), ty, used, [o1.deriv, o2.deriv],
                          info={"phi": phi})
                return InferOut(ty, th, preds | q, used, d)
            case Return(v, annot, span=s):
                if annot is not None:
                    raise InferError("implicit calculus takes no row annotation on return", s, "TI-Return")
                o = self.infer_value(gamma, v)
                ty = CompType(o.type, self.fresh_row())
                d = Deriv("Return", m, dict(gamma), ty, o.used, [o.deriv])
                return InferOut(ty, o.subst, o.preds, o.used, d)
            case Do(label, v, annot, span=s):
                if annot is not None:
                    raise InferError("implicit calculus takes no row annotation on do", s, "TI-Do")
                if label not in self.sig:
                    raise InferError(f"unknown operation {label}", s, "TI-Do")
                al, bl = self.sig[label]
                o = self.infer_value(gamma, v)
                th2 = self._unify(o.type, al, s, "TI-Do")
                mu, phi = self.fresh_row(), self.fresh_lin()
                single = row_canon([(label, Present(al, phi, bl))])
                q = self.mk_sub(single, mu)
                ty = CompType(bl, mu)
                th = compose(th2, o.subst)
                d = Deriv("Do", m, dict(gamma), ty, o.used, [o.deriv],
                          info={"phi": phi, "single": single, "mu": mu})
                return InferOut(ty, th, apply_preds(th2, o.preds) | q, o.used, d)
            case Let(lin, x, bound, body, span=s):
                if lin is not None:
                    raise InferError("implicit calculus takes no linearity on let", s, "TI-Seq")
                o1 = self.infer_comp(gamma, bound)
                a, r1 = o1.type.result, o1.type.effects
                o2 = self.infer_comp(
                    _extend(_apply_ctx(o1.subst, gamma), **{x: mono(a)}), body
                )
                th = compose(o2.subst, o1.subst)
                mu = self.fresh_row()
                gfin = _apply_ctx(th, gamma)
                r1_fin = o2.subst.apply(r1)
                q = self.mk_unl(_restrict(gfin, o1.used & o2.used))
                if x not in o2.used:
                    q |= factorise_pred(LinLe(o2.subst.apply(a), UNL), self.supply)
                q |= self.mk_leq(_restrict(gfin, o2.used), r1_fin)
                q |= self.mk_sub(r1_fin, mu)
                q |= self.mk_sub(o2.type.effects, mu)
                ty = CompType(o2.type.result, mu)
                used = o1.used | (o2.used - {x})
                preds = apply_preds(o2.subst, o1.preds) | o2.preds | q
                d = Deriv("Seq", m, dict(gamma), ty, used, [o1.deriv, o2.deriv],
                          info={"r1": r1_fin, "mu": mu, "binder": x})
                return InferOut(ty, th, preds, used, d)
            case LetVal(x, v, body, span=s):
                o1 = self.infer_value(gamma, v)
                g1 = _apply_ctx(o1.subst, gamma)
                sigma = gen(g1, o1.preds, o1.type)
                o2 = self.infer_comp(_extend(g1, **{x: sigma}), body)
                th = compose(o2.subst, o1.subst)
                q = self.mk_unl(_restrict(_apply_ctx(th, gamma), o1.used & o2.used))
                if x not in o2.used:
                    q |= factorise_scheme_le(apply_scheme(o2.subst, sigma), UNL, self.supply)
                used = o1.used | (o2.used - {x})
                d = Deriv("LetVal", m, dict(gamma), o2.type, used, [o1.deriv, o2.deriv],
                          info={"sigma": sigma, "binder": x})
                return InferOut(o2.type, th, o2.preds | q, used, d)
            case Handle(comp, handler, deep, outp, span=s):
                if outp:
                    raise InferError("handler output ascriptions are explicit-calculus only", s, "TI-Handle")
                o1 = self.infer_handler(gamma, handler, deep)
                ht: HandlerType = o1.type
                o2 = self.infer_comp(_apply_ctx(o1.subst, gamma), comp)
                th3 = self._unify(o2.subst.apply(ht.input.result), o2.type.result, s, "TI-Handle")
                th = compose(th3, compose(o2.subst, o1.subst))
                preds = apply_preds(th3, apply_preds(o2.subst, o1.preds) | o2.preds)
                r_in = th3.apply(o2.subst.apply(ht.input.effects))
                r_m = th3.apply(o2.type.effects)
                q = self.mk_sub(r_m, r_in)
                q |= self.mk_unl(_restrict(_apply_ctx(th, gamma), o1.used & o2.used))
                ty = th3.apply(o2.subst.apply(ht.output))
                used = o1.used | o2.used
                d = Deriv("Handle", m, dict(gamma), ty, used, [o1.deriv, o2.deriv],
                          info={"deep": deep})
                return InferOut(ty, th, preds | q, used, d)
            case PairElim(v, x, y, body, span=s):
                o1 = self.infer_value(gamma, v)
                alpha, beta = self.fresh_val(), self.fresh_val()
                th2 = self._unify(o1.type, PairT(alpha, beta), s, "TI-PairElim")
                th21 = compose(th2, o1.subst)
                o2 = self.infer_comp(
                    _extend(_apply_ctx(th21, gamma),
                            **{x: mono(th2.apply(alpha)), y: mono(th2.apply(beta))}),
                    body,
                )
                th = compose(o2.subst, th21)
                q = self.mk_unl(_restrict(_apply_ctx(th, gamma), o1.used & o2.used))
                if x not in o2.used:
                    q |= factorise_pred(LinLe(o2.subst.apply(th2.apply(alpha)), UNL), self.supply)
                if y not in o2.used:
                    q |= factorise_pred(LinLe(o2.subst.apply(th2.apply(beta)), UNL), self.supply)
                used = o1.used | (o2.used - {x, y})
                preds = apply_preds(o2.subst, apply_preds(th2, o1.preds)) | o2.preds | q
                d = Deriv("PairElim", m, dict(gamma), o2.type, used, [o1.deriv, o2.deriv],
                          info={"binders": (x, y)})
                return InferOut(o2.type, th, preds, used, d)
        if is_value(m):
            raise InferError(f"a value is not a computation: {pretty(m)}", getattr(m, "span", None))
        raise InferError(f"not an implicit-calculus computation: {m!r}", getattr(m, "span", None))

    # -- handlers -------------------------------------------------------------
    def infer_handler(self, gamma: Env, h: Handler, deep: bool) -> InferOut:
        labels = [lbl for lbl, _, _, _ in h.clauses]
        for lbl in labels:
            if lbl not in self.sig:
                raise InferError(f"unknown operation {lbl}", None, "TI-Handler")
        alpha = self.fresh_val()
        mu = self.fresh_row()
        phis = {lbl: self.fresh_lin() for lbl in labels}
        entries = [(lbl, Present(self.sig[lbl][0], phis[lbl], self.sig[lbl][1])) for lbl in labels]
        input_row0 = row_canon(entries, mu.tail)
        input_c0 = CompType(alpha, input_row0)

        o0 = self.infer_comp(_extend(gamma, **{h.ret_var: mono(alpha)}), h.ret_body)
        theta = o0.subst
        d_ret = o0.type  # D, evolves under later substitutions
        children = [o0.deriv]
        all_preds = list(o0.preds)
        used_parts = [o0.used - {h.ret_var}]
        unused_q: frozenset = frozenset()
        if h.ret_var not in o0.used:
            unused_q |= factorise_pred(LinLe(theta.apply(alpha), UNL), self.supply)

        for lbl, p, r, body in h.clauses:
            al, bl = self.sig[lbl]
            resume_c = d_ret if deep else input_c0
            r_ty = Fun(bl, phis[lbl], theta.apply(resume_c))
            ctx = _extend(_apply_ctx(theta, gamma), **{p: mono(al), r: mono(r_ty)})
            oi = self.infer_comp(ctx, body)
            thi = oi.subst
            goal = thi.apply(theta.apply(d_ret))
            thu = self._unify(oi.type, goal, None, "TI-Handler")
            step = compose(thu, thi)
            all_preds = [apply_pred(step, q) for q in all_preds]
            all_preds.extend(apply_pred(thu, q) for q in oi.preds)
            unused_q = apply_preds(step, unused_q)
            if p not in oi.used:
                unused_q |= factorise_pred(LinLe(step.apply(al), UNL), self.supply)
            if r not in oi.used:
                unused_q |= factorise_pred(LinLe(step.apply(r_ty), UNL), self.supply)
            used_parts.append(oi.used - {p, r})
            children.append(oi.deriv)
            theta = compose(step, theta)

        d_fin: CompType = theta.apply(d_ret)
        input_c = theta.apply(input_c0)
        used = frozenset().union(*used_parts)
        gfin = _restrict(_apply_ctx(theta, gamma), used)
        mu_fin = theta.apply(mu)
        preds = frozenset(all_preds) | unused_q
        if deep:
            preds |= self.mk_unl(gfin)
        else:
            preds |= self.mk_leq(gfin, input_c.effects)
        preds |= self.mk_sub(mu_fin, d_fin.effects)
        preds |= self.mk_lack(mu_fin, labels)
        ty = HandlerType(input_c, d_fin)
        d = Deriv(
            "Handler" if deep else "ShallowHandler",
            h,
            dict(gamma),
            ty,
            used,
            children,
            info={"alpha": alpha, "mu": mu, "phis": phis, "labels": labels},
        )
        return InferOut(ty, theta, preds, used, d)

    def infer_term(self, gamma: Env, t: Term) -> InferOut:
        if is_value(t):
            return self.infer_value(gamma, t)
        return self.infer_comp(gamma, t)


def infer(gamma: Env, term: Term, sig: GlobalSig, supply: Optional[NameSupply] = None) -> InferOut:
    return Inferencer(sig, supply).infer_term(gamma, term)


@dataclass
class ProgramResult:
    scheme: TypeScheme
    residual: frozenset
    preds: frozenset
    subst: TSubst
    deriv: Deriv
    raw_type: object


def infer_program(term: Term, sig: GlobalSig, supply: Optional[NameSupply] = None) -> ProgramResult:
    """Infer, solve the emitted constraints, apply the solving substitution,
    and generalise.  Raises InferError (carrying the unsatisfiable core) if
    the constraints cannot be satisfied."""
    from .solve import Sat, solve

    supply = supply or NameSupply()
    eng = Inferencer(sig, supply)
    out = eng.infer_term({}, term)
    sol = solve(out.preds, supply)
    if not isinstance(sol, Sat):
        from .pretty import pretty_type as _pt

        core = sol.core
        raise InferError(
            f"unsatisfiable constraints: core {describe_pred(core)}"
            + (f" via {' , '.join(describe_pred(c) for c in sol.chain)}" if sol.chain else ""),
            rule="solve",
        )
    final_ty = sol.subst.apply(out.type)
    residual = frozenset(apply_pred(sol.subst, p) for p in sol.residual)
    scheme = gen({}, residual, final_ty)
    return ProgramResult(
        scheme=scheme,
        residual=residual,
        preds=out.preds,
        subst=compose(sol.subst, out.subst),
        deriv=out.deriv,
        raw_type=out.type,
    )


def describe_pred(p: Pred) -> str:
    from .pretty import pretty_type

    match p:
        case LinLe(l, r):
            return f"{pretty_type(l)} <= {pretty_type(r)}"
        case RowLe(a, b):
            return f"{pretty_type(a)} << {pretty_type(b)}"
        case Lacks(r, labels):
            return f"{pretty_type(r)} lacks {{{', '.join(sorted(labels))}}}"
    return repr(p)
