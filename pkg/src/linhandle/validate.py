"""Re-validation of inference output against the syntax-directed rules.

Walks the recorded derivation with the final substitution applied
everywhere and re-checks, at every node, what the declarative rule demands:
types compose structurally, and every entailment premise is discharged by
the final predicate set (its factorised atoms must each be subsumed or
ground-true; existentials introduced by scheme instantiation are matched
against the predicate set).
"""

from __future__ import annotations

from dataclasses import dataclass

from .infer import Deriv, describe_pred
from .qualified import (
    GlobalSig,
    Lacks,
    LinLe,
    Pred,
    RowLe,
    TypeScheme,
    apply_pred,
    apply_scheme,
    factorise_env_le,
    factorise_pred,
    factorise_scheme_le,
    factorise_set,
    ground_holds,
    pred_ftv,
    rowvar,
)
from .syntax import (
    CompType,
    Fun,
    HandlerType,
    LIN,
    Lin,
    LinVar,
    NameSupply,
    PairT,
    RowType,
    TSubst,
    TyVar,
    UNL,
)


class ValidationFailure(Exception):
    pass


class _RecordingSupply(NameSupply):
    def __init__(self):
        super().__init__(5_000_000)
        self.generated: list[tuple[str, str]] = []

    def fresh(self, stem: str) -> str:
        name = super().fresh(stem)
        cat = {"a": "val", "mu": "row", "phi": "lin"}.get(stem, "val")
        self.generated.append((cat, name))
        return name


def _match_atom(a: Pred, q: Pred, flex: set, assign: dict):
    """Match a flex-containing atom against a concrete predicate; returns an
    extended assignment or None."""

    def m_side(x, y, assign):
        key = None
        if isinstance(x, TyVar) and ("val", x.name) in flex:
            key = ("val", x.name)
        elif isinstance(x, LinVar) and ("lin", x.name) in flex:
            key = ("lin", x.name)
        elif isinstance(x, RowType) and not x.entries and x.tail and ("row", x.tail) in flex:
            key = ("row", x.tail)
        if key is not None:
            if key in assign:
                return assign if assign[key] == y else None
            out = dict(assign)
            out[key] = y
            return out
        return assign if x == y else None

    match (a, q):
        case (LinLe(l1, r1), LinLe(l2, r2)):
            s = m_side(l1, l2, assign)
            if s is None:
                return None
            return m_side(r1, r2, s)
        case (RowLe(l1, r1), RowLe(l2, r2)):
            s = m_side(l1, l2, assign)
            if s is None:
                return None
            return m_side(r1, r2, s)
        case (Lacks(r1, ls1), Lacks(r2, ls2)):
            if ls1 != ls2:
                return None
            return m_side(r1, r2, assign)
    return None


def _apply_assign(p: Pred, assign: dict) -> Pred:
    vals = {n: v for (c, n), v in assign.items() if c == "val"}
    rows = {n: v for (c, n), v in assign.items() if c == "row"}
    lins = {n: v for (c, n), v in assign.items() if c == "lin"}
    return apply_pred(TSubst(vals, rows, lins), p)


def _trivialisers(a: Pred, flex: set):
    """Assignments of a single flex variable that make the atom trivially
    true (the entailment existential)."""
    out = []
    match a:
        case LinLe(_, LinVar(n)) if ("lin", n) in flex:
            out.append({("lin", n): LIN})
        case LinLe(LinVar(n), _) if ("lin", n) in flex:
            out.append({("lin", n): UNL})
        case LinLe(TyVar(n), _) if ("val", n) in flex:
            from .syntax import UNIT

            out.append({("val", n): UNIT})
        case RowLe(RowType((), tail), _) if tail and ("row", tail) in flex:
            from .syntax import row_canon

            out.append({("row", tail): row_canon([])})
        case Lacks(RowType((), tail), _) if tail and ("row", tail) in flex:
            from .syntax import row_canon

            out.append({("row", tail): row_canon([])})
    return out


def entailed(pstar: frozenset, atoms, flex: set = frozenset()) -> bool:
    """Every atom subsumed by pstar or ground-true, under some assignment of
    the flex (freshly introduced) variables."""
    atoms = list(atoms)

    def go(i: int, assign: dict) -> bool:
        if i == len(atoms):
            return True
        a = _apply_assign(atoms[i], assign)
        if not (pred_ftv(a) & flex):
            if a in pstar or ground_holds(a):
                return go(i + 1, assign)
            return False
        for q in pstar:
            ext = _match_atom(a, q, flex, assign)
            if ext is not None and go(i + 1, ext):
                return True
        for triv in _trivialisers(a, flex):
            merged = dict(assign)
            merged.update(triv)
            if go(i + 1, merged):
                return True
        return False

    return go(0, {})


@dataclass
class Validator:
    sig: GlobalSig
    final: TSubst
    pstar: frozenset

    def fail(self, node: Deriv, msg: str):
        raise ValidationFailure(f"{node.rule}: {msg}")

    # helpers ---------------------------------------------------------------
    def ty(self, node: Deriv):
        return self.final.apply(node.type)

    def ctx(self, node: Deriv) -> dict[str, TypeScheme]:
        return {x: apply_scheme(self.final, s) for x, s in node.ctx.items()}

    def require(self, node: Deriv, cond: bool, msg: str):
        if not cond:
            self.fail(node, msg)

    def require_env_le(self, node: Deriv, gamma: dict, rhs, what: str):
        supply = _RecordingSupply()
        atoms = factorise_env_le(gamma, rhs, supply)
        if not entailed(self.pstar, atoms, set(supply.generated)):
            self.fail(node, f"premise not entailed: {what}")

    def require_pred(self, node: Deriv, p: Pred):
        supply = _RecordingSupply()
        atoms = factorise_pred(apply_pred(self.final, p), supply)
        if not entailed(self.pstar, atoms, set(supply.generated)):
            self.fail(node, f"premise not entailed: {describe_pred(p)}")

    def shared_unlimited(self, node: Deriv, used_a, used_b, drop=frozenset()):
        shared = (used_a & used_b) - drop
        gamma = {x: s for x, s in self.ctx(node).items() if x in shared}
        if gamma:
            self.require_env_le(node, gamma, UNL, "shared variables unlimited")

    # walk ------------------------------------------------------------------
    def validate(self, node: Deriv):
        handler = getattr(self, f"v_{node.rule.lower()}", None)
        if handler is None:
            self.fail(node, "no validation rule")
        handler(node)
        for c in node.children:
            self.validate(c)

    def v_var(self, node: Deriv):
        sch: TypeScheme = node.info["scheme"]
        inst: TSubst = node.info["inst"]
        body = self.final.apply(inst.apply(sch.body))
        self.require(node, body == self.ty(node), "instance body mismatch")
        atoms = factorise_set(
            [apply_pred(self.final, apply_pred(inst, q)) for q in sch.preds], None
        )
        if not entailed(self.pstar, atoms):
            self.fail(node, "instantiated scheme qualifiers not entailed")

    def v_const(self, node: Deriv):
        pass

    def v_prim(self, node: Deriv):
        self.require(node, isinstance(self.ty(node), Fun), "primitive type must be a function")

    def v_abs(self, node: Deriv):
        t = self.ty(node)
        self.require(node, isinstance(t, Fun), "lambda type must be a function")
        child = node.children[0]
        self.require(node, self.ty(child) == t.result, "body type mismatch")
        gamma = {x: s for x, s in self.ctx(node).items() if x in node.used}
        self.require_env_le(node, gamma, self.final.apply(node.info["phi"]),
                            "captured context below function linearity")

    def v_pair(self, node: Deriv):
        t = self.ty(node)
        self.require(node, isinstance(t, PairT), "pair type expected")
        a, b = node.children
        self.require(node, self.ty(a) == t.left and self.ty(b) == t.right, "component mismatch")
        self.shared_unlimited(node, a.used, b.used)

    def v_rec(self, node: Deriv):
        t = self.ty(node)
        self.require(node, isinstance(t, Fun) and t.lin == UNL, "rec type must be an unlimited function")
        child = node.children[0]
        self.require(node, self.ty(child) == t.result, "rec body type mismatch")
        gamma = {x: s for x, s in self.ctx(node).items() if x in node.used}
        if gamma:
            self.require_env_le(node, gamma, UNL, "recursive function context unlimited")

    def v_app(self, node: Deriv):
        f, a = node.children
        tf, ta = self.ty(f), self.ty(a)
        self.require(node, isinstance(tf, Fun), "operator must be a function")
        self.require(node, tf.param == ta, "argument type mismatch")
        self.require(node, tf.result == self.ty(node), "result type mismatch")
        self.shared_unlimited(node, f.used, a.used)

    def v_return(self, node: Deriv):
        t = self.ty(node)
        self.require(node, isinstance(t, CompType), "computation type expected")
        self.require(node, self.ty(node.children[0]) == t.result, "returned value type mismatch")

    def v_do(self, node: Deriv):
        t = self.ty(node)
        al, bl = self.sig[node.term.label]
        self.require(node, t.result == bl, "operation result type mismatch")
        self.require(node, self.ty(node.children[0]) == al, "operation parameter type mismatch")
        single = self.final.apply(node.info["single"])
        self.require_pred(node, RowLe(single, t.effects))

    def v_seq(self, node: Deriv):
        m, n = node.children
        cm, cn = self.ty(m), self.ty(n)
        t = self.ty(node)
        self.require(node, cn.result == t.result, "body result mismatch")
        r1, r2, r = cm.effects, cn.effects, t.effects
        self.require_pred(node, RowLe(r1, r))
        self.require_pred(node, RowLe(r2, r))
        x = node.info["binder"]
        excl = (n.used - {x}) - m.used
        gamma2 = {v: s for v, s in self.ctx(node).items() if v in excl}
        if gamma2:
            self.require_env_le(node, gamma2, r1, "continuation context below bound row")
        self.shared_unlimited(node, m.used, n.used - {x})
        if x not in n.used:
            supply = _RecordingSupply()
            atoms = factorise_pred(LinLe(cm.result, UNL), supply)
            if not entailed(self.pstar, atoms, set(supply.generated)):
                self.fail(node, "discarded binder must be unlimited")

    def v_letval(self, node: Deriv):
        v, mbody = node.children
        self.require(node, self.ty(node) == self.ty(mbody), "body type mismatch")
        x = node.info["binder"]
        self.shared_unlimited(node, v.used, mbody.used - {x})
        if x not in mbody.used:
            sigma = apply_scheme(self.final, node.info["sigma"])
            supply = _RecordingSupply()
            atoms = factorise_scheme_le(sigma, UNL, supply)
            if not entailed(self.pstar, atoms, set(supply.generated)):
                self.fail(node, "discarded polymorphic binder must be unlimited")

    def v_handle(self, node: Deriv):
        h, m = node.children
        ht, cm = self.ty(h), self.ty(m)
        self.require(node, isinstance(ht, HandlerType), "handler type expected")
        self.require(node, ht.input.result == cm.result, "handled computation type mismatch")
        self.require(node, self.ty(node) == ht.output, "handle result type mismatch")
        self.require_pred(node, RowLe(cm.effects, ht.input.effects))
        self.shared_unlimited(node, h.used, m.used)

    def _v_handler_common(self, node: Deriv, deep: bool):
        ht = self.ty(node)
        d = ht.output
        labels = node.info["labels"]
        in_row = ht.input.effects
        for lbl in labels:
            pres = in_row.presence(lbl)
            self.require(node, pres is not None, f"handled label {lbl} missing from input row")
        ret, *clauses = node.children
        self.require(node, self.ty(ret) == d, "return clause type mismatch")
        for c in clauses:
            self.require(node, self.ty(c) == d, "operation clause type mismatch")
        mu = self.final.apply(node.info["mu"])
        self.require_pred(node, RowLe(mu, d.effects))
        self.require_pred(node, Lacks(mu, frozenset(labels)))
        gamma = {x: s for x, s in self.ctx(node).items() if x in node.used}
        if gamma:
            if deep:
                self.require_env_le(node, gamma, UNL, "deep handler context unlimited")
            else:
                self.require_env_le(node, gamma, ht.input.effects,
                                    "shallow handler context below input row")

    def v_handler(self, node: Deriv):
        self._v_handler_common(node, True)

    def v_shallowhandler(self, node: Deriv):
        self._v_handler_common(node, False)

    def v_pairelim(self, node: Deriv):
        v, mbody = node.children
        tv = self.ty(v)
        self.require(node, isinstance(tv, PairT), "scrutinee must be a pair")
        self.require(node, self.ty(node) == self.ty(mbody), "body type mismatch")
        x, y = node.info["binders"]
        self.shared_unlimited(node, v.used, mbody.used - {x, y})
        for name, comp_ty in ((x, tv.left), (y, tv.right)):
            if name not in mbody.used:
                supply = _RecordingSupply()
                atoms = factorise_pred(LinLe(comp_ty, UNL), supply)
                if not entailed(self.pstar, atoms, set(supply.generated)):
                    self.fail(node, f"discarded pair component {name} must be unlimited")


def revalidate(deriv: Deriv, final: TSubst, preds: frozenset, sig: GlobalSig) -> None:
    """Raise ValidationFailure unless the derivation re-checks under the
    syntax-directed rules with premises discharged from the final predicate
    set."""
    pstar = factorise_set(frozenset(apply_pred(final, p) for p in preds), None)
    Validator(sig=sig, final=final, pstar=pstar).validate(deriv)
