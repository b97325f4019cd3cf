"""Robinson-style unification with Rémy-style row unification for the
implicit calculus.

Rows unify by first unifying the signatures of shared labels (``ulab``),
then splicing the symmetric difference: two distinct open rows close over a
shared fresh tail; an open row against a closed one binds its tail to the
leftover concrete part (with no fresh tail: adding one would not produce a
unifier).  Occurs checks guard every binding, including row splices, since
row variables can occur inside signature types.
"""

from __future__ import annotations

from typing import Optional

from .syntax import (
    Base,
    CompType,
    Forall,
    Fun,
    Lin,
    LinVar,
    MalformedRowError,
    NameSupply,
    PairT,
    Present,
    RowType,
    TSubst,
    TyVar,
    ftv,
    row_canon,
)


class UnifyError(Exception):
    def __init__(self, msg: str, left=None, right=None):
        super().__init__(msg)
        self.left = left
        self.right = right


def compose(s2: TSubst, s1: TSubst) -> TSubst:
    """s2 ∘ s1 (apply s1 first); keeps the result idempotent when both
    inputs are and s2 binds none of s1's domain."""
    vals = {v: s2.apply(t) for v, t in s1.vals.items()}
    rows = {v: s2.apply(t) for v, t in s1.rows.items()}
    lins = {v: s2.apply(t) for v, t in s1.lins.items()}
    pres = {v: s2.apply(t) for v, t in s1.pres.items()}
    for v, t in s2.vals.items():
        vals.setdefault(v, t)
    for v, t in s2.rows.items():
        rows.setdefault(v, t)
    for v, t in s2.lins.items():
        lins.setdefault(v, t)
    for v, t in s2.pres.items():
        pres.setdefault(v, t)
    return TSubst(vals, rows, lins, pres)


IDENTITY = TSubst()


def ulin(y1, y2) -> TSubst:
    """Most general unifier of two linearities."""
    if y1 == y2:
        return TSubst()
    match (y1, y2):
        case (LinVar(n), _):
            return TSubst(lins={n: y2})
        case (_, LinVar(n)):
            return TSubst(lins={n: y1})
    raise UnifyError(f"cannot unify linearities (unlimited vs linear)", y1, y2)


def _bare_rowvar(r: RowType) -> Optional[str]:
    if not r.entries and r.tail is not None:
        return r.tail
    return None


def unify(t1, t2, supply: NameSupply) -> TSubst:
    """Most general unifier of two types (value, computation, row or
    linearity); the syntactic categories never mix."""
    lin1, lin2 = isinstance(t1, (Lin, LinVar)), isinstance(t2, (Lin, LinVar))
    if lin1 or lin2:
        if lin1 and lin2:
            return ulin(t1, t2)
        raise UnifyError("category mismatch: linearity vs type", t1, t2)
    row1, row2 = isinstance(t1, RowType), isinstance(t2, RowType)
    if row1 or row2:
        if row1 and row2:
            return _unify_rows(t1, t2, supply)
        raise UnifyError("category mismatch: row vs type", t1, t2)
    comp1, comp2 = isinstance(t1, CompType), isinstance(t2, CompType)
    if comp1 or comp2:
        if comp1 and comp2:
            return unify_many([(t1.result, t2.result), (t1.effects, t2.effects)], supply)
        raise UnifyError("category mismatch: computation vs value type", t1, t2)
    match (t1, t2):
        case (TyVar(a), TyVar(b)) if a == b:
            return TSubst()
        case (TyVar(a), _):
            if ("val", a) in ftv(t2):
                raise UnifyError(f"occurs check: {a} occurs in the other type", t1, t2)
            return TSubst(vals={a: t2})
        case (_, TyVar(_)):
            return unify(t2, t1, supply)
        case (Base(a, _), Base(b, _)):
            if a != b:
                raise UnifyError(f"base type mismatch: {a} vs {b}", t1, t2)
            return TSubst()
        case (Fun(p1, y1, c1), Fun(p2, y2, c2)):
            return unify_many([(p1, p2), (c1, c2), (y1, y2)], supply)
        case (PairT(a1, b1), PairT(a2, b2)):
            return unify_many([(a1, a2), (b1, b2)], supply)
    raise UnifyError(f"cannot unify {type(t1).__name__} with {type(t2).__name__}", t1, t2)


def unify_many(pairs, supply: NameSupply) -> TSubst:
    theta = TSubst()
    for a, b in pairs:
        step = unify(theta.apply(a), theta.apply(b), supply)
        theta = compose(step, theta)
    return theta


def ulab(k1: RowType, k2: RowType, supply: NameSupply) -> TSubst:
    """Unify the full signatures of labels shared by two rows."""
    theta = TSubst()
    by_label = dict(k2.entries)
    for lbl, p1 in k1.entries:
        p2 = by_label.get(lbl)
        if p2 is None:
            continue
        if not (isinstance(p1, Present) and isinstance(p2, Present)):
            raise UnifyError(f"label {lbl}: only concrete signatures unify in row predicates")
        q1, q2 = theta.apply(p1), theta.apply(p2)
        step = unify_many(
            [(q1.param, q2.param), (q1.result, q2.result), (q1.lin, q2.lin)], supply
        )
        theta = compose(step, theta)
    return theta


def urow(k1: RowType, k2: RowType, supply: NameSupply) -> tuple[RowType, RowType, TSubst]:
    theta = ulab(k1, k2, supply)
    return theta.apply(k1), theta.apply(k2), theta


def row_diff(k1: RowType, k2: RowType, tail: Optional[str]) -> RowType:
    """Entries of k1 whose labels are not in k2, over the given tail."""
    dom2 = set(k2.labels)
    return row_canon([(l, p) for l, p in k1.entries if l not in dom2], tail)


def _closed(r: RowType) -> RowType:
    return row_canon(r.entries, None)


def _occurs_row(name: str, r: RowType) -> bool:
    return ("row", name) in ftv(r)


def _unify_rows(r1: RowType, r2: RowType, supply: NameSupply) -> TSubst:
    v1, v2 = _bare_rowvar(r1), _bare_rowvar(r2)
    if v1 is not None and v2 is not None and v1 == v2:
        return TSubst()
    if v1 is not None:
        if _occurs_row(v1, r2):
            raise UnifyError(f"occurs check: row variable {v1} occurs in the other row", r1, r2)
        return TSubst(rows={v1: r2})
    if v2 is not None:
        return _unify_rows(r2, r1, supply)

    k1p, k2p, theta = urow(r1, r2, supply)
    match (k1p.tail, k2p.tail):
        case (None, None):
            if rowset_labels(k1p) != rowset_labels(k2p) or dict(k1p.entries) != dict(k2p.entries):
                raise UnifyError("closed rows with different labels cannot unify", r1, r2)
            return theta
        case (m1, None):
            # Open against closed: the tail takes the closed leftover; the
            # figure's fresh tail here would not yield a unifier, and its
            # subset assertion is read with both sides label-unified.
            if not rowset_labels(k1p) <= rowset_labels(k2p):
                raise UnifyError("open row has labels the closed row lacks", r1, r2)
            rest = row_diff(k2p, k1p, None)
            if _occurs_row(m1, rest):
                raise UnifyError(f"occurs check: row variable {m1} occurs in the leftover row", r1, r2)
            step = TSubst(rows={m1: rest})
            return compose(step, theta)
        case (None, _):
            return compose(_unify_rows(theta.apply(r2), theta.apply(r1), supply), theta)
        case (m1, m2):
            if m1 == m2:
                if rowset_labels(k1p) != rowset_labels(k2p) or dict(k1p.entries) != dict(k2p.entries):
                    raise UnifyError("rows sharing a tail differ in their concrete parts", r1, r2)
                return theta
            fresh = supply.fresh("mu")
            d21 = row_diff(k2p, k1p, fresh)
            d12 = row_diff(k1p, k2p, fresh)
            if _occurs_row(m1, row_canon(d21.entries, None)) or _occurs_row(
                m2, row_canon(d12.entries, None)
            ):
                raise UnifyError("occurs check in row splice", r1, r2)
            try:
                step = TSubst(rows={m1: d21, m2: d12})
            except MalformedRowError as e:
                raise UnifyError(str(e), r1, r2) from None
            return compose(step, theta)
    raise AssertionError("unreachable")


def rowset_labels(r: RowType) -> frozenset[str]:
    return frozenset(r.labels)
