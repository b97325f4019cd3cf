"""Qualified-type layer for the implicit calculus: predicates, type schemes,
ground entailment, factorisation into atomic constraints, and the bounded
satisfiability oracle used to cross-check the solver.

Linearity predicates compare the linearity of things: a value type on the
left contributes its value linearity, a row on the right contributes the
control-flow linearity of each of its operations (and its tail).  Rows only
ever appear on the right of ``⪯`` in inference-generated constraints.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .syntax import (
    BASE_LINEARITY,
    Base,
    CompType,
    Forall,
    Fun,
    LIN,
    Lin,
    LinVar,
    MalformedRowError,
    NameSupply,
    PairT,
    Present,
    RowType,
    TSubst,
    TyVar,
    UNL,
    ValueType,
    ftv,
    ftv_ordered,
    lin_le,
    row_canon,
)


@dataclass(frozen=True)
class LinLe:
    """lhs ⪯ rhs: the linearity of lhs is below that of rhs."""

    lhs: object
    rhs: object


@dataclass(frozen=True)
class RowLe:
    """lhs ⩽ rhs: row containment."""

    lhs: RowType
    rhs: RowType


@dataclass(frozen=True)
class Lacks:
    """row ⊥ labels: the row mentions none of the labels."""

    row: RowType
    labels: frozenset[str]


Pred = LinLe | RowLe | Lacks
PredSet = frozenset


def rowvar(name: str) -> RowType:
    return RowType((), name)


@dataclass(frozen=True)
class TypeScheme:
    """∀ quantified . preds ⇒ body.  May be ambiguous (a quantified variable
    occurring only in the predicates); that is deliberate."""

    quantified: tuple[tuple[str, str], ...]  # (category, name)
    preds: tuple[Pred, ...]
    body: object  # ValueType (or CompType for top-level computations)

    def monomorphic(self) -> bool:
        return not self.quantified and not self.preds


def mono(ty) -> TypeScheme:
    return TypeScheme((), (), ty)


GlobalSig = dict[str, tuple[ValueType, ValueType]]


# ---------------------------------------------------------------------------
# Substitution over predicates and schemes

def apply_pred(sub: TSubst, p: Pred) -> Pred:
    match p:
        case LinLe(l, r):
            return LinLe(sub.apply(l), sub.apply(r))
        case RowLe(a, b):
            return RowLe(sub.apply(a), sub.apply(b))
        case Lacks(r, labels):
            return Lacks(sub.apply(r), labels)
    raise TypeError(f"not a predicate: {p!r}")


def apply_preds(sub: TSubst, ps: Iterable[Pred]) -> frozenset:
    return frozenset(apply_pred(sub, p) for p in ps)


def apply_scheme(sub: TSubst, s: TypeScheme) -> TypeScheme:
    bound = set(s.quantified)
    trimmed = TSubst(
        {k: v for k, v in sub.vals.items() if ("val", k) not in bound},
        {k: v for k, v in sub.rows.items() if ("row", k) not in bound},
        {k: v for k, v in sub.lins.items() if ("lin", k) not in bound},
        {k: v for k, v in sub.pres.items() if ("pres", k) not in bound},
    )
    if trimmed.range_ftv() & bound:
        raise AssertionError("substitution would capture scheme-bound variables")
    return TypeScheme(
        s.quantified,
        tuple(apply_pred(trimmed, p) for p in s.preds),
        trimmed.apply(s.body),
    )


def pred_ftv(p: Pred) -> set[tuple[str, str]]:
    match p:
        case LinLe(l, r):
            return ftv(l) | ftv(r)
        case RowLe(a, b):
            return ftv(a) | ftv(b)
        case Lacks(r, _):
            return ftv(r)
    raise TypeError(f"not a predicate: {p!r}")


def scheme_ftv(s: TypeScheme) -> set[tuple[str, str]]:
    out = ftv(s.body)
    for p in s.preds:
        out |= pred_ftv(p)
    return out - set(s.quantified)


# ---------------------------------------------------------------------------
# Row element sets

def rowset(r: RowType) -> frozenset:
    """The set of row elements: (label, signature) pairs plus the tail
    variable, if any."""
    out = {(lbl, p) for lbl, p in r.entries}
    if r.tail is not None:
        out.add(("$tail", r.tail))
    return frozenset(out)


def row_dom(r: RowType) -> frozenset[str]:
    return frozenset(r.labels)


# ---------------------------------------------------------------------------
# Ground entailment

def left_linearity(t) -> Optional[Lin]:
    """Concrete linearity of a predicate's left-hand side, if determined."""
    match t:
        case Lin():
            return t
        case LinVar():
            return None
        case Base(_, lin):
            return lin
        case Fun(_, lin, _):
            return lin if isinstance(lin, Lin) else None
        case PairT(a, b):
            la, lb = left_linearity(a), left_linearity(b)
            if la == LIN or lb == LIN:
                return LIN
            if la == UNL and lb == UNL:
                return UNL
            return None
        case Forall():
            return None
        case TyVar():
            return None
    return None


def _ground_linle(l, r) -> bool:
    if l == r:
        return True  # P-Refl
    if isinstance(r, Lin) and r == LIN:
        return True  # P-Lin
    if isinstance(l, Lin) and l == UNL:
        return True  # P-Unl
    ll = left_linearity(l)
    match r:
        case Lin():
            return ll is not None and lin_le(ll, r)
        case Base(_, rl):
            return ll is not None and lin_le(ll, rl)
        case Fun(_, rl, _):
            return isinstance(rl, Lin) and ll is not None and lin_le(ll, rl)
        case RowType(entries, tail):
            if tail is not None:
                return False  # not ground
            if ll is None:
                return False
            for _, p in entries:
                if not isinstance(p, Present):
                    return False
                if not (isinstance(p.lin, Lin) and lin_le(ll, p.lin)):
                    return False
            return True
    return False


def ground_holds(p: Pred) -> bool:
    """Does a fully ground predicate hold?"""
    match p:
        case LinLe(l, r):
            return _ground_linle(l, r)
        case RowLe(a, b):
            return rowset(a) <= rowset(b)
        case Lacks(r, labels):
            return not (row_dom(r) & labels)
    raise TypeError(f"not a predicate: {p!r}")


def entails_ground(P: Iterable[Pred], p: Pred) -> bool:
    """Entailment at the ground/atomic level: subsumption from P, otherwise
    the ground rules.  Variable-containing predicates are only entailed by
    subsumption."""
    if p in set(P):
        return True
    return ground_holds(p)


# ---------------------------------------------------------------------------
# Factorisation

def factorise_pred(p: Pred, supply: Optional[NameSupply] = None) -> frozenset:
    """Rewrite one predicate into atomic form.  Linearity atoms relate only
    type variables, row variables, and concrete linearities; trivially true
    predicates are discharged; unsatisfiable atoms are emitted, not
    rejected (rejection is the solver's job)."""
    match p:
        case LinLe(l, r):
            if l == r:
                return frozenset()
            if isinstance(r, Lin) and r == LIN:
                return frozenset()
            if isinstance(l, Lin) and l == UNL:
                return frozenset()
            match l:
                case Base(_, lin):
                    return factorise_pred(LinLe(lin, r), supply)
                case Fun(_, lin, _):
                    return factorise_pred(LinLe(lin, r), supply)
                case PairT(a, b):
                    return factorise_pred(LinLe(a, r), supply) | factorise_pred(LinLe(b, r), supply)
            match r:
                case RowType(entries, tail):
                    out: set = set()
                    for _, pres in entries:
                        if isinstance(pres, Present):
                            out |= factorise_pred(LinLe(l, pres.lin), supply)
                    if tail is not None:
                        out.add(LinLe(l, rowvar(tail)))
                    return frozenset(out)
                case Base(_, lin):
                    return factorise_pred(LinLe(l, lin), supply)
                case Fun(_, lin, _):
                    return factorise_pred(LinLe(l, lin), supply)
            return frozenset({p})
        case RowLe(a, b):
            if rowset(a) <= rowset(b):
                return frozenset()
            return frozenset({p})
        case Lacks(r, labels):
            if not labels:
                return frozenset()
            if row_dom(r) & labels:
                return frozenset({p})  # unsatisfiable as stated; solver rejects
            if r.tail is None:
                return frozenset()
            # The concrete part is disjoint; only the tail stays constrained.
            return frozenset({Lacks(rowvar(r.tail), labels)})
    raise TypeError(f"not a predicate: {p!r}")


def factorise_scheme_le(s: TypeScheme, rhs, supply: NameSupply) -> frozenset:
    """Factorise σ ⪯ τ: quantifiers instantiate to fresh variables (the
    entailment rule's existential), qualifiers contribute their own
    factorisation."""
    sub_vals, sub_rows, sub_lins = {}, {}, {}
    for cat, name in s.quantified:
        if cat == "val":
            sub_vals[name] = TyVar(supply.fresh("a"))
        elif cat == "row":
            sub_rows[name] = rowvar(supply.fresh("mu"))
        elif cat == "lin":
            sub_lins[name] = LinVar(supply.fresh("phi"))
    sub = TSubst(sub_vals, sub_rows, sub_lins)
    out: set = set()
    for q in s.preds:
        out |= factorise_pred(apply_pred(sub, q), supply)
    out |= factorise_pred(LinLe(sub.apply(s.body), rhs), supply)
    return frozenset(out)


def factorise_env_le(gamma: dict[str, TypeScheme], rhs, supply: NameSupply) -> frozenset:
    out: set = set()
    for s in gamma.values():
        if isinstance(s, TypeScheme):
            out |= factorise_scheme_le(s, rhs, supply)
        else:
            out |= factorise_pred(LinLe(s, rhs), supply)
    return frozenset(out)


def factorise_set(ps: Iterable[Pred], supply: Optional[NameSupply] = None) -> frozenset:
    out: set = set()
    for p in ps:
        out |= factorise_pred(p, supply)
    return frozenset(out)


def is_atomic_linle(p: Pred) -> bool:
    def atom(t):
        return isinstance(t, (TyVar, LinVar, Lin)) or (
            isinstance(t, RowType) and not t.entries and t.tail is not None
        )

    return isinstance(p, LinLe) and atom(p.lhs) and atom(p.rhs)


# ---------------------------------------------------------------------------
# Bounded satisfiability oracle

class OracleRefusal(Exception):
    """The enumeration universe would be too large."""


def _pred_vars(preds) -> tuple[list[str], list[str], list[str]]:
    lins: list[str] = []
    vals: list[str] = []
    rows: list[str] = []
    seen = set()
    for p in preds:
        for cat, name in sorted(pred_ftv(p)):
            if (cat, name) in seen:
                continue
            seen.add((cat, name))
            if cat == "lin":
                lins.append(name)
            elif cat == "val":
                vals.append(name)
            elif cat == "row":
                rows.append(name)
    return lins, vals, rows


def _collect_labels(preds) -> set[str]:
    labels: set[str] = set()

    def from_row(r: RowType):
        labels.update(r.labels)

    for p in preds:
        match p:
            case RowLe(a, b):
                from_row(a)
                from_row(b)
            case Lacks(r, ls):
                from_row(r)
                labels.update(ls)
            case LinLe(l, r):
                if isinstance(l, RowType):
                    from_row(l)
                if isinstance(r, RowType):
                    from_row(r)
    return labels


def _sig_candidates(preds, label: str) -> list[Present]:
    """Signature shapes seen for a label, at both linearities; fallback is a
    unit-to-unit signature."""
    shapes: set[tuple] = set()

    def from_row(r: RowType):
        for lbl, pres in r.entries:
            if lbl == label and isinstance(pres, Present):
                shapes.add((pres.param, pres.result))

    for p in preds:
        match p:
            case RowLe(a, b):
                from_row(a)
                from_row(b)
            case Lacks(r, _):
                from_row(r)
            case LinLe(l, r):
                if isinstance(r, RowType):
                    from_row(r)
    if not shapes:
        from .syntax import UNIT

        shapes = {(UNIT, UNIT)}
    out = []
    for param, result in sorted(shapes, key=repr):
        for lin in (UNL, LIN):
            out.append(Present(param, lin, result))
    return out


def sat_oracle(
    preds: Iterable[Pred],
    label_universe: Optional[Sequence[str]] = None,
    depth_bound: int = 3,
    value_menu: Optional[Sequence[ValueType]] = None,
    max_assignments: int = 2_000_000,
) -> bool:
    """Exhaustively search for a satisfying ground substitution.

    Linearity variables range over {unlimited, linear}; value variables over
    a small base-type menu; row variables over closed rows of at most
    ``depth_bound`` labels drawn from the universe, with signatures shaped
    like those occurring in the predicates.
    """
    from .syntax import FILE, UNIT

    preds = list(preds)
    if not preds:
        return True
    lins, vals, rows = _pred_vars(preds)
    labels = sorted(_collect_labels(preds) | set(label_universe or ()))
    menu = list(value_menu) if value_menu is not None else [UNIT, FILE]

    lin_choices = [UNL, LIN]
    # Ground rows are built per (lin, val) assignment because signature
    # shapes may mention value/linearity variables.
    est = (2 ** len(lins)) * (len(menu) ** len(vals))
    if est > max_assignments:
        raise OracleRefusal(f"{est} base assignments exceed the bound")

    def rows_for(grounded_preds) -> list[RowType]:
        per_label = {lbl: _sig_candidates(grounded_preds, lbl) for lbl in labels}
        out: list[RowType] = [row_canon([])]
        for k in range(1, min(depth_bound, len(labels)) + 1):
            for combo in itertools.combinations(labels, k):
                choice_lists = [[(lbl, s) for s in per_label[lbl]] for lbl in combo]
                for picked in itertools.product(*choice_lists):
                    out.append(row_canon(picked))
        return out

    def check_all(assign_preds) -> bool:
        return all(ground_holds(p) for p in assign_preds)

    for lin_vals in itertools.product(lin_choices, repeat=len(lins)):
        sub_l = TSubst(lins={n: v for n, v in zip(lins, lin_vals)})
        p1 = [apply_pred(sub_l, p) for p in preds]
        for val_vals in itertools.product(menu, repeat=len(vals)):
            sub_v = TSubst(vals={n: v for n, v in zip(vals, val_vals)})
            p2 = [apply_pred(sub_v, p) for p in p1]
            if not rows:
                if check_all(p2):
                    return True
                continue
            candidates = rows_for(p2)
            if len(candidates) ** len(rows) > max_assignments:
                raise OracleRefusal("row assignment space exceeds the bound")
            ok = _search_rows(p2, rows, candidates)
            if ok:
                return True
    return False


def _search_rows(preds, rows: list[str], candidates: list[RowType]) -> bool:
    """Backtracking over row variables, grounding predicates eagerly."""

    def recurse(i: int, current: list[Pred]) -> bool:
        if i == len(rows):
            return all(ground_holds(p) for p in current)
        name = rows[i]
        rest_vars = set(rows[i + 1 :])
        for cand in candidates:
            sub = TSubst(rows={name: cand})
            try:
                nxt = [apply_pred(sub, p) for p in current]
            except MalformedRowError:
                continue  # duplicate label: not a well-formed grounding
            # prune on predicates that are already ground
            ok = True
            for p in nxt:
                if not pred_ftv(p) & {("row", v) for v in rest_vars}:
                    if not ground_holds(p):
                        ok = False
                        break
            if ok and recurse(i + 1, nxt):
                return True
        return False

    return recurse(0, list(preds))


# ---------------------------------------------------------------------------
# Scheme utilities

_VAL_NAMES = "abcdefghijklmnopqrstuvwxyz"


def alpha_normalise(s: TypeScheme) -> TypeScheme:
    """Rename quantifiers to a, b, c / mu1, mu2 / phi1, phi2 in first-
    occurrence order (body first, then predicates) for stable printing."""
    order: list[tuple[str, str]] = []
    seen = set()
    quantified = set(s.quantified)

    def note(keys):
        for key in keys:
            if key in quantified and key not in seen:
                seen.add(key)
                order.append(key)

    note(ftv_ordered(s.body))
    for p in s.preds:
        match p:
            case LinLe(l, r):
                note(ftv_ordered(l))
                note(ftv_ordered(r))
            case RowLe(a, b):
                note(ftv_ordered(a))
                note(ftv_ordered(b))
            case Lacks(r, _):
                note(ftv_ordered(r))
    # quantified-but-unused variables go last, in original order
    for key in s.quantified:
        if key not in seen:
            seen.add(key)
            order.append(key)

    sub_vals, sub_rows, sub_lins = {}, {}, {}
    new_q: list[tuple[str, str]] = []
    counts = {"val": 0, "row": 0, "lin": 0}
    for cat, name in order:
        counts[cat] += 1
        if cat == "val":
            n = counts["val"] - 1
            fresh = _VAL_NAMES[n] if n < len(_VAL_NAMES) else f"a{n}"
            sub_vals[name] = TyVar(fresh)
            new_q.append(("val", fresh))
        elif cat == "row":
            fresh = f"mu{counts['row']}"
            sub_rows[name] = rowvar(fresh)
            new_q.append(("row", fresh))
        else:
            fresh = f"phi{counts['lin']}"
            sub_lins[name] = LinVar(fresh)
            new_q.append(("lin", fresh))
    sub = TSubst(sub_vals, sub_rows, sub_lins)
    preds = tuple(sorted((apply_pred(sub, p) for p in s.preds), key=repr))
    return TypeScheme(tuple(new_q), preds, sub.apply(s.body))


def instantiate(s: TypeScheme, supply: NameSupply) -> tuple[frozenset, object, TSubst]:
    """Instantiate a scheme's quantifiers with fresh variables."""
    sub_vals, sub_rows, sub_lins = {}, {}, {}
    for cat, name in s.quantified:
        if cat == "val":
            sub_vals[name] = TyVar(supply.fresh("a"))
        elif cat == "row":
            sub_rows[name] = rowvar(supply.fresh("mu"))
        elif cat == "lin":
            sub_lins[name] = LinVar(supply.fresh("phi"))
    sub = TSubst(sub_vals, sub_rows, sub_lins)
    return (
        frozenset(apply_pred(sub, p) for p in s.preds),
        sub.apply(s.body),
        sub,
    )


def gen(gamma: dict[str, TypeScheme], preds: Iterable[Pred], body) -> TypeScheme:
    """Generalise: quantify the free variables of preds ⇒ body that are not
    free in the context.  Ambiguous quantification is permitted."""
    env_ftv: set[tuple[str, str]] = set()
    for s in gamma.values():
        env_ftv |= scheme_ftv(s) if isinstance(s, TypeScheme) else ftv(s)
    order: list[tuple[str, str]] = []
    seen = set()
    for key in ftv_ordered(body):
        if key not in env_ftv and key not in seen:
            seen.add(key)
            order.append(key)
    for p in preds:
        for key in sorted(pred_ftv(p)):
            if key not in env_ftv and key not in seen:
                seen.add(key)
                order.append(key)
    return TypeScheme(tuple(order), tuple(sorted(preds, key=repr)), body)
