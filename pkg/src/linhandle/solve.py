"""Satisfiability checking for inferred predicate sets.

``srow`` normalises row predicates to solved forms (a bare row variable on
the left of containment / lacking), substituting fresh tails where a closed
or foreign part must be injected; whenever the substitution touches a row
variable, previously solved predicates are re-queued.  ``trlin`` closes the
factorised linearity atoms under transitivity (with provenance, so an
unsatisfiable core can name its source chain); the closure is unsatisfiable
exactly when it contains linear-below-unlimited.

A satisfiable set always admits the trivial witness: every row variable to
the empty row, value variables to Unit, linearity variables to unlimited.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .qualified import (
    Lacks,
    LinLe,
    Pred,
    RowLe,
    apply_pred,
    factorise_set,
    rowset,
    row_dom,
    rowvar,
)
from .syntax import LIN, Lin, LinVar, MalformedRowError, NameSupply, RowType, TSubst, TyVar, UNL
from .unification import UnifyError, compose, row_diff, urow


@dataclass
class Sat:
    subst: TSubst
    residual: frozenset

    sat = True


@dataclass
class Unsat:
    core: Pred
    chain: tuple[Pred, ...] = ()
    reason: str = ""

    sat = False


SolveOut = Sat | Unsat


class SolveStepBound(Exception):
    pass


class _SrowFail(Exception):
    def __init__(self, pred: Pred, reason: str):
        super().__init__(reason)
        self.pred = pred
        self.reason = reason


def _bare(r: RowType) -> Optional[str]:
    return r.tail if not r.entries else None


def srow(
    theta: TSubst,
    solved: Iterable[Pred],
    pending: Iterable[Pred],
    supply: NameSupply,
    max_steps: int = 20000,
) -> tuple[TSubst, list[Pred]]:
    """Normalise row predicates, FIFO over the pending queue; re-queued
    solved predicates are appended.  Raises _SrowFail on an unsatisfiable
    row predicate."""
    solved = list(solved)
    queue = deque(pending)
    steps = 0
    while queue:
        steps += 1
        if steps > max_steps:
            raise SolveStepBound(f"srow exceeded {max_steps} steps")
        p = queue.popleft()
        match p:
            case LinLe():
                solved.append(p)
                continue
            case Lacks(r, labels):
                if row_dom(r) & labels:
                    raise _SrowFail(p, "row mentions a label it must lack")
                if r.tail is not None:
                    solved.append(Lacks(rowvar(r.tail), labels))
                continue
            case RowLe(r1, r2):
                pass
            case _:
                raise TypeError(f"srow: not a predicate {p!r}")

        r1, r2 = p.lhs, p.rhs
        try:
            k1p, k2p, th = urow(r1, r2, supply)
        except UnifyError as e:
            raise _SrowFail(p, f"shared labels do not unify: {e}") from None

        def push_subst(th2: TSubst, extra_solved: Optional[Pred] = None):
            """Apply a substitution; if it touches row variables, everything
            solved goes back to pending (a solved form may have unsolved)."""
            nonlocal theta, solved, queue
            theta = compose(th2, theta)
            requeue = bool(th2.rows)
            try:
                new_solved = [apply_pred(th2, q) for q in solved]
                new_queue = [apply_pred(th2, q) for q in queue]
                if extra_solved is not None:
                    extra = apply_pred(th2, extra_solved)
                else:
                    extra = None
            except MalformedRowError as e:
                raise _SrowFail(p, f"duplicate label created by splice: {e}") from None
            if requeue:
                queue = deque(new_queue + new_solved)
                solved = [] if extra is None else [extra]
            else:
                queue = deque(new_queue)
                solved = new_solved if extra is None else new_solved + [extra]

        incl = frozenset(k1p.labels) <= frozenset(k2p.labels)
        match (k1p.tail, k2p.tail):
            case (None, None):
                if not incl:
                    raise _SrowFail(p, "closed row not included in closed row")
                push_subst(th)
            case (m1, m2) if m1 is not None and m1 == m2:
                if not incl:
                    raise _SrowFail(p, "row not included in row sharing its tail")
                push_subst(th)
            case (m1, None):
                if not incl:
                    raise _SrowFail(p, "open row has labels the closed row lacks")
                push_subst(th, extra_solved=RowLe(rowvar(m1), row_diff(k2p, k1p, None)))
            case (None, m2):
                if incl:
                    push_subst(th)
                else:
                    fresh = supply.fresh("mu")
                    inject = row_diff(k1p, k2p, fresh)
                    if ("row", m2) in _row_ftv(inject):
                        raise _SrowFail(p, f"occurs check: {m2} inside the injected row")
                    th2 = compose(TSubst(rows={m2: inject}), th)
                    push_subst(th2)
            case (m1, m2):
                if incl:
                    push_subst(th, extra_solved=RowLe(rowvar(m1), row_diff(k2p, k1p, m2)))
                else:
                    fresh = supply.fresh("mu")
                    inject = row_diff(k1p, k2p, fresh)
                    if ("row", m2) in _row_ftv(inject):
                        raise _SrowFail(p, f"occurs check: {m2} inside the injected row")
                    th2 = compose(TSubst(rows={m2: inject}), th)
                    push_subst(th2, extra_solved=RowLe(rowvar(m1), row_diff(k2p, k1p, fresh)))
    return theta, solved


def _row_ftv(r: RowType):
    from .syntax import ftv

    return ftv(r)


def trlin(acc: Iterable[Pred], preds: Iterable[Pred], provenance: Optional[dict] = None) -> frozenset:
    """Transitive closure of atomic linearity predicates (row predicates are
    skipped).  Each processed atom composes two-sidedly with the closure so
    far, with reflexive endpoints supplying the atom itself."""
    closure: set[Pred] = {p for p in acc if isinstance(p, LinLe)}
    for p in preds:
        if not isinstance(p, LinLe):
            continue
        t1, t2 = p.lhs, p.rhs
        prime = closure | {LinLe(t1, t1), LinLe(t2, t2)}
        new = set()
        lefts = [q.lhs for q in prime if isinstance(q, LinLe) and q.rhs == t1]
        rights = [q.rhs for q in prime if isinstance(q, LinLe) and q.lhs == t2]
        for a in lefts:
            for b in rights:
                atom = LinLe(a, b)
                new.add(atom)
                if provenance is not None and atom not in closure and atom != p:
                    provenance.setdefault(atom, (LinLe(a, t1), p, LinLe(t2, b)))
        if provenance is not None:
            provenance.setdefault(p, None)  # source atom
        closure |= new
        closure.add(p)
    return frozenset(closure)


UNSAT_ATOM = LinLe(LIN, UNL)


def _chain_for(atom: Pred, provenance: dict) -> tuple[Pred, ...]:
    """Reconstruct the source atoms behind a derived closure atom."""
    out: list[Pred] = []
    seen = set()

    def go(a: Pred):
        if a in seen:
            return
        seen.add(a)
        parents = provenance.get(a)
        if parents is None:
            if isinstance(a, LinLe) and a.lhs == a.rhs:
                return  # reflexive filler
            out.append(a)
            return
        for q in parents:
            go(q)

    go(atom)
    return tuple(out)


def solve(preds: Iterable[Pred], supply: Optional[NameSupply] = None) -> SolveOut:
    """Row normalisation, then factorisation, then linearity closure.
    Unsatisfiable exactly when the closure contains linear-below-unlimited
    (or a row predicate fails outright).  The Sat residual carries the
    solved-form row predicates and the closed linearity atoms."""
    supply = supply or NameSupply(900000)
    try:
        theta, solved = srow(TSubst(), [], list(preds), supply)
    except _SrowFail as e:
        return Unsat(core=e.pred, reason=e.reason)

    atoms = factorise_set(solved, supply)
    row_preds = frozenset(p for p in atoms if not isinstance(p, LinLe))
    provenance: dict = {}
    closure = trlin((), [p for p in atoms if isinstance(p, LinLe)], provenance)
    if UNSAT_ATOM in closure:
        return Unsat(
            core=UNSAT_ATOM,
            chain=_chain_for(UNSAT_ATOM, provenance),
            reason="the closure forces linear below unlimited",
        )
    residual = row_preds | frozenset(p for p in closure if p.lhs != p.rhs)
    return Sat(subst=theta, residual=residual)


def trivial_witness(preds: Iterable[Pred]) -> TSubst:
    """Every row variable to the empty row, value variables to Unit,
    linearity variables to unlimited."""
    from .qualified import pred_ftv
    from .syntax import UNIT, row_canon

    vals, rows, lins = {}, {}, {}
    for p in preds:
        for cat, name in pred_ftv(p):
            if cat == "val":
                vals[name] = UNIT
            elif cat == "row":
                rows[name] = row_canon([])
            elif cat == "lin":
                lins[name] = UNL
    return TSubst(vals, rows, lins)
