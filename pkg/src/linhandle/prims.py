"""Built-in primitive constants over base types.

The core calculi use abstract base types; corpus programs need a handful of
inhabitants and operations on them.  Every primitive is an unlimited
function; arguments may be linear (``close`` consumes a file handle).

Delta rules map an applied primitive to its result computation.  A delta
step eliminates exactly the tagged linear values that occur in the argument
but not in the result, which is how ``close`` retires a file's audit tag.
"""

from __future__ import annotations

import itertools

from .syntax import (
    BOOL,
    Comp,
    CompType,
    Const,
    EMPTY_ROW,
    FILE,
    Fun,
    INT,
    PairT,
    PairV,
    Prim,
    Return,
    STRING,
    Tagged,
    UNIT,
    UNL,
    Value,
)


class DeltaError(Exception):
    """Primitive applied to an argument outside its domain."""


PRIM_SIGS: dict[str, tuple] = {
    "open": (STRING, FILE),
    "write": (PairT(STRING, FILE), FILE),
    "close": (FILE, UNIT),
    "pick": (PairT(BOOL, PairT(STRING, STRING)), STRING),
    "concat": (PairT(STRING, STRING), STRING),
}


def prim_type(name: str, row=None) -> Fun:
    """Function type of a primitive at a given latent effect row (empty by
    default).  Primitives are unlimited; the row lets a use sit inside an
    effectful sequencing context under exact-row typing."""
    param, result = PRIM_SIGS[name]
    return Fun(param, UNL, CompType(result, row if row is not None else EMPTY_ROW))


PRIM_TYPES: dict[str, Fun] = {name: prim_type(name) for name in PRIM_SIGS}

_file_ids = itertools.count(1)


def _untag(v: Value) -> Value:
    while isinstance(v, Tagged):
        v = v.value
    return v


def delta(name: str, arg: Value) -> Comp:
    """Reduce ``Prim(name)`` applied to a closed value."""
    match name:
        case "open":
            s = _untag(arg)
            if not (isinstance(s, Const) and s.base == "String"):
                raise DeltaError("open expects a String")
            return Return(Const("File", f"{s.value}#{next(_file_ids)}"))
        case "write":
            p = _untag(arg)
            if not isinstance(p, PairV):
                raise DeltaError("write expects a (String, File) pair")
            s, f = _untag(p.left), p.right
            if not (isinstance(s, Const) and s.base == "String"):
                raise DeltaError("write expects a String in the first component")
            if not (isinstance(_untag(f), Const) and _untag(f).base == "File"):
                raise DeltaError("write expects a File in the second component")
            # The handle flows through, tag and all.
            return Return(f)
        case "close":
            f = _untag(arg)
            if not (isinstance(f, Const) and f.base == "File"):
                raise DeltaError("close expects a File")
            return Return(Const("Unit", ()))
        case "pick":
            p = _untag(arg)
            if not isinstance(p, PairV):
                raise DeltaError("pick expects a (Bool, (String, String)) pair")
            b, pair = _untag(p.left), _untag(p.right)
            if not (isinstance(b, Const) and b.base == "Bool" and isinstance(pair, PairV)):
                raise DeltaError("pick expects a (Bool, (String, String)) pair")
            return Return(pair.left if b.value else pair.right)
        case "concat":
            p = _untag(arg)
            if not isinstance(p, PairV):
                raise DeltaError("concat expects a (String, String) pair")
            a, b = _untag(p.left), _untag(p.right)
            if not (isinstance(a, Const) and isinstance(b, Const)):
                raise DeltaError("concat expects two Strings")
            return Return(Const("String", str(a.value) + str(b.value)))
        case _:
            raise DeltaError(f"unknown primitive {name!r}")


def prim(name: str) -> Prim:
    if name not in PRIM_TYPES:
        raise KeyError(f"unknown primitive {name!r}")
    return Prim(name)


def unit() -> Const:
    return Const("Unit", ())


def string(s: str) -> Const:
    return Const("String", s)


def boolean(b: bool) -> Const:
    return Const("Bool", b)


def integer(n: int) -> Const:
    return Const("Int", n)
