"""Small exact linear algebra over ``fractions.Fraction``."""

from fractions import Fraction


def as_fraction(v):
    """Convert ints, Fractions, decimal strings and 'p/q' strings exactly.

    Floats are converted through their shortest repr so that ``0.1`` becomes
    ``1/10`` rather than the binary expansion.
    """
    if isinstance(v, Fraction):
        return v
    if isinstance(v, bool):
        raise TypeError("boolean is not a number")
    if isinstance(v, int):
        return Fraction(v)
    if isinstance(v, float):
        return Fraction(repr(v))
    if isinstance(v, str):
        return Fraction(v.strip())
    # numpy scalars and the like
    try:
        if float(v) == int(v):
            return Fraction(int(v))
    except (TypeError, ValueError, OverflowError):
        pass
    return Fraction(repr(float(v)))


def det(rows):
    """Determinant by fraction-free elimination on a copy."""
    a = [[Fraction(x) for x in r] for r in rows]
    n = len(a)
    if n == 0:
        return Fraction(1)
    sign = 1
    d = Fraction(1)
    for col in range(n):
        piv = next((r for r in range(col, n) if a[r][col] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != col:
            a[col], a[piv] = a[piv], a[col]
            sign = -sign
        p = a[col][col]
        d *= p
        for r in range(col + 1, n):
            f = a[r][col] / p
            if f:
                ar, ac = a[r], a[col]
                for k in range(col, n):
                    ar[k] -= f * ac[k]
    return sign * d


def solve(rows, rhs):
    """Solve the square system exactly; return None if singular."""
    n = len(rows)
    a = [[Fraction(x) for x in r] + [Fraction(b)] for r, b in zip(rows, rhs)]
    for col in range(n):
        piv = next((r for r in range(col, n) if a[r][col] != 0), None)
        if piv is None:
            return None
        a[col], a[piv] = a[piv], a[col]
        p = a[col][col]
        ac = a[col]
        for r in range(n):
            if r != col and a[r][col] != 0:
                f = a[r][col] / p
                ar = a[r]
                for k in range(col, n + 1):
                    ar[k] -= f * ac[k]
    return [a[i][n] / a[i][i] for i in range(n)]


def rank(rows):
    a = [[Fraction(x) for x in r] for r in rows]
    if not a:
        return 0
    m = len(a[0])
    r = 0
    for col in range(m):
        piv = next((i for i in range(r, len(a)) if a[i][col] != 0), None)
        if piv is None:
            continue
        a[r], a[piv] = a[piv], a[r]
        for i in range(r + 1, len(a)):
            if a[i][col] != 0:
                f = a[i][col] / a[r][col]
                for k in range(col, m):
                    a[i][k] -= f * a[r][k]
        r += 1
        if r == len(a):
            break
    return r


def kernel_vector(rows, n):
    """Generalized cross product of n-1 vectors in Q^n.

    Nonzero exactly when the rows are linearly independent; then it spans the
    one-dimensional kernel.
    """
    out = []
    for i in range(n):
        minor = [[r[k] for k in range(n) if k != i] for r in rows]
        out.append((-1) ** i * det(minor))
    return out


def dot(u, v):
    return sum((a * b for a, b in zip(u, v)), Fraction(0))


def affine_dimension(points):
    if not points:
        return -1
    p0 = points[0]
    return rank([[a - b for a, b in zip(p, p0)] for p in points[1:]])


def factorial(n):
    out = 1
    for k in range(2, n + 1):
        out *= k
    return out


__all__ = ["as_fraction", "det", "solve", "rank", "kernel_vector", "dot",
           "affine_dimension", "factorial"]
