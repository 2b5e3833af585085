"""Exact closed term algebra for momentum-dependent Fourier coefficients.

A :class:`MomentumFn` is a finite sum of terms

    c * p1**a1 * ... * pn**an * |p|**(2m) * prod_j (p.k_j)**(-e_j)

with complex coefficient ``c``, non-negative integer exponents ``a``,
integer radial power ``m`` (possibly negative) and positive integer
denominator exponents ``e_j`` attached to nonzero lattice vectors ``k_j``.
Every coefficient function produced by the normal-form construction
(generators, normalized bracket sums, averages) lives in this algebra,
which is closed under products and partial derivatives.

Values are immutable after canonicalization; all operations are pure.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import MixedDegree, NearPole, TermExplosion

EVAL_TOL = 1e-9       # |p.k| below this is treated as an evaluation at a pole
DROP_TOL = 1e-15      # coefficients below this are dropped on normalization
TERM_CAP = 100_000    # hard cap on stored terms per function
SNAP_TOL = 1e-12      # |p0.k| below this is treated as an exact zero in limits


def _canon_denoms(denoms):
    """
    Merge duplicate denominator vectors and sort lexicographically.

    Vectors are normalized to the lexicographically positive sign
    (p.(-k) = -(p.k)), so the returned sign carries (-1)^e for every
    flipped factor and must multiply the term coefficient.
    """
    acc = {}
    sign = 1
    for k, e in denoms:
        k = tuple(int(x) for x in k)
        if e == 0:
            continue
        neg = tuple(-x for x in k)
        if k < neg:
            k = neg
            if e % 2:
                sign = -sign
        acc[k] = acc.get(k, 0) + int(e)
    out = []
    for k in sorted(acc):
        e = acc[k]
        if e < 0:
            raise ValueError("denominator exponents must stay positive: %r" % ((k, e),))
        if e > 0:
            out.append((k, e))
    return tuple(out), sign


def _merge_canonical(d1, d2):
    """Merge two canonical (sign-normalized, sorted) denominator tuples."""
    i = j = 0
    out = []
    n1, n2 = len(d1), len(d2)
    while i < n1 and j < n2:
        k1, e1 = d1[i]
        k2, e2 = d2[j]
        if k1 == k2:
            out.append((k1, e1 + e2))
            i += 1
            j += 1
        elif k1 < k2:
            out.append(d1[i])
            i += 1
        else:
            out.append(d2[j])
            j += 1
    out.extend(d1[i:])
    out.extend(d2[j:])
    return tuple(out)


def term_degree(key):
    """Radial homogeneity degree of a single term key."""
    alpha, m, denoms = key
    return sum(alpha) + 2 * m - sum(e for _, e in denoms)


class MomentumFn:
    """
    Finite sum of momentum-rational terms.

    The terms are stored as a dict mapping ``(alpha, m, denoms)`` to the
    complex coefficient, where ``alpha`` is a tuple of exponents of the
    momentum components, ``m`` the power of ``|p|**2`` and ``denoms`` a
    sorted tuple of ``(k, e)`` pairs for factors ``(p.k)**-e``.

    Parameters
    ----------
    dim : int
        Number of momentum components.
    terms : dict, optional
        Mapping from term keys to coefficients; canonicalized on entry.
    """

    __slots__ = ("dim", "terms")

    def __init__(self, dim=2, terms=None):
        self.dim = int(dim)
        canon = {}
        if terms:
            for key, c in terms.items():
                if abs(c) < DROP_TOL:
                    continue
                alpha, m, denoms = key
                alpha = tuple(int(a) for a in alpha)
                if len(alpha) != self.dim or any(a < 0 for a in alpha):
                    raise ValueError("bad exponent tuple %r" % (alpha,))
                dn, sign = _canon_denoms(denoms)
                key = (alpha, int(m), dn)
                canon[key] = canon.get(key, 0.0) + sign * complex(c)
        for key in [k for k, c in canon.items() if abs(c) < DROP_TOL]:
            del canon[key]
        if len(canon) > TERM_CAP:
            raise TermExplosion("%d terms exceeds cap %d" % (len(canon), TERM_CAP))
        self.terms = canon

    @classmethod
    def _raw(cls, dim, terms):
        """Trusted constructor: keys already canonical, only drops tiny coefficients."""
        self = object.__new__(cls)
        self.dim = dim
        self.terms = {k: c for k, c in terms.items() if abs(c) >= DROP_TOL}
        if len(self.terms) > TERM_CAP:
            raise TermExplosion("%d terms exceeds cap %d" % (len(self.terms), TERM_CAP))
        return self

    # ------------------------------------------------------------------
    # constructors
    @classmethod
    def zero(cls, dim=2):
        return cls(dim)

    @classmethod
    def constant(cls, c, dim=2):
        zero_alpha = (0,) * dim
        return cls(dim, {(zero_alpha, 0, ()): c})

    @classmethod
    def monomial(cls, c, alpha=None, m=0, denoms=(), dim=2):
        if alpha is None:
            alpha = (0,) * dim
        return cls(len(alpha), {(tuple(alpha), m, tuple(denoms)): c})

    @classmethod
    def coordinate(cls, axis, dim=2):
        alpha = tuple(1 if i == axis else 0 for i in range(dim))
        return cls(dim, {(alpha, 0, ()): 1.0})

    @classmethod
    def radial(cls, m, dim=2):
        """|p|**(2m)"""
        return cls(dim, {((0,) * dim, m, ()): 1.0})

    @classmethod
    def dot(cls, k):
        """The linear polynomial p.k."""
        k = tuple(int(x) for x in k)
        dim = len(k)
        terms = {}
        for i, ki in enumerate(k):
            if ki:
                alpha = tuple(1 if j == i else 0 for j in range(dim))
                terms[(alpha, 0, ())] = float(ki)
        return cls(dim, terms)

    @classmethod
    def inv_dot(cls, k, e=1, c=1.0):
        """c * (p.k)**-e"""
        k = tuple(int(x) for x in k)
        return cls(len(k), {((0,) * len(k), 0, ((k, e),)): c})

    # ------------------------------------------------------------------
    # structure queries
    def is_zero(self):
        return not self.terms

    def term_count(self):
        return len(self.terms)

    def degree(self, strict=False):
        """
        Common radial homogeneity degree, or None when terms mix degrees.

        With ``strict=True`` a mixed-degree function raises
        :class:`MixedDegree` instead.  The zero function reports degree 0.
        """
        degs = {term_degree(key) for key in self.terms}
        if not degs:
            return 0
        if len(degs) == 1:
            return degs.pop()
        if strict:
            raise MixedDegree("degrees %s mixed in one function" % sorted(degs))
        return None

    def per_degree(self):
        """Split into radially homogeneous components, keyed by degree."""
        buckets = {}
        for key, c in self.terms.items():
            buckets.setdefault(term_degree(key), {})[key] = c
        return {d: MomentumFn._raw(self.dim, t) for d, t in buckets.items()}

    def denominator_vectors(self):
        out = set()
        for (_, _, denoms) in self.terms:
            for k, _ in denoms:
                out.add(k)
        return out

    # ------------------------------------------------------------------
    # arithmetic
    def __add__(self, other):
        if isinstance(other, (int, float, complex)):
            other = MomentumFn.constant(other, self.dim)
        acc = dict(self.terms)
        for key, c in other.terms.items():
            acc[key] = acc.get(key, 0.0) + c
        return MomentumFn._raw(self.dim, acc)

    __radd__ = __add__

    def __neg__(self):
        return MomentumFn._raw(self.dim, {k: -c for k, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-other if isinstance(other, MomentumFn) else -complex(other))

    def __mul__(self, other):
        if isinstance(other, (int, float, complex)):
            return MomentumFn._raw(self.dim, {k: c * other for k, c in self.terms.items()})
        acc = {}
        get = acc.get
        for (a1, m1, d1), c1 in self.terms.items():
            for (a2, m2, d2), c2 in other.terms.items():
                alpha = tuple(x + y for x, y in zip(a1, a2))
                if d1 and d2:
                    dn = _merge_canonical(d1, d2)
                elif d1:
                    dn = d1
                else:
                    dn = d2
                key = (alpha, m1 + m2, dn)
                acc[key] = get(key, 0.0) + c1 * c2
        return MomentumFn._raw(self.dim, acc)

    __rmul__ = __mul__

    def conj(self):
        """Complex conjugate (the momentum factors are real)."""
        return MomentumFn._raw(self.dim, {k: c.conjugate() for k, c in self.terms.items()})

    def radial_shift(self, dm):
        """Multiply by |p|**(2*dm)."""
        if dm == 0:
            return self
        return MomentumFn._raw(
            self.dim, {(a, m + dm, d): c for (a, m, d), c in self.terms.items()})

    def with_inv_dot(self, k, e=1):
        """Multiply by (p.k)**-e."""
        k = tuple(int(x) for x in k)
        return MomentumFn(
            self.dim,
            {(a, m, d + ((k, e),)): c for (a, m, d), c in self.terms.items()},
        )

    def d_dp(self, axis):
        """Exact partial derivative with respect to momentum component ``axis``."""
        acc = {}

        def put(key, c):
            acc[key] = acc.get(key, 0.0) + c

        for (alpha, m, denoms), c in self.terms.items():
            # power-law part
            if alpha[axis] > 0:
                a2 = list(alpha)
                a2[axis] -= 1
                put((tuple(a2), m, denoms), c * alpha[axis])
            # radial part: d|p|^2m = 2m p_axis |p|^(2m-2)
            if m != 0:
                a2 = list(alpha)
                a2[axis] += 1
                put((tuple(a2), m - 1, denoms), c * 2 * m)
            # denominators: d(p.k)^-e = -e k_axis (p.k)^-(e+1)
            for i, (k, e) in enumerate(denoms):
                if k[axis] == 0:
                    continue
                d2 = denoms[:i] + ((k, e + 1),) + denoms[i + 1:]
                put((alpha, m, d2), -c * e * k[axis])
        return MomentumFn._raw(self.dim, acc)

    # ------------------------------------------------------------------
    # evaluation
    def eval(self, p, tol=EVAL_TOL):
        """
        Evaluate at a real momentum vector.

        Raises
        ------
        NearPole
            If some denominator satisfies |p.k| < tol.
        """
        p = np.asarray(p, dtype=float)
        total = 0.0 + 0.0j
        nrm2 = float(p @ p)
        dots = {}
        for (alpha, m, denoms), c in self.terms.items():
            val = c
            for i, a in enumerate(alpha):
                if a:
                    val *= p[i] ** a
            if m:
                val *= nrm2 ** m
            for k, e in denoms:
                d = dots.get(k)
                if d is None:
                    d = float(np.dot(p, k))
                    dots[k] = d
                if abs(d) < tol:
                    raise NearPole("p.%s = %.3e at p=%s" % (k, d, p.tolist()))
                val *= d ** (-e)
            total += val
        return total

    def eval_batch(self, P, tol=EVAL_TOL):
        """
        Evaluate on an array of momenta of shape (n, dim).

        Points within ``tol`` of a denominator zero evaluate to NaN instead
        of raising, so grid-based suprema can skip them.
        """
        P = np.atleast_2d(np.asarray(P, dtype=float))
        n = P.shape[0]
        total = np.zeros(n, dtype=complex)
        nrm2 = np.einsum("ij,ij->i", P, P)
        dots = {}
        bad = np.zeros(n, dtype=bool)
        for (alpha, m, denoms), c in self.terms.items():
            val = np.full(n, c, dtype=complex)
            for i, a in enumerate(alpha):
                if a:
                    val *= P[:, i] ** a
            if m:
                val *= nrm2 ** m
            for k, e in denoms:
                d = dots.get(k)
                if d is None:
                    d = P @ np.asarray(k, dtype=float)
                    dots[k] = d
                near = np.abs(d) < tol
                if near.any():
                    bad |= near
                    d = np.where(near, 1.0, d)
                val *= d ** float(-e)
            total += val
        total[bad] = np.nan
        return total

    def pruned(self, grid, floor):
        """
        Drop terms whose largest sampled magnitude on ``grid`` is below
        ``floor``.  Mirrored (conjugate) terms prune identically since the
        grid is real.
        """
        if not self.terms:
            return self
        P = np.atleast_2d(np.asarray(grid, dtype=float))
        n = P.shape[0]
        nrm2 = np.einsum("ij,ij->i", P, P)
        dots = {}
        keep = {}
        for (alpha, m, denoms), c in self.terms.items():
            val = np.full(n, abs(c))
            for i, a in enumerate(alpha):
                if a:
                    val *= np.abs(P[:, i]) ** a
            if m:
                val *= nrm2 ** m
            ok = True
            for k, e in denoms:
                d = dots.get(k)
                if d is None:
                    d = np.abs(P @ np.asarray(k, dtype=float))
                    dots[k] = d
                if np.any(d < 1e-9):
                    ok = False  # near a divisor zero: keep unconditionally
                    break
                val *= d ** float(-e)
            if not ok or float(val.max()) >= floor:
                keep[(alpha, m, denoms)] = c
        if len(keep) == len(self.terms):
            return self
        return MomentumFn._raw(self.dim, keep)

    def eval_limit(self, p0, direction=None, tol=1e-7):
        """
        Evaluate at ``p0`` allowing removable singularities.

        The function is expanded as a truncated Laurent series in ``t``
        along ``p(t) = p0 + t*u``; denominators with p0.k exactly zero (to
        snap tolerance) contribute negative powers that must cancel in the
        sum.  Returns the constant coefficient, i.e. the limit value.

        Raises
        ------
        NearPole
            If the negative Laurent coefficients fail to cancel (a genuine
            pole) or if the direction is degenerate for some denominator.
        """
        p0 = np.asarray(p0, dtype=float)
        if direction is None:
            if self.dim == 2:
                direction = np.array([-p0[1], p0[0]])
            else:
                j = int(np.argmin(np.abs(p0)))
                direction = np.zeros(self.dim)
                direction[j] = 1.0
        u = np.asarray(direction, dtype=float)
        u = u / float(np.linalg.norm(u))

        coeffs = {}  # Laurent exponent -> accumulated coefficient
        scale = 0.0
        for (alpha, m, denoms), c in self.terms.items():
            sing = []
            reg = []
            for k, e in denoms:
                a = float(np.dot(p0, k))
                b = float(np.dot(u, k))
                if abs(a) <= SNAP_TOL * max(1.0, float(np.linalg.norm(k))):
                    if abs(b) <= SNAP_TOL:
                        raise NearPole("degenerate limit direction for k=%s" % (k,))
                    sing.append((b, e))
                else:
                    reg.append((a, b, e))
            drop = sum(e for _, e in sing)
            order = drop + 1  # need coefficients down to t^0
            ser = np.zeros(order, dtype=complex)
            ser[0] = c
            for i, a in enumerate(alpha):
                for _ in range(a):
                    ser = _lin_mul(ser, p0[i], u[i])
            if m:
                quad = np.zeros(order, dtype=complex)
                quad[0] = float(p0 @ p0)
                if order > 1:
                    quad[1] = 2.0 * float(p0 @ u)
                if order > 2:
                    quad[2] = float(u @ u)
                ser = _ser_mul(ser, _ser_int_pow(quad, m, order), order)
            for a, b, e in reg:
                lin = np.zeros(order, dtype=complex)
                lin[0] = a
                if order > 1:
                    lin[1] = b
                ser = _ser_mul(ser, _ser_int_pow(lin, -e, order), order)
            fac = 1.0
            for b, e in sing:
                fac *= b ** (-e)
            ser = ser * fac
            scale = max(scale, float(np.max(np.abs(ser))) if len(ser) else 0.0)
            for j, v in enumerate(ser):
                if v != 0.0:
                    coeffs[j - drop] = coeffs.get(j - drop, 0.0) + v

        bad = max((abs(v) for j, v in coeffs.items() if j < 0), default=0.0)
        if bad > tol * max(scale, 1.0):
            raise NearPole(
                "non-removable pole at p=%s (residue %.3e, scale %.3e)"
                % (p0.tolist(), bad, scale)
            )
        return coeffs.get(0, 0.0 + 0.0j)

    # ------------------------------------------------------------------
    # serialization
    def to_json_obj(self):
        """Canonical JSON form: [re, im, a1..an, m, [[k1..kn, e], ...]] per term."""
        out = []
        for (alpha, m, denoms) in sorted(self.terms):
            c = self.terms[(alpha, m, denoms)]
            out.append(
                [c.real, c.imag]
                + list(alpha)
                + [m, [list(k) + [e] for k, e in denoms]]
            )
        return out

    @classmethod
    def from_json_obj(cls, obj, dim=2):
        terms = {}
        for row in obj:
            re, im = row[0], row[1]
            alpha = tuple(int(a) for a in row[2:2 + dim])
            m = int(row[2 + dim])
            denoms = tuple((tuple(int(x) for x in d[:-1]), int(d[-1])) for d in row[3 + dim])
            terms[(alpha, m, denoms)] = complex(re, im)
        return cls(dim, terms)

    def __repr__(self):
        return "MomentumFn(dim=%d, %d terms)" % (self.dim, len(self.terms))


def _lin_mul(ser, a, b):
    """Multiply a truncated series by the linear factor (a + b t)."""
    out = ser * a
    out[1:] += ser[:-1] * b
    return out


def _ser_mul(x, y, order):
    """Truncated Cauchy product of two coefficient arrays."""
    return np.convolve(x, y)[:order]


def _ser_inv(x, order):
    """Reciprocal power series of x with x[0] != 0."""
    inv = np.zeros(order, dtype=complex)
    inv[0] = 1.0 / x[0]
    for n in range(1, order):
        inv[n] = -inv[0] * np.dot(x[1:n + 1], inv[n - 1::-1][:n])
    return inv


def _ser_int_pow(x, n, order):
    """Integer power of a truncated series (negative n inverts first)."""
    if n < 0:
        x = _ser_inv(x, order)
        n = -n
    out = np.zeros(order, dtype=complex)
    out[0] = 1.0
    base = x.copy()
    while n:
        if n & 1:
            out = _ser_mul(out, base, order)
        n >>= 1
        if n:
            base = _ser_mul(base, base, order)
    return out


def homogeneity_degree(f, strict=False):
    """Module-level alias for :meth:`MomentumFn.degree`."""
    return f.degree(strict=strict)


def radial_rescale_expand(f, g_series, order):
    """
    Expand ``lambda(q, eps)**d * f`` on the deformed energy surface.

    ``lambda**2 = 1 - 2 * sum_l eps^l g_l`` with ``g_series`` holding the
    potential orders ``g_1..g_j`` as Fourier fields; ``d`` is the (pure)
    homogeneity degree of ``f``.  Returns the epsilon-orders ``0..order``
    as Fourier fields whose mode coefficients are scalar multiples of
    ``f``; the order-0 field carries ``f`` itself on the zero mode.

    Raises
    ------
    MixedDegree
        If ``f`` is not radially homogeneous.
    """
    from .fields import FourierField, series_binomial

    d = f.degree(strict=True)
    dim = f.dim
    lam2 = [FourierField.constant(1.0, dim)]
    for l, g in enumerate(g_series[:order], start=1):
        if l > order:
            break
        lam2.append(g * (-2.0))
    while len(lam2) <= order:
        lam2.append(FourierField(dim))
    lampow = series_binomial(lam2, 0.5 * d, order)
    out = []
    for l in range(order + 1):
        field = FourierField(dim)
        for k, coeff in lampow[l].modes.items():
            prod = coeff * f
            if not prod.is_zero():
                field = field.with_mode(k, prod)
        out.append(field)
    return out
