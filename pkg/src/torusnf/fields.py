"""Sparse Fourier series on the torus with momentum-function coefficients.

A :class:`FourierField` maps lattice vectors k to :class:`MomentumFn`
coefficients; it carries the potentials f_s, the corrections f*_s, the
generators G0_s and every Poisson-bracket product of the construction.
The module also provides the graded epsilon-series calculus (products,
brackets, Lie conjugation, binomial powers, surface restriction) used by
the order-by-order construction, and the scale of analytic norms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NearPole
from .momentum import DROP_TOL, MomentumFn


class FourierField:
    """
    Finite map from lattice vectors to momentum-function coefficients.

    Parameters
    ----------
    dim : int
        Dimension of the torus / momentum space.
    modes : dict, optional
        Mapping ``k -> MomentumFn``; zero coefficients are dropped.
    """

    __slots__ = ("dim", "modes", "_dp_cache")

    def __init__(self, dim=2, modes=None):
        self.dim = int(dim)
        self.modes = {}
        self._dp_cache = {}
        if modes:
            for k, fn in modes.items():
                if not fn.is_zero():
                    self.modes[tuple(int(x) for x in k)] = fn

    def dp_table(self, axis):
        """Cached momentum derivatives of every coefficient along ``axis``."""
        tab = self._dp_cache.get(axis)
        if tab is None:
            tab = {k: fn.d_dp(axis) for k, fn in self.modes.items()}
            self._dp_cache[axis] = tab
        return tab

    # ------------------------------------------------------------------
    @classmethod
    def constant(cls, c, dim=2):
        return cls(dim, {(0,) * dim: MomentumFn.constant(c, dim)})

    @classmethod
    def from_scalar_modes(cls, table, dim=2):
        """Build a field with p-independent coefficients from ``{k: c}``."""
        return cls(dim, {k: MomentumFn.constant(c, dim) for k, c in table.items()})

    @classmethod
    def unit_mode(cls, k, coeff=1.0):
        k = tuple(int(x) for x in k)
        return cls(len(k), {k: MomentumFn.constant(coeff, len(k))})

    def with_mode(self, k, fn):
        modes = dict(self.modes)
        k = tuple(int(x) for x in k)
        if fn.is_zero():
            modes.pop(k, None)
        else:
            modes[k] = fn
        return FourierField(self.dim, modes)

    def support(self):
        return set(self.modes)

    def is_zero(self):
        return not self.modes

    def coeff(self, k):
        return self.modes.get(tuple(k), MomentumFn.zero(self.dim))

    def zero_mode(self):
        return self.coeff((0,) * self.dim)

    def term_count(self):
        return sum(fn.term_count() for fn in self.modes.values())

    def scalar_table(self):
        """Return ``{k: c}`` for a field with p-independent coefficients."""
        out = {}
        zero_key = ((0,) * self.dim, 0, ())
        for k, fn in self.modes.items():
            if set(fn.terms) - {zero_key}:
                raise ValueError("mode %s has p-dependent coefficient" % (k,))
            out[k] = fn.terms.get(zero_key, 0.0)
        return out

    # ------------------------------------------------------------------
    # arithmetic
    def __add__(self, other):
        modes = dict(self.modes)
        for k, fn in other.modes.items():
            cur = modes.get(k)
            s = fn if cur is None else cur + fn
            if s.is_zero():
                modes.pop(k, None)
            else:
                modes[k] = s
        return FourierField(self.dim, modes)

    def __sub__(self, other):
        return self + other.__neg__()

    def __neg__(self):
        return FourierField(self.dim, {k: -fn for k, fn in self.modes.items()})

    def __mul__(self, other):
        if isinstance(other, (int, float, complex)):
            return FourierField(self.dim, {k: fn * other for k, fn in self.modes.items()})
        acc = {}
        for k1, f1 in self.modes.items():
            for k2, f2 in other.modes.items():
                k = tuple(a + b for a, b in zip(k1, k2))
                prod = f1 * f2
                cur = acc.get(k)
                acc[k] = prod if cur is None else cur + prod
        return FourierField(self.dim, acc)

    __rmul__ = __mul__

    def conj_field(self):
        """The field of conj(F)(q) = sum conj(F_k) e^{-ik.q}."""
        return FourierField(self.dim, {tuple(-x for x in k): fn.conj() for k, fn in self.modes.items()})

    def map_coeffs(self, fun):
        return FourierField(self.dim, {k: fun(k, fn) for k, fn in self.modes.items()})

    def poisson(self, other):
        """
        Poisson bracket {F, G} = dF/dp . dG/dq - dF/dq . dG/dp.

        The q-derivative of the mode k is multiplication by i*k, so the
        bracket is a convolution over mode pairs.
        """
        dim = self.dim
        dp_self = [self.dp_table(ax) for ax in range(dim)]
        dp_other = [other.dp_table(ax) for ax in range(dim)]
        acc = {}
        for k1, f1 in self.modes.items():
            for k2, f2 in other.modes.items():
                k = tuple(a + b for a, b in zip(k1, k2))
                total = MomentumFn.zero(dim)
                for ax in range(dim):
                    if k2[ax]:
                        total = total + dp_self[ax][k1] * (f2 * complex(0.0, k2[ax]))
                    if k1[ax]:
                        total = total - (f1 * complex(0.0, k1[ax])) * dp_other[ax][k2]
                if total.is_zero():
                    continue
                cur = acc.get(k)
                acc[k] = total if cur is None else cur + total
        return FourierField(dim, acc)

    # ------------------------------------------------------------------
    # audits and size measures
    def reality_defect(self):
        """
        Largest coefficient deviation from F_{-k} = conj(F_k).

        Zero (to rounding) for real-on-real fields.
        """
        worst = 0.0
        for k, fn in self.modes.items():
            mirror = self.modes.get(tuple(-x for x in k))
            target = mirror.conj() if mirror is not None else MomentumFn.zero(self.dim)
            diff = fn - target
            if diff.terms:
                worst = max(worst, max(abs(c) for c in diff.terms.values()))
        return worst

    def sup_mode(self, k, grid):
        """Grid supremum of |F_k| over an (n, dim) array of momenta."""
        fn = self.modes.get(tuple(k))
        if fn is None:
            return 0.0
        vals = fn.eval_batch(grid)
        if np.isnan(vals).all():
            raise NearPole("mode %s has poles across the sampled domain" % (k,))
        return float(np.nanmax(np.abs(vals)))

    def truncate(self, floor, grid):
        """Drop modes whose grid supremum falls below ``floor``."""
        keep = {}
        for k, fn in self.modes.items():
            if self.sup_mode(k, grid) >= floor:
                keep[k] = fn
        return FourierField(self.dim, keep)

    def prune_terms(self, grid, floor):
        """Term-level magnitude pruning of every coefficient (see MomentumFn.pruned)."""
        out = {}
        for k, fn in self.modes.items():
            pf = fn.pruned(grid, floor)
            if not pf.is_zero():
                out[k] = pf
        return FourierField(self.dim, out)

    def eval_q(self, Q, P):
        """Evaluate the field at batched points (Q, P), shapes (n, dim)."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        P = np.atleast_2d(np.asarray(P, dtype=float))
        total = np.zeros(Q.shape[0], dtype=complex)
        for k, fn in self.modes.items():
            phase = np.exp(1j * (Q @ np.asarray(k, dtype=float)))
            total += fn.eval_batch(P) * phase
        return total

    def __repr__(self):
        return "FourierField(dim=%d, %d modes, %d terms)" % (
            self.dim, len(self.modes), self.term_count())


# ----------------------------------------------------------------------
# analytic norms


def polar_grid(half_angle=math.atan(1.0 / math.sqrt(2.0)), n_angles=64, n_radii=16,
               rmin=0.5, rmax=2.0, margin=0.02, axis_angle=0.0):
    """
    Polar sampling of the working cone intersected with rmin <= |p| <= rmax.

    Angles stay strictly inside the cone by ``margin`` (fraction of the
    half-angle), with a small irrational offset so lattice rays are never
    hit exactly.
    """
    span = half_angle * (1.0 - margin)
    offset = 1e-4 * half_angle
    phis = axis_angle + offset + np.linspace(-span, span, n_angles)
    radii = np.linspace(rmin, rmax, n_radii)
    pp, rr = np.meshgrid(phis, radii, indexing="ij")
    return np.column_stack([
        (rr * np.cos(pp)).ravel(),
        (rr * np.sin(pp)).ravel(),
    ])


@dataclass(frozen=True)
class NormParams:
    """
    Parameters of the scale of analytic norms.

    ``sigma`` is the Sobolev weight exponent (must exceed 1 so the algebra
    property holds), ``xi`` the analyticity width, and ``grid`` the sample
    of the compact momentum region used to approximate the supremum.
    """

    sigma: float = 2.0
    xi: float = 0.5
    grid: np.ndarray = field(default_factory=polar_grid)

    def __post_init__(self):
        if self.sigma <= 1.0:
            raise ValueError("sigma must exceed 1 for the algebra property")
        if self.xi <= 0.0:
            raise ValueError("xi must be positive")

    def with_xi(self, xi):
        return NormParams(self.sigma, xi, self.grid)


def norm_xi(F, params):
    """
    Weighted l2 norm sqrt(sum <k>^{2 sigma} e^{2 xi |k|} sup|F_k|^2).

    The supremum over the momentum cone is approximated by the grid
    maximum; raises NearPole if a coefficient has a pole across the whole
    sampled domain.
    """
    total = 0.0
    for k in F.modes:
        absk = math.sqrt(sum(x * x for x in k))
        w = max(1.0, absk) ** (2.0 * params.sigma) * math.exp(2.0 * params.xi * absk)
        total += w * F.sup_mode(k, params.grid) ** 2
    return math.sqrt(total)


# ----------------------------------------------------------------------
# graded epsilon-series calculus


def series_zero(order, dim=2):
    return [FourierField(dim) for _ in range(order + 1)]


def series_add(A, B):
    n = max(len(A), len(B))
    dim = A[0].dim if A else B[0].dim
    out = []
    for i in range(n):
        a = A[i] if i < len(A) else FourierField(dim)
        b = B[i] if i < len(B) else FourierField(dim)
        out.append(a + b)
    return out


def series_scale(A, c):
    return [a * c for a in A]


def series_mul(A, B, order):
    dim = A[0].dim
    out = series_zero(order, dim)
    for i, a in enumerate(A[:order + 1]):
        if a.is_zero():
            continue
        for j, b in enumerate(B[:order + 1 - i]):
            if b.is_zero():
                continue
            out[i + j] = out[i + j] + a * b
    return out


class GradedPrune:
    """
    Grade-dependent term floors for series work.

    A term dropped at grade s has sampled magnitude below tau/eps_ref^s,
    so its contribution to anything evaluated at |eps| <= eps_ref stays
    below tau.  Construction and verification both remain self-consistent
    under this pruning; only quantities below the tau budget are touched.
    """

    def __init__(self, grid, tau=1e-20, eps_ref=1e-2):
        self.grid = np.asarray(grid, dtype=float)
        self.tau = float(tau)
        self.eps_ref = float(eps_ref)

    def apply(self, field, grade):
        if grade <= 0:
            return field
        return field.prune_terms(self.grid, self.tau / self.eps_ref ** grade)

    def apply_series(self, series):
        return [self.apply(f, s) for s, f in enumerate(series)]


def series_bracket(A, B, order, prune=None):
    """Graded Poisson bracket of two epsilon-series."""
    dim = A[0].dim
    out = series_zero(order, dim)
    for i, a in enumerate(A[:order + 1]):
        if a.is_zero():
            continue
        for j, b in enumerate(B[:order + 1 - i]):
            if b.is_zero():
                continue
            out[i + j] = out[i + j] + a.poisson(b)
    if prune is not None:
        out = prune.apply_series(out)
    return out


def series_binomial(A, a, order):
    """(A)^a for a series A with leading coefficient 1, real exponent a."""
    dim = A[0].dim
    u = list(A[:order + 1])
    while len(u) <= order:
        u.append(FourierField(dim))
    u[0] = u[0] + FourierField.constant(-1.0, dim)  # u = A - 1, grade >= 1
    out = series_zero(order, dim)
    out[0] = FourierField.constant(1.0, dim)
    upow = None
    coef = 1.0
    for n in range(1, order + 1):
        coef *= (a - (n - 1)) / n
        upow = u if upow is None else series_mul(upow, u, order)
        if coef != 0.0:
            out = series_add(out, series_scale(upow, coef))
        if all(f.is_zero() for f in upow):
            break
    return out


def lie_conjugate(H_series, G_series, order, prune=None):
    """
    Graded Lie transform sum_n (1/n!) {..{H, G}.., G} up to ``order``.

    ``G_series`` must vanish at grade 0, so each bracket raises the
    minimal grade and the series terminates.
    """
    if not G_series[0].is_zero():
        raise ValueError("generator series must start at grade 1")
    total = list(H_series[:order + 1])
    X = list(H_series[:order + 1])
    fact = 1.0
    for n in range(1, order + 1):
        X = series_bracket(X, G_series, order, prune)
        if all(f.is_zero() for f in X):
            break
        fact *= n
        total = series_add(total, series_scale(X, 1.0 / fact))
    return total


def normalize_deg0(F):
    """
    Radially normalize every coefficient to homogeneity degree 0.

    Each even-degree-d component is multiplied by |p|^{-d}; this is the
    restriction of the field to the unit circle written back in the term
    algebra.
    """
    out = {}
    for k, fn in F.modes.items():
        acc = MomentumFn.zero(F.dim)
        for d, comp in fn.per_degree().items():
            if d % 2:
                raise ValueError("odd homogeneity degree %d in mode %s" % (d, k))
            acc = acc + comp.radial_shift(-d // 2)
        out[k] = acc
    return FourierField(F.dim, out)


def restrict_series(series, lam2_series, order):
    """
    Order-by-order restriction of an epsilon-series of fields to the
    deformed surface p -> p_hat * lambda(q, eps), lambda^2 given as a
    graded series with p-independent coefficients.

    Components of degree d pick up the graded factor lambda^d; the output
    coefficients are all degree-0 momentum functions.
    """
    dim = series[0].dim
    out = series_zero(order, dim)
    lampow_cache = {}

    def lampow(d):
        if d not in lampow_cache:
            lampow_cache[d] = series_binomial(lam2_series, 0.5 * d, order)
        return lampow_cache[d]

    for j, F in enumerate(series[:order + 1]):
        if F.is_zero():
            continue
        for k, fn in F.modes.items():
            for d, comp in fn.per_degree().items():
                if d % 2:
                    raise ValueError("odd homogeneity degree %d in mode %s" % (d, k))
                base = FourierField(dim, {k: comp.radial_shift(-d // 2)})
                if d == 0:
                    out[j] = out[j] + base
                    continue
                lp = lampow(d)
                for l in range(0, order + 1 - j):
                    if lp[l].is_zero():
                        continue
                    out[j + l] = out[j + l] + lp[l] * base
    return out
