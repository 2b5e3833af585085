"""Cone geometry: the momentum cone, its lattice dual, and mode classification.

The momentum cone is the open sector of half-angle arctan(1/sqrt(2))
about the positive p1-axis (the polar description; the Cartesian one in
the source material disagrees about the axis and is not used).  The dual
cone collects the lattice vectors k whose divisor |k.p| stays above
margin*|k||p| throughout the cone.  Modes are classified by whether the
line p.k = 0 meets the cone: SMALL modes get the unit normal inside the
cone as reference momentum, BIG modes get the nearest unit boundary
direction, which has irrational slope and is therefore Diophantine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidClass, ValidationError

BIG = "big"
SMALL = "small"
OUTSIDE_KJ = "outside_kj"

_DEFAULT_HALF_ANGLE = math.atan(1.0 / math.sqrt(2.0))


@dataclass(frozen=True)
class ConeSpec:
    """
    Open momentum cone of given half-angle about a unit axis, with the
    margin constant defining the dual cone.

    The dual cone is nonempty iff cos(half_angle) >= dual_margin, i.e.
    half_angle < arccos(dual_margin); construction enforces this.
    """

    axis: tuple = (1.0, 0.0)
    half_angle: float = _DEFAULT_HALF_ANGLE
    dual_margin: float = 0.5

    def __post_init__(self):
        ax = np.asarray(self.axis, dtype=float)
        n = float(np.linalg.norm(ax))
        if n == 0.0:
            raise ValidationError("cone axis must be nonzero")
        object.__setattr__(self, "axis", tuple(ax / n))
        if not 0.0 < self.half_angle < math.pi / 2.0:
            raise ValidationError("half_angle must lie in (0, pi/2)")
        if not 0.0 < self.dual_margin < 1.0:
            raise ValidationError("dual_margin must lie in (0, 1)")
        if self.half_angle >= math.acos(self.dual_margin):
            raise ValidationError(
                "empty dual cone: need half_angle < arccos(dual_margin)")

    @property
    def axis_angle(self):
        return math.atan2(self.axis[1], self.axis[0])

    def boundary_rays(self):
        """The two unit boundary directions of the closed cone."""
        a = self.axis_angle
        return (
            np.array([math.cos(a + self.half_angle), math.sin(a + self.half_angle)]),
            np.array([math.cos(a - self.half_angle), math.sin(a - self.half_angle)]),
        )

    # ------------------------------------------------------------------
    def in_P(self, p):
        """Strict membership of a momentum vector in the open cone."""
        p = np.asarray(p, dtype=float)
        r = float(np.linalg.norm(p))
        if r == 0.0:
            raise ValidationError("in_P undefined at p = 0")
        phi = math.atan2(p[1], p[0]) - self.axis_angle
        phi = (phi + math.pi) % (2.0 * math.pi) - math.pi
        return abs(phi) < self.half_angle

    def in_K(self, k):
        """
        Dual-cone membership: |k.p| >= margin |k||p| throughout the cone.

        |cos phi(k, p)| is monotone in the momentum angle on each side of
        alignment, so the minimum over the closed convex cone is attained
        on a boundary ray; membership additionally requires k.p to keep
        one sign across the cone (otherwise the divisor crosses zero
        inside).
        """
        k = np.asarray(k, dtype=float)
        nk = float(np.linalg.norm(k))
        if nk == 0.0:
            raise ValidationError("in_K undefined at k = 0")
        b1, b2 = self.boundary_rays()
        c1 = float(k @ b1)
        c2 = float(k @ b2)
        if c1 * c2 <= 0.0:
            return False
        return min(abs(c1), abs(c2)) >= self.dual_margin * nk - 1e-12

    def min_cos_on_cone(self, k):
        """min over the closed cone of |k.p| / (|k||p|), 0 if the sign flips."""
        k = np.asarray(k, dtype=float)
        nk = float(np.linalg.norm(k))
        b1, b2 = self.boundary_rays()
        c1 = float(k @ b1) / nk
        c2 = float(k @ b2) / nk
        if c1 * c2 <= 0.0:
            return 0.0
        return min(abs(c1), abs(c2))

    # ------------------------------------------------------------------
    def perp_unit(self, k):
        """k-perp / |k| with the fixed orientation (-k2, k1)/|k|."""
        k = np.asarray(k, dtype=float)
        return np.array([-k[1], k[0]]) / float(np.linalg.norm(k))

    def nearest_boundary(self, k):
        """
        Unit boundary direction closest to the divisor line p.k = 0.

        Evaluated for the lexicographically positive representative of
        {k, -k} so that k and -k share the same reference momentum (the
        conjugate-symmetry convention of the construction).
        """
        k = tuple(int(x) for x in k)
        if k < tuple(-x for x in k):
            k = tuple(-x for x in k)
        p0 = self.perp_unit(k)
        b1, b2 = self.boundary_rays()
        return b1 if abs(float(b1 @ p0)) >= abs(float(b2 @ p0)) else b2

    def classify(self, k, j=None, kj_set=None):
        """
        Classify a mode as SMALL (divisor line meets the cone) or BIG.

        Parameters
        ----------
        k : lattice vector (nonzero)
        j : int, optional
            Generation index, recorded on the result only.
        kj_set : set, optional
            When given, modes outside it are classified OUTSIDE_KJ.
        """
        k = tuple(int(x) for x in k)
        if all(x == 0 for x in k):
            raise ValidationError("classify undefined at k = 0")
        if kj_set is not None and k not in kj_set:
            return ModeClass(k, OUTSIDE_KJ, None, None, None, j)
        p0 = self.perp_unit(k)
        for cand in (p0, -p0):
            if self.in_P(cand):
                return ModeClass(k, SMALL, cand, cand, cand, j)
        pbar = self.nearest_boundary(k)
        return ModeClass(k, BIG, None, pbar, np.zeros(2), j)

    def gen_Kj(self, j, base_support):
        """
        j-fold Minkowski sums of the given support (sums of exactly j
        elements, repetitions allowed); the zero vector is retained.
        """
        if j < 1:
            raise ValidationError("j must be >= 1")
        base = {tuple(int(x) for x in k) for k in base_support}
        acc = set(base)
        for _ in range(j - 1):
            acc = {tuple(a + b for a, b in zip(u, v)) for u in acc for v in base}
        return acc

    def pbar_diophantine_check(self, k_max):
        """
        Empirical Diophantine constant min |pbar.k'| |k'| over the lattice
        ball 0 < |k'| <= k_max for both boundary directions.
        """
        if k_max < 1:
            raise ValidationError("k_max must be >= 1")
        b1, b2 = self.boundary_rays()
        best = math.inf
        r = int(math.floor(k_max))
        for k1 in range(-r, r + 1):
            for k2 in range(-r, r + 1):
                if k1 == 0 and k2 == 0:
                    continue
                nk = math.hypot(k1, k2)
                if nk > k_max:
                    continue
                for b in (b1, b2):
                    best = min(best, abs(k1 * b[0] + k2 * b[1]) * nk)
        return best


@dataclass
class ModeClass:
    """Classification record for one lattice mode."""

    k: tuple
    cls: str
    p0: Optional[np.ndarray]
    ptilde: Optional[np.ndarray]
    phat: Optional[np.ndarray]
    j: Optional[int] = None

    @property
    def is_small(self):
        return self.cls == SMALL

    @property
    def is_big(self):
        return self.cls == BIG


def surface_root(mode, f_orders, j):
    """
    Deformed-surface reference momentum for a SMALL mode.

    Returns ``(p0, lam2_series)`` with lam2 = 1 - 2 sum_{l<=j} eps^l f_l,
    so the root is p0 * lam2**(1/2); the expansion itself is delegated to
    the radial rescale machinery.
    """
    from .fields import FourierField

    if not mode.is_small:
        raise InvalidClass("surface_root needs a SMALL mode, got %s" % mode.cls)
    if j < 0:
        raise ValidationError("j must be >= 0")
    dim = len(mode.k)
    series = [FourierField.constant(1.0, dim)]
    for l in range(1, j + 1):
        series.append(f_orders[l - 1] * (-2.0))
    return mode.p0, series
