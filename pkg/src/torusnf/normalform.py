"""Order-by-order construction of the integrable potential and generators.

Per order s the engine assembles the exact epsilon^s content of the
Lie-transformed Hamiltonian (graded nested brackets of the lower-order
data), restricts it to the deformed energy surface, and splits the
resulting degree-0 coefficient functions into

* a potential correction ``f_s`` (the value at the mode's reference
  momentum, sign-reversed),
* a generator ``G0_s`` absorbing the remaining momentum dependence
  through the divisor ``i p.k``,
* the momentum-only average ``h_s`` (the new normal-form term).

The surface-drift correction ``fstar_s`` is reported separately in the
product bookkeeping of the source construction (``fstar_3 = f1 f2``); the
assembled bracket field is split as ``F_s = known_s - fstar_s`` so that
``f_s = -(fstar_s + F_s(ptilde))`` and the homological identity
``(i p.k) G0_s + f_s + fstar_s + F_s = 0`` hold exactly in the algebra.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dfield
from fractions import Fraction

import numpy as np

from .cones import ConeSpec
from .errors import ValidationError
from .fields import (
    FourierField,
    GradedPrune,
    NormParams,
    lie_conjugate,
    norm_xi,
    normalize_deg0,
    polar_grid,
    restrict_series,
    series_zero,
)
from .momentum import MomentumFn

TRUNCATE_FLOOR = 1e-16


# ----------------------------------------------------------------------
# cancellation coefficients


@dataclass(frozen=True)
class CmTable:
    """Exact rational cancellation weights c_0..c_{S-1}."""

    coeffs: tuple

    def __getitem__(self, m):
        return self.coeffs[m]

    def __len__(self):
        return len(self.coeffs)

    def as_floats(self):
        return [float(c) for c in self.coeffs]


def cm_coeffs(S):
    """
    Weights of the collapsed bracket sums: c_0 = 1 and
    c_m = 1/m! - sum_{j=1}^m c_{m-j} / (j+1)!.
    """
    if S < 1:
        raise ValidationError("S must be >= 1")
    cs = [Fraction(1)]
    fact = [Fraction(1)]
    for n in range(1, S + 2):
        fact.append(fact[-1] * n)
    for m in range(1, S):
        val = Fraction(1) / fact[m]
        for j in range(1, m + 1):
            val -= cs[m - j] / fact[j + 1]
        cs.append(val)
    return CmTable(tuple(cs))


def partition_count(s):
    """Number of integer partitions of s (for the summand telemetry)."""
    table = [1] + [0] * s
    for part in range(1, s + 1):
        for n in range(part, s + 1):
            table[n] += table[n - part]
    return table[s]


# ----------------------------------------------------------------------
# seeds


@dataclass
class SeedSpec:
    """
    First-order potential: Fourier table supported in the dual cone with
    conjugate symmetry, plus its analyticity certificate (M, xi0) and a
    non-separability witness mode.
    """

    f1_modes: dict
    M: float
    xi0: float
    cone: ConeSpec = dfield(default_factory=ConeSpec)
    non_separability_witness: tuple = None

    def __post_init__(self):
        self.f1_modes = {tuple(int(x) for x in k): complex(c)
                         for k, c in self.f1_modes.items()}
        if self.non_separability_witness is None:
            for k in self.f1_modes:
                if k[0] != 0 and k[1] != 0:
                    self.non_separability_witness = k
                    break
        self.validate()

    def validate(self):
        if self.M <= 0 or self.xi0 <= 0:
            raise ValidationError("M and xi0 must be positive")
        for k, c in self.f1_modes.items():
            if all(x == 0 for x in k):
                raise ValidationError("seed zero mode must be absent")
            if not self.cone.in_K(k):
                raise ValidationError("seed mode %s lies outside the dual cone" % (k,))
            mk = tuple(-x for x in k)
            if mk not in self.f1_modes or abs(self.f1_modes[mk] - c.conjugate()) > 1e-13:
                raise ValidationError("seed violates conjugate symmetry at %s" % (k,))
            if abs(c) > self.M * math.exp(-self.xi0 * math.hypot(*k)) + 1e-13:
                raise ValidationError("seed mode %s exceeds the decay certificate" % (k,))
        w = self.non_separability_witness
        if w is None or w not in self.f1_modes or w[0] == 0 or w[1] == 0:
            raise ValidationError("seed needs a mode with k1*k2 != 0")

    def field(self):
        return FourierField.from_scalar_modes(self.f1_modes, dim=2)

    @classmethod
    def from_half_table(cls, half, M=None, xi0=1.0, cone=None):
        """Complete ``{k: c}`` with the conjugate modes and certify decay."""
        cone = cone or ConeSpec()
        table = {}
        for k, c in half.items():
            k = tuple(int(x) for x in k)
            table[k] = complex(c)
            table[tuple(-x for x in k)] = complex(c).conjugate()
        if M is None:
            # declared with factor-2 headroom over the honest certificate
            M = 2.0 * max(abs(c) * math.exp(xi0 * math.hypot(*k))
                          for k, c in table.items())
        return cls(table, M, xi0, cone)


def default_seed():
    """The bundled 4-mode seed used by the acceptance checks."""
    return SeedSpec.from_half_table(
        {(3, 1): 0.12, (4, -1): 0.08 + 0.06j}, xi0=1.0)


# ----------------------------------------------------------------------
# state


@dataclass
class NormalFormState:
    """Per-order record of the construction."""

    seed: SeedSpec
    S: int
    cone: ConeSpec
    dim: int = 2
    eps: float = None
    f: dict = dfield(default_factory=dict)        # s -> FourierField (p-independent)
    fstar: dict = dfield(default_factory=dict)    # s -> FourierField
    F: dict = dfield(default_factory=dict)        # s -> FourierField (known - fstar)
    known: dict = dfield(default_factory=dict)    # s -> assembled degree-0 field
    G0: dict = dfield(default_factory=dict)       # s -> FourierField
    h: dict = dfield(default_factory=dict)        # s -> MomentumFn
    xi: dict = dfield(default_factory=dict)
    norm_f: dict = dfield(default_factory=dict)
    norm_G: dict = dfield(default_factory=dict)
    C: dict = dfield(default_factory=dict)
    term_counts: dict = dfield(default_factory=dict)
    comp_counts: dict = dfield(default_factory=dict)   # s -> (compositions, partitions)
    reality: dict = dfield(default_factory=dict)
    wall: dict = dfield(default_factory=dict)
    H_series: list = dfield(default_factory=list)
    G_series: list = dfield(default_factory=list)
    D_series: list = dfield(default_factory=list)
    lam2_series: list = dfield(default_factory=list)
    grid: np.ndarray = None
    sigma: float = 2.0
    prune: GradedPrune = None
    _classes: dict = dfield(default_factory=dict)
    _chains: dict = dfield(default_factory=dict)

    def mode_class(self, k):
        k = tuple(int(x) for x in k)
        if k not in self._classes:
            self._classes[k] = self.cone.classify(k)
        return self._classes[k]

    def ptilde(self, k):
        return self.mode_class(k).ptilde

    def norm_params(self, xi):
        return NormParams(self.sigma, xi, self.grid)

    def eps_max(self):
        """Empirical convergence radius 1 / (max C_s * ||f_1||)."""
        if not self.C:
            return math.inf
        cmax = max(self.C.values())
        base = self.norm_f.get(1, 0.0)
        return math.inf if cmax * base == 0 else 1.0 / (cmax * base)


def xi_schedule(xi0, s):
    """xi_s = xi0 (1 - (1/2) sum_{j<=s} 2^-j); decreases to xi0/2."""
    return xi0 * (1.0 - 0.5 * sum(2.0 ** -j for j in range(1, s + 1)))


# ----------------------------------------------------------------------
# operations


def build_G1(seed):
    """First generator: mode k carries -f_{1,k} / (i p.k)."""
    out = {}
    for k, c in seed.f1_modes.items():
        out[k] = MomentumFn.inv_dot(k, 1, 1j * c)
    return FourierField(2, out)


def _h0_field(dim):
    return FourierField(dim, {(0,) * dim: MomentumFn.radial(1, dim) * 0.5})


def _pad(series, order, dim):
    out = list(series[:order + 1])
    while len(out) <= order:
        out.append(FourierField(dim))
    return out


def _canonical_half(support):
    """One representative per {k, -k} pair, lexicographically positive."""
    seen = set()
    for k in sorted(support):
        mk = tuple(-x for x in k)
        if mk in seen:
            continue
        seen.add(k)
        yield k


def assembled_known(s, state):
    """
    Exact degree-0 content at order s: the normalized bracket field of
    the graded conjugation plus the restriction drift of the lower-order
    leftovers onto the deformed surface.
    """
    dim = state.dim
    E = lie_conjugate(_pad(state.H_series, s, dim), _pad(state.G_series, s, dim), s,
                      prune=state.prune)[s]
    drift = restrict_series(_pad(state.D_series, s, dim),
                            _pad(state.lam2_series, s, dim), s)[s]
    known = normalize_deg0(E) + drift
    if state.prune is not None:
        known = state.prune.apply(known, s)
    return known.truncate(TRUNCATE_FLOOR, state.grid), E


def bare_bracket_sum(b, state):
    """
    The collapsed bracket sum of order b with exact rational weights:
    sum_m c_m sum over compositions n_0+..+n_m=b (parts >= 1) of the
    nested brackets {..{f_{n0}+fstar_{n0}, G0_{n1}}, .., G0_{nm}}.
    """
    key = ("B", b)
    if key in state._chains:
        return state._chains[key]
    cm = cm_coeffs(b + 1)
    dim = state.dim

    def chain(ns):
        if ns in state._chains:
            return state._chains[ns]
        if len(ns) == 1:
            val = state.f[ns[0]] + state.fstar[ns[0]]
        else:
            val = chain(ns[:-1]).poisson(state.G0[ns[-1]])
        state._chains[ns] = val
        return val

    total = FourierField(dim)
    stack = [(n0,) for n0 in range(1, b)]
    while stack:
        ns = stack.pop()
        rem = b - sum(ns)
        if rem == 0:
            m = len(ns) - 1
            if m >= 1:
                total = total + chain(ns) * float(cm[m])
            continue
        for n in range(1, rem + 1):
            stack.append(ns + (n,))
    state._chains[key] = total
    return total


def energy_reduction(s, state):
    """
    Surface-drift correction fstar_s in the product bookkeeping.

    Each lower-order collapsed bracket sum is frozen at the reference
    momenta and re-expanded on consecutive deformed surfaces; the
    epsilon-order of interest couples the degree-d components to the
    potential order s-b with weight d/2.  At s = 3 this reproduces the
    Fourier product f_1 * f_2 exactly; BIG-mode reference momenta ride
    the same radial rescaling as SMALL ones, which is what that product
    identity requires.
    """
    dim = state.dim
    if s < 3:
        return FourierField(dim)
    total = FourierField(dim)
    for b in range(2, s - 1 + 1):
        B = bare_bracket_sum(b, state)
        frozen = {}  # degree -> {k: value}
        for k, fn in B.modes.items():
            if all(x == 0 for x in k):
                continue
            pt = state.ptilde(k)
            for d, comp in fn.per_degree().items():
                if d == 0:
                    continue
                val = comp.eval_limit(pt)
                frozen.setdefault(d, {})[k] = val
        for d, table in frozen.items():
            # exact conjugate symmetry of the frozen tables
            sym = {}
            for k in _canonical_half(table):
                mk = tuple(-x for x in k)
                v = table[k]
                w = table.get(mk)
                if w is not None:
                    v = 0.5 * (v + w.conjugate())
                sym[k] = v
                sym[mk] = v.conjugate()
            R = FourierField.from_scalar_modes(sym, dim)
            total = total + state.f[s - b] * R * (0.5 * d)
    return total


def assemble_Fs(s, state, cm=None):
    """The assembled bracket field F_s = known_s - fstar_s."""
    return state.known[s] - state.fstar[s]


def fix_fs(s, Fs, fstar_s, state):
    """
    Freeze the potential order: f_{s,k} = -(fstar_{s,k} + F_{s,k}(ptilde_k))
    for k != 0, exact conjugate pairs enforced; the zero mode stays free
    and is fixed to 0, with h_s picking up the full average.
    """
    dim = state.dim
    zero = (0,) * dim
    table = {}
    star = fstar_s.scalar_table()
    for k in _canonical_half(set(Fs.modes) - {zero}):
        val = Fs.coeff(k).eval_limit(state.ptilde(k))
        val = -(star.get(k, 0.0) + val)
        mirror = Fs.coeff(tuple(-x for x in k))
        if not mirror.is_zero():
            vm = mirror.eval_limit(state.ptilde(k))
            vm = -(star.get(tuple(-x for x in k), 0.0) + vm)
            val = 0.5 * (val + vm.conjugate())
        table[k] = val
        table[tuple(-x for x in k)] = val.conjugate()
    f_s = FourierField.from_scalar_modes(table, dim)
    h_s = Fs.zero_mode() + fstar_s.zero_mode()
    return f_s, h_s


def solve_G0(s, f_s, fstar_s, Fs, state):
    """
    Generator order: G0_{s,k} = -(f_{s,k} + fstar_{s,k} + F_{s,k}(p)) / (i p.k).

    For SMALL modes the numerator vanishes on the reference ray, so the
    quotient is regular inside the cone; BIG modes have no divisor zero
    there at all.
    """
    dim = state.dim
    zero = (0,) * dim
    fs_table = f_s.scalar_table()
    star = fstar_s.scalar_table()
    out = {}
    for k in set(Fs.modes) | set(fs_table):
        if k == zero:
            continue
        num = Fs.coeff(k) + MomentumFn.constant(
            fs_table.get(k, 0.0) + star.get(k, 0.0), dim)
        if num.is_zero():
            continue
        out[k] = (num * 1j).with_inv_dot(k, 1)
    return FourierField(dim, out)


def homological_residual(s, k, state):
    """
    Value of (i p.k) G0_{s,k} + f_{s,k} + fstar_{s,k} + F_{s,k} at the
    reference momentum, and the size scale of its ingredients.
    """
    k = tuple(int(x) for x in k)
    expr = MomentumFn.dot(k) * 1j * state.G0[s].coeff(k)
    fsv = state.f[s].scalar_table().get(k, 0.0)
    stv = state.fstar[s].scalar_table().get(k, 0.0)
    expr = expr + state.F[s].coeff(k) + MomentumFn.constant(fsv + stv, state.dim)
    pt = state.ptilde(k)
    val = expr.eval_limit(pt)
    scale = abs(fsv) + abs(stv) + abs(state.F[s].coeff(k).eval_limit(pt)) + 1e-30
    return abs(val), scale


# ----------------------------------------------------------------------
# the driver


def run_construction(seed, S, eps=None, sigma=2.0, grid=None, progress=None):
    """
    Execute orders 1..S and return the filled state.

    Records per order the analyticity width xi_s, the norms of f_s and
    G0_s, the growth constants C_s = ||f_s||^{1/s} / ||f_1||, composition
    telemetry and reality audits.  Raises if a reality or homogeneity
    audit fails.
    """
    if S < 1:
        raise ValidationError("S must be >= 1")
    cone = seed.cone
    state = NormalFormState(seed=seed, S=S, cone=cone, eps=eps, sigma=sigma)
    state.grid = polar_grid(cone.half_angle, axis_angle=cone.axis_angle) \
        if grid is None else grid
    state.prune = GradedPrune(state.grid[::7], tau=1e-22, eps_ref=1e-2)
    dim = state.dim
    state.H_series = [_h0_field(dim)]
    state.G_series = [FourierField(dim)]
    state.D_series = [FourierField(dim)]
    state.lam2_series = [FourierField.constant(1.0, dim)]

    norm0 = None
    for s in range(1, S + 1):
        t0 = time.perf_counter()
        known, _E = assembled_known(s, state)
        state.known[s] = known

        if s == 1:
            if not known.is_zero():
                raise ValidationError("order 1 must assemble to zero")
            state.fstar[1] = FourierField(dim)
            state.F[1] = known
            f_s = seed.field()
            h_s = MomentumFn.zero(dim)
        else:
            state.fstar[s] = energy_reduction(s, state)
            state.F[s] = assemble_Fs(s, state)
            f_s, h_s = fix_fs(s, state.F[s], state.fstar[s], state)

        f_s = f_s.truncate(TRUNCATE_FLOOR, state.grid)
        G0_s = solve_G0(s, f_s, state.fstar[s], state.F[s], state)

        # support audit: ever-higher orders live in the Minkowski powers
        kj = cone.gen_Kj(s, seed.f1_modes.keys())
        stray = set(f_s.modes) - kj
        if stray:
            raise ValidationError("order %d support escapes K_%d: %s" % (s, s, stray))
        defects = [f_s.reality_defect(), state.fstar[s].reality_defect(),
                   G0_s.reality_defect()]
        if max(defects) > 1e-10:
            raise ValidationError("reality audit failed at order %d: %s" % (s, defects))

        state.f[s] = f_s
        state.G0[s] = G0_s
        state.h[s] = h_s
        # exact leftover of this order as a function on phase space
        D_s = (_E - known).truncate(TRUNCATE_FLOOR, state.grid)
        state.D_series.append(state.prune.apply(D_s, s))
        state.lam2_series.append(f_s * -2.0)
        state.H_series.append(f_s)
        state.G_series.append(G0_s)

        state.xi[s] = xi_schedule(seed.xi0, s)
        nf = norm_xi(f_s, state.norm_params(state.xi[s]))
        ng = norm_xi(G0_s, state.norm_params(xi_schedule(seed.xi0, s + 1)))
        if s == 1:
            norm0 = norm_xi(f_s, state.norm_params(seed.xi0))
        state.norm_f[s] = nf
        state.norm_G[s] = ng
        state.C[s] = (nf ** (1.0 / s)) / norm0 if norm0 else math.inf
        state.term_counts[s] = G0_s.term_count() + known.term_count()
        state.comp_counts[s] = (2 ** (s - 1), partition_count(s))
        state.reality[s] = max(defects)
        state.wall[s] = time.perf_counter() - t0
        if progress:
            progress(s, state)
    return state


def surface_defect(state, order):
    """
    Audit: restrict the transformed-Hamiltonian leftovers to the deformed
    surface and report the largest coefficient magnitude at each order
    1..order.  Zero (to rounding) when the construction is consistent.
    """
    dim = state.dim
    restricted = restrict_series(_pad(state.D_series, order, dim),
                                 _pad(state.lam2_series, order, dim), order)
    sups = {}
    angles = state.grid[:: max(1, len(state.grid) // 64)]
    for s in range(1, order + 1):
        worst = 0.0
        for k, fn in restricted[s].modes.items():
            vals = fn.eval_batch(angles)
            if not np.isnan(vals).all():
                worst = max(worst, float(np.nanmax(np.abs(vals))))
        sups[s] = worst
    return sups


# ----------------------------------------------------------------------
# the p-dependent variant


def build_p_dependent(seed_g, S, n_dim=2):
    """
    Momentum-dependent easy variant: the generators are prescribed,
    G_{s,k} = g_{s,k}, and the potential absorbs the full bracket content
    so the transformed Hamiltonian is exactly |p|^2/2 order by order, on
    the whole domain and in any dimension.

    Parameters
    ----------
    seed_g : dict
        Either ``{s: FourierField}`` or ``{(s, k): MomentumFn}``.
    S : int
    n_dim : int
    """
    gs = {}
    for key, val in seed_g.items():
        if isinstance(key, int):
            gs[key] = val
        else:
            s, k = key
            gs.setdefault(s, FourierField(n_dim))
            gs[s] = gs[s].with_mode(k, val)
    G_series = [FourierField(n_dim)]
    for s in range(1, S + 1):
        g = gs.get(s, FourierField(n_dim))
        if g.reality_defect() > 1e-10:
            raise ValidationError("g_%d is not real-on-real" % s)
        G_series.append(g)

    state = NormalFormState(seed=None, S=S, cone=None, dim=n_dim)
    state.G_series = G_series
    state.H_series = [_h0_field(n_dim)]
    for s in range(1, S + 1):
        E = lie_conjugate(_pad(state.H_series, s, n_dim), _pad(G_series, s, n_dim), s)[s]
        f_s = -E
        if f_s.reality_defect() > 1e-10:
            raise ValidationError("variant order %d failed the reality audit" % s)
        state.f[s] = f_s
        state.G0[s] = G_series[s]
        state.h[s] = MomentumFn.zero(n_dim)
        state.known[s] = E
        state.fstar[s] = FourierField(n_dim)
        state.H_series.append(f_s)
        state.term_counts[s] = f_s.term_count()
    return state
