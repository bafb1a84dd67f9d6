"""Forced van der Pol vector field and critical-manifold geometry.

The fast/slow structure: ``x`` is fast, ``(y, theta)`` are slow, and the
critical manifold ``C`` is the cubic surface ``y + x - x^3/3 = 0``.  The
attracting sheets are ``|x| > 1``, the repelling sheet is ``|x| < 1``, and
the fold curves sit at ``x = +1, y = -2/3`` and ``x = -1, y = +2/3``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidStateError, NoBranchError

TWO_PI = 2.0 * math.pi

# y values carried by the fold curves S+ (x = +1) and S- (x = -1).
FOLD_Y_POS = -2.0 / 3.0
FOLD_Y_NEG = 2.0 / 3.0


def reduce_theta(theta: float) -> float:
    """Canonical reduction of the phase to [0, 1).

    Every operation that stores or returns a phase goes through this one
    function so that repeated reductions are bitwise stable.
    """
    return theta % 1.0


@dataclass(frozen=True)
class Params:
    """Forcing amplitude ``a``, forcing frequency ``omega``, time-scale
    ratio ``eps``.

    ``eps > 0`` is required by the full system; ``eps = 0`` is only
    meaningful for the singular-limit constructions in :mod:`fvdp.slowflow`.
    """

    a: float
    omega: float
    eps: float

    def __post_init__(self):
        if not (self.omega > 0.0):
            raise ValueError(f"omega must be positive, got {self.omega}")
        if self.eps < 0.0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")


@dataclass(frozen=True)
class State:
    """A point (x, y, theta) with theta stored reduced modulo 1."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", reduce_theta(self.theta))

    def astuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class SlowFastSpec:
    """Split form of a slow-fast field: k fast and m slow components.

    ``fast(u, v)`` evaluates the fast equation(s) scaled by eps, ``slow(u, v)``
    the slow ones, with ``u`` the fast and ``v`` the slow variables.
    """

    k: int
    m: int
    fast: callable
    slow: callable


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise InvalidStateError(f"nonfinite state component {v!r}")


def fvdp_field(s: State | tuple, p: Params) -> tuple[float, float, float]:
    """Right-hand side of the forced system at state ``s``.

    Returns ``((y + x - x^3/3)/eps, -x + a*sin(2*pi*theta), omega)``.
    """
    if p.eps <= 0.0:
        raise ValueError("fvdp_field requires eps > 0")
    x, y, theta = s.astuple() if isinstance(s, State) else s
    _check_finite(x, y, theta)
    return (
        (y + x - x * x * x / 3.0) / p.eps,
        -x + p.a * math.sin(TWO_PI * theta),
        p.omega,
    )


def unforced_field(x: float, y: float, eps: float) -> tuple[float, float]:
    """Right-hand side of the unforced oscillator in Lienard form."""
    if eps <= 0.0:
        raise ValueError("unforced_field requires eps > 0")
    _check_finite(x, y)
    return ((y + x - x * x * x / 3.0) / eps, -x)


def critical_residual(x: float, y: float) -> float:
    """Defect ``y + x - x^3/3``; zero exactly on the critical manifold."""
    return y + x - x * x * x / 3.0


def slow_fast_spec(p: Params) -> SlowFastSpec:
    """The forced system in split slow-fast form (k=1 fast, m=2 slow)."""

    def fast(u, v):
        (x,) = u
        y, _theta = v
        return (critical_residual(x, y),)

    def slow(u, v):
        (x,) = u
        _y, theta = v
        return (-x + p.a * math.sin(TWO_PI * theta), p.omega)

    return SlowFastSpec(k=1, m=2, fast=fast, slow=slow)


def _cubic_roots_sorted(y: float) -> tuple[float, ...]:
    """Real roots of ``t^3 - 3t - 3y = 0`` (equivalent to residual = 0),
    ascending.  Three roots for |y| <= 2/3, one otherwise."""
    q = 1.5 * y  # roots satisfy cos/cosh(3u) = q with t = 2*cos/cosh(u)
    if -1.0 <= q <= 1.0:
        phi = math.acos(q)
        r0 = 2.0 * math.cos(phi / 3.0)
        r1 = 2.0 * math.cos(phi / 3.0 - 2.0 * math.pi / 3.0)
        r2 = 2.0 * math.cos(phi / 3.0 - 4.0 * math.pi / 3.0)
        return tuple(sorted((r0, r1, r2)))
    if q > 1.0:
        return (2.0 * math.cosh(math.acosh(q) / 3.0),)
    return (-2.0 * math.cosh(math.acosh(-q) / 3.0),)


def _newton_polish(x: float, y: float, lo: float, hi: float) -> float:
    """Safeguarded Newton on the residual, seeded at ``x``, bracketed in
    [lo, hi].  Bisection fallback keeps the iterate inside the bracket."""
    f_lo = critical_residual(lo, y)
    for _ in range(60):
        f = critical_residual(x, y)
        if abs(f) < 1e-14:
            return x
        df = 1.0 - x * x
        if df != 0.0:
            step = f / df
            x_new = x - step
        else:
            x_new = math.inf  # force bisection
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        f_new = critical_residual(x_new, y)
        if (f_new < 0.0) == (f_lo < 0.0):
            lo, f_lo = x_new, f_new
        else:
            hi = x_new
        if abs(x_new - x) <= 1e-16 * max(1.0, abs(x_new)):
            return x_new
        x = x_new
    return x


def stable_branch_solve(y: float, side: str) -> float:
    """The attracting-branch root of the cubic at height ``y``.

    ``side`` is ``"positive"`` (root with x >= 1, needs y >= -2/3) or
    ``"negative"`` (root with x <= -1, needs y <= 2/3).  The fold height
    itself is treated as part of the branch and returns the double root
    x = +-1 exactly.
    """
    if side == "positive":
        if y < FOLD_Y_POS:
            raise NoBranchError(f"positive branch requires y >= -2/3, got y={y}")
        if y == FOLD_Y_POS:
            return 1.0
        roots = _cubic_roots_sorted(y)
        seed = roots[-1]
        lo, hi = 1.0, 2.0 + 1.5 * abs(y) + 1.0
    elif side == "negative":
        if y > FOLD_Y_NEG:
            raise NoBranchError(f"negative branch requires y <= 2/3, got y={y}")
        if y == FOLD_Y_NEG:
            return -1.0
        roots = _cubic_roots_sorted(y)
        seed = roots[0]
        lo, hi = -(2.0 + 1.5 * abs(y) + 1.0), -1.0
    else:
        raise ValueError(f"side must be 'positive' or 'negative', got {side!r}")
    return _newton_polish(seed, y, lo, hi)


def repelling_branch_solve(y: float) -> float:
    """The middle root (|x| < 1) of the cubic; exists only for |y| < 2/3."""
    if not (-FOLD_Y_NEG < y < FOLD_Y_NEG):
        raise NoBranchError(f"repelling sheet requires |y| < 2/3, got y={y}")
    roots = _cubic_roots_sorted(y)
    return _newton_polish(roots[1], y, -1.0, 1.0)


@dataclass(frozen=True)
class FoldCurve:
    """One fold curve of C: fixed (x, y), crossed with theta in [0, 1)."""

    label: str
    x: float
    y: float


S_PLUS = FoldCurve("S+", 1.0, FOLD_Y_POS)
S_MINUS = FoldCurve("S-", -1.0, FOLD_Y_NEG)


def fold_curves() -> tuple[FoldCurve, FoldCurve]:
    """The two fold curves (x=+1, y=-2/3) and (x=-1, y=+2/3)."""
    return (S_PLUS, S_MINUS)


def jump_target(fold: FoldCurve | str, theta: float) -> State:
    """Landing point of the fast jump leaving a fold curve.

    The jump is horizontal: (y, theta) are preserved bitwise and x lands on
    the opposite attracting branch.  The landing roots are exact because the
    shifted cubic factors as (x -+ 1)^2 (x +- 2).
    """
    label = fold.label if isinstance(fold, FoldCurve) else fold
    if label == "S+":
        return State(-2.0, FOLD_Y_POS, theta)
    if label == "S-":
        return State(2.0, FOLD_Y_NEG, theta)
    raise ValueError(f"unknown fold curve {fold!r}")


def fvdp_rhs(p: Params):
    """Scalar-argument closure of the forced field for the stepper.

    The returned callable has signature ``f(t, x, y, theta) -> (dx, dy, dth)``
    and skips per-call validation; use :func:`fvdp_field` for checked
    evaluation.
    """
    a = p.a
    omega = p.omega
    inv_eps = 1.0 / p.eps
    sin = math.sin

    def rhs(t, x, y, theta):
        return (
            (y + x - x * x * x / 3.0) * inv_eps,
            -x + a * sin(TWO_PI * theta),
            omega,
        )

    return rhs


def unforced_rhs3(eps: float):
    """Unforced field embedded in three components (third held constant)."""
    inv_eps = 1.0 / eps

    def rhs(t, x, y, theta):
        return ((y + x - x * x * x / 3.0) * inv_eps, -x, 0.0)

    return rhs
