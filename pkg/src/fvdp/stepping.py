"""Adaptive one-step integration for stiff three-dimensional fields.

Two schemes share one driver:

* a linearly implicit (Rosenbrock) method, order 3 with an embedded
  order-2 error estimate, L-stable, using an analytic Jacobian -- the
  default for the forced system, whose fast layer is stiff off the slow
  manifold;
* an explicit Bogacki-Shampine 3(2) pair as a cross-check mode, to guard
  against implicit-solver damping artifacts near canards.

Fields must be autonomous: time dependence has to be carried in the state,
as the forced system carries its phase.  Signature conventions are scalar
for speed: ``field(t, x, y, z) -> (dx, dy, dz)`` and
``jac(t, x, y, z) -> 3x3 nested tuples``.

Event functions are continuous scalars ``e(t, x, y, z)``; sign changes are
located on the dense-output polynomial of the accepted step by a
bisection-plus-secant (Illinois) refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    EventRefinementError,
    InvalidStateError,
    StepBudgetError,
    StepUnderflowError,
)
from .model import TWO_PI, Params, State, reduce_theta


def _stiff_gamma() -> float:
    # Real root of g^3 - 3 g^2 + 3/2 g - 1/6 near 0.4358665, the value that
    # makes the three-stage pair L-stable.  Newton from a coarse seed lands
    # on the same double on every run.
    g = 0.44
    for _ in range(50):
        p = ((g - 3.0) * g + 1.5) * g - 1.0 / 6.0
        dp = (3.0 * g - 6.0) * g + 1.5
        g_new = g - p / dp
        if g_new == g:
            break
        g = g_new
    return g


GAMMA = _stiff_gamma()

# Stage coefficients derived from the order conditions with the choices
# alpha21 = alpha31 = 1/2 (so stages 2 and 3 share one field evaluation),
# alpha32 = 0, b = (-1/3, 2/3, 2/3), beta21 = GAMMA.
_A21 = 0.5
_A31 = 0.5
_B1, _B2, _B3 = -1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0
_BETA21 = GAMMA
_BETA32 = (0.25 - 1.5 * GAMMA + 1.5 * GAMMA * GAMMA) / GAMMA
_BETA31 = 0.75 - 1.5 * GAMMA - _BETA21 - _BETA32
_G21 = _BETA21 - _A21
_G31 = _BETA31 - _A31
_G32 = _BETA32
# Embedded order-2 weights (third stage unused) and error weights.
_BH2 = (0.5 - GAMMA) / _BETA21
_BH1 = 1.0 - _BH2
_E1, _E2, _E3 = _B1 - _BH1, _B2 - _BH2, _B3

# Bogacki-Shampine 3(2) error weights (b - bhat).
_RK_E1, _RK_E2, _RK_E3, _RK_E4 = -5.0 / 72.0, 1.0 / 12.0, 1.0 / 9.0, -1.0 / 8.0


@dataclass(frozen=True)
class IntegratorConfig:
    """Tolerances and step policy for one integration run."""

    rtol: float = 1e-10
    atol: float | tuple[float, float, float] = 1e-12
    h_init: float = 1e-6
    h_max: float = 0.05
    max_steps: int = 5_000_000
    method: str = "rosenbrock"
    # Step cap near the jump decision region: while |x| lies in the band the
    # effective h_max is divided by canard_cap_factor.
    canard_band: Optional[tuple[float, float]] = (0.9, 1.1)
    canard_cap_factor: float = 100.0
    event_tol: float = 1e-10
    event_window: float = 1e-12
    safety: float = 0.9
    max_growth: float = 5.0
    min_shrink: float = 0.2

    def atol_tuple(self) -> tuple[float, float, float]:
        a = self.atol
        if isinstance(a, (int, float)):
            return (float(a), float(a), float(a))
        return (float(a[0]), float(a[1]), float(a[2]))

    def validate(self) -> None:
        if not (0.0 < self.rtol < 1.0):
            raise ConfigError(f"rtol must be in (0, 1), got {self.rtol}")
        if any(a <= 0.0 for a in self.atol_tuple()):
            raise ConfigError(f"atol components must be positive, got {self.atol}")
        if not (self.h_max > 0.0):
            raise ConfigError(f"h_max must be positive, got {self.h_max}")
        if not (self.h_init > 0.0):
            raise ConfigError(f"h_init must be positive, got {self.h_init}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.method not in ("rosenbrock", "rk23"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.canard_band is not None:
            lo, hi = self.canard_band
            if not (0.0 <= lo < hi):
                raise ConfigError(f"bad canard band {self.canard_band}")


FIGURE_CONFIG = IntegratorConfig()
SWEEP_CONFIG = IntegratorConfig(rtol=1e-7, atol=1e-9)


@dataclass(frozen=True)
class EventSpec:
    """A located event: continuous scalar function, crossing direction,
    terminal flag and label.  ``accept`` can veto a located crossing (used
    to restrict fold-plane crossings to the neighborhood of the fold)."""

    func: Callable[[float, float, float, float], float]
    direction: str = "any"  # rising | falling | any
    terminal: bool = False
    label: str = "event"
    accept: Optional[Callable[[float, float, float, float], bool]] = None


@dataclass(frozen=True)
class EventRecord:
    t: float
    x: float
    y: float
    theta: float  # reduced mod 1
    label: str


@dataclass
class Trajectory:
    """Accepted-step samples plus the ordered event log.

    ``states`` carries theta reduced mod 1; dense evaluation between
    samples is available through :meth:`sample`.
    """

    t: np.ndarray
    states: np.ndarray
    events: list[EventRecord]
    reason: str
    n_accepted: int
    n_rejected: int
    _theta_raw: np.ndarray = dc_field(repr=False, default=None)
    _derivs: np.ndarray = dc_field(repr=False, default=None)

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    @property
    def final_state(self) -> tuple[float, float, float]:
        x, y, th = self.states[-1]
        return (float(x), float(y), float(th))

    def sample(self, t: float) -> tuple[float, float, float]:
        """Dense evaluation at time ``t`` (cubic Hermite on the enclosing
        accepted step); theta comes back reduced."""
        ts = self.t
        if not (ts[0] <= t <= ts[-1]):
            raise ValueError(f"t={t} outside [{ts[0]}, {ts[-1]}]")
        i = int(np.searchsorted(ts, t, side="right") - 1)
        if i >= len(ts) - 1:
            i = len(ts) - 2
        if i < 0:
            i = 0
        t0, t1 = float(ts[i]), float(ts[i + 1])
        h = t1 - t0
        if h == 0.0:
            x, y, _ = self.states[i]
            return (float(x), float(y), float(self._theta_raw[i] % 1.0))
        u0 = self.states[i]
        u1 = self.states[i + 1]
        f0 = self._derivs[i]
        f1 = self._derivs[i + 1]
        z0 = float(self._theta_raw[i])
        z1 = float(self._theta_raw[i + 1])
        x = _hermite(t, t0, h, float(u0[0]), float(u1[0]), float(f0[0]), float(f1[0]))
        y = _hermite(t, t0, h, float(u0[1]), float(u1[1]), float(f0[1]), float(f1[1]))
        z = _hermite(t, t0, h, z0, z1, float(f0[2]), float(f1[2]))
        return (x, y, reduce_theta(z))

    def event_labels(self) -> list[str]:
        return [e.label for e in self.events]


def _hermite(t, t0, h, u0, u1, f0, f1):
    s = (t - t0) / h
    s2 = s * s
    s3 = s2 * s
    return (
        u0 * (2.0 * s3 - 3.0 * s2 + 1.0)
        + u1 * (3.0 * s2 - 2.0 * s3)
        + h * (f0 * (s3 - 2.0 * s2 + s) + f1 * (s3 - s2))
    )


def jacobian_fvdp(s: State | tuple, p: Params) -> np.ndarray:
    """Analytic Jacobian of the forced field at state ``s``."""
    if p.eps <= 0.0:
        raise ValueError("jacobian_fvdp requires eps > 0")
    x, _y, theta = s.astuple() if isinstance(s, State) else s
    inv_eps = 1.0 / p.eps
    return np.array(
        [
            [(1.0 - x * x) * inv_eps, inv_eps, 0.0],
            [-1.0, 0.0, TWO_PI * p.a * math.cos(TWO_PI * theta)],
            [0.0, 0.0, 0.0],
        ]
    )


def fvdp_jac_closure(p: Params):
    """Scalar-argument Jacobian closure for the stepper."""
    inv_eps = 1.0 / p.eps
    two_pi_a = TWO_PI * p.a
    cos = math.cos

    def jac(t, x, y, theta):
        return (
            ((1.0 - x * x) * inv_eps, inv_eps, 0.0),
            (-1.0, 0.0, two_pi_a * cos(TWO_PI * theta)),
            (0.0, 0.0, 0.0),
        )

    return jac


def finite_difference_jac(field):
    """Forward-difference Jacobian fallback for fields without an analytic
    one (adequate for the non-stiff auxiliary flows)."""
    sq = math.sqrt(2.2e-16)

    def jac(t, x, y, z):
        f0 = field(t, x, y, z)
        dx = sq * max(abs(x), 1.0)
        dy = sq * max(abs(y), 1.0)
        dz = sq * max(abs(z), 1.0)
        fx = field(t, x + dx, y, z)
        fy = field(t, x, y + dy, z)
        fz = field(t, x, y, z + dz)
        return (
            ((fx[0] - f0[0]) / dx, (fy[0] - f0[0]) / dy, (fz[0] - f0[0]) / dz),
            ((fx[1] - f0[1]) / dx, (fy[1] - f0[1]) / dy, (fz[1] - f0[1]) / dz),
            ((fx[2] - f0[2]) / dx, (fy[2] - f0[2]) / dy, (fz[2] - f0[2]) / dz),
        )

    return jac


class _SingularW(Exception):
    pass


def _rosenbrock_step(field, jac, t, x, y, z, fx, fy, fz, h):
    """One linearly implicit step; returns the advance, the embedded error
    vector, and the shared stage-2/3 field value."""
    j = jac(t, x, y, z)
    g = h * GAMMA
    w11 = 1.0 - g * j[0][0]
    w12 = -g * j[0][1]
    w13 = -g * j[0][2]
    w21 = -g * j[1][0]
    w22 = 1.0 - g * j[1][1]
    w23 = -g * j[1][2]
    w31 = -g * j[2][0]
    w32 = -g * j[2][1]
    w33 = 1.0 - g * j[2][2]

    c11 = w22 * w33 - w23 * w32
    c12 = w13 * w32 - w12 * w33
    c13 = w12 * w23 - w13 * w22
    c21 = w23 * w31 - w21 * w33
    c22 = w11 * w33 - w13 * w31
    c23 = w13 * w21 - w11 * w23
    c31 = w21 * w32 - w22 * w31
    c32 = w12 * w31 - w11 * w32
    c33 = w11 * w22 - w12 * w21
    det = w11 * c11 + w12 * c21 + w13 * c31
    scale = (
        max(abs(w11), abs(w12), abs(w13))
        * max(abs(w21), abs(w22), abs(w23))
        * max(abs(w31), abs(w32), abs(w33))
    )
    if abs(det) <= 1e-13 * scale or det == 0.0:
        raise _SingularW
    inv = 1.0 / det

    r1 = h * fx
    r2 = h * fy
    r3 = h * fz
    k1x = (c11 * r1 + c12 * r2 + c13 * r3) * inv
    k1y = (c21 * r1 + c22 * r2 + c23 * r3) * inv
    k1z = (c31 * r1 + c32 * r2 + c33 * r3) * inv

    f2 = field(t + _A21 * h, x + _A21 * k1x, y + _A21 * k1y, z + _A21 * k1z)
    f2x, f2y, f2z = f2

    vx = _G21 * k1x
    vy = _G21 * k1y
    vz = _G21 * k1z
    r1 = h * (f2x + j[0][0] * vx + j[0][1] * vy + j[0][2] * vz)
    r2 = h * (f2y + j[1][0] * vx + j[1][1] * vy + j[1][2] * vz)
    r3 = h * (f2z + j[2][0] * vx + j[2][1] * vy + j[2][2] * vz)
    k2x = (c11 * r1 + c12 * r2 + c13 * r3) * inv
    k2y = (c21 * r1 + c22 * r2 + c23 * r3) * inv
    k2z = (c31 * r1 + c32 * r2 + c33 * r3) * inv

    vx = _G31 * k1x + _G32 * k2x
    vy = _G31 * k1y + _G32 * k2y
    vz = _G31 * k1z + _G32 * k2z
    r1 = h * (f2x + j[0][0] * vx + j[0][1] * vy + j[0][2] * vz)
    r2 = h * (f2y + j[1][0] * vx + j[1][1] * vy + j[1][2] * vz)
    r3 = h * (f2z + j[2][0] * vx + j[2][1] * vy + j[2][2] * vz)
    k3x = (c11 * r1 + c12 * r2 + c13 * r3) * inv
    k3y = (c21 * r1 + c22 * r2 + c23 * r3) * inv
    k3z = (c31 * r1 + c32 * r2 + c33 * r3) * inv

    x1 = x + _B1 * k1x + _B2 * k2x + _B3 * k3x
    y1 = y + _B1 * k1y + _B2 * k2y + _B3 * k3y
    z1 = z + _B1 * k1z + _B2 * k2z + _B3 * k3z
    ex = _E1 * k1x + _E2 * k2x + _E3 * k3x
    ey = _E1 * k1y + _E2 * k2y + _E3 * k3y
    ez = _E1 * k1z + _E2 * k2z + _E3 * k3z
    return x1, y1, z1, ex, ey, ez


def _rk23_step(field, t, x, y, z, fx, fy, fz, h):
    """One Bogacki-Shampine step; returns advance, error vector, and the
    FSAL derivative at the new point."""
    h2 = 0.5 * h
    k2 = field(t + h2, x + h2 * fx, y + h2 * fy, z + h2 * fz)
    h3 = 0.75 * h
    k3 = field(t + h3, x + h3 * k2[0], y + h3 * k2[1], z + h3 * k2[2])
    c1 = 2.0 / 9.0 * h
    c2 = h / 3.0
    c3 = 4.0 / 9.0 * h
    x1 = x + c1 * fx + c2 * k2[0] + c3 * k3[0]
    y1 = y + c1 * fy + c2 * k2[1] + c3 * k3[1]
    z1 = z + c1 * fz + c2 * k2[2] + c3 * k3[2]
    k4 = field(t + h, x1, y1, z1)
    ex = h * (_RK_E1 * fx + _RK_E2 * k2[0] + _RK_E3 * k3[0] + _RK_E4 * k4[0])
    ey = h * (_RK_E1 * fy + _RK_E2 * k2[1] + _RK_E3 * k3[1] + _RK_E4 * k4[1])
    ez = h * (_RK_E1 * fz + _RK_E2 * k2[2] + _RK_E3 * k3[2] + _RK_E4 * k4[2])
    return x1, y1, z1, ex, ey, ez, k4


def _refine_root(phi, ta, fa, tb, fb, tol_f, tol_t):
    """Illinois-type bisection/secant refinement of a bracketed sign change
    of ``phi``.  Returns the located time; raises if the bracket resists."""
    best_t, best_f = (ta, fa) if abs(fa) < abs(fb) else (tb, fb)
    for _ in range(200):
        if fb != fa:
            tm = tb - fb * (tb - ta) / (fb - fa)
        else:
            tm = 0.5 * (ta + tb)
        lo = ta + 0.125 * (tb - ta)
        hi = tb - 0.125 * (tb - ta)
        if not (lo <= tm <= hi):
            tm = 0.5 * (ta + tb)
        fm = phi(tm)
        if abs(fm) < abs(best_f):
            best_t, best_f = tm, fm
        if fm == 0.0:
            return tm
        if (fm < 0.0) == (fa < 0.0):
            ta, fa = tm, fm
            fb *= 0.5  # Illinois trick: shrink the stale endpoint
        else:
            tb, fb = tm, fm
            fa *= 0.5
        width = tb - ta
        if abs(best_f) < tol_f and width < tol_t:
            return best_t
        if width <= 4.4e-16 * max(1.0, abs(ta)):
            if abs(best_f) < tol_f:
                return best_t
            raise EventRefinementError(
                f"event root stuck at |e|={best_f:.3e}", bracket=(ta, tb)
            )
    raise EventRefinementError("event refinement iteration cap", bracket=(ta, tb))


def integrate(
    field,
    s0,
    t_span,
    cfg: IntegratorConfig = FIGURE_CONFIG,
    jac=None,
    store: str = "steps",
) -> Trajectory:
    """Integrate ``field`` from state ``s0`` over ``t_span``.

    ``s0`` may be a :class:`State` or a plain (x, y, z) triple.  Local error
    per step is bounded by the embedded estimate against cfg tolerances;
    dense output is kept for every accepted step when ``store='steps'``.
    """
    return integrate_with_events(field, s0, [], cfg, t_span, jac=jac, store=store)


def integrate_with_events(
    field,
    s0,
    events: Sequence[EventSpec],
    cfg: IntegratorConfig,
    t_span,
    jac=None,
    store: str = "steps",
    track_wraps: bool = False,
) -> Trajectory:
    """Integrate with root-located event detection.

    Every sign change of every event function that matches its direction is
    refined on the dense-output polynomial to |e| < cfg.event_tol within a
    time window cfg.event_window and logged in time order.  Terminal events
    stop the run.  ``track_wraps=True`` additionally logs each upward
    crossing of an integer phase value as a ``wrap`` event.
    """
    cfg.validate()
    if len(t_span) != 2:
        raise ValueError("t_span must be (t0, t1)")
    t0, t_end = float(t_span[0]), float(t_span[1])
    if t_end < t0:
        raise ValueError("t_span must be forward in time")
    if isinstance(s0, State):
        x, y, z = s0.astuple()
    else:
        x, y, z = float(s0[0]), float(s0[1]), float(s0[2])
    if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
        raise InvalidStateError(f"nonfinite initial state {(x, y, z)}")
    if store not in ("steps", "events"):
        raise ValueError(f"store must be 'steps' or 'events', got {store!r}")

    rtol = cfg.rtol
    atol_x, atol_y, atol_z = cfg.atol_tuple()
    h_max = cfg.h_max
    band = cfg.canard_band
    band_lo, band_hi = band if band is not None else (0.0, 0.0)
    h_max_band = h_max / cfg.canard_cap_factor if band is not None else h_max
    max_steps = cfg.max_steps
    safety = cfg.safety
    max_growth = cfg.max_growth
    min_shrink = cfg.min_shrink
    rosen = cfg.method == "rosenbrock"
    if rosen and jac is None:
        jac = finite_difference_jac(field)

    f = field(t0, x, y, z)
    if not all(map(math.isfinite, f)):
        raise InvalidStateError(f"field nonfinite at initial state {(x, y, z)}")
    fx, fy, fz = f

    store_steps = store == "steps"
    ts = [t0]
    samples = [(x, y, z)]
    derivs = [(fx, fy, fz)]
    records: list[EventRecord] = []
    specs = list(events)
    g_cache = [sp.func(t0, x, y, reduce_theta(z)) for sp in specs]
    next_wrap = math.floor(z) + 1.0 if track_wraps else None

    t = t0
    h = min(cfg.h_init, h_max)
    n_accepted = 0
    n_rejected = 0
    last_rejected = False
    reason = "completed"

    def _partial(why: str) -> Trajectory:
        p_ts, p_samples, p_derivs = ts, samples, derivs
        if p_ts[-1] != t:
            p_ts = ts + [t]
            p_samples = samples + [(x, y, z)]
            p_derivs = derivs + [(fx, fy, fz)]
        return _assemble(p_ts, p_samples, p_derivs, records, why, n_accepted, n_rejected)

    while True:
        if t_end - t <= 1e-14 * max(1.0, abs(t_end)):
            reason = "completed"
            break
        if n_accepted + n_rejected >= max_steps:
            raise StepBudgetError(
                f"step budget {max_steps} exhausted at t={t:.6g}",
                trajectory=_partial("step_budget"),
            )
        h_cap = h_max
        if band is not None:
            ax0 = abs(x)
            ax1 = abs(x + h * fx)
            lo = ax0 if ax0 < ax1 else ax1
            hi = ax0 if ax0 > ax1 else ax1
            if hi >= band_lo and lo <= band_hi:
                h_cap = h_max_band
        if h > h_cap:
            h = h_cap
        if h > t_end - t:
            h = t_end - t
        if h < 5e-15 * max(1.0, abs(t)):
            raise StepUnderflowError(
                f"step size underflow (h={h:.3e}) at t={t:.6g}",
                trajectory=_partial("step_underflow"),
            )

        try:
            if rosen:
                x1, y1, z1, ex, ey, ez = _rosenbrock_step(
                    field, jac, t, x, y, z, fx, fy, fz, h
                )
                f1 = None
            else:
                x1, y1, z1, ex, ey, ez, f1 = _rk23_step(
                    field, t, x, y, z, fx, fy, fz, h
                )
        except _SingularW:
            h *= 0.5
            n_rejected += 1
            last_rejected = True
            continue

        if not (
            math.isfinite(x1)
            and math.isfinite(y1)
            and math.isfinite(z1)
            and math.isfinite(ex)
            and math.isfinite(ey)
            and math.isfinite(ez)
        ):
            h *= 0.25
            n_rejected += 1
            last_rejected = True
            continue

        sx = atol_x + rtol * max(abs(x), abs(x1))
        sy = atol_y + rtol * max(abs(y), abs(y1))
        sz = atol_z + rtol * max(abs(z), abs(z1))
        ex /= sx
        ey /= sy
        ez /= sz
        err = math.sqrt((ex * ex + ey * ey + ez * ez) / 3.0)

        if err > 1.0:
            fac = safety * err ** (-1.0 / 3.0)
            if fac < min_shrink:
                fac = min_shrink
            elif fac > 0.5:
                fac = 0.5
            h *= fac
            n_rejected += 1
            last_rejected = True
            continue

        t1 = t + h
        if f1 is None:
            f1 = field(t1, x1, y1, z1)
            if not all(map(math.isfinite, f1)):
                h *= 0.25
                n_rejected += 1
                last_rejected = True
                continue

        # --- event handling on this accepted step ---
        terminal_hit = None
        if specs or next_wrap is not None:
            found = []  # (t_event, order_key, spec_index or -1 for wrap)
            step_args = (t, h, x, y, z, fx, fy, fz, x1, y1, z1, f1)
            for i, sp in enumerate(specs):
                g0 = g_cache[i]
                g1 = sp.func(t1, x1, y1, reduce_theta(z1))
                g_cache[i] = g1
                if g0 == 0.0 or g0 != g0:
                    continue
                if g1 == 0.0:
                    crossed = True
                    rising = g0 < 0.0
                else:
                    crossed = (g0 < 0.0) != (g1 < 0.0)
                    rising = g0 < 0.0
                if not crossed:
                    continue
                if sp.direction == "rising" and not rising:
                    continue
                if sp.direction == "falling" and rising:
                    continue
                te = _locate_event(sp, step_args, g0, g1, cfg)
                found.append((te, i, sp))
            if next_wrap is not None and z1 >= next_wrap:
                m = next_wrap
                while m <= z1:
                    te = _locate_wrap(step_args, m, cfg)
                    found.append((te, -1, None))
                    m += 1.0
                next_wrap = m
            if found:
                found.sort(key=lambda item: (item[0], item[1]))
                for te, _i, sp in found:
                    sx_, sy_, sz_ = _dense_state(step_args, te)
                    th_red = reduce_theta(sz_)
                    if sp is None:
                        records.append(EventRecord(te, sx_, sy_, th_red, "wrap"))
                        continue
                    if sp.accept is not None and not sp.accept(te, sx_, sy_, th_red):
                        continue
                    records.append(EventRecord(te, sx_, sy_, th_red, sp.label))
                    if sp.terminal:
                        terminal_hit = (te, sx_, sy_, sz_)
                        break

        if terminal_hit is not None:
            te, xe, ye, ze = terminal_hit
            fe = field(te, xe, ye, ze)
            ts.append(te)
            samples.append((xe, ye, ze))
            derivs.append(fe)
            n_accepted += 1
            reason = "terminal_event"
            break

        n_accepted += 1
        t, x, y, z = t1, x1, y1, z1
        fx, fy, fz = f1
        if store_steps:
            ts.append(t)
            samples.append((x, y, z))
            derivs.append((fx, fy, fz))

        if err == 0.0:
            fac = max_growth
        else:
            fac = safety * err ** (-1.0 / 3.0)
            if fac > max_growth:
                fac = max_growth
            elif fac < min_shrink:
                fac = min_shrink
        if last_rejected and fac > 1.0:
            fac = 1.0
        h *= fac
        last_rejected = False

    if not store_steps and reason == "completed" and ts[-1] != t:
        ts.append(t)
        samples.append((x, y, z))
        derivs.append((fx, fy, fz))
    return _assemble(ts, samples, derivs, records, reason, n_accepted, n_rejected)


def _dense_state(step_args, te):
    t0, h, x0, y0, z0, fx0, fy0, fz0, x1, y1, z1, f1 = step_args
    x = _hermite(te, t0, h, x0, x1, fx0, f1[0])
    y = _hermite(te, t0, h, y0, y1, fy0, f1[1])
    z = _hermite(te, t0, h, z0, z1, fz0, f1[2])
    return x, y, z


def _locate_event(sp, step_args, g0, g1, cfg):
    t0 = step_args[0]
    t1 = t0 + step_args[1]
    func = sp.func

    def phi(tm):
        xm, ym, zm = _dense_state(step_args, tm)
        return func(tm, xm, ym, reduce_theta(zm))

    return _refine_root(phi, t0, g0, t1, g1, cfg.event_tol, cfg.event_window)


def _locate_wrap(step_args, m, cfg):
    t0 = step_args[0]
    h = step_args[1]
    t1 = t0 + h
    z0 = step_args[4]
    z1 = step_args[10]
    if z1 == m:
        return t1

    def phi(tm):
        _, _, zm = _dense_state(step_args, tm)
        return zm - m

    return _refine_root(phi, t0, z0 - m, t1, z1 - m, cfg.event_tol, cfg.event_window)


def _assemble(ts, samples, derivs, records, reason, n_accepted, n_rejected):
    t_arr = np.array(ts)
    raw = np.array(samples)
    theta_raw = raw[:, 2].copy()
    states = raw
    states[:, 2] = states[:, 2] % 1.0
    return Trajectory(
        t=t_arr,
        states=states,
        events=records,
        reason=reason,
        n_accepted=n_accepted,
        n_rejected=n_rejected,
        _theta_raw=theta_raw,
        _derivs=np.array(derivs),
    )


def _fixed_step_run(field, jac, u0, t0, t1, n, method="rosenbrock"):
    """Fixed-step driver used by the order-verification tests."""
    x, y, z = u0
    h = (t1 - t0) / n
    t = t0
    f = field(t, x, y, z)
    for _ in range(n):
        if method == "rosenbrock":
            x, y, z, _, _, _ = _rosenbrock_step(field, jac, t, x, y, z, *f, h)
        else:
            x, y, z, _, _, _, fn = _rk23_step(field, t, x, y, z, *f, h)
        t += h
        f = field(t, x, y, z)
    return x, y, z
