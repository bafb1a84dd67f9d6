"""Singular-limit (eps = 0) machinery: desingularized slow flow, folded
equilibria, and the hybrid flow that concatenates slow arcs with
instantaneous fold jumps and optional canard segments.

The slow flow on a sheet of C, written in (x, theta) coordinates, is

    dx/dt = (-x + a sin(2 pi theta)) / (x^2 - 1),   dtheta/dt = omega.

Rescaling time by (x^2 - 1) removes the fold blow-up and gives the
desingularized flow; the rescaling reverses orientation in the strip
|x| < 1, so true slow-flow trajectories on the repelling sheet run along
desingularized trajectories backwards.

Hybrid legs are integrated in desingularized time with true slow time
carried as a state component; the state layout is (x, t_slow, theta), which
keeps the phase in the integrator's dedicated phase slot.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from .errors import FvdpError, NoBranchError, NondeterministicFoldError
from .model import (
    FOLD_Y_NEG,
    FOLD_Y_POS,
    TWO_PI,
    Params,
    State,
    reduce_theta,
    stable_branch_solve,
)
from .stepping import EventSpec, IntegratorConfig, integrate_with_events

#: Fold arrivals closer than this (in (y, theta) distance) to a folded
#: singularity count as hitting it; below event-location accuracy there is
#: no meaningful way to choose a continuation.
PROXIMITY_TOL = 1e-8

_STALL_SPEED = 1e-9
_FAR_FOLD_MARGIN = 1e-6
_TAU_BUDGET = 1e4

DESING_CONFIG = IntegratorConfig(
    rtol=1e-10, atol=1e-12, h_init=1e-4, h_max=0.02, method="rk23", canard_band=None
)


def desing_field(x: float, theta: float, p: Params) -> tuple[float, float]:
    """Desingularized slow flow: (-x + a sin(2 pi theta), omega (x^2 - 1))."""
    return (-x + p.a * math.sin(TWO_PI * theta), p.omega * (x * x - 1.0))


def slow_field_sheet(x: float, theta: float, p: Params) -> tuple[float, float]:
    """True slow flow in sheet coordinates (singular at the folds)."""
    return ((-x + p.a * math.sin(TWO_PI * theta)) / (x * x - 1.0), p.omega)


def desing_jacobian(x: float, theta: float, p: Params) -> np.ndarray:
    """Jacobian of the desingularized flow."""
    return np.array(
        [
            [-1.0, TWO_PI * p.a * math.cos(TWO_PI * theta)],
            [2.0 * p.omega * x, 0.0],
        ]
    )


def folded_phase(a: float, x: float) -> tuple[float, float]:
    """The two phases with a sin(2 pi theta) = x, reduced mod 1.

    These are the phases at which the desingularized flow has equilibria on
    the fold carrying the given x; they satisfy the equilibrium residual
    identically.
    """
    if abs(a) < abs(x):
        raise ValueError(f"no folded phase: |a|={abs(a)} < |x|={abs(x)}")
    base = math.asin(x / a) / TWO_PI
    return (reduce_theta(base), reduce_theta(0.5 - base))


def folded_phase_alt(a: float, x: float) -> float:
    """Variant closed form sin^-1(x / (2 pi a)), seen in some treatments.

    Kept for comparison only: substituting it into the desingularized flow
    does not zero the phase residual, so :func:`folded_phase` is the form
    used everywhere in this package.  Do not mix the two.
    """
    return math.asin(x / (TWO_PI * a))


@dataclass(frozen=True)
class FoldedEquilibrium:
    """A folded singularity of the desingularized slow flow."""

    x: float
    theta: float
    eigenvalues: tuple[complex, complex]
    kind: str  # saddle | node | focus | degenerate

    @property
    def fold_y(self) -> float:
        return FOLD_Y_POS if self.x > 0 else FOLD_Y_NEG


def classify_folded(eq, p: Params) -> tuple[str, tuple[complex, complex]]:
    """Kind and eigenvalues of a folded equilibrium.

    Accepts a :class:`FoldedEquilibrium` or an (x, theta) pair.  The
    Jacobian is [[-1, 2 pi a cos(2 pi theta)], [2 omega x, 0]]; the kind
    follows from its determinant and discriminant: negative determinant is
    a saddle, positive splits into node/focus by the discriminant's sign,
    and a vanishing determinant is degenerate.
    """
    if isinstance(eq, FoldedEquilibrium):
        x, theta = eq.x, eq.theta
    else:
        x, theta = eq
    if abs(p.a * math.sin(TWO_PI * theta) - x) > 1e-12:
        raise ValueError(f"({x}, {theta}) is not a folded equilibrium of {p}")
    c = TWO_PI * p.a * math.cos(TWO_PI * theta)
    det = -2.0 * p.omega * x * c
    disc = 1.0 - 4.0 * det
    root = cmath.sqrt(complex(disc, 0.0))
    lam1 = (-1.0 + root) / 2.0
    lam2 = (-1.0 - root) / 2.0
    if abs(det) <= 1e-12:
        kind = "degenerate"
    elif det < 0.0:
        kind = "saddle"
    elif disc >= 0.0:
        kind = "node"
    else:
        kind = "focus"
    return kind, (lam1, lam2)


def folded_equilibria(p: Params) -> list[FoldedEquilibrium]:
    """All folded equilibria: four points when |a| > 1 (two per fold curve),
    none when |a| < 1, two degenerate tangencies at |a| = 1."""
    if abs(p.a) < 1.0:
        return []
    out = []
    for x in (1.0, -1.0):
        phases = folded_phase(p.a, x)
        if abs(p.a) == 1.0:
            phases = (phases[0],)
        for theta in sorted(set(phases)):
            kind, lams = classify_folded((x, theta), p)
            out.append(FoldedEquilibrium(x=x, theta=theta, eigenvalues=lams, kind=kind))
    return out


def saddle_eigvec_repelling(eq: FoldedEquilibrium, p: Params) -> tuple[float, float]:
    """Unit vector along the stable eigendirection of a folded saddle,
    oriented into the repelling sheet (|x| decreasing)."""
    if eq.kind != "saddle":
        raise ValueError(f"not a saddle: {eq}")
    lam_minus = min(l.real for l in eq.eigenvalues)
    vx, vt = lam_minus, 2.0 * p.omega * eq.x
    norm = math.hypot(vx, vt)
    vx, vt = vx / norm, vt / norm
    if (eq.x > 0 and vx > 0) or (eq.x < 0 and vx < 0):
        vx, vt = -vx, -vt
    return vx, vt


# --- hybrid flow ---------------------------------------------------------


@dataclass(frozen=True)
class CanardPolicy:
    """How the hybrid flow continues through a folded saddle.

    ``arc_time`` is the slow-time length of the repelling-sheet segment;
    ``exit`` chooses the jump direction at its end ("dip" back to the
    originating side, "slice" to the opposite side), either one choice for
    every canard or a sequence consumed per encounter (last entry repeats).

    ``capture_radius`` is the fold-arrival distance below which a crossing
    counts as entering the saddle's stable manifold.  Shooting at a saddle
    amplifies transverse error like (1/d)^(lam+/|lam-|), so forward
    integration cannot land much closer than ~1e-6; the default leaves
    margin above that floor.
    """

    arc_time: float
    exit: str | Sequence[str] = "slice"
    capture_radius: float = 1e-5
    seed_offset: float = 1e-8

    def exit_for(self, index: int) -> str:
        if isinstance(self.exit, str):
            choice = self.exit
        else:
            choice = self.exit[min(index, len(self.exit) - 1)]
        if choice not in ("dip", "slice"):
            raise ValueError(f"canard exit must be 'dip' or 'slice', got {choice!r}")
        return choice


@dataclass(frozen=True)
class HybridArc:
    """One slow arc on a named sheet; samples are in slow time."""

    sheet: str  # "attracting+" | "attracting-" | "repelling"
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray  # reduced mod 1
    canard: bool = False


@dataclass(frozen=True)
class JumpRecord:
    """An instantaneous fast jump; (y, theta) are preserved bitwise."""

    t: float
    x_from: float
    x_to: float
    y: float
    theta: float
    kind: str  # "fold" | "dip" | "slice"


@dataclass
class HybridTrajectory:
    arcs: list[HybridArc] = dc_field(default_factory=list)
    jumps: list[JumpRecord] = dc_field(default_factory=list)
    reason: str = "completed"

    @property
    def t_end(self) -> float:
        if self.arcs:
            return float(self.arcs[-1].t[-1])
        return 0.0


def singular_orbit_unforced(n_samples: int = 400) -> tuple[HybridTrajectory, float]:
    """The closed singular orbit of the unforced oscillator and its period
    T0 = 3 - 2 ln 2.

    One slow arc runs down the x in [1, 2] branch, a jump carries
    (1, -2/3) to (-2, -2/3), the mirrored arc climbs the x in [-2, -1]
    branch, and a jump from (-1, 2/3) to (2, 2/3) closes the loop.  Time
    along an arc follows from dt = ((x^2 - 1)/x) dx.
    """
    t_half = 1.5 - math.log(2.0)
    period = 2.0 * t_half

    def arc_time(x):
        # slow time from (2, 2/3) down to height x on the positive branch
        return (2.0 - math.log(2.0)) - (0.5 * x * x - math.log(x))

    xs = np.linspace(2.0, 1.0, n_samples)
    ts = np.array([arc_time(x) for x in xs])
    ys = xs**3 / 3.0 - xs
    theta = np.zeros_like(xs)
    arc_pos = HybridArc("attracting+", ts, xs, ys, theta)
    arc_neg = HybridArc("attracting-", ts + t_half, -xs, -ys, theta)
    traj = HybridTrajectory(
        arcs=[arc_pos, arc_neg],
        jumps=[
            JumpRecord(t_half, 1.0, -2.0, FOLD_Y_POS, 0.0, "fold"),
            JumpRecord(period, -1.0, 2.0, FOLD_Y_NEG, 0.0, "fold"),
        ],
    )
    return traj, period


def _desing_rhs(p: Params, sign: float):
    """Desingularized flow with slow time as component 1 and the phase as
    component 2; sign=-1 reverses desingularized time (used both for
    repelling-sheet canard legs and for backward stable-manifold runs)."""
    a, omega = p.a, p.omega
    sin = math.sin

    def rhs(t, x, ts, theta):
        w = x * x - 1.0
        return (
            sign * (-x + a * sin(TWO_PI * theta)),
            sign * w,
            sign * omega * w,
        )

    return rhs


def _speed_event(p: Params):
    a, omega = p.a, p.omega
    sin = math.sin
    tol2 = _STALL_SPEED * _STALL_SPEED

    def e(t, x, ts, theta):
        fx = -x + a * sin(TWO_PI * theta)
        ft = omega * (x * x - 1.0)
        return fx * fx + ft * ft - tol2

    return e


def _circ_dist(t1: float, t2: float) -> float:
    d = abs(reduce_theta(t1) - reduce_theta(t2))
    return min(d, 1.0 - d)


def _run_leg(p, sign, start, events, cfg):
    run = integrate_with_events(
        _desing_rhs(p, sign), start, events, cfg, (0.0, _TAU_BUDGET), store="steps"
    )
    if run.reason != "terminal_event":
        raise FvdpError(f"hybrid leg did not terminate (reason={run.reason})")
    xs = np.asarray(run.states[:, 0], dtype=float)
    tslow = np.asarray(run.states[:, 1], dtype=float)
    theta_raw = np.asarray(run._theta_raw, dtype=float)
    return run, xs, tslow, theta_raw


def hybrid_flow_forced(
    s0: State | tuple,
    p: Params,
    t_max: float,
    canard_policy: Optional[CanardPolicy] = None,
    cfg: IntegratorConfig = DESING_CONFIG,
    proximity_tol: float = PROXIMITY_TOL,
) -> HybridTrajectory:
    """Integrate the singular-limit hybrid flow from a point of C.

    ``s0`` supplies (y, theta) and the sheet via sign(x); x is snapped onto
    the branch root so the arc starts exactly on C.  A fold arrival away
    from every folded singularity applies the horizontal jump; an arrival
    within ``capture_radius`` of one either raises
    :class:`NondeterministicFoldError` (no policy, or a non-saddle
    singularity) or continues onto the repelling sheet as a canard whose
    length and exit direction come from the policy.
    """
    if isinstance(s0, State):
        x0, y0, th0 = s0.astuple()
    else:
        x0, y0, th0 = float(s0[0]), float(s0[1]), float(s0[2])
    if abs(x0) < 1.0:
        raise ValueError(f"hybrid flow must start on an attracting sheet, got x={x0}")
    side = "positive" if x0 > 0 else "negative"
    x0 = stable_branch_solve(y0, side)

    equilibria = folded_equilibria(p)
    capture = canard_policy.capture_radius if canard_policy else proximity_tol
    traj = HybridTrajectory()
    t_now = 0.0
    theta_u = reduce_theta(th0)
    n_canards = 0

    if abs(x0) == 1.0:
        # starting exactly on a fold: jump immediately
        fold_y = FOLD_Y_POS if x0 > 0 else FOLD_Y_NEG
        land_x = -2.0 if x0 > 0 else 2.0
        traj.jumps.append(JumpRecord(0.0, x0, land_x, fold_y, theta_u, "fold"))
        x0 = land_x
        side = "negative" if side == "positive" else "positive"

    while t_now < t_max - 1e-13:
        if side == "positive":
            sheet_label, fold_x, fold_y = "attracting+", 1.0, FOLD_Y_POS
            fold_event = EventSpec(lambda t, x, ts, th: x - 1.0, "falling", True, "fold")
        else:
            sheet_label, fold_x, fold_y = "attracting-", -1.0, FOLD_Y_NEG
            fold_event = EventSpec(lambda t, x, ts, th: x + 1.0, "rising", True, "fold")
        t_left = t_max - t_now
        events = [
            fold_event,
            EventSpec(lambda t, x, ts, th: ts - t_left, "rising", True, "t-cap"),
            EventSpec(_speed_event(p), "falling", True, "stall"),
        ]
        run, xs, tslow, theta_raw = _run_leg(p, 1.0, (x0, 0.0, theta_u), events, cfg)
        traj.arcs.append(
            HybridArc(
                sheet_label,
                t_now + tslow,
                xs,
                xs**3 / 3.0 - xs,
                theta_raw % 1.0,
                canard=False,
            )
        )
        last_label = run.events[-1].label
        theta_u = float(theta_raw[-1])
        t_now += float(tslow[-1])
        if last_label == "t-cap":
            break

        near = None
        for eq in equilibria:
            if eq.x == fold_x and _circ_dist(theta_u, eq.theta) < capture:
                near = eq
                break
        if last_label == "stall" and near is None:
            raise FvdpError(
                f"slow arc stalled away from folded singularities at "
                f"(x={xs[-1]:.6f}, theta={reduce_theta(theta_u):.6f})"
            )
        if near is not None:
            if canard_policy is None:
                raise NondeterministicFoldError(
                    f"reached folded {near.kind} at theta={near.theta:.9f} within "
                    f"{capture:g}; continuation requires a canard policy"
                )
            if near.kind != "saddle":
                raise NondeterministicFoldError(
                    f"reached folded {near.kind} at theta={near.theta:.9f}; only "
                    f"folded saddles admit a canard continuation"
                )
            theta_u, t_now, x0, side = _canard_leg(
                traj, near, p, canard_policy, n_canards, theta_u, t_now, t_max, cfg
            )
            n_canards += 1
            continue

        # generic fold point: horizontal jump, preserving (y, theta) bitwise
        theta_red = reduce_theta(theta_u)
        land_x = -2.0 if side == "positive" else 2.0
        traj.jumps.append(JumpRecord(t_now, fold_x, land_x, fold_y, theta_red, "fold"))
        x0 = land_x
        side = "negative" if side == "positive" else "positive"

    traj.reason = "completed"
    return traj


def _canard_leg(traj, eq, p, policy, index, theta_u, t_now, t_max, cfg):
    """Continue through a folded saddle onto the repelling sheet (true slow
    time there runs against desingularized time), then jump per the
    policy's exit choice.  Returns the updated running phase, time, landing
    x and side."""
    vx, vt = saddle_eigvec_repelling(eq, p)
    theta_s = eq.theta + round(theta_u - eq.theta)  # align with running phase
    x_seed = eq.x + policy.seed_offset * vx
    th_seed = theta_s + policy.seed_offset * vt
    t_left = min(policy.arc_time, t_max - t_now)
    # The repelling-sheet segment may leave the strip through either fold
    # plane before arc_time elapses; the direction filters keep the seed's
    # initial descent from triggering its own guard.
    events = [
        EventSpec(lambda t, x, ts, th: ts - t_left, "rising", True, "arc-end"),
        EventSpec(lambda t, x, ts, th: x - 1.0, "rising", True, "exit-fold+"),
        EventSpec(lambda t, x, ts, th: x + 1.0, "falling", True, "exit-fold-"),
    ]
    run, xs, tslow, theta_raw = _run_leg(p, -1.0, (x_seed, 0.0, th_seed), events, cfg)
    traj.arcs.append(
        HybridArc(
            "repelling",
            t_now + tslow,
            xs,
            xs**3 / 3.0 - xs,
            theta_raw % 1.0,
            canard=True,
        )
    )
    x_exit = float(xs[-1])
    theta_u = float(theta_raw[-1])
    t_now += float(tslow[-1])
    y_exit = x_exit**3 / 3.0 - x_exit

    exit_kind = policy.exit_for(index)
    origin_side = "positive" if eq.x > 0 else "negative"
    if exit_kind == "dip":
        land_side = origin_side
    else:
        land_side = "negative" if origin_side == "positive" else "positive"
    try:
        x_land = stable_branch_solve(y_exit, land_side)
    except NoBranchError:
        # exit height beyond the target fold: only the other branch remains
        land_side = "positive" if land_side == "negative" else "negative"
        x_land = stable_branch_solve(y_exit, land_side)
    traj.jumps.append(
        JumpRecord(t_now, x_exit, x_land, y_exit, reduce_theta(theta_u), exit_kind)
    )
    return theta_u, t_now, x_land, land_side


def canard_entry_point(
    p: Params,
    lead_time: float,
    fold: str = "S+",
    cfg: IntegratorConfig = DESING_CONFIG,
) -> State:
    """A point on an attracting sheet whose hybrid flow enters the folded
    saddle of the given fold curve after ``lead_time`` slow-time units.

    Built by running the desingularized flow backwards from the saddle
    along the attracting-side branch of its stable manifold; transverse
    errors contract in that direction, so the returned point lies on the
    stable manifold to integration accuracy.
    """
    saddles = [
        eq
        for eq in folded_equilibria(p)
        if eq.kind == "saddle" and ((fold == "S+") == (eq.x > 0))
    ]
    if not saddles:
        raise FvdpError(f"no folded saddle on {fold} for {p}")
    eq = saddles[0]
    vx, vt = saddle_eigvec_repelling(eq, p)
    vx, vt = -vx, -vt  # attracting-side branch
    x_seed = eq.x + 1e-10 * vx
    th_seed = eq.theta + 1e-10 * vt
    # Under sign=-1 on |x| > 1 the tracked slow time runs negative; stop
    # once lead_time of backward slow time has accumulated.
    events = [EventSpec(lambda t, x, ts, th: -ts - lead_time, "rising", True, "lead")]
    run, xs, tslow, theta_raw = _run_leg(p, -1.0, (x_seed, 0.0, th_seed), events, cfg)
    x_b = float(xs[-1])
    th_b = float(theta_raw[-1])
    return State(x_b, x_b**3 / 3.0 - x_b, reduce_theta(th_b))
