"""Poincare machinery on the section {x = 0, x decreasing}.

The section follows the quadrilateral construction in the horseshoe
analysis rather than a constant-phase section, so section coordinates are
(theta, y).  A transit's event log records, in time order: fast-jump
onsets, crossings of the critical manifold, fold-plane crossings near the
fold curves, phase wraps, and the terminal section hit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

from .errors import (
    IntegrationError,
    ReturnMapError,
    StepBudgetError,
    TangencyError,
)
from .model import (
    FOLD_Y_NEG,
    FOLD_Y_POS,
    Params,
    critical_residual,
    fvdp_rhs,
    reduce_theta,
)
from .stepping import (
    EventRecord,
    EventSpec,
    FIGURE_CONFIG,
    IntegratorConfig,
    Trajectory,
    fvdp_jac_closure,
    integrate_with_events,
)

#: fold-plane crossings are only labelled when y is this close to the fold
#: curve's height, so mid-jump crossings far from the folds stay unlabelled
FOLD_WINDOW = 0.25

#: slow-time gap between a fold crossing and the next non-wrap event above
#: which the transit is flagged as carrying a canard
CANARD_GAP = 0.05

_NONWRAP = ("x=+1", "x=-1", "cross-C", "jump-left", "jump-right", "section")


@dataclass(frozen=True)
class SectionPoint:
    """A point of the section: phase (reduced mod 1) and slow coordinate.

    Valid section states have x = 0 with negative fast derivative, which
    for this field means y < 0.
    """

    theta: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "theta", reduce_theta(self.theta))


@dataclass
class TransitRecord:
    """Bookkeeping for one application of the return map."""

    time: float
    theta_in: float
    theta_out: float
    y_in: float
    y_out: float
    labels: tuple[str, ...]
    events: list[EventRecord]
    wraps: int
    canard: bool
    canard_gap: float
    n_accepted: int
    n_rejected: int


def standard_events(
    p: Params,
    terminal_section: bool = True,
    fold_window: float = FOLD_WINDOW,
    jump_factor: float = 10.0,
) -> list[EventSpec]:
    """The transit event set: section hit, fold-plane crossings near the
    folds, critical-manifold crossings, and fast-jump onsets.

    Jump onsets fire when the residual leaves a band of half-width
    ``jump_factor * sqrt(eps)`` moving away from the manifold; the sqrt(eps)
    scaling keeps the detector meaningful as eps shrinks.
    """
    thr = jump_factor * math.sqrt(p.eps)

    def res(t, x, y, th):
        return y + x - x * x * x / 3.0

    return [
        EventSpec(lambda t, x, y, th: x, "falling", terminal_section, "section"),
        EventSpec(
            lambda t, x, y, th: x - 1.0,
            "any",
            False,
            "x=+1",
            accept=lambda t, x, y, th: abs(y - FOLD_Y_POS) < fold_window,
        ),
        EventSpec(
            lambda t, x, y, th: x + 1.0,
            "any",
            False,
            "x=-1",
            accept=lambda t, x, y, th: abs(y - FOLD_Y_NEG) < fold_window,
        ),
        EventSpec(res, "any", False, "cross-C"),
        EventSpec(
            lambda t, x, y, th: res(t, x, y, th) - thr, "rising", False, "jump-right"
        ),
        EventSpec(
            lambda t, x, y, th: res(t, x, y, th) + thr, "falling", False, "jump-left"
        ),
    ]


def _initial_jump_label(x, y, theta, p, jump_factor=10.0) -> Optional[str]:
    """Label for a start already in mid-jump (beyond the onset band and
    moving away from the manifold)."""
    r = critical_residual(x, y)
    thr = jump_factor * math.sqrt(p.eps)
    if abs(r) <= thr:
        return None
    dx = r / p.eps
    dy = -x + p.a * math.sin(2.0 * math.pi * theta)
    dr = dy + (1.0 - x * x) * dx
    if r > 0.0 and dr > 0.0:
        return "jump-right"
    if r < 0.0 and dr < 0.0:
        return "jump-left"
    return None


def run_transit(
    s0: tuple[float, float, float],
    p: Params,
    cfg: IntegratorConfig = FIGURE_CONFIG,
    t_budget: float = 50.0,
    tangency_tol: float = 1e-8,
    store: str = "events",
) -> tuple[Trajectory, TransitRecord]:
    """Integrate from ``s0`` to the next transversal section crossing and
    assemble the transit record (shared by the return map and the canard
    classifier)."""
    if p.eps <= 0.0:
        raise ValueError("return map requires eps > 0")
    x0, y0, th0 = float(s0[0]), float(s0[1]), float(s0[2])
    th0 = reduce_theta(th0)
    rhs = fvdp_rhs(p)
    jac = fvdp_jac_closure(p)
    events = standard_events(p)
    try:
        traj = integrate_with_events(
            rhs,
            (x0, y0, th0),
            events,
            cfg,
            (0.0, t_budget),
            jac=jac,
            store=store,
            track_wraps=True,
        )
    except StepBudgetError as exc:
        partial = _make_record(exc.trajectory, p, x0, y0, th0) if exc.trajectory else None
        raise ReturnMapError(
            f"step budget exhausted during transit: {exc}",
            record=partial,
            trajectory=exc.trajectory,
        ) from exc
    except IntegrationError as exc:
        partial = _make_record(exc.trajectory, p, x0, y0, th0) if exc.trajectory else None
        raise ReturnMapError(
            f"integration failed during transit: {exc}",
            record=partial,
            trajectory=exc.trajectory,
        ) from exc
    if traj.reason != "terminal_event" or not traj.events or traj.events[-1].label != "section":
        raise ReturnMapError(
            f"no section return within t_budget={t_budget}",
            record=_make_record(traj, p, x0, y0, th0),
            trajectory=traj,
        )
    xe, ye, the = traj.final_state
    dx_dt = (ye + xe - xe * xe * xe / 3.0) / p.eps
    if not (dx_dt < -tangency_tol):
        raise TangencyError(
            f"section crossing too close to tangential: dx/dt={dx_dt:.3e}"
        )
    record = _make_record(traj, p, x0, y0, th0)
    return traj, record


def _make_record(traj: Trajectory, p: Params, x0, y0, th0) -> TransitRecord:
    events = list(traj.events)
    init_label = _initial_jump_label(x0, y0, th0, p)
    if init_label is not None:
        events.insert(0, EventRecord(0.0, x0, y0, th0, init_label))
    events, canard, max_gap = _inject_canard_labels(events, p)
    wraps = sum(1 for e in events if e.label == "wrap")
    t_end = traj.t_end
    xe, ye, the = traj.final_state
    return TransitRecord(
        time=t_end,
        theta_in=th0,
        theta_out=the,
        y_in=y0,
        y_out=ye,
        labels=tuple(e.label for e in events),
        events=events,
        wraps=wraps,
        canard=canard,
        canard_gap=max_gap,
        n_accepted=traj.n_accepted,
        n_rejected=traj.n_rejected,
    )


def _inject_canard_labels(events, p):
    """Flag fold crossings followed by a long quiet stretch in the jump
    decision region and insert a ``canard`` marker where the residence
    exceeds the gap threshold.  This is the coarse per-transit flag; the
    canard classifier applies the sheet-distance criterion to full
    trajectories."""
    out = list(events)
    canard = False
    max_gap = 0.0
    insertions = []
    for i, ev in enumerate(out):
        if ev.label not in ("x=+1", "x=-1"):
            continue
        nxt = None
        for later in out[i + 1 :]:
            if later.label in _NONWRAP:
                nxt = later
                break
        if nxt is None:
            continue
        gap = nxt.t - ev.t
        if gap > CANARD_GAP:
            canard = True
            if gap > max_gap:
                max_gap = gap
            insertions.append(
                EventRecord(
                    ev.t + CANARD_GAP,
                    ev.x,
                    ev.y,
                    reduce_theta(ev.theta + p.omega * CANARD_GAP),
                    "canard",
                )
            )
    out.extend(insertions)
    out.sort(key=lambda e: e.t)
    return out, canard, max_gap


def return_map(
    pt: SectionPoint,
    p: Params,
    cfg: IntegratorConfig = FIGURE_CONFIG,
    t_budget: float = 50.0,
    tangency_tol: float = 1e-8,
    store: str = "events",
) -> tuple[SectionPoint, TransitRecord]:
    """One application of the return map on {x = 0, x decreasing}."""
    if not (pt.y < 0.0):
        raise ValueError(
            f"section point must have negative fast derivative (y < 0), got y={pt.y}"
        )
    traj, record = run_transit(
        (0.0, pt.y, pt.theta), p, cfg, t_budget, tangency_tol, store
    )
    return SectionPoint(record.theta_out, record.y_out), record


def iterate_map(
    pt: SectionPoint,
    n: int,
    p: Params,
    cfg: IntegratorConfig = FIGURE_CONFIG,
    **kwargs,
) -> tuple[list[SectionPoint], list[TransitRecord]]:
    """Compose the return map n times.  On failure the partial results are
    attached to the raised error as ``completed_points`` / ``completed_records``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    points: list[SectionPoint] = []
    records: list[TransitRecord] = []
    current = pt
    for _ in range(n):
        try:
            current, rec = return_map(current, p, cfg, **kwargs)
        except (ReturnMapError, TangencyError, IntegrationError) as exc:
            exc.completed_points = points
            exc.completed_records = records
            raise
        points.append(current)
        records.append(rec)
    return points, records


def section_distance(p1: SectionPoint, p2: SectionPoint) -> float:
    """Euclidean distance with the phase measured on the circle."""
    dth = abs(p1.theta - p2.theta)
    dth = min(dth, 1.0 - dth)
    return math.hypot(dth, p1.y - p2.y)


@dataclass
class PeriodVerdict:
    """Outcome of attractor-period detection on the return map."""

    status: str  # periodic | aperiodic | inconclusive
    map_period: Optional[int] = None
    subharmonic: Optional[int] = None  # forcing periods (phase wraps) per orbit
    orbit: list[SectionPoint] = dc_field(default_factory=list)
    max_mismatch: Optional[float] = None
    mean_transit: float = 0.0
    n_used: int = 0
    detail: str = ""


def detect_period(
    pt: SectionPoint,
    p: Params,
    cfg: IntegratorConfig = FIGURE_CONFIG,
    n_transient: int = 20,
    n_detect: int = 40,
    tol: float = 1e-6,
    transient_time: Optional[float] = None,
    **kwargs,
) -> PeriodVerdict:
    """Classify the attractor reached from ``pt``.

    After the transient (a fixed iterate count, or a slow-time span when
    ``transient_time`` is given), the map-iterate period is the smallest n
    for which every retained iterate returns within ``tol`` of its n-th
    successor in circle-aware distance.  The subharmonic count is the
    number of phase wraps the orbit accumulates per period, i.e. its length
    in forcing periods; both counts are reported.  Near-tolerance
    ambiguity (a shorter candidate within twice the tolerance) and
    inconsistent wrap counts come back as ``inconclusive``.
    """
    current = pt
    if transient_time is not None:
        elapsed = 0.0
        guard = 0
        while elapsed < transient_time:
            current, rec = return_map(current, p, cfg, **kwargs)
            elapsed += rec.time
            guard += 1
            if guard > 500:
                return PeriodVerdict(
                    status="inconclusive", detail="transient did not settle in 500 iterates"
                )
    elif n_transient > 0:
        pts, _ = iterate_map(current, n_transient, p, cfg, **kwargs)
        current = pts[-1]

    points, records = iterate_map(current, n_detect, p, cfg, **kwargs)
    n_max = n_detect // 2
    mismatches = {}
    for n in range(1, n_max + 1):
        d = 0.0
        for j in range(len(points) - n):
            dj = section_distance(points[j], points[j + n])
            if dj > d:
                d = dj
        mismatches[n] = d
    passing = [n for n in range(1, n_max + 1) if mismatches[n] < tol]
    mean_transit = sum(r.time for r in records) / len(records)
    if not passing:
        return PeriodVerdict(
            status="aperiodic",
            max_mismatch=min(mismatches.values()),
            mean_transit=mean_transit,
            n_used=n_detect,
            orbit=points[-n_max:],
            detail=f"no candidate period <= {n_max} matched within tol={tol}",
        )
    period = passing[0]
    near = [n for n in range(1, period) if mismatches[n] < 2.0 * tol]
    if near:
        return PeriodVerdict(
            status="inconclusive",
            map_period=period,
            max_mismatch=mismatches[period],
            mean_transit=mean_transit,
            n_used=n_detect,
            detail=f"period {period} matched but candidates {near} lie within 2x tol",
        )
    wrap_sums = set()
    for j in range(len(records) - period + 1):
        wrap_sums.add(sum(r.wraps for r in records[j : j + period]))
    if len(wrap_sums) != 1:
        return PeriodVerdict(
            status="inconclusive",
            map_period=period,
            max_mismatch=mismatches[period],
            mean_transit=mean_transit,
            n_used=n_detect,
            detail=f"inconsistent wrap counts over period windows: {sorted(wrap_sums)}",
        )
    return PeriodVerdict(
        status="periodic",
        map_period=period,
        subharmonic=wrap_sums.pop(),
        orbit=points[-period:],
        max_mismatch=mismatches[period],
        mean_transit=mean_transit,
        n_used=n_detect,
    )
