"""Relative positioning from per-step displacements, turns and pulse timing.

Line geometry: the walker passes step points ``O_1, O_2, ...`` spaced by the
stride ``s`` along a straight line. ``H`` is the foot of the perpendicular
from the speaker ``A`` onto that line, ``x`` the signed offset of ``O_1`` from
``H`` along the walking direction and ``y = |AH|`` the slant distance from the
speaker to the line, so ``l_i = sqrt(y^2 + (x + (i - 1) s)^2)``. In the
relative frame of the segment (origin ``O_1``, X along the walk) the speaker's
ground projection sits at ``X = -x``, ``Y = sqrt(y^2 - h^2)``.

Directions ``psi`` are measured at the walker from the walking direction to
the speaker: 0 straight ahead, pi straight behind.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .channel import StepTrace
from .errors import (AmbiguousEpoch, DegenerateGeometry, InvalidParams, NegativeRange, NoAnchor,
                     NonConvergence, OutOfRange)
from .pulsedet import PulseArrivals
from .streams import DisplacementSeries
from .waveform import WaveformParams

MAX_ITERATIONS = 100
STEP_TOLERANCE = 1e-6
SEED_GRID = 9
REFINED_SEEDS = 12
SEARCH_X = (-20.0, 20.0)
SEARCH_Y = (0.25, 30.0)
# J^T J condition number above which the minimizer is declared unidentifiable
MAX_CONDITION = 1e12
ANCHOR_MAX_DISTANCE = 8.0
ANCHOR_MAX_RMS = 0.005
SYNC_VALIDITY = 1200.0


class Provenance(str, Enum):
    ESTIMATED = "estimated"
    SYNCHRONIZED = "synchronized"
    DEAD_RECKONED = "dead_reckoned"


@dataclass(frozen=True)
class LineFixInput:
    d: DisplacementSeries
    stride: float
    height: float = 0.0

    def __post_init__(self):
        if not self.stride > 0:
            raise InvalidParams("stride must be positive")
        if self.height < 0:
            raise InvalidParams("height must be non-negative")
        if int(np.sum(self.d.valid)) < 2:
            raise InvalidParams("need at least two usable displacements")


@dataclass(frozen=True)
class PositionFix:
    """Speaker position relative to a straight walking segment.

    ``distances[i]`` and ``directions[i]`` are the horizontal distance ``L`` and
    direction ``psi'`` at step point ``i`` (one more point than displacements).
    """

    x: float
    y: float
    height: float
    stride: float
    distances: np.ndarray
    directions: np.ndarray
    provenance: Provenance = Provenance.ESTIMATED
    residual: float = 0.0
    n_used: int = 0
    step_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def X(self) -> float:
        return -self.x

    @property
    def Y(self) -> float:
        return math.sqrt(max(self.y * self.y - self.height * self.height, 0.0))

    @property
    def rms(self) -> float:
        return math.sqrt(self.residual / self.n_used) if self.n_used else 0.0

    def slant_distance(self, index: int = 0) -> float:
        u = self.x + index_offset(index, self.distances.size) * self.stride
        return math.sqrt(self.y * self.y + u * u)

    def to_ground(self, t: float | None = None) -> "GroundFix":
        return GroundFix(self.X, self.Y, self.provenance, t, self.residual)


def index_offset(index: int, n_points: int) -> int:
    if not -n_points <= index < n_points:
        raise OutOfRange(f"step point {index} outside 0..{n_points - 1}")
    return index % n_points


@dataclass(frozen=True)
class GroundFix:
    """Ground-plane position ``(g_x, g_y)`` of the speaker in the walker's relative frame."""

    gx: float
    gy: float
    provenance: Provenance = Provenance.ESTIMATED
    t: float | None = None
    residual: float = float("nan")

    def __post_init__(self):
        if not (math.isfinite(self.gx) and math.isfinite(self.gy)):
            raise InvalidParams("ground fix must be finite")

    @property
    def distance(self) -> float:
        return math.hypot(self.gx, self.gy)

    @property
    def bearing(self) -> float:
        return math.atan2(self.gy, self.gx)


@dataclass(frozen=True)
class SyncState:
    """Sending time of a reference pulse; later pulses leave every ``period`` seconds."""

    t_s: float
    period: float
    valid_until: float

    def __post_init__(self):
        if not math.isfinite(self.t_s) or not self.period > 0:
            raise InvalidParams("sync needs a finite sending time and a positive period")


# ---- least squares engine ---------------------------------------------------

def levenberg_marquardt(residual: Callable[[np.ndarray], np.ndarray], jacobian: Callable[[np.ndarray], np.ndarray],
                        p0, max_iter: int = MAX_ITERATIONS, step_tol: float = STEP_TOLERANCE) -> tuple[np.ndarray, float]:
    """Damped Gauss-Newton; returns ``(parameters, sum of squares)``.

    Starts nearly undamped and raises the damping only when a step fails to
    reduce the cost. Stops once an accepted step is shorter than ``step_tol``.
    """
    p = np.asarray(p0, dtype=float).copy()
    r = residual(p)
    cost = float(r @ r)
    lam = 1e-6
    for _ in range(max_iter):
        J = jacobian(p)
        g = J.T @ r
        A = J.T @ J
        diag = np.maximum(np.diag(A), 1e-12)
        while True:
            try:
                step = -np.linalg.solve(A + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                p_new = p + step
                r_new = residual(p_new)
                cost_new = float(r_new @ r_new)
                if cost_new <= cost:
                    break
            lam *= 4.0
            if lam > 1e12:
                # no descent possible: stationary point
                return p, cost
        p, r, cost = p_new, r_new, cost_new
        lam = max(lam / 4.0, 1e-9)
        if float(np.linalg.norm(step)) < step_tol:
            return p, cost
    raise NonConvergence(f"no convergence within {max_iter} iterations")


def _multistart(residual, jacobian, seeds: Iterable[np.ndarray], keep: int = REFINED_SEEDS) -> tuple[np.ndarray, float]:
    """Refine the ``keep`` lowest-cost seeds and return the best minimizer."""
    seeds = list(seeds)
    costs = []
    for s in seeds:
        r = residual(s)
        costs.append(float(r @ r) if np.all(np.isfinite(r)) else math.inf)
    order = np.argsort(costs, kind="stable")[:keep]
    best, best_cost = None, math.inf
    failures = 0
    for s in (seeds[i] for i in order):
        try:
            p, c = levenberg_marquardt(residual, jacobian, s)
        except NonConvergence:
            failures += 1
            continue
        if c < best_cost:
            best, best_cost = p, c
    if best is None:
        raise NonConvergence(f"all {failures} starting points failed to converge")
    return best, best_cost


def _check_identifiable(J: np.ndarray) -> None:
    A = J.T @ J
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0 or s[-1] <= s[0] / MAX_CONDITION:
        raise DegenerateGeometry("displacements do not pin down the speaker position "
                                 f"(normal matrix condition {s[0] / max(s[-1], 1e-300):.3g})")


# ---- line solver -----------------------------------------------------------

def _offsets(n_points: int, stride: float) -> np.ndarray:
    return np.arange(n_points) * stride


def line_residuals(x: float, y: float, d, stride: float) -> np.ndarray:
    """``e_i = l_i - l_{i+1} - d_i`` for every displacement (NaN where ``d`` is gated)."""
    d = np.asarray(d, dtype=float)
    u = x + _offsets(d.size + 1, stride)
    l = np.sqrt(y * y + u * u)
    return l[:-1] - l[1:] - d


def line_cost(x: float, y: float, d, stride: float) -> float:
    e = line_residuals(x, y, d, stride)
    return float(np.nansum(e * e))


def line_gradient(x: float, y: float, d, stride: float) -> np.ndarray:
    """Analytic gradient of :func:`line_cost` with respect to ``(x, y)``."""
    d = np.asarray(d, dtype=float)
    u = x + _offsets(d.size + 1, stride)
    l = np.sqrt(y * y + u * u)
    e = l[:-1] - l[1:] - d
    ok = np.isfinite(e)
    dx = u[:-1] / l[:-1] - u[1:] / l[1:]
    dy = y / l[:-1] - y / l[1:]
    return np.array([2 * np.sum(e[ok] * dx[ok]), 2 * np.sum(e[ok] * dy[ok])])


def _line_problem(d: np.ndarray, stride: float, h: float):
    ok = np.isfinite(d)
    u0 = _offsets(d.size + 1, stride)
    dd = d[ok]

    def parts(p):
        x, Y = p
        u = x + u0
        l = np.sqrt(Y * Y + h * h + u * u)
        return u, l

    def residual(p):
        u, l = parts(p)
        return (l[:-1] - l[1:])[ok] - dd

    def jacobian(p):
        u, l = parts(p)
        Y = p[1]
        jx = u[:-1] / l[:-1] - u[1:] / l[1:]
        jy = Y / l[:-1] - Y / l[1:]
        return np.column_stack([jx[ok], jy[ok]])

    return residual, jacobian


def _fill_fix(x: float, y: float, h: float, stride: float, n_points: int, provenance: Provenance,
              residual: float, n_used: int, step_times) -> PositionFix:
    u = x + _offsets(n_points, stride)
    L = np.sqrt(np.maximum(u * u + y * y - h * h, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_psi = np.where(L > 0, -u / L, np.nan)
    psi = np.arccos(np.clip(cos_psi, -1.0, 1.0))
    times = np.asarray(step_times if step_times is not None else [], dtype=float)
    if times.size not in (0, n_points):
        times = np.zeros(0)
    return PositionFix(float(x), float(y), h, stride, L, psi, provenance, float(residual), n_used, times)


def solve_line(inp: LineFixInput) -> PositionFix:
    """Least-squares ``(x, y)`` from one straight run of displacements.

    Minimizes the sum of squared ``e_i`` over usable (non-NaN) steps, from a
    9 x 9 grid of starting points, then rejects minimizers the data cannot
    pin down.
    """
    d = np.asarray(inp.d.d, dtype=float)
    s, h = inp.stride, inp.height
    residual, jacobian = _line_problem(d, s, h)
    xs = np.linspace(*SEARCH_X, SEED_GRID)
    ys = np.linspace(*SEARCH_Y, SEED_GRID)
    seeds = (np.array([a, b]) for a in xs for b in ys)
    p, cost = _multistart(residual, jacobian, seeds)
    _check_identifiable(jacobian(p))
    x, Y = float(p[0]), abs(float(p[1]))
    y = math.sqrt(Y * Y + h * h)
    return _fill_fix(x, y, h, s, d.size + 1, Provenance.ESTIMATED, cost, int(np.sum(np.isfinite(d))),
                     inp.d.step_times if inp.d.step_times.size else None)


# ---- multi-segment solver --------------------------------------------------

@dataclass(frozen=True)
class Segment:
    """One straight run: its displacements and heading relative to the first run."""

    d: DisplacementSeries
    heading: float
    n_steps: int | None = None

    def __post_init__(self):
        n = self.d.d.size if self.n_steps is None else int(self.n_steps)
        if n != self.d.d.size:
            raise InvalidParams(f"segment has {self.d.d.size} displacements for {n} steps")
        object.__setattr__(self, "n_steps", n)


def chain_points(segments: Sequence[Segment], stride: float) -> list[np.ndarray]:
    """Step points of each segment, chained head to tail from the origin."""
    out = []
    start = np.zeros(2)
    for seg in segments:
        direction = np.array([math.cos(seg.heading), math.sin(seg.heading)])
        pts = start + np.arange(seg.n_steps + 1)[:, None] * stride * direction
        out.append(pts)
        start = pts[-1]
    return out


def _multi_problem(segments: Sequence[Segment], stride: float, h: float):
    pts = np.vstack([p for p in chain_points(segments, stride)])
    first = []
    d_all = []
    offset = 0
    for seg in segments:
        first.append(offset + np.arange(seg.n_steps))
        d_all.append(np.asarray(seg.d.d, float))
        offset += seg.n_steps + 1
    i0 = np.concatenate(first)
    d_all = np.concatenate(d_all)
    ok = np.isfinite(d_all)
    i0, d_all = i0[ok], d_all[ok]
    a, b = pts[i0], pts[i0 + 1]

    def dist(g, q):
        return np.maximum(np.sqrt(np.sum((q - g) ** 2, axis=1) + h * h), 1e-12)

    def residual(g):
        return dist(g, a) - dist(g, b) - d_all

    def jacobian(g):
        la, lb = dist(g, a), dist(g, b)
        return (g - a) / la[:, None] - (g - b) / lb[:, None]

    return residual, jacobian, pts


def solve_multi_segment(segments: Sequence[Segment], stride: float, height: float = 0.0) -> GroundFix:
    """Speaker ground position ``G`` pooled over a chain of straight runs.

    Stride points come from the step count and turn angles. A single straight
    run cannot tell the two sides of the line apart; the solution with
    ``g_y >= 0`` is reported then.
    """
    if not segments:
        raise InvalidParams("need at least one segment")
    if not stride > 0 or height < 0:
        raise InvalidParams("stride must be positive and height non-negative")
    residual, jacobian, pts = _multi_problem(segments, stride, height)
    if residual(np.zeros(2)).size < 2:
        raise InvalidParams("need at least two usable displacements")
    lo = pts.min(axis=0) + SEARCH_X[0]
    hi = pts.max(axis=0) + SEARCH_X[1]
    gx = np.linspace(lo[0], hi[0], SEED_GRID)
    gy = np.linspace(lo[1], hi[1], SEED_GRID)
    seeds = (np.array([a, b]) for a in gx for b in gy)
    g, cost = _multistart(residual, jacobian, seeds)
    _check_identifiable(jacobian(g))
    headings = {round(math.fmod(s.heading, 2 * math.pi), 12) for s in segments if s.n_steps}
    if len(headings) <= 1 and segments:
        # mirror ambiguity about a single walking line: pick the left side
        zeta = segments[0].heading
        rot = np.array([[math.cos(zeta), math.sin(zeta)], [-math.sin(zeta), math.cos(zeta)]])
        local = rot @ g
        if local[1] < 0:
            local[1] = -local[1]
            g = rot.T @ local
    return GroundFix(float(g[0]), float(g[1]), Provenance.ESTIMATED, None, float(cost))


# ---- synchronization -------------------------------------------------------

def sync_from_arrival(distance: float, arrival: float, params: WaveformParams, period: float | None = None,
                      validity: float = SYNC_VALIDITY) -> SyncState:
    """``t_s = arrival - distance / v_a``; later pulses every ``period`` (default ``T2``)."""
    period = params.cycle_period if period is None else period
    t_s = arrival - distance / params.sound_speed
    return SyncState(t_s, period, arrival + validity)


def receiver_period(params: WaveformParams, freq_offset: float = 0.0) -> float:
    """Cycle period on the receiver clock for a transmitter running ``freq_offset`` Hz fast."""
    return params.cycle_period * params.carrier_freq / (params.carrier_freq + freq_offset)


def anchor_sync(fix: PositionFix, arrivals: PulseArrivals, params: WaveformParams, index: int = -1,
                at: float | None = None, freq_offset: float = 0.0, max_distance: float = ANCHOR_MAX_DISTANCE,
                max_rms: float = ANCHOR_MAX_RMS, validity: float = SYNC_VALIDITY) -> SyncState:
    """Anchor the transmit schedule on a short-range line fix.

    The arrival used is the one nearest ``at`` (default: the fix's time at
    step point ``index``, else the first arrival). ``freq_offset`` is the
    calibrated transmitter offset that sets the receiver-clock period.
    """
    if fix.provenance is not Provenance.ESTIMATED:
        raise NoAnchor("only an estimated line fix can anchor synchronization")
    if fix.rms >= max_rms:
        raise NoAnchor(f"fix residual RMS {fix.rms * 1000:.2f} mm exceeds {max_rms * 1000:.2f} mm")
    l = fix.slant_distance(index)
    if l > max_distance:
        raise NoAnchor(f"fix distance {l:.2f} m exceeds the {max_distance:.1f} m anchoring limit")
    if len(arrivals) == 0:
        raise NoAnchor("no pulse arrivals to anchor on")
    if at is None and fix.step_times.size:
        at = float(fix.step_times[index])
    arr = np.asarray(arrivals.arrivals)
    tau = float(arr[0] if at is None else arr[np.argmin(np.abs(arr - at))])
    return sync_from_arrival(l, tau, params, receiver_period(params, freq_offset), validity)


def sync_range(t_r: float, sync: SyncState, height: float, params: WaveformParams) -> tuple[float, float]:
    """Slant and horizontal distance from a pulse received at ``t_r``.

    The whole number of elapsed periods is the unique ``k`` with
    ``0 < v_a (t_r - t_s - k T) < l_m``.
    """
    if t_r > sync.valid_until:
        raise OutOfRange(f"arrival at {t_r:.3f} s is past the sync validity ({sync.valid_until:.3f} s)")
    va, lm = params.sound_speed, params.max_range
    elapsed = t_r - sync.t_s
    k_lo = math.ceil((elapsed - lm / va) / sync.period) - 1
    k_hi = math.floor(elapsed / sync.period) + 1
    ks = [k for k in range(k_lo, k_hi + 1) if 0 < va * (elapsed - k * sync.period) < lm]
    if len(ks) != 1:
        raise AmbiguousEpoch(f"{len(ks)} pulse epochs fit the {lm:.1f} m range bound")
    l = va * (elapsed - ks[0] * sync.period)
    if l < height:
        raise NegativeRange(f"slant distance {l:.3f} m is below the speaker height {height:.3f} m")
    return l, math.sqrt(l * l - height * height)


def _golden(f, a: float, b: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            return 0.5 * (a + b)
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    raise NonConvergence("golden-section search did not converge")


def direction_after_sync(l1: float, d: DisplacementSeries, stride: float, height: float = 0.0,
                         scan_points: int = 1801) -> float:
    """Horizontal direction ``psi'_1`` at the first step point, given its slant distance.

    Scans the single unknown angle, then refines the best bracket by golden
    section.
    """
    if not l1 > height:
        raise DegenerateGeometry("slant distance must exceed the speaker height")
    dd = np.asarray(d.d, dtype=float)
    if int(np.sum(np.isfinite(dd))) < 2:
        raise InvalidParams("need at least two usable displacements")
    lo = math.asin(min(1.0, height / l1))
    hi = math.pi - lo

    def cost(psi):
        return line_cost(-l1 * math.cos(psi), l1 * math.sin(psi), dd, stride)

    grid = np.linspace(lo, hi, scan_points)
    ok = np.isfinite(dd)
    u = -l1 * np.cos(grid)[:, None] + _offsets(dd.size + 1, stride)[None, :]
    l = np.sqrt((l1 * np.sin(grid))[:, None] ** 2 + u * u)
    e = (l[:, :-1] - l[:, 1:] - dd[None, :])[:, ok]
    vals = np.sum(e * e, axis=1)
    k = int(np.argmin(vals))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, grid.size - 1)]
    psi1 = _golden(cost, a, b)
    horiz = math.sqrt(l1 * l1 - height * height)
    return math.acos(max(-1.0, min(1.0, l1 * math.cos(psi1) / horiz)))


def fix_after_sync(l1: float, d: DisplacementSeries, stride: float, height: float = 0.0) -> PositionFix:
    """Full line fix from a synchronized range at the first step point."""
    psi_h = direction_after_sync(l1, d, stride, height)
    L1 = math.sqrt(l1 * l1 - height * height)
    x = -L1 * math.cos(psi_h)
    y = math.sqrt(max(l1 * l1 - x * x, height * height))
    dd = np.asarray(d.d, dtype=float)
    return _fill_fix(x, y, height, stride, dd.size + 1, Provenance.SYNCHRONIZED, line_cost(x, y, dd, stride),
                     int(np.sum(np.isfinite(dd))), d.step_times if d.step_times.size else None)


# ---- dead reckoning --------------------------------------------------------

def walker_pose(steps: StepTrace, t: float) -> tuple[np.ndarray, float]:
    """Position (last heel strike at or before ``t``) and heading of the walker."""
    times = np.asarray(steps.step_times)
    j = int(np.searchsorted(times, t, side="right")) - 1
    pts = steps.points()
    if j < 0:
        return pts[0], steps.heading(0)
    stride_idx = min(j, steps.n_strides - 1) if steps.n_strides else 0
    heading = steps.heading(max(stride_idx, 0)) if steps.n_strides else 0.0
    return pts[j], heading


def dead_reckon(steps: StepTrace, last_fix: GroundFix, from_t: float, to_t: float) -> GroundFix:
    """Carry a ground fix along the inertial step/turn trace.

    ``last_fix`` is expressed in the walker's frame at ``from_t`` (origin at its
    position, X along its heading); the result uses the frame at ``to_t``.
    """
    p0, z0 = walker_pose(steps, from_t)
    p1, z1 = walker_pose(steps, to_t)
    c0, s0 = math.cos(z0), math.sin(z0)
    delta = p1 - p0
    move = np.array([c0 * delta[0] + s0 * delta[1], -s0 * delta[0] + c0 * delta[1]])
    rel = np.array([last_fix.gx, last_fix.gy]) - move
    dz = z1 - z0
    c, s = math.cos(dz), math.sin(dz)
    g = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1]])
    return GroundFix(float(g[0]), float(g[1]), Provenance.DEAD_RECKONED, to_t, last_fix.residual)


# ---- export ----------------------------------------------------------------

def write_fixes_csv(fixes: Sequence[PositionFix | GroundFix], path, times: Sequence[float] | None = None) -> Path:
    """CSV with columns ``t, X, Y, L, psi_deg, provenance, residual``.

    Line fixes report the horizontal distance and direction at their last step point.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "X", "Y", "L", "psi_deg", "provenance", "residual"])
        for i, f in enumerate(fixes):
            if isinstance(f, PositionFix):
                t = times[i] if times is not None else (f.step_times[-1] if f.step_times.size else "")
                row = [t, f.X, f.Y, f.distances[-1], math.degrees(f.directions[-1]), f.provenance.value, f.residual]
            else:
                t = times[i] if times is not None else ("" if f.t is None else f.t)
                row = [t, f.gx, f.gy, f.distance, math.degrees(f.bearing), f.provenance.value, f.residual]
            w.writerow([v if isinstance(v, str) else f"{v:.6f}" for v in row])
    return path
