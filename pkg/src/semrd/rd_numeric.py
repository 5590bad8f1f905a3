"""Numeric solver for the two-budget rate-distortion problem.

Minimizes the mutual information between the data letter and a joint
reconstruction pair (Z, Y) subject to two expected-distortion budgets: the
surrogate (hidden-source) distortion through Z and the data distortion
through Y.  The inner problem at fixed multipliers (s1, s2) is solved by
alternating minimization:

    edge update     q(z, y) <- sum_x P_X(x) p(z, y | x)
    channel update  p(z, y | x) ∝ q(z, y) exp(-s1 dbar(x, z) - s2 dx(x, y))

whose objective I + s1 E[dbar] + s2 E[dx] is nonincreasing sweep to sweep.
The outer problem finds nonnegative multipliers meeting both budgets with
complementary slackness, by slack-branch detection plus per-coordinate
root finding (Illinois method) iterated to a joint residual tolerance.

A converged solution carries its per-letter tilted values, whose mean
recovers the rate and whose variance is the first dispersion; the second
dispersion adds the multiplier-weighted conditional spread of the hidden
distortion.  ``check_property1`` certifies optimality: the edge-update
ratio equals the optimality-condition expectation, so a fixed point has
that expectation pinned at one on the edge support and at most one off it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import (
    DistortionPair,
    DistortionSpec,
    JointSource,
    ModelError,
    admissible_bounds,
    slack_thresholds,
    validate_source,
)

SUPPORT_EPS = 1e-12        # edge mass below this is treated as off-support
SLACK_MULTIPLIER = 1e-6    # budget met at a multiplier this small counts as slack
BOUNDARY_WIDEN = 1e-6      # distortion tolerance at degenerate (floor) budgets
MULT_FLOOR = 1e-3          # smallest multiplier probed by the two-active search;
                           # true-slack cases are handled by the reduced branches


class SolverError(RuntimeError):
    """Numeric failure (maps to CLI exit code 3)."""


class ConvergenceError(SolverError):
    pass


class MultiplierSearchError(SolverError):
    pass


class InadmissiblePairError(ModelError):
    pass


class OutsideSupportError(ValueError):
    pass


@dataclass(frozen=True)
class TestChannel:
    """Conditional law of the reconstruction pair given the data letter.

    ``conditional[x, z, y]`` sums to one over (z, y) for every data letter
    with positive marginal mass; ``edge`` is the induced unconditional law.
    """

    conditional: np.ndarray
    px: np.ndarray

    def __post_init__(self):
        cond = np.array(self.conditional, dtype=float)
        px = np.array(self.px, dtype=float)
        cond.setflags(write=False)
        px.setflags(write=False)
        object.__setattr__(self, "conditional", cond)
        object.__setattr__(self, "px", px)

    @property
    def edge(self) -> np.ndarray:
        return np.einsum("x,xzy->zy", self.px, self.conditional)

    def row_sum_errors(self) -> np.ndarray:
        return np.abs(self.conditional.sum(axis=(1, 2)) - 1.0)

    def validate(self, tol: float = 1e-10) -> list[str]:
        problems = []
        if np.any(self.conditional < -tol):
            problems.append("negative conditional probability")
        errs = self.row_sum_errors()
        for x in np.nonzero((errs > tol) & (self.px > 0))[0]:
            problems.append(f"row x={x} sums to 1{errs[x]:+.3e}")
        return problems


@dataclass
class SolverDiagnostics:
    iterations: int
    final_objective_change: float
    kkt_residual: float
    ds_residual: float
    dx_residual: float
    active_ds: bool
    active_dx: bool


@dataclass
class RdSolution:
    """Solved rate-distortion point with its tilted values and dispersions."""

    source: JointSource
    spec: DistortionSpec
    pair: DistortionPair
    rate: float
    channel: TestChannel
    lambda_s: float
    lambda_x: float
    achieved_ds: float
    achieved_dx: float
    tilted_surrogate_table: np.ndarray
    dispersion_v: float
    dispersion_v_tilde: float
    diagnostics: SolverDiagnostics

    def to_json(self) -> str:
        d = self.diagnostics
        doc = {
            "rate": self.rate,
            "lambda_s": self.lambda_s,
            "lambda_x": self.lambda_x,
            "achieved_ds": self.achieved_ds,
            "achieved_dx": self.achieved_dx,
            "tilted_surrogate": [None if np.isnan(v) else v for v in self.tilted_surrogate_table],
            "dispersion_v": self.dispersion_v,
            "dispersion_v_tilde": self.dispersion_v_tilde,
            "channel": self.channel.conditional.tolist(),
            "edge": self.channel.edge.tolist(),
            "diagnostics": {
                "iterations": d.iterations,
                "final_objective_change": d.final_objective_change,
                "kkt_residual": d.kkt_residual,
                "ds_residual": d.ds_residual,
                "dx_residual": d.dx_residual,
                "active_ds": d.active_ds,
                "active_dx": d.active_dx,
            },
        }
        return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# Inner alternating minimization
# ---------------------------------------------------------------------------

def _effective_tables(source: JointSource, spec: DistortionSpec):
    """Surrogate/data tables with off-support rows zeroed (they carry no mass)."""
    dbar = np.nan_to_num(spec.surrogate_ds, nan=0.0)
    return source.data_marginal, dbar, spec.dx_table


def _mutual_information(px, p, q) -> float:
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.where(p > 0.0, np.log(np.where(p > 0.0, p, 1.0) / q[None, :, :]), 0.0)
    return float(np.einsum("x,xzy,xzy->", px, p, ratio))


def _ba_sweeps(px, dbar, dxm, s1, s2, tol, kkt_tol, max_sweeps, init):
    """Alternating minimization at fixed multipliers, flattened over (z, y).

    The iteration state is the channel row block p[x, cell]; the edge
    update multiplies each cell's mass by a growth factor that certifies
    stationarity (one on live cells, at most one on empty cells).  Every
    few sweeps an Aitken extrapolation of the edge vector is attempted and
    kept only if it lowers the objective, which preserves the monotone
    descent guarantee while collapsing slow geometric tails.
    """
    nx, nz = dbar.shape
    ny = dxm.shape[1]
    ncell = nz * ny
    cost = (s1 * dbar[:, :, None] + s2 * dxm[:, None, :]).reshape(nx, ncell)
    dists = np.stack(
        [np.broadcast_to(dbar[:, :, None], (nx, nz, ny)).reshape(nx, ncell),
         np.broadcast_to(dxm[:, None, :], (nx, nz, ny)).reshape(nx, ncell)]
    )
    # per-row shifted exponent keeps exp() in range even for huge multipliers
    w = np.exp(cost.min(axis=1, keepdims=True) - cost)

    if init is None:
        p = np.full((nx, ncell), 1.0 / ncell)
    else:
        p = np.array(init, dtype=float).reshape(nx, ncell)

    on = px > 0.0
    weight = np.where(on, px, 0.0)
    safe_norm = lambda n: np.where(on, n, 1.0)

    def tilt(q):
        t = q[None, :] * w
        norm = t.sum(axis=1)
        if np.any(norm[on] <= 0.0):
            raise ConvergenceError("channel update produced an all-zero row")
        return t / safe_norm(norm)[:, None], norm

    def objective_of(p):
        q = weight @ p
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ratio = np.where(p > 0.0, np.log(np.where(p > 0.0, p, 1.0) / q[None, :]), 0.0)
        return float((weight[:, None] * p * (ratio + cost)).sum()), q

    objective = np.inf
    change = np.inf
    residual = np.inf
    sweeps = 0
    hist = []
    q = weight @ p
    while sweeps < max_sweeps:
        sweeps += 1
        p, norm = tilt(q)
        growth = (weight / safe_norm(norm)) @ w
        live = q > SUPPORT_EPS
        residual = float(
            np.max(np.where(live, np.abs(growth - 1.0), np.maximum(growth - 1.0, 0.0)))
        )
        new_objective, q = objective_of(p)
        if new_objective > objective + 1e-8:
            raise ConvergenceError(
                f"objective increased by {new_objective - objective:.3e} at sweep {sweeps}"
            )
        change = objective - new_objective
        objective = new_objective
        if change < tol and residual < kkt_tol:
            break

        hist.append(q)
        if len(hist) == 3:
            q0, q1, q2 = hist
            hist = []
            d2 = q2 - 2.0 * q1 + q0
            step = q2 - q1
            ok = np.abs(d2) > 1e-300
            q_acc = np.where(ok, q2 - np.where(ok, step, 0.0) ** 2 / np.where(ok, d2, 1.0), q2)
            q_acc = np.maximum(q_acc, 0.0)
            total = q_acc.sum()
            if total > 0.0:
                q_acc /= total
                p_acc, _ = tilt(q_acc)
                obj_acc, q_acc_new = objective_of(p_acc)
                if obj_acc < objective:
                    p, objective, q = p_acc, obj_acc, q_acc_new

    achieved = (dists * (weight[:, None] * p)[None, :, :]).sum(axis=(1, 2))
    return (
        p.reshape(nx, nz, ny),
        objective,
        float(achieved[0]),
        float(achieved[1]),
        sweeps,
        change,
        residual,
    )


def ba_inner_min(
    source: JointSource,
    spec: DistortionSpec,
    s1: float,
    s2: float,
    tol: float = 1e-12,
    max_sweeps: int = 100_000,
    kkt_tol: float = 1e-11,
    init: np.ndarray | None = None,
):
    """Minimize I + s1 E[dbar] + s2 E[dx] over channels at fixed multipliers.

    Returns (channel, objective in nats, achieved surrogate distortion,
    achieved data distortion).
    """
    if s1 < 0.0 or s2 < 0.0:
        raise ModelError("multipliers must be nonnegative")
    if tol <= 0.0:
        raise ModelError("tol must be positive")
    px, dbar, dxm = _effective_tables(source, spec)
    p, obj, ads, adx, sweeps, change, residual = _ba_sweeps(
        px, dbar, dxm, s1, s2, tol, kkt_tol, max_sweeps, init
    )
    if sweeps >= max_sweeps and (change >= tol or residual >= kkt_tol):
        raise ConvergenceError(
            f"no convergence in {max_sweeps} sweeps (last change {change:.3e}, "
            f"edge residual {residual:.3e})"
        )
    return TestChannel(p, px), obj, ads, adx


# ---------------------------------------------------------------------------
# Outer multiplier search
# ---------------------------------------------------------------------------

class _InnerSolver:
    """BA evaluations warm-started from the previous channel.

    ``kkt_tol`` steers how far the edge fixed point is polished per call;
    the multiplier search loosens it while it is far from the budgets and
    tightens it as the residuals shrink.
    """

    def __init__(self, source, spec, tol=1e-13, kkt_tol=1e-9, max_sweeps=200_000):
        self.px, self.dbar, self.dxm = _effective_tables(source, spec)
        self.tol = tol
        self.kkt_tol = kkt_tol
        self.max_sweeps = max_sweeps
        self.last_p = None
        self.evaluations = 0
        self.total_sweeps = 0

    def run(self, s1, s2, tol=None, kkt_tol=None, fresh=False):
        # always cold-start: a warm channel whose support has starved can
        # only regrow a cell at ~1/slack sweeps (multiplicative updates),
        # while from the uniform start every mode is a decay that the
        # Aitken step collapses
        p, obj, ads, adx, sweeps, change, residual = _ba_sweeps(
            self.px,
            self.dbar,
            self.dxm,
            s1,
            s2,
            self.tol if tol is None else tol,
            self.kkt_tol if kkt_tol is None else kkt_tol,
            self.max_sweeps,
            None,
        )
        self.last_p = p
        self.evaluations += 1
        self.total_sweeps += sweeps
        return p, obj, ads, adx, sweeps, change, residual

    def distortions(self, s1, s2, accuracy):
        """(achieved_ds, achieved_dx) polished to roughly ``accuracy``."""
        kkt = min(1e-7, max(1e-12, accuracy))
        _, _, ads, adx = self.run(s1, s2, kkt_tol=kkt)[:4]
        return ads, adx


def _illinois_root(g, lo, hi, glo, ghi, value_tol, x_tol=1e-14, max_iter=200):
    """Root of a monotone-decreasing g on [lo, hi] with g(lo) > 0 >= g(hi)."""
    flo, fhi = glo, ghi
    for _ in range(max_iter):
        mid = hi - fhi * (hi - lo) / (fhi - flo)
        if not (lo < mid < hi):
            mid = 0.5 * (lo + hi)
        fmid = g(mid)
        if abs(fmid) <= value_tol:
            return mid, fmid
        if fmid > 0.0:
            lo, flo = mid, fmid
            fhi *= 0.5  # Illinois weighting keeps the stale end from sticking
        else:
            hi, fhi = mid, fmid
            flo *= 0.5
        if hi - lo <= x_tol * max(1.0, hi):
            return hi, g(hi)
    return hi, g(hi)


def _bisect_multiplier(inner, which, other_value, budget, residual_tol,
                       hint: float | None = None):
    """Smallest multiplier on one coordinate meeting its own budget.

    Returns (multiplier, achieved) with ``achieved <= budget + residual_tol``
    or, when even a huge multiplier cannot reach the budget (floor case),
    the capped multiplier with the floor distortion.  ``hint`` seeds a tight
    bracket around an expected root.
    """
    last_g = [1e-4]

    def achieved(s):
        acc = max(2e-13, min(1e-7, 2e-2 * abs(last_g[0])))
        s1, s2 = (s, other_value) if which == "ds" else (other_value, s)
        ads, adx = inner.distortions(s1, s2, acc)
        return ads if which == "ds" else adx

    def g(s):
        val = achieved(s) - budget
        last_g[0] = val
        return val

    lo, glo = None, None
    if hint is not None and hint > 0.0:
        a, b = hint / 1.3, hint * 1.3
        ga = g(a)
        if ga <= residual_tol and ga >= -residual_tol:
            return a, ga + budget
        if ga > 0.0:
            gb = g(b)
            if abs(gb) <= residual_tol:
                return b, gb + budget
            if gb < 0.0:
                root, gval = _illinois_root(g, a, b, ga, gb, residual_tol)
                return root, gval + budget
            lo, glo = b, gb
        # hint bracket failed; fall through to the global bracket

    if lo is None:
        glo = g(MULT_FLOOR)
        if glo <= residual_tol:
            return MULT_FLOOR, glo + budget
        lo = MULT_FLOOR
    hi = max(50.0, 2.0 * lo)
    ghi = g(hi)
    while ghi > residual_tol and hi < 2e4:
        lo, glo = hi, ghi
        hi *= 4.0
        ghi = g(hi)
    if ghi > residual_tol:
        # budget pinned at its floor: accept within the widened tolerance
        if ghi <= BOUNDARY_WIDEN:
            return hi, ghi + budget
        raise MultiplierSearchError(
            f"cannot meet {which} budget {budget}: best achieved {ghi + budget} "
            f"at multiplier {hi}"
        )
    root, gval = _illinois_root(g, lo, hi, glo, ghi, residual_tol)
    return root, gval + budget


def solve_rd(
    source: JointSource,
    spec: DistortionSpec,
    pair: DistortionPair,
    tol: float = 1e-10,
) -> RdSolution:
    """Solve the two-budget problem: rate, optimal channel, multipliers.

    ``tol`` is the distortion residual target on active constraints; the
    returned multipliers satisfy complementary slackness at that tolerance
    (slack constraint -> multiplier 0, active -> achieved = budget +- tol).

    Slack cases are solved as reduced single-constraint problems with the
    unconstrained reconstruction coordinate attached afterwards as its
    rate-free conditional optimum; this avoids the degeneracy of the full
    alternating minimization at (near-)zero multipliers, where a free
    coordinate makes the minimizer non-unique and the iteration crawls.
    """
    problems = validate_channel_inputs(source, spec)
    if problems:
        raise ModelError("; ".join(problems))
    ds_min, dx_min = admissible_bounds(source, spec)
    if pair.ds < ds_min - 1e-9 or pair.dx < dx_min - 1e-9:
        raise InadmissiblePairError(
            f"pair ({pair.ds}, {pair.dx}) below the admissible floor ({ds_min}, {dx_min})"
        )

    px, dbar, dxm = _effective_tables(source, spec)
    ds_slack, dx_slack = slack_thresholds(source, spec)

    if pair.ds >= ds_slack - 1e-12 and pair.dx >= dx_slack - 1e-12:
        return _zero_rate_solution(source, spec, pair, px, dbar, dxm)

    if pair.ds >= ds_slack - 1e-12:
        branch = _slack_branch(source, spec, pair, px, dbar, dxm, slack="ds", tol=tol)
        if branch is None:
            raise MultiplierSearchError("hidden-slack branch failed to meet the data budget")
        return branch
    if pair.dx >= dx_slack - 1e-12:
        branch = _slack_branch(source, spec, pair, px, dbar, dxm, slack="dx", tol=tol)
        if branch is None:
            raise MultiplierSearchError("data-slack branch failed to meet the hidden budget")
        return branch

    branch = _slack_branch(source, spec, pair, px, dbar, dxm, slack="ds", tol=tol)
    if branch is not None:
        return branch
    branch = _slack_branch(source, spec, pair, px, dbar, dxm, slack="dx", tol=tol)
    if branch is not None:
        return branch

    inner = _InnerSolver(source, spec)
    s1, s2 = _solve_both_active(inner, pair, tol)
    p, obj, ads, adx, sweeps, change, residual = inner.run(
        s1, s2, tol=1e-14, kkt_tol=5e-12
    )
    if change >= 1e-12 and residual >= 1e-9:
        raise ConvergenceError(
            f"final polish unconverged: objective change {change:.3e}, "
            f"edge residual {residual:.3e}"
        )
    if ads > pair.ds + BOUNDARY_WIDEN or adx > pair.dx + BOUNDARY_WIDEN:
        raise MultiplierSearchError(
            f"final channel misses budgets: achieved ({ads}, {adx}) vs ({pair.ds}, {pair.dx})"
        )
    return _finalize(source, spec, pair, px, dbar, dxm, p, s1, s2, ads, adx,
                     inner.total_sweeps, change, residual)


def _solve_one_constraint(px, table, budget, rtol, max_sweeps=200_000):
    """One-budget problem over a single reconstruction coordinate.

    Returns (multiplier, conditional (nx, m), achieved).  The dummy second
    coordinate has a single letter, so the reduced alternating minimization
    has no rate-free directions.
    """
    nx, m = table.shape
    dummy = np.zeros((nx, 1))

    def run(s, kkt):
        p, _, ach, _, sweeps, change, residual = _ba_sweeps(
            px, table, dummy, s, 0.0, 1e-14, kkt, max_sweeps, None
        )
        return p[:, :, 0], ach, change, residual

    last = [1e-4]

    def g(s):
        acc = max(2e-13, min(1e-7, 2e-2 * abs(last[0])))
        _, ach, _, _ = run(s, acc)
        last[0] = ach - budget
        return last[0]

    lo = SLACK_MULTIPLIER
    glo = g(lo)
    if glo <= rtol:
        p, ach, _, _ = run(lo, 1e-12)
        return 0.0, p, ach
    hi = 50.0
    ghi = g(hi)
    while ghi > rtol and hi < 2e4:
        lo, glo = hi, ghi
        hi *= 4.0
        ghi = g(hi)
    if ghi > rtol:
        if ghi <= BOUNDARY_WIDEN:
            p, ach, _, _ = run(hi, 1e-12)
            return hi, p, ach
        raise MultiplierSearchError(
            f"single-constraint budget {budget} unreachable: best {ghi + budget} at {hi}"
        )
    root, _ = _illinois_root(g, lo, hi, glo, ghi, rtol)
    p, ach, change, residual = run(root, 1e-12)
    if change >= 1e-12 and residual >= 1e-9:
        raise ConvergenceError("reduced problem failed to converge")
    return root, p, ach


def _slack_branch(source, spec, pair, px, dbar, dxm, slack, tol):
    """Try the solution with one multiplier at zero.

    The constrained coordinate is solved as a reduced problem; the free
    coordinate is attached as the deterministic letter minimizing its
    conditional expected distortion given the constrained reconstruction
    (rate-free, so optimal).  Returns None if the attached coordinate
    misses its budget, meaning both constraints are active.
    """
    on = px > 0.0
    nx = px.size
    nz = dbar.shape[1]
    ny = dxm.shape[1]
    if slack == "ds":
        mult, cond_y, adx = _solve_one_constraint(px, dxm, pair.dx, tol)
        edge_y = px @ cond_y
        post = np.where(edge_y[None, :] > 0.0, px[:, None] * cond_y / np.where(edge_y > 0.0, edge_y, 1.0)[None, :], 0.0)
        exp_dbar = post.T @ dbar  # (y, z): expected hidden distortion per attached z
        z_star = np.argmin(exp_dbar, axis=1)
        p = np.zeros((nx, nz, ny))
        for y in range(ny):
            p[:, z_star[y], y] = cond_y[:, y]
        ads = float(sum(edge_y[y] * exp_dbar[y, z_star[y]] for y in range(ny)))
        if ads > pair.ds + tol:
            return None
        s1, s2 = 0.0, mult
    else:
        mult, cond_z, ads = _solve_one_constraint(px, dbar, pair.ds, tol)
        edge_z = px @ cond_z
        post = np.where(edge_z[None, :] > 0.0, px[:, None] * cond_z / np.where(edge_z > 0.0, edge_z, 1.0)[None, :], 0.0)
        exp_dx = post.T @ dxm  # (z, y)
        y_star = np.argmin(exp_dx, axis=1)
        p = np.zeros((nx, nz, ny))
        for z in range(nz):
            p[:, z, y_star[z]] = cond_z[:, z]
        adx = float(sum(edge_z[z] * exp_dx[z, y_star[z]] for z in range(nz)))
        if adx > pair.dx + tol:
            return None
        s1, s2 = mult, 0.0
    ads_f = float(np.einsum("x,xzy,xz->", px, p, dbar))
    adx_f = float(np.einsum("x,xzy,xy->", px, p, dxm))
    return _finalize(source, spec, pair, px, dbar, dxm, p, s1, s2, ads_f, adx_f, 0, 0.0, 0.0)


def _solve_both_active(inner, pair, residual_tol):
    """Find multipliers meeting both budgets by nested scalar root finds.

    Joint Newton is unreliable here: multiplier pairs whose optimum sits on
    a budget-region boundary form a two-dimensional wedge that maps onto a
    one-dimensional distortion segment, so the joint Jacobian degenerates.
    Nesting avoids that: for each trial data multiplier s2, the hidden
    multiplier s1 is root-found to pin the hidden budget (strictly monotone
    even inside a wedge), and the outer root find drives the resulting data
    distortion to its budget -- monotone with at worst flat segments, which
    bracketing tolerates.
    """

    def data_residual(s2):
        s1_loc, _ = _bisect_multiplier(
            inner, "ds", s2, pair.ds, 0.3 * residual_tol, hint=data_residual.s1
        )
        prev = data_residual.last
        acc = 1e-7 if prev is None else max(2e-13, min(1e-7, 2e-2 * abs(prev)))
        _, adx = inner.distortions(s1_loc, s2, acc)
        data_residual.s1 = s1_loc
        data_residual.last = adx - pair.dx
        return data_residual.last

    data_residual.s1 = None
    data_residual.last = None

    g0 = data_residual(MULT_FLOOR)
    if g0 <= residual_tol:
        return data_residual.s1, MULT_FLOOR
    hi = 50.0
    ghi = data_residual(hi)
    while ghi > residual_tol and hi < 2e4:
        hi *= 4.0
        ghi = data_residual(hi)
    if ghi > residual_tol:
        if ghi <= BOUNDARY_WIDEN:
            return data_residual.s1, hi
        raise MultiplierSearchError(
            f"cannot meet data budget {pair.dx} with the hidden budget pinned: "
            f"best residual {ghi:.3e} at s2={hi}"
        )
    s2, gval = _illinois_root(data_residual, MULT_FLOOR, hi, g0, ghi, residual_tol)
    if abs(gval) > BOUNDARY_WIDEN:
        raise MultiplierSearchError(
            f"outer root find stalled with data residual {gval:.3e} at s2={s2}"
        )
    return data_residual.s1, s2


def _zero_rate_solution(source, spec, pair, px, dbar, dxm):
    on = px > 0.0
    z_star = int(np.argmin(px[on] @ dbar[on, :]))
    y_star = int(np.argmin(px[on] @ dxm[on, :]))
    nx, nz = dbar.shape
    ny = dxm.shape[1]
    p = np.zeros((nx, nz, ny))
    p[:, z_star, y_star] = 1.0
    ads = float(px[on] @ dbar[on, z_star])
    adx = float(px[on] @ dxm[on, y_star])
    return _finalize(source, spec, pair, px, dbar, dxm, p, 0.0, 0.0, ads, adx, 0, 0.0, 0.0)


def _tilted_table(px, dbar, dxm, edge, s1, s2, ds, dx):
    """Per-letter tilted values from the edge law and the multipliers.

    Computed in log space so that large multipliers stay finite.  Infinite
    multipliers (budgets at exact floors) are taken as limits: cells whose
    distortion exceeds the budget get weight zero, the rest carry no
    exponential tilt from that coordinate.
    """
    from scipy.special import logsumexp

    nx = dbar.shape[0]
    with np.errstate(divide="ignore"):
        log_edge = np.log(edge)
    out = np.full(nx, np.nan)
    for x in range(nx):
        if px[x] <= 0.0:
            continue
        if np.isinf(s1):
            ws = np.where(dbar[x, :] <= ds, 0.0, -np.inf)
        else:
            ws = s1 * (ds - dbar[x, :])
        if np.isinf(s2):
            wx = np.where(dxm[x, :] <= dx, 0.0, -np.inf)
        else:
            wx = s2 * (dx - dxm[x, :])
        out[x] = -float(logsumexp(log_edge + ws[:, None] + wx[None, :]))
    return out


def _finalize(source, spec, pair, px, dbar, dxm, p, s1, s2, ads, adx,
              sweeps, change, residual):
    q = np.einsum("x,xzy->zy", px, p)
    rate = max(0.0, _mutual_information(px, p, q))
    tilted = _tilted_table(px, dbar, dxm, q, s1, s2, pair.ds, pair.dx)
    channel = TestChannel(p, px)
    active_ds = s1 > SLACK_MULTIPLIER
    active_dx = s2 > SLACK_MULTIPLIER
    diagnostics = SolverDiagnostics(
        iterations=sweeps,
        final_objective_change=change,
        kkt_residual=residual,
        ds_residual=ads - pair.ds,
        dx_residual=adx - pair.dx,
        active_ds=active_ds,
        active_dx=active_dx,
    )
    solution = RdSolution(
        source=source,
        spec=spec,
        pair=pair,
        rate=rate,
        channel=channel,
        lambda_s=s1,
        lambda_x=s2,
        achieved_ds=ads,
        achieved_dx=adx,
        tilted_surrogate_table=tilted,
        dispersion_v=0.0,
        dispersion_v_tilde=0.0,
        diagnostics=diagnostics,
    )
    v, v_tilde = dispersions(solution)
    solution.dispersion_v = v
    solution.dispersion_v_tilde = v_tilde
    return solution


def validate_channel_inputs(source: JointSource, spec: DistortionSpec) -> list[str]:
    problems = validate_source(source)
    if spec.dx_table.shape[0] != source.data_alphabet_size:
        problems.append("dx_table row count does not match the data alphabet")
    if spec.ds_table.shape[0] != source.semantic_alphabet_size:
        problems.append("ds_table row count does not match the hidden alphabet")
    return problems


# ---------------------------------------------------------------------------
# Tilted values, dispersions, certificates
# ---------------------------------------------------------------------------

def tilted_surrogate(solution: RdSolution, x: int) -> float:
    """Per-letter tilted value of the observable problem at data letter x."""
    return float(solution.tilted_surrogate_table[x])


def tilted_noisy(solution: RdSolution, s: int, x: int, z: int, y: int) -> float:
    """Per-outcome tilted value at (hidden letter, data letter, z, y)."""
    q = solution.channel.edge
    if q[z, y] <= SUPPORT_EPS:
        raise OutsideSupportError(f"(z={z}, y={y}) carries no edge mass")
    p = solution.channel.conditional[x, z, y]
    info = np.log(p / q[z, y]) if p > 0.0 else -np.inf
    return float(
        info
        + solution.lambda_s * (solution.spec.ds_table[s, z] - solution.pair.ds)
        + solution.lambda_x * (solution.spec.dx_table[x, y] - solution.pair.dx)
    )


def dispersions(solution: RdSolution) -> tuple[float, float]:
    """Variances of the two tilted statistics, by exact finite summation.

    The first is over the data letter alone; the second is over the joint
    law of (hidden letter, data letter, reconstruction pair).
    """
    px = solution.source.data_marginal
    on = px > 0.0
    jx = solution.tilted_surrogate_table
    mean = float(px[on] @ jx[on])
    v = float(px[on] @ (jx[on] - mean) ** 2)

    p = solution.channel.conditional
    q = solution.channel.edge
    cond_sx = np.nan_to_num(solution.source.semantic_given_data, nan=0.0)
    ds_tab = solution.spec.ds_table
    dx_tab = solution.spec.dx_table
    ls, lx = solution.lambda_s, solution.lambda_x
    shift = ls * solution.pair.ds + lx * solution.pair.dx

    m1 = 0.0
    m2 = 0.0
    nx, nz, ny = p.shape
    for x in range(nx):
        if px[x] <= 0.0:
            continue
        for z in range(nz):
            for y in range(ny):
                w = px[x] * p[x, z, y]
                if w <= 0.0 or q[z, y] <= 0.0:
                    continue
                info = np.log(p[x, z, y] / q[z, y])
                for s in range(ds_tab.shape[0]):
                    ws = w * cond_sx[s, x]
                    if ws <= 0.0:
                        continue
                    val = info + ls * ds_tab[s, z] + lx * dx_tab[x, y] - shift
                    m1 += ws * val
                    m2 += ws * val * val
    return v, max(0.0, m2 - m1 * m1)


@dataclass
class Property1Report:
    max_value: float
    min_support_value: float
    worst_cell: tuple[int, int]
    worst_value: float
    inner_min_gap: float
    passed: bool


def check_property1(solution: RdSolution, tol: float = 1e-6) -> Property1Report:
    """Certify optimality of a solved point.

    Evaluates, for every reconstruction cell (z, y), the mean over the data
    letter of exp{tilt + tilted value}; at an optimum this is at most one
    everywhere and equals one wherever the edge law puts mass.  Also re-runs
    the inner minimization at the solved multipliers from a cold start and
    compares objectives.
    """
    px = solution.source.data_marginal
    on = px > 0.0
    dbar = np.nan_to_num(solution.spec.surrogate_ds, nan=0.0)
    dxm = solution.spec.dx_table
    jx = solution.tilted_surrogate_table
    ls, lx = solution.lambda_s, solution.lambda_x
    ds, dx = solution.pair.ds, solution.pair.dx

    expo = (
        ls * (ds - dbar[:, :, None])
        + lx * (dx - dxm[:, None, :])
        + np.where(on, jx, -np.inf)[:, None, None]
    )
    values = np.einsum("x,xzy->zy", px, np.exp(np.where(on[:, None, None], expo, -np.inf)))

    q = solution.channel.edge
    support = q > SUPPORT_EPS
    max_value = float(values.max())
    min_support_value = float(values[support].min()) if support.any() else 1.0
    # violation: any value above one, or a support value below one
    violation = np.where(support, np.abs(values - 1.0), np.maximum(values - 1.0, 0.0))
    worst = np.unravel_index(int(np.argmax(violation)), values.shape)
    off_bad = values[~support].max(initial=-np.inf) if (~support).any() else -np.inf

    _, obj, _, _ = ba_inner_min(
        solution.source, solution.spec, ls, lx, tol=1e-14, kkt_tol=5e-12
    )
    inner_gap = abs((obj - ls * ds - lx * dx) - solution.rate)

    passed = (
        max_value <= 1.0 + tol
        and min_support_value >= 1.0 - tol
        and (off_bad <= 1.0 + tol)
        and inner_gap <= max(10 * tol, 1e-7)
    )
    return Property1Report(
        max_value=max_value,
        min_support_value=min_support_value,
        worst_cell=(int(worst[0]), int(worst[1])),
        worst_value=float(values[worst]),
        inner_min_gap=inner_gap,
        passed=passed,
    )


@dataclass
class GradientLetterReport:
    letter: int
    finite_difference: float
    predicted: float
    abs_error: float
    skipped: bool
    note: str = ""


def gradient_check(
    source: JointSource,
    spec: DistortionSpec,
    pair: DistortionPair,
    step: float = 1e-4,
    tol: float = 1e-3,
) -> list[GradientLetterReport]:
    """Finite-difference check of the tilted values as rate derivatives.

    Perturbing the unnormalized mass of one data letter and renormalizing
    changes the rate, to first order, by the letter's tilted value minus the
    rate.  Letters whose perturbed problems change active constraints are
    reported as skipped (the derivative is one-sided there).
    """
    base = solve_rd(source, spec, pair)
    base_active = (base.diagnostics.active_ds, base.diagnostics.active_dx)
    px = source.data_marginal
    reports = []
    for a in range(source.data_alphabet_size):
        if px[a] <= 0.0:
            continue
        solutions = []
        crossed = False
        for sign in (+1.0, -1.0):
            mass = px.copy()
            mass[a] += sign * step
            perturbed = source.reweighted(mass / mass.sum())
            spec_p = DistortionSpec.build(perturbed, spec.ds_table, spec.dx_table)
            sol = solve_rd(perturbed, spec_p, pair)
            solutions.append(sol)
            if (sol.diagnostics.active_ds, sol.diagnostics.active_dx) != base_active:
                crossed = True
        if crossed:
            reports.append(
                GradientLetterReport(a, np.nan, np.nan, np.nan, True,
                                     "active set changed under perturbation")
            )
            continue
        # d(rate)/d(unnormalized mass): the normalization makes R(c*Q) = R(Q),
        # so the finite difference of the renormalized problems is exactly the
        # unnormalized-coordinate derivative.
        fd = (solutions[0].rate - solutions[1].rate) / (2.0 * step)
        predicted = float(base.tilted_surrogate_table[a]) - base.rate
        reports.append(
            GradientLetterReport(a, fd, predicted, abs(fd - predicted), False)
        )
    return reports
