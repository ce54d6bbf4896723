"""Hot-vocab size selection from a fitted cost line and a hit-ratio curve.

Expected per-sequence decision cost as a function of the hot size H:

    F(H) = c0 + c * (abar(H) * H + (1 - abar(H)) * (V - H))

where abar(H) is the average probability mass the top-H hot ids cover. The
minimizer balances growing the hot scan against shrinking the tail fallback.
F is implemented exactly in this form; note a literal visited-element count
would use H rather than abar(H)*H in the first term, so the model slightly
undercounts the accepted path. The discrepancy does not move the minimizer
materially for saturating curves and the benchmarks report both quantities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class HitRatioCurve:
    """Tabulated average hit ratio, piecewise-linear between grid points."""

    grid: np.ndarray  # ascending hot sizes
    alpha_bar: np.ndarray  # values in [0, 1], nondecreasing

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.grid.ndim != 1 or self.grid.shape != self.alpha_bar.shape:
            raise ValueError("grid and alpha_bar must be equal-length vectors")
        if self.grid.shape[0] < 2:
            raise ValueError("curve needs at least two grid points")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly ascending")
        if np.any(np.diff(self.alpha_bar) < -1e-12):
            raise ValueError("hit ratio curve must be nondecreasing")
        if np.any(self.alpha_bar < 0) or np.any(self.alpha_bar > 1 + 1e-12):
            raise ValueError("hit ratios must lie in [0, 1]")

    def value(self, hot_size) -> np.ndarray | float:
        return np.interp(hot_size, self.grid, self.alpha_bar)

    def spacing_at(self, hot_size: float) -> float:
        idx = int(np.searchsorted(self.grid, hot_size, side="right"))
        idx = min(max(idx, 1), self.grid.shape[0] - 1)
        return float(self.grid[idx] - self.grid[idx - 1])

    def derivative(self, hot_size: float, lo: float, hi: float) -> float:
        """Central finite difference with step = local grid spacing
        (one-sided at the domain boundaries)."""
        h = max(self.spacing_at(hot_size), 1.0)
        left = max(hot_size - h, lo)
        right = min(hot_size + h, hi)
        if right <= left:
            return 0.0
        return float((self.value(right) - self.value(left)) / (right - left))


@dataclass
class SizingModel:
    """Affine cost constants plus the hit-ratio curve for one platform/model."""

    c0: float  # fixed per-sequence overhead, seconds
    c: float  # seconds per token visited
    curve: HitRatioCurve
    vocab_size: int

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("per-token cost c must be positive")
        if self.c0 < 0:
            raise ValueError("fixed overhead c0 cannot be negative")


def estimate_hit_ratio_curve(prob_traces, hot_order: np.ndarray, grid) -> HitRatioCurve:
    """Average top-H mass over traced probability rows, for each grid H.

    hot_order must be a prefix ordering covering max(grid) ids; nested
    prefixes make the estimate monotone by construction.
    """
    rows = [np.asarray(r, dtype=np.float64) for r in prob_traces]
    if not rows:
        raise ValueError("empty probability trace")
    grid_arr = np.asarray(sorted(int(g) for g in grid), dtype=np.int64)
    if grid_arr.size == 0 or grid_arr[0] < 1:
        raise ValueError("grid must contain sizes >= 1")
    order = np.asarray(hot_order, dtype=np.int64)
    if grid_arr[-1] > order.shape[0]:
        raise ValueError("hot ordering shorter than the largest grid size")
    acc = np.zeros(grid_arr.size, dtype=np.float64)
    for row in rows:
        total = row.sum()
        if total <= 0:
            raise ValueError("probability row has no mass")
        prefix = np.cumsum(row[order] / total)
        acc += prefix[grid_arr - 1]
    return HitRatioCurve(grid_arr.astype(np.float64), acc / len(rows))


def fit_affine_cost(measurements) -> tuple[float, float, float]:
    """Least-squares line through (H, seconds) pairs: returns (c0, c, residual).

    residual is the max absolute deviation of the fit from the inputs.
    """
    pts = [(float(h), float(s)) for h, s in measurements]
    hs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    if np.unique(hs).size < 2:
        raise ValueError("need at least two distinct hot sizes to fit")
    design = np.stack([hs, np.ones_like(hs)], axis=1)
    (c, c0), *_ = np.linalg.lstsq(design, ys, rcond=None)
    residual = float(np.abs(design @ np.array([c, c0]) - ys).max())
    return float(c0), float(c), residual


def expected_cost(hot_size, model: SizingModel):
    """F(H) in seconds; accepts scalars or arrays."""
    h = np.asarray(hot_size, dtype=np.float64)
    if np.any(h < 1) or np.any(h > model.vocab_size):
        raise ValueError(f"hot size outside [1, {model.vocab_size}]")
    a = model.curve.value(h)
    cost = model.c0 + model.c * (a * h + (1.0 - a) * (model.vocab_size - h))
    return float(cost) if np.ndim(hot_size) == 0 else cost


def cost_derivative(hot_size: float, model: SizingModel) -> float:
    """dF/dH = c * (-1 + 2*abar(H) + (2H - V) * abar'(H))."""
    h = float(hot_size)
    if h < 1 or h > model.vocab_size:
        raise ValueError(f"hot size outside [1, {model.vocab_size}]")
    a = float(model.curve.value(h))
    da = model.curve.derivative(h, 1.0, float(model.vocab_size))
    return model.c * (-1.0 + 2.0 * a + (2.0 * h - model.vocab_size) * da)


def optimal_hot_size(model: SizingModel, cycle_budget: float | None = None) -> int:
    """Minimize F over integer hot sizes.

    Brackets sign changes of dF/dH over the grid, bisects each bracket, then
    enumerates integers within one grid spacing of each root (and the domain
    boundaries) and returns the argmin; ties go to the smaller H. With
    cycle_budget set, sizes with F(H) > budget are excluded when any feasible
    size exists; if none is feasible the unconstrained argmin is returned so
    callers can report the violation.
    """
    v = model.vocab_size
    probes = [1.0] + [float(g) for g in model.curve.grid if 1.0 < g < v] + [float(v)]
    signs = [cost_derivative(p, model) for p in probes]

    roots: list[float] = []
    for (p0, s0), (p1, s1) in zip(zip(probes, signs), zip(probes[1:], signs[1:])):
        if s0 == 0.0:
            roots.append(p0)
        if s0 * s1 < 0:
            lo, hi = p0, p1
            for _ in range(64):
                mid = 0.5 * (lo + hi)
                if cost_derivative(lo, model) * cost_derivative(mid, model) <= 0:
                    hi = mid
                else:
                    lo = mid
            roots.append(0.5 * (lo + hi))
    if signs and signs[-1] == 0.0:
        roots.append(probes[-1])

    candidates = {1, v}
    for root in roots:
        window = max(int(np.ceil(model.curve.spacing_at(root))), 1)
        lo = max(1, int(np.floor(root)) - window)
        hi = min(v, int(np.ceil(root)) + window)
        candidates.update(range(lo, hi + 1))

    cand = np.array(sorted(candidates), dtype=np.int64)
    costs = expected_cost(cand, model)
    if cycle_budget is not None:
        feasible = costs <= cycle_budget
        if np.any(feasible):
            cand, costs = cand[feasible], costs[feasible]
    best = int(np.argmin(costs))  # argmin takes the first minimum: smaller H wins ties
    return int(cand[best])


def sizing_report(model: SizingModel, best_hot_size: int, cycle_budget: float | None = None) -> str:
    """Key: value report consumed by the CLI and the control channel."""
    lines = [
        f"c0: {model.c0!r}",
        f"c: {model.c!r}",
        f"vocab_size: {model.vocab_size}",
        "grid: " + ",".join(str(int(g)) for g in model.curve.grid),
        "alpha_bar: " + ",".join(f"{a:.6f}" for a in model.curve.alpha_bar),
        f"hot_size: {best_hot_size}",
        f"expected_cost: {expected_cost(best_hot_size, model)!r}",
    ]
    if cycle_budget is not None:
        feasible = expected_cost(best_hot_size, model) <= cycle_budget
        lines.append(f"cycle_budget: {cycle_budget!r}")
        lines.append(f"feasible: {str(bool(feasible)).lower()}")
    return "\n".join(lines) + "\n"
