"""Dynamic programming for the error process on a symmetric grid.

The state is the pre-decision pair ``(e, s)``: current error and previous
channel state. For power level ``u`` the one-step cost is
``lambda(u) + sum_s' Q[s, s'] p(s', u) d(e)`` and the next error is
``a e + W`` after a drop or ``W`` after a delivery.

Noise is discretized onto the grid cells: Gaussian mass by CDF differences
over the cell boundaries, discrete atoms by linear interpolation between the
two neighbouring grid points. Mass that falls outside ``[-e_max, e_max]`` is
folded into the boundary cells, which is the same as clamping ``J`` to its
boundary value beyond the grid.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .model import ModelSpec, ThresholdPolicy, is_stochastically_monotone

FOLD_WARN = 1e-4


class GridCoverageError(ValueError):
    pass


class GridFoldingWarning(RuntimeWarning):
    pass


class ConvergenceError(RuntimeError):
    pass


class NonThresholdPolicyError(ValueError):
    def __init__(self, offending):
        self.offending = offending
        super().__init__(f"policy is not of threshold form at (e, s) = {offending[:10]}")


@dataclass(frozen=True)
class GridSpec:
    e_max: float = 30.0
    n_points: int = 601
    # largest reset-noise mass allowed outside the grid before we refuse
    noise_truncation: float = 1e-3

    def __post_init__(self):
        if not self.e_max > 0:
            raise ValueError("e_max must be > 0")
        if self.n_points < 3 or self.n_points % 2 == 0:
            raise ValueError("n_points must be an odd integer >= 3")

    @property
    def points(self) -> np.ndarray:
        half = self.n_points // 2
        # integer offsets keep the grid exactly symmetric
        return self.spacing * np.arange(-half, half + 1, dtype=float)

    @property
    def spacing(self) -> float:
        return 2 * self.e_max / (self.n_points - 1)

    @property
    def zero_index(self) -> int:
        return self.n_points // 2

    def refined(self) -> "GridSpec":
        """Same range, half the spacing."""
        return GridSpec(self.e_max, 2 * self.n_points - 1, self.noise_truncation)


@dataclass
class ValueTable:
    values: np.ndarray  # (n_points, num_states)
    beta: float
    horizon: str  # "finite" or "infinite"
    t: int | None = None
    residuals: list = field(default_factory=list)


@dataclass
class GridPolicy:
    levels: np.ndarray  # (n_points, num_states) power level indices


@dataclass(frozen=True)
class NoiseKernel:
    """``K[i, j]`` is the probability that ``a g_i + W`` lands in cell ``j``.

    ``reset`` is the distribution of ``W`` alone over the cells.
    """

    K: np.ndarray
    reset: np.ndarray
    folded: np.ndarray
    reset_folded: float


def _cell_masses(centers: np.ndarray, grid: GridSpec, noise) -> tuple[np.ndarray, np.ndarray]:
    g = grid.points
    n = len(g)
    if noise.kind == "gaussian":
        edges = np.empty(n + 1)
        edges[1:-1] = 0.5 * (g[:-1] + g[1:])
        edges[0], edges[-1] = -np.inf, np.inf
        z = (edges[None, :] - centers[:, None]) / noise.sigma
        cdf = ndtr(z)
        K = np.diff(cdf, axis=1)
        # mass beyond the outer cell boundaries at +-e_max
        lo = ndtr((g[0] - centers) / noise.sigma)
        hi = 1.0 - ndtr((g[-1] - centers) / noise.sigma)
        folded = lo + hi
    else:
        K = np.zeros((len(centers), n))
        folded = np.zeros(len(centers))
        h = grid.spacing
        for w, pw in zip(noise.support, noise.pmf):
            x = centers + w
            out = (x < g[0] - 1e-12) | (x > g[-1] + 1e-12)
            folded += pw * out
            xc = np.clip(x, g[0], g[-1])
            pos = (xc - g[0]) / h
            lo = np.clip(np.floor(pos + 1e-9).astype(int), 0, n - 1)
            frac = np.clip(pos - lo, 0.0, 1.0)
            frac[frac < 1e-9] = 0.0
            rows = np.arange(len(centers))
            np.add.at(K, (rows, lo), pw * (1.0 - frac))
            hi_idx = np.minimum(lo + 1, n - 1)
            np.add.at(K, (rows, hi_idx), pw * frac)
    return K, folded


def noise_kernel(model: ModelSpec, grid: GridSpec) -> NoiseKernel:
    g = grid.points
    K, folded = _cell_masses(model.source.a * g, grid, model.source.noise)
    reset, rf = _cell_masses(np.zeros(1), grid, model.source.noise)
    reset_folded = float(rf[0])
    if reset_folded > grid.noise_truncation:
        raise GridCoverageError(
            f"noise mass {reset_folded:.3g} lies outside [-{grid.e_max}, {grid.e_max}]; widen the grid"
        )
    if reset_folded > FOLD_WARN:
        warnings.warn(
            f"{reset_folded:.3g} of the noise mass is folded into the boundary cells",
            GridFoldingWarning,
            stacklevel=3,
        )
    return NoiseKernel(K=K, reset=reset[0], folded=folded, reset_folded=reset_folded)


def _stage_terms(model: ModelSpec, grid: GridSpec, kernel: NoiseKernel | None = None):
    kernel = kernel or noise_kernel(model, grid)
    ch = model.channel
    d = model.cost.d(grid.points)
    # dropw[s, u, s'] = Q[s, s'] p(s', u)
    dropw = ch.Q[:, None, :] * ch.drop.T[None, :, :]
    return kernel, d, dropw


def q_values(J: np.ndarray, model: ModelSpec, grid: GridSpec, weights, terms=None) -> np.ndarray:
    """``H[e, s, u]`` for continuation ``J``; ``weights = (w_cost, w_future)``."""
    w_cost, w_future = weights
    kernel, d, dropw = terms or _stage_terms(model, grid)
    ch = model.channel
    EJ = kernel.K @ J  # E J(a e + W, s')
    EJ0 = kernel.reset @ J  # E J(W, s')
    drop_prob = ch.Q @ ch.drop  # (S, U): P(drop | s_prev, u)
    H = np.empty((len(d), ch.num_states, ch.num_levels))
    for s in range(ch.num_states):
        for u in range(ch.num_levels):
            H[:, s, u] = (
                w_cost * (ch.tx_cost[u] + drop_prob[s, u] * d)
                + w_future * (EJ @ dropw[s, u] + (ch.Q[s] * (1.0 - ch.drop[:, u])) @ EJ0)
            )
    return H


def _greedy(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    best = H.min(axis=2)
    # ties (within rounding) go to the smallest power level
    tol = 1e-12 * np.maximum(1.0, np.abs(best))
    levels = np.argmax(H <= best[:, :, None] + tol[:, :, None], axis=2)
    return best, levels


def _weights(model: ModelSpec, horizon: str):
    beta = model.beta
    return (1.0, 1.0) if horizon == "finite" else (1.0 - beta, beta)


def bellman_backup(J: ValueTable, model: ModelSpec, grid: GridSpec, terms=None, horizon: str | None = None):
    """One application of the finite-horizon or discounted Bellman operator.

    The finite-horizon operator is undiscounted; the discounted one weights
    the stage cost by ``1 - beta`` and the continuation by ``beta``, so the
    fixed point is the normalized cost ``(1 - beta) E sum beta^t c_t``.
    """
    horizon = horizon or J.horizon
    H = q_values(J.values, model, grid, _weights(model, horizon), terms)
    best, levels = _greedy(H)
    t = None if J.t is None else J.t - 1
    return ValueTable(best, model.beta, horizon, t), GridPolicy(levels)


def solve_finite_horizon(model: ModelSpec, grid: GridSpec, T: int) -> list[tuple[ValueTable, GridPolicy]]:
    """Backward recursion from ``J_{T+1} = 0``; element ``t`` of the result is ``(J_t, f_t)``."""
    if T < 0:
        raise ValueError("T must be >= 0")
    terms = _stage_terms(model, grid)
    J = ValueTable(np.zeros((grid.n_points, model.channel.num_states)), model.beta, "finite", T + 1)
    stages = []
    for _ in range(T + 1):
        J, pol = bellman_backup(J, model, grid, terms)
        stages.append((J, pol))
    return stages[::-1]


def value_iteration(model: ModelSpec, grid: GridSpec, tol: float = 1e-8, max_iters: int = 10_000):
    """Iterate the discounted backup from zero until the sup-norm change is below ``tol``.

    Returns ``(J, policy, iterations)``; ``J.residuals`` holds the sup-norm
    change per sweep.
    """
    if not 0 < model.beta < 1:
        raise ValueError("value iteration needs beta in (0, 1)")
    terms = _stage_terms(model, grid)
    J = ValueTable(np.zeros((grid.n_points, model.channel.num_states)), model.beta, "infinite")
    residuals = []
    for it in range(1, max_iters + 1):
        J_new, pol = bellman_backup(J, model, grid, terms)
        res = float(np.max(np.abs(J_new.values - J.values)))
        residuals.append(res)
        J = J_new
        if res < tol:
            J.residuals = residuals
            return J, pol, it
    raise ConvergenceError(f"value iteration did not reach tol={tol} in {max_iters} sweeps (last change {res:.3g})")


def evaluate_policy(model: ModelSpec, grid: GridSpec, policy: ThresholdPolicy, tol: float = 1e-10, max_iters: int = 20_000):
    """Normalized discounted cost of a threshold policy on the grid, by iterating its own backup."""
    g = grid.points
    terms = _stage_terms(model, grid)
    levels = np.stack([np.searchsorted(policy.k[s], np.abs(g), side="right") for s in range(policy.num_states)], axis=1)
    weights = _weights(model, "infinite")
    J = np.zeros((len(g), model.channel.num_states))
    idx = np.arange(len(g))
    for _ in range(max_iters):
        H = q_values(J, model, grid, weights, terms)
        J_new = np.stack([H[idx, s, levels[:, s]] for s in range(J.shape[1])], axis=1)
        if np.max(np.abs(J_new - J)) < tol:
            return ValueTable(J_new, model.beta, "infinite")
        J = J_new
    raise ConvergenceError("policy evaluation did not converge")


def regeneration_cost(J: ValueTable, model: ModelSpec, grid: GridSpec) -> float:
    """Cost from ``(E+, S) = (0, s_ref)``, i.e. ``E_W J(W, s_ref)``."""
    kernel = noise_kernel(model, grid)
    return float(kernel.reset @ J.values[:, model.reference_state])


def _threshold_violations(levels: np.ndarray, grid: GridSpec) -> list[tuple[float, int]]:
    g = grid.points
    z = grid.zero_index
    bad = []
    for s in range(levels.shape[1]):
        col = levels[:, s]
        for i in np.nonzero(col != col[::-1])[0]:
            if g[i] > 0:
                bad.append((float(g[i]), s))
        pos = col[z:]
        for i in np.nonzero(np.diff(pos) < 0)[0]:
            bad.append((float(g[z + i + 1]), s))
    return bad


def extract_thresholds(policy: GridPolicy, grid: GridSpec, m: int | None = None, k_max: float | None = None) -> ThresholdPolicy:
    """Read ``k^(i)(s)`` off a threshold-form grid policy.

    Each threshold is the midpoint between the last non-negative grid point
    below level ``i`` and the first at or above it. A level never reached on
    the grid gets ``k_max`` (default ``e_max``) and a warning.
    """
    levels = np.asarray(policy.levels)
    bad = _threshold_violations(levels, grid)
    if bad:
        raise NonThresholdPolicyError(bad)
    if m is None:
        m = int(levels.max())
    k_max = grid.e_max if k_max is None else k_max
    g = grid.points
    z = grid.zero_index
    pos = g[z:]
    k = np.empty((levels.shape[1], m))
    for s in range(levels.shape[1]):
        col = levels[z:, s]
        for i in range(1, m + 1):
            hits = np.nonzero(col >= i)[0]
            if len(hits) == 0:
                warnings.warn(f"level {i} never used in state {s}; threshold set to {k_max}", RuntimeWarning, stacklevel=2)
                k[s, i - 1] = k_max
            elif hits[0] == 0:
                k[s, i - 1] = 0.0
            else:
                j = hits[0]
                k[s, i - 1] = 0.5 * (pos[j - 1] + pos[j])
    return ThresholdPolicy(k)


@dataclass
class StructureReport:
    even: bool
    even_violation: float
    quasi_convex: bool
    quasi_convex_violation: float
    quasi_convex_where: list
    decreasing_in_s: bool | None  # None when Q is not stochastically monotone
    decreasing_in_s_violation: float
    threshold_policy: bool
    policy_offending: list

    @property
    def ok(self) -> bool:
        return self.even and self.quasi_convex and self.decreasing_in_s is not False and self.threshold_policy


def check_structure(J: ValueTable, policy: GridPolicy, model: ModelSpec, tol: float = 1e-7, grid: GridSpec | None = None) -> StructureReport:
    """Check evenness and quasi-convexity of ``J`` in ``e``, monotonicity in ``s``, and threshold form of ``policy``.

    Quasi-convexity is checked with the minimum at ``e = 0``: ``J`` must be
    non-decreasing moving outward from the centre of the grid on both sides.
    """
    V = np.asarray(J.values)
    n = V.shape[0]
    z = n // 2
    even_gap = float(np.max(np.abs(V - V[::-1])))
    right = V[z:]
    left = V[z::-1]
    drops = np.concatenate([np.diff(right, axis=0), np.diff(left, axis=0)])
    qc_violation = float(max(0.0, -drops.min())) if drops.size else 0.0
    where = []
    if qc_violation > tol:
        for side, arr, sign in (("+", right, 1), ("-", left, -1)):
            for i, s in zip(*np.nonzero(np.diff(arr, axis=0) < -tol)):
                where.append((sign * int(i + 1), int(s)))
    if is_stochastically_monotone(model.channel.Q):
        gaps = np.diff(V, axis=1)  # J(e, s+1) - J(e, s) must be <= 0
        dec_violation = float(max(0.0, gaps.max())) if gaps.size else 0.0
        decreasing = dec_violation <= tol
    else:
        dec_violation, decreasing = float("nan"), None
    grid = grid or GridSpec(e_max=1.0, n_points=n)
    offending = _threshold_violations(np.asarray(policy.levels), grid)
    return StructureReport(
        even=even_gap <= tol,
        even_violation=even_gap,
        quasi_convex=qc_violation <= tol,
        quasi_convex_violation=qc_violation,
        quasi_convex_where=where,
        decreasing_in_s=decreasing,
        decreasing_in_s_violation=dec_violation,
        threshold_policy=not offending,
        policy_offending=offending,
    )


def write_table_csv(path, J: ValueTable, policy: GridPolicy, grid: GridSpec) -> None:
    g = grid.points
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["e", "s", "J", "u"])
        for s in range(J.values.shape[1]):
            for i, e in enumerate(g):
                w.writerow([repr(float(e)), s, repr(float(J.values[i, s])), int(policy.levels[i, s])])
