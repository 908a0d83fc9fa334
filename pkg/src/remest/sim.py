"""Regenerative simulation of the closed loop under a threshold policy.

A cycle starts from the post-decision pair ``(E+, S) = (0, s_ref)`` and runs
until that pair is visited again. Per cycle we accumulate the discounted cost
``L_n = sum_t beta^t (lambda(U_t) + d(E+_t))`` and discounted length
``M_n = sum_t beta^t``; the performance of the policy is ``C = E[L] / E[M]``.

Cycles are simulated in fixed-size blocks, each with its own generator
spawned from the caller's seed, so results do not depend on how blocks are
spread over worker threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .model import ModelSpec, ThresholdPolicy, validate_model

BLOCK_SIZE = 50_000

# slots of the per-block accumulator
_L, _M, _LL, _MM, _LM, _BT, _BTBT, _CAPPED, _TRUNC, _STEPS = range(10)
_NSTATS = 10


class DegeneratePolicyError(RuntimeError):
    """Raised when most cycles never regenerate within the cycle cap."""


@dataclass(frozen=True)
class SimConfig:
    n_cycles: int = 1000
    max_cycle_len: int = 1_000_000
    seed: int = 0
    beta: float | None = None
    # Discounted runs stop a cycle once beta**t drops below this; the neglected
    # tail is O(discount_cutoff) relative to L and M. 0 disables it.
    discount_cutoff: float = 1e-12

    def __post_init__(self):
        if self.n_cycles < 1:
            raise ValueError("n_cycles must be positive")
        if self.max_cycle_len < 1:
            raise ValueError("max_cycle_len must be >= 1")


@dataclass(frozen=True)
class CycleEstimate:
    l_hat: float
    m_hat: float
    c_hat: float
    n_cycles: int
    se_l: float
    se_m: float
    se_c: float
    mean_beta_tau: float
    se_beta_tau: float
    capped_cycles: int
    truncated_cycles: int
    mean_steps: float

    def as_row(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class DirectEstimate:
    mean: float
    se: float
    reps: int
    horizon: int


def _kernel_args(model: ModelSpec, policy: ThresholdPolicy, beta: float):
    noise = model.source.noise
    if noise.kind == "gaussian":
        noise_kind, sigma = 0, noise.sigma
        support = np.zeros(1)
        cum_pmf = np.ones(1)
    else:
        noise_kind, sigma = 1, 0.0
        support = np.ascontiguousarray(noise.support, dtype=float)
        cum_pmf = np.cumsum(noise.pmf)
        cum_pmf[-1] = 1.0
    ch = model.channel
    cum_q = np.cumsum(ch.Q, axis=1)
    cum_q[:, -1] = 1.0
    cost = model.cost
    if cost.distortion == "power":
        dist_kind, dist_p = (0 if cost.power == 2.0 else 1), cost.power
        tab_x, tab_y = np.zeros(1), np.zeros(1)
    else:
        dist_kind, dist_p = 2, 0.0
        tab_x = np.ascontiguousarray(cost.table_x, dtype=float)
        tab_y = np.ascontiguousarray(cost.table_y, dtype=float)
    return (
        float(model.source.a),
        noise_kind,
        float(sigma),
        support,
        cum_pmf,
        np.ascontiguousarray(cum_q),
        np.ascontiguousarray(ch.drop, dtype=float),
        np.ascontiguousarray(ch.tx_cost, dtype=float),
        np.ascontiguousarray(policy.k, dtype=float),
        dist_kind,
        float(dist_p),
        tab_x,
        tab_y,
        float(beta),
    )


@numba.njit(cache=True, nogil=True, inline="always")
def _draw_noise(rng, kind, sigma, support, cum_pmf):
    if kind == 0:
        return sigma * rng.standard_normal()
    r = rng.random()
    j = 0
    while j < len(cum_pmf) - 1 and r >= cum_pmf[j]:
        j += 1
    return support[j]


@numba.njit(cache=True, nogil=True, inline="always")
def _distortion(e, kind, p, tab_x, tab_y):
    ae = abs(e)
    if kind == 0:
        return ae * ae
    if kind == 1:
        return ae**p
    n = tab_x.shape[0]
    if ae >= tab_x[n - 1]:
        return tab_y[n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if tab_x[mid] <= ae:
            lo = mid
        else:
            hi = mid
    w = (ae - tab_x[lo]) / (tab_x[hi] - tab_x[lo])
    return tab_y[lo] + w * (tab_y[hi] - tab_y[lo])


@numba.njit(cache=True, nogil=True, inline="always")
def _next_state(rng, cum_q, sp):
    r = rng.random()
    n = cum_q.shape[1]
    s = 0
    while s < n - 1 and r >= cum_q[sp, s]:
        s += 1
    return s


@numba.njit(cache=True, nogil=True, inline="always")
def _level(k, sp, ae):
    m = k.shape[1]
    i = 0
    while i < m and ae >= k[sp, i]:
        i += 1
    return i


@numba.njit(cache=True, nogil=True)
def _cycles_kernel(
    rng, a, noise_kind, sigma, support, cum_pmf, cum_q, drop, tx_cost, k,
    dist_kind, dist_p, tab_x, tab_y, beta, s_ref, n_cycles, max_len, trunc_len,
):
    out = np.zeros(10)
    for _ in range(n_cycles):
        e = _draw_noise(rng, noise_kind, sigma, support, cum_pmf)
        sp = s_ref
        disc = 1.0
        L = 0.0
        M = 0.0
        t = 0
        while True:
            u = _level(k, sp, abs(e))
            s = _next_state(rng, cum_q, sp)
            delivered = False
            if u > 0:
                delivered = rng.random() >= drop[s, u]
            ep = 0.0 if delivered else e
            L += disc * (tx_cost[u] + _distortion(ep, dist_kind, dist_p, tab_x, tab_y))
            M += disc
            disc *= beta
            t += 1
            if ep == 0.0 and s == s_ref:
                break
            if t >= trunc_len:
                if trunc_len < max_len:
                    out[8] += 1.0
                else:
                    out[7] += 1.0
                break
            e = a * ep + _draw_noise(rng, noise_kind, sigma, support, cum_pmf)
            sp = s
        out[0] += L
        out[1] += M
        out[2] += L * L
        out[3] += M * M
        out[4] += L * M
        out[5] += disc
        out[6] += disc * disc
        out[9] += t
    return out


@numba.njit(cache=True, nogil=True)
def _direct_kernel(
    rng, a, noise_kind, sigma, support, cum_pmf, cum_q, drop, tx_cost, k,
    dist_kind, dist_p, tab_x, tab_y, beta, s_ref, reps, horizon,
):
    total = 0.0
    total2 = 0.0
    for _ in range(reps):
        e = _draw_noise(rng, noise_kind, sigma, support, cum_pmf)
        sp = s_ref
        disc = 1.0
        acc = 0.0
        for _t in range(horizon):
            u = _level(k, sp, abs(e))
            s = _next_state(rng, cum_q, sp)
            delivered = False
            if u > 0:
                delivered = rng.random() >= drop[s, u]
            ep = 0.0 if delivered else e
            acc += disc * (tx_cost[u] + _distortion(ep, dist_kind, dist_p, tab_x, tab_y))
            disc *= beta
            e = a * ep + _draw_noise(rng, noise_kind, sigma, support, cum_pmf)
            sp = s
        acc *= 1.0 - beta
        total += acc
        total2 += acc * acc
    return total, total2


def _block_generators(rng, seed, n_blocks):
    """One independent generator per block, derived only from ``rng``/``seed``."""
    if isinstance(rng, np.random.Generator):
        return rng.spawn(n_blocks)
    ss = np.random.SeedSequence(seed) if rng is None else (
        rng if isinstance(rng, np.random.SeedSequence) else np.random.SeedSequence(rng)
    )
    return [np.random.Generator(np.random.PCG64(c)) for c in ss.spawn(n_blocks)]


def _truncation_length(beta: float, cutoff: float, max_len: int) -> int:
    if beta >= 1.0 or cutoff <= 0.0:
        return max_len
    return min(max_len, max(1, math.ceil(math.log(cutoff) / math.log(beta))))


def _blocks(n: int, block_size: int) -> list[int]:
    sizes = [block_size] * (n // block_size)
    if n % block_size:
        sizes.append(n % block_size)
    return sizes


def run_cycles(
    model: ModelSpec,
    policy: ThresholdPolicy,
    cfg: SimConfig,
    rng=None,
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
    check: bool = True,
) -> CycleEstimate:
    """Estimate ``L``, ``M`` and ``C = L/M`` from ``cfg.n_cycles`` regenerative cycles.

    ``rng`` may be a ``Generator``, a ``SeedSequence`` or an int; when omitted
    ``cfg.seed`` is used. Raises :class:`DegeneratePolicyError` if more than
    half of the cycles reach ``cfg.max_cycle_len``.
    """
    if check:
        problems = validate_model(model, policy)
        if problems:
            raise ValueError("invalid model/policy: " + "; ".join(problems))
    beta = model.beta if cfg.beta is None else cfg.beta
    args = _kernel_args(model, policy, beta)
    trunc_len = _truncation_length(beta, cfg.discount_cutoff, cfg.max_cycle_len)
    sizes = _blocks(cfg.n_cycles, block_size)
    gens = _block_generators(rng, cfg.seed, len(sizes))

    def one(i):
        return _cycles_kernel(
            gens[i], *args, model.reference_state, sizes[i], cfg.max_cycle_len, trunc_len
        )

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(one, range(len(sizes))))
    else:
        parts = [one(i) for i in range(len(sizes))]
    acc = np.zeros(_NSTATS)
    for part in parts:
        acc += part
    est = _summarize(acc, cfg.n_cycles)
    if est.capped_cycles > 0.5 * est.n_cycles:
        raise DegeneratePolicyError(
            f"{est.capped_cycles} of {est.n_cycles} cycles hit the cap of "
            f"{cfg.max_cycle_len} steps without regenerating; policy k={policy.k.tolist()}"
        )
    return est


def _summarize(acc: np.ndarray, n: int) -> CycleEstimate:
    l_hat = acc[_L] / n
    m_hat = acc[_M] / n
    c_hat = l_hat / m_hat
    if n > 1:
        var_l = max(acc[_LL] / n - l_hat**2, 0.0) * n / (n - 1)
        var_m = max(acc[_MM] / n - m_hat**2, 0.0) * n / (n - 1)
        cov_lm = (acc[_LM] / n - l_hat * m_hat) * n / (n - 1)
        mbt = acc[_BT] / n
        var_bt = max(acc[_BTBT] / n - mbt**2, 0.0) * n / (n - 1)
        # delta method for the ratio L/M
        var_c = max(var_l - 2 * c_hat * cov_lm + c_hat**2 * var_m, 0.0) / m_hat**2
        se_l, se_m, se_c, se_bt = (math.sqrt(v / n) for v in (var_l, var_m, var_c, var_bt))
    else:
        se_l = se_m = se_c = se_bt = math.nan
    return CycleEstimate(
        l_hat=float(l_hat),
        m_hat=float(m_hat),
        c_hat=float(c_hat),
        n_cycles=int(n),
        se_l=float(se_l),
        se_m=float(se_m),
        se_c=float(se_c),
        mean_beta_tau=float(acc[_BT] / n),
        se_beta_tau=float(se_bt),
        capped_cycles=int(acc[_CAPPED]),
        truncated_cycles=int(acc[_TRUNC]),
        mean_steps=float(acc[_STEPS] / n),
    )


def check_renewal_identity(est: CycleEstimate, beta: float) -> float:
    """Residual of ``E[beta^tau] = 1 - (1 - beta) M`` for the cycles behind ``est``."""
    return est.mean_beta_tau - (1.0 - (1.0 - beta) * est.m_hat)


def renewal_identity_se(est: CycleEstimate, beta: float) -> float:
    return math.hypot(est.se_beta_tau, (1.0 - beta) * est.se_m)


def direct_horizon(beta: float, tol: float = 1e-6) -> int:
    return math.ceil(math.log(tol) / math.log(beta)) + 1


def estimate_cost_direct(
    model: ModelSpec,
    policy: ThresholdPolicy,
    horizon: int | None = None,
    reps: int = 10_000,
    rng=None,
    seed: int = 0,
) -> DirectEstimate:
    """Plain Monte Carlo of the normalized discounted cost from ``(E+, S) = (0, s_ref)``.

    Independent of the regenerative machinery; used to cross-check it.
    """
    beta = model.beta
    if not 0 < beta < 1:
        raise ValueError("direct estimation needs beta in (0, 1)")
    if horizon is None:
        horizon = direct_horizon(beta)
    if beta**horizon >= 1e-6:
        raise ValueError(f"horizon {horizon} too short: beta**horizon = {beta**horizon:.3g}")
    args = _kernel_args(model, policy, beta)
    sizes = _blocks(reps, BLOCK_SIZE)
    gens = _block_generators(rng, seed, len(sizes))
    tot = tot2 = 0.0
    for g, size in zip(gens, sizes):
        a, b = _direct_kernel(g, *args, model.reference_state, size, horizon)
        tot += a
        tot2 += b
    mean = tot / reps
    var = max(tot2 / reps - mean**2, 0.0) * reps / max(reps - 1, 1)
    return DirectEstimate(mean=float(mean), se=float(math.sqrt(var / reps)), reps=reps, horizon=horizon)
