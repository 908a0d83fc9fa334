"""Renewal Monte Carlo threshold optimization.

Each iteration estimates ``(L, M)`` at the current thresholds, draws one
simultaneous-perturbation direction ``delta``, estimates ``(L, M)`` at
``k + c*delta`` and ``k - c*delta`` on fresh sample paths, and moves ``k``
against ``N = M grad(L) - L grad(M)``, which has the sign of ``grad(C)``.
Steps are ADAM-scaled and followed by a projection back onto the feasible
threshold set.

Random streams are bookkept per iteration: iteration ``j`` uses the four
children of ``SeedSequence(seed, spawn_key=(j,))`` for the direction, the
value estimate, and the plus and minus perturbations respectively.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import ModelSpec, ThresholdPolicy
from .sim import DegeneratePolicyError, SimConfig, run_cycles

log = logging.getLogger(__name__)

# Evaluator(k_vector, rng) -> (l_hat, m_hat)
Evaluator = Callable[[np.ndarray, np.random.Generator], "tuple[float, float]"]

STREAM_DELTA, STREAM_VALUE, STREAM_PLUS, STREAM_MINUS = range(4)


class RmcAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class AdamParams:
    alpha: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class RmcConfig:
    n_cycles_per_estimate: int = 1000
    perturb_scale: float = 0.1
    perturb_dist: str = "normal"
    iterations: int = 30_000
    adam: AdamParams = field(default_factory=AdamParams)
    k_max: float = 50.0
    seed: int = 0
    max_cycle_len: int = 1_000_000
    discount_cutoff: float = 1e-12
    trace_every: int = 1

    def __post_init__(self):
        if not self.perturb_scale > 0:
            raise ValueError("perturb_scale must be > 0")
        if not self.k_max > 0:
            raise ValueError("k_max must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.perturb_dist not in ("normal", "rademacher"):
            raise ValueError(f"unknown perturbation distribution {self.perturb_dist!r}")

    def sim_config(self) -> SimConfig:
        return SimConfig(
            n_cycles=self.n_cycles_per_estimate,
            max_cycle_len=self.max_cycle_len,
            seed=self.seed,
            discount_cutoff=self.discount_cutoff,
        )


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass
class IterateTrace:
    """Per-iteration record; ``k[j]`` is the iterate at which row ``j`` was estimated."""

    iteration: list = field(default_factory=list)
    k: list = field(default_factory=list)
    l_hat: list = field(default_factory=list)
    m_hat: list = field(default_factory=list)
    n_hat: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    streams: list = field(default_factory=list)

    def append(self, j, k, l_hat, m_hat, n_hat, cycles, streams):
        self.iteration.append(j)
        self.k.append(np.array(k, dtype=float))
        self.l_hat.append(float(l_hat))
        self.m_hat.append(float(m_hat))
        self.n_hat.append(np.array(n_hat, dtype=float))
        self.cycles.append(int(cycles))
        self.streams.append(streams)

    def __len__(self) -> int:
        return len(self.iteration)

    def rows(self):
        """Flat CSV-style rows: iteration, k..., L, M, N..., C."""
        for j, k, l, m, n in zip(self.iteration, self.k, self.l_hat, self.m_hat, self.n_hat):
            yield [j, *k.tolist(), l, m, *n.tolist(), l / m if m else float("nan")]

    def header(self, num_states: int | None = None) -> list[str]:
        dim = len(self.k[0]) if self.k else 0
        if num_states and dim and dim % num_states == 0:
            m = dim // num_states
            knames = [f"k{i + 1}_s{s}" if m > 1 else f"k_s{s}" for s in range(num_states) for i in range(m)]
        else:
            knames = [f"k{i}" for i in range(dim)]
        return ["iteration", *knames, "L_hat", "M_hat", *[f"N_{n}" for n in knames], "C_hat"]


def iteration_streams(seed: int, j: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed, spawn_key=(j,)).spawn(4)


def project(k: np.ndarray, k_max: float, num_states: int) -> np.ndarray:
    """Clamp to ``[0, k_max]`` then sort levels within each channel state."""
    k = np.clip(np.asarray(k, dtype=float), 0.0, k_max)
    return np.sort(k.reshape(num_states, -1), axis=1).ravel()


def sample_direction(dim: int, dist: str, rng: np.random.Generator) -> np.ndarray:
    if dist == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=dim)
    return rng.standard_normal(dim)


def simulator_evaluator(model: ModelSpec, cfg: RmcConfig) -> Evaluator:
    sim_cfg = cfg.sim_config()
    n_states = model.channel.num_states

    def evaluate(kvec, rng):
        est = run_cycles(model, ThresholdPolicy.from_vector(kvec, n_states), sim_cfg, rng, check=False)
        return est.l_hat, est.m_hat

    return evaluate


def spsa_gradients(
    model: ModelSpec | None,
    k,
    cfg: RmcConfig,
    rng=None,
    *,
    evaluator: Evaluator | None = None,
    num_states: int | None = None,
    streams: list | None = None,
):
    """Simultaneous-perturbation estimates of ``grad L`` and ``grad M``.

    Returns ``(grad_l, grad_m, delta)``. The perturbed points are projected
    onto the feasible set before evaluation and each side uses its own
    stream. Either pass ``rng`` (a Generator, from which four child streams
    are spawned) or explicit ``streams``.
    """
    kvec = k.as_vector() if isinstance(k, ThresholdPolicy) else np.asarray(k, dtype=float)
    if num_states is None:
        num_states = model.channel.num_states if model is not None else 1
    if evaluator is None:
        evaluator = simulator_evaluator(model, cfg)
    if streams is None:
        gens = rng.spawn(4)
    else:
        gens = [np.random.Generator(np.random.PCG64(s)) for s in streams]
    delta = sample_direction(kvec.size, cfg.perturb_dist, gens[STREAM_DELTA])
    c = cfg.perturb_scale
    k_plus = project(kvec + c * delta, cfg.k_max, num_states)
    k_minus = project(kvec - c * delta, cfg.k_max, num_states)
    l_plus, m_plus = evaluator(k_plus, gens[STREAM_PLUS])
    l_minus, m_minus = evaluator(k_minus, gens[STREAM_MINUS])
    grad_l = delta * (l_plus - l_minus) / (2 * c)
    grad_m = delta * (m_plus - m_minus) / (2 * c)
    return grad_l, grad_m, delta


def n_statistic(l_hat, m_hat, grad_l, grad_m) -> np.ndarray:
    return m_hat * np.asarray(grad_l, dtype=float) - l_hat * np.asarray(grad_m, dtype=float)


def adam_update(grad: np.ndarray, state: AdamState, params: AdamParams) -> tuple[np.ndarray, AdamState]:
    t = state.t + 1
    m = params.beta1 * state.m + (1 - params.beta1) * grad
    v = params.beta2 * state.v + (1 - params.beta2) * grad * grad
    m_hat = m / (1 - params.beta1**t)
    v_hat = v / (1 - params.beta2**t)
    step = params.alpha * m_hat / (np.sqrt(v_hat) + params.epsilon)
    return step, AdamState(m, v, t)


def rmc_step(k_j, n_hat, adam: AdamState, k_max: float, num_states: int = 1, params: AdamParams | None = None):
    """One projected ADAM step; returns ``(k_next, adam_next)``."""
    params = params or AdamParams()
    step, adam = adam_update(np.asarray(n_hat, dtype=float), adam, params)
    return project(np.asarray(k_j, dtype=float) - step, k_max, num_states), adam


def default_initial_thresholds(num_states: int, m: int) -> ThresholdPolicy:
    return ThresholdPolicy(np.tile(np.arange(1, m + 1, dtype=float), (num_states, 1)))


def optimize(
    model: ModelSpec | None,
    k_0=None,
    cfg: RmcConfig | None = None,
    *,
    evaluator: Evaluator | None = None,
    num_states: int | None = None,
    callback=None,
):
    """Run the RMC iteration and return ``(k_final, trace)``.

    ``evaluator`` replaces the simulator (used to test the optimizer on
    synthetic objectives); it receives a flat threshold vector and a
    Generator and returns ``(l_hat, m_hat)``.
    """
    cfg = cfg or RmcConfig()
    if num_states is None:
        num_states = model.channel.num_states if model is not None else 1
    if k_0 is None:
        k_0 = default_initial_thresholds(num_states, model.channel.m)
    kvec = k_0.as_vector() if isinstance(k_0, ThresholdPolicy) else np.asarray(k_0, dtype=float).ravel()
    if np.any(kvec < 0) or np.any(kvec > cfg.k_max):
        raise ValueError("initial thresholds must lie in [0, k_max]")
    kvec = project(kvec, cfg.k_max, num_states)
    if evaluator is None:
        evaluator = simulator_evaluator(model, cfg)
    adam = AdamState.zeros(kvec.size)
    trace = IterateTrace()
    failures = 0
    cycles_per_iter = 3 * cfg.n_cycles_per_estimate
    for j in range(cfg.iterations):
        streams = iteration_streams(cfg.seed, j)
        try:
            l_hat, m_hat = evaluator(kvec, np.random.Generator(np.random.PCG64(streams[STREAM_VALUE])))
            grad_l, grad_m, _ = spsa_gradients(
                model, kvec, cfg, evaluator=evaluator, num_states=num_states, streams=streams
            )
        except DegeneratePolicyError as exc:
            failures += 1
            log.warning("iteration %d: %s", j, exc)
            if failures >= 10:
                raise RmcAbort(
                    f"simulation degenerate for {failures} consecutive iterations at k={kvec.tolist()}: {exc}"
                ) from exc
            continue
        failures = 0
        n_hat = n_statistic(l_hat, m_hat, grad_l, grad_m)
        if j % cfg.trace_every == 0 or j == cfg.iterations - 1:
            trace.append(j, kvec, l_hat, m_hat, n_hat, cycles_per_iter, [s.spawn_key for s in streams])
        kvec, adam = rmc_step(kvec, n_hat, adam, cfg.k_max, num_states, cfg.adam)
        if callback is not None:
            callback(j, kvec)
    return ThresholdPolicy.from_vector(kvec, num_states), trace
