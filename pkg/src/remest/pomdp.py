"""Exact common-information dynamic program for a finite-state Markov source.

The receiver-side state is a belief over source symbols. Before a channel
use it is the pre-transmission belief; after observing the channel output
(a symbol or ``BLANK``) it is the post-transmission belief. At each stage the
transmitter is handed a prescription ``phi`` mapping symbols to power levels,
chosen from common information, i.e. from the pre-transmission belief and
the previous channel state.

Timing: the prescription at stage ``t`` is chosen knowing ``S_{t-1}``; the
channel then moves to ``S_t ~ Q[S_{t-1}]`` and the packet is dropped with
probability ``p(S_t, phi(X_t))``.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .model import BLANK, ChannelSpec

NORM_TOL = 1e-10
MAX_SYMBOLS = 6
# enumeration caps for the exact solver
MAX_DP_SYMBOLS, MAX_DP_HORIZON, MAX_DP_M = 4, 4, 2


class CorruptBeliefError(ValueError):
    pass


class ImpossibleObservationError(ValueError):
    pass


class BudgetExceededError(ValueError):
    pass


@dataclass(frozen=True)
class FiniteSourceSpec:
    P: np.ndarray
    distortion: np.ndarray

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        d = np.array(self.distortion, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        if P.shape[0] > MAX_SYMBOLS:
            raise ValueError(f"at most {MAX_SYMBOLS} source symbols are supported")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-12):
            raise ValueError("P must be row-stochastic")
        if d.shape != P.shape:
            raise ValueError("distortion must be n x n")
        if np.any(d < 0):
            raise ValueError("distortion must be non-negative")
        P.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "distortion", d)

    @property
    def n_symbols(self) -> int:
        return self.P.shape[0]


@dataclass(frozen=True)
class Belief:
    probs: np.ndarray
    kind: str = "pre"

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if np.any(p < -NORM_TOL) or abs(p.sum() - 1.0) > NORM_TOL:
            raise CorruptBeliefError(f"not a probability vector: {p}")
        p = np.clip(p, 0.0, None)
        p = p / p.sum()
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        if self.kind not in ("pre", "post"):
            raise ValueError(f"belief kind must be 'pre' or 'post', got {self.kind!r}")

    @classmethod
    def dirac(cls, x: int, n: int, kind: str = "post") -> "Belief":
        p = np.zeros(n)
        p[x] = 1.0
        return cls(p, kind)

    def key(self, quantum: float = 1e-9) -> tuple:
        return tuple(np.round(self.probs / quantum).astype(np.int64).tolist())


Prescription = tuple  # phi[x] = power level index for symbol x


def pre_update(post: Belief, P) -> Belief:
    """Propagate a post-transmission belief one step through the source chain."""
    out = np.asarray(post.probs) @ np.asarray(P, dtype=float)
    if abs(out.sum() - 1.0) > NORM_TOL:
        raise CorruptBeliefError(f"propagated belief sums to {out.sum():.15g}")
    return Belief(out / out.sum(), "pre")


def drop_mass(pre: Belief, s: int, phi: Prescription, channel: ChannelSpec) -> float:
    """Probability that the packet is dropped in channel state ``s`` under ``phi``."""
    return float(np.dot(pre.probs, channel.drop[s, list(phi)]))


def post_update(pre: Belief, s: int, phi: Prescription, y, channel: ChannelSpec) -> Belief:
    n = len(pre.probs)
    if y is not BLANK:
        return Belief.dirac(int(y), n, "post")
    weighted = pre.probs * channel.drop[s, list(phi)]
    b = weighted.sum()
    if b <= 0:
        raise ImpossibleObservationError(f"BLANK has probability 0 in state {s} under prescription {phi}")
    return Belief(weighted / b, "post")


def optimal_estimate(post: Belief, d) -> tuple[int, float]:
    """Symbol minimizing expected distortion (smallest index on ties) and that distortion."""
    costs = np.asarray(post.probs) @ np.asarray(d, dtype=float)
    best = costs.min()
    xhat = int(np.nonzero(costs <= best + 1e-15 * max(1.0, abs(best)))[0][0])
    return xhat, float(costs[xhat])


def prescriptions(n_symbols: int, n_levels: int) -> Iterator[Prescription]:
    return itertools.product(range(n_levels), repeat=n_symbols)


@dataclass
class StrategyNode:
    t: int
    s: int  # previous channel state
    belief: np.ndarray  # pre-transmission belief
    phi: Prescription
    value: float


@dataclass
class StrategyTree:
    value: float
    nodes: list

    def to_text(self) -> str:
        lines = []
        for nd in self.nodes:
            b = ", ".join(f"{p:.6g}" for p in nd.belief)
            lines.append(f"{'  ' * nd.t}t={nd.t} s={nd.s} pi=[{b}] phi={list(nd.phi)} V={nd.value:.12g}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "s", "belief", "phi", "value"])
            for nd in self.nodes:
                w.writerow([nd.t, nd.s, " ".join(repr(float(p)) for p in nd.belief), " ".join(map(str, nd.phi)), repr(nd.value)])


class _Solver:
    def __init__(self, source: FiniteSourceSpec, channel: ChannelSpec, T: int):
        self.src = source
        self.ch = channel
        self.T = T
        self.n = source.n_symbols
        self.phis = list(prescriptions(self.n, channel.num_levels))
        self.memo1: dict = {}
        self.memo2: dict = {}

    def v1(self, t: int, pre: Belief, sp: int) -> tuple[float, Prescription | None]:
        if t > self.T:
            return 0.0, None
        key = (t, pre.key(), sp)
        if key in self.memo1:
            return self.memo1[key]
        ch, pi = self.ch, pre.probs
        best, best_phi = np.inf, None
        for phi in self.phis:
            idx = list(phi)
            val = float(pi @ ch.tx_cost[idx])
            for s in range(ch.num_states):
                q = ch.Q[sp, s]
                if q == 0:
                    continue
                p = ch.drop[s, idx]
                acc = 0.0
                for x in range(self.n):
                    mass = pi[x] * (1.0 - p[x])
                    if mass > 0:
                        acc += mass * self.v2(t, Belief.dirac(x, self.n), s)
                b = float(pi @ p)
                if b > 0:
                    acc += b * self.v2(t, post_update(pre, s, phi, BLANK, ch), s)
                val += q * acc
            if val < best - 1e-12 * max(1.0, abs(best)) or best_phi is None:
                best, best_phi = val, phi
        self.memo1[key] = (best, best_phi)
        return best, best_phi

    def v2(self, t: int, post: Belief, s: int) -> float:
        key = (t, post.key(), s)
        if key in self.memo2:
            return self.memo2[key]
        _, dist = optimal_estimate(post, self.src.distortion)
        val = dist + self.v1(t + 1, pre_update(post, self.src.P), s)[0]
        self.memo2[key] = val
        return val

    def reachable(self, pre: Belief, sp: int) -> list[StrategyNode]:
        nodes, seen = [], set()
        frontier = [(0, pre, sp)]
        while frontier:
            t, b, s_prev = frontier.pop(0)
            if t > self.T or (t, b.key(), s_prev) in seen:
                continue
            seen.add((t, b.key(), s_prev))
            value, phi = self.v1(t, b, s_prev)
            nodes.append(StrategyNode(t, s_prev, b.probs.copy(), phi, value))
            idx = list(phi)
            for s in range(self.ch.num_states):
                if self.ch.Q[s_prev, s] == 0:
                    continue
                p = self.ch.drop[s, idx]
                for x in range(self.n):
                    if b.probs[x] * (1.0 - p[x]) > 0:
                        frontier.append((t + 1, pre_update(Belief.dirac(x, self.n), self.src.P), s))
                if float(b.probs @ p) > 0:
                    post = post_update(b, s, phi, BLANK, self.ch)
                    frontier.append((t + 1, pre_update(post, self.src.P), s))
        return nodes


def solve_common_info_dp(
    source: FiniteSourceSpec,
    channel: ChannelSpec,
    T: int,
    initial_belief,
    initial_state: int,
) -> tuple[float, StrategyTree]:
    """Optimal expected cost over stages ``0..T`` and the prescriptions at every reachable node.

    Transmission costs are ``channel.tx_cost``; distortion is ``source.distortion``.
    """
    if source.n_symbols > MAX_DP_SYMBOLS or T > MAX_DP_HORIZON or channel.m > MAX_DP_M:
        raise BudgetExceededError(
            f"exact solver limited to n <= {MAX_DP_SYMBOLS}, T <= {MAX_DP_HORIZON}, m <= {MAX_DP_M}; "
            f"got n={source.n_symbols}, T={T}, m={channel.m}"
        )
    if T < 0:
        raise ValueError("T must be >= 0")
    pre = initial_belief if isinstance(initial_belief, Belief) else Belief(initial_belief, "pre")
    solver = _Solver(source, channel, T)
    value, _ = solver.v1(0, pre, initial_state)
    return value, StrategyTree(value, solver.reachable(pre, initial_state))
