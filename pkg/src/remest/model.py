"""Problem instance for remote estimation over a Markov packet-drop channel.

The source is a scalar AR(1) process ``X_{t+1} = a X_t + W_t``. The channel
state ``S_t`` evolves as a Markov chain with transition matrix ``Q``; a packet
sent at power level ``u`` in channel state ``s`` is dropped with probability
``p(s, u)``. Level 0 means "do not transmit" and is always dropped.

Everything here is immutable after construction. Checks that can fail for a
well-typed but ill-posed instance are collected by :func:`validate_model`
instead of being raised from constructors, so a config can be inspected in
full before it is rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ROW_SUM_TOL = 1e-12


class _Blank:
    """Channel output for a dropped packet."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "BLANK"

    def __reduce__(self):
        return (_Blank, ())


BLANK = _Blank()


def _frozen_array(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NoiseSpec:
    """Distribution of the source noise ``W_t``.

    Use :meth:`gaussian` or :meth:`discrete` rather than the raw constructor.
    """

    kind: str
    sigma: float = 1.0
    support: np.ndarray = field(default_factory=lambda: _frozen_array([]))
    pmf: np.ndarray = field(default_factory=lambda: _frozen_array([]))

    def __post_init__(self):
        if self.kind not in ("gaussian", "discrete"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        object.__setattr__(self, "support", _frozen_array(self.support))
        object.__setattr__(self, "pmf", _frozen_array(self.pmf))
        if self.kind == "discrete" and len(self.support) != len(self.pmf):
            raise ValueError("discrete noise: support and pmf lengths differ")

    @classmethod
    def gaussian(cls, sigma: float = 1.0) -> "NoiseSpec":
        return cls("gaussian", sigma=float(sigma))

    @classmethod
    def discrete(cls, support: Sequence[float], pmf: Sequence[float]) -> "NoiseSpec":
        return cls("discrete", support=support, pmf=pmf)

    @property
    def variance(self) -> float:
        if self.kind == "gaussian":
            return self.sigma**2
        mean = float(self.support @ self.pmf)
        return float(((self.support - mean) ** 2) @ self.pmf)

    def violations(self) -> list[str]:
        out = []
        if self.kind == "gaussian":
            if not self.sigma > 0:
                out.append(f"noise sigma must be > 0, got {self.sigma}")
            return out
        sup, pmf = self.support, self.pmf
        if len(sup) == 0:
            out.append("discrete noise has empty support")
            return out
        if np.any(np.diff(sup) <= 0):
            out.append("discrete noise support must be strictly increasing")
        if np.any(pmf < 0):
            out.append("discrete noise pmf has negative entries")
        if abs(pmf.sum() - 1.0) > ROW_SUM_TOL:
            out.append(f"discrete noise pmf sums to {pmf.sum():.15g}, not 1")
        # symmetry: the mirrored support carries the same mass
        if not np.allclose(sup, -sup[::-1], atol=1e-12, rtol=0) or not np.allclose(
            pmf, pmf[::-1], atol=1e-12, rtol=0
        ):
            out.append("discrete noise pmf is not symmetric about 0")
        else:
            order = np.argsort(np.abs(sup), kind="stable")
            if np.any(np.diff(pmf[order]) > 1e-12):
                out.append("discrete noise pmf is not non-increasing in |w| (not unimodal)")
        return out


@dataclass(frozen=True)
class ArSourceSpec:
    a: float
    noise: NoiseSpec


@dataclass(frozen=True)
class ChannelSpec:
    """Finite-state Markov channel with ``m + 1`` power levels.

    ``drop[s, i]`` is the drop probability at level ``i`` in state ``s``;
    ``tx_cost[i]`` is the transmission cost of level ``i``.
    """

    Q: np.ndarray
    power_levels: np.ndarray
    drop: np.ndarray
    tx_cost: np.ndarray

    def __post_init__(self):
        for name in ("Q", "power_levels", "drop", "tx_cost"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        if self.Q.ndim != 2 or self.Q.shape[0] != self.Q.shape[1]:
            raise ValueError(f"Q must be square, got shape {self.Q.shape}")
        n_levels = len(self.power_levels)
        if self.drop.shape != (self.Q.shape[0], n_levels):
            raise ValueError(
                f"drop table must have shape {(self.Q.shape[0], n_levels)}, got {self.drop.shape}"
            )
        if self.tx_cost.shape != (n_levels,):
            raise ValueError(f"tx_cost must have {n_levels} entries, got {self.tx_cost.shape}")

    @property
    def num_states(self) -> int:
        return self.Q.shape[0]

    @property
    def num_levels(self) -> int:
        """Number of power levels including level 0."""
        return len(self.power_levels)

    @property
    def m(self) -> int:
        return self.num_levels - 1

    def violations(self) -> list[str]:
        out = []
        Q, p, lam, u = self.Q, self.drop, self.tx_cost, self.power_levels
        if np.any(Q < 0):
            out.append("Q has negative entries")
        for s, row in enumerate(Q):
            if abs(row.sum() - 1.0) > ROW_SUM_TOL:
                out.append(f"row {s} of Q sums to {row.sum():.15g}, not 1")
        if u[0] != 0:
            out.append(f"power level u(0) must be 0, got {u[0]}")
        if np.any(np.diff(u) <= 0):
            out.append("power levels must be strictly increasing")
        if np.any((p < 0) | (p > 1)):
            out.append("drop probabilities must lie in [0, 1]")
        for s in range(self.num_states):
            if p[s, 0] != 1.0:
                out.append(f"p({s},0) must be 1 (no transmission is always dropped), got {p[s, 0]}")
        for s in range(self.num_states):
            for i in range(1, self.num_levels):
                if p[s, i] > p[s, i - 1]:
                    out.append(
                        f"drop probability not decreasing in u: p({s},{i})={p[s, i]} > p({s},{i - 1})={p[s, i - 1]}"
                    )
        for s in range(1, self.num_states):
            for i in range(self.num_levels):
                if p[s, i] > p[s - 1, i]:
                    out.append(
                        f"drop probability not decreasing in s: p({s},{i})={p[s, i]} > p({s - 1},{i})={p[s - 1, i]}"
                    )
        if lam[0] != 0:
            out.append(f"λ(0) ≠ 0 (got {lam[0]})")
        if np.any(lam < 0):
            out.append("transmission costs must be non-negative")
        if np.any(np.diff(lam) < 0):
            out.append("transmission cost λ(u) must be non-decreasing in u")
        return out


@dataclass(frozen=True)
class CostSpec:
    """Distortion ``d`` and discount factor ``beta``.

    ``distortion`` is ``"power"`` (``d(e) = |e|**power``) or ``"table"``
    (piecewise-linear in ``|e|`` through ``(table_x, table_y)``, held constant
    past the last knot).
    """

    beta: float
    distortion: str = "power"
    power: float = 2.0
    table_x: np.ndarray = field(default_factory=lambda: _frozen_array([]))
    table_y: np.ndarray = field(default_factory=lambda: _frozen_array([]))

    def __post_init__(self):
        if self.distortion not in ("power", "table"):
            raise ValueError(f"unknown distortion {self.distortion!r}")
        object.__setattr__(self, "table_x", _frozen_array(self.table_x))
        object.__setattr__(self, "table_y", _frozen_array(self.table_y))

    def d(self, e):
        ae = np.abs(np.asarray(e, dtype=float))
        if self.distortion == "power":
            out = ae * ae if self.power == 2.0 else ae**self.power
        else:
            out = np.interp(ae, self.table_x, self.table_y)
        return out if out.ndim else float(out)

    def violations(self) -> list[str]:
        out = []
        if not 0 < self.beta <= 1:
            out.append(f"discount beta must lie in (0, 1], got {self.beta}")
        if self.distortion == "power":
            if not self.power >= 1:
                out.append(f"distortion power must be >= 1, got {self.power}")
            return out
        x, y = self.table_x, self.table_y
        if len(x) < 2 or len(x) != len(y):
            out.append("tabulated distortion needs matching table_x/table_y with >= 2 knots")
            return out
        if x[0] != 0:
            out.append("tabulated distortion must start at |e| = 0")
        if np.any(np.diff(x) <= 0):
            out.append("tabulated distortion knots must be strictly increasing")
        if y[0] != 0:
            out.append(f"d(0) must be 0, got {y[0]}")
        if np.any(np.diff(y) < 0):
            out.append("tabulated distortion is not non-decreasing in |e| (not quasi-convex)")
        return out


@dataclass(frozen=True)
class ModelSpec:
    source: ArSourceSpec
    channel: ChannelSpec
    cost: CostSpec
    reference_state: int = 0

    @property
    def beta(self) -> float:
        return self.cost.beta


@dataclass(frozen=True)
class ThresholdPolicy:
    """Per-channel-state thresholds ``k[s, i-1] = k^(i)(s)`` for ``i = 1..m``.

    Level ``i`` is used when ``|e|`` lies in ``[k^(i)(s), k^(i+1)(s))`` with
    ``k^(0) = 0`` and ``k^(m+1) = inf``; ``s`` is the previous channel state.
    """

    k: np.ndarray

    def __post_init__(self):
        k = np.array(self.k, dtype=float)
        if k.ndim == 1:
            k = k[:, None]
        k.setflags(write=False)
        object.__setattr__(self, "k", k)

    @property
    def num_states(self) -> int:
        return self.k.shape[0]

    @property
    def m(self) -> int:
        return self.k.shape[1]

    def as_vector(self) -> np.ndarray:
        return self.k.ravel().copy()

    @classmethod
    def from_vector(cls, vec, num_states: int) -> "ThresholdPolicy":
        return cls(np.asarray(vec, dtype=float).reshape(num_states, -1))

    def violations(self) -> list[str]:
        out = []
        if not np.all(np.isfinite(self.k)):
            out.append("thresholds must be finite")
        if np.any(self.k < 0):
            out.append("thresholds must be >= 0")
        if np.any(np.diff(self.k, axis=1) < 0):
            out.append("thresholds must be ordered k^(i)(s) <= k^(i+1)(s)")
        return out


def validate_model(spec: ModelSpec, policy: ThresholdPolicy | None = None) -> list[str]:
    """Return every violated invariant of ``spec`` (and ``policy``, if given).

    An empty list means the instance is valid.
    """
    report = []
    report += spec.source.noise.violations()
    if not np.isfinite(spec.source.a):
        report.append("source gain a must be finite")
    report += spec.channel.violations()
    report += spec.cost.violations()
    if not 0 <= spec.reference_state < spec.channel.num_states:
        report.append(
            f"reference_state {spec.reference_state} out of range for {spec.channel.num_states} channel states"
        )
    if policy is not None:
        report += policy.violations()
        if policy.k.shape != (spec.channel.num_states, spec.channel.m):
            report.append(
                f"policy shape {policy.k.shape} does not match (num_states, m) = "
                f"{(spec.channel.num_states, spec.channel.m)}"
            )
    return report


def is_stochastically_monotone(Q) -> bool:
    """True iff the tail sums ``sum_{k > l} Q[i, k]`` are non-decreasing in ``i``."""
    Q = np.asarray(Q, dtype=float)
    tails = np.cumsum(Q[:, ::-1], axis=1)[:, ::-1][:, 1:]
    return bool(np.all(np.diff(tails, axis=0) >= -ROW_SUM_TOL))


def step_error(e: float, delivered: bool, w: float, a: float) -> float:
    return w if delivered else a * e + w


def policy_power(policy: ThresholdPolicy, e: float, s: int) -> int:
    """Power level index chosen at error ``e`` after channel state ``s``."""
    return int(np.searchsorted(policy.k[s], abs(e), side="right"))


def kalman_estimate_update(xhat_prev: float, y, a: float) -> float:
    return a * xhat_prev if y is BLANK else y


def sample_noise(spec: NoiseSpec, rng: np.random.Generator, size=None):
    if spec.kind == "gaussian":
        return rng.normal(0.0, spec.sigma, size=size)
    return rng.choice(spec.support, p=spec.pmf, size=size)


def step_channel(Q, s: int, rng: np.random.Generator) -> int:
    cum = np.cumsum(np.asarray(Q)[s])
    return int(min(np.searchsorted(cum, rng.random(), side="right"), len(cum) - 1))


def gilbert_elliott_model(
    lambda1: float = 100.0,
    beta: float = 0.9,
    reference_state: int = 0,
    distortion_power: float = 2.0,
) -> ModelSpec:
    """The two-state Gilbert-Elliott example with binary power levels.

    The distortion is not stated for this example; ``d(e) = e**2`` is the
    default.
    """
    channel = ChannelSpec(
        Q=[[0.3, 0.7], [0.1, 0.9]],
        power_levels=[0.0, 1.0],
        drop=[[1.0, 0.7], [1.0, 0.2]],
        tx_cost=[0.0, lambda1],
    )
    return ModelSpec(
        source=ArSourceSpec(a=1.0, noise=NoiseSpec.gaussian(1.0)),
        channel=channel,
        cost=CostSpec(beta=beta, distortion="power", power=distortion_power),
        reference_state=reference_state,
    )
