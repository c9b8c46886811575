"""Ring consensus and vehicle platoon problem definitions.

Two applications share the synthesis pipeline: first-order consensus on a
ring (every site integrates its own disturbance and control) and a platoon
of second-order vehicles written in the coordinates that make the input
enter the first state.  Each application offers two performance metrics —
a local error comparing neighbours, and the deviation from the ring-wide
average — weighted against the control effort ``gamma * u``.

The consensus metrics with band sizes 1 and 2 have closed-form optima;
:func:`analytic_oracle` returns them so solver output can be checked
against hard numbers.  The platoon problems are solved numerically only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .param import (
    ParamFamily,
    PlantSpec,
    ThetaKernel,
    family_first_order,
    family_nth_order,
)
from .ratfun import RationalFn
from .sis import ConvKernel

__all__ = [
    "AppsError",
    "InvalidObjective",
    "OracleUnavailable",
    "CONSENSUS_METRICS",
    "PLATOON_METRICS",
    "ConsensusObjective",
    "PlatoonObjective",
    "objective_from_json",
    "objective_label",
    "build_consensus",
    "build_platoon",
    "build_objective",
    "family_for",
    "analytic_oracle",
]

CONSENSUS_METRICS = ("local_error", "deviation_from_average")
PLATOON_METRICS = ("local_error_position", "deviation_from_average_position")

#: per-site dynamics of the platoon in the transformed coordinates:
#: first state sees the control and the disturbance, position is the second
PLATOON_A = np.array([[1.0, -1.0], [1.0, -1.0]])
PLATOON_B2 = np.array([[1.0], [0.0]])
PLATOON_B1 = np.array([[1.0], [0.0]])
#: selects the position component of a platoon site
POSITION = np.array([[0.0, 1.0]])


class AppsError(Exception):
    """Base class for application-layer failures."""


class InvalidObjective(AppsError):
    """Objective fields outside the supported class."""


class OracleUnavailable(AppsError):
    """No closed-form optimum is known for the requested case."""


def _validate(metric: str, allowed, gamma: float, N: int, M: int):
    if metric not in allowed:
        raise InvalidObjective(
            f"metric must be one of {allowed}, got {metric!r}")
    if not (isinstance(gamma, (int, float)) and math.isfinite(gamma)
            and gamma > 0.0):
        raise InvalidObjective(f"gamma must be a positive real, got {gamma}")
    if not (isinstance(N, int) and N >= 3 and N % 2 == 1):
        raise InvalidObjective(f"N must be an odd integer >= 3, got {N}")
    if not (isinstance(M, int) and 0 <= M and 2 * M < N):
        raise InvalidObjective(
            f"band size must satisfy 0 <= M < N/2, got M={M}, N={N}")


@dataclass(frozen=True)
class ConsensusObjective:
    """First-order consensus on a ring of N sites, band size M."""

    metric: str
    gamma: float
    N: int
    M: int

    def __post_init__(self):
        _validate(self.metric, CONSENSUS_METRICS, self.gamma, self.N, self.M)

    def to_json(self) -> dict:
        return {"app": "consensus", "metric": self.metric,
                "gamma": self.gamma, "N": self.N, "M": self.M}


@dataclass(frozen=True)
class PlatoonObjective:
    """Second-order vehicle ring (platoon), band size M."""

    metric: str
    gamma: float
    N: int
    M: int

    def __post_init__(self):
        _validate(self.metric, PLATOON_METRICS, self.gamma, self.N, self.M)

    def to_json(self) -> dict:
        return {"app": "platoon", "metric": self.metric,
                "gamma": self.gamma, "N": self.N, "M": self.M}


def objective_from_json(d: dict):
    """Rebuild an objective from its JSON form (dispatch on ``app``)."""
    try:
        app = d["app"]
        fields = (d["metric"], float(d["gamma"]), int(d["N"]), int(d["M"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidObjective(f"malformed objective JSON: {exc}") from exc
    if app == "consensus":
        return ConsensusObjective(*fields)
    if app == "platoon":
        return PlatoonObjective(*fields)
    raise InvalidObjective(f"unknown app {app!r}")


def objective_label(obj) -> str:
    """Compact identifier used in CSV output: ``app:metric``."""
    return f"{obj.to_json()['app']}:{obj.metric}"


def _ave_kernel(N: int, block=None) -> ConvKernel:
    """Deviation-from-average rows: I - (1/N) ones, optionally per block."""
    base = np.array([[1.0]]) if block is None else np.asarray(block, float)
    entries = {0: (N - 1.0) / N * base}
    for m in range(1, N):
        entries[m] = -base / N
    return ConvKernel(N, entries)


def build_consensus(obj: ConsensusObjective):
    """Plant and weights: integrators with absolute state error metrics.

    Returns ``(plant, C1, D12, B1)`` ready for the synthesis layer: the
    a = 0 first-order invariant plant, the metric kernel on the state, the
    scalar control weight gamma, and a sitewise unit disturbance input.
    """
    if not isinstance(obj, ConsensusObjective):
        raise InvalidObjective("expected a ConsensusObjective")
    plant = PlantSpec.si_invariant_1st(0.0, obj.N)
    if obj.metric == "local_error":
        C1 = ConvKernel(obj.N, {0: 1.0, 1: -1.0})
    else:
        C1 = _ave_kernel(obj.N)
    return plant, C1, float(obj.gamma), 1.0


def build_platoon(obj: PlatoonObjective):
    """Plant and weights for the position-metric vehicle ring.

    Returns ``(plant, C1, D12, B1)``: the transformed second-order sitewise
    plant, a metric kernel acting on the position component only, the
    scalar control weight, and the disturbance entering the first state.
    """
    if not isinstance(obj, PlatoonObjective):
        raise InvalidObjective("expected a PlatoonObjective")
    plant = PlantSpec.si_invariant_nth(PLATOON_A, PLATOON_B2, obj.N)
    if obj.metric == "local_error_position":
        C1 = ConvKernel(obj.N, {0: POSITION, 1: -POSITION})
    else:
        C1 = _ave_kernel(obj.N, POSITION)
    return plant, C1, float(obj.gamma), PLATOON_B1.copy()


def build_objective(obj):
    """Dispatch to the right builder for a parsed objective."""
    if isinstance(obj, ConsensusObjective):
        return build_consensus(obj)
    if isinstance(obj, PlatoonObjective):
        return build_platoon(obj)
    raise InvalidObjective(f"unsupported objective type {type(obj)!r}")


def family_for(obj) -> ParamFamily:
    """The closed-loop family matching the application's plant."""
    if isinstance(obj, ConsensusObjective):
        return family_first_order(0.0)
    if isinstance(obj, PlatoonObjective):
        return family_nth_order(PLATOON_A, PLATOON_B2)
    raise InvalidObjective(f"unsupported objective type {type(obj)!r}")


def analytic_oracle(metric: str, M: int, gamma: float, N: int):
    """Closed-form optimum for the consensus metrics at band sizes 1 and 2.

    Returns ``(theta, reducible_cost)`` — the optimal parameter kernel on
    the N-ring and the antistable-projection cost the tables report (the
    full objective of these problems is exactly twice it).  Only the four
    cases with known closed forms are served; anything else raises
    :class:`OracleUnavailable`.  The band must fit strictly inside the
    ring (2M+1 < N), otherwise the optimum is not attained.
    """
    if metric not in CONSENSUS_METRICS or M not in (1, 2):
        raise OracleUnavailable(
            f"no closed form for metric={metric!r}, M={M}")
    _validate(metric, CONSENSUS_METRICS, gamma, N, M)
    if 2 * M + 1 >= N:
        raise OracleUnavailable(
            f"band 2M+1 = {2 * M + 1} must be strictly inside the ring "
            f"N = {N} for the closed form to be optimal")
    g = float(gamma)
    s = RationalFn.var()
    if metric == "local_error":
        if M == 1:
            alpha = math.sqrt(2.0 - math.sqrt(2.0))
            beta = math.sqrt(2.0 + math.sqrt(2.0))
            den = 2.0 * (alpha + g * s) * (beta + g * s)
            t0 = (2.0 * g * g * s - 2.0 * math.sqrt(2.0)
                  - g * (alpha + beta) * (s - 1.0)) / den
            t1 = (g * (beta - alpha) / math.sqrt(2.0)) * (s + 1.0) / den
            entries = {0: t0, 1: t1, -1: t1}
            cost = (g / 4.0) * (alpha + beta)
        else:
            r1 = math.sqrt(2.0 - math.sqrt(3.0))
            r2 = math.sqrt(2.0 + math.sqrt(3.0))
            rt2 = math.sqrt(2.0)
            f1 = (g - r1) / (r1 + g * s)
            f2 = (g - rt2) / (rt2 + g * s)
            f3 = (g - r2) / (r2 + g * s)
            t0 = (f1 + f2 + f3) * (1.0 / 3.0)
            t1 = (f1 - f3) * (1.0 / (2.0 * math.sqrt(3.0)))
            t2 = (f1 + f3 - 2.0 * f2) * (1.0 / 6.0)
            entries = {0: t0, 1: t1, -1: t1, 2: t2, -2: t2}
            cost = (g / 6.0) * (r1 + rt2 + r2)
    else:
        q = 2 * M + 1
        w = math.sqrt(1.0 - q / N)
        g1 = (g - 1.0) / (1.0 + g * s)
        g2 = (g - w) / (w + g * s)
        t0 = (2.0 * M / q) * g1 + (1.0 / q) * g2
        td = (-1.0 / q) * g1 + (1.0 / q) * g2
        entries = {0: t0}
        for d in range(1, M + 1):
            entries[d] = td
            entries[-d] = td
        cost = g * (2.0 * M + w) / (2.0 * q)
    return ThetaKernel.from_entries(N, entries, M=M), cost
