"""PEV batteries, on-board chargers and stochastic charging sessions.

Sessions are sampled from configurable, seedable distributions (the study
that motivated the defaults drew on proprietary telematics data, so these
are parametric stand-ins).  Charging follows a constant-power profile at the
charger limit with a linear taper to zero between the taper threshold and the
target state of charge.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .feeder import PhaseRef


class BehaviorConfigError(ValueError):
    """Distribution parameters cannot produce valid sessions."""


@dataclass(frozen=True)
class Dist:
    """One sampling distribution: truncated normal, uniform or constant."""

    family: str
    mean: float = 0.0
    sd: float = 1.0
    low: float = 0.0
    high: float = 0.0
    value: float = 0.0

    def __post_init__(self):
        if self.family not in ("truncnorm", "uniform", "constant"):
            raise BehaviorConfigError(f"unknown distribution family {self.family!r}")
        if self.family == "truncnorm" and (self.sd <= 0 or self.high <= self.low):
            raise BehaviorConfigError(
                f"truncnorm needs sd > 0 and high > low, got sd={self.sd}, "
                f"[{self.low}, {self.high}]")
        if self.family == "uniform" and self.high < self.low:
            raise BehaviorConfigError(
                f"uniform needs high >= low, got [{self.low}, {self.high}]")

    @property
    def min(self) -> float:
        if self.family == "constant":
            return self.value
        return self.low

    @property
    def max(self) -> float:
        if self.family == "constant":
            return self.value
        return self.high

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.family == "constant":
            return np.full(size, self.value)
        if self.family == "uniform":
            return rng.uniform(self.low, self.high, size)
        a = (self.low - self.mean) / self.sd
        b = (self.high - self.mean) / self.sd
        return stats.truncnorm.rvs(a, b, loc=self.mean, scale=self.sd,
                                   size=size, random_state=rng)

    @classmethod
    def constant(cls, value: float) -> "Dist":
        return cls(family="constant", value=value)

    @classmethod
    def uniform(cls, low: float, high: float) -> "Dist":
        return cls(family="uniform", low=low, high=high)

    @classmethod
    def truncnorm(cls, mean: float, sd: float, low: float, high: float) -> "Dist":
        return cls(family="truncnorm", mean=mean, sd=sd, low=low, high=high)


def _minutes(hours: float) -> float:
    return hours * 60.0


#: Evening-arrival defaults; times are minutes since the start of the day,
#: departures run into the next day (offset by 1440).
DEFAULT_BEHAVIOR_FIELDS = dict(
    arrival=Dist.truncnorm(mean=_minutes(18), sd=_minutes(1.5),
                           low=_minutes(12), high=_minutes(23)),
    departure=Dist.truncnorm(mean=1440 + _minutes(7.5), sd=_minutes(1.0),
                             low=1440 + _minutes(4), high=1440 + _minutes(11)),
    soc_arrival=Dist.uniform(0.2, 0.8),
    soc_target=Dist.constant(1.0),
)


@dataclass(frozen=True)
class BehaviorConfig:
    arrival: Dist = DEFAULT_BEHAVIOR_FIELDS["arrival"]
    departure: Dist = DEFAULT_BEHAVIOR_FIELDS["departure"]
    soc_arrival: Dist = DEFAULT_BEHAVIOR_FIELDS["soc_arrival"]
    soc_target: Dist = DEFAULT_BEHAVIOR_FIELDS["soc_target"]

    def __post_init__(self):
        # Truncation limits must keep every sampled session valid.
        if self.arrival.max >= self.departure.min:
            raise BehaviorConfigError(
                f"arrival can reach {self.arrival.max} min but departure can be "
                f"as early as {self.departure.min} min")
        if self.soc_arrival.min < 0 or self.soc_target.max > 1:
            raise BehaviorConfigError("SOC distributions must stay within [0, 1]")
        if self.soc_arrival.max > self.soc_target.min:
            raise BehaviorConfigError(
                f"arrival SOC can reach {self.soc_arrival.max} above the lowest "
                f"target SOC {self.soc_target.min}")


@dataclass(frozen=True)
class ChargingSession:
    """One vehicle's park interval and charging need at a feeder location."""

    vehicle_id: str
    location: PhaseRef
    park_start_min: float
    park_end_min: float
    soc_arrival: float
    soc_target: float
    capacity_kwh: float = 50.0
    rating_kva: float = 6.6

    def __post_init__(self):
        if not self.park_start_min < self.park_end_min:
            raise ValueError(f"{self.vehicle_id}: park start must precede park end")
        if not 0 <= self.soc_arrival <= self.soc_target <= 1:
            raise ValueError(f"{self.vehicle_id}: need 0 <= arrival SOC <= target SOC <= 1")
        if self.capacity_kwh <= 0 or self.rating_kva <= 0:
            raise ValueError(f"{self.vehicle_id}: capacity and rating must be positive")

    @property
    def dwell_min(self) -> float:
        return self.park_end_min - self.park_start_min


@dataclass
class PevState:
    """Mutable per-run charging state; owned by exactly one scenario run."""

    session: ChargingSession
    soc: float
    start_min: float
    energy_kwh: float = 0.0
    p_kw: float = 0.0
    q_kvar: float = 0.0

    @classmethod
    def fresh(cls, session: ChargingSession) -> "PevState":
        return cls(session=session, soc=session.soc_arrival, start_min=session.park_start_min)

    @property
    def done(self) -> bool:
        return self.soc >= self.session.soc_target - 1e-12


def sample_sessions(config: BehaviorConfig, placements: list[tuple[PhaseRef, int]],
                    seed, capacity_kwh: float = 50.0, rating_kva: float = 6.6,
                    day_offset_min: float = 0.0, id_prefix: str = "pev",
                    ) -> list[ChargingSession]:
    """Draw one session per vehicle for every placement.

    ``seed`` may be an int or a numpy SeedSequence; identical seeds give
    element-wise identical session lists.  ``day_offset_min`` shifts park
    times whole days forward for multi-day horizons.
    """
    for _ref, count in placements:
        if count < 0:
            raise ValueError("placement counts must be nonnegative")
    total = sum(count for _, count in placements)
    rng = np.random.Generator(np.random.PCG64(seed))
    arrivals = config.arrival.sample(rng, total)
    departures = config.departure.sample(rng, total)
    soc_arr = config.soc_arrival.sample(rng, total)
    soc_tgt = config.soc_target.sample(rng, total)

    sessions = []
    k = 0
    for ref, count in placements:
        for _ in range(count):
            sessions.append(ChargingSession(
                vehicle_id=f"{id_prefix}{k:03d}",
                location=ref,
                park_start_min=float(arrivals[k] + day_offset_min),
                park_end_min=float(departures[k] + day_offset_min),
                soc_arrival=float(soc_arr[k]),
                soc_target=float(soc_tgt[k]),
                capacity_kwh=capacity_kwh,
                rating_kva=rating_kva,
            ))
            k += 1
    return sessions


def charge_power_at(soc: float, session: ChargingSession, p_limit_kw: float,
                    taper_start_soc: float = 0.95, dt_min: float = 1.0,
                    eta: float = 1.0) -> float:
    """Power drawn for one step at the given state of charge.

    Constant power below the taper threshold, linear taper to zero between
    the threshold and the target, zero at or beyond the target.  The last
    constant-power step is clamped so the state of charge lands exactly on
    the target instead of overshooting.
    """
    if not 0.0 <= p_limit_kw <= session.rating_kva + 1e-12:
        raise ValueError(f"p_limit {p_limit_kw} outside [0, {session.rating_kva}]")
    target = session.soc_target
    if soc >= target - 1e-12:
        return 0.0
    p_base = min(p_limit_kw, session.rating_kva)
    if soc >= taper_start_soc and target > taper_start_soc:
        p = p_base * (target - soc) / (target - taper_start_soc)
    else:
        p = p_base
    # Never push past the target within one step.
    p_to_target = (target - soc) * session.capacity_kwh * 60.0 / (dt_min * eta)
    return min(p, p_to_target)


def charge_step(state: PevState, p_limit_kw: float, taper_start_soc: float = 0.95,
                dt_min: float = 1.0, eta: float = 1.0) -> float:
    """Advance one timestep: returns the kW drawn and updates SOC and energy."""
    p = charge_power_at(state.soc, state.session, p_limit_kw,
                        taper_start_soc=taper_start_soc, dt_min=dt_min, eta=eta)
    state.p_kw = p
    state.energy_kwh += p * dt_min / 60.0
    state.soc += p * dt_min * eta / (60.0 * state.session.capacity_kwh)
    return p


def time_to_full(session: ChargingSession, p_limit_kw: float,
                 taper_start_soc: float = 0.95, dt_min: float = 1.0,
                 eta: float = 1.0, completion_gap: float = 1e-6) -> float:
    """Minutes to charge from arrival SOC to the target at the given limit.

    The constant-power span is integrated exactly; the taper span (which only
    approaches the target asymptotically in continuous time) is stepped at the
    simulation timestep until the remaining SOC gap falls below
    ``completion_gap``, matching the engine's stepping to within one step.
    """
    if p_limit_kw <= 0:
        raise ValueError("p_limit must be positive")
    target = session.soc_target
    soc = session.soc_arrival
    if soc >= target - 1e-12:
        return 0.0
    p_base = min(p_limit_kw, session.rating_kva)
    minutes = 0.0
    cc_top = min(target, taper_start_soc)
    if soc < cc_top:
        minutes += (cc_top - soc) * session.capacity_kwh * 60.0 / (p_base * eta)
        soc = cc_top
    if target > taper_start_soc:
        while target - soc > completion_gap:
            p = charge_power_at(soc, session, p_limit_kw,
                                taper_start_soc=taper_start_soc, dt_min=dt_min, eta=eta)
            if p <= 0:
                break
            soc += p * dt_min * eta / (60.0 * session.capacity_kwh)
            minutes += dt_min
    return minutes


SESSION_CSV_COLUMNS = ["vehicle_id", "node", "phase", "park_start_min",
                       "park_end_min", "soc_arrival", "soc_target"]


def sessions_to_csv(sessions: list[ChargingSession], path_or_file) -> None:
    """Write sessions so a run can be replayed exactly."""
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        writer = csv.writer(fh)
        writer.writerow(SESSION_CSV_COLUMNS)
        for s in sessions:
            writer.writerow([s.vehicle_id, s.location.node, s.location.phase,
                             repr(s.park_start_min), repr(s.park_end_min),
                             repr(s.soc_arrival), repr(s.soc_target)])
    finally:
        if own:
            fh.close()


def sessions_from_csv(path_or_file, capacity_kwh: float = 50.0,
                      rating_kva: float = 6.6) -> list[ChargingSession]:
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, newline="", encoding="utf-8") if own else path_or_file
    try:
        reader = csv.DictReader(fh)
        sessions = []
        for row in reader:
            sessions.append(ChargingSession(
                vehicle_id=row["vehicle_id"],
                location=PhaseRef(node=row["node"], phase=int(row["phase"])),
                park_start_min=float(row["park_start_min"]),
                park_end_min=float(row["park_end_min"]),
                soc_arrival=float(row["soc_arrival"]),
                soc_target=float(row["soc_target"]),
                capacity_kwh=capacity_kwh,
                rating_kva=rating_kva,
            ))
        return sessions
    finally:
        if own:
            fh.close()
