"""Charge-control strategies: energy-shift scheduling and volt-var support.

Both strategies are incentive-style local controls: a vehicle acts only on
its own state and the voltage at its own connection point, with no aggregator
in the loop.  Sign convention views the PEV as a load: negative reactive
power is capacitive (supplies vars), positive is inductive (consumes vars).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .feeder import PhaseRef
from .pev import PevState, ChargingSession


class ControlError(RuntimeError):
    pass


@dataclass(frozen=True)
class VoltVarCurve:
    """Piecewise-linear map from local voltage (pu) to a normalized Q setpoint.

    Breakpoint values are fractions of the available reactive capability in
    [-1, +1]; outputs are clamped to the end values outside the breakpoint
    range.  Monotonicity (non-decreasing Q with voltage) is enforced.
    """

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError("volt-var curve needs at least two breakpoints")
        volts = [v for v, _ in self.points]
        qs = [q for _, q in self.points]
        if any(b <= a for a, b in zip(volts, volts[1:])):
            raise ValueError(f"breakpoint voltages must strictly increase: {volts}")
        if any(b < a for a, b in zip(qs, qs[1:])):
            raise ValueError(f"normalized Q must be non-decreasing: {qs}")
        if any(not -1.0 <= q <= 1.0 for q in qs):
            raise ValueError(f"normalized Q must lie in [-1, 1]: {qs}")

    def __call__(self, v_pu: float) -> float:
        volts = [v for v, _ in self.points]
        qs = [q for _, q in self.points]
        q = float(np.interp(v_pu, volts, qs))
        return min(1.0, max(-1.0, q))


#: Deadband curve with conventional smart-inverter breakpoints; the source
#: study plots a deadband curve without printing numbers, so these are
#: declared defaults and every scenario may override them.
DEFAULT_VOLT_VAR_CURVE = VoltVarCurve(
    points=((0.92, -1.0), (0.98, 0.0), (1.02, 0.0), (1.08, 1.0)))


@dataclass(frozen=True)
class ControlConfig:
    energy_shift: bool = False
    reactive_support: bool = False
    p_fraction: float = 0.70
    curve: VoltVarCurve = DEFAULT_VOLT_VAR_CURVE
    q_while_idle: bool = False

    def __post_init__(self):
        if not 0.0 < self.p_fraction <= 1.0:
            raise ValueError(f"real-power fraction must be in (0, 1], got {self.p_fraction}")

    def with_label_flags(self, energy_shift: bool, reactive_support: bool) -> "ControlConfig":
        return ControlConfig(energy_shift=energy_shift, reactive_support=reactive_support,
                             p_fraction=self.p_fraction, curve=self.curve,
                             q_while_idle=self.q_while_idle)


def q_available(s_kva: float, p_kw: float) -> float:
    """Reactive capability left under the apparent-power envelope S^2 = P^2 + Q^2."""
    if p_kw < 0 or s_kva < 0:
        raise ValueError("S and P must be nonnegative")
    if p_kw > s_kva * (1 + 1e-12):
        raise ValueError(f"P={p_kw} exceeds apparent rating S={s_kva}")
    return math.sqrt(max(s_kva**2 - p_kw**2, 0.0))


def volt_var_setpoint(curve: VoltVarCurve, v_pu: float, q_avail_kvar: float) -> float:
    """Reactive setpoint in kvar at local voltage v (negative = capacitive)."""
    if v_pu <= 0:
        raise ValueError("voltage must be positive")
    if q_avail_kvar < 0:
        raise ValueError("available reactive power must be nonnegative")
    return curve(v_pu) * q_avail_kvar


def schedule_energy_shift(session: ChargingSession, t_charge_min: float,
                          rng: np.random.Generator) -> float:
    """Charge start time drawn uniformly over the window that still fits a
    full charge; if the dwell is too short, charge immediately from park start
    (partial charge)."""
    if t_charge_min < 0:
        raise ValueError("charge time must be nonnegative")
    latest = session.park_end_min - t_charge_min
    if latest <= session.park_start_min:
        return session.park_start_min
    return float(rng.uniform(session.park_start_min, latest))


def scheduled_start_from_u(session: ChargingSession, t_charge_min: float, u: float) -> float:
    """Deterministic form of the scheduler: map one uniform draw u in [0, 1)
    onto the feasible start window (used so every control strategy consumes
    the same per-session random draw)."""
    latest = session.park_end_min - t_charge_min
    if latest <= session.park_start_min:
        return session.park_start_min
    return session.park_start_min + u * (latest - session.park_start_min)


def control_setpoints(states: list[PevState], voltages: dict[PhaseRef, float],
                      config: ControlConfig, t_min: float,
                      ) -> list[tuple[float, float]]:
    """Per-PEV (P limit kW, Q kvar) from local voltage only.

    Under reactive support the real-power limit drops to ``p_fraction`` of the
    apparent rating so capability is left for vars; idle or finished vehicles
    get a zero limit and (unless configured otherwise) no reactive output.
    """
    out = []
    for state in states:
        s = state.session
        plugged = s.park_start_min <= t_min < s.park_end_min
        active = plugged and t_min >= state.start_min and not state.done
        if active and s.location not in voltages:
            raise ControlError(f"no voltage reading for charging PEV at {s.location}")
        if active:
            p_limit = config.p_fraction * s.rating_kva if config.reactive_support \
                else s.rating_kva
        else:
            p_limit = 0.0
        q = 0.0
        if config.reactive_support and (active or (plugged and config.q_while_idle)):
            if s.location not in voltages:
                raise ControlError(f"no voltage reading for charging PEV at {s.location}")
            q_avail = q_available(s.rating_kva, p_limit)
            q = volt_var_setpoint(config.curve, voltages[s.location], q_avail)
        out.append((p_limit, q))
    return out
