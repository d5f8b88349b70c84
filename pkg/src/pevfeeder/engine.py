"""Quasi-static time-series co-simulation of PEV charging and power flow.

Each timestep builds the non-PEV load snapshot from a daily profile shape,
asks the charge controls for per-vehicle setpoints using the latest solved
voltages, and iterates control and power flow to a damped fixed point.  All
randomness flows from named sub-streams of the master seed, so a scenario is
bit-reproducible and the five control labels share identical sessions.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import (ControlConfig, VoltVarCurve, control_setpoints,
                      scheduled_start_from_u)
from .feeder import FeederModel, PhaseRef, load_feeder
from .pev import (BehaviorConfig, ChargingSession, Dist, PevState, charge_power_at,
                  charge_step, sample_sessions, time_to_full)
from .powerflow import (PHASORS, LoadSet, VoltageCollapseError, compiled, solve,
                        solve_with_regulators)

SCENARIO_LABELS = (
    "no-PEV",
    "uncontrolled",
    "energy-shift",
    "reactive-power",
    "energy-shift+reactive-power",
)

#: (energy_shift, reactive_support) applied over the scenario's ControlConfig.
LABEL_FLAGS = {
    "no-PEV": None,
    "uncontrolled": (False, False),
    "energy-shift": (True, False),
    "reactive-power": (False, True),
    "energy-shift+reactive-power": (True, True),
}

# Sub-stream tags so adding a control strategy never perturbs session sampling.
_SESSIONS_STREAM = 101
_SCHEDULING_STREAM = 202


class EngineError(RuntimeError):
    pass


class CalibrationError(EngineError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    feeder_path: Path
    profile_path: Path
    target_peak_kw: float = 3030.0
    placements: tuple[tuple[PhaseRef, int], ...] = ()
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    horizon_min: int = 2880
    timestep_min: int = 1
    master_seed: int = 1
    solver_tol_pu: float = 1e-6
    solver_max_iter: int = 100
    fp_damping: float = 0.5
    fp_tol_pu: float = 1e-4
    fp_max_iter: int = 20
    regulator_mode: str | None = None
    reg_ops_cap_per_step: int = 60
    capacity_kwh: float = 50.0
    rating_kva: float = 6.6
    taper_start_soc: float = 0.95
    charger_efficiency: float = 1.0
    monitored: tuple[str, ...] | None = None
    band_low_pu: float = 0.95
    band_high_pu: float = 1.05

    def __post_init__(self):
        if self.timestep_min < 1:
            raise ValueError("timestep must be at least one minute")
        if self.horizon_min % self.timestep_min != 0:
            raise ValueError("horizon must be a multiple of the timestep")
        if self.target_peak_kw <= 0:
            raise ValueError("target peak must be positive")
        if not 0 < self.fp_damping <= 1:
            raise ValueError("fixed-point damping must be in (0, 1]")


def _dist_from_json(doc: dict) -> Dist:
    return Dist(family=doc["family"],
                mean=float(doc.get("mean", 0.0)), sd=float(doc.get("sd", 1.0)),
                low=float(doc.get("low", 0.0)), high=float(doc.get("high", 0.0)),
                value=float(doc.get("value", 0.0)))


def load_scenario_config(path: str | Path) -> ScenarioConfig:
    """Read a scenario config JSON; file paths resolve relative to it."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent

    behavior_doc = doc.get("behavior", {})
    behavior_kwargs = {}
    for key in ("arrival", "departure", "soc_arrival", "soc_target"):
        if key in behavior_doc:
            behavior_kwargs[key] = _dist_from_json(behavior_doc[key])
    behavior = BehaviorConfig(**behavior_kwargs)

    control_doc = doc.get("control", {})
    curve = ControlConfig().curve
    if "volt_var_curve" in control_doc:
        curve = VoltVarCurve(points=tuple(
            (float(v), float(q)) for v, q in control_doc["volt_var_curve"]))
    control = ControlConfig(
        energy_shift=bool(control_doc.get("energy_shift", False)),
        reactive_support=bool(control_doc.get("reactive_support", False)),
        p_fraction=float(control_doc.get("p_fraction", 0.70)),
        curve=curve,
        q_while_idle=bool(control_doc.get("q_while_idle", False)),
    )

    placements = tuple(
        (PhaseRef.parse(p["at"]), int(p["count"])) for p in doc.get("placements", ()))
    solver = doc.get("solver", {})
    fp = doc.get("fixed_point", {})
    regs = doc.get("regulators", {})
    pev = doc.get("pev", {})
    band = doc.get("voltage_band", {})
    monitored = doc.get("monitored", "load-bearing")

    return ScenarioConfig(
        feeder_path=(base / doc["feeder"]).resolve(),
        profile_path=(base / doc["load_profile"]).resolve(),
        target_peak_kw=float(doc.get("target_peak_kw", 3030.0)),
        placements=placements,
        behavior=behavior,
        control=control,
        horizon_min=int(doc.get("horizon_min", 2880)),
        timestep_min=int(doc.get("timestep_min", 1)),
        master_seed=int(doc.get("master_seed", 1)),
        solver_tol_pu=float(solver.get("tol_pu", 1e-6)),
        solver_max_iter=int(solver.get("max_iter", 100)),
        fp_damping=float(fp.get("damping", 0.5)),
        fp_tol_pu=float(fp.get("tol_pu", 1e-4)),
        fp_max_iter=int(fp.get("max_iter", 20)),
        regulator_mode=regs.get("mode"),
        reg_ops_cap_per_step=int(regs.get("ops_cap_per_step", 60)),
        capacity_kwh=float(pev.get("capacity_kwh", 50.0)),
        rating_kva=float(pev.get("rating_kva", 6.6)),
        taper_start_soc=float(pev.get("taper_start_soc", 0.95)),
        charger_efficiency=float(pev.get("efficiency", 1.0)),
        monitored=None if monitored == "load-bearing" else tuple(monitored),
        band_low_pu=float(band.get("low", 0.95)),
        band_high_pu=float(band.get("high", 1.05)),
    )


def load_profile_shape(path: str | Path) -> np.ndarray:
    """Daily load shape: CSV of (minute-of-day, value) covering 24 h at 1-min
    resolution, normalized so the daily maximum is 1.0."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    if rows.shape != (1440, 2):
        raise ValueError(f"{path}: expected 1440 rows of (minute, value)")
    if not np.array_equal(rows[:, 0], np.arange(1440)):
        raise ValueError(f"{path}: minute column must run 0..1439 in order")
    shape = rows[:, 1]
    if shape.max() <= 0:
        raise ValueError(f"{path}: profile max must be positive")
    if shape.min() < 0:
        raise ValueError(f"{path}: profile values must be nonnegative")
    return shape / shape.max()


@dataclass
class RunResult:
    """Time-indexed series and per-PEV traces for one scenario run."""

    label: str
    timestep_min: int
    load_scale: float
    minutes: np.ndarray
    head_p_kw: np.ndarray
    head_q_kvar: np.ndarray
    head_p_phase_kw: np.ndarray
    min_v_pu: np.ndarray
    max_v_pu: np.ndarray
    min_v_ref: list[str]
    monitored_refs: list[str]
    monitored_v_pu: np.ndarray
    fp_iterations: np.ndarray
    fp_converged: np.ndarray
    reg_flagged: np.ndarray
    sessions: list[ChargingSession]
    scheduled_start_min: np.ndarray
    pev_p_kw: np.ndarray
    pev_q_kvar: np.ndarray
    pev_soc: np.ndarray
    node_kw_at_peak: dict[str, float]

    @property
    def steps(self) -> int:
        return len(self.minutes)

    @property
    def peak_kw(self) -> float:
        return float(np.max(self.head_p_kw))

    @property
    def peak_minute(self) -> int:
        return int(self.minutes[int(np.argmax(self.head_p_kw))])

    def run_min_voltage(self) -> float:
        return float(np.min(self.min_v_pu))


def monitored_phase_refs(model: FeederModel, placements=(),
                         monitored: tuple[str, ...] | None = None) -> list[PhaseRef]:
    """Monitored node-phases: every load-bearing one by default, the scenario
    PEV locations, and node 856 phase 2 whenever the feeder has it."""
    if monitored is not None:
        refs = [PhaseRef.parse(t) for t in monitored]
    else:
        found: set[tuple[str, int]] = set()
        for ld in model.spot_loads():
            for k in range(3):
                if ld.kw[k] == 0 and ld.kvar[k] == 0:
                    continue
                if ld.conn == "Y":
                    found.add((ld.node, k + 1))
                else:
                    found.add((ld.node, k + 1))
                    found.add((ld.node, k % 3 + 1))
        for ref, count in placements:
            if count > 0:
                found.add((ref.node, ref.phase))
        try:
            node856 = model.node("856")
            if 2 in node856.phases:
                found.add(("856", 2))
        except KeyError:
            pass
        refs = [PhaseRef(n, p) for n, p in sorted(found)]
    by_id = {n.id: n for n in model.nodes}
    for ref in refs:
        if ref.node not in by_id or ref.phase not in by_id[ref.node].phases:
            raise EngineError(f"monitored reference {ref} not present in feeder")
    return refs


def _scheduled_starts(sessions, flags, config) -> np.ndarray:
    """Charge start times; energy shifting draws one uniform per session from
    the scheduling sub-stream (label-independent draws)."""
    starts = np.array([s.park_start_min for s in sessions])
    if flags is None or not flags[0]:
        return starts
    energy_shift, reactive = flags
    p_limit = config.rating_kva * (config.control.p_fraction if reactive else 1.0)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([config.master_seed, _SCHEDULING_STREAM])))
    u = rng.uniform(size=len(sessions))
    for i, session in enumerate(sessions):
        t_charge = time_to_full(session, p_limit, taper_start_soc=config.taper_start_soc,
                                dt_min=config.timestep_min, eta=config.charger_efficiency)
        starts[i] = scheduled_start_from_u(session, t_charge, u[i])
    return starts


def scenario_sessions(config: ScenarioConfig) -> list[ChargingSession]:
    """The session list shared by every label of this config: one session per
    vehicle per profile day, freshly sampled per day from the sessions stream."""
    n_days = math.ceil(config.horizon_min / 1440)
    sessions: list[ChargingSession] = []
    for day in range(n_days):
        day_seed = np.random.SeedSequence([config.master_seed, _SESSIONS_STREAM, day])
        sessions.extend(sample_sessions(
            config.behavior, list(config.placements), day_seed,
            capacity_kwh=config.capacity_kwh, rating_kva=config.rating_kva,
            day_offset_min=1440.0 * day, id_prefix=f"d{day}-pev"))
    return sessions


def run_scenario(config: ScenarioConfig, label: str,
                 load_scale: float | None = None) -> RunResult:
    """Run one scenario label; deterministic for a fixed config and seed."""
    if label not in SCENARIO_LABELS:
        raise EngineError(f"unknown scenario label {label!r}; "
                          f"choose from {', '.join(SCENARIO_LABELS)}")
    model = load_feeder(config.feeder_path)
    shape = load_profile_shape(config.profile_path)
    _validate_placements(model, config.placements)
    if load_scale is None:
        load_scale = calibrate_load_scale(model, shape, config.target_peak_kw, config)
    sessions = scenario_sessions(config)
    return _run_core(model, shape, load_scale, label, config, sessions,
                     config.horizon_min)


def _validate_placements(model: FeederModel, placements) -> None:
    by_id = {n.id: n for n in model.nodes}
    for ref, _count in placements:
        if ref.node not in by_id:
            raise EngineError(f"PEV placement at unknown node {ref.node}")
        if ref.phase not in by_id[ref.node].phases:
            raise EngineError(f"PEV placement at {ref}: phase not present")


def calibrate_load_scale(model: FeederModel, shape: np.ndarray, target_kw: float,
                         config: ScenarioConfig, tol_fraction: float = 0.001,
                         ) -> float:
    """Multiplier m such that the no-PEV feeder-head peak over one profile day
    equals the target within 0.1%, found by bisection (the solved peak is
    monotone in m over the operating range)."""
    if target_kw <= 0:
        raise CalibrationError("target peak must be positive")
    if shape.max() <= 0:
        raise CalibrationError("profile shape peak must be positive")

    def peak(m: float) -> float:
        result = _run_core(model, shape, m, "no-PEV", config, [], 1440)
        return result.peak_kw

    lo, lo_peak = 0.0, 0.0
    hi = 1.0
    try:
        hi_peak = peak(hi)
        while hi_peak < target_kw:
            lo, lo_peak = hi, hi_peak
            hi *= 2.0
            if hi > 1e4:
                raise CalibrationError("cannot bracket the target peak")
            hi_peak = peak(hi)
    except VoltageCollapseError as exc:
        raise CalibrationError(
            f"target peak {target_kw} kW is above the feeder collapse point") from exc

    for _ in range(80):
        if abs(hi_peak - target_kw) <= tol_fraction * target_kw:
            return hi
        if abs(lo_peak - target_kw) <= tol_fraction * target_kw and lo > 0:
            return lo
        mid = 0.5 * (lo + hi)
        try:
            mid_peak = peak(mid)
        except VoltageCollapseError as exc:
            raise CalibrationError(
                f"collapse while bisecting at multiplier {mid:.4f}") from exc
        if abs(mid_peak - target_kw) <= tol_fraction * target_kw:
            return mid
        if mid_peak < target_kw:
            lo, lo_peak = mid, mid_peak
        else:
            hi, hi_peak = mid, mid_peak
    raise CalibrationError("bisection failed to meet the 0.1% tolerance")


def _run_core(model: FeederModel, shape: np.ndarray, load_scale: float, label: str,
              config: ScenarioConfig, sessions: list[ChargingSession],
              horizon_min: int) -> RunResult:
    flags = LABEL_FLAGS[label]
    dt = config.timestep_min
    steps = horizon_min // dt
    comp = compiled(model)

    if flags is None:
        states: list[PevState] = []
        eff_control = config.control.with_label_flags(False, False)
        starts = np.zeros(0)
    else:
        eff_control = config.control.with_label_flags(*flags)
        starts = _scheduled_starts(sessions, flags, config)
        states = [PevState.fresh(s) for s in sessions]
        for state, st in zip(states, starts):
            state.start_min = float(st)

    refs = [s.location for s in (sessions if states else [])]
    ref_keys = [(r.node, r.phase) for r in refs]
    monitored = monitored_phase_refs(model, config.placements, config.monitored)
    mon_node_idx = np.array([comp.index[r.node] for r in monitored], dtype=int)
    mon_phase_idx = np.array([r.phase - 1 for r in monitored], dtype=int)
    mon_vbase = comp.v_base_ln[mon_node_idx]
    mon_labels = [str(r) for r in monitored]

    n_pev = len(states)
    minutes = np.arange(steps) * dt
    head_p = np.zeros(steps)
    head_q = np.zeros(steps)
    head_p_phase = np.zeros((steps, 3))
    min_v = np.zeros(steps)
    max_v = np.zeros(steps)
    min_ref: list[str] = []
    mon_v = np.zeros((steps, len(monitored)))
    fp_iters = np.zeros(steps, dtype=int)
    fp_conv = np.ones(steps, dtype=bool)
    reg_flagged = np.zeros(steps, dtype=bool)
    pev_p = np.zeros((steps, n_pev))
    pev_q = np.zeros((steps, n_pev))
    pev_soc = np.zeros((steps, n_pev))

    taps = {r.id: r.taps for r in model.regulators}
    reg_mode = config.regulator_mode
    has_auto = reg_mode == "automatic" or (
        reg_mode is None and any(r.mode == "automatic" for r in model.regulators))

    # Flat 1.0 pu start; the first step's control pass uses these voltages.
    v_prev = np.where(comp.phase_mask, comp.v_base_ln[:, None] * PHASORS[None, :], 0j)
    q_applied = np.zeros(n_pev)

    def v_lookup_from(v: np.ndarray) -> dict[PhaseRef, float]:
        if not refs:
            return {}
        return {r: float(np.abs(v[comp.index[r.node], r.phase - 1])
                         / comp.v_base_ln[comp.index[r.node]]) for r in set(refs)}

    for ti in range(steps):
        t = ti * dt
        mult = load_scale * shape[t % 1440]
        loads = LoadSet.from_model(model, mult)
        p_now = np.zeros(n_pev)
        ops_left = config.reg_ops_cap_per_step
        sol = None
        p_limits = [0.0] * n_pev
        converged_fp = True
        for k in range(1, config.fp_max_iter + 1):
            setpoints = control_setpoints(states, v_lookup_from(v_prev), eff_control, t) \
                if states else []
            for i, (state, (p_limit, _q)) in enumerate(zip(states, setpoints)):
                p_limits[i] = p_limit
                p_now[i] = charge_power_at(state.soc, state.session, p_limit,
                                           taper_start_soc=config.taper_start_soc,
                                           dt_min=dt, eta=config.charger_efficiency)
            q_new = np.array([q for _p, q in setpoints]) if states else np.zeros(0)
            q_applied = q_applied + config.fp_damping * (q_new - q_applied)
            loads.set_pev_injections(ref_keys, p_now + 1j * q_applied)

            try:
                if has_auto:
                    reg = solve_with_regulators(
                        model, loads, taps=taps, mode=reg_mode, ops_cap=ops_left,
                        v0=v_prev, tol=config.solver_tol_pu,
                        max_iter=config.solver_max_iter)
                    sol, taps = reg.solution, reg.taps
                    ops_left -= reg.tap_operations
                    reg_flagged[ti] |= reg.flagged
                else:
                    sol = solve(model, loads, taps=taps, v0=v_prev,
                                tol=config.solver_tol_pu, max_iter=config.solver_max_iter)
            except VoltageCollapseError as exc:
                raise EngineError(
                    f"{label}: power flow diverged at minute {t} (step {ti}): {exc}"
                ) from exc
            if not sol.converged:
                raise EngineError(
                    f"{label}: power flow failed to converge at minute {t} (step {ti}), "
                    f"mismatch {sol.max_mismatch_pu:.2e} pu")

            dv = float(np.max(np.abs(np.abs(sol.v) - np.abs(v_prev))
                              / comp.v_base_ln[:, None]))
            v_prev = sol.v
            if not eff_control.reactive_support:
                break
            if k >= 2 and dv < config.fp_tol_pu:
                break
        else:
            converged_fp = False

        fp_iters[ti] = k
        fp_conv[ti] = converged_fp

        # SOC advances once per step using the converged real power.
        for i, state in enumerate(states):
            pev_p[ti, i] = charge_step(state, p_limits[i],
                                       taper_start_soc=config.taper_start_soc,
                                       dt_min=dt, eta=config.charger_efficiency)
            state.q_kvar = float(q_applied[i]) if eff_control.reactive_support else 0.0
            pev_q[ti, i] = state.q_kvar
            pev_soc[ti, i] = state.soc

        head_p[ti] = sol.head_p_kw
        head_q[ti] = sol.head_q_kvar
        head_p_phase[ti] = sol.head_s_phase_kva.real
        vals = np.abs(sol.v[mon_node_idx, mon_phase_idx]) / mon_vbase
        mon_v[ti] = vals
        imin = int(np.argmin(vals))
        min_v[ti] = vals[imin]
        max_v[ti] = float(np.max(vals))
        min_ref.append(mon_labels[imin])

    t_peak = int(np.argmax(head_p))
    node_kw = _node_kw_snapshot(model, load_scale * shape[(t_peak * dt) % 1440],
                                sessions, pev_p[t_peak] if n_pev else None)

    return RunResult(
        label=label, timestep_min=dt, load_scale=load_scale, minutes=minutes,
        head_p_kw=head_p, head_q_kvar=head_q, head_p_phase_kw=head_p_phase,
        min_v_pu=min_v, max_v_pu=max_v, min_v_ref=min_ref,
        monitored_refs=mon_labels, monitored_v_pu=mon_v,
        fp_iterations=fp_iters, fp_converged=fp_conv, reg_flagged=reg_flagged,
        sessions=sessions, scheduled_start_min=starts,
        pev_p_kw=pev_p, pev_q_kvar=pev_q, pev_soc=pev_soc,
        node_kw_at_peak=node_kw,
    )


def _node_kw_snapshot(model: FeederModel, mult: float, sessions, pev_p_row,
                      ) -> dict[str, float]:
    """Nominal per-node kW at one minute (profile loads plus PEV draws)."""
    node_kw: dict[str, float] = {}
    for ld in model.spot_loads():
        node_kw[ld.node] = node_kw.get(ld.node, 0.0) + mult * sum(ld.kw)
    if pev_p_row is not None:
        for session, p in zip(sessions, pev_p_row):
            node_kw[session.location.node] = node_kw.get(session.location.node, 0.0) + p
    return node_kw


def _run_label_job(args) -> tuple[str, RunResult]:
    config, label, scale = args
    return label, run_scenario(config, label, load_scale=scale)


def run_compare(config: ScenarioConfig, labels=SCENARIO_LABELS, jobs: int = 1,
                ) -> dict[str, RunResult]:
    """Run several labels off one config with shared sessions and calibration.

    ``jobs`` > 1 runs scenario labels in separate processes; results are
    bit-identical to the sequential path because every run derives all of its
    randomness from the config seed.
    """
    model = load_feeder(config.feeder_path)
    shape = load_profile_shape(config.profile_path)
    scale = calibrate_load_scale(model, shape, config.target_peak_kw, config)
    results: dict[str, RunResult] = {}
    if jobs <= 1:
        for label in labels:
            results[label] = run_scenario(config, label, load_scale=scale)
        return results
    with ProcessPoolExecutor(max_workers=min(jobs, len(labels))) as pool:
        for label, result in pool.map(_run_label_job,
                                      [(config, lbl, scale) for lbl in labels]):
            results[label] = result
    return {label: results[label] for label in labels}
