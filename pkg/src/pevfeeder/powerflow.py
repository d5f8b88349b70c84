"""Forward-backward sweep power flow for unbalanced radial feeders.

The solver works in volts and amps per phase.  Each branch (line segment,
regulator segment or in-line transformer) is modeled as an ideal per-phase
voltage ratio followed by a 3x3 series impedance; line charging is lumped as
half shunts at the endpoints.  The slack source sits behind the substation
transformer impedance.  A solve is a pure function of its inputs: no state is
retained between calls, so solves may run concurrently on a shared model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .feeder import FeederModel, LineConfiguration, Regulator, segment_impedance, \
    segment_shunt_admittance

SQRT3 = math.sqrt(3.0)
COLLAPSE_FLOOR_PU = 0.5

# Unit phasors for phases A, B, C at 0, -120, +120 degrees.
PHASORS = np.exp(1j * np.deg2rad(np.array([0.0, -120.0, 120.0])))


class PowerFlowError(RuntimeError):
    """Structural problem that prevents a solve (bad model, singular device)."""


class VoltageCollapseError(PowerFlowError):
    """A load-bearing phase voltage fell below the collapse floor (0.5 pu)."""


@dataclass
class LoadSet:
    """Per-node, per-phase complex power draws, partitioned by load model.

    Entries hold nominal apparent power in kVA (kW + j kvar, loads consume P,
    positive Q is inductive consumption).  PEV injections are appended as
    wye-connected PQ entries via ``set_pev_injections`` so the engine can
    update them in place between fixed-point iterations.
    """

    entries: list[tuple[str, str, str, np.ndarray]] = field(default_factory=list)
    pev_nodes: list[tuple[str, int]] = field(default_factory=list)
    pev_s_kva: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))

    @classmethod
    def from_model(cls, model: FeederModel, multiplier: float = 1.0) -> "LoadSet":
        """Nominal spot loads (distributed loads lumped) scaled by one multiplier."""
        ls = cls()
        for ld in model.spot_loads():
            s = (np.array(ld.kw, dtype=float) + 1j * np.array(ld.kvar, dtype=float))
            ls.entries.append((ld.node, ld.conn, ld.model, s * multiplier))
        return ls

    def add(self, node: str, conn: str, model: str, s_kva) -> None:
        self.entries.append((node, conn, model, np.asarray(s_kva, dtype=complex)))

    def set_pev_injections(self, refs: list[tuple[str, int]], s_kva: np.ndarray) -> None:
        """Attach PEV draws: refs are (node, phase 1..3), s_kva one complex each."""
        self.pev_nodes = refs
        self.pev_s_kva = np.asarray(s_kva, dtype=complex)

    def total_load_kw(self) -> float:
        total = sum(float(np.sum(s.real)) for _, _, _, s in self.entries)
        return total + float(np.sum(self.pev_s_kva.real))


@dataclass
class PowerFlowSolution:
    """Converged (or flagged) snapshot solution."""

    node_ids: list[str]
    v: np.ndarray                 # (N, 3) complex volts line-to-neutral
    v_base_ln: np.ndarray         # (N,) volts
    phase_mask: np.ndarray        # (N, 3) bool
    branch_keys: list[tuple[str, str]]
    branch_current: np.ndarray    # (B, 3) complex amps at the downstream end
    head_s_phase_kva: np.ndarray  # (3,) complex kVA entering the head node
    iterations: int
    converged: bool
    max_mismatch_pu: float
    total_load_kw: float
    series_loss_kw: float
    power_mismatch_kw: float

    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._index:
            self._index = {n: i for i, n in enumerate(self.node_ids)}

    def v_pu(self, node: str, phase: int) -> float:
        i = self._index[node]
        return float(np.abs(self.v[i, phase - 1]) / self.v_base_ln[i])

    def angle_deg(self, node: str, phase: int) -> float:
        i = self._index[node]
        return float(np.degrees(np.angle(self.v[i, phase - 1])))

    def v_pu_array(self) -> np.ndarray:
        """(N, 3) voltage magnitudes in per-unit, zero on absent phases."""
        mags = np.abs(self.v) / self.v_base_ln[:, None]
        return np.where(self.phase_mask, mags, 0.0)

    @property
    def head_p_kw(self) -> float:
        return float(np.sum(self.head_s_phase_kva.real))

    @property
    def head_q_kvar(self) -> float:
        return float(np.sum(self.head_s_phase_kva.imag))

    def min_voltage_pu(self) -> float:
        vpu = self.v_pu_array()
        return float(np.min(vpu[self.phase_mask]))


@dataclass
class _Branch:
    from_i: int
    to_i: int
    key: tuple[str, str]
    ratio: np.ndarray        # (3,) per-phase ideal voltage ratio (to = ratio * from)
    z: np.ndarray            # (3, 3) ohms on the downstream voltage base
    reg_id: str | None = None


class CompiledFeeder:
    """Topologically ordered arrays derived from a FeederModel.

    Construction is cheap and read-only afterwards; solves share it freely.
    """

    def __init__(self, model: FeederModel):
        self.model = model
        self.node_ids = model.node_ids()
        self.index = {n: i for i, n in enumerate(self.node_ids)}
        n = len(self.node_ids)

        self.phase_mask = np.zeros((n, 3), dtype=bool)
        self.v_base_ln = np.zeros(n)
        for node in model.nodes:
            i = self.index[node.id]
            for p in node.phases:
                self.phase_mask[i, p - 1] = True
            self.v_base_ln[i] = node.kv_ll * 1e3 / SQRT3

        # Orient branches away from the head and order parents before children.
        adjacency: dict[str, list[tuple[str, object]]] = {nid: [] for nid in self.node_ids}
        for seg in model.segments:
            adjacency[seg.from_node].append((seg.to_node, seg))
            adjacency[seg.to_node].append((seg.from_node, seg))
        for xf in model.transformers:
            if xf.r_pu == 0 and xf.x_pu == 0:
                raise PowerFlowError(f"transformer {xf.id}: singular (zero impedance)")
            adjacency[xf.from_node].append((xf.to_node, xf))
            adjacency[xf.to_node].append((xf.from_node, xf))

        self.head_i = self.index[model.source.node]
        self.branches: list[_Branch] = []
        self.shunt_y = np.zeros((n, 3, 3), dtype=complex)
        seen = {model.source.node}
        queue = [model.source.node]
        while queue:
            cur = queue.pop(0)
            for nxt, rec in adjacency[cur]:
                if nxt in seen:
                    continue
                seen.add(nxt)
                queue.append(nxt)
                self.branches.append(self._compile_branch(cur, nxt, rec))
        if len(self.branches) != n - 1:
            raise PowerFlowError("feeder is not a tree rooted at the head")

        # Capacitors are fixed shunt devices: constant admittance at nominal kvar
        # (Y = +jB, so drawn Q = -B|V|^2, i.e. capacitive injection).
        for cap in model.capacitors:
            i = self.index[cap.node]
            for p in range(3):
                if cap.kvar[p]:
                    vb = self.v_base_ln[i]
                    self.shunt_y[i, p, p] += 1j * cap.kvar[p] * 1e3 / vb**2

        self.reg_index = {b.reg_id: bi for bi, b in enumerate(self.branches) if b.reg_id}
        self._children_of = [[] for _ in range(n)]
        for bi, b in enumerate(self.branches):
            self._children_of[b.from_i].append(bi)

        z_src_pu = complex(model.source.r_pu, model.source.x_pu)
        z_base = (model.source.kv_ll * 1e3) ** 2 / (model.source.kva * 1e3)
        self.z_src = np.eye(3, dtype=complex) * z_src_pu * z_base
        self.v_src = model.source.v_pu * self.v_base_ln[self.head_i] * PHASORS

    def _compile_branch(self, from_node: str, to_node: str, rec) -> _Branch:
        from .feeder import Segment, Transformer

        fi, ti = self.index[from_node], self.index[to_node]
        if isinstance(rec, Transformer):
            if (rec.from_node, rec.to_node) != (from_node, to_node):
                raise PowerFlowError(
                    f"transformer {rec.id}: oriented against the feeder direction")
            ratio = np.full(3, rec.kv_low / rec.kv_high)
            z_low = complex(rec.r_pu, rec.x_pu) * (rec.kv_low * 1e3) ** 2 / (rec.kva * 1e3)
            z = np.eye(3, dtype=complex) * z_low
            return _Branch(fi, ti, (from_node, to_node), ratio, z)

        seg: "Segment" = rec
        if (seg.from_node, seg.to_node) != (from_node, to_node):
            raise PowerFlowError(
                f"segment {seg.from_node}-{seg.to_node}: oriented against the feeder")
        config = self.model.config(seg.config)
        z = segment_impedance(config, seg.length_ft)
        y = segment_shunt_admittance(config, seg.length_ft)
        self.shunt_y[fi] += y / 2.0
        self.shunt_y[ti] += y / 2.0
        ratio = np.ones(3)
        reg = self.model.regulator_for_segment(seg.from_node, seg.to_node)
        reg_id = None
        if reg is not None:
            reg_id = reg.id
            ratio = self.tap_ratio(reg, reg.taps)
        return _Branch(fi, ti, (from_node, to_node), ratio, z, reg_id=reg_id)

    @staticmethod
    def tap_ratio(reg: Regulator, taps: tuple[int, ...]) -> np.ndarray:
        ratio = np.ones(3)
        for phase, tap in zip(reg.phases, taps):
            ratio[phase - 1] = 1.0 + reg.step_pu * tap
        return ratio


_COMPILED_CACHE: dict[int, CompiledFeeder] = {}


def compiled(model: FeederModel) -> CompiledFeeder:
    key = id(model)
    hit = _COMPILED_CACHE.get(key)
    if hit is None or hit.model is not model:
        hit = CompiledFeeder(model)
        _COMPILED_CACHE.clear()
        _COMPILED_CACHE[key] = hit
    return hit


def load_injection_current(s_va: complex, v: complex, model: str, v_nominal: float) -> complex:
    """Current drawn by one load element at voltage v (wye phase or delta pair).

    PQ: I = conj(S/V); constant current: |I| fixed at nominal, angle tracks V;
    constant impedance: I = V / Z_nominal.
    """
    if s_va == 0:
        return 0j
    if abs(v) < COLLAPSE_FLOOR_PU * v_nominal:
        raise VoltageCollapseError(
            f"voltage {abs(v):.1f} V below collapse floor ({v_nominal:.1f} V nominal)")
    if model == "PQ":
        return np.conj(s_va / v)
    if model == "I":
        mag = abs(s_va) / v_nominal
        return mag * np.exp(1j * (np.angle(v) - np.angle(s_va)))
    if model == "Z":
        z = v_nominal**2 / np.conj(s_va)
        return v / z
    raise ValueError(f"unknown load model {model!r}")


class _CompiledLoads:
    """LoadSet regrouped into per-class index arrays for vectorized evaluation."""

    def __init__(self, loads: LoadSet, comp: CompiledFeeder):
        groups: dict[tuple[str, str], list[tuple[int, np.ndarray]]] = {}
        for node, conn, model, s_kva in loads.entries:
            if node not in comp.index:
                raise PowerFlowError(f"load references unknown node {node}")
            groups.setdefault((conn, model), []).append((comp.index[node], s_kva))
        self.groups = []
        for (conn, model), items in groups.items():
            idx = np.array([i for i, _ in items], dtype=int)
            s_va = np.array([s for _, s in items], dtype=complex) * 1e3
            self.groups.append((conn, model, idx, s_va))

        self.pev_idx = np.array([comp.index[n] for n, _ in loads.pev_nodes], dtype=int)
        self.pev_phase = np.array([p - 1 for _, p in loads.pev_nodes], dtype=int)
        self._loads = loads
        self.comp = comp
        for node, phase in loads.pev_nodes:
            if not comp.phase_mask[comp.index[node], phase - 1]:
                raise PowerFlowError(f"PEV injection on absent phase {node}.{phase}")

    def pev_s_va(self) -> np.ndarray:
        return self._loads.pev_s_kva * 1e3

    def injections(self, v: np.ndarray) -> np.ndarray:
        """(N, 3) complex load currents drawn from each node at voltages v."""
        comp = self.comp
        inj = np.zeros_like(v)
        for conn, model, idx, s_va in self.groups:
            vn = v[idx]
            if conn == "Y":
                v_nom = comp.v_base_ln[idx][:, None]
                used = s_va != 0
                if np.any(np.abs(vn[used]) < COLLAPSE_FLOOR_PU * np.broadcast_to(v_nom, vn.shape)[used]):
                    raise VoltageCollapseError("node voltage below 0.5 pu collapse floor")
                cur = np.zeros_like(vn)
                if model == "PQ":
                    np.divide(s_va, vn, out=cur, where=used)
                    cur = np.conj(cur)
                elif model == "I":
                    mag = np.abs(s_va) / v_nom
                    cur = np.where(used, mag * np.exp(1j * (np.angle(vn) - np.angle(s_va))), 0j)
                else:  # Z
                    z = np.ones_like(vn)
                    np.divide(v_nom.astype(complex) ** 2, np.conj(s_va), out=z, where=used)
                    cur = np.where(used, vn / z, 0j)
                np.add.at(inj, idx, cur)
            else:  # delta: entry k sits between phase k and phase k+1
                v_ll = vn - np.roll(vn, -1, axis=1)
                v_nom = (comp.v_base_ln[idx] * SQRT3)[:, None]
                used = s_va != 0
                if np.any(np.abs(v_ll[used]) < COLLAPSE_FLOOR_PU * np.broadcast_to(v_nom, vn.shape)[used]):
                    raise VoltageCollapseError("delta voltage below 0.5 pu collapse floor")
                i_delta = np.zeros_like(v_ll)
                if model == "PQ":
                    np.divide(s_va, v_ll, out=i_delta, where=used)
                    i_delta = np.conj(i_delta)
                elif model == "I":
                    mag = np.abs(s_va) / v_nom
                    i_delta = np.where(used, mag * np.exp(1j * (np.angle(v_ll) - np.angle(s_va))), 0j)
                else:  # Z
                    z = np.ones_like(v_ll)
                    np.divide(v_nom.astype(complex) ** 2, np.conj(s_va), out=z, where=used)
                    i_delta = np.where(used, v_ll / z, 0j)
                line_cur = i_delta - np.roll(i_delta, 1, axis=1)
                np.add.at(inj, idx, line_cur)

        if self.pev_idx.size:
            s_va = self.pev_s_va()
            v_pev = v[self.pev_idx, self.pev_phase]
            v_nom = comp.v_base_ln[self.pev_idx]
            live = s_va != 0
            if np.any(np.abs(v_pev[live]) < COLLAPSE_FLOOR_PU * v_nom[live]):
                raise VoltageCollapseError("PEV node voltage below 0.5 pu collapse floor")
            cur = np.zeros_like(s_va)
            np.divide(s_va, v_pev, out=cur, where=live)
            np.add.at(inj, (self.pev_idx, self.pev_phase), np.conj(cur))
        return inj


def solve(model: FeederModel, loads: LoadSet, taps: dict[str, tuple[int, ...]] | None = None,
          v0: np.ndarray | None = None, tol: float = 1e-6, max_iter: int = 100,
          ) -> PowerFlowSolution:
    """Solve one load snapshot by forward-backward sweep.

    ``taps`` overrides regulator tap positions by regulator id.  ``v0`` warm
    starts the voltage profile (array shaped (N, 3), volts).  Returns a
    flagged, non-converged solution rather than raising when the sweep fails
    to meet ``tol`` within ``max_iter``.
    """
    comp = compiled(model)
    cloads = _CompiledLoads(loads, comp)

    ratios = [b.ratio for b in comp.branches]
    if taps:
        ratios = list(ratios)
        for reg in model.regulators:
            if reg.id in taps:
                ratios[comp.reg_index[reg.id]] = CompiledFeeder.tap_ratio(reg, tuple(taps[reg.id]))

    n = len(comp.node_ids)
    if v0 is not None:
        v = np.array(v0, dtype=complex)
        if v.shape != (n, 3):
            raise ValueError(f"v0 must have shape ({n}, 3)")
    else:
        v = comp.v_base_ln[:, None] * PHASORS[None, :] * model.source.v_pu
    v = np.where(comp.phase_mask, v, 0j)

    branch_i = np.zeros((len(comp.branches), 3), dtype=complex)
    order = comp.branches
    mismatch = math.inf
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        # Backward: accumulate load, shunt and child currents toward the head.
        inj = cloads.injections(v)
        inj += np.einsum("nij,nj->ni", comp.shunt_y, v)
        node_i = inj
        for bi in range(len(order) - 1, -1, -1):
            b = order[bi]
            cur = node_i[b.to_i]
            branch_i[bi] = cur
            node_i[b.from_i] += ratios[bi] * cur

        # Forward: push voltages out from the source.
        v_new = np.empty_like(v)
        v_new[comp.head_i] = comp.v_src - comp.z_src @ node_i[comp.head_i]
        for bi, b in enumerate(order):
            v_new[b.to_i] = ratios[bi] * v_new[b.from_i] - branch_i[bi] @ b.z.T
        v_new = np.where(comp.phase_mask, v_new, 0j)

        mismatch = float(np.max(np.abs(np.abs(v_new) - np.abs(v)) / comp.v_base_ln[:, None]))
        v = v_new
        if mismatch < tol:
            converged = True
            break

    head_i_total = cloads.injections(v) + np.einsum("nij,nj->ni", comp.shunt_y, v)
    for bi in range(len(order) - 1, -1, -1):
        b = order[bi]
        branch_i[bi] = head_i_total[b.to_i]
        head_i_total[b.from_i] += ratios[bi] * branch_i[bi]

    head_s = v[comp.head_i] * np.conj(head_i_total[comp.head_i]) / 1e3
    series_loss = 0.0
    for bi, b in enumerate(order):
        dv = branch_i[bi] @ b.z.T
        series_loss += float(np.sum((dv * np.conj(branch_i[bi])).real)) / 1e3

    total_load_kw = _drawn_kw(cloads, v)
    mismatch_kw = head_s.real.sum() - total_load_kw - series_loss

    return PowerFlowSolution(
        node_ids=list(comp.node_ids),
        v=v,
        v_base_ln=comp.v_base_ln.copy(),
        phase_mask=comp.phase_mask.copy(),
        branch_keys=[b.key for b in order],
        branch_current=branch_i,
        head_s_phase_kva=head_s,
        iterations=iterations,
        converged=converged,
        max_mismatch_pu=mismatch,
        total_load_kw=total_load_kw,
        series_loss_kw=series_loss,
        power_mismatch_kw=float(mismatch_kw),
    )


def _drawn_kw(cloads: _CompiledLoads, v: np.ndarray) -> float:
    """Real power drawn by all load entries at solved voltages (kW)."""
    total = 0.0
    for conn, model, idx, s_va in cloads.groups:
        vn = v[idx]
        if conn == "Y":
            v_nom = cloads.comp.v_base_ln[idx][:, None]
            vv = vn
        else:
            vv = vn - np.roll(vn, -1, axis=1)
            v_nom = (cloads.comp.v_base_ln[idx] * SQRT3)[:, None]
        used = s_va != 0
        if model == "PQ":
            total += float(np.sum(s_va.real[used]))
        elif model == "I":
            total += float(np.sum((np.abs(vv) / v_nom * np.abs(s_va)
                                   * np.cos(np.angle(s_va)))[used]))
        else:  # Z
            total += float(np.sum(((np.abs(vv) / v_nom) ** 2 * np.abs(s_va)
                                   * np.cos(np.angle(s_va)))[used]))
    total += float(np.sum(cloads.pev_s_va().real))
    return total / 1e3


@dataclass
class RegulationResult:
    solution: PowerFlowSolution
    taps: dict[str, tuple[int, ...]]
    tap_operations: int
    flagged: bool


def regulator_taps(reg: Regulator, solution: PowerFlowSolution,
                   taps: tuple[int, ...], mode: str | None = None) -> tuple[int, ...]:
    """Next tap settings for one regulator given a solved snapshot.

    Fixed mode returns the input taps unchanged.  Automatic mode steps each
    phase (0.00625 pu per tap) toward the relay band around the level setting
    at the regulated (downstream) node.  Ganged banks move one common tap
    driven by the highest phase, so an unbalanced sag on one phase is not
    boosted at the cost of overvolting the others.
    """
    mode = mode or reg.mode
    if mode == "fixed":
        return tuple(taps)
    if mode != "automatic":
        raise ValueError(f"unknown regulator mode {mode!r}")

    node_i = solution._index[reg.to_node]
    half_band = reg.bandwidth_120v / 2.0

    def move(v_relay: float) -> int:
        # One tap step per re-solve, like a mechanical LTC; the caller loops
        # until the relay voltage enters the band.
        if v_relay < reg.level_120v - half_band:
            return 1
        if v_relay > reg.level_120v + half_band:
            return -1
        return 0

    relay_v = [abs(solution.v[node_i, phase - 1]) / reg.pt_ratio for phase in reg.phases]
    if reg.ganged:
        tap = int(np.clip(taps[0] + move(max(relay_v)), Regulator.TAP_MIN, Regulator.TAP_MAX))
        return tuple(tap for _ in reg.phases)
    return tuple(
        int(np.clip(taps[k] + move(relay_v[k]), Regulator.TAP_MIN, Regulator.TAP_MAX))
        for k in range(len(reg.phases)))


def solve_with_regulators(model: FeederModel, loads: LoadSet,
                          taps: dict[str, tuple[int, ...]] | None = None,
                          mode: str | None = None, ops_cap: int = 60,
                          v0: np.ndarray | None = None, tol: float = 1e-6,
                          max_iter: int = 100) -> RegulationResult:
    """Solve and, in automatic mode, drive regulator taps into their bands.

    ``mode`` overrides every regulator's own mode when given.  Tap movement is
    limited to ``ops_cap`` total steps; exceeding the cap flags the result as
    oscillating and returns the last iterate.
    """
    current = {r.id: tuple(taps[r.id]) if taps and r.id in taps else r.taps
               for r in model.regulators}
    ops = 0
    flagged = False
    while True:
        sol = solve(model, loads, taps=current, v0=v0, tol=tol, max_iter=max_iter)
        v0 = sol.v
        changed = False
        for reg in model.regulators:
            new = regulator_taps(reg, sol, current[reg.id], mode=mode)
            if reg.ganged:  # one mechanism moves all phases together
                moves = max(abs(a - b) for a, b in zip(new, current[reg.id]))
            else:
                moves = sum(abs(a - b) for a, b in zip(new, current[reg.id]))
            if moves:
                if ops + moves > ops_cap:
                    flagged = True
                    break
                ops += moves
                current[reg.id] = new
                changed = True
        if flagged or not changed:
            break
    return RegulationResult(solution=sol, taps=current, tap_operations=ops, flagged=flagged)


def dump_solution_csv(solution: PowerFlowSolution, path) -> None:
    """Debug dump: node, phase, voltage magnitude (pu), angle (degrees)."""
    import csv
    from pathlib import Path

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "phase", "v_pu", "angle_deg"])
        for i, node in enumerate(solution.node_ids):
            for p in range(3):
                if solution.phase_mask[i, p]:
                    writer.writerow([node, p + 1,
                                     repr(solution.v_pu(node, p + 1)),
                                     repr(solution.angle_deg(node, p + 1))])
