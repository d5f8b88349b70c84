"""Independent reference solver: nodal admittance matrix + current injection.

This is the oracle side of the dual-route power-flow check.  It shares the
feeder data model with the production solver but nothing of its method: the
network is stamped into one complex admittance matrix over all present
(node, phase) unknowns and solved by dense LU inside a fixed-point loop on
the load currents.  Kept deliberately separate from the package so the sweep
solver can never be validated against itself.
"""

from __future__ import annotations

import math

import numpy as np

from pevfeeder.feeder import FeederModel, segment_impedance, segment_shunt_admittance

SQRT3 = math.sqrt(3.0)
PHASORS = np.exp(1j * np.deg2rad(np.array([0.0, -120.0, 120.0])))


class YbusReference:
    def __init__(self, model: FeederModel, taps: dict[str, tuple[int, ...]] | None = None):
        self.model = model
        taps = taps or {}

        self.unknowns: list[tuple[str, int]] = []
        for node in model.nodes:
            for p in node.phases:
                self.unknowns.append((node.id, p))
        self.uidx = {key: i for i, key in enumerate(self.unknowns)}
        n = len(self.unknowns)
        self.y = np.zeros((n, n), dtype=complex)
        self.i_fixed = np.zeros(n, dtype=complex)
        self.v_base = np.zeros(n)
        kv = {nd.id: nd.kv_ll for nd in model.nodes}
        for i, (node_id, _p) in enumerate(self.unknowns):
            self.v_base[i] = kv[node_id] * 1e3 / SQRT3

        for seg in model.segments:
            config = model.config(seg.config)
            phases = config.phasing
            z_full = segment_impedance(config, seg.length_ft)
            ysh_full = segment_shunt_admittance(config, seg.length_ft)
            sub = np.ix_([p - 1 for p in phases], [p - 1 for p in phases])
            y_series = np.linalg.inv(z_full[sub])
            y_half = ysh_full[sub] / 2.0

            reg = model.regulator_for_segment(seg.from_node, seg.to_node)
            a = np.ones(len(phases))
            if reg is not None:
                tap_values = taps.get(reg.id, reg.taps)
                for k, p in enumerate(phases):
                    if p in reg.phases:
                        a[k] = 1.0 + reg.step_pu * tap_values[reg.phases.index(p)]
            amat = np.diag(a)

            fi = [self.uidx[(seg.from_node, p)] for p in phases]
            ti = [self.uidx[(seg.to_node, p)] for p in phases]
            # Ideal per-phase ratio a between the from node and the series
            # impedance: I_from = A y A V_from - A y V_to, I_to = y V_to - y A V_from.
            self.y[np.ix_(fi, fi)] += amat @ y_series @ amat
            self.y[np.ix_(fi, ti)] += -amat @ y_series
            self.y[np.ix_(ti, fi)] += -y_series @ amat
            self.y[np.ix_(ti, ti)] += y_series
            # Charging splits between the endpoints; the from-side half sits on
            # the regulator secondary but the affected segments are 10 ft long.
            self.y[np.ix_(fi, fi)] += y_half
            self.y[np.ix_(ti, ti)] += y_half

        for xf in model.transformers:
            a_val = xf.kv_low / xf.kv_high
            z_low = complex(xf.r_pu, xf.x_pu) * (xf.kv_low * 1e3) ** 2 / (xf.kva * 1e3)
            y_series = np.eye(3, dtype=complex) / z_low
            amat = np.eye(3) * a_val
            fi = [self.uidx[(xf.from_node, p)] for p in (1, 2, 3)]
            ti = [self.uidx[(xf.to_node, p)] for p in (1, 2, 3)]
            self.y[np.ix_(fi, fi)] += amat @ y_series @ amat
            self.y[np.ix_(fi, ti)] += -amat @ y_series
            self.y[np.ix_(ti, fi)] += -y_series @ amat
            self.y[np.ix_(ti, ti)] += y_series

        for cap in model.capacitors:
            for p in (1, 2, 3):
                if cap.kvar[p - 1]:
                    i = self.uidx[(cap.node, p)]
                    self.y[i, i] += 1j * cap.kvar[p - 1] * 1e3 / self.v_base[i] ** 2

        # Norton equivalent of the slack source behind its impedance.
        z_pu = complex(model.source.r_pu, model.source.x_pu)
        z_base = (model.source.kv_ll * 1e3) ** 2 / (model.source.kva * 1e3)
        y_src = 1.0 / (z_pu * z_base) if z_pu != 0 else None
        head = model.source.node
        v_src = model.source.v_pu * kv[head] * 1e3 / SQRT3 * PHASORS
        self.src_rows = [self.uidx[(head, p)] for p in (1, 2, 3)]
        self.v_src = v_src
        if y_src is None:
            raise ValueError("reference solver needs a nonzero source impedance")
        for k, i in enumerate(self.src_rows):
            self.y[i, i] += y_src
            self.i_fixed[i] += y_src * v_src[k]

    def _load_currents(self, v: np.ndarray, entries) -> np.ndarray:
        """Current drawn per unknown for load entries, written from scratch."""
        drawn = np.zeros_like(v)
        for node, conn, lmodel, s3 in entries:
            if conn == "Y":
                for p in (1, 2, 3):
                    s = s3[p - 1]
                    if s == 0:
                        continue
                    i = self.uidx[(node, p)]
                    vp = v[i]
                    vb = self.v_base[i]
                    if lmodel == "PQ":
                        cur = np.conj(s / vp)
                    elif lmodel == "I":
                        cur = abs(s) / vb * np.exp(1j * (np.angle(vp) - np.angle(s)))
                    else:
                        cur = vp * np.conj(s) / vb**2
                    drawn[i] += cur
            else:
                for p in (1, 2, 3):
                    s = s3[p - 1]
                    if s == 0:
                        continue
                    q = p % 3 + 1
                    ip = self.uidx[(node, p)]
                    iq = self.uidx[(node, q)]
                    v_ll = v[ip] - v[iq]
                    vb = self.v_base[ip] * SQRT3
                    if lmodel == "PQ":
                        cur = np.conj(s / v_ll)
                    elif lmodel == "I":
                        cur = abs(s) / vb * np.exp(1j * (np.angle(v_ll) - np.angle(s)))
                    else:
                        cur = v_ll * np.conj(s) / vb**2
                    drawn[ip] += cur
                    drawn[iq] -= cur
        return drawn

    def solve(self, multiplier: float = 1.0, extra_wye_pq=(), tol: float = 1e-10,
              max_iter: int = 200):
        """Fixed-point solve; returns dict (node, phase) -> complex volts.

        ``extra_wye_pq`` lists (node, phase, s_kva) wye PQ additions such as
        PEV draws.  The load multiplier scales spot loads only (all three load
        classes draw currents linear in S at fixed voltage, so scaling their
        nominal powers is exact), mirroring the scenario convention.
        """
        base_entries = [
            (ld.node, ld.conn, ld.model,
             [complex(ld.kw[k], ld.kvar[k]) * 1e3 * multiplier for k in range(3)])
            for ld in self.model.spot_loads()
        ]
        for node, phase, s_kva in extra_wye_pq:
            s3 = [0j, 0j, 0j]
            s3[phase - 1] = complex(s_kva) * 1e3
            base_entries.append((node, "Y", "PQ", s3))

        yinv = np.linalg.inv(self.y)
        v = self.v_base * PHASORS[[p - 1 for _, p in self.unknowns]]
        for _ in range(max_iter):
            drawn = self._load_currents(v, base_entries)
            v_new = yinv @ (self.i_fixed - drawn)
            delta = np.max(np.abs(v_new - v) / self.v_base)
            v = v_new
            if delta < tol:
                break
        else:
            raise RuntimeError("reference solver did not converge")
        return {key: v[i] for i, key in enumerate(self.unknowns)}
