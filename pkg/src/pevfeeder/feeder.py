"""Radial distribution feeder data model and loader.

The feeder file is a self-contained JSON document with sections for nodes,
line configurations (complex entries written as "R+jX" strings, ohms/mile),
segments (lengths in feet), transformers, regulators, capacitors and loads.
Distributed loads reference a segment and are lumped as two half-loads at the
segment endpoints when the solver view is built.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path

FEET_PER_MILE = 5280.0
PHASE_LETTERS = "ABC"


class FeederFormatError(ValueError):
    """Raised when a feeder file cannot be parsed."""


class FeederValidationError(ValueError):
    """Raised when a parsed feeder violates a model invariant."""

    def __init__(self, report: "ValidationReport"):
        super().__init__("invalid feeder model:\n" + "\n".join(report.entries))
        self.report = report


_COMPLEX_RE = re.compile(
    r"^\s*([+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)?\s*"
    r"(?:([+-])\s*j\s*(\d+(?:\.\d+)?(?:[eE][+-]?\d+)?))?\s*$"
)


def parse_complex(text: str) -> complex:
    """Parse an impedance entry written as "R+jX", "R-jX", "R" or "+jX"."""
    m = _COMPLEX_RE.match(text)
    if m is None or (m.group(1) is None and m.group(2) is None):
        raise FeederFormatError(f"bad complex entry {text!r}, expected 'R+jX'")
    real = float(m.group(1)) if m.group(1) is not None else 0.0
    imag = 0.0
    if m.group(2) is not None:
        imag = float(m.group(3))
        if m.group(2) == "-":
            imag = -imag
    return complex(real, imag)


def format_complex(z: complex) -> str:
    sign = "+" if z.imag >= 0 else "-"
    return f"{z.real:.6g}{sign}j{abs(z.imag):.6g}"


def parse_phases(text: str) -> tuple[int, ...]:
    """Convert a phase string like "ABC" or "B" to 1-based phase numbers."""
    phases = []
    for ch in text.upper():
        if ch not in PHASE_LETTERS:
            raise FeederFormatError(f"unknown phase letter {ch!r} in {text!r}")
        phases.append(PHASE_LETTERS.index(ch) + 1)
    if len(set(phases)) != len(phases):
        raise FeederFormatError(f"duplicate phase in {text!r}")
    return tuple(sorted(phases))


def phases_to_str(phases: tuple[int, ...]) -> str:
    return "".join(PHASE_LETTERS[p - 1] for p in phases)


@dataclass(frozen=True)
class PhaseRef:
    """A (node, phase) location written "node.phase", e.g. "856.2"."""

    node: str
    phase: int

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise ValueError(f"phase must be 1, 2 or 3, got {self.phase}")

    @classmethod
    def parse(cls, text: str) -> "PhaseRef":
        node, sep, phase = text.partition(".")
        if not sep or not node:
            raise ValueError(f"bad phase reference {text!r}, expected 'node.phase'")
        return cls(node=node, phase=int(phase))

    def __str__(self) -> str:
        return f"{self.node}.{self.phase}"


@dataclass(frozen=True)
class Node:
    id: str
    phases: tuple[int, ...]
    kv_ll: float


@dataclass(frozen=True)
class LineConfiguration:
    """Per-mile series impedance and shunt admittance of a line construction.

    Matrices are stored in the full 3x3 embedding with zero rows/columns for
    absent phases; ``phasing`` lists the phases actually present.
    """

    id: str
    phasing: tuple[int, ...]
    z_ohm_per_mile: tuple[tuple[complex, ...], ...]
    b_us_per_mile: tuple[tuple[float, ...], ...]


@dataclass(frozen=True)
class Segment:
    from_node: str
    to_node: str
    length_ft: float
    config: str

    @property
    def key(self) -> tuple[str, str]:
        return (self.from_node, self.to_node)


@dataclass(frozen=True)
class Transformer:
    id: str
    from_node: str
    to_node: str
    kva: float
    kv_high: float
    kv_low: float
    r_pu: float
    x_pu: float
    connection: str = "GrW-GrW"


@dataclass(frozen=True)
class Regulator:
    """Step regulator on a segment; taps boost the downstream node.

    The per-phase ratio is 1 + step_pu * tap with tap in [-16, +16].  In
    automatic mode the tap is driven until the downstream node voltage enters
    [level - bandwidth/2, level + bandwidth/2] on the 120 V relay base.
    Ganged banks move all phases on one common tap, sensing the highest phase
    so regulation never overvolts; a ganged bank cannot rescue a single
    sagging phase.
    """

    id: str
    from_node: str
    to_node: str
    phases: tuple[int, ...]
    taps: tuple[int, ...]
    step_pu: float = 0.00625
    mode: str = "fixed"
    level_120v: float = 122.0
    bandwidth_120v: float = 2.0
    pt_ratio: float = 120.0
    ganged: bool = False

    TAP_MIN = -16
    TAP_MAX = 16


@dataclass(frozen=True)
class Capacitor:
    node: str
    kvar: tuple[float, float, float]


@dataclass(frozen=True)
class Load:
    """Spot load (node set) or segment-distributed load (from/to set).

    kw/kvar are per-phase 3-tuples at nominal voltage; for delta connections
    entry k is the load between phase k and phase k+1 (1-2, 2-3, 3-1).
    """

    conn: str
    model: str
    kw: tuple[float, float, float]
    kvar: tuple[float, float, float]
    node: str | None = None
    from_node: str | None = None
    to_node: str | None = None

    @property
    def is_distributed(self) -> bool:
        return self.node is None

    def describe(self) -> str:
        where = self.node if self.node else f"{self.from_node}-{self.to_node}"
        return f"{self.conn}-{self.model} load at {where}"


@dataclass(frozen=True)
class Source:
    """Slack source behind the substation transformer impedance."""

    node: str
    kv_ll: float
    v_pu: float = 1.05
    kva: float = 2500.0
    r_pu: float = 0.01
    x_pu: float = 0.08
    kv_primary: float = 69.0
    connection: str = "D-GrW"


@dataclass(frozen=True)
class ValidationReport:
    entries: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.entries

    def __bool__(self) -> bool:  # truthy when there is something to report
        return bool(self.entries)


@dataclass(frozen=True)
class FeederModel:
    """Immutable description of an unbalanced radial feeder.

    Safe to share read-only across concurrent scenario runs; solvers compile
    their own working arrays from it.
    """

    name: str
    description: str
    power_base_kva: float
    source: Source
    nodes: tuple[Node, ...]
    configs: tuple[LineConfiguration, ...]
    segments: tuple[Segment, ...]
    transformers: tuple[Transformer, ...]
    regulators: tuple[Regulator, ...]
    capacitors: tuple[Capacitor, ...]
    loads: tuple[Load, ...]
    layout: tuple[tuple[str, tuple[float, float]], ...] = ()

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def config(self, config_id: str) -> LineConfiguration:
        for c in self.configs:
            if c.id == config_id:
                return c
        raise KeyError(config_id)

    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def branches(self) -> list[tuple[str, str]]:
        """All oriented branches (segments plus transformers)."""
        out = [(s.from_node, s.to_node) for s in self.segments]
        out += [(t.from_node, t.to_node) for t in self.transformers]
        return out

    def spot_loads(self) -> list[Load]:
        """Loads with segment-distributed entries lumped half at each endpoint."""
        out: list[Load] = []
        for ld in self.loads:
            if not ld.is_distributed:
                out.append(ld)
                continue
            half_kw = tuple(v / 2.0 for v in ld.kw)
            half_kvar = tuple(v / 2.0 for v in ld.kvar)
            for end in (ld.from_node, ld.to_node):
                out.append(Load(conn=ld.conn, model=ld.model, kw=half_kw,
                                kvar=half_kvar, node=end))
        return out

    def regulator_for_segment(self, from_node: str, to_node: str) -> Regulator | None:
        for reg in self.regulators:
            if (reg.from_node, reg.to_node) == (from_node, to_node):
                return reg
        return None

    def with_regulator_taps(self, taps: dict[str, tuple[int, ...]]) -> "FeederModel":
        regs = tuple(replace(r, taps=tuple(taps.get(r.id, r.taps))) for r in self.regulators)
        return replace(self, regulators=regs)


def segment_impedance(config: LineConfiguration, length_ft: float):
    """Series impedance of a segment in ohms: Z_per_mile * (length / 5280).

    Returns a 3x3 complex numpy array with zero rows/columns for absent phases.
    """
    import numpy as np

    if length_ft < 0:
        raise ValueError("length must be nonnegative")
    z = np.array(config.z_ohm_per_mile, dtype=complex)
    return z * (length_ft / FEET_PER_MILE)


def segment_shunt_admittance(config: LineConfiguration, length_ft: float):
    """Total shunt admittance of a segment in siemens (j * B, B in uS/mile)."""
    import numpy as np

    if length_ft < 0:
        raise ValueError("length must be nonnegative")
    b = np.array(config.b_us_per_mile, dtype=float)
    return 1j * b * 1e-6 * (length_ft / FEET_PER_MILE)


def _load_from_record(rec: dict, idx: int) -> Load:
    conn = str(rec.get("conn", "")).upper()
    model = str(rec.get("model", "")).upper()
    if conn not in ("Y", "D"):
        raise FeederFormatError(f"load #{idx}: connection must be Y or D, got {conn!r}")
    if model not in ("PQ", "I", "Z"):
        raise FeederFormatError(f"load #{idx}: model must be PQ, I or Z, got {model!r}")
    kw = tuple(float(v) for v in rec["kw"])
    kvar = tuple(float(v) for v in rec["kvar"])
    if len(kw) != 3 or len(kvar) != 3:
        raise FeederFormatError(f"load #{idx}: kw/kvar must have 3 entries")
    if "node" in rec:
        return Load(conn=conn, model=model, kw=kw, kvar=kvar, node=str(rec["node"]))
    return Load(conn=conn, model=model, kw=kw, kvar=kvar,
                from_node=str(rec["from"]), to_node=str(rec["to"]))


def load_feeder(path: str | Path) -> FeederModel:
    """Load and validate a feeder file.

    Raises FeederFormatError on malformed input and FeederValidationError
    (carrying the full report) when the parsed model violates an invariant.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FeederFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise FeederFormatError(f"{path}: top level must be an object")

    try:
        model = _model_from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FeederFormatError):
            raise
        raise FeederFormatError(f"{path}: {exc}") from exc

    report = validate_feeder(model)
    if report:
        raise FeederValidationError(report)
    return model


def _model_from_dict(raw: dict) -> FeederModel:
    src = raw["source"]
    imp = src.get("impedance", {})
    source = Source(
        node=str(src["node"]),
        kv_ll=float(src["kv_ll"]),
        v_pu=float(src.get("v_pu", 1.05)),
        kva=float(imp.get("kva", raw.get("power_base_kva", 2500.0))),
        r_pu=float(imp.get("r_pu", 0.0)),
        x_pu=float(imp.get("x_pu", 0.0)),
        kv_primary=float(imp.get("kv_primary", 0.0)),
        connection=str(imp.get("connection", "D-GrW")),
    )
    nodes = tuple(
        Node(id=str(n["id"]), phases=parse_phases(n["phases"]), kv_ll=float(n["kv_ll"]))
        for n in raw["nodes"]
    )
    configs = []
    for c in raw["configs"]:
        z = tuple(tuple(parse_complex(e) for e in row) for row in c["z_ohm_per_mile"])
        b = tuple(tuple(float(e) for e in row) for row in c["b_us_per_mile"])
        configs.append(LineConfiguration(id=str(c["id"]), phasing=parse_phases(c["phasing"]),
                                         z_ohm_per_mile=z, b_us_per_mile=b))
    segments = tuple(
        Segment(from_node=str(s["from"]), to_node=str(s["to"]),
                length_ft=float(s["length_ft"]), config=str(s["config"]))
        for s in raw["segments"]
    )
    transformers = tuple(
        Transformer(id=str(t["id"]), from_node=str(t["from"]), to_node=str(t["to"]),
                    kva=float(t["kva"]), kv_high=float(t["kv_high"]), kv_low=float(t["kv_low"]),
                    r_pu=float(t["r_pu"]), x_pu=float(t["x_pu"]),
                    connection=str(t.get("connection", "GrW-GrW")))
        for t in raw.get("transformers", ())
    )
    regulators = tuple(
        Regulator(id=str(r["id"]), from_node=str(r["from"]), to_node=str(r["to"]),
                  phases=parse_phases(r["phases"]), taps=tuple(int(v) for v in r["taps"]),
                  step_pu=float(r.get("step_pu", 0.00625)), mode=str(r.get("mode", "fixed")),
                  level_120v=float(r.get("level_120v", 122.0)),
                  bandwidth_120v=float(r.get("bandwidth_120v", 2.0)),
                  pt_ratio=float(r.get("pt_ratio", 120.0)),
                  ganged=bool(r.get("ganged", False)))
        for r in raw.get("regulators", ())
    )
    capacitors = tuple(
        Capacitor(node=str(c["node"]), kvar=tuple(float(v) for v in c["kvar"]))
        for c in raw.get("capacitors", ())
    )
    loads = tuple(_load_from_record(rec, i) for i, rec in enumerate(raw.get("loads", ())))
    layout = tuple(
        (str(k), (float(v[0]), float(v[1]))) for k, v in raw.get("layout", {}).items()
    )
    return FeederModel(
        name=str(raw.get("name", "feeder")),
        description=str(raw.get("description", "")),
        power_base_kva=float(raw.get("power_base_kva", 2500.0)),
        source=source,
        nodes=nodes,
        configs=tuple(configs),
        segments=segments,
        transformers=transformers,
        regulators=regulators,
        capacitors=capacitors,
        loads=loads,
        layout=layout,
    )


def save_feeder(model: FeederModel, path: str | Path) -> None:
    """Write a feeder file that load_feeder reads back to an equal model."""
    doc = {
        "name": model.name,
        "description": model.description,
        "power_base_kva": model.power_base_kva,
        "source": {
            "node": model.source.node,
            "kv_ll": model.source.kv_ll,
            "v_pu": model.source.v_pu,
            "impedance": {
                "kva": model.source.kva,
                "r_pu": model.source.r_pu,
                "x_pu": model.source.x_pu,
                "kv_primary": model.source.kv_primary,
                "connection": model.source.connection,
            },
        },
        "nodes": [
            {"id": n.id, "phases": phases_to_str(n.phases), "kv_ll": n.kv_ll}
            for n in model.nodes
        ],
        "configs": [
            {
                "id": c.id,
                "phasing": phases_to_str(c.phasing),
                "z_ohm_per_mile": [[format_complex(z) for z in row] for row in c.z_ohm_per_mile],
                "b_us_per_mile": [list(row) for row in c.b_us_per_mile],
            }
            for c in model.configs
        ],
        "segments": [
            {"from": s.from_node, "to": s.to_node, "length_ft": s.length_ft, "config": s.config}
            for s in model.segments
        ],
        "transformers": [
            {"id": t.id, "from": t.from_node, "to": t.to_node, "kva": t.kva,
             "kv_high": t.kv_high, "kv_low": t.kv_low, "r_pu": t.r_pu, "x_pu": t.x_pu,
             "connection": t.connection}
            for t in model.transformers
        ],
        "regulators": [
            {"id": r.id, "from": r.from_node, "to": r.to_node,
             "phases": phases_to_str(r.phases), "taps": list(r.taps), "step_pu": r.step_pu,
             "mode": r.mode, "level_120v": r.level_120v, "bandwidth_120v": r.bandwidth_120v,
             "pt_ratio": r.pt_ratio, "ganged": r.ganged}
            for r in model.regulators
        ],
        "capacitors": [{"node": c.node, "kvar": list(c.kvar)} for c in model.capacitors],
        "loads": [_load_to_record(ld) for ld in model.loads],
        "layout": {k: list(v) for k, v in model.layout},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _load_to_record(ld: Load) -> dict:
    rec: dict = {}
    if ld.node is not None:
        rec["node"] = ld.node
    else:
        rec["from"] = ld.from_node
        rec["to"] = ld.to_node
    rec.update(conn=ld.conn, model=ld.model, kw=list(ld.kw), kvar=list(ld.kvar))
    return rec


def validate_feeder(model: FeederModel) -> ValidationReport:
    """Check every model invariant; violations are report entries, not errors."""
    entries: list[str] = []
    node_ids = model.node_ids()
    node_set = set(node_ids)
    by_id = {n.id: n for n in model.nodes}

    if len(node_set) != len(node_ids):
        dupes = sorted({i for i in node_ids if node_ids.count(i) > 1})
        entries.append(f"duplicate node ids: {', '.join(dupes)}")

    for n in model.nodes:
        if n.kv_ll <= 0:
            entries.append(f"node {n.id}: kV base must be strictly positive")
        if not n.phases:
            entries.append(f"node {n.id}: no phases")

    config_ids = {c.id for c in model.configs}
    for c in model.configs:
        n_ph = len(c.phasing)
        present = [p - 1 for p in c.phasing]
        for i in range(3):
            for j in range(3):
                zij = c.z_ohm_per_mile[i][j]
                if c.z_ohm_per_mile[j][i] != zij:
                    entries.append(f"config {c.id}: impedance matrix not symmetric at ({i},{j})")
                if c.b_us_per_mile[j][i] != c.b_us_per_mile[i][j]:
                    entries.append(f"config {c.id}: shunt matrix not symmetric at ({i},{j})")
                if (i not in present or j not in present) and zij != 0:
                    entries.append(
                        f"config {c.id}: nonzero impedance outside phasing at ({i},{j})")
        for p in present:
            if c.z_ohm_per_mile[p][p].real <= 0:
                entries.append(f"config {c.id}: diagonal resistance for phase "
                               f"{PHASE_LETTERS[p]} must be positive")
        nonzero_diag = sum(1 for i in range(3) if c.z_ohm_per_mile[i][i] != 0)
        if nonzero_diag != n_ph:
            entries.append(f"config {c.id}: matrix dimension does not match phasing")

    if model.source.node not in node_set:
        entries.append(f"source node {model.source.node} not defined")

    seen_branches: set[tuple[str, str]] = set()
    for s in model.segments:
        name = f"segment {s.from_node}-{s.to_node}"
        if s.length_ft <= 0:
            entries.append(f"{name}: length must be strictly positive")
        if s.config not in config_ids:
            entries.append(f"{name}: unknown configuration id {s.config!r}")
        for end in (s.from_node, s.to_node):
            if end not in node_set:
                entries.append(f"{name}: unknown node {end}")
        if s.config in config_ids and s.from_node in by_id and s.to_node in by_id:
            ph = set(model.config(s.config).phasing)
            for end in (s.from_node, s.to_node):
                missing = ph - set(by_id[end].phases)
                if missing:
                    entries.append(f"{name}: phases {sorted(missing)} absent at node {end}")
        key = (min(s.from_node, s.to_node), max(s.from_node, s.to_node))
        if key in seen_branches:
            entries.append(f"{name}: duplicate branch")
        seen_branches.add(key)

    for t in model.transformers:
        name = f"transformer {t.id}"
        if t.kva <= 0:
            entries.append(f"{name}: kVA rating must be strictly positive")
        if t.kv_high <= 0 or t.kv_low <= 0:
            entries.append(f"{name}: kV ratings must be strictly positive")
        for end in (t.from_node, t.to_node):
            if end not in node_set:
                entries.append(f"{name}: unknown node {end}")
        key = (min(t.from_node, t.to_node), max(t.from_node, t.to_node))
        if key in seen_branches:
            entries.append(f"{name}: duplicate branch")
        seen_branches.add(key)

    # Topology: exactly one path from the head to every node.
    adjacency: dict[str, list[tuple[str, str]]] = {n: [] for n in node_set}
    for a, b in model.branches():
        if a in adjacency and b in adjacency:
            adjacency[a].append((b, f"{a}-{b}"))
            adjacency[b].append((a, f"{a}-{b}"))
    if model.source.node in node_set:
        seen: dict[str, str | None] = {model.source.node: None}
        stack = [model.source.node]
        while stack:
            cur = stack.pop()
            for nxt, edge in adjacency[cur]:
                if nxt not in seen:
                    seen[nxt] = edge
                    stack.append(nxt)
                elif seen[cur] != edge:
                    entries.append(f"cycle through branch {edge}")
        unreachable = sorted(node_set - set(seen))
        if unreachable:
            entries.append(f"nodes unreachable from head: {', '.join(unreachable)}")
    n_branches = len(model.segments) + len(model.transformers)
    if n_branches != len(node_set) - 1:
        entries.append(
            f"branch count {n_branches} does not match tree size {len(node_set) - 1}")

    for reg in model.regulators:
        name = f"regulator {reg.id}"
        if not any((s.from_node, s.to_node) == (reg.from_node, reg.to_node)
                   for s in model.segments):
            entries.append(f"{name}: no segment {reg.from_node}-{reg.to_node}")
        for tap in reg.taps:
            if not (Regulator.TAP_MIN <= tap <= Regulator.TAP_MAX):
                entries.append(f"{name}: tap {tap} outside [{Regulator.TAP_MIN},"
                               f" {Regulator.TAP_MAX}]")
        if len(reg.taps) != len(reg.phases):
            entries.append(f"{name}: {len(reg.taps)} taps for {len(reg.phases)} phases")
        if reg.mode not in ("fixed", "automatic"):
            entries.append(f"{name}: unknown mode {reg.mode!r}")

    for cap in model.capacitors:
        if cap.node not in node_set:
            entries.append(f"capacitor at {cap.node}: unknown node")
            continue
        for i, q in enumerate(cap.kvar):
            if q != 0 and (i + 1) not in by_id[cap.node].phases:
                entries.append(f"capacitor at {cap.node}: phase {i + 1} absent at node")

    for ld in model.loads:
        name = ld.describe()
        targets = [ld.node] if ld.node else [ld.from_node, ld.to_node]
        for target in targets:
            if target not in node_set:
                entries.append(f"{name}: unknown node {target}")
                continue
            node_phases = set(by_id[target].phases)
            for i in range(3):
                if ld.kw[i] == 0 and ld.kvar[i] == 0:
                    continue
                if ld.conn == "Y":
                    needed = {i + 1}
                else:  # delta entry k sits between phase k and the next phase
                    needed = {i + 1, (i + 1) % 3 + 1}
                missing = needed - node_phases
                if missing:
                    entries.append(f"{name}: phase {sorted(missing)} absent at node {target}")
        if ld.is_distributed and not any(
                (s.from_node, s.to_node) == (ld.from_node, ld.to_node) for s in model.segments):
            entries.append(f"{name}: no segment {ld.from_node}-{ld.to_node}")

    for node_id, _xy in model.layout:
        if node_id not in node_set:
            entries.append(f"layout entry for unknown node {node_id}")

    deduped = tuple(dict.fromkeys(entries))
    return ValidationReport(entries=deduped)
