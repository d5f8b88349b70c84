#!/usr/bin/env python3
"""Regenerate the bundled base-case reference solution.

The reference voltages are produced by the admittance-matrix solver in
tests/ybus_oracle.py (independent of the production sweep solver) on the
bundled feeder at its pinned regulator taps.  Run from the repo root:

    python3 scripts/make_benchmark.py
"""

import csv
import math
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "tests"))

import numpy as np

from pevfeeder import data_path
from pevfeeder.feeder import load_feeder
from ybus_oracle import YbusReference


def main() -> int:
    model = load_feeder(data_path("ieee34.json"))
    ref = YbusReference(model)
    voltages = ref.solve(tol=1e-12)

    out = data_path("ieee34_benchmark.csv")
    kv = {n.id: n.kv_ll for n in model.nodes}
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "phase", "v_pu", "angle_deg"])
        for node in model.nodes:
            for p in node.phases:
                v = voltages[(node.id, p)]
                v_base = kv[node.id] * 1e3 / math.sqrt(3.0)
                writer.writerow([node.id, p,
                                 f"{abs(v) / v_base:.8f}",
                                 f"{np.degrees(np.angle(v)):.6f}"])
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
