#!/usr/bin/env python3
"""Regenerate the bundled synthetic residential load shape.

A smooth double-hump daily profile: overnight base, a small morning shoulder
near 07:30, and a single evening peak at 19:30 (the shape maximum).  Values
are normalized to 1.0 at the peak minute and written at 1-minute resolution.
"""

import csv
import math
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
OUT = ROOT / "src" / "pevfeeder" / "data" / "residential_profile.csv"

BASE = 0.42
MORNING = (450.0, 135.0, 0.17)   # center minute, sigma, amplitude
EVENING = (1170.0, 120.0, 0.58)


def bump(t: float, center: float, sigma: float, amp: float) -> float:
    dist = min(abs(t - center), 1440.0 - abs(t - center))  # wrap around midnight
    return amp * math.exp(-0.5 * (dist / sigma) ** 2)


def main() -> int:
    values = []
    for t in range(1440):
        v = BASE + bump(t, *MORNING) + bump(t, *EVENING)
        values.append(v)
    peak = max(values)
    with OUT.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["minute", "norm_load"])
        for t, v in enumerate(values):
            writer.writerow([t, f"{v / peak:.6f}"])
    print(f"wrote {OUT} (peak at minute {values.index(peak)})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
