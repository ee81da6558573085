#!/usr/bin/env python3
"""Run every experiment config in ``configs/`` and summarize the results.

Usage::

    python scripts/run_all_experiments.py                 # full scale
    python scripts/run_all_experiments.py --quick         # small sample counts
    python scripts/run_all_experiments.py strong_pendulum --threads 4

Each experiment writes its CSV files and manifest under
``<output-root>/<config name>/``. The summary lists fitted slopes for
convergence runs and the largest invariant deviation for conservation runs.
"""

import argparse
import csv
import dataclasses
import sys
import time
from pathlib import Path

from conformal_sde.cli import parse_config, run

ROOT = Path(__file__).resolve().parent.parent
QUICK_SAMPLES = {"strong_convergence": 20, "weak_convergence": 500}


def summarize(out_dir: Path) -> list:
    lines = []
    for path in sorted(out_dir.glob("*.csv")):
        text = path.read_text().splitlines()
        footer = {k.strip("# ").strip(): v.strip() for k, _, v in (l.partition("=") for l in text if l.startswith("#"))}
        if "fitted_slope" in footer:
            lines.append(f"{path.stem}: slope {float(footer['fitted_slope']):.3f} "
                         f"+- {float(footer.get('slope_stderr', 'nan')):.3f}")
        elif path.stem.startswith("conservation_"):
            rows = csv.DictReader(l for l in text if not l.startswith("#"))
            worst = max(float(r["rel_deviation"]) for r in rows)
            lines.append(f"{path.stem}: max rel deviation {worst:.3e}")
        else:
            lines.append(f"{path.stem}: {len(text) - 1} rows")
    return lines


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("names", nargs="*", help="config names without .cfg (default: all)")
    parser.add_argument("--configs", type=Path, default=ROOT / "configs")
    parser.add_argument("--output-root", type=Path, default=ROOT / "output")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--quick", action="store_true", help="use small Monte Carlo sample counts")
    args = parser.parse_args(argv)

    paths = sorted(args.configs.glob("*.cfg"))
    if args.names:
        paths = [p for p in paths if p.stem in args.names]
        missing = set(args.names) - {p.stem for p in paths}
        if missing:
            parser.error(f"no config named {', '.join(sorted(missing))}")

    worst = 0
    for path in paths:
        cfg = parse_config(path.read_text())
        if args.quick and cfg.experiment in QUICK_SAMPLES:
            cfg = dataclasses.replace(cfg, samples=min(cfg.samples, QUICK_SAMPLES[cfg.experiment]))
        out = args.output_root / path.stem
        cfg = dataclasses.replace(cfg, output_dir=str(out))
        start = time.perf_counter()
        code = run(cfg, threads=args.threads)
        worst = max(worst, code)
        print(f"== {path.stem} ({cfg.experiment}, {cfg.samples} samples): exit {code}, "
              f"{time.perf_counter() - start:.1f} s")
        for line in summarize(out):
            print(f"   {line}")
    return worst


if __name__ == "__main__":
    sys.exit(main())
