"""Localization on a synthetic pair: which projection moved most?

Builds a toy base checkpoint, adds gate noise (sigma 1e-2) and noise elsewhere
(sigma 1e-3), then writes the diff report, heatmaps and histograms to --out.
"""

import argparse
import json
from pathlib import Path

from gatescope.checkpoint import write_checkpoint
from gatescope.diff import (Aggregation, diff_checkpoints, histogram_relative_changes, rank_modules,
                            report_csv, report_json)
from gatescope.heatmap import render_panels
from gatescope.naming import DEFAULT_SCHEME
from gatescope.synthetic import localization_pair
from gatescope.toy import ToyConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/localization"))
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--gate-sigma", type=float, default=1e-2)
    ap.add_argument("--other-sigma", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    base, adapted = localization_pair(ToyConfig(n_layers=args.layers), args.gate_sigma, args.other_sigma, args.seed)
    write_checkpoint(base, args.out / "base.safetensors")
    write_checkpoint(adapted, args.out / "adapted.safetensors")

    result = diff_checkpoints(base, adapted, DEFAULT_SCHEME)
    (args.out / "diff.csv").write_text(report_csv(result))
    (args.out / "diff.json").write_text(report_json(result))
    (args.out / "heatmap.svg").write_text(render_panels([("L2", result.l2), ("relative ratio", result.ratio)]))
    hists = histogram_relative_changes(base, adapted, DEFAULT_SCHEME)
    (args.out / "histograms.json").write_text(json.dumps(
        {h.role.value: {"edges": h.bin_edges.tolist(), "counts": h.counts.tolist()} for h in hists},
        indent=2, sort_keys=True) + "\n")

    for dm in (result.l2, result.ratio):
        print(f"{dm.statistic.value}:")
        for agg in Aggregation:
            order = " > ".join(role.short for role, _ in rank_modules(dm, agg))
            print(f"  {agg.value:<6} {order}")
    print(f"reports in {args.out}")


if __name__ == "__main__":
    main()
