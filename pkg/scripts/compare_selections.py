"""Single- and multi-module tuning comparison on the toy model.

Every selection trains from the same initial model, data and seeds. The
control row attaches gate adapters but never moves them.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from gatescope.adapt import parse_selection
from gatescope.get import CONTROL, GetExperiment, TrainConfig, compare_selections, comparison_csv
from gatescope.toy import init_model

DEFAULT = ["control", "q", "k", "v", "o", "gate", "up", "down", "att", "att,gate", "o,gate", "all"]


def main():
    d = GetExperiment()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("selections", nargs="*", default=DEFAULT)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--rank", type=int, default=d.rank)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    exp = replace(d, rank=args.rank, train=TrainConfig(steps=args.steps))
    model = init_model(exp.model)
    data, held_out = exp.datasets()
    sels = [CONTROL if s == "control" else parse_selection(s) for s in args.selections]
    rows = compare_selections(model, sels, data, exp.train, held_out, exp.rank, exp.alpha, args.threads)
    text = comparison_csv(rows)
    if args.out:
        args.out.write_text(text)
    print(f"{'selection':<16}{'fraction':>10}{'final loss':>12}{'accuracy':>10}")
    for r in rows:
        print(f"{r.selection:<16}{r.trainable_fraction:>10.4f}{r.final_loss:>12.4f}{r.eval_accuracy:>10.4f}")


if __name__ == "__main__":
    main()
