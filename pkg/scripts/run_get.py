"""Desk-scale gate-focused tuning run with an lr=0 control."""

import argparse
import json
from dataclasses import asdict, replace
from pathlib import Path

from gatescope.adapt import write_adapters
from gatescope.get import GetExperiment, TrainConfig, run_experiment, toy_dims, trainable_fraction, train


def main():
    d = GetExperiment()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/get"))
    ap.add_argument("--modules", default=d.modules)
    ap.add_argument("--steps", type=int, default=d.train.steps)
    ap.add_argument("--lr", type=float, default=d.train.learning_rate)
    ap.add_argument("--rank", type=int, default=d.rank)
    ap.add_argument("--seed", type=int, default=d.train.seed)
    ap.add_argument("--model-seed", type=int, default=d.model.seed)
    ap.add_argument("--skip-control", action="store_true")
    args = ap.parse_args()

    exp = replace(d, modules=args.modules, rank=args.rank, model=replace(d.model, seed=args.model_seed),
                  train=TrainConfig(steps=args.steps, learning_rate=args.lr, seed=args.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    model, plan, trace = run_experiment(exp, progress=lambda s, l: print(f"step {s:>5}  loss {l:.4f}"))
    (args.out / "trace.csv").write_text(trace.csv())
    write_adapters(trace.adapters, args.out / "adapters.safetensors")
    summary = {"experiment": asdict(exp), **trace.summary(),
               "trainable_fraction": trainable_fraction(toy_dims(model.cfg), exp.selection(), exp.rank)}

    if not args.skip_control:
        data, held_out = exp.datasets()
        control = train(model, plan, data, replace(exp.train, learning_rate=0.0), held_out)
        stationary = all(p.a.tobytes() == q.a.tobytes() and p.b.tobytes() == q.b.tobytes()
                         for p, q in zip(plan.adapters, control.adapters))
        summary["control"] = {**control.summary(), "bit_stationary": stationary}

    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"held-out accuracy {trace.eval_accuracy:.4f}, loss {trace.initial_loss:.4f} -> {trace.final_loss:.4f}")
    if "control" in summary:
        print(f"control accuracy {summary['control']['eval_accuracy']:.4f}, "
              f"bit-stationary: {summary['control']['bit_stationary']}")


if __name__ == "__main__":
    main()
