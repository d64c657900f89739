"""``gatescope`` command line.

Data goes to stdout, progress and diagnostics to stderr. Exit codes:
0 ok, 2 usage, 3 format/parse, 4 shape/pairing, 5 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .adapt import parse_selection, read_adapters, selective_load, transplant, write_adapters
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .diff import (DEFAULT_EPS, Aggregation, DiffMatrix, Statistic, diff_checkpoints,
                   histogram_relative_changes, rank_modules, read_report_csv, report_csv, report_json)
from .errors import FormatError, GatescopeError, UsageError
from .get import (CONTROL, QWEN25_7B_DIMS, GetExperiment, TrainConfig, build_get_plan,
                  compare_selections, comparison_csv, comparison_json, lora_params, train,
                  trainable_fraction_exact, toy_dims)
from .heatmap import render_heatmap_svg, render_panels
from .naming import ROLE_ORDER, ModuleRole, load_scheme
from .synthetic import localization_pair
from .toy import ToyConfig, ToyModel, init_model

log = logging.getLogger("gatescope")

ENV_THREADS = "GATESCOPE_THREADS"
ENV_SCHEME = "GATESCOPE_SCHEME"
DIMS_PRESETS = {"qwen2.5-7b": QWEN25_7B_DIMS}


# --- argument plumbing -------------------------------------------------------

def _default_threads() -> int:
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{ENV_THREADS}={env!r} is not an integer") from None
        if n < 1:
            raise UsageError(f"{ENV_THREADS} must be >= 1")
        return n
    return os.cpu_count() or 1


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _common(formats: tuple[str, ...]) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--format", choices=formats, default=formats[0], help="stdout format")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help=f"worker threads (default ${ENV_THREADS} or all cores)")
    p.add_argument("--scheme", default=None,
                   help=f"naming preset (qwen, llama, mistral) or scheme file (default ${ENV_SCHEME} or qwen)")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress on stderr")
    return p


def _selection_args(p: argparse.ArgumentParser, default: str | None = None) -> None:
    p.add_argument("--modules", default=default, required=default is None,
                   help="comma-separated roles: q,k,v,o,gate,up,down or att, ffn, all")
    p.add_argument("--layers", default=None, help="inclusive layer range a..b or a single layer")


def _toy_args(p: argparse.ArgumentParser) -> None:
    d = ToyConfig()
    p.add_argument("--d-model", type=_positive_int, default=d.d_model)
    p.add_argument("--n-heads", type=_positive_int, default=d.n_heads)
    p.add_argument("--n-kv-heads", type=_positive_int, default=d.n_kv_heads)
    p.add_argument("--d-ff", type=_positive_int, default=d.d_ff)
    p.add_argument("--n-layers", type=_positive_int, default=d.n_layers)
    p.add_argument("--vocab", type=_positive_int, default=d.vocab)
    p.add_argument("--max-seq", type=_positive_int, default=d.max_seq)
    p.add_argument("--model-seed", type=int, default=d.seed)


def _toy_config(args) -> ToyConfig:
    return ToyConfig(d_model=args.d_model, n_heads=args.n_heads, n_kv_heads=args.n_kv_heads, d_ff=args.d_ff,
                     n_layers=args.n_layers, vocab=args.vocab, max_seq=args.max_seq, seed=args.model_seed)


def _train_args(p: argparse.ArgumentParser) -> None:
    t, e = TrainConfig(), GetExperiment()
    p.add_argument("--model", type=Path, default=None, help="toy checkpoint (default: fresh init from --model-seed)")
    _toy_args(p)
    p.add_argument("--rank", type=_positive_int, default=e.rank)
    p.add_argument("--alpha", type=float, default=e.alpha)
    p.add_argument("--lr", type=float, default=t.learning_rate)
    p.add_argument("--steps", type=_positive_int, default=t.steps)
    p.add_argument("--batch-size", type=_positive_int, default=t.batch_size)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=t.optimizer)
    p.add_argument("--seed", type=int, default=t.seed, help="adapter init and batch order")
    p.add_argument("--seq-len", type=_positive_int, default=e.seq_len)
    p.add_argument("--n-train", type=_positive_int, default=e.n_train)
    p.add_argument("--n-eval", type=_positive_int, default=e.n_eval)
    p.add_argument("--data-seed", type=int, default=e.data_seed)
    p.add_argument("--eval-seed", type=int, default=e.eval_seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatescope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gatescope {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("diff", parents=[_common(("csv", "json"))],
                       help="per-module L2 and relative-ratio diff of two checkpoints")
    p.add_argument("base", type=Path)
    p.add_argument("adapted", type=Path)
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--out", type=Path, default=None, help="write the report here instead of stdout")
    p.add_argument("--svg", type=Path, default=None, help="also render a heatmap")
    p.add_argument("--statistic", choices=[s.value for s in Statistic], default=Statistic.L2.value,
                   help="statistic shown in the heatmap")
    p.add_argument("--color-scale", choices=("log", "linear"), default="log")
    p.add_argument("--histogram", type=Path, default=None,
                   help="write per-role elementwise relative-change histograms as JSON")
    p.add_argument("--bins", type=_positive_int, default=50)
    p.add_argument("--sample-cap", type=_positive_int, default=1_000_000)

    p = sub.add_parser("transplant", parents=[_common(("text", "json"))],
                       help="copy selected modules bitwise from a donor into a base checkpoint")
    p.add_argument("base", type=Path)
    p.add_argument("donor", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _selection_args(p)

    p = sub.add_parser("merge-lora", aliases=["load-lora"], parents=[_common(("text", "json"))],
                       help="merge LoRA adapters into the selected modules only")
    p.add_argument("base", type=Path)
    p.add_argument("adapters", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _selection_args(p)
    p.add_argument("--no-rank-scaling", action="store_true", help="scale by alpha instead of alpha/r")

    p = sub.add_parser("train", parents=[_common(("text", "json"))],
                       help="gate-focused LoRA tuning of the toy model on the synthetic task")
    _selection_args(p, default="gate")
    _train_args(p)
    p.add_argument("--trace", type=Path, default=None, help="per-step loss CSV")
    p.add_argument("--adapters", type=Path, default=None, help="trained adapter file")

    p = sub.add_parser("compare", parents=[_common(("csv", "json"))],
                       help="train one adapter set per selection and tabulate the results")
    p.add_argument("--select", action="append", default=None, metavar="MODULES",
                   help="a selection to train (repeatable); 'control' is the lr=0 run")
    p.add_argument("--layers", default=None)
    _train_args(p)

    p = sub.add_parser("param-fraction", parents=[_common(("text", "json"))],
                       help="LoRA parameters on the selected roles over all seven roles")
    _selection_args(p, default="gate")
    p.add_argument("--rank", type=_positive_int, default=8)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--dims", default="qwen2.5-7b",
                     help="'qwen2.5-7b', 'toy', or a JSON file mapping role -> [d_in, d_out]")
    src.add_argument("--model", type=Path, default=None, help="read dims from a toy checkpoint")
    _toy_args(p)

    p = sub.add_parser("report", parents=[_common(("text", "json"))],
                       help="combine diff CSVs into one heatmap and a ranking table")
    p.add_argument("reports", type=Path, nargs="+")
    p.add_argument("--svg", type=Path, default=None)
    p.add_argument("--statistic", choices=[s.value for s in Statistic], default=Statistic.L2.value)
    p.add_argument("--color-scale", choices=("log", "linear"), default="log")
    p.add_argument("--aggregation", choices=[a.value for a in Aggregation], default=Aggregation.MEAN.value)

    p = sub.add_parser("init-toy", parents=[_common(("text", "json"))], help="write a freshly initialised toy model")
    p.add_argument("--out", type=Path, required=True)
    _toy_args(p)

    p = sub.add_parser("synth-pair", parents=[_common(("text", "json"))],
                       help="write a toy base checkpoint and a copy with role-dependent noise")
    p.add_argument("--base-out", type=Path, required=True)
    p.add_argument("--adapted-out", type=Path, required=True)
    p.add_argument("--gate-sigma", type=float, default=1e-2)
    p.add_argument("--other-sigma", type=float, default=1e-3)
    p.add_argument("--noise-seed", type=int, default=0)
    _toy_args(p)
    return parser


# --- validation --------------------------------------------------------------

def _require_inputs(*paths: Path | None) -> None:
    for path in paths:
        if path is None:
            continue
        if not path.exists():
            raise UsageError(f"input not found: {path}")
        if not path.is_file():
            raise UsageError(f"input is not a file: {path}")


def _require_outputs(inputs: list[Path | None], *outputs: Path | None) -> None:
    resolved_in = {p.resolve() for p in inputs if p is not None}
    seen = set()
    for out in outputs:
        if out is None:
            continue
        parent = out.parent if str(out.parent) else Path(".")
        if not parent.is_dir():
            raise UsageError(f"output directory does not exist: {parent}")
        r = out.resolve()
        if r in resolved_in:
            raise UsageError(f"refusing to overwrite input {out}")
        if r in seen:
            raise UsageError(f"output path given twice: {out}")
        seen.add(r)


def _scheme(args):
    return load_scheme(args.scheme or os.environ.get(ENV_SCHEME) or "qwen")


def _threads(args) -> int:
    return args.threads if args.threads is not None else _default_threads()


def _progress(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr, flush=True)


def _emit(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# --- subcommands -------------------------------------------------------------

def cmd_diff(args) -> int:
    _require_inputs(args.base, args.adapted)
    _require_outputs([args.base, args.adapted], args.out, args.svg, args.histogram)
    if args.eps < 0:
        raise UsageError("--eps must be >= 0")
    if args.bins < 2:
        raise UsageError("--bins must be >= 2")
    scheme = _scheme(args)
    base, adapted = read_checkpoint(args.base), read_checkpoint(args.adapted)
    _progress(args, f"diffing {len(base)} x {len(adapted)} tensors")
    result = diff_checkpoints(base, adapted, scheme, eps=args.eps, threads=_threads(args))
    text = report_json(result) if args.format == "json" else report_csv(result)
    if args.svg is not None:
        dm = result.l2 if args.statistic == Statistic.L2.value else result.ratio
        if dm.is_empty():
            raise UsageError("nothing to render: every cell is absent")
        _write_text(args.svg, render_heatmap_svg(dm, args.color_scale))
        _progress(args, f"wrote {args.svg}")
    if args.histogram is not None:
        hists = histogram_relative_changes(base, adapted, scheme, bins=args.bins,
                                           sample_cap=args.sample_cap, eps=args.eps)
        payload = {"schema": "gatescope.histogram/1", "eps": args.eps,
                   "roles": {h.role.value: {"edges": [float(e) for e in h.bin_edges],
                                            "counts": [int(c) for c in h.counts],
                                            "sampled": int(h.sampled), "total": int(h.total)}
                             for h in hists}}
        _write_text(args.histogram, _dump(payload))
        _progress(args, f"wrote {args.histogram}")
    if args.out is not None:
        _write_text(args.out, text)
        _progress(args, f"wrote {args.out}")
    else:
        _emit(text)
    return 0


def _write_result(args, ckpt: Checkpoint, reference: Checkpoint, kind: str) -> int:
    write_checkpoint(ckpt, args.out)
    changed = [n for n in reference.names() if ckpt.raw(n) != reference.raw(n)]
    info = {"schema": "gatescope.write/1", "command": kind, "output": str(args.out),
            "sha256": _file_sha256(args.out), "tensors": len(ckpt), "changed": changed}
    if args.format == "json":
        _emit(_dump(info))
    else:
        _emit(f"wrote {args.out} ({len(ckpt)} tensors, {len(changed)} changed)\n"
              + "".join(f"  {n}\n" for n in changed))
    return 0


def cmd_transplant(args) -> int:
    _require_inputs(args.base, args.donor)
    _require_outputs([args.base, args.donor], args.out)
    sel = parse_selection(args.modules, args.layers)
    scheme = _scheme(args)
    base = read_checkpoint(args.base)
    out = transplant(base, read_checkpoint(args.donor), sel, scheme)
    _progress(args, f"transplanting {sel.label()}")
    return _write_result(args, out, base, "transplant")


def cmd_merge_lora(args) -> int:
    _require_inputs(args.base, args.adapters)
    _require_outputs([args.base, args.adapters], args.out)
    sel = parse_selection(args.modules, args.layers)
    scheme = _scheme(args)
    base = read_checkpoint(args.base)
    out = selective_load(base, read_adapters(args.adapters, scheme), sel, scheme,
                         by_rank=not args.no_rank_scaling)
    _progress(args, f"merged adapters into {sel.label()}")
    return _write_result(args, out, base, "merge-lora")


def _load_model(args) -> ToyModel:
    if args.model is not None:
        return ToyModel.from_checkpoint(read_checkpoint(args.model))
    return init_model(_toy_config(args))


def _experiment(args, model: ToyModel, modules: str) -> GetExperiment:
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr,
                      optimizer=args.optimizer, seed=args.seed)
    return GetExperiment(model=model.cfg, train=cfg, modules=modules, layers=args.layers, rank=args.rank,
                         alpha=args.alpha, seq_len=args.seq_len, n_train=args.n_train, n_eval=args.n_eval,
                         data_seed=args.data_seed, eval_seed=args.eval_seed)


def cmd_train(args) -> int:
    _require_inputs(args.model)
    _require_outputs([args.model], args.trace, args.adapters)
    model = _load_model(args)
    exp = _experiment(args, model, args.modules)
    plan = build_get_plan(model, exp.selection(), exp.rank, exp.alpha, seed=exp.train.seed)
    data, held_out = exp.datasets()
    _progress(args, f"training {len(plan.adapters)} adapters on {exp.selection().label()} "
                    f"for {exp.train.steps} steps")
    trace = train(model, plan, data, exp.train, held_out,
                  progress=lambda step, loss: _progress(args, f"step {step} loss {loss:.6f}"))
    if args.trace is not None:
        _write_text(args.trace, trace.csv())
    if args.adapters is not None:
        write_adapters(trace.adapters, args.adapters)
    summary = {"schema": "gatescope.train/1", "selection": exp.selection().label(),
               "trainable_fraction": float(trainable_fraction_exact(toy_dims(model.cfg), exp.selection(), exp.rank)),
               "config": {"train": asdict(exp.train), "model": asdict(model.cfg), "rank": exp.rank,
                          "alpha": exp.alpha, "seq_len": exp.seq_len, "n_train": exp.n_train,
                          "n_eval": exp.n_eval, "data_seed": exp.data_seed, "eval_seed": exp.eval_seed},
               **trace.summary()}
    if args.format == "json":
        _emit(_dump(summary))
    else:
        _emit("".join(f"{k}: {summary[k]!r}\n" if isinstance(summary[k], float) else f"{k}: {summary[k]}\n"
                      for k in ("selection", "steps", "initial_loss", "final_loss", "eval_accuracy",
                                "trainable_fraction", "base_digest")))
    return 0


def cmd_compare(args) -> int:
    _require_inputs(args.model)
    model = _load_model(args)
    specs = args.select or ["control", "gate", "up", "down", "att", "all"]
    selections = [CONTROL if s == "control" else parse_selection(s, args.layers) for s in specs]
    exp = _experiment(args, model, "gate")
    data, held_out = exp.datasets()
    _progress(args, f"comparing {len(selections)} selections on {_threads(args)} threads")
    rows = compare_selections(model, selections, data, exp.train, held_out, exp.rank, exp.alpha,
                              threads=_threads(args))
    _emit(comparison_json(rows) if args.format == "json" else comparison_csv(rows))
    return 0


def _read_dims(spec: str) -> dict:
    if spec.lower() in DIMS_PRESETS:
        return DIMS_PRESETS[spec.lower()]
    path = Path(spec)
    _require_inputs(path)
    try:
        raw = json.loads(path.read_text())
        return {ModuleRole.parse(k): (int(v[0]), int(v[1])) for k, v in raw.items()}
    except (json.JSONDecodeError, AttributeError, TypeError, IndexError, ValueError) as exc:
        raise FormatError(f"{path}: expected a JSON object role -> [d_in, d_out] ({exc})") from None


def cmd_param_fraction(args) -> int:
    _require_inputs(args.model)
    if args.model is not None:
        dims, source = toy_dims(ToyModel.from_checkpoint(read_checkpoint(args.model)).cfg), str(args.model)
    elif args.dims == "toy":
        dims, source = toy_dims(_toy_config(args)), "toy"
    else:
        dims, source = _read_dims(args.dims), args.dims
    sel = parse_selection(args.modules, args.layers)
    frac = trainable_fraction_exact(dims, sel, args.rank)
    selected, total = lora_params(dims, sel.roles, args.rank), lora_params(dims, ROLE_ORDER, args.rank)
    if args.format == "json":
        _emit(_dump({"schema": "gatescope.fraction/1", "dims": source, "selection": sel.label(),
                     "rank": args.rank, "selected_params_per_layer": selected,
                     "total_params_per_layer": total, "numerator": frac.numerator,
                     "denominator": frac.denominator, "fraction": float(frac)}))
    else:
        _emit(f"{float(frac)!r} ({selected}/{total} per layer at rank {args.rank}; exact {frac})\n")
    return 0


def cmd_report(args) -> int:
    _require_inputs(*args.reports)
    _require_outputs(list(args.reports), args.svg)
    stat = Statistic(args.statistic)
    agg = Aggregation(args.aggregation)
    panels, out = [], []
    for path in args.reports:
        dm = DiffMatrix.from_records(read_report_csv(path), stat)
        if dm.is_empty():
            raise UsageError(f"{path}: no rankable cells")
        panels.append((path.stem, dm))
        out.append({"report": str(path), "layers": dm.layers,
                    "ranking": [[role.value, v] for role, v in rank_modules(dm, agg)]})
    if args.svg is not None:
        _write_text(args.svg, render_panels(panels, args.color_scale))
        _progress(args, f"wrote {args.svg}")
    if args.format == "json":
        _emit(_dump({"schema": "gatescope.report/1", "statistic": stat.value, "aggregation": agg.value,
                     "reports": out}))
    else:
        lines = []
        for item in out:
            lines.append(f"{item['report']} ({stat.value}, {agg.value} over {item['layers']} layers)")
            lines.extend(f"  {i}. {role:<10} {v!r}" for i, (role, v) in enumerate(item["ranking"], 1))
        _emit("\n".join(lines) + "\n")
    return 0


def cmd_init_toy(args) -> int:
    _require_outputs([], args.out)
    model = init_model(_toy_config(args))
    ckpt = model.to_checkpoint()
    write_checkpoint(ckpt, args.out)
    info = {"schema": "gatescope.write/1", "command": "init-toy", "output": str(args.out),
            "sha256": _file_sha256(args.out), "tensors": len(ckpt), "changed": []}
    _emit(_dump(info) if args.format == "json" else f"wrote {args.out} ({len(ckpt)} tensors)\n")
    return 0


def cmd_synth_pair(args) -> int:
    _require_outputs([], args.base_out, args.adapted_out)
    base, adapted = localization_pair(_toy_config(args), args.gate_sigma, args.other_sigma, args.noise_seed)
    write_checkpoint(base, args.base_out)
    write_checkpoint(adapted, args.adapted_out)
    info = {"schema": "gatescope.synth/1", "base": str(args.base_out), "adapted": str(args.adapted_out),
            "base_sha256": _file_sha256(args.base_out), "adapted_sha256": _file_sha256(args.adapted_out)}
    _emit(_dump(info) if args.format == "json" else f"wrote {args.base_out} and {args.adapted_out}\n")
    return 0


COMMANDS = {
    "diff": cmd_diff, "transplant": cmd_transplant, "merge-lora": cmd_merge_lora, "load-lora": cmd_merge_lora,
    "train": cmd_train, "compare": cmd_compare, "param-fraction": cmd_param_fraction, "report": cmd_report,
    "init-toy": cmd_init_toy, "synth-pair": cmd_synth_pair,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, stream=sys.stderr,
                        format="gatescope: %(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except GatescopeError as exc:
        print(f"gatescope: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"gatescope: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
