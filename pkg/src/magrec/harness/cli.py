"""Command-line entry point: ``magrec <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 when every
AUC in the produced metrics is undefined.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from dataclasses import fields
from pathlib import Path

from magrec.dataset import NegativeSamplingWarning, ingest, prepare, read_split, write_records, write_split
from magrec.errors import ConfigError, ContractError, DataError
from magrec.graphbuild import REPRESENTATIONS, build_all
from magrec.harness import report as rpt
from magrec.harness.config import RunConfig, load_run_config
from magrec.harness.training import (ablation_run, build_data, evaluate, load_split, representation_sweep,
                                     synthetic_records, train)
from magrec.model import MagrecConfig, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NO_METRIC = 0, 2, 3, 4

# flags handled by hand rather than generated from config fields
_SPECIAL = {"synthetic", "use_rie", "use_gie", "use_dc", "representation", "n_items", "n_users", "n_domains", "model"}

log = logging.getLogger("magrec")


def _config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration (overrides --config)")
    group.add_argument("--config", help="key = value run config file")
    for f in [*fields(RunConfig), *fields(MagrecConfig)]:
        if f.name in _SPECIAL:
            continue
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar="V")
    group.add_argument("--synthetic", action="store_const", const="true", help="generate the synthetic benchmark log")
    group.add_argument("--repr", dest="representation", choices=REPRESENTATIONS)
    for branch in ("rie", "gie", "dc"):
        group.add_argument(f"--no-{branch}", dest=f"use_{branch}", action="store_const", const="false")


def _run_config(args: argparse.Namespace) -> RunConfig:
    keys = {f.name for f in fields(RunConfig)} | {f.name for f in fields(MagrecConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in keys and v is not None}
    run = load_run_config(args.config, overrides)
    run.validate()
    return run


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(rows, out: Path, name: str) -> None:
    rpt.write_csv(rows, out / f"{name}.csv")
    sys.stdout.write(rpt.format_table(rows))


# -- subcommands ---------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    run = _run_config(args)
    records = synthetic_records(run)
    write_records(records, args.out)
    print(f"wrote {len(records)} interactions to {args.out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    split = prepare(ingest(args.log), args.data_seed)
    write_split(split, args.out)
    sizes = ", ".join(f"{k}={len(v)}" for k, v in split.parts().items())
    print(f"wrote split to {args.out} ({sizes})")
    return EXIT_OK


def cmd_build_graphs(args) -> int:
    split = read_split(args.data_dir)
    samples = split.parts()[args.part]
    kept, graphs, dropped = build_all(samples, args.representation)
    out = _out_dir(args.out)
    with open(out / "edges.csv", "w", encoding="utf-8") as edges, open(out / "nodes.csv", "w", encoding="utf-8") as nodes:
        edges.write("sample,src_pos,trg_pos,src_dom,trg_dom\n")
        nodes.write("sample,pos,item,domain\n")
        for k, g in enumerate(graphs):
            for s, t in zip(g.src, g.trg):
                edges.write(f"{k},{g.positions[s]},{g.positions[t]},{g.nodes[s][1]},{g.nodes[t][1]}\n")
            for pos, (item, dom) in zip(g.positions, g.nodes):
                nodes.write(f"{k},{pos},{item},{dom}\n")
    print(f"{args.representation}: {len(kept)} graphs written to {out}, {dropped} samples dropped")
    return EXIT_OK


def cmd_train(args) -> int:
    from magrec import plotting

    run = _run_config(args)
    out = _out_dir(args.out)
    (out / "run.cfg").write_text(run.to_text(), encoding="utf-8")
    data = build_data(load_split(run), run.representation)
    result = train(run, data)
    save_checkpoint(result.model, out / "model.ckpt")
    reports = [("val/", result.best)]
    if len(data.test):
        reports.append(("test/", evaluate(result.model, data.test, run.model.batch_size, run.eval_workers, run.seed, result.best_epoch)))
    _emit(rpt.report_rows(reports), out, "metrics")
    rpt.write_history(result.history, result.train_loss, out / "history.csv")
    plotting.learning_curve(result.history, result.train_loss, out / "learning_curve.png", result.best_epoch)
    plotting.per_domain_bars(reports[-1][1], out / "per_domain.png", title=reports[-1][0].rstrip("/"))
    print(f"best epoch {result.best_epoch}; checkpoint {out / 'model.ckpt'}")
    return EXIT_NO_METRIC if all(r.all_auc_absent() for _, r in reports) else EXIT_OK


def cmd_eval(args) -> int:
    from magrec import plotting

    model = load_checkpoint(args.checkpoint)
    split = read_split(args.data_dir)
    data = build_data(split, args.representation)
    graphs = data.part(args.part)
    if len(graphs) == 0:
        raise DataError(f"split part {args.part!r} has no evaluable samples")
    report = evaluate(model, graphs, batch_size=args.batch_size, workers=args.workers)
    out = _out_dir(args.out)
    _emit(rpt.report_rows([(f"{args.part}/", report)]), out, "metrics")
    plotting.per_domain_bars(report, out / "per_domain.png", title=args.part)
    return EXIT_NO_METRIC if report.all_auc_absent() else EXIT_OK


def _table(rows, out: Path, name: str, title: str) -> int:
    from magrec import plotting

    reports = [(f"{r.label}/val/", r.validation) for r in rows]
    reports += [(f"{r.label}/test/", r.test) for r in rows if r.test is not None]
    _emit(rpt.report_rows(reports), out, name)
    plotting.comparison_bars([r.label for r in rows], [r.validation for r in rows], out / f"{name}.png", title)
    return EXIT_NO_METRIC if all(r.all_auc_absent() for _, r in reports) else EXIT_OK


def cmd_ablate(args) -> int:
    run = _run_config(args)
    return _table(ablation_run(run, baseline=args.baseline), _out_dir(args.out), "ablation", "branch ablation")


def cmd_sweep_repr(args) -> int:
    run = _run_config(args)
    return _table(representation_sweep(run, baseline=args.baseline), _out_dir(args.out), "sweep", "graph representation")


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magrec", description="Multi-domain graph CTR recommender.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic positive-only interaction log")
    _config_flags(p)
    p.add_argument("--out", required=True, help="output .csv or .jsonl path")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("prepare", help="negative-sample, window and split an interaction log")
    p.add_argument("--log", required=True, help="input .csv or .jsonl log")
    p.add_argument("--out", required=True, help="output split directory")
    p.add_argument("--data-seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("build-graphs", help="dump per-sample history graphs as CSV")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--repr", dest="representation", choices=REPRESENTATIONS, default="interacting")
    p.add_argument("--part", choices=("train", "val", "test"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graphs)

    for name, func, help_ in (("train", cmd_train, "train one model and report metrics"),
                              ("ablate", cmd_ablate, "train the six branch ablations"),
                              ("sweep-repr", cmd_sweep_repr, "train once per graph representation")):
        p = sub.add_parser(name, help=help_)
        _config_flags(p)
        p.add_argument("--out", required=True, help="output directory")
        if name != "train":
            p.add_argument("--baseline", action="store_true", help="add a mean-pooling reference row")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a checkpoint on a prepared split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--repr", dest="representation", choices=REPRESENTATIONS, default="interacting")
    p.add_argument("--part", choices=("train", "val", "test"), default="test")
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always", NegativeSamplingWarning)
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
