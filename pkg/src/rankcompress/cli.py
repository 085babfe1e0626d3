"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 the compression constraint could not be met.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import nn, persist, pipeline, quantize, regularizer
from .exceptions import ConfigError, FormatError, InvalidInputError, SearchFailure

log = logging.getLogger("rankcompress")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_SEARCH = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _ranks_arg(text):
    try:
        return tuple(int(v) for v in text.replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad rank vector {text!r}") from None


def build_parser():
    p = _Parser(prog="rankcompress", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config; flags override it")
    common.add_argument("--data", help="MNIST directory (IDX files)")
    common.add_argument("--dataset-checkpoint", help="saved dataset checkpoint instead of MNIST")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--cd", type=float, help="desired compression ratio")
    common.add_argument("--tau", type=float, help="band width below --cd")
    common.add_argument("--beam", type=int, help="beam size K (with --step: single search)")
    common.add_argument("--step", type=int, help="level step size s (with --beam: single search)")
    common.add_argument("--gamma", type=float)
    common.add_argument("--lambda0", type=float)
    common.add_argument("--growth", type=float)
    common.add_argument("--epochs", type=int, help="override the epoch count of this stage")
    common.add_argument("--bits", type=int, nargs="+")
    common.add_argument("-v", "--verbose", action="store_true")

    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train the dense base model")

    sp = sub.add_parser("select-rank", parents=[common], help="beam-search a rank vector")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--baseline", choices=["energy"])

    sp = sub.add_parser("regularize", parents=[common], help="retrain under the rank penalty")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ranks", required=True, help="rank checkpoint dir or comma list")
    sp.add_argument("--lambda-mode", choices=pipeline.LAMBDA_MODES, default="scheduled")
    sp.add_argument("--rank-update", choices=pipeline.RANK_UPDATE_MODES)

    sp = sub.add_parser("compress", parents=[common], help="factorize at a rank vector")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ranks", required=True)

    for name, desc in (("finetune", "fine-tune a (factorized) model"),
                       ("evaluate", "test accuracy of a checkpoint"),
                       ("quantize", "accuracy and memory per bit-width")):
        sp = sub.add_parser(name, parents=[common], help=desc)
        sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("bsr", parents=[common], help="full pipeline, one curve row per --cd")
    sp.add_argument("--sweep", type=float, nargs="+", help="several c_d values")
    sp.add_argument("--checkpoint", help="reuse a trained base model")

    sp = sub.add_parser("ablate", parents=[common], help="paired ablation experiments")
    sp.add_argument("experiment", choices=["rank-update", "lambda", "step", "beam"])
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return p


def resolve_config(args):
    cfg = pipeline.PipelineConfig.from_file(args.config) if args.config else \
        pipeline.PipelineConfig()
    if args.data:
        cfg.dataset = {**cfg.dataset, "kind": "mnist", "path": args.data}
    if args.dataset_checkpoint:
        cfg.dataset = {"kind": "checkpoint", "path": args.dataset_checkpoint}
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg.out = args.out
    try:
        s = cfg.search
        s = dataclasses.replace(
            s,
            c_d=args.cd if args.cd is not None else s.c_d,
            tau=args.tau if args.tau is not None else s.tau,
            gamma=args.gamma if args.gamma is not None else s.gamma,
        )
        if args.beam is not None or args.step is not None:
            s.single = [args.step or 3, args.beam or 5]
        cfg.search = s
        if args.lambda0 is not None or args.growth is not None:
            cfg.schedule = dataclasses.replace(
                cfg.schedule,
                lambda0=args.lambda0 if args.lambda0 is not None else cfg.schedule.lambda0,
                growth=args.growth if args.growth is not None else cfg.schedule.growth,
            )
        if args.bits:
            cfg.bits = list(args.bits)
        if args.epochs is not None:
            phase = {"train": "base", "regularize": "regularized",
                     "finetune": "finetune"}.get(args.command)
            if phase is None:
                raise ConfigError(f"--epochs does not apply to {args.command}")
            setattr(cfg, phase, dataclasses.replace(getattr(cfg, phase), epochs=args.epochs))
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def _load_ranks(text):
    if os.path.isdir(text):
        return persist.load(text)
    return _ranks_arg(text)


def _load_model(path):
    if not os.path.isdir(path):
        raise ConfigError(f"checkpoint not found: {path}")
    obj = persist.load(path)
    if not isinstance(obj, nn.Model):
        raise ConfigError(f"{path} is not a model checkpoint")
    return obj


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _run(args):
    cfg = resolve_config(args)
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    cmd = args.command
    if cmd == "ablate":
        rows = pipeline.run_ablation(cfg, args.experiment, tuple(args.seeds), out)
        _emit({"rows": len(rows), "csv": os.path.join(out, f"ablation_{args.experiment}.csv")})
        return
    ds = pipeline.load_dataset(cfg.dataset)
    if cmd == "train":
        model, tlog = pipeline.run_train(cfg, ds, out)
        _emit({"checkpoint": os.path.join(out, "trained"), "val_accuracy": tlog[-1].val_acc
               if tlog else nn.evaluate_accuracy(model, ds, "val")})
    elif cmd == "select-rank":
        res = pipeline.run_select(cfg, _load_model(args.checkpoint), ds, out, args.baseline)
        _emit({"ranks": list(res.ranks), "ratio": res.best.c, "val_accuracy": res.best.a,
               "config": list(res.config), "checkpoint": os.path.join(out, "ranks")})
    elif cmd == "regularize":
        model = _load_model(args.checkpoint)
        ranks = _load_ranks(args.ranks)
        reg, _, pen = pipeline.run_regularize(cfg, model, ranks, ds, out, args.lambda_mode,
                                              args.rank_update)
        _emit({"checkpoint": os.path.join(out, "regularized"),
               "msr": regularizer.msr_report(reg, pen.final_ranks),
               "final_ranks": list(pen.final_ranks)})
    elif cmd == "compress":
        _, report = pipeline.run_compress(cfg, _load_model(args.checkpoint),
                                          _load_ranks(args.ranks), ds, out)
        _emit(json.loads(report.to_json()) | {"extra": {}})
    elif cmd == "finetune":
        model, _ = pipeline.run_finetune(cfg, _load_model(args.checkpoint), ds, out)
        _emit({"checkpoint": os.path.join(out, "finetuned"),
               "test_accuracy": nn.evaluate_accuracy(model, ds, "test")})
    elif cmd == "evaluate":
        model = _load_model(args.checkpoint)
        result = {s: nn.evaluate_accuracy(model, ds, s) for s in ds.splits}
        with open(os.path.join(out, "evaluation.json"), "w") as f:
            json.dump(result, f, indent=2, sort_keys=True)
        _emit(result)
    elif cmd == "quantize":
        rows = pipeline.run_quantize(cfg, _load_model(args.checkpoint), ds, out,
                                     label=os.path.basename(os.path.normpath(args.checkpoint)))
        _emit({str(b): {"accuracy": a, "memory_mb": mb}
               for b, (a, mb) in rows[0][1].items()} | {"scheme": quantize.SCHEME})
    elif cmd == "bsr":
        base = _load_model(args.checkpoint) if args.checkpoint else None
        reports = []
        for c_d in args.sweep or [cfg.search.c_d]:
            c = dataclasses.replace(cfg, search=dataclasses.replace(cfg.search, c_d=c_d))
            sub = os.path.join(out, f"cd_{c_d:g}") if args.sweep else out
            res = pipeline.run_bsr(c.validate(), ds, base=base, out=sub)
            base = res.base
            reports.append(res.report)
        pipeline.write_curve_csv(os.path.join(out, "curve.csv"), reports)
        _emit([{"c_d": r.c_d, "ranks": r.ranks, "ratio": r.ratio,
                "accuracy_before": r.accuracy_before, "accuracy_after": r.accuracy_after}
               for r in reports])


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _run(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SearchFailure as exc:
        print(f"search failed: {exc}", file=sys.stderr)
        return EXIT_SEARCH
    except (FormatError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
