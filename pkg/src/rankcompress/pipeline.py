"""End-to-end compression pipeline: configuration, stage runners, ablations.

Every stage writes its checkpoint and continues from the float32 copy it
just wrote, so resuming from any saved stage reproduces the same
downstream results.
"""

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field

from . import compress, dataio, nn, persist, quantize, ranksel, regularizer
from .exceptions import ConfigError, FormatError, InvalidInputError, SearchFailure

logger = logging.getLogger(__name__)

RANK_UPDATE_MODES = ("once", "before_decomposition", "multiple")
LAMBDA_MODES = ("scheduled", "fixed")


@dataclass
class SearchSettings:
    c_d: float = 0.5
    tau: float = 0.02
    gamma: float = 0.5
    configs: list = field(default_factory=lambda: [list(c) for c in ranksel.DEFAULT_CONFIGS])
    single: list = None  # [s, k] to run one beam search instead of the three-way sweep
    val_subset: int = None
    seed: int = 0


@dataclass
class PipelineConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "mnist", "path": "data/mnist",
                                                   "val_size": 5000})
    hidden: list = field(default_factory=lambda: [256, 128])
    base: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(eta0=0.1, epochs=30))
    regularized: nn.TrainConfig = field(
        default_factory=lambda: nn.TrainConfig(eta0=0.1, epochs=60, seed=1))
    finetune: nn.TrainConfig = field(
        default_factory=lambda: nn.TrainConfig(eta0=0.01, epochs=30, seed=2))
    search: SearchSettings = field(default_factory=SearchSettings)
    schedule: regularizer.RegSchedule = field(default_factory=regularizer.RegSchedule)
    rank_update: str = "once"
    retarget_every: int = 30
    randomized_svd: bool = False
    bits: list = field(default_factory=lambda: [32, 16, 8, 4])
    out: str = "runs/default"
    seed: int = 0

    def validate(self):
        if not 0 < self.search.c_d < 1:
            raise ConfigError("c_d must lie in (0, 1)")
        if self.search.c_d - self.search.tau <= 0 or self.search.tau < 0:
            raise ConfigError("need tau >= 0 and c_d - tau > 0")
        if self.rank_update not in RANK_UPDATE_MODES:
            raise ConfigError(f"rank_update must be one of {RANK_UPDATE_MODES}")
        for b in self.bits:
            if b not in quantize.SUPPORTED_BITS:
                raise ConfigError(f"unsupported bit-width {b}")
        if self.dataset.get("kind") not in ("mnist", "synth", "checkpoint"):
            raise ConfigError(f"unknown dataset kind {self.dataset.get('kind')!r}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            for key, typ in (("base", nn.TrainConfig), ("regularized", nn.TrainConfig),
                             ("finetune", nn.TrainConfig), ("search", SearchSettings),
                             ("schedule", regularizer.RegSchedule)):
                if key in d and isinstance(d[key], dict):
                    d[key] = typ(**d[key])
            return cls(**d).validate()
        except (TypeError, InvalidInputError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    def with_seed(self, seed):
        """Copy with every phase seed derived from ``seed``."""
        c = dataclasses.replace(self, seed=seed)
        c.base = dataclasses.replace(self.base, seed=seed)
        c.regularized = dataclasses.replace(self.regularized, seed=seed + 1)
        c.finetune = dataclasses.replace(self.finetune, seed=seed + 2)
        c.search = dataclasses.replace(self.search, seed=seed)
        return c


def load_dataset(spec):
    kind = spec.get("kind")
    try:
        if kind == "mnist":
            path = spec.get("path")
            if not path or not os.path.isdir(path):
                raise ConfigError(f"MNIST directory not found: {path!r}")
            return dataio.load_mnist(path, spec.get("val_size", 5000), spec.get("split_seed", 0))
        if kind == "synth":
            ds = dataio.synth_blobs(spec.get("classes", 3), spec.get("per_class", 100),
                                    spec.get("d", 8), spec.get("seed", 0),
                                    spec.get("separation", 6.0))
            return dataio.split(ds, spec.get("fractions", (0.6, 0.2, 0.2)),
                                spec.get("split_seed", 0))
        if kind == "checkpoint":
            path = spec.get("path")
            if not path or not os.path.isdir(path):
                raise ConfigError(f"dataset checkpoint not found: {path!r}")
            return persist.load(path)
    except FormatError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _meta(cfg, ds, **extra):
    # the output location is left out so reruns elsewhere give identical manifests
    config = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    return {"config": config, "dataset_fingerprint": ds.fingerprint(), "seed": cfg.seed,
            **extra}


def _checkpoint(model, path, stage, meta):
    persist.save_model(model, path, stage=stage, meta=meta)
    return persist.load(path)


def run_train(cfg, ds, out=None):
    sizes = [ds.n_features, *cfg.hidden, ds.classes]
    model = nn.init_mlp(sizes, seed=cfg.base.seed)
    model, log = nn.train(model, ds, cfg.base)
    if out:
        model = _checkpoint(model, os.path.join(out, "trained"), "trained", _meta(cfg, ds))
        nn.write_log_csv(os.path.join(out, "train_log.csv"), log)
    return model, log


def run_select(cfg, model, ds, out=None, baseline=None):
    """Pick target ranks. Returns the winning ``SearchResult``."""
    s = cfg.search
    shapes = compress.shapes_of(model)
    cache = ranksel.factor_cache(model)
    if s.single:
        step, k = s.single
        res = ranksel.mbs_search(model, ds, shapes, ranksel.SearchConfig(
            c_d=s.c_d, tau=s.tau, k=k, s=step, gamma=s.gamma, seed=s.seed,
            val_subset=s.val_subset), cache=cache)
    else:
        res, _ = ranksel.multi_config_search(
            model, ds, shapes, s.c_d, s.tau, [tuple(c) for c in s.configs], s.gamma, s.seed,
            s.val_subset, cache=cache)
    if out:
        persist.save_ranks(res.ranks, os.path.join(out, "ranks"),
                           meta=_meta(cfg, ds, accuracy=res.best.a, ratio=res.best.c,
                                      search_config=list(res.config)))
        ranksel.write_trace_csv(os.path.join(out, "search_trace.csv"), res.trace)
    if baseline == "energy":
        x, y = ds.subset("val")
        ev = ranksel.TruncationEvaluator(model, cache, x, y)
        en = ranksel.energy_baseline(cache, shapes, s.c_d, s.tau)
        rows = [("mbs", res.ranks, res.best.c, res.best.a, True),
                ("energy", en.ranks, en.ratio, ev(en.ranks), en.in_band)]
        if out:
            with open(os.path.join(out, "baseline_compare.csv"), "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["method", "ranks", "compression_ratio", "val_accuracy", "in_band"])
                for name, r, c, a, ok in rows:
                    w.writerow([name, ";".join(map(str, r)), f"{c:.6f}", f"{a:.6f}", int(ok)])
        res.baseline = rows
    return res


def _search_ranks(cfg, model, ds):
    return run_select(cfg, model, ds).ranks


def run_regularize(cfg, model, ranks, ds, out=None, lambda_mode="scheduled", rank_update=None):
    """Retrain under the rank penalty. Returns ``(model, log, penalty)``."""
    if lambda_mode not in LAMBDA_MODES:
        raise ConfigError(f"lambda mode must be one of {LAMBDA_MODES}")
    rank_update = rank_update or cfg.rank_update
    schedule = dataclasses.replace(cfg.schedule, scheduled=(lambda_mode == "scheduled"))
    total = cfg.regularized.epochs

    def retarget(m, epoch):
        # no re-selection after the last epoch: the final targets are already fixed
        if epoch + 1 >= total:
            return None
        return _search_ranks(cfg, m, ds)

    penalty = regularizer.MsrPenalty(ranks, schedule, randomized=cfg.randomized_svd,
                                     seed=cfg.seed,
                                     retarget=retarget if rank_update == "multiple" else None,
                                     retarget_every=cfg.retarget_every)
    model, log = nn.train(model, ds, cfg.regularized, penalty=penalty)
    final_ranks = penalty.targets
    if rank_update == "before_decomposition":
        final_ranks = _search_ranks(cfg, model, ds)
    penalty.final_ranks = tuple(final_ranks)
    if out:
        model = _checkpoint(model, os.path.join(out, "regularized"), "regularized",
                            _meta(cfg, ds, targets=list(ranks), final_ranks=list(final_ranks),
                                  rank_history=[list(h) for h in penalty.history],
                                  lambda_mode=lambda_mode, rank_update=rank_update))
        nn.write_log_csv(os.path.join(out, "regularize_log.csv"), log)
        if tuple(final_ranks) != tuple(ranks):
            persist.save_ranks(final_ranks, os.path.join(out, "ranks_final"),
                               meta=_meta(cfg, ds))
    return model, log, penalty


def run_compress(cfg, model, ranks, ds, out=None, accuracy_before=None):
    """Factorize at ``ranks``; returns ``(factorized_model, report)``."""
    fact = compress.factorize_model(model, ranks)
    acc_after = nn.evaluate_accuracy(fact, ds, "test")
    if accuracy_before is None:
        accuracy_before = nn.evaluate_accuracy(model, ds, "test")
    report = compress.build_report(model, ranks, accuracy_before, acc_after,
                                   cfg.search.c_d, cfg.search.tau,
                                   extra={"stage": "factorized", "config": _meta(cfg, ds)["config"]})
    if out:
        fact = _checkpoint(fact, os.path.join(out, "factorized"), "factorized",
                           _meta(cfg, ds, ranks=list(ranks)))
        _write_report(report, out, "report_factorized")
    return fact, report


def _write_report(report, out, stem):
    with open(os.path.join(out, stem + ".json"), "w") as f:
        f.write(report.to_json())
    report.write_csv(os.path.join(out, stem + ".csv"))


def run_finetune(cfg, model, ds, out=None):
    model, log = compress.finetune(model, ds, cfg.finetune)
    if out:
        model = _checkpoint(model, os.path.join(out, "finetuned"), "finetuned", _meta(cfg, ds))
        nn.write_log_csv(os.path.join(out, "finetune_log.csv"), log)
    return model, log


def run_quantize(cfg, model, ds, out=None, label="model"):
    rows = quantize.quantization_table([(label, model)], ds, cfg.bits)
    if out:
        for b in cfg.bits:
            q, rep = quantize.quantize_model(model, b)
            persist.save_model(q, os.path.join(out, f"quantized_{b}"), stage="quantized",
                               meta=_meta(cfg, ds, bits=b, scheme=quantize.SCHEME,
                                          memory_mb=rep.mb))
        quantize.write_table_csv(os.path.join(out, "quantization.csv"), rows, cfg.bits)
    return rows


@dataclass
class BsrResult:
    base: nn.Model
    ranks: tuple
    regularized: nn.Model
    final: nn.Model
    report: compress.CompressionReport
    search: ranksel.SearchResult
    quant_rows: list
    timings: dict


def run_bsr(cfg, ds=None, base=None, out=None, lambda_mode="scheduled", rank_update=None,
            search=None):
    """Train (unless ``base`` given), select ranks, regularize, factorize, fine-tune, quantize."""
    cfg = cfg.validate()
    out = out if out is not None else cfg.out
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.json"), "w") as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
    ds = ds if ds is not None else load_dataset(cfg.dataset)
    timings = {}
    t = time.perf_counter()
    if base is None:
        base, _ = run_train(cfg, ds, out)
    elif out:
        base = _checkpoint(base, os.path.join(out, "trained"), "trained", _meta(cfg, ds))
    timings["train"] = time.perf_counter() - t
    acc_base = nn.evaluate_accuracy(base, ds, "test")
    t = time.perf_counter()
    if search is None:
        search = run_select(cfg, base, ds, out)
    elif out:
        persist.save_ranks(search.ranks, os.path.join(out, "ranks"), meta=_meta(cfg, ds))
        ranksel.write_trace_csv(os.path.join(out, "search_trace.csv"), search.trace)
    timings["select"] = time.perf_counter() - t
    t = time.perf_counter()
    reg, _, penalty = run_regularize(cfg, base, search.ranks, ds, out, lambda_mode, rank_update)
    timings["regularize"] = time.perf_counter() - t
    ranks = penalty.final_ranks
    t = time.perf_counter()
    fact, _ = run_compress(cfg, reg, ranks, ds, out, accuracy_before=acc_base)
    final, _ = run_finetune(cfg, fact, ds, out)
    timings["compress_finetune"] = time.perf_counter() - t
    acc_final = nn.evaluate_accuracy(final, ds, "test")
    report = compress.build_report(
        base, ranks, acc_base, acc_final, cfg.search.c_d, cfg.search.tau,
        extra={"config": _meta(cfg, ds)["config"], "search_accuracy": search.best.a,
               "regularized_msr": regularizer.msr_report(reg, ranks),
               "quantization_scheme": quantize.SCHEME},
    )
    quant_rows = run_quantize(cfg, final, ds, out, label=f"c_d={cfg.search.c_d}")
    if out:
        _write_report(report, out, "report")
        persist.save_report(report, os.path.join(out, "report_ckpt"), stage="finetuned")
        with open(os.path.join(out, "timings.json"), "w") as f:
            json.dump(timings, f, indent=2, sort_keys=True)
    return BsrResult(base, ranks, reg, final, report, search, quant_rows, timings)


def write_curve_csv(path, results):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["c_d", "ratio", "acc_before", "acc_after", "mflops_before", "mflops_after",
                    "mem32", "mem16", "mem8", "mem4"])
        for rep in results:
            w.writerow([rep.c_d, f"{rep.ratio:.6f}", f"{rep.accuracy_before:.6f}",
                        f"{rep.accuracy_after:.6f}", f"{rep.flops_before / 1e6:.6f}",
                        f"{rep.flops_after / 1e6:.6f}"]
                       + [f"{rep.memory_mb[b]:.6f}" for b in compress.BIT_WIDTHS])


def run_ablation(cfg, experiment, seeds=(0, 1, 2), out=None, ds=None, values=None):
    """Paired experiments; returns a list of row dicts (also written as CSV).

    ``rank-update``: final accuracy for each rank-update mode.
    ``lambda``: scheduled vs fixed penalty strength.
    ``step``: truncated accuracy of the search result as the step size varies (k=1).
    ``beam``: same, varying beam size at step ``values['step']`` (default 1).
    """
    ds = ds if ds is not None else load_dataset(cfg.dataset)
    rows = []
    for seed in seeds:
        c = cfg.with_seed(seed)
        base, _ = run_train(c, ds)
        if experiment in ("rank-update", "lambda"):
            search = run_select(c, base, ds)
            if experiment == "rank-update":
                variants = [("rank_update", m, "scheduled", m) for m in RANK_UPDATE_MODES]
            else:
                variants = [("lambda_mode", m, m, "once") for m in LAMBDA_MODES]
            for key, label, lam_mode, mode in variants:
                res = run_bsr(c, ds, base=base, out="", lambda_mode=lam_mode, rank_update=mode,
                              search=search)
                rows.append({"seed": seed, key: label, "ranks": ";".join(map(str, res.ranks)),
                             "ratio": res.report.ratio, "acc_base": res.report.accuracy_before,
                             "acc_final": res.report.accuracy_after,
                             "msr": ";".join(f"{v:.6g}" for v in
                                             regularizer.msr_report(res.regularized, res.ranks))})
        elif experiment in ("step", "beam"):
            shapes = compress.shapes_of(base)
            cache = ranksel.factor_cache(base)
            opts = values or {}
            grid = opts.get("grid", [1, 3, 5, 10] if experiment == "step" else [1, 3, 5, 10])
            for v in grid:
                s, k = (v, 1) if experiment == "step" else (opts.get("step", 1), v)
                t = time.perf_counter()
                sc = ranksel.SearchConfig(c_d=c.search.c_d, tau=c.search.tau, k=k, s=s,
                                          gamma=c.search.gamma, seed=seed,
                                          val_subset=c.search.val_subset)
                try:
                    res = ranksel.mbs_search(base, ds, shapes, sc, cache=cache)
                    r, ok = res.ranks, True
                except SearchFailure as exc:
                    r, ok = exc.best.r, False
                x, y = ds.subset("test")
                acc = ranksel.TruncationEvaluator(base, cache, x, y)(r)
                rows.append({"seed": seed, "s": s, "k": k, "ranks": ";".join(map(str, r)),
                             "ratio": compress.compression_ratio(shapes, r), "test_acc": acc,
                             "success": ok, "seconds": time.perf_counter() - t})
        else:
            raise ConfigError(f"unknown ablation experiment {experiment!r}")
    if out:
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, f"ablation_{experiment}.csv")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows
