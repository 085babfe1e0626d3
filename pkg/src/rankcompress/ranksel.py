"""Rank-vector selection: beam search over truncations plus baselines.

The search space is the set of per-layer rank vectors. Each beam level
lowers one layer's rank by the current step size, discards children that
compress past the target ratio, and keeps the ``k`` most accurate
children (accuracy desc, rank sum asc, seeded tag asc).
"""

import csv
import hashlib
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .compress import check_ranks, compression_ratio, full_ranks
from .exceptions import InvalidInputError, SearchFailure
from .linalg import svd_full

logger = logging.getLogger(__name__)

DEFAULT_CONFIGS = ((3, 5), (5, 5), (10, 5))


@dataclass(frozen=True)
class SearchConfig:
    c_d: float
    tau: float = 0.02
    k: int = 5
    s: int = 3
    gamma: float = 0.5
    seed: int = 0
    val_subset: int = None

    def __post_init__(self):
        if not 0 < self.c_d < 1:
            raise InvalidInputError("c_d must lie in (0, 1)")
        if self.tau < 0 or self.c_d - self.tau <= 0:
            raise InvalidInputError("need tau >= 0 and c_d - tau > 0")
        if self.k < 1 or self.s < 1:
            raise InvalidInputError("beam size k and step s must be >= 1")
        if not 0 < self.gamma < 1:
            raise InvalidInputError("gamma must lie in (0, 1)")


@dataclass(frozen=True)
class BeamCandidate:
    r: tuple
    c: float
    a: float
    tag: int = 0

    def key(self):
        return (-self.a, sum(self.r), self.tag)


@dataclass
class TraceRow:
    level: int
    step: int
    r: tuple
    c: float
    a: float
    in_beam: bool


@dataclass
class SearchResult:
    best: BeamCandidate
    trace: list = field(default_factory=list)
    levels: int = 0
    config: tuple = None

    @property
    def ranks(self):
        return self.best.r


def tie_tag(seed, r):
    """Deterministic pseudo-random tag for ``r``; independent of visit order."""
    h = hashlib.blake2b(digest_size=8)
    h.update(np.asarray([seed, *r], dtype="<i8").tobytes())
    return int.from_bytes(h.digest(), "little")


def factor_cache(model):
    """One SVD per layer of the frozen base model."""
    return [svd_full(layer.weight()) for layer in model.layers]


class TruncationEvaluator:
    """Accuracy of the base network with every layer cut to rank ``r_l``.

    Truncated layers are applied in factored form. Results are memoized
    per rank vector; the base model is never modified.
    """

    def __init__(self, model, cache, x, y):
        self.biases = [layer.bias for layer in model.layers]
        self.acts = [layer.activation for layer in model.layers]
        self.us = [f.u * f.sigma for f in cache]
        self.vs = [f.v for f in cache]
        self.full = tuple(f.rank for f in cache)
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y)
        if len(self.y) == 0:
            raise InvalidInputError("empty evaluation set")
        self.memo = {}
        self.calls = 0

    def __call__(self, r):
        r = tuple(int(v) for v in r)
        if r in self.memo:
            return self.memo[r]
        if len(r) != len(self.full) or any(not 1 <= a <= b for a, b in zip(r, self.full)):
            raise InvalidInputError(f"rank vector {r} invalid for full ranks {self.full}")
        h = self.x
        for k, rl in enumerate(r):
            h = (h @ self.vs[k][:, :rl]) @ self.us[k][:, :rl].T + self.biases[k]
            if self.acts[k] == "relu":
                h = np.maximum(h, 0.0)
        acc = float(np.mean(h.argmax(axis=1) == self.y))
        self.memo[r] = acc
        self.calls += 1
        return acc


def _val_data(dataset, val_subset=None, seed=0):
    x, y = dataset.subset("val")
    if val_subset is not None and val_subset < len(y):
        idx = np.sort(np.random.default_rng(seed).choice(len(y), val_subset, replace=False))
        x, y = x[idx], y[idx]
    return x, y


def truncated_accuracy(base_model, cache, r, dataset, split="val"):
    """Validation accuracy of ``base_model`` truncated to rank vector ``r``."""
    x, y = dataset.subset(split)
    return TruncationEvaluator(base_model, cache, x, y)(r)


def descendants(r, s):
    """Children of ``r``: one per layer with that rank lowered by ``s`` (floor 1)."""
    if s < 1:
        raise InvalidInputError("step s must be >= 1")
    out = []
    seen = set()
    for i, ri in enumerate(r):
        if ri <= 1:
            continue
        child = tuple(r[:i]) + (max(1, ri - s),) + tuple(r[i + 1:])
        if child not in seen:
            seen.add(child)
            out.append(child)
    return out


def _in_band(c, c_d, tau):
    return c_d - tau <= c <= c_d


def beam_search(shapes, evaluate, config):
    """Core beam search on an accuracy callable; see ``mbs_search``."""
    r_full = full_ranks(shapes)
    c_d, tau = config.c_d, config.tau
    ones = tuple(1 for _ in shapes)
    start = BeamCandidate(r_full, compression_ratio(shapes, r_full), evaluate(r_full),
                          tie_tag(config.seed, r_full))
    trace = [TraceRow(1, config.s, r_full, start.c, start.a, True)]
    if compression_ratio(shapes, ones) < c_d - tau:
        raise SearchFailure(
            f"target band [{c_d - tau:.4g}, {c_d:.4g}] unreachable; maximum ratio is "
            f"{compression_ratio(shapes, ones):.4g}", best=start, trace=trace,
        )
    beam = [start]
    banded = None
    s = config.s
    level = 1
    while True:
        candidates = {}
        for parent in beam:
            for child in descendants(parent.r, s):
                if child in candidates:
                    continue
                c = compression_ratio(shapes, child)
                if c > c_d:
                    continue
                candidates[child] = BeamCandidate(child, c, evaluate(child),
                                                  tie_tag(config.seed, child))
        if not candidates:
            if s == 1:
                raise SearchFailure(
                    f"beam stuck at level {level} with step 1; best ratio {beam[0].c:.4g}",
                    best=banded or beam[0], trace=trace,
                )
            s = max(1, int(config.gamma * s))
            logger.debug("no admissible descendants, step shrunk to %d", s)
            continue
        level += 1
        beam = sorted(candidates.values(), key=BeamCandidate.key)[: config.k]
        chosen = {cand.r for cand in beam}
        for cand in candidates.values():
            trace.append(TraceRow(level, s, cand.r, cand.c, cand.a, cand.r in chosen))
        if _in_band(beam[0].c, c_d, tau):
            return SearchResult(beam[0], trace, level, (config.s, config.k))
        for cand in beam:
            if _in_band(cand.c, c_d, tau) and (banded is None or cand.key() < banded.key()):
                banded = cand


def mbs_search(base_model, dataset, shapes, config, cache=None):
    """Beam search for the most accurate rank vector with ratio in [c_d - tau, c_d].

    Raises ``SearchFailure`` (carrying the best candidate and trace) when
    the band is unreachable or the beam cannot move even at step 1.
    """
    if cache is None:
        cache = factor_cache(base_model)
    x, y = _val_data(dataset, config.val_subset, config.seed)
    evaluate = TruncationEvaluator(base_model, cache, x, y)
    return beam_search(shapes, evaluate, config)


def greedy_search(base_model, dataset, shapes, c_d, tau, seed=0, cache=None):
    """Lower one rank by one per step, always taking the most accurate admissible move.

    Ties go to the smaller rank sum, then to the same seeded tag the beam
    search uses. Returns ``(candidate, path)``.
    """
    if cache is None:
        cache = factor_cache(base_model)
    x, y = _val_data(dataset)
    evaluate = TruncationEvaluator(base_model, cache, x, y)
    r = full_ranks(shapes)
    path = [r]
    while True:
        c = compression_ratio(shapes, r)
        if _in_band(c, c_d, tau):
            return BeamCandidate(r, c, evaluate(r), tie_tag(seed, r)), path
        best = None
        for i in range(len(r)):
            if r[i] == 1:
                continue
            child = r[:i] + (r[i] - 1,) + r[i + 1:]
            cc = compression_ratio(shapes, child)
            if cc > c_d:
                continue
            key = (-evaluate(child), sum(child), tie_tag(seed, child))
            if best is None or key < best[0]:
                best = (key, child)
        if best is None:
            raise SearchFailure("greedy search cannot move", best=BeamCandidate(r, c, evaluate(r)))
        r = best[1]
        path.append(r)


def multi_config_beam(shapes, evaluate, c_d, tau, configs=DEFAULT_CONFIGS, gamma=0.5, seed=0):
    """``multi_config_search`` on an accuracy callable."""
    results = {}
    winner = None
    for order, (s, k) in enumerate(configs):
        cfg = SearchConfig(c_d=c_d, tau=tau, k=k, s=s, gamma=gamma, seed=seed)
        try:
            res = beam_search(shapes, evaluate, cfg)
        except SearchFailure as exc:
            results[(s, k)] = exc
            continue
        results[(s, k)] = res
        key = (-res.best.a, sum(res.best.r), order)
        if winner is None or key < winner[0]:
            winner = (key, res)
    if winner is None:
        fails = list(results.values())
        raise SearchFailure("all search configurations failed", best=fails[0].best,
                            trace=fails[0].trace)
    return winner[1], results


def multi_config_search(base_model, dataset, shapes, c_d, tau, configs=DEFAULT_CONFIGS,
                        gamma=0.5, seed=0, val_subset=None, cache=None):
    """Run the beam search once per ``(s, k)`` pair and keep the most accurate result.

    Ties go to the smaller rank sum, then to the earlier configuration.
    Returns ``(winner, results)`` where ``results`` maps each ``(s, k)`` to
    its ``SearchResult`` or ``SearchFailure``.
    """
    if cache is None:
        cache = factor_cache(base_model)
    x, y = _val_data(dataset, val_subset, seed)
    evaluate = TruncationEvaluator(base_model, cache, x, y)
    return multi_config_beam(shapes, evaluate, c_d, tau, configs, gamma, seed)


def brute_force_best(base_model, dataset, shapes, c_d, tau, rank_grid, split="val"):
    """Exact argmax of accuracy over every grid vector whose ratio lies in the band.

    Accuracy here is measured by rebuilding dense truncated weights and
    running the ordinary forward pass, independently of the beam search's
    evaluator. Ties go to the smaller rank sum, then lexicographic order.
    """
    grid = [sorted(set(int(v) for v in g)) for g in rank_grid]
    if int(np.prod([len(g) for g in grid])) > 10**6:
        raise InvalidInputError("rank grid larger than 1e6 vectors")
    cache = [svd_full(layer.weight()) for layer in base_model.layers]
    x, y = dataset.subset(split)
    best = None
    for r in itertools.product(*grid):
        r = check_ranks(shapes, r)
        c = compression_ratio(shapes, r)
        if not _in_band(c, c_d, tau):
            continue
        layers = []
        for layer, f, rl in zip(base_model.layers, cache, r):
            w = (f.u[:, :rl] * f.sigma[:rl]) @ f.v[:, :rl].T
            layers.append(nn.DenseLayer(w, layer.bias, layer.activation))
        acc = nn.accuracy(nn.Model(layers, base_model.classes), x, y)
        key = (-acc, sum(r), r)
        if best is None or key < best[0]:
            best = (key, BeamCandidate(r, c, acc))
    if best is None:
        raise SearchFailure("no grid vector lies inside the band")
    return best[1]


@dataclass
class EnergySelection:
    ranks: tuple
    energy: float
    ratio: float
    in_band: bool


def energy_ranks(cache, e):
    """Smallest per-layer ranks keeping at least fraction ``e`` of squared-singular energy."""
    out = []
    for f in cache:
        sq = f.sigma ** 2
        total = sq.sum()
        if total == 0:
            out.append(1)
            continue
        frac = np.cumsum(sq) / total
        r = int(np.searchsorted(frac, e - 1e-12, side="left")) + 1
        out.append(min(max(r, 1), f.rank))
    return tuple(out)


def energy_baseline(cache, shapes, c_d, tau, iters=60):
    """Uniform energy-fraction rank selection, bisected onto the ratio band."""
    lo, hi = 0.0, 1.0
    best = None
    for _ in range(iters):
        e = 0.5 * (lo + hi)
        r = energy_ranks(cache, e)
        c = compression_ratio(shapes, r)
        if _in_band(c, c_d, tau):
            return EnergySelection(r, e, c, True)
        gap = c - c_d if c > c_d else (c_d - tau) - c
        if best is None or gap < best[0]:
            best = (gap, EnergySelection(r, e, c, False))
        if c > c_d:
            lo = e
        else:
            hi = e
    return best[1]


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["level", "step_size", "candidate_rank_vector", "compression_ratio",
                    "val_accuracy", "in_beam"])
        for row in trace:
            w.writerow([row.level, row.step, ";".join(map(str, row.r)), f"{row.c:.6f}",
                        f"{row.a:.6f}", int(row.in_beam)])
