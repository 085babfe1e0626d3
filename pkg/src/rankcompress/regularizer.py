"""Modified stable rank penalty: value, gradient, strength schedule, training hook."""

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError
from .linalg import as_matrix, svd_full, svd_randomized


def stable_rank(w):
    """Squared Frobenius norm over squared spectral norm."""
    sigma = svd_full(w).sigma
    if sigma[0] == 0:
        raise InvalidInputError("stable rank of the zero matrix is undefined")
    return float(np.sum(sigma ** 2) / sigma[0] ** 2)


def _split_sums(sigma, r):
    if not 1 <= r <= sigma.size:
        raise InvalidInputError(f"rank r={r} outside [1, {sigma.size}]")
    head = float(np.sum(sigma[:r]))
    tail = float(np.sum(sigma[r:]))
    if head <= 0:
        raise InvalidInputError("leading singular values sum to zero")
    return head, tail


def msr_from_sigma(sigma, r):
    head, tail = _split_sums(np.asarray(sigma), r)
    return tail / head


def msr_value(w, r):
    """Sum of singular values past ``r`` divided by the sum of the top ``r``."""
    return msr_from_sigma(svd_full(w).sigma, r)


def msr_gradient_from_factors(f, r):
    head, tail = _split_sums(f.sigma, r)
    if r < f.rank and f.sigma[r - 1] - f.sigma[r] < 1e-9:
        warnings.warn(
            f"degenerate split: sigma[{r}] ~= sigma[{r + 1}], gradient depends on SVD ordering",
            RuntimeWarning,
            stacklevel=3,
        )
    if tail <= 1e-12 * head:
        return np.zeros((f.u.shape[0], f.v.shape[0]))
    p_head = f.u[:, :r] @ f.v[:, :r].T
    p_tail = f.u[:, r:] @ f.v[:, r:].T
    # (tail/head) * (P_tail/tail - P_head/head)
    return p_tail / head - (tail / head ** 2) * p_head


def msr_gradient(w, r):
    """Gradient of ``msr_value(w, r)`` with respect to ``w``."""
    return msr_gradient_from_factors(svd_full(w), r)


@dataclass
class RegSchedule:
    """Penalty strength ``lambda0 * growth**(epoch // period_epochs)``.

    With ``scheduled=False`` the strength stays at ``lambda0``.
    """

    lambda0: float = 0.02
    growth: float = 1.5
    period_epochs: int = 15
    svd_refresh_iters: int = 64
    scheduled: bool = True

    def __post_init__(self):
        if self.lambda0 < 0 or self.growth < 1:
            raise InvalidInputError("need lambda0 >= 0 and growth >= 1")
        if self.period_epochs < 1 or self.svd_refresh_iters < 1:
            raise InvalidInputError("period and refresh interval must be >= 1")


def lambda_at(schedule, epoch):
    if epoch < 0:
        raise InvalidInputError("epoch must be >= 0")
    if not schedule.scheduled:
        return schedule.lambda0
    return schedule.lambda0 * schedule.growth ** (epoch // schedule.period_epochs)


@dataclass
class _LayerCache:
    p_head: np.ndarray  # U[:, :r] V[:, :r]^T
    p_tail: np.ndarray  # U[:, r:] V[:, r:]^T
    r: int


class MsrCache:
    """Per-layer split projectors refreshed every ``refresh`` iterations.

    Between refreshes the leading/tail sums are re-read from the current
    weights through the cached projectors, ``<P, W>_F``, so only the
    subspaces are stale, not the magnitudes.
    """

    def __init__(self, refresh=64, randomized=False, seed=0):
        self.refresh = refresh
        self.randomized = randomized
        self.seed = seed
        self.layers = {}
        self.stamp = None
        self.n_refreshes = 0

    def _factor(self, w):
        if self.randomized:
            return svd_randomized(w, min(w.shape), p=0, q=2, seed=self.seed + self.n_refreshes)
        return svd_full(w)

    def update(self, model, targets, iteration):
        if self.stamp is not None and iteration - self.stamp < self.refresh:
            return False
        self.layers = {}
        for i, (layer, r) in enumerate(zip(model.layers, targets)):
            w = layer.weight()
            if r >= min(w.shape):
                continue
            f = self._factor(w)
            self.layers[i] = _LayerCache(
                f.u[:, :r] @ f.v[:, :r].T, f.u[:, r:] @ f.v[:, r:].T, r
            )
        self.stamp = iteration
        self.n_refreshes += 1
        return True

    def gradient(self, i, w):
        c = self.layers[i]
        head = float(np.vdot(c.p_head, w))
        tail = float(np.vdot(c.p_tail, w))
        if head <= 0:
            return np.zeros_like(w)
        return c.p_tail / head - (tail / head ** 2) * c.p_head


class MsrPenalty:
    """Training hook adding ``lambda(epoch) * grad msr(W_l, r_l)`` to weight gradients.

    Layers whose target equals their full rank carry no penalty. Only
    dense layers are regularized; biases never are.
    ``retarget`` (optional) is called as ``retarget(model, epoch)`` at the end of
    every ``retarget_every``-th epoch and may return new targets.
    """

    def __init__(self, targets, schedule=None, randomized=False, seed=0,
                 retarget=None, retarget_every=30):
        self.targets = tuple(int(t) for t in targets)
        self.schedule = schedule or RegSchedule()
        self.cache = MsrCache(self.schedule.svd_refresh_iters, randomized, seed)
        self.retarget = retarget
        self.retarget_every = retarget_every
        self.history = [self.targets]

    def strength(self, epoch):
        return lambda_at(self.schedule, epoch)

    def add_gradients(self, model, grads, iteration, epoch):
        contributions = penalized_step_hook(model, self.cache, self.schedule, self.targets,
                                            iteration, epoch)
        for i, g in contributions.items():
            grads[i]["w"] += g
        return contributions

    def values(self, model):
        return [msr_value(layer.weight(), r) for layer, r in zip(model.layers, self.targets)
                if r < min(layer.m, layer.n)]

    def end_epoch(self, model, epoch):
        if self.retarget is None or (epoch + 1) % self.retarget_every:
            return
        new = self.retarget(model, epoch)
        if new is not None and tuple(new) != self.targets:
            self.targets = tuple(int(t) for t in new)
            self.history.append(self.targets)
            self.cache.stamp = None


def penalized_step_hook(model, cache, schedule, targets, iteration, epoch):
    """Per-layer penalty gradients ``{layer_index: lambda * dmsr/dW}`` for one step."""
    lam = lambda_at(schedule, epoch)
    if lam == 0:
        return {}
    cache.update(model, targets, iteration)
    out = {}
    for i in cache.layers:
        layer = model.layers[i]
        if not hasattr(layer, "w"):
            continue
        out[i] = lam * cache.gradient(i, layer.w)
    return out


def penalty_value(model, targets):
    """Unnormalized sum of msr over layers below full rank."""
    total = 0.0
    for layer, r in zip(model.layers, targets):
        w = as_matrix(layer.weight())
        if r < min(w.shape):
            total += msr_value(w, r)
    return total


def msr_report(model, targets):
    return [
        msr_value(layer.weight(), r) if r < min(layer.m, layer.n) else 0.0
        for layer, r in zip(model.layers, targets)
    ]

