"""Bootstrap-disagreement band on a 1-D regression problem.

N small networks are fit to the same points from different initial weights.
Their spread is small where data is dense and grows inside the gap between
the two sampled intervals.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import InvalidInputError
from .ensemble import AdamState, BootstrappedNet, adam_step, backprop_mse, forward_batch, head_std, init_net

BAND_COLUMNS = ("x", "mean", "lower_1sd", "g_plus", "lower_2sd", "upper_2sd")


def two_sinusoids(x):
    return np.sin(x) + 0.5 * np.sin(2.5 * x)


@dataclass
class RegressionDataset:
    x: np.ndarray
    y: np.ndarray
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).ravel()
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.x.size < 1 or self.x.shape != self.y.shape:
            raise InvalidInputError("need at least one (x, y) pair with matching shapes")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise InvalidInputError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.x.size


def make_gap_dataset(seed: int, n_points: int = 60, intervals=((-4.0, -1.5), (1.5, 4.0)),
                     noise: float = 0.1, func=two_sinusoids) -> RegressionDataset:
    """Points split evenly between ``intervals`` with Gaussian observation noise."""
    rng = np.random.default_rng(seed)
    sizes = np.full(len(intervals), n_points // len(intervals))
    sizes[: n_points % len(intervals)] += 1
    x = np.concatenate([rng.uniform(lo, hi, size=s) for (lo, hi), s in zip(intervals, sizes)])
    x.sort()
    y = func(x) + noise * rng.normal(size=x.size)
    desc = {"function": getattr(func, "__name__", "custom"), "noise": noise,
            "intervals": [list(iv) for iv in intervals], "seed": seed}
    return RegressionDataset(x, y, desc)


@dataclass
class EnsembleFit:
    net: BootstrappedNet
    grid: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    init_seeds: list
    final_loss: float

    @property
    def g_plus(self) -> np.ndarray:
        return self.mean + self.std

    @property
    def n_nets(self) -> int:
        return self.net.n_heads

    def predictions(self, x) -> np.ndarray:
        """Per-network predictions, shape ``(N, len(x))``."""
        return forward_batch(self.net, np.asarray(x, dtype=np.float64).reshape(-1, 1))[:, :, 0]


def stacked_net(init_seeds, hidden=(32, 32)) -> BootstrappedNet:
    """One head per seed, no shared layers, so every head is an independent net."""
    nets = [init_net(1, (), n_actions=1, n_heads=1, seed=int(s), head_widths=hidden) for s in init_seeds]
    params = {name: np.concatenate([n.params[name] for n in nets]) for name in nets[0].params}
    return BootstrappedNet(1, (), tuple(hidden), 1, len(nets), None, params)


def fit_ensemble(dataset: RegressionDataset, n_nets: int = 20, epochs: int = 2000, seed: int = 0,
                 hidden=(32, 32), lr: float = 0.01, grid=None, init_seeds=None) -> EnsembleFit:
    """Full-batch Adam on squared error, every net on the same data.

    ``init_seeds`` overrides the per-network initial seeds that are otherwise
    spawned from ``seed``.
    """
    if n_nets < 2:
        raise InvalidInputError("need at least two networks")
    if init_seeds is None:
        init_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_nets)]
    init_seeds = [int(s) for s in init_seeds]
    if len(init_seeds) != n_nets:
        raise InvalidInputError("need one init seed per network")
    net = stacked_net(init_seeds, hidden)
    X = dataset.x.reshape(-1, 1)
    actions = np.zeros(dataset.n, dtype=np.int64)
    targets = np.broadcast_to(dataset.y, (n_nets, dataset.n))
    adam = AdamState.for_params(net.params, lr=lr)
    loss = float("nan")
    for _ in range(epochs):
        # backprop_mse sums heads; each head's gradient only touches its own weights
        loss, grads = backprop_mse(net, X, actions, targets, clip_norm=None)
        adam_step(net.params, grads, adam)
    if grid is None:
        lo, hi = dataset.x.min(), dataset.x.max()
        grid = np.linspace(lo, hi, 201)
    grid = np.asarray(grid, dtype=np.float64)
    preds = forward_batch(net, grid.reshape(-1, 1))[:, :, 0]
    return EnsembleFit(net, grid, preds.mean(axis=0), head_std(preds, axis=0), init_seeds, loss)


def band_rows(fit: EnsembleFit):
    m, s = fit.mean, fit.std
    for x, mi, si in zip(fit.grid, m, s):
        yield (float(x), float(mi), float(mi - si), float(mi + si), float(mi - 2 * si), float(mi + 2 * si))


def emit_bands(fit: EnsembleFit, path) -> int:
    """Write the band CSV; the upper one-sd band is the optimistic curve."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BAND_COLUMNS)
        n = 0
        for row in band_rows(fit):
            w.writerow([repr(v) for v in row])
            n += 1
    return n


def gap_and_support_std(fit: EnsembleFit, intervals) -> tuple:
    """Mean std over grid points inside the sampled intervals and strictly between them."""
    inside = np.zeros(fit.grid.shape, dtype=bool)
    for lo, hi in intervals:
        inside |= (fit.grid >= lo) & (fit.grid <= hi)
    ivs = sorted(intervals)
    gap = np.zeros_like(inside)
    for (_, a), (b, _) in zip(ivs, ivs[1:]):
        gap |= (fit.grid > a) & (fit.grid < b)
    return float(fit.std[gap].mean()), float(fit.std[inside].mean())
