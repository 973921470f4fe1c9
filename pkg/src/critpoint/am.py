"""Activation maximization: gradient ascent of one logit over all input points."""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericError
from .explain import gini
from .metrics import chamfer, hausdorff

INITS = ("zeros", "dataset_average", "instance")
GINI_MARK = 0.8


@dataclass(frozen=True)
class AmConfig:
    target: int
    init: str = "zeros"
    steps: int = 1000
    lr: float = 1e-3
    seed: int = 0
    keep_every: int = 100

    def __post_init__(self):
        if self.init not in INITS:
            raise ValueError(f"unknown initialization {self.init!r}; expected one of {INITS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")


@dataclass
class AmTrace:
    """Per-step record; entry ``t`` describes the cloud after ``t + 1`` updates."""

    activation: np.ndarray
    gini: np.ndarray
    chamfer: np.ndarray
    hausdorff: np.ndarray
    initial: np.ndarray
    final: np.ndarray
    initial_activation: float
    snapshots: dict = field(default_factory=dict)  # step -> cloud

    def __len__(self):
        return len(self.activation)

    @property
    def gini_mark_step(self):
        """First step (1-based) where displacement-Gini reaches 0.8, or None."""
        hit = np.flatnonzero(self.gini >= GINI_MARK)
        return int(hit[0]) + 1 if len(hit) else None

    def rows(self):
        """Plot rows including step 0; activation also min-max normalized."""
        act = np.concatenate([[self.initial_activation], self.activation])
        span = act.max() - act.min()
        norm = (act - act.min()) / span if span > 0 else np.zeros_like(act)
        gin = np.concatenate([[0.0], self.gini])
        ch = np.concatenate([[0.0], self.chamfer])
        hd = np.concatenate([[0.0], self.hausdorff])
        for t in range(len(act)):
            yield {
                "step": t,
                "activation": act[t],
                "activation_minmax": norm[t],
                "gini": gin[t],
                "chamfer": ch[t],
                "hausdorff": hd[t],
            }


def initial_cloud(config, num_points, dataset=None, instance=None):
    if config.init == "zeros":
        return np.zeros((num_points, 3))
    if config.init == "dataset_average":
        if dataset is None:
            raise ValueError("dataset_average initialization needs a dataset")
        return dataset.points.mean(axis=0)
    if instance is not None:
        return np.array(getattr(instance, "points", instance), dtype=np.float64)
    if dataset is None:
        raise ValueError("instance initialization needs an instance or a dataset")
    rng = np.random.default_rng(config.seed)
    pool = np.flatnonzero(dataset.labels == config.target)
    pool = pool if len(pool) else np.arange(len(dataset))
    return dataset.points[int(rng.choice(pool))].copy()


def displacement_gini(start, cloud):
    d = np.linalg.norm(cloud - start, axis=1)
    return gini(d) if np.any(d > 0) else 0.0


def activation_maximize(net, config, dataset=None, instance=None):
    """Adam ascent on every point coordinate of ``net``'s ``target`` logit."""
    if not 0 <= config.target < net.config.num_classes:
        raise ValueError(f"target {config.target} outside [0, {net.config.num_classes})")
    start = initial_cloud(config, net.config.num_points, dataset, instance)
    cloud = start.copy()
    state = ad.AdamState.zeros_like(cloud)
    n = config.steps
    act, gin, ch, hd = np.empty(n), np.empty(n), np.empty(n), np.empty(n)
    snaps = {}
    try:
        first = float(net.logits(start)[config.target])
    except NumericError as exc:
        raise NumericError(f"initial cloud gives non-finite activation: {exc}", step=0) from None
    for t in range(n):
        try:
            tape = ad.Tape()
            x = tape.variable(cloud)
            z = net.forward(x)[config.target]
            g = ad.backward(tape, z)[x]
            cloud, state = ad.adam_step(cloud, -g, state, config.lr)
            if not np.all(np.isfinite(cloud)):
                raise NumericError("non-finite cloud")
            act[t] = net.logits(cloud)[config.target]
        except NumericError as exc:
            raise NumericError(f"activation maximization diverged at step {t + 1}: {exc}", step=t + 1) from None
        gin[t] = displacement_gini(start, cloud)
        ch[t] = chamfer(start, cloud)
        hd[t] = hausdorff(start, cloud)
        if config.keep_every and (t + 1) % config.keep_every == 0:
            snaps[t + 1] = cloud.copy()
    return AmTrace(act, gin, ch, hd, start, cloud, first, snaps)


TRACE_COLUMNS = ("step", "activation", "activation_minmax", "gini", "chamfer", "hausdorff")


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in trace.rows():
            w.writerow({k: (v if k == "step" else repr(float(v))) for k, v in row.items()})
