"""Gradient attributions for point clouds and statistics over them."""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DegenerateInputError, NumericError, ShapeError
from .model import _check_cloud, _points_of

METHODS = ("ig", "vg", "gb")
BASELINES = ("zeros", "centroid")


@dataclass(frozen=True)
class ExplainConfig:
    method: str = "ig"
    baseline: str = "zeros"
    ig_steps: int = 128
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "method", self.method.lower())
        if self.method not in METHODS:
            raise ValueError(f"unknown attribution method {self.method!r}; expected one of {METHODS}")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}; expected one of {BASELINES}")
        if self.ig_steps < 1:
            raise ValueError("ig_steps must be >= 1")


@dataclass
class Attribution:
    scores: np.ndarray  # (n,) per-point, signed
    target: int
    method: str
    coords: np.ndarray = None  # (n, 3) per-coordinate attributions
    baseline: str | None = None
    steps: int | None = None
    residual: float | None = None  # IG completeness gap
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scores)


def _target_grad(net, batch, target, relu_mode="vanilla"):
    """Gradient of sum_b Z_b[target] for a (B, n, 3) batch; rows are independent."""
    tape = ad.Tape()
    x = tape.variable(batch)
    z = net.forward(x)
    obj = z[..., target].sum()
    g = ad.backward(tape, obj, relu_mode=relu_mode)[x]
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite attribution gradient")
    return z.data[..., target], g


def _check_target(net, target):
    if not 0 <= target < net.config.num_classes:
        raise ValueError(f"target {target} outside [0, {net.config.num_classes})")


def baseline_cloud(points, kind):
    if kind == "zeros":
        return np.zeros_like(points)
    return np.broadcast_to(points.mean(axis=0), points.shape).copy()


def integrated_gradients(net, cloud, target, config=ExplainConfig()):
    """Left-Riemann integrated gradients of logit ``target`` from a baseline cloud."""
    pts = _points_of(cloud)
    _check_cloud(net, pts)
    _check_target(net, target)
    base = baseline_cloud(pts, config.baseline)
    m = config.ig_steps
    alphas = np.arange(m) / m
    total = np.zeros_like(pts)
    for s in range(0, m, config.batch_size):
        a = alphas[s : s + config.batch_size, None, None]
        _, g = _target_grad(net, base + a * (pts - base), target)
        total += g.sum(axis=0)
    coords = (pts - base) * total / m
    f_x = net.logits(pts)[target]
    f_b = net.logits(base)[target]
    residual = abs(coords.sum() - (f_x - f_b))
    return Attribution(
        coords.sum(axis=1), target, "ig", coords, config.baseline, m, float(residual),
        {"f_input": float(f_x), "f_baseline": float(f_b)},
    )


def vanilla_gradients(net, cloud, target):
    pts = _points_of(cloud)
    _check_cloud(net, pts)
    _check_target(net, target)
    _, g = _target_grad(net, pts, target)
    return Attribution(g.sum(axis=1), target, "vg", g)


def guided_backprop(net, cloud, target):
    pts = _points_of(cloud)
    _check_cloud(net, pts)
    _check_target(net, target)
    _, g = _target_grad(net, pts, target, relu_mode="guided")
    return Attribution(g.sum(axis=1), target, "gb", g)


def explain(net, cloud, target, config=ExplainConfig()):
    if config.method == "ig":
        return integrated_gradients(net, cloud, target, config)
    if config.method == "vg":
        return vanilla_gradients(net, cloud, target)
    return guided_backprop(net, cloud, target)


def rank_critical(attr):
    """Point indices by descending score; ties keep ascending index order."""
    scores = attr.scores if isinstance(attr, Attribution) else np.asarray(attr)
    return np.argsort(-scores, kind="stable")


def gini(values):
    """Gini coefficient of absolute values: sum_ij ||a_i|-|a_j|| / (2 n^2 mean|a|)."""
    a = np.abs(values.scores if isinstance(values, Attribution) else np.asarray(values, dtype=np.float64))
    a = a.ravel()
    if a.size == 0:
        raise ShapeError("gini of an empty vector")
    mean = a.mean()
    if mean == 0:
        raise DegenerateInputError("gini undefined for an all-zero vector")
    s = np.sort(a)
    n = a.size
    # sum_ij |s_i - s_j| = 2 * sum_i (2i - n + 1) s_i for ascending s, 0-based i
    pair_sum = 2.0 * np.dot(2 * np.arange(n) - n + 1, s)
    return float(min(max(pair_sum / (2.0 * n * n * mean), 0.0), 1.0))


def band_fractions(scores, bands=(0.2, 0.4)):
    """Fraction of points whose score, divided by the max score, lies in the top band.

    A band of 0.2 counts points with ``score / max(score) >= 0.8``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    top = scores.max()
    if top <= 0:
        return {b: 0.0 for b in bands}
    rel = scores / top
    return {b: float(np.mean(rel >= 1.0 - b - 1e-12)) for b in bands}


def attribution_distribution(attrs):
    """Table-style summary over a set of attributions.

    Keys: ``n_pos`` (mean count of positive points), ``positive_fraction``,
    ``top20_fraction``, ``top40_fraction`` and ``gini`` (mean over the
    non-degenerate attributions).
    """
    attrs = list(attrs)
    if not attrs:
        raise ValueError("no attributions")
    n_pos, pos_frac, top20, top40, ginis = [], [], [], [], []
    for a in attrs:
        s = a.scores if isinstance(a, Attribution) else np.asarray(a)
        n_pos.append(int(np.sum(s > 0)))
        pos_frac.append(n_pos[-1] / len(s))
        bands = band_fractions(s)
        top20.append(bands[0.2])
        top40.append(bands[0.4])
        if np.any(s != 0):
            ginis.append(gini(s))
    return {
        "count": len(attrs),
        "n_pos": float(np.mean(n_pos)),
        "positive_fraction": float(np.mean(pos_frac)),
        "top20_fraction": float(np.mean(top20)),
        "top40_fraction": float(np.mean(top40)),
        "gini": float(np.mean(ginis)) if ginis else float("nan"),
    }


def write_attribution_csv(path, cloud, attr):
    pts = _points_of(cloud)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "z", "score"])
        for i, (p, s) in enumerate(zip(pts, attr.scores)):
            w.writerow([i, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(s))])
