"""Statistical outlier removal as a detector for shifted-point attacks."""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .errors import ShapeError


@dataclass(frozen=True)
class DefenseConfig:
    k: int = 8
    lam: float = 1.5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")


@dataclass
class DefenseReport:
    r_d: float
    r_p: float | None
    n_clouds: int
    n_detected: int
    flagged: list = field(default_factory=list)  # per-cloud flagged indices
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _points(cloud):
    return np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)


def outlier_scores(cloud, k):
    """Standardized mean kNN distance of each point within its cloud."""
    pts = _points(cloud)
    if len(pts) <= k:
        raise ShapeError(f"need more than k={k} points, got {len(pts)}")
    d = _kernels.knn_mean_distance(pts, k)
    sd = d.std()
    if sd == 0:
        return np.zeros_like(d)
    return (d - d.mean()) / sd


def detect_outliers(cloud, config=DefenseConfig()):
    """Indices whose mean kNN distance exceeds mean + lam * std of the cloud."""
    return np.flatnonzero(outlier_scores(cloud, config.k) > config.lam)


def calibrate_lambda(clean_clouds, k=8, max_false_positive=0.05):
    """Smallest lambda flagging at most ``max_false_positive`` of clean clouds."""
    worst = np.array([outlier_scores(c, k).max() for c in clean_clouds])
    if len(worst) == 0:
        raise ValueError("no clean clouds")
    lam = float(np.quantile(worst, 1.0 - max_false_positive, method="higher"))
    return max(lam, np.nextafter(0.0, 1.0))


def false_positive_rate(clean_clouds, config=DefenseConfig()):
    clouds = list(clean_clouds)
    return float(np.mean([len(detect_outliers(c, config)) > 0 for c in clouds]))


def _unpack(item):
    if isinstance(item, tuple):
        return item
    if isinstance(item, dict):
        return item["adversarial"], item["perturbed_indices"]
    return item.adversarial, item.perturbed_indices


def evaluate_defense(results, config=DefenseConfig()):
    """Cloud detection rate r_D and flagged-point precision r_P.

    ``results`` holds attack results (anything with ``adversarial`` and
    ``perturbed_indices``) or ``(cloud, indices)`` pairs. r_P averages, over
    detected clouds, the fraction of flagged points that were truly shifted.
    """
    results = list(results)
    if not results:
        raise ValueError("empty result set")
    flagged, precision = [], []
    for item in results:
        cloud, truth = _unpack(item)
        f = detect_outliers(cloud, config)
        flagged.append([int(i) for i in f])
        if len(f):
            precision.append(len(set(f.tolist()) & {int(i) for i in truth}) / len(f))
    return DefenseReport(
        r_d=len(precision) / len(results),
        r_p=float(np.mean(precision)) if precision else None,
        n_clouds=len(results),
        n_detected=len(precision),
        flagged=flagged,
        config=asdict(config),
    )
