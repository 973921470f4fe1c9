"""Point-set distances and perturbation sparsity."""

from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .errors import ShapeError


@dataclass
class PerturbationSummary:
    chamfer: float
    hausdorff: float
    n_shifted: int
    axis_displacement: tuple  # mean |dx|, |dy|, |dz| over shifted points
    max_axis_displacement: float

    def to_dict(self):
        d = asdict(self)
        d["axis_displacement"] = list(self.axis_displacement)
        return d


def _as_points(p):
    p = np.asarray(getattr(p, "points", p), dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ShapeError(f"expected (n, 3) points, got {p.shape}")
    if len(p) == 0:
        raise ShapeError("empty point set")
    return p


def chamfer(a, b):
    """Mean nearest-neighbour L2 distance from a to b plus from b to a."""
    a, b = _as_points(a), _as_points(b)
    return float(_kernels.nearest(a, b)[0].mean() + _kernels.nearest(b, a)[0].mean())


def hausdorff(a, b):
    a, b = _as_points(a), _as_points(b)
    return float(max(_kernels.nearest(a, b)[0].max(), _kernels.nearest(b, a)[0].max()))


def shifted_mask(p, q, eps=1e-9):
    p, q = _as_points(p), _as_points(q)
    if p.shape != q.shape:
        raise ShapeError(f"point shifting needs equal sizes, got {len(p)} and {len(q)}")
    return np.linalg.norm(q - p, axis=1) > eps


def perturbation_summary(p, q, eps=1e-9):
    p, q = _as_points(p), _as_points(q)
    mask = shifted_mask(p, q, eps)
    disp = np.abs(q - p)
    axis = tuple(float(v) for v in disp[mask].mean(axis=0)) if mask.any() else (0.0, 0.0, 0.0)
    return PerturbationSummary(
        chamfer=chamfer(p, q),
        hausdorff=hausdorff(p, q),
        n_shifted=int(mask.sum()),
        axis_displacement=axis,
        max_axis_displacement=float(disp.max()),
    )
