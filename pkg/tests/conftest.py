import pytest

from critpoint.data import synthetic_splits
from critpoint.model import NetworkConfig, train


@pytest.fixture(scope="session")
def small_victim():
    """A 4-class, 64-point net trained in a couple of seconds, with its test split."""
    tr, te = synthetic_splits(num_classes=4, train_per_class=30, test_per_class=8, n=64, seed=0)
    cfg = NetworkConfig(num_classes=4, num_points=64, point_widths=(3, 32, 64), head_widths=(64, 32, 4))
    net = train(cfg, tr, epochs=15, seed=0, lr=3e-3, eval_set=te)
    return net, te
