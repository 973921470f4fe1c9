"""PointNet-lite classifier: shared per-point MLP, symmetric pooling, MLP head.

The network has no input/feature transform sub-networks; a cloud is mapped
point-wise by ``h`` and reduced over points by a symmetric function before
the classification head.
"""

import enum
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, NumericError, ShapeError


class PoolingKind(str, enum.Enum):
    MAX = "max"
    AVERAGE = "average"
    MEDIAN = "median"
    SUM = "sum"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown pooling kind {name!r}; expected one of {[k.value for k in cls]}") from None


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int
    num_points: int = 1024
    pooling: PoolingKind = PoolingKind.MAX
    point_widths: tuple = (3, 64, 128, 256)
    head_widths: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "pooling", PoolingKind.parse(self.pooling))
        object.__setattr__(self, "point_widths", tuple(int(w) for w in self.point_widths))
        head = tuple(int(w) for w in self.head_widths) or (self.point_widths[-1], 128, self.num_classes)
        object.__setattr__(self, "head_widths", head)
        if self.point_widths[0] != 3:
            raise ValueError("first per-point width must be 3")
        if self.num_classes < 2 or head[-1] != self.num_classes:
            raise ValueError("head must end in num_classes >= 2 outputs")
        if head[0] != self.point_widths[-1]:
            raise ValueError("head input width must equal the pooled feature width")

    def to_dict(self):
        d = asdict(self)
        d["pooling"] = self.pooling.value
        d["point_widths"] = list(self.point_widths)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def param_shapes(self):
        shapes = []
        for widths in (self.point_widths, self.head_widths):
            for a, b in zip(widths[:-1], widths[1:]):
                shapes += [(a, b), (b,)]
        return shapes


@dataclass
class Prediction:
    logits: np.ndarray

    @property
    def label(self):
        return int(np.argmax(self.logits))

    def activation(self, c):
        return float(self.logits[c])


@dataclass
class Network:
    config: NetworkConfig
    weights: list
    meta: dict = field(default_factory=dict)

    @property
    def _n_point_layers(self):
        return len(self.config.point_widths) - 1

    # graph builders ------------------------------------------------------

    def point_features(self, points):
        """Per-point features ``h(p)``; ``points`` is a Tensor or array (..., n, 3)."""
        x = points
        for i in range(self._n_point_layers):
            x = ad.relu(ad.add(ad.matmul(x, self.weights[2 * i]), self.weights[2 * i + 1]))
        return x

    def head(self, pooled):
        x = pooled
        off = 2 * self._n_point_layers
        n_head = len(self.config.head_widths) - 1
        for i in range(n_head):
            x = ad.add(ad.matmul(x, self.weights[off + 2 * i]), self.weights[off + 2 * i + 1])
            if i < n_head - 1:
                x = ad.relu(x)
        return x

    def forward(self, points):
        """Logits Tensor for a cloud (n, 3) or batch (B, n, 3)."""
        return self.head(ad.reduce_points(self.point_features(points), self.config.pooling.value))

    def masked_forward(self, base_features, idx, rows):
        """Logits when only the points ``idx`` move.

        ``base_features`` holds ``h`` of the unmoved cloud (n, c) as a plain
        array; ``rows`` is the Tensor of moved coordinates (len(idx), 3).
        """
        feats = ad.scatter_rows(base_features, idx, self.point_features(rows))
        return self.head(ad.reduce_points(feats, self.config.pooling.value))

    # numpy conveniences --------------------------------------------------

    def logits(self, points):
        return self.forward(ad.Tensor(np.asarray(points, dtype=np.float64))).data


def init_network(config, seed=0):
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    for shape in config.param_shapes():
        if len(shape) == 2:
            weights.append(rng.standard_normal(shape) * np.sqrt(2.0 / shape[0]))
        else:
            weights.append(np.zeros(shape))
    return Network(config, weights)


def zero_network(config):
    return Network(config, [np.zeros(s) for s in config.param_shapes()])


def _points_of(cloud):
    return cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=np.float64)


def _check_cloud(net, pts):
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"cloud must be (n, 3), got {pts.shape}")
    if len(pts) != net.config.num_points:
        raise ShapeError(f"network expects {net.config.num_points} points, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise NumericError("cloud has non-finite coordinates")


def predict(net, cloud):
    pts = _points_of(cloud)
    _check_cloud(net, pts)
    return Prediction(net.logits(pts))


def predict_labels(net, points, batch_size=64):
    """Argmax labels for a (N, n, 3) block."""
    out = []
    for s in range(0, len(points), batch_size):
        out.append(np.argmax(net.logits(points[s : s + batch_size]), axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net, dataset):
    return float(np.mean(predict_labels(net, dataset.points) == dataset.labels))


def logit_objective(c):
    """Objective ``Z[c]``: the raw logit of class ``c``."""
    return lambda z: z[c]


def cross_entropy_objective(target):
    return lambda z: ad.softmax_cross_entropy(z, [target])


def input_gradient(net, cloud, objective, relu_mode="vanilla"):
    """Value and (n, 3) input gradient of ``objective(logits)``, weights frozen."""
    pts = _points_of(cloud)
    _check_cloud(net, pts)
    tape = ad.Tape()
    x = tape.variable(pts)
    value = objective(net.forward(x))
    grads = ad.backward(tape, value, relu_mode=relu_mode)
    return float(value.data), grads[x]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def train(config, dataset, epochs=20, seed=0, lr=1e-3, batch_size=32, eval_set=None, log=None):
    """Cross-entropy + Adam training; deterministic for a given seed."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.labels.max() >= config.num_classes:
        raise ValueError("dataset label exceeds num_classes")
    if dataset.num_points != config.num_points:
        raise ShapeError(f"dataset has {dataset.num_points} points per cloud, config expects {config.num_points}")
    net = init_network(config, seed)
    rng = np.random.default_rng(seed + 1)
    states = [ad.AdamState.zeros_like(w) for w in net.weights]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for s in range(0, len(order), batch_size):
            b = order[s : s + batch_size]
            tape = ad.Tape()
            params = [tape.variable(w) for w in net.weights]
            live = Network(config, params)
            try:
                loss = ad.softmax_cross_entropy(live.forward(dataset.points[b]), dataset.labels[b])
            except NumericError as exc:
                raise NumericError(f"training diverged in epoch {epoch}: {exc}", step=epoch) from None
            if not np.isfinite(loss.data):
                raise NumericError(f"training diverged in epoch {epoch}", step=epoch)
            grads = ad.backward(tape, loss)
            for i, p in enumerate(params):
                net.weights[i], states[i] = ad.adam_step(net.weights[i], grads[p], states[i], lr)
            total += float(loss.data) * len(b)
        history.append(total / len(dataset))
        if log is not None:
            log(epoch, history[-1])
    net.meta.update(
        epochs=epochs,
        seed=seed,
        lr=lr,
        batch_size=batch_size,
        loss_history=history,
        eval_accuracy=accuracy(net, eval_set if eval_set is not None else dataset),
    )
    return net


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic  b"CRITPNT\0"
#   u32       format version
#   u32       header length H
#   H bytes   UTF-8 JSON: {"config", "meta", "shapes", "crc32", "payload_bytes"}
#   payload   weight blocks in config.param_shapes() order, each as
#             row-major float64 little-endian

MAGIC = b"CRITPNT\0"
FORMAT_VERSION = 1


def save_checkpoint(net, path):
    payload = b"".join(np.ascontiguousarray(w, dtype="<f8").tobytes() for w in net.weights)
    header = json.dumps(
        {
            "config": net.config.to_dict(),
            "meta": net.meta,
            "shapes": [list(w.shape) for w in net.weights],
            "crc32": zlib.crc32(payload),
            "payload_bytes": len(payload),
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path, expected_config=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen])
        config = NetworkConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = blob[16 + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    shapes = [tuple(s) for s in header["shapes"]]
    if shapes != config.param_shapes():
        raise CheckpointError(f"{path}: weight shapes do not match config")
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"{path}: config {config} differs from expected {expected_config}")
    weights, off = [], 0
    for shape in shapes:
        size = int(np.prod(shape)) * 8
        weights.append(np.frombuffer(payload, dtype="<f8", count=size // 8, offset=off).reshape(shape).astype(np.float64))
        off += size
    return Network(config, weights, header["meta"])
