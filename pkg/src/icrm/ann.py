"""Three-layer feed-forward network trained by per-sample backpropagation.

tanh hidden layer, softmax (or logistic) output, squared-error loss, momentum
SGD with validation-based early stopping, stratified splitting, confusion
matrices and a checksummed binary model format.
"""
from __future__ import annotations

import enum
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .labels import ClassLabel, N_CLASSES

MODEL_MAGIC = b"ICRM"
MODEL_VERSION = 1
_HIDDEN_CODES = {"tanh": 1}
_OUTPUT_CODES = {"softmax": 1, "sigmoid": 2}


class ANNError(Exception):
    pass


class DimensionMismatch(ANNError, ValueError):
    pass


class EmptyTrainSet(ANNError, ValueError):
    pass


class EmptyDataset(ANNError, ValueError):
    pass


class NonFiniteLoss(ANNError, ArithmeticError):
    """Training diverged; usually the learning rate is too high."""


class ClassTooSmall(ANNError, ValueError):
    pass


class ModelFormatError(ANNError, ValueError):
    pass


class ChecksumMismatch(ModelFormatError):
    pass


class VersionMismatch(ModelFormatError):
    pass


class StopReason(enum.Enum):
    MaxEpochs = "max_epochs"
    EarlyStop = "early_stop"


@dataclass(frozen=True)
class NetConfig:
    layer_sizes: tuple[int, int, int] = (106, 10, 3)
    learning_rate: float = 0.05
    momentum: float = 0.9
    max_epochs: int = 1000
    patience: int = 6  # 0 disables early stopping
    seed: int = 0
    output_activation: str = "softmax"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) != 3:
            raise ValueError("exactly one hidden layer is supported: layer_sizes = [in, hidden, out]")
        if min(sizes) < 1:
            raise ValueError("layer sizes must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.max_epochs < 1 or self.patience < 0:
            raise ValueError("max_epochs must be >= 1 and patience >= 0")
        if self.output_activation not in _OUTPUT_CODES:
            raise ValueError(f"unknown output activation {self.output_activation!r}")


@dataclass
class Network:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    hidden_activation: str = "tanh"
    output_activation: str = "softmax"

    def __post_init__(self):
        self.W1 = np.ascontiguousarray(self.W1, dtype=np.float64)
        self.b1 = np.ascontiguousarray(self.b1, dtype=np.float64)
        self.W2 = np.ascontiguousarray(self.W2, dtype=np.float64)
        self.b2 = np.ascontiguousarray(self.b2, dtype=np.float64)
        h, n_in = self.W1.shape
        n_out, h2 = self.W2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (n_out,):
            raise DimensionMismatch("weight and bias shapes do not chain")

    @property
    def layer_sizes(self) -> tuple[int, int, int]:
        return (self.W1.shape[1], self.W1.shape[0], self.W2.shape[0])

    @property
    def n_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def copy(self) -> "Network":
        return Network(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(),
                       self.hidden_activation, self.output_activation)

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (
            self.hidden_activation == other.hidden_activation
            and self.output_activation == other.output_activation
            and self.layer_sizes == other.layer_sizes
            and self.parameters().tobytes() == other.parameters().tobytes()
        )

    __hash__ = None


@dataclass
class Gradients:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])


@dataclass
class LabeledDataset:
    """Rows of ``X`` are classifier inputs, ``y`` their integer class labels.

    ``targets`` overrides the one-hot encoding (used for non-classification toys
    such as XOR with a single logistic output).
    """

    X: np.ndarray
    y: np.ndarray
    sources: tuple = ()
    targets: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(np.atleast_2d(np.asarray(self.X, dtype=np.float64)))
        if self.X.size == 0:
            self.X = self.X.reshape(0, self.X.shape[-1] if self.X.ndim == 2 else 0)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if len(self.y) != len(self.X):
            raise DimensionMismatch(f"{len(self.X)} inputs but {len(self.y)} labels")
        if self.targets is not None:
            self.targets = np.ascontiguousarray(np.atleast_2d(self.targets), dtype=np.float64)
            if len(self.targets) != len(self.X):
                raise DimensionMismatch("targets and inputs differ in length")
        elif len(self.y) and (self.y.min() < 0 or self.y.max() >= N_CLASSES):
            raise ValueError("labels must be valid ClassLabel values")
        if self.sources and len(self.sources) != len(self.X):
            raise DimensionMismatch("sources and inputs differ in length")

    def __len__(self):
        return len(self.X)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.X[idx], self.y[idx],
            tuple(self.sources[i] for i in idx) if self.sources else (),
            None if self.targets is None else self.targets[idx],
            dict(self.provenance),
        )

    @classmethod
    def from_segments(cls, segments, provenance=None) -> "LabeledDataset":
        segments = list(segments)
        if not segments:
            raise EmptyDataset("no segments")
        if any(s.label is None for s in segments):
            raise ValueError("every segment needs a label")
        X = np.stack([s.samples for s in segments])
        y = [int(s.label) for s in segments]
        sources = tuple((s.record_id, s.channel, s.start) for s in segments)
        return cls(X, y, sources, provenance=dict(provenance or {}))

    @classmethod
    def concat(cls, parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise EmptyDataset("nothing to concatenate")
        has_sources = all(p.sources for p in parts)
        return cls(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            tuple(s for p in parts for s in p.sources) if has_sources else (),
            None if parts[0].targets is None else np.concatenate([p.targets for p in parts]),
            dict(parts[0].provenance),
        )


# --------------------------------------------------------------------------- core maths


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream])


def init_network(config: NetConfig) -> Network:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    n_in, n_hidden, n_out = config.layer_sizes
    rng = _rng(config.seed, 0)
    a1 = 1.0 / math.sqrt(n_in)
    a2 = 1.0 / math.sqrt(n_hidden)
    W1 = rng.uniform(-a1, a1, size=(n_hidden, n_in))
    W2 = rng.uniform(-a2, a2, size=(n_out, n_hidden))
    return Network(W1, np.zeros(n_hidden), W2, np.zeros(n_out), "tanh", config.output_activation)


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (net.W1.shape[1],) or x.ndim > 2:
        raise DimensionMismatch(f"input of shape {x.shape} for a {net.W1.shape[1]}-input network")
    return x


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _activations(net: Network, x: np.ndarray):
    h = np.tanh(x @ net.W1.T + net.b1)
    z = h @ net.W2.T + net.b2
    if net.output_activation == "softmax":
        y = _softmax(z)
    else:
        y = 1.0 / (1.0 + np.exp(-z))
    return h, y


def forward(net: Network, x) -> np.ndarray:
    """Output vector for one input, or one row per input for a 2-D batch."""
    x = _check_input(net, x)
    return _activations(net, x)[1]


def loss(net: Network, x, target) -> float:
    """Sum over samples of the per-sample mean squared output error."""
    x = _check_input(net, x)
    y = _activations(net, x)[1]
    t = np.asarray(target, dtype=np.float64).reshape(y.shape)
    return float(np.sum(np.mean((y - t) ** 2, axis=-1)))


def gradient(net: Network, x, target) -> Gradients:
    """Backpropagated gradient of :func:`loss`; a batch sums per-sample gradients."""
    x = _check_input(net, x)
    X = np.atleast_2d(x)
    h, y = _activations(net, X)
    t = np.asarray(target, dtype=np.float64).reshape(y.shape)
    n_out = y.shape[1]
    g = (2.0 / n_out) * (y - t)
    if net.output_activation == "softmax":
        dz = y * (g - np.sum(g * y, axis=1, keepdims=True))
    else:
        dz = g * y * (1.0 - y)
    da = (dz @ net.W2) * (1.0 - h * h)
    return Gradients(da.T @ X, da.sum(axis=0), dz.T @ h, dz.sum(axis=0))


def mse(net: Network, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    y = forward(net, dataset.X)
    return float(np.mean((y - targets_for(dataset, y.shape[1])) ** 2))


def targets_for(dataset: LabeledDataset, n_out: int) -> np.ndarray:
    if dataset.targets is not None:
        if dataset.targets.shape[1] != n_out:
            raise DimensionMismatch("target width does not match the output layer")
        return dataset.targets
    if n_out == 1:
        return dataset.y[:, None].astype(np.float64)
    if len(dataset.y) and dataset.y.max() >= n_out:
        raise DimensionMismatch("label outside the output layer")
    return np.eye(n_out)[dataset.y]


# --------------------------------------------------------------------------- training


class EarlyStopping:
    """Counts consecutive epochs without a new minimum of the monitored error."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.failures = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.failures = 0
            return True
        self.failures += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.patience > 0 and self.failures >= self.patience


@dataclass
class TrainingReport:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    test_mse: list = field(default_factory=list)
    stop_reason: StopReason = StopReason.MaxEpochs
    best_epoch: int = 0  # 1-based

    @property
    def epochs(self) -> int:
        return len(self.train_mse)

    def to_csv(self) -> str:
        lines = ["epoch,train_mse,val_mse,test_mse"]
        for i, row in enumerate(zip(self.train_mse, self.val_mse, self.test_mse), start=1):
            lines.append(f"{i}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def train(train_set: LabeledDataset, val_set: LabeledDataset | None,
          test_set: LabeledDataset | None, config: NetConfig) -> tuple[Network, TrainingReport]:
    """Per-sample momentum SGD; returns the network from the best validation epoch.

    With an empty validation split the training error is monitored instead.
    """
    if train_set is None or len(train_set) == 0:
        raise EmptyTrainSet("training split is empty")
    n_in, _, n_out = config.layer_sizes
    val_set = val_set if val_set is not None else train_set.subset([])
    test_set = test_set if test_set is not None else train_set.subset([])
    for part in (train_set, val_set, test_set):
        if len(part) and part.input_dim != n_in:
            raise DimensionMismatch(f"dataset input dim {part.input_dim} != network input {n_in}")

    net = init_network(config)
    X = np.ascontiguousarray(train_set.X)
    T = np.ascontiguousarray(targets_for(train_set, n_out))
    vel = [np.zeros_like(a) for a in (net.W1, net.b1, net.W2, net.b2)]
    out_kind = kernels.OUTPUT_SOFTMAX if config.output_activation == "softmax" else kernels.OUTPUT_SIGMOID
    rng = _rng(config.seed, 1)
    stopper = EarlyStopping(config.patience)
    report = TrainingReport()
    best = net.copy()
    monitor_val = len(val_set) > 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(X)).astype(np.int64)
        kernels.sgd_epoch(net.W1, net.b1, net.W2, net.b2, *vel, X, T, order,
                          float(config.learning_rate), float(config.momentum), out_kind)
        tr = mse(net, train_set)
        if not math.isfinite(tr) or not np.all(np.isfinite(net.parameters())):
            raise NonFiniteLoss(f"loss diverged at epoch {epoch}; lower the learning rate")
        va, te = mse(net, val_set), mse(net, test_set)
        report.train_mse.append(tr)
        report.val_mse.append(va)
        report.test_mse.append(te)
        if stopper.update(va if monitor_val else tr):
            best = net.copy()
            report.best_epoch = epoch
        if stopper.should_stop:
            report.stop_reason = StopReason.EarlyStop
            break
    return best, report


# --------------------------------------------------------------------------- splitting


def split_dataset(dataset: LabeledDataset, ratios=(0.7, 0.15, 0.15), seed: int = 0
                  ) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified split: per class shuffle, floor for train/val, remainder to test."""
    r = tuple(float(v) for v in ratios)
    if len(r) != 3 or min(r) <= 0 or abs(sum(r) - 1) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = _rng(seed, 2)
    parts = ([], [], [])
    for cls in np.unique(dataset.y):
        idx = np.flatnonzero(dataset.y == cls)
        n = len(idx)
        n_train = math.floor(r[0] * n + 1e-9)
        n_val = math.floor(r[1] * n + 1e-9)
        if min(n_train, n_val, n - n_train - n_val) < 1:
            raise ClassTooSmall(f"class {int(cls)} has {n} samples, too few for a 3-way split")
        idx = idx[rng.permutation(n)]
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_val])
        parts[2].extend(idx[n_train + n_val:])
    return tuple(dataset.subset(p) for p in parts)


# --------------------------------------------------------------------------- evaluation


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else float("nan")

    def format_table(self, title: str = "") -> str:
        names = [c.name for c in ClassLabel][: len(self.counts)]
        width = max(8, max(len(str(int(v))) for v in self.counts.ravel()) + 2)
        lines = [title] if title else []
        lines.append("true\\pred".ljust(10) + "".join(n.rjust(width) for n in names)
                     + "total".rjust(width))
        for name, row in zip(names, self.counts):
            lines.append(name.ljust(10) + "".join(str(int(v)).rjust(width) for v in row)
                         + str(int(row.sum())).rjust(width))
        lines.append(f"accuracy {self.accuracy * 100:.2f}% ({int(np.trace(self.counts))}/{self.total})")
        return "\n".join(lines)


def predict(net: Network, X) -> np.ndarray:
    # argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(forward(net, np.atleast_2d(X)), axis=1)


def evaluate(net: Network, dataset: LabeledDataset) -> ConfusionMatrix:
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    k = max(net.layer_sizes[2], N_CLASSES)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (dataset.y, predict(net, dataset.X)), 1)
    return ConfusionMatrix(counts)


def classify(net: Network, samples) -> tuple[ClassLabel, float]:
    p = forward(net, samples)
    if p.ndim != 1:
        raise DimensionMismatch("classify takes a single window")
    k = int(np.argmax(p))
    return ClassLabel(k), float(p[k])


# --------------------------------------------------------------------------- persistence


def save_network(net: Network) -> bytes:
    """``ICRM`` magic, version, layer sizes, activation codes, f64 LE params, CRC-32."""
    sizes = net.layer_sizes
    head = MODEL_MAGIC + struct.pack(
        "<BB3IBB", MODEL_VERSION, len(sizes), *sizes,
        _HIDDEN_CODES[net.hidden_activation], _OUTPUT_CODES[net.output_activation],
    )
    body = head + net.parameters().astype("<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


_HEAD = struct.Struct("<4sBB3IBB")


def load_network(data: bytes) -> Network:
    data = bytes(data)
    if len(data) < _HEAD.size + 4:
        raise ModelFormatError("model file too short")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumMismatch("model checksum does not match")
    magic, version, n_layers, n_in, n_hidden, n_out, hcode, ocode = _HEAD.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ModelFormatError("not an ICRM model file")
    if version != MODEL_VERSION:
        raise VersionMismatch(f"model version {version}, expected {MODEL_VERSION}")
    if n_layers != 3:
        raise ModelFormatError(f"unsupported layer count {n_layers}")
    hidden = {v: k for k, v in _HIDDEN_CODES.items()}.get(hcode)
    output = {v: k for k, v in _OUTPUT_CODES.items()}.get(ocode)
    if hidden is None or output is None:
        raise ModelFormatError("unknown activation code")
    n_params = n_hidden * n_in + n_hidden + n_out * n_hidden + n_out
    payload = data[_HEAD.size:-4]
    if len(payload) != 8 * n_params:
        raise ModelFormatError(f"expected {8 * n_params} parameter bytes, got {len(payload)}")
    p = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    i = 0
    W1 = p[i:i + n_hidden * n_in].reshape(n_hidden, n_in); i += n_hidden * n_in
    b1 = p[i:i + n_hidden]; i += n_hidden
    W2 = p[i:i + n_out * n_hidden].reshape(n_out, n_hidden); i += n_out * n_hidden
    b2 = p[i:i + n_out]
    return Network(W1.copy(), b1.copy(), W2.copy(), b2.copy(), hidden, output)
