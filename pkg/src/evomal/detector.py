"""Byte-level gated-convolution detector, forward and backward in numpy.

Layer stack: byte embedding -> two parallel 1-D convolutions over the
embedded sequence (ReLU branch, sigmoid gate), their elementwise product,
max over time per filter, a ReLU hidden layer and a sigmoid output.
The output is a benignness score: above the threshold means benign.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DivergedLoss, ShapeMismatch

_MAGIC = b"EVMLDW01"
_HEADER = "<6Qd"
_EPS = 1e-7


@dataclass(frozen=True)
class DetectorConfig:
    k: int = 4096
    embed_dim: int = 8
    conv_filters: int = 16
    kernel_size: int = 32
    stride: int = 32
    hidden_units: int = 16
    threshold: float = 0.5

    def __post_init__(self):
        if self.k < self.kernel_size or self.kernel_size < 1 or self.stride < 1:
            raise ValueError("need k >= kernel_size >= 1 and stride >= 1")
        if min(self.embed_dim, self.conv_filters, self.hidden_units) < 1:
            raise ValueError("layer widths must be positive")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def positions(self) -> int:
        return (self.k - self.kernel_size) // self.stride + 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass(frozen=True, eq=False)
class DetectorWeights:
    """All trainable parameters; also used as the container for gradients."""

    config: DetectorConfig
    embedding: np.ndarray
    conv_relu: np.ndarray
    conv_relu_bias: np.ndarray
    conv_gate: np.ndarray
    conv_gate_bias: np.ndarray
    fc1: np.ndarray
    fc1_bias: np.ndarray
    fc_out: np.ndarray
    fc_out_bias: np.ndarray

    @staticmethod
    def shapes(cfg: DetectorConfig) -> dict[str, tuple[int, ...]]:
        conv = (cfg.kernel_size, cfg.embed_dim, cfg.conv_filters)
        return {
            "embedding": (256, cfg.embed_dim),
            "conv_relu": conv,
            "conv_relu_bias": (cfg.conv_filters,),
            "conv_gate": conv,
            "conv_gate_bias": (cfg.conv_filters,),
            "fc1": (cfg.conv_filters, cfg.hidden_units),
            "fc1_bias": (cfg.hidden_units,),
            "fc_out": (cfg.hidden_units, 1),
            "fc_out_bias": (1,),
        }

    @property
    def names(self) -> list[str]:
        return [f.name for f in fields(self) if f.name != "config"]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.names]

    @classmethod
    def from_arrays(cls, cfg: DetectorConfig, arrays: Sequence[np.ndarray]) -> "DetectorWeights":
        w = cls(cfg, *[np.asarray(a, dtype=np.float64) for a in arrays])
        w.validate()
        return w

    @classmethod
    def zeros(cls, cfg: DetectorConfig) -> "DetectorWeights":
        return cls.from_arrays(cfg, [np.zeros(s) for s in cls.shapes(cfg).values()])

    @classmethod
    def initialize(cls, cfg: DetectorConfig, seed: int = 0, scale: float = 1.0) -> "DetectorWeights":
        """Xavier-uniform matrices scaled by ``scale``, zero biases."""
        rng = np.random.default_rng(seed)
        arrays = []
        for name, shape in cls.shapes(cfg).items():
            if name.endswith("bias"):
                arrays.append(np.zeros(shape))
                continue
            fan_out = shape[-1]
            fan_in = int(np.prod(shape[:-1])) if name != "embedding" else 1
            limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
            arrays.append(rng.uniform(-limit, limit, size=shape))
        return cls.from_arrays(cfg, arrays)

    def validate(self) -> None:
        for name, shape in self.shapes(self.config).items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")

    def copy(self) -> "DetectorWeights":
        return self.from_arrays(self.config, [a.copy() for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vector: np.ndarray) -> "DetectorWeights":
        out, at = [], 0
        for a in self.arrays():
            out.append(vector[at:at + a.size].reshape(a.shape))
            at += a.size
        return self.from_arrays(self.config, out)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def to_bytes(self) -> bytes:
        c = self.config
        header = _MAGIC + struct.pack(
            _HEADER, c.k, c.embed_dim, c.conv_filters, c.kernel_size, c.stride, c.hidden_units, c.threshold
        )
        return header + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DetectorWeights":
        if data[:8] != _MAGIC:
            raise ShapeMismatch("not a detector weight file")
        values = struct.unpack_from(_HEADER, data, 8)
        cfg = DetectorConfig(*values[:6], threshold=values[6])
        flat = np.frombuffer(data, dtype="<f8", offset=8 + struct.calcsize(_HEADER)).astype(np.float64)
        expected = sum(int(np.prod(s)) for s in cls.shapes(cfg).values())
        if flat.size != expected:
            raise ShapeMismatch(f"weight file holds {flat.size} values, config needs {expected}")
        return cls.zeros(cfg).unflatten(flat)

    def save(self, path: Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path) -> "DetectorWeights":
        return cls.from_bytes(Path(path).read_bytes())


def prepare_input(data: bytes, k: int) -> np.ndarray:
    """First ``k`` bytes as integers, right-padded with zeros."""
    if k <= 0:
        raise ValueError("k must be positive")
    x = np.zeros(k, dtype=np.uint8)
    head = np.frombuffer(data[:k], dtype=np.uint8)
    x[: head.size] = head
    return x


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _windows(w: DetectorWeights, X: np.ndarray) -> np.ndarray:
    """Embedded input cut into conv windows: (batch, positions, kernel*embed)."""
    c = w.config
    if X.ndim != 2 or X.shape[1] != c.k:
        raise ShapeMismatch(f"input must have length k={c.k}")
    Z = w.embedding[X]
    T, K, s = c.positions, c.kernel_size, c.stride
    if K == s:
        return Z[:, : T * K].reshape(X.shape[0], T, K * c.embed_dim)
    view = np.lib.stride_tricks.sliding_window_view(Z, K, axis=1)[:, : (T - 1) * s + 1 : s]
    return view.transpose(0, 1, 3, 2).reshape(X.shape[0], T, K * c.embed_dim)


def _forward(w: DetectorWeights, X: np.ndarray) -> dict:
    c = w.config
    win = _windows(w, X)
    KE = c.kernel_size * c.embed_dim
    A = win @ w.conv_relu.reshape(KE, -1) + w.conv_relu_bias
    Gt = win @ w.conv_gate.reshape(KE, -1) + w.conv_gate_bias
    S = _sigmoid(Gt)
    G = np.maximum(A, 0.0) * S
    idx = G.argmax(axis=1)  # first index on ties
    h = np.take_along_axis(G, idx[:, None, :], axis=1)[:, 0, :]
    u = h @ w.fc1 + w.fc1_bias
    v = np.maximum(u, 0.0)
    o = v @ w.fc_out + w.fc_out_bias
    y = _sigmoid(o[:, 0])
    return dict(win=win, A=A, S=S, idx=idx, h=h, u=u, v=v, y=y)


def scores(weights: DetectorWeights, X: np.ndarray) -> np.ndarray:
    """Benignness scores for a (batch, k) array of byte values."""
    weights.validate()
    return _forward(weights, np.asarray(X))["y"]


def forward(weights: DetectorWeights, x: np.ndarray) -> float:
    """Score one prepared input of length k."""
    return float(scores(weights, np.asarray(x)[None, :])[0])


def score_bytes(weights: DetectorWeights, data: bytes) -> float:
    return forward(weights, prepare_input(data, weights.config.k))


def is_benign(score: float, threshold: float = 0.5) -> bool:
    return score > threshold


def _batch_loss_grad(w: DetectorWeights, X: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy over the batch and its exact gradient."""
    c = w.config
    B = X.shape[0]
    f = _forward(w, X)
    y = f["y"]
    yc = np.clip(y, _EPS, 1 - _EPS)
    loss = float(-np.mean(labels * np.log(yc) + (1 - labels) * np.log(1 - yc)))

    # the clamp is part of the loss, so its flat regions pass no gradient
    inside = (y > _EPS) & (y < 1 - _EPS)
    do = (np.where(inside, y - labels, 0.0) / B)[:, None]
    d_fc_out = f["v"].T @ do
    d_fc_out_bias = do.sum(axis=0)
    du = (do @ w.fc_out.T) * (f["u"] > 0)
    d_fc1 = f["h"].T @ du
    d_fc1_bias = du.sum(axis=0)
    dh = du @ w.fc1.T

    # max-pool routes each filter's gradient to its argmax position only
    idx = f["idx"]
    a = np.take_along_axis(f["A"], idx[:, None, :], axis=1)[:, 0, :]
    s = np.take_along_axis(f["S"], idx[:, None, :], axis=1)[:, 0, :]
    dA = dh * s * (a > 0)
    dGt = dh * np.maximum(a, 0.0) * s * (1 - s)
    bi = np.arange(B)[:, None]
    win_sel = f["win"][bi, idx]  # (B, F, K*E)
    KE = c.kernel_size * c.embed_dim
    d_conv_relu = np.einsum("bfk,bf->kf", win_sel, dA).reshape(w.conv_relu.shape)
    d_conv_gate = np.einsum("bfk,bf->kf", win_sel, dGt).reshape(w.conv_gate.shape)
    d_win = dA[..., None] * w.conv_relu.reshape(KE, -1).T[None] + dGt[..., None] * w.conv_gate.reshape(KE, -1).T[None]

    positions = idx[..., None] * c.stride + np.arange(c.kernel_size)  # (B, F, K)
    byte_ids = np.take_along_axis(X, positions.reshape(B, -1), axis=1).ravel()
    d_embedding = np.zeros_like(w.embedding)
    np.add.at(d_embedding, byte_ids, d_win.reshape(-1, c.embed_dim))

    grad = DetectorWeights(
        c, d_embedding, d_conv_relu, dA.sum(axis=0), d_conv_gate, dGt.sum(axis=0),
        d_fc1, d_fc1_bias, d_fc_out, d_fc_out_bias,
    )
    return loss, grad


def loss_and_grad(weights: DetectorWeights, x: np.ndarray, label: int):
    """Cross-entropy of one sample (label 1 = benign) and its gradient."""
    weights.validate()
    return _batch_loss_grad(weights, np.asarray(x)[None, :], np.array([float(label)]))


def _stack(dataset, k: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([prepare_input(d, k) for d, _ in dataset]) if dataset else np.zeros((0, k), np.uint8)
    y = np.array([float(lab) for _, lab in dataset])
    return X, y


def train(
    weights: DetectorWeights,
    dataset: Sequence[tuple[bytes, int]],
    cfg: TrainConfig,
    log=None,
) -> DetectorWeights:
    """Minibatch SGD on a private copy; deterministic given the seed."""
    if not dataset:
        raise ValueError("empty training set")
    if len({lab for _, lab in dataset}) < 2:
        raise ValueError("training set needs both labels")
    X, y = _stack(dataset, weights.config.k)
    rng = np.random.default_rng(cfg.seed)
    params = [a.copy() for a in weights.arrays()]
    current = DetectorWeights(weights.config, *params)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, grad = _batch_loss_grad(current, X[batch], y[batch])
            if not np.isfinite(loss) or not grad.all_finite():
                raise DivergedLoss(f"non-finite loss or gradient in epoch {epoch}")
            for p, g in zip(params, grad.arrays()):
                p -= cfg.learning_rate * g
            total += loss * len(batch)
        if not current.all_finite():
            raise DivergedLoss(f"non-finite weights after epoch {epoch}")
        if log is not None:
            log(epoch, total / len(y))
    return current.copy()


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    scores: np.ndarray
    detected_malware: tuple[int, ...]

    @property
    def correct(self) -> int:
        return int(round(self.accuracy * len(self.scores)))


def evaluate(
    weights: DetectorWeights, dataset: Sequence[tuple[bytes, int]], batch: int = 256
) -> Evaluation:
    """Accuracy, per-sample scores, and indices of malware scored as malware."""
    if not dataset:
        raise ValueError("empty dataset")
    X, y = _stack(dataset, weights.config.k)
    out = np.concatenate([scores(weights, X[i:i + batch]) for i in range(0, len(y), batch)])
    predicted_benign = out > weights.config.threshold
    accuracy = float(np.mean(predicted_benign == (y == 1)))
    detected = tuple(int(i) for i in np.flatnonzero((y == 0) & ~predicted_benign))
    return Evaluation(accuracy, out, detected)


def accuracy_of(weights: Optional[DetectorWeights], dataset) -> float:
    return evaluate(weights, dataset).accuracy
