"""P2 regression head: a small ReLU MLP with a sigmoid output trained with L1.

Gradients are derived by hand; ``tests/test_align.py`` checks them against
central finite differences.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import BadMagic, DatasetTooSmall, DimensionMismatch, EmptyBatch, TruncatedFile
from .squash import (
    VoxelFeatures,
    VoxelGridSpec,
    aggregate,
    featurize_traversal,
    query_points,
)

MLP_MAGIC = b"MLP1"
INIT_UNIFORM_FAN_IN = 1


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple = (9, 32, 32, 1)
    seed: int = 0

    def __post_init__(self):
        w = tuple(int(v) for v in self.widths)
        if len(w) < 2 or w[-1] != 1 or min(w) < 1:
            raise ValueError(f"bad layer widths {w}: need >= 2 layers ending in 1")
        object.__setattr__(self, "widths", w)

    @classmethod
    def for_input(cls, dim, hidden=(32, 32), seed=0) -> "MlpSpec":
        return cls((dim, *hidden, 1), seed)


@dataclass
class Mlp:
    widths: tuple
    weights: List[np.ndarray]  # weights[l] has shape (widths[l], widths[l + 1])
    biases: List[np.ndarray]
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            self.widths, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed
        )


def init_mlp(spec: MlpSpec) -> Mlp:
    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Mlp(spec.widths, weights, biases, spec.seed)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_input(mlp: Mlp, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != mlp.input_dim:
        raise DimensionMismatch(f"feature dim {x.shape[1]} != network input {mlp.input_dim}")
    return x


def _forward_cache(mlp: Mlp, x):
    acts, pre = [x], []
    h = x
    last = len(mlp.weights) - 1
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w + b
        pre.append(z)
        h = _sigmoid(z) if l == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pre


def forward(mlp: Mlp, features) -> np.ndarray:
    """Predicted scores in (0, 1), one per row of ``features``."""
    x = _check_input(mlp, features)
    acts, _ = _forward_cache(mlp, x)
    return acts[-1][:, 0]


def l1_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape[0] == 0:
        raise EmptyBatch("L1 loss of an empty batch")
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch {pred.shape[0]} vs {target.shape[0]}")
    return float(np.mean(np.abs(pred - target)))


def backward(mlp: Mlp, features, targets):
    """Gradients of the mean L1 loss, ordered like ``Mlp.params()``.

    Uses subgradient 0 where prediction equals target.
    """
    x = _check_input(mlp, features)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    if n == 0:
        raise EmptyBatch("backward on an empty batch")
    acts, pre = _forward_cache(mlp, x)
    out = acts[-1][:, 0]
    delta = (np.sign(out - y) / n * out * (1.0 - out)).reshape(-1, 1)
    grads = [None] * (2 * len(mlp.weights))
    for l in range(len(mlp.weights) - 1, -1, -1):
        grads[2 * l] = acts[l].T @ delta
        grads[2 * l + 1] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ mlp.weights[l].T) * (pre[l - 1] > 0)
    return grads


# -- dataset and training ----------------------------------------------------


@dataclass
class AlignmentDataset:
    features: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray

    @classmethod
    def from_arrays(cls, features, targets, val_fraction=0.1, seed=0) -> "AlignmentDataset":
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(targets, dtype=np.float64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DimensionMismatch(f"features {x.shape} vs targets {y.shape}")
        if np.any((y < 0) | (y > 1)):
            raise ValueError("targets must lie in [0, 1]")
        n = y.shape[0]
        if n < 2:
            raise DatasetTooSmall(f"need at least 2 rows, got {n}")
        perm = np.random.default_rng(seed).permutation(n)
        n_val = min(max(1, int(round(val_fraction * n))), n - 1)
        return cls(x, y, np.sort(perm[n_val:]), np.sort(perm[:n_val]))

    def __len__(self):
        return self.targets.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


class EpochLoss(NamedTuple):
    epoch: int
    train_l1: float
    val_l1: float


def train_head(dataset: AlignmentDataset, mlp_spec: MlpSpec, cfg: TrainConfig):
    """SGD with momentum on the L1 loss. Returns ``(mlp, history)``."""
    if len(dataset) < 2:
        raise DatasetTooSmall(f"need at least 2 rows, got {len(dataset)}")
    if mlp_spec.widths[0] != dataset.dim:
        raise DimensionMismatch(f"network input {mlp_spec.widths[0]} != feature dim {dataset.dim}")
    mlp = init_mlp(mlp_spec)
    params = mlp.params()
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    x_tr, y_tr = dataset.features[dataset.train_idx], dataset.targets[dataset.train_idx]
    x_va, y_va = dataset.features[dataset.val_idx], dataset.targets[dataset.val_idx]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(y_tr.shape[0])
        for s in range(0, perm.shape[0], cfg.batch_size):
            b = perm[s : s + cfg.batch_size]
            grads = backward(mlp, x_tr[b], y_tr[b])
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v += g
                p -= cfg.lr * v
        history.append(
            EpochLoss(epoch, l1_loss(forward(mlp, x_tr), y_tr), l1_loss(forward(mlp, x_va), y_va))
        )
    return mlp, history


class P2Map(NamedTuple):
    keys: np.ndarray  # (m, 3) voxel keys
    values: np.ndarray  # (m,) predicted scores


def predict_p2_map(mlp: Mlp, store: VoxelFeatures) -> P2Map:
    """Predicted score for every occupied voxel (occupancy flag set to 1)."""
    if store.dim + 1 != mlp.input_dim:
        raise DimensionMismatch(f"store dim {store.dim} + flag != network input {mlp.input_dim}")
    if len(store) == 0:
        return P2Map(np.zeros((0, 3), dtype=np.int64), np.zeros(0))
    x = np.hstack([store.features.astype(np.float64), np.ones((len(store), 1))])
    return P2Map(store.keys.copy(), forward(mlp, x))


# -- alignment store ---------------------------------------------------------


def build_alignment_store(
    dense_clouds: Sequence, spec: VoxelGridSpec, mode: str = "mean"
) -> VoxelFeatures:
    """Aggregate voxel features followed by the per-traversal count profile.

    The profile is log(1 + count) of each traversal in the voxel, sorted in
    descending order so the vector does not depend on traversal order.
    """
    per = [featurize_traversal(d, spec) for d in dense_clouds]
    agg = aggregate(per, mode)
    profile = np.zeros((len(agg), len(per)), dtype=np.float32)
    for t, vf in enumerate(per):
        rows = vf.lookup(agg.keys)
        profile[rows >= 0, t] = vf.features[rows[rows >= 0], 0]
    profile = -np.sort(-profile, axis=1)
    return VoxelFeatures(spec, agg.keys, np.hstack([agg.features, profile]))


def build_alignment_dataset(
    dense_clouds: Sequence,
    queries,
    targets,
    voxel_size: float = 0.5,
    mode: str = "mean",
    val_fraction: float = 0.1,
    seed: int = 0,
    spec: Optional[VoxelGridSpec] = None,
):
    """Returns ``(dataset, store)``; rows are ``query_points(store, queries)``."""
    spec = spec or VoxelGridSpec.from_clouds(dense_clouds, voxel_size)
    store = build_alignment_store(dense_clouds, spec, mode)
    x = query_points(store, queries)
    return AlignmentDataset.from_arrays(x, targets, val_fraction, seed), store


# -- MLP1 --------------------------------------------------------------------


def encode_mlp(mlp: Mlp) -> bytes:
    head = struct.pack("<4sI", MLP_MAGIC, len(mlp.widths))
    head += struct.pack(f"<{len(mlp.widths)}I", *mlp.widths)
    head += struct.pack("<QI", mlp.seed, INIT_UNIFORM_FAN_IN)
    body = b"".join(
        np.ascontiguousarray(p, dtype="<f8").tobytes() for p in mlp.params()
    )
    return head + body


def decode_mlp(buf: bytes, path="<bytes>") -> Mlp:
    if len(buf) < 4 or buf[:4] != MLP_MAGIC:
        raise BadMagic(path, bytes(buf[:4]), MLP_MAGIC, 0)
    off = 4
    if len(buf) < off + 4:
        raise TruncatedFile(path, len(buf), off + 4 - len(buf))
    (nw,) = struct.unpack_from("<I", buf, off)
    off += 4
    need = off + 4 * nw + 12
    if len(buf) < need:
        raise TruncatedFile(path, len(buf), need - len(buf))
    widths = struct.unpack_from(f"<{nw}I", buf, off)
    off += 4 * nw
    seed, _init = struct.unpack_from("<QI", buf, off)
    off += 12
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            size = int(np.prod(shape))
            if len(buf) < off + 8 * size:
                raise TruncatedFile(path, len(buf), off + 8 * size - len(buf))
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
            (weights if len(shape) == 2 else biases).append(arr)
    return Mlp(tuple(widths), weights, biases, seed)


def save_mlp(mlp: Mlp, path) -> None:
    Path(path).write_bytes(encode_mlp(mlp))


def load_mlp(path) -> Mlp:
    return decode_mlp(Path(path).read_bytes(), path=str(path))
