"""Model parameters, local training, canonical bytes and hashing.

A model is a flat float64 vector laid out layer by layer as ``W`` (row-major,
shape ``(in, out)``) followed by ``b``. Every other module treats the model as
opaque bytes produced by :func:`canonical_serialize`, so the byte layout here
is normative:

    magic  b"FCTM"          4 bytes
    version                 u32 LE
    spec_digest             32 bytes
    count                   u64 LE
    values                  count x float64 LE
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedchain.errors import (
    ContractViolation,
    DivergenceError,
    IdxFormatError,
    ModelFormatError,
)

MODEL_MAGIC = b"FCTM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sI32sQ")

INIT_SCALE = 0.05
KINDS = ("logistic", "mlp")


def digest(data: bytes) -> bytes:
    """SHA-256, the single digest used for models, blocks and measurements."""
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    layer_dims: tuple
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown model kind {self.kind!r}")
        if len(dims) < 2:
            raise ContractViolation("layer_dims needs at least input and output dims")
        if self.kind == "logistic" and len(dims) != 2:
            raise ContractViolation("logistic model takes exactly [input_dim, classes]")
        if any(d < 1 for d in dims):
            raise ContractViolation("all layer dims must be >= 1")
        if self.activation != "relu":
            raise ContractViolation(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_dims[:-1], self.layer_dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    @property
    def digest(self) -> bytes:
        enc = self.kind.encode() + b"\x00" + self.activation.encode() + b"\x00"
        enc += struct.pack(f"<I{len(self.layer_dims)}I", len(self.layer_dims), *self.layer_dims)
        return digest(enc)


class ParameterVector:
    """Immutable flat model weights tagged with the digest of their ModelSpec."""

    __slots__ = ("spec_digest", "values")

    def __init__(self, spec_digest: bytes, values):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        if len(spec_digest) != 32:
            raise ContractViolation("spec_digest must be 32 bytes")
        if arr.size == 0:
            raise ContractViolation("a parameter vector cannot be empty")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("parameter vector contains NaN or Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "spec_digest", bytes(spec_digest))
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("ParameterVector is immutable")

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return (self.spec_digest == other.spec_digest
                and self.values.tobytes() == other.values.tobytes())

    def __hash__(self):
        return hash((self.spec_digest, self.values.tobytes()))

    def __repr__(self):
        return f"ParameterVector(n={len(self)}, spec={self.spec_digest.hex()[:8]})"

    def check(self, spec: ModelSpec) -> None:
        if self.spec_digest != spec.digest:
            raise ContractViolation("model does not belong to this ModelSpec")
        if len(self) != spec.n_params:
            raise ContractViolation(
                f"model has {len(self)} values, spec implies {spec.n_params}")


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    cluster_id: int = 0

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise ContractViolation("features must be an n x d matrix")
        if x.shape[0] < 1:
            raise ContractViolation("a dataset needs at least one row")
        if y.shape[0] != x.shape[0]:
            raise ContractViolation("labels and features disagree on n")
        if y.min() < 0:
            raise ContractViolation("labels must be non-negative")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def slice(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.cluster_id)


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 0.5
    batch_size: int = 10
    local_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        # lr == 0 is accepted as the degenerate no-op step
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ContractViolation("learning_rate must be a finite non-negative float")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ContractViolation("batch_size and local_epochs must be >= 1")


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


def init_model(spec: ModelSpec, seed: int) -> ParameterVector:
    rng = _rng(seed)
    parts = []
    for n_in, n_out in spec.layer_shapes:
        parts.append(rng.uniform(-INIT_SCALE, INIT_SCALE, size=n_in * n_out))
        parts.append(np.zeros(n_out))
    return ParameterVector(spec.digest, np.concatenate(parts))


def unpack(values: np.ndarray, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    layers, pos = [], 0
    for n_in, n_out in spec.layer_shapes:
        w = values[pos:pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = values[pos:pos + n_out]
        pos += n_out
        layers.append((w, b))
    return layers


def _forward(values, spec, x):
    layers = unpack(values, spec)
    acts, pre = [x], []
    a = x
    for k, (w, b) in enumerate(layers):
        z = a @ w + b
        pre.append(z)
        if k < len(layers) - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)
    return layers, acts, pre


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_batch(model, spec, batch):
    model.check(spec)
    if batch.dim != spec.input_dim:
        raise ContractViolation(
            f"batch has {batch.dim} features, model expects {spec.input_dim}")
    if batch.labels.max() >= spec.classes:
        raise ContractViolation("label outside [0, classes)")


def loss_value(values: np.ndarray, spec: ModelSpec, x: np.ndarray, y: np.ndarray) -> float:
    _, _, pre = _forward(values, spec, x)
    logp = _log_softmax(pre[-1])
    return float(-logp[np.arange(len(y)), y].mean())


def _loss_and_grad(values, spec, x, y):
    n = x.shape[0]
    layers, acts, pre = _forward(values, spec, x)
    logp = _log_softmax(pre[-1])
    loss = float(-logp[np.arange(n), y].mean())

    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        grads.append((acts[k].T @ dz, dz.sum(axis=0)))
        if k > 0:
            dz = (dz @ w.T) * (pre[k - 1] > 0)
    flat = []
    for gw, gb in reversed(grads):
        flat.append(gw.reshape(-1))
        flat.append(gb)
    return loss, np.concatenate(flat)


def loss_and_grad(model: ParameterVector, spec: ModelSpec, batch: Dataset):
    """Mean softmax cross-entropy over ``batch`` and its analytic gradient."""
    _check_batch(model, spec, batch)
    loss, grad = _loss_and_grad(model.values, spec, batch.features, batch.labels)
    return loss, ParameterVector(model.spec_digest, grad)


def sgd_step(values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return values - lr * grad


def local_train(global_model: ParameterVector, spec: ModelSpec, data: Dataset,
                hp: HyperParams) -> ParameterVector:
    """Minibatch gradient descent from the current global model.

    Batch order is a fresh permutation per epoch drawn from ``hp.seed``; when one
    batch covers the whole dataset the natural row order is kept.
    """
    _check_batch(global_model, spec, data)
    n = len(data)
    bs = min(hp.batch_size, n)
    rng = _rng(hp.seed)
    w = global_model.values.copy()
    x, y = data.features, data.labels
    step = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(hp.local_epochs):
            order = np.arange(n) if bs >= n else rng.permutation(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                _, g = _loss_and_grad(w, spec, x[idx], y[idx])
                w = sgd_step(w, g, hp.learning_rate)
                step += 1
                if not np.all(np.isfinite(w)):
                    raise DivergenceError(step)
    return ParameterVector(global_model.spec_digest, w)


def predict(model: ParameterVector, spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    _, _, pre = _forward(model.values, spec, np.asarray(features, dtype=np.float64))
    return pre[-1].argmax(axis=1)


def evaluate(model: ParameterVector, spec: ModelSpec, data: Dataset) -> tuple[float, float]:
    """Return ``(mean loss, accuracy)`` of ``model`` on ``data``."""
    _check_batch(model, spec, data)
    loss = loss_value(model.values, spec, data.features, data.labels)
    acc = float((predict(model, spec, data.features) == data.labels).mean())
    return loss, acc


def canonical_serialize(model: ParameterVector) -> bytes:
    if len(model) == 0:
        raise ContractViolation("refusing to serialize an empty model")
    head = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.spec_digest, len(model))
    return head + model.values.astype("<f8").tobytes()


def canonical_deserialize(data: bytes) -> ParameterVector:
    if len(data) < _MODEL_HEADER.size:
        raise ModelFormatError("model bytes shorter than header")
    magic, version, spec_digest, count = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad model magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    if len(data) != _MODEL_HEADER.size + 8 * count:
        raise ModelFormatError(
            f"expected {count} values, got {len(data) - _MODEL_HEADER.size} payload bytes")
    values = np.frombuffer(data, dtype="<f8", offset=_MODEL_HEADER.size)
    try:
        return ParameterVector(spec_digest, values)
    except ContractViolation as exc:
        raise ModelFormatError(str(exc)) from None


def model_hash(model: ParameterVector) -> bytes:
    return digest(canonical_serialize(model))


def gen_synthetic(clusters: int, per_cluster: int, dim: int, seed: int,
                  skew: float = 0.0, std: float = 0.2) -> list[Dataset]:
    """Two Gaussian blobs per cluster with means exactly one unit apart.

    Class ``k`` is centred at ``0.5 + (k - 0.5) * u`` where ``u`` is the unit
    diagonal; only the samples depend on ``seed``, so a held-out set drawn with
    another seed comes from the same distribution. Cluster ``i`` gets
    ``per_cluster * (1 + skew * i)`` rows (rounded, at least one).
    """
    if min(clusters, per_cluster, dim) < 1:
        raise ContractViolation("clusters, per_cluster and dim must be >= 1")
    rng = _rng(seed)
    u = np.full(dim, 1.0 / np.sqrt(dim))
    centre = np.full(dim, 0.5)
    out = []
    for i in range(clusters):
        size = max(1, int(round(per_cluster * (1.0 + skew * i))))
        labels = rng.integers(0, 2, size=size)
        noise = rng.normal(0.0, std, size=(size, dim))
        feats = centre + (labels[:, None] - 0.5) * u + noise
        out.append(Dataset(feats, labels, cluster_id=i))
    return out


def pool(datasets: list[Dataset]) -> Dataset:
    return Dataset(np.vstack([d.features for d in datasets]),
                   np.concatenate([d.labels for d in datasets]), cluster_id=-1)


def split_even(data: Dataset, parts: int) -> list[Dataset]:
    """Split rows into ``parts`` contiguous, near-equal clusters."""
    if parts < 1 or parts > len(data):
        raise ContractViolation("cannot split into that many non-empty parts")
    bounds = np.linspace(0, len(data), parts + 1).round().astype(int)
    return [Dataset(data.features[a:b], data.labels[a:b], cluster_id=i)
            for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:]))]


# IDX container ---------------------------------------------------------------

_IDX_TYPES = {
    0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.str.replace("|", ">"): k for k, v in _IDX_TYPES.items()}


def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError("truncated magic number", len(data))
    if data[0] != 0 or data[1] != 0 or data[2] not in _IDX_TYPES or data[3] == 0:
        raise IdxFormatError(f"bad IDX magic {data[:4].hex()}", 0)
    dtype, ndim = _IDX_TYPES[data[2]], data[3]
    head_end = 4 + 4 * ndim
    if len(data) < head_end:
        raise IdxFormatError("truncated dimension header", len(data))
    shape = struct.unpack_from(f">{ndim}I", data, 4)
    need = int(np.prod(shape)) * dtype.itemsize
    if len(data) - head_end < need:
        raise IdxFormatError(
            f"truncated payload: need {need} bytes after header", len(data))
    if len(data) - head_end > need:
        raise IdxFormatError("trailing bytes after payload", head_end + need)
    return np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)),
                         offset=head_end).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    be = arr.dtype.newbyteorder(">") if arr.dtype.itemsize > 1 else arr.dtype
    key = np.dtype(be).str.replace("|", ">")
    if key not in _IDX_CODES:
        raise ContractViolation(f"dtype {arr.dtype} has no IDX code")
    head = bytes([0, 0, _IDX_CODES[key], arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.astype(be).tobytes())


def load_idx(images_path, labels_path, cluster_id: int = 0) -> Dataset:
    """Load an IDX image/label pair; images are flattened and scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.dtype != np.uint8:
        raise IdxFormatError("image file must hold unsigned bytes", 2)
    if labels.ndim != 1:
        raise IdxFormatError("label file must be one-dimensional", 3)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"label count {labels.shape[0]} != image count {images.shape[0]}", 4)
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), cluster_id=cluster_id)
