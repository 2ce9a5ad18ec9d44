"""Architecture presets, the training loop, weight files and kernel maps.

Every preset is a trunk that maps an image to a 256-d embedding. A head is
attached per training regime: a dense classifier for cross-entropy, or L2
normalization for multi-similarity. Parameter counts cover the trunk only,
including the batch-norm running statistics inside each involution layer.
"""
from __future__ import annotations

import csv
import io
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from ._io import atomic_write
from .datasets import BatchPlan, ImageDataset, epoch_indices, normalize, sample_batches
from .exceptions import ConfigError, ShapeError, UnsupportedError, WeightFileError
from .losses import MSLossConfig, cross_entropy, ms_loss
from .optim import Adam

PRESETS = ("cnn3a", "cnn3b", "inn2", "inn3", "inn4", "hybrid1", "hybrid2", "hybrid3")
LOSSES = ("ce", "ms")
WEIGHTS_MAGIC = b"IVMETRC1"
_HEADS = {None: 0, "l2normalize": 1, "classifier": 2}

CNN3A_FILTERS = (16, 64, 128)
CNN3B_FILTERS = (16, 96, 128)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0  # filters for conv, units for dense


@dataclass(frozen=True)
class ModelSpec:
    preset: str
    input_shape: tuple
    layers: tuple
    embedding_dim: int = 256
    head: str | None = None
    n_classes: int = 10

    def describe(self):
        parts = []
        for ls in self.layers:
            if ls.kind == "involution":
                parts.append("inv(K3,G1)")
            elif ls.kind in ("conv", "dense"):
                parts.append(f"{ls.kind}{ls.size}")
            else:
                parts.append(ls.kind)
        return " -> ".join(parts)


def preset_layers(name: str, embedding_dim: int = 256) -> tuple:
    """Layer descriptors of a preset trunk."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    if name.startswith("inn"):
        n_inv, filters = int(name[3:]), ()
    elif name.startswith("hybrid"):
        n_inv, filters = int(name[6:]), CNN3A_FILTERS
    else:
        n_inv, filters = 0, CNN3A_FILTERS if name == "cnn3a" else CNN3B_FILTERS
    out = []
    for _ in range(n_inv):
        out += [LayerSpec("involution"), LayerSpec("gelu")]
    for f in filters:
        out += [LayerSpec("conv", f), LayerSpec("gelu")]
    out += [LayerSpec("gap"), LayerSpec("dense", embedding_dim)]
    return tuple(out)


def parse_shape(text) -> tuple:
    """Accept ``"28x28x1"`` or an iterable of three ints."""
    if isinstance(text, str):
        try:
            shape = tuple(int(t) for t in text.lower().split("x"))
        except ValueError:
            raise ConfigError(f"cannot parse input shape {text!r}; use HxWxC") from None
    else:
        shape = tuple(int(t) for t in text)
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"input shape must be three positive extents, got {shape}")
    return shape


class Model:
    """A trunk plus optional head, with explicit forward and backward."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.epoch = 0
        self.optimizer: Adam | None = None
        rng = np.random.default_rng(self.seed)
        self.trunk = self._build(spec.layers, spec.input_shape, rng)
        self.head = []
        if spec.head == "classifier":
            self.head = [L.Dense(spec.embedding_dim, spec.n_classes, rng, self.dtype)]
        elif spec.head == "l2normalize":
            self.head = [L.L2Normalize()]
        elif spec.head is not None:
            raise ConfigError(f"unknown head {spec.head!r}")

    def _build(self, specs, input_shape, rng):
        built = []
        shape = tuple(input_shape)
        for ls in specs:
            if ls.kind == "involution":
                layer = L.Involution(L.InvolutionConfig(channels=shape[-1]), rng, self.dtype)
            elif ls.kind == "conv":
                layer = L.Conv2D(shape[-1], ls.size, rng, dtype=self.dtype,
                                 need_input_grad=bool(built))
            elif ls.kind == "gelu":
                layer = L.GELU()
            elif ls.kind == "gap":
                layer = L.GlobalAveragePool()
            elif ls.kind == "dense":
                layer = L.Dense(shape[-1], ls.size, rng, self.dtype)
            else:
                raise ConfigError(f"unknown layer kind {ls.kind!r}")
            shape = layer.output_shape(shape)
            built.append(layer)
        return built

    @property
    def layers(self):
        return self.trunk + self.head

    @property
    def loss(self):
        return {"classifier": "ce", "l2normalize": "ms"}.get(self.spec.head)

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeError(f"expected batch of {self.spec.input_shape} images, got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def forward(self, x, train=False):
        """Run trunk and head. Train mode caches activations for :meth:`backward`."""
        x = self._check_input(x)
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def forward_embedding(self, x, train=False):
        """Embedding as used for retrieval: trunk output, L2-normalized under MS."""
        x = self._check_input(x)
        for layer in self.trunk:
            x = layer.forward(x, train=train)
        if self.spec.head == "l2normalize":
            x = self.head[0].forward(x, train=train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
            if grad is None:
                break
        return grad

    def trainable(self):
        """``(layer, name)`` pairs of every trainable array, in a fixed order."""
        return [(layer, name) for layer in self.layers for name in layer.params]

    def parameters(self):
        return [layer.params[name] for layer, name in self.trainable()]

    def gradients(self):
        return [layer.grads[name] for layer, name in self.trainable()]

    def state_arrays(self, include_head=True):
        layers = self.layers if include_head else self.trunk
        return [a for layer in layers for _, a in layer.state_arrays()]

    def embed(self, images, batch_size=256):
        """Infer-mode embeddings of raw uint8 (or already scaled float) images."""
        images = np.asarray(images)
        out = []
        for i in range(0, len(images), batch_size):
            chunk = images[i : i + batch_size]
            if chunk.dtype == np.uint8:
                chunk = normalize(chunk)
            out.append(self.forward_embedding(chunk))
        if not out:
            return np.zeros((0, self.spec.embedding_dim), self.dtype)
        return np.concatenate(out)


def build_preset(name, input_shape=(28, 28, 1), seed=0, loss="ce", n_classes=10,
                 embedding_dim=256, dtype=np.float32) -> Model:
    """Freshly initialized preset (Glorot-uniform weights, zero biases)."""
    if loss not in (*LOSSES, None):
        raise ConfigError(f"loss must be one of {LOSSES}, got {loss!r}")
    head = {"ce": "classifier", "ms": "l2normalize", None: None}[loss]
    spec = ModelSpec(name, parse_shape(input_shape), preset_layers(name, embedding_dim),
                     embedding_dim, head, n_classes)
    return Model(spec, seed, dtype)


def count_parameters(model: Model) -> int:
    """Trunk parameters plus tracked batch-norm statistics; head excluded."""
    return sum(layer.num_parameters() for layer in model.trunk)


def model_size_kb(n_params: int) -> float:
    """Size of ``n_params`` float32 values in binary kilobytes."""
    return n_params * 4 / 1024


# ------------------------------------------------------------------ training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float | None
    seconds: float


def batch_loss(model: Model, images, labels, ms_config=None, train=False):
    out = model.forward(images, train=train)
    if model.loss == "ce":
        return cross_entropy(out, labels)
    return ms_loss(out, labels, ms_config)


def evaluate(model: Model, ds: ImageDataset, ms_config=None, batch_size=64, seed=0):
    """Infer-mode loss on a dataset.

    Cross-entropy is averaged over every sample. Multi-similarity depends on
    batch composition, so it is averaged over a fixed class-balanced plan.
    """
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    if model.loss == "ce":
        total = 0.0
        for i in range(0, len(ds), 256):
            x = normalize(ds.images[i : i + 256])
            loss, _ = cross_entropy(model.forward(x), ds.labels[i : i + 256])
            total += loss * len(x)
        return total / len(ds)
    if model.loss == "ms":
        p = min(8, len(np.unique(ds.labels)))
        q = max(2, batch_size // p)
        plan = BatchPlan("balanced", p * q, seed, p, q)
        losses = [ms_loss(model.forward(x), y, ms_config)[0] for x, y in sample_batches(ds, plan)]
        return float(np.mean(losses))
    raise UnsupportedError("model has no training head; build it with loss='ce' or 'ms'")


def train(model: Model, train_ds: ImageDataset, epochs: int, plan: BatchPlan | None = None,
          test_ds: ImageDataset | None = None, ms_config: MSLossConfig | None = None,
          optimizer: Adam | None = None, log=None):
    """Forward/backward/Adam over ``epochs`` epochs; returns a list of :class:`EpochRecord`.

    ``train_loss`` is the mean of the train-mode batch losses seen during the
    epoch. ``seconds`` times the optimization part only.
    """
    if model.loss is None:
        raise UnsupportedError("model has no training head; build it with loss='ce' or 'ms'")
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if tuple(train_ds.image_shape) != tuple(model.spec.input_shape):
        raise ShapeError(f"dataset images {train_ds.image_shape} do not fit model {model.spec.input_shape}")
    plan = plan or BatchPlan.for_loss(model.loss, seed=model.seed)
    if (plan.mode == "balanced") != (model.loss == "ms"):
        raise ConfigError("use shuffled batches for CE and balanced batches for MS")
    if optimizer is not None:
        model.optimizer = optimizer
    elif model.optimizer is None:
        model.optimizer = Adam()
    opt = model.optimizer
    history = []
    for _ in range(epochs):
        start = time.perf_counter()
        losses = []
        for idx in epoch_indices(train_ds.labels, plan, model.epoch):
            x = normalize(train_ds.images[idx])
            loss, grad = batch_loss(model, x, train_ds.labels[idx], ms_config, train=True)
            model.backward(grad)
            opt.step(model.parameters(), model.gradients())
            losses.append(loss)
        seconds = time.perf_counter() - start
        model.epoch += 1
        test_loss = evaluate(model, test_ds, ms_config) if test_ds is not None else None
        rec = EpochRecord(model.epoch, float(np.mean(losses)), test_loss, seconds)
        history.append(rec)
        if log is not None:
            log(rec)
    return history


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "test_loss", "seconds"])
    for r in history:
        test = "" if r.test_loss is None else repr(r.test_loss)
        w.writerow([r.epoch, repr(r.train_loss), test, f"{r.seconds:.3f}"])
    return buf.getvalue()


# --------------------------------------------------------------- weight file
#
# magic "IVMETRC1"
# u16 len + utf-8 preset name
# u32 H, W, C | u64 seed | u8 head (0 none, 1 l2normalize, 2 classifier)
# u32 n_classes | u32 embedding_dim | u32 tensor count
# per tensor: u32 rank, u32 extents..., float32 little-endian data
# Trunk tensors come first (params then buffers per layer), head tensors last.


def serialize(model: Model) -> bytes:
    spec = model.spec
    name = spec.preset.encode()
    arrays = model.state_arrays()
    parts = [
        WEIGHTS_MAGIC,
        struct.pack("<H", len(name)), name,
        struct.pack("<3IQB", *spec.input_shape, model.seed, _HEADS[spec.head]),
        struct.pack("<3I", spec.n_classes, spec.embedding_dim, len(arrays)),
    ]
    for a in arrays:
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def payload_bytes(model: Model, include_head=False) -> int:
    """Bytes of float data the weight file stores for the trunk (or everything)."""
    return 4 * sum(a.size for a in model.state_arrays(include_head=include_head))


def save_weights(model: Model, path):
    atomic_write(path, serialize(model))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise WeightFileError(f"{self.path}: truncated at byte {len(self.raw)}")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(raw: bytes, path="<bytes>") -> Model:
    r = _Reader(raw, path)
    if r.take(8) != WEIGHTS_MAGIC:
        raise WeightFileError(f"{path}: not a weight file (bad magic)")
    (nlen,) = r.unpack("<H")
    try:
        preset = r.take(nlen).decode()
    except UnicodeDecodeError:
        raise WeightFileError(f"{path}: corrupt preset name") from None
    h, w, c, seed, head_code = r.unpack("<3IQB")
    n_classes, emb, count = r.unpack("<3I")
    heads = {v: k for k, v in _HEADS.items()}
    if head_code not in heads or preset not in PRESETS:
        raise WeightFileError(f"{path}: unknown preset {preset!r} or head code {head_code}")
    spec = ModelSpec(preset, (h, w, c), preset_layers(preset, emb), emb, heads[head_code], n_classes)
    model = Model(spec, seed)
    targets = model.state_arrays()
    if count != len(targets):
        raise WeightFileError(f"{path}: {count} tensors stored, model needs {len(targets)}")
    loaded = []
    for target in targets:
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        if tuple(shape) != target.shape:
            raise WeightFileError(f"{path}: tensor shape {shape}, expected {target.shape}")
        loaded.append(np.frombuffer(r.take(4 * target.size), dtype="<f4").reshape(shape))
    if r.pos != len(raw):
        raise WeightFileError(f"{path}: {len(raw) - r.pos} trailing bytes")
    # nothing is written into the model until the whole file has decoded
    for target, data in zip(targets, loaded):
        target[...] = data
    for layer in model.trunk:
        if isinstance(layer, L.Involution):
            layer.stat_updates = None
    return model


def load_weights(path) -> Model:
    path = Path(path)
    return deserialize(path.read_bytes(), path)


# --------------------------------------------------------------- kernel maps


def kernel_norm_maps(model: Model, images):
    """Per-pixel L2 norm of each involution layer's generated kernels.

    Returns a list, one ``(N, H, W)`` array per involution layer.
    """
    if not any(isinstance(layer, L.Involution) for layer in model.trunk):
        raise UnsupportedError(f"{model.spec.preset} has no involution layer")
    x = np.asarray(images)
    if x.dtype == np.uint8:
        x = normalize(x)
    x = model._check_input(x)
    maps = []
    for layer in model.trunk:
        x = layer.forward(x, train=False)
        if isinstance(layer, L.Involution):
            k = layer.last_kernels
            maps.append(np.sqrt((k.astype(np.float64) ** 2).sum(axis=(-3, -2, -1))))
    return maps


def to_gray8(values) -> np.ndarray:
    """Min-max scale a 2-d array to uint8; a constant array maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros(v.shape, np.uint8)
    return np.round((v - lo) / (hi - lo) * 255).astype(np.uint8)


def export_kernel_maps(model: Model, images, out_dir, names=None):
    """Write one PGM per (involution layer, image); returns the written paths."""
    from PIL import Image

    maps = kernel_norm_maps(model, images)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(names) if names is not None else list(range(len(maps[0])))
    written = []
    for li, layer_maps in enumerate(maps):
        for name, m in zip(names, layer_maps):
            path = out_dir / f"involution{li + 1}_image{name}.pgm"
            buf = io.BytesIO()
            Image.fromarray(to_gray8(m)).save(buf, format="PPM")
            atomic_write(path, buf.getvalue())
            written.append(path)
    return written


@dataclass
class ParameterRow:
    preset: str
    input_shape: tuple
    params: int
    size_kb: float = field(init=False)

    def __post_init__(self):
        self.size_kb = model_size_kb(self.params)


def parameter_table(presets=PRESETS, shapes=((28, 28, 1), (32, 32, 3))):
    rows = []
    for shape in shapes:
        for name in presets:
            rows.append(ParameterRow(name, tuple(shape), count_parameters(build_preset(name, shape, loss=None))))
    return rows
