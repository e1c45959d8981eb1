"""Small 2-D convolutional classifier, implemented directly on numpy.

Architecture: two valid 3x3 convolutions (the second with three times the
filters of the first), no pooling, flatten, a 120-unit dense layer with
inverted dropout, and a softmax output layer.  Forward, backprop, and the
SGD-with-momentum loop are written out explicitly; convolutions go through a
sliding-window view plus einsum, so the nested-loop definition is only used
as an oracle in the tests.

Everything is deterministic for a fixed seed on a single thread: He-uniform
init, epoch shuffles, and dropout masks all draw from one generator.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, NumericError
from .formats import MAGIC_CNN, LabelMap, read_container, write_container
from .preprocess import PatchSet, patches_at


@dataclass(frozen=True)
class CnnSpec:
    """Shape parameters of the network.

    ``conv2_filters`` is locked to 3x ``conv1_filters``; both convolutions are
    valid (no padding), so the window must survive two kernel applications.
    """

    input_window: int
    input_channels: int
    num_classes: int
    conv1_filters: int
    conv2_filters: int = 0  # 0 = derive as 3 * conv1_filters
    kernel: int = 3
    dense_units: int = 120
    dropout: float = 0.5

    def __post_init__(self):
        if self.conv2_filters == 0:
            object.__setattr__(self, "conv2_filters", 3 * self.conv1_filters)
        if self.conv2_filters != 3 * self.conv1_filters:
            raise DataError(
                f"conv2_filters must be 3 * conv1_filters, got "
                f"{self.conv2_filters} != 3 * {self.conv1_filters}"
            )
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise DataError(f"kernel must be odd, got {self.kernel}")
        if self.input_window % 2 == 0 or self.input_window < 1:
            raise DataError(f"input_window must be odd, got {self.input_window}")
        if self.conv_output_side < 1:
            raise DataError(
                f"window {self.input_window} leaves no output after two valid "
                f"{self.kernel}x{self.kernel} convolutions"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise DataError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def conv_output_side(self) -> int:
        return self.input_window - 2 * (self.kernel - 1)

    @property
    def flat_dim(self) -> int:
        return self.conv_output_side ** 2 * self.conv2_filters


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-2
    momentum: float = 0.9
    rng_seed: int = 0

    def __post_init__(self):
        # zero learning rate is allowed (it must be a no-op), negative is not
        if self.learning_rate < 0:
            raise DataError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise DataError(f"momentum must be in [0, 1), got {self.momentum}")


_PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                "dense1_w", "dense1_b", "dense2_w", "dense2_b")


@dataclass
class CnnModel:
    spec: CnnSpec
    class_ids: np.ndarray  # (num_classes,) label id emitted per output unit
    conv1_w: np.ndarray  # (C1, k, k, Cin)
    conv1_b: np.ndarray  # (C1,)
    conv2_w: np.ndarray  # (C2, k, k, C1)
    conv2_b: np.ndarray  # (C2,)
    dense1_w: np.ndarray  # (units, flat_dim)
    dense1_b: np.ndarray  # (units,)
    dense2_w: np.ndarray  # (num_classes, units)
    dense2_b: np.ndarray  # (num_classes,)
    seed: int = 0

    def params(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in _PARAM_NAMES]

    @property
    def dtype(self) -> np.dtype:
        return self.conv1_w.dtype


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_model(spec: CnnSpec, seed: int = 0, dtype=np.float32,
               class_ids: np.ndarray | None = None) -> CnnModel:
    """He-uniform weights, zero biases, all keyed to ``seed``."""
    rng = np.random.default_rng(seed)
    return _init_with_rng(spec, rng, seed, dtype, class_ids)


def _init_with_rng(spec: CnnSpec, rng: np.random.Generator, seed: int, dtype,
                   class_ids: np.ndarray | None) -> CnnModel:
    k, c_in = spec.kernel, spec.input_channels
    if class_ids is None:
        class_ids = np.arange(1, spec.num_classes + 1, dtype=np.int64)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if class_ids.size != spec.num_classes:
        raise DataError(f"{class_ids.size} class ids for {spec.num_classes} outputs")
    return CnnModel(
        spec=spec,
        class_ids=class_ids,
        conv1_w=_he_uniform(rng, (spec.conv1_filters, k, k, c_in), k * k * c_in, dtype),
        conv1_b=np.zeros(spec.conv1_filters, dtype=dtype),
        conv2_w=_he_uniform(rng, (spec.conv2_filters, k, k, spec.conv1_filters),
                            k * k * spec.conv1_filters, dtype),
        conv2_b=np.zeros(spec.conv2_filters, dtype=dtype),
        dense1_w=_he_uniform(rng, (spec.dense_units, spec.flat_dim), spec.flat_dim, dtype),
        dense1_b=np.zeros(spec.dense_units, dtype=dtype),
        dense2_w=_he_uniform(rng, (spec.num_classes, spec.dense_units), spec.dense_units, dtype),
        dense2_b=np.zeros(spec.num_classes, dtype=dtype),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _conv_batch(x: np.ndarray, filters: np.ndarray) -> np.ndarray:
    """Valid convolution, stride 1: (N,h,w,Ci) x (F,k,k,Ci) -> (N,h',w',F)."""
    k = filters.shape[1]
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    return np.einsum("nyxcij,fijc->nyxf", windows, filters, optimize=True)


def conv_forward(patch: np.ndarray, filters: np.ndarray, biases: np.ndarray,
                 activation: str = "relu") -> np.ndarray:
    """Single-input valid convolution with bias and activation.

    ``patch`` is (h, w, Cin); ``filters`` is (F, k, k, Cin).  Output pixel
    (y, x, f) is the full kernel dot product at that spatial offset plus the
    filter bias, through the activation.
    """
    if patch.ndim != 3 or filters.ndim != 4 or patch.shape[2] != filters.shape[3]:
        raise DataError(
            f"shape mismatch: patch {patch.shape} vs filters {filters.shape}"
        )
    if filters.shape[1] > patch.shape[0] or filters.shape[2] > patch.shape[1]:
        raise DataError("kernel does not fit inside the input")
    out = _conv_batch(patch[None], filters)[0] + biases
    if activation == "relu":
        return np.maximum(out, 0)
    if activation == "linear":
        return out
    raise DataError(f"unknown activation {activation!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(model: CnnModel, x: np.ndarray, train_mode: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, dict]:
    """Forward pass over a batch, returning (probabilities, cache).

    The cache records every pre-activation and the dropout mask, which is what
    the backward pass replays.  Dropout is inverted (mask then scale by
    1/keep) and only active in train mode.
    """
    spec = model.spec
    if x.ndim != 4 or x.shape[1:] != (spec.input_window, spec.input_window, spec.input_channels):
        raise DataError(
            f"batch shape {x.shape} does not match spec window "
            f"{spec.input_window} x channels {spec.input_channels}"
        )
    x = x.astype(model.dtype, copy=False)
    z1 = _conv_batch(x, model.conv1_w) + model.conv1_b
    a1 = np.maximum(z1, 0)
    z2 = _conv_batch(a1, model.conv2_w) + model.conv2_b
    a2 = np.maximum(z2, 0)
    flat = a2.reshape(x.shape[0], -1)
    z3 = flat @ model.dense1_w.T + model.dense1_b
    a3 = np.maximum(z3, 0)
    if train_mode and spec.dropout > 0.0:
        if rng is None:
            raise DataError("train-mode forward needs an rng for dropout")
        keep = 1.0 - spec.dropout
        mask = (rng.random(a3.shape) < keep).astype(model.dtype)
        d3 = a3 * mask / model.dtype.type(keep)
    else:
        mask = None
        d3 = a3
    z4 = d3 @ model.dense2_w.T + model.dense2_b
    probs = softmax(z4)
    cache = {"x": x, "z1": z1, "a1": a1, "z2": z2, "a2": a2, "flat": flat,
             "z3": z3, "a3": a3, "mask": mask, "d3": d3, "probs": probs}
    return probs, cache


def forward(model: CnnModel, patch: np.ndarray, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probability vector for one patch; deterministic at inference."""
    probs, _ = forward_batch(model, patch[None], train_mode=train_mode, rng=rng)
    return probs[0]


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-likelihood of the target classes."""
    picked = probs[np.arange(probs.shape[0]), targets]
    return float(-np.log(picked).mean())


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _conv_filter_grad(inp: np.ndarray, dout: np.ndarray) -> np.ndarray:
    k = inp.shape[1] - dout.shape[1] + 1
    windows = np.lib.stride_tricks.sliding_window_view(inp, (k, k), axis=(1, 2))
    return np.einsum("nyxcij,nyxf->fijc", windows, dout, optimize=True)


def _conv_input_grad(dout: np.ndarray, filters: np.ndarray) -> np.ndarray:
    k = filters.shape[1]
    padded = np.pad(dout, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    flipped = filters[:, ::-1, ::-1, :].transpose(3, 1, 2, 0)  # (Cin, k, k, F)
    return _conv_batch(padded, np.ascontiguousarray(flipped))


def backward_from_cache(model: CnnModel, cache: dict, targets: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of mean cross-entropy w.r.t. every parameter tensor."""
    n = cache["x"].shape[0]
    onehot = np.zeros_like(cache["probs"])
    onehot[np.arange(n), targets] = 1
    dz4 = (cache["probs"] - onehot) / model.dtype.type(n)
    grads: dict[str, np.ndarray] = {}
    grads["dense2_w"] = dz4.T @ cache["d3"]
    grads["dense2_b"] = dz4.sum(axis=0)
    dd3 = dz4 @ model.dense2_w
    if cache["mask"] is not None:
        keep = 1.0 - model.spec.dropout
        dd3 = dd3 * cache["mask"] / model.dtype.type(keep)
    dz3 = dd3 * (cache["z3"] > 0)
    grads["dense1_w"] = dz3.T @ cache["flat"]
    grads["dense1_b"] = dz3.sum(axis=0)
    da2 = (dz3 @ model.dense1_w).reshape(cache["a2"].shape)
    dz2 = da2 * (cache["z2"] > 0)
    grads["conv2_w"] = _conv_filter_grad(cache["a1"], dz2)
    grads["conv2_b"] = dz2.sum(axis=(0, 1, 2))
    da1 = _conv_input_grad(dz2, model.conv2_w)
    dz1 = da1 * (cache["z1"] > 0)
    grads["conv1_w"] = _conv_filter_grad(cache["x"], dz1)
    grads["conv1_b"] = dz1.sum(axis=(0, 1, 2))
    return grads


def backward(model: CnnModel, patch: np.ndarray, target_class: int,
             train_mode: bool = False,
             rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Single-sample loss gradients (forward pass included)."""
    _, cache = forward_batch(model, patch[None], train_mode=train_mode, rng=rng)
    return backward_from_cache(model, cache, np.array([target_class]))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_cnn(spec: CnnSpec, train_set: PatchSet,
              config: TrainConfig) -> tuple[CnnModel, list[float]]:
    """Minibatch SGD with momentum; returns the model and per-epoch mean loss.

    Deterministic under a fixed seed on a single thread: init, the per-epoch
    shuffle, and dropout masks all consume one generator in a fixed order.
    Raises NumericError as soon as a non-finite loss appears.
    """
    x = np.asarray(train_set.patches, dtype=np.float32)
    class_ids = np.unique(train_set.labels)
    if class_ids.size != spec.num_classes:
        raise DataError(
            f"training set has {class_ids.size} classes, spec expects {spec.num_classes}"
        )
    targets = np.searchsorted(class_ids, train_set.labels)
    rng = np.random.default_rng(config.rng_seed)
    model = _init_with_rng(spec, rng, config.rng_seed, np.float32, class_ids)
    velocity = {name: np.zeros_like(arr) for name, arr in model.params()}
    lr = np.float32(config.learning_rate)
    mom = np.float32(config.momentum)
    n = x.shape[0]
    losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            probs, cache = forward_batch(model, x[batch], train_mode=True, rng=rng)
            loss = cross_entropy(probs, targets[batch])
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss {loss} in epoch {epoch + 1} "
                    f"(batch starting at {start}); lower the learning rate"
                )
            total += loss * batch.size
            grads = backward_from_cache(model, cache, targets[batch])
            for name, param in model.params():
                vel = velocity[name]
                vel *= mom
                vel -= lr * grads[name]
                param += vel
        losses.append(total / n)
    return model, losses


# ---------------------------------------------------------------------------
# Inference over a raster
# ---------------------------------------------------------------------------


def predict_labels(model: CnnModel, patches: np.ndarray) -> np.ndarray:
    """Inference-mode labels for a patch batch; smallest class id wins ties."""
    probs, _ = forward_batch(model, patches, train_mode=False)
    return model.class_ids[probs.argmax(axis=1)].astype(np.uint16)


def classify_cnn(model: CnnModel, feature_raster: np.ndarray,
                 batch_rows: int = 8, threads: int = 1) -> LabelMap:
    """Classify every pixel of an (H, W, K) raster from its zero-padded patch."""
    height, width, channels = feature_raster.shape
    if channels != model.spec.input_channels:
        raise DataError(
            f"raster has {channels} channels, model expects {model.spec.input_channels}"
        )
    window = model.spec.input_window

    def run_rows(r0: int) -> np.ndarray:
        r1 = min(r0 + batch_rows, height)
        rows = np.repeat(np.arange(r0, r1), width)
        cols = np.tile(np.arange(width), r1 - r0)
        patches = patches_at(feature_raster, rows, cols, window)
        return predict_labels(model, patches)

    starts = list(range(0, height, batch_rows))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_rows, starts))
    else:
        parts = [run_rows(r0) for r0 in starts]
    labels = np.concatenate(parts).reshape(height, width)
    return LabelMap(height=height, width=width, labels=labels)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_cnn(model: CnnModel, path) -> None:
    """HSN1 container: JSON header (spec, seed, class ids) + raw parameters."""
    header = {
        "dtype": "f32" if model.dtype == np.float32 else "f64",
        "spec": asdict(model.spec),
        "class_ids": model.class_ids.tolist(),
        "seed": model.seed,
    }
    wire = "<f4" if model.dtype == np.float32 else "<f8"
    payload = b"".join(np.ascontiguousarray(arr, dtype=wire).tobytes()
                       for _, arr in model.params())
    write_container(path, MAGIC_CNN, header, payload)


def load_cnn(path) -> CnnModel:
    header, payload = read_container(path, MAGIC_CNN)
    spec = CnnSpec(**header["spec"])
    dtype = np.float32 if header.get("dtype") == "f32" else np.float64
    model = init_model(spec, seed=int(header.get("seed", 0)), dtype=dtype,
                       class_ids=np.asarray(header["class_ids"], dtype=np.int64))
    wire = "<f4" if dtype == np.float32 else "<f8"
    flat = np.frombuffer(payload, dtype=wire)
    expect = sum(arr.size for _, arr in model.params())
    if flat.size != expect:
        raise DataError(f"{path}: payload has {flat.size} values, expected {expect}")
    offset = 0
    for name, arr in model.params():
        chunk = flat[offset:offset + arr.size].reshape(arr.shape).astype(dtype)
        setattr(model, name, chunk)
        offset += arr.size
    return model
