"""Per-pixel segmentation network M = D o E with analytic gradients.

The encoder is a linear + ReLU map of the reflect-padded patch around each
pixel; decoders are linear heads over the encoder features.  Both carry a
bias row as their last weight row.  Every operation returns new objects, so
a model snapshot can be shared with evaluation code while training goes on.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ClassSet, Image, LabelMap, RecallError, Sample

FORMAT_VERSION = 1
_DEC_MAGIC = b"RCDD"
_ENC_MAGIC = b"RCDE"
_MODEL_MAGIC = b"RCDM"


class DimMismatch(RecallError):
    pass


class LabelOutOfRange(RecallError):
    pass


class ShapeMismatch(RecallError):
    pass


class ClassCollision(RecallError):
    pass


def _ro(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Encoder:
    weights: np.ndarray  # (3 * patch_size**2 + 1, F)
    patch_size: int = 5
    frozen: bool = False

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be a positive odd number")
        w = _ro(self.weights)
        if w.ndim != 2 or w.shape[0] != 3 * self.patch_size**2 + 1:
            raise DimMismatch(f"encoder weights must have {3 * self.patch_size**2 + 1} rows, got {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def freeze(self) -> "Encoder":
        return replace(self, frozen=True)


@dataclass(frozen=True, eq=False)
class Decoder:
    class_list: ClassSet
    weights: np.ndarray  # (F + 1, |class_list|)

    def __post_init__(self):
        w = _ro(self.weights)
        if w.ndim != 2 or w.shape[1] != len(self.class_list):
            raise DimMismatch(f"decoder weights {w.shape} do not match {len(self.class_list)} classes")
        object.__setattr__(self, "weights", w)

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0] - 1


@dataclass(frozen=True, eq=False)
class SegModel:
    encoder: Encoder
    decoder: Decoder

    def __post_init__(self):
        if self.encoder.feature_dim != self.decoder.feature_dim:
            raise DimMismatch("encoder and decoder feature dimensions differ")

    @property
    def class_list(self) -> ClassSet:
        return self.decoder.class_list


@dataclass
class Gradients:
    decoder: np.ndarray
    encoder: np.ndarray | None = None
    loss: float = float("nan")


@dataclass
class OptimizerState:
    lr0: float = 5e-4
    lr_end: float = 5e-6
    power: float = 0.9
    momentum: float = 0.9
    total_steps: int = 1
    step_counter: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr0 <= 0 or self.lr_end <= 0 or self.power <= 0:
            raise ValueError("lr0, lr_end and power must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")


# --------------------------------------------------------------------------
# construction


def init_encoder(patch_size: int = 5, feature_dim: int = 32, seed: int = 0) -> Encoder:
    rng = np.random.default_rng(seed)
    fan_in = 3 * patch_size**2
    w = np.zeros((fan_in + 1, feature_dim))
    w[:fan_in] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, feature_dim))
    w[fan_in] = rng.normal(0.0, 0.1, size=feature_dim)
    return Encoder(w, patch_size)


def init_decoder(class_list: Iterable[int], feature_dim: int, seed: int | None = None, scale: float = 0.01) -> Decoder:
    """Zero decoder, or small Gaussian weights when ``seed`` is given."""
    classes = ClassSet(class_list)
    shape = (feature_dim + 1, len(classes))
    if seed is None:
        return Decoder(classes, np.zeros(shape))
    return Decoder(classes, np.random.default_rng(seed).normal(0.0, scale, size=shape))


# --------------------------------------------------------------------------
# forward pass


def patch_matrix(image: Image, patch_size: int) -> np.ndarray:
    """(H*W, 3*p*p + 1) matrix of flattened reflect-padded patches plus a ones column.

    Patch entries are ordered (row offset, column offset, channel).
    """
    r = patch_size // 2
    px = image.pixels
    if px.shape[0] < patch_size or px.shape[1] < patch_size:
        raise DimMismatch(f"image {px.shape[:2]} smaller than patch size {patch_size}")
    padded = np.pad(px, ((r, r), (r, r), (0, 0)), mode="reflect")
    win = sliding_window_view(padded, (patch_size, patch_size), axis=(0, 1))  # H, W, 3, p, p
    h, w = px.shape[:2]
    flat = win.transpose(0, 1, 3, 4, 2).reshape(h * w, 3 * patch_size * patch_size)
    return np.concatenate([flat, np.ones((h * w, 1))], axis=1)


def _with_bias(features: np.ndarray) -> np.ndarray:
    return np.concatenate([features, np.ones(features.shape[:-1] + (1,))], axis=-1)


def encode(enc: Encoder, image: Image) -> np.ndarray:
    x = patch_matrix(image, enc.patch_size)
    f = np.maximum(x @ enc.weights, 0.0)
    return f.reshape(image.height, image.width, enc.feature_dim)


def decode(dec: Decoder, features: np.ndarray) -> np.ndarray:
    if features.shape[-1] != dec.feature_dim:
        raise DimMismatch(f"features have dimension {features.shape[-1]}, decoder expects {dec.feature_dim}")
    return _with_bias(features) @ dec.weights


def logits(model: SegModel, image: Image) -> np.ndarray:
    return decode(model.decoder, encode(model.encoder, image))


def label_lookup(class_list: ClassSet) -> np.ndarray:
    """Table mapping a class id (0..255) to its decoder column, -1 if absent."""
    lut = np.full(256, -1, dtype=np.int64)
    ids = class_list.to_array()
    lut[ids] = np.arange(len(ids))
    return lut


def label_columns(labels: np.ndarray, class_list: ClassSet) -> np.ndarray:
    cols = label_lookup(class_list)[np.asarray(labels, dtype=np.int64)]
    if (cols < 0).any():
        bad = sorted(set(np.asarray(labels)[cols < 0].ravel().tolist()))
        raise LabelOutOfRange(f"labels {bad} are not in class list {class_list}")
    return cols


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def ce_loss(logit_map: np.ndarray, labels: LabelMap, class_list: ClassSet) -> float:
    cols = label_columns(labels.labels, class_list).ravel()
    z = logit_map.reshape(-1, logit_map.shape[-1])
    if z.shape[1] != len(class_list):
        raise DimMismatch("logit channels do not match the class list")
    lsm = _log_softmax(z)
    return float(-lsm[np.arange(z.shape[0]), cols].mean())


def predict(model: SegModel, image: Image) -> LabelMap:
    """Per-pixel argmax; ties go to the lowest class id."""
    z = logits(model, image)
    ids = model.class_list.to_array()
    return LabelMap(ids[np.argmax(z, axis=-1)])


def predict_from_features(dec: Decoder, features: np.ndarray) -> np.ndarray:
    """Argmax labels from already biased feature rows (N, F + 1)."""
    return dec.class_list.to_array()[np.argmax(features @ dec.weights, axis=-1)]


# --------------------------------------------------------------------------
# gradients


def decoder_loss_grad(
    feats_b: np.ndarray, cols: np.ndarray, weights: np.ndarray, pixel_weight: np.ndarray | float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted CE and its gradient w.r.t. decoder weights.

    ``feats_b`` are biased feature rows (N, F + 1), ``cols`` the target column
    per row, ``pixel_weight`` the weight of each row in the mean.  Also
    returns dL/dlogits for backpropagation into the encoder.
    """
    z = feats_b @ weights
    lsm = _log_softmax(z)
    n = z.shape[0]
    pw = np.broadcast_to(np.asarray(pixel_weight, dtype=np.float64), (n,))
    loss = float(-(pw * lsm[np.arange(n), cols]).sum())
    dz = np.exp(lsm)
    dz[np.arange(n), cols] -= 1.0
    dz *= pw[:, None]
    return loss, feats_b.T @ dz, dz


def _batch_pixel_weights(sizes: Sequence[int]) -> np.ndarray:
    # mean over samples of each sample's per-pixel mean
    return np.concatenate([np.full(n, 1.0 / (n * len(sizes))) for n in sizes])


def grad(model: SegModel, batch: Sequence[Sample], trainable: str = "decoder-only") -> Gradients:
    """Exact gradients of the batch-mean cross-entropy."""
    if trainable not in ("decoder-only", "all"):
        raise ValueError("trainable must be 'decoder-only' or 'all'")
    if not batch:
        raise ValueError("batch must not be empty")
    enc, dec = model.encoder, model.decoder
    xs = [patch_matrix(s.image, enc.patch_size) for s in batch]
    cols = np.concatenate([label_columns(s.labels.labels, dec.class_list).ravel() for s in batch])
    x = np.concatenate(xs, axis=0)
    pre = x @ enc.weights
    feats_b = _with_bias(np.maximum(pre, 0.0))
    pw = _batch_pixel_weights([len(a) for a in xs])
    loss, g_dec, dz = decoder_loss_grad(feats_b, cols, dec.weights, pw)
    if trainable == "decoder-only":
        return Gradients(decoder=g_dec, encoder=None, loss=loss)
    dfeat = dz @ dec.weights[:-1].T
    dpre = dfeat * (pre > 0.0)
    return Gradients(decoder=g_dec, encoder=x.T @ dpre, loss=loss)


def batch_loss(model: SegModel, batch: Sequence[Sample]) -> float:
    return float(np.mean([ce_loss(logits(model, s.image), s.labels, model.class_list) for s in batch]))


# --------------------------------------------------------------------------
# optimisation


def poly_lr(state: OptimizerState) -> float:
    t, T = state.step_counter, state.total_steps
    if t > T:
        raise ValueError(f"step {t} beyond schedule length {T}")
    return (state.lr0 - state.lr_end) * (1.0 - t / T) ** state.power + state.lr_end


def momentum_update(weights: np.ndarray, g: np.ndarray, velocity: np.ndarray | None, lr: float, momentum: float):
    v = g.copy() if velocity is None else momentum * velocity + g
    return weights - lr * v, v


def sgd_step(model: SegModel, grads: Gradients, state: OptimizerState) -> tuple[SegModel, OptimizerState]:
    """Momentum SGD with the polynomial learning rate of the current step."""
    lr = poly_lr(state)
    velocity = dict(state.velocity)
    enc, dec = model.encoder, model.decoder
    parts = [("decoder", dec.weights, grads.decoder)]
    if grads.encoder is not None:
        if enc.frozen:
            raise RecallError("cannot update a frozen encoder")
        parts.append(("encoder", enc.weights, grads.encoder))
    updated = {}
    for key, w, g in parts:
        if g.shape != w.shape:
            raise ShapeMismatch(f"{key} gradient {g.shape} does not match weights {w.shape}")
        v_old = velocity.get(key)
        if v_old is not None and v_old.shape != w.shape:
            raise ShapeMismatch(f"{key} velocity {v_old.shape} does not match weights {w.shape}")
        updated[key], velocity[key] = momentum_update(w, g, v_old, lr, state.momentum)
    new_dec = replace(dec, weights=updated["decoder"])
    new_enc = replace(enc, weights=updated["encoder"]) if "encoder" in updated else enc
    new_state = replace(state, step_counter=state.step_counter + 1, velocity=velocity)
    return SegModel(new_enc, new_dec), new_state


def grow_decoder(dec: Decoder, new_classes: Iterable[int]) -> Decoder:
    """Add zero-initialised columns for ``new_classes``; old columns are copied bit-exactly."""
    new = ClassSet(new_classes)
    if not new.isdisjoint(dec.class_list):
        raise ClassCollision(f"classes {new & dec.class_list} already in decoder")
    merged = dec.class_list | new
    w = np.zeros((dec.weights.shape[0], len(merged)))
    lut = label_lookup(merged)
    w[:, lut[dec.class_list.to_array()]] = dec.weights
    return Decoder(merged, w)


# --------------------------------------------------------------------------
# serialisation


def decoder_header_size(n_classes: int) -> int:
    return struct.calcsize("<4sHII") + 2 * n_classes


def decoder_nbytes(feature_dim: int, n_classes: int) -> int:
    """Closed-form size of a serialised decoder."""
    return decoder_header_size(n_classes) + 8 * (feature_dim + 1) * n_classes


def serialize_decoder(dec: Decoder) -> bytes:
    n = len(dec.class_list)
    head = struct.pack("<4sHII", _DEC_MAGIC, FORMAT_VERSION, dec.feature_dim, n)
    ids = np.asarray(dec.class_list.ids, dtype="<u2").tobytes()
    return head + ids + dec.weights.astype("<f8").tobytes()


def deserialize_decoder(blob: bytes) -> Decoder:
    magic, version, f, n = struct.unpack_from("<4sHII", blob, 0)
    if magic != _DEC_MAGIC or version != FORMAT_VERSION:
        raise ValueError("not a decoder blob of a supported version")
    off = struct.calcsize("<4sHII")
    ids = np.frombuffer(blob, dtype="<u2", count=n, offset=off)
    off += 2 * n
    w = np.frombuffer(blob, dtype="<f8", count=(f + 1) * n, offset=off).reshape(f + 1, n)
    return Decoder(ClassSet(ids.tolist()), w)


def encoder_nbytes(patch_size: int, feature_dim: int) -> int:
    return struct.calcsize("<4sHIIB") + 8 * (3 * patch_size**2 + 1) * feature_dim


def serialize_encoder(enc: Encoder) -> bytes:
    head = struct.pack("<4sHIIB", _ENC_MAGIC, FORMAT_VERSION, enc.patch_size, enc.feature_dim, int(enc.frozen))
    return head + enc.weights.astype("<f8").tobytes()


def deserialize_encoder(blob: bytes) -> Encoder:
    magic, version, p, f, frozen = struct.unpack_from("<4sHIIB", blob, 0)
    if magic != _ENC_MAGIC or version != FORMAT_VERSION:
        raise ValueError("not an encoder blob of a supported version")
    off = struct.calcsize("<4sHIIB")
    w = np.frombuffer(blob, dtype="<f8", count=(3 * p * p + 1) * f, offset=off).reshape(3 * p * p + 1, f)
    return Encoder(w, p, bool(frozen))


def model_nbytes(patch_size: int, feature_dim: int, n_classes: int) -> int:
    return struct.calcsize("<4sHII") + encoder_nbytes(patch_size, feature_dim) + decoder_nbytes(feature_dim, n_classes)


def serialize_model(model: SegModel) -> bytes:
    e, d = serialize_encoder(model.encoder), serialize_decoder(model.decoder)
    return struct.pack("<4sHII", _MODEL_MAGIC, FORMAT_VERSION, len(e), len(d)) + e + d


def deserialize_model(blob: bytes) -> SegModel:
    magic, version, ne, nd = struct.unpack_from("<4sHII", blob, 0)
    if magic != _MODEL_MAGIC or version != FORMAT_VERSION:
        raise ValueError("not a model blob of a supported version")
    off = struct.calcsize("<4sHII")
    return SegModel(deserialize_encoder(blob[off : off + ne]), deserialize_decoder(blob[off + ne : off + ne + nd]))
