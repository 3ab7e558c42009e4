"""Differentiable classifiers with analytically exact input gradients.

Three reference architectures are shipped, all pure numpy:

* ``linear``    - a single dense layer, used by the enumeration oracles;
* ``mlp-2x64``  - two ReLU hidden layers of 64 units;
* ``cnn-tiny``  - one 3x3 conv, 2x2 average pool, dense head, for image-shaped
  inputs.

Parameters are stored as a flat float32 vector (the checkpoint payload
format); all forward/backward arithmetic runs in float64.  Each architecture
implements ``forward_cached``/``backward`` by hand so gradient checks need no
autodiff framework.
"""

from __future__ import annotations

import abc
import json
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import losses
from .errors import (
    ConfigError,
    ContractViolation,
    IncompatibleCheckpointError,
    InputDomainError,
    IntegrityError,
)

CHECKPOINT_MAGIC = b"DARDCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SgdConfig:
    """Momentum SGD hyperparameters."""

    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")


@dataclass
class ModelState:
    """Flat float32 parameter vector plus its architecture tag.

    ``version`` is the checkpoint format revision the state serializes under.
    """

    parameters: np.ndarray
    architecture_id: str
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        self.parameters = np.ascontiguousarray(self.parameters, dtype=np.float32)
        if self.parameters.ndim != 1:
            raise ContractViolation("parameters must be a flat vector")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelState):
            return NotImplemented
        return (
            self.architecture_id == other.architecture_id
            and self.version == other.version
            and self.parameters.shape == other.parameters.shape
            and bool(np.all(self.parameters == other.parameters))
        )


class DifferentiableClassifier(abc.ABC):
    """Contract every attack and trainer consumes.

    Subclasses define the layer arithmetic; this base class owns parameter
    flattening, state round-trips, and input validation.  Forward passes are
    pure functions of (parameters, input).
    """

    architecture_id: str

    def __init__(self, input_shape: tuple[int, ...], num_classes: int):
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)

    # -- parameter plumbing ------------------------------------------------

    @abc.abstractmethod
    def _param_arrays(self) -> list[np.ndarray]:
        """Layer parameter arrays in a fixed flattening order."""

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self._param_arrays())

    def get_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._param_arrays()]).astype(
            np.float32
        )

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float32).ravel()
        if flat.size != self.n_params:
            raise ContractViolation(
                f"{self.architecture_id} expects {self.n_params} parameters, got {flat.size}"
            )
        offset = 0
        for arr in self._param_arrays():
            arr[...] = flat[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size

    def state(self) -> ModelState:
        return ModelState(self.get_params(), self.architecture_id)

    def load_state(self, state: ModelState) -> None:
        if state.architecture_id != self.architecture_id:
            raise IncompatibleCheckpointError(
                f"state for {state.architecture_id!r} cannot load into "
                f"{self.architecture_id!r}"
            )
        if state.parameters.size != self.n_params:
            raise IncompatibleCheckpointError(
                f"{self.architecture_id} expects {self.n_params} parameters, "
                f"checkpoint has {state.parameters.size}"
            )
        self.set_params(state.parameters)

    # -- forward / backward ------------------------------------------------

    def _validate_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 + len(self.input_shape) or x.shape[1:] != self.input_shape:
            raise ContractViolation(
                f"expected batch of shape (n, {', '.join(map(str, self.input_shape))}), "
                f"got {x.shape}"
            )
        if not np.isfinite(x).all():
            raise InputDomainError("input batch contains non-finite values")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for a batch; (n, num_classes) float64."""
        logits, _ = self.forward_cached(x)
        return logits

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        x = self._validate_input(x)
        return self._forward(x)

    @abc.abstractmethod
    def _forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        """Return (logits, cache) where cache feeds :meth:`backward`."""

    @abc.abstractmethod
    def backward(
        self, cache: tuple, dlogits: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Pull a logit gradient back to (flat parameter gradient, input gradient)."""


class LinearModel(DifferentiableClassifier):
    """logits = x @ W.T + b; the closed-form case for enumeration oracles."""

    architecture_id = "linear"

    def __init__(self, input_shape, num_classes, rng: np.random.Generator):
        super().__init__(input_shape, num_classes)
        (d,) = self.input_shape
        bound = 1.0 / np.sqrt(d)
        self.w = rng.uniform(-bound, bound, size=(num_classes, d)).astype(np.float32)
        self.b = np.zeros(num_classes, dtype=np.float32)

    def _param_arrays(self):
        return [self.w, self.b]

    def _forward(self, x):
        w = self.w.astype(np.float64)
        b = self.b.astype(np.float64)
        logits = x @ w.T + b
        return logits, (x,)

    def backward(self, cache, dlogits):
        (x,) = cache
        w = self.w.astype(np.float64)
        dw = dlogits.T @ x
        db = dlogits.sum(axis=0)
        dx = dlogits @ w
        return np.concatenate([dw.ravel(), db]), dx


class Mlp2x64(DifferentiableClassifier):
    """Two ReLU hidden layers of 64 units and a linear head."""

    architecture_id = "mlp-2x64"
    hidden = 64

    def __init__(self, input_shape, num_classes, rng: np.random.Generator):
        super().__init__(input_shape, num_classes)
        (d,) = self.input_shape
        h = self.hidden

        def init(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(np.float32)

        self.w1 = init(d, (h, d))
        self.b1 = init(d, (h,))
        self.w2 = init(h, (h, h))
        self.b2 = init(h, (h,))
        self.w3 = init(h, (num_classes, h))
        self.b3 = init(h, (num_classes,))

    def _param_arrays(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def _forward(self, x):
        w1, w2, w3 = (a.astype(np.float64) for a in (self.w1, self.w2, self.w3))
        b1, b2, b3 = (a.astype(np.float64) for a in (self.b1, self.b2, self.b3))
        z1 = x @ w1.T + b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ w2.T + b2
        a2 = np.maximum(z2, 0.0)
        logits = a2 @ w3.T + b3
        return logits, (x, z1, a1, z2, a2)

    def backward(self, cache, dlogits):
        x, z1, a1, z2, a2 = cache
        w1, w2, w3 = (a.astype(np.float64) for a in (self.w1, self.w2, self.w3))
        dw3 = dlogits.T @ a2
        db3 = dlogits.sum(axis=0)
        dz2 = (dlogits @ w3) * (z2 > 0)
        dw2 = dz2.T @ a1
        db2 = dz2.sum(axis=0)
        dz1 = (dz2 @ w2) * (z1 > 0)
        dw1 = dz1.T @ x
        db1 = dz1.sum(axis=0)
        dx = dz1 @ w1
        grads = np.concatenate(
            [dw1.ravel(), db1, dw2.ravel(), db2, dw3.ravel(), db3]
        )
        return grads, dx


def _im2col3(x: np.ndarray) -> np.ndarray:
    """Unfold 3x3 same-padding patches: (n, ci, h, w) -> (n, ci*9, h*w)."""
    n, ci, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, ci, 9, h, w))
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, k] = xp[:, :, di : di + h, dj : dj + w]
            k += 1
    return cols.reshape(n, ci * 9, h * w)


def _col2im3(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Scatter-add adjoint of :func:`_im2col3`."""
    n, ci, h, w = shape
    d = dcols.reshape(n, ci, 9, h, w)
    xp = np.zeros((n, ci, h + 2, w + 2))
    k = 0
    for di in range(3):
        for dj in range(3):
            xp[:, :, di : di + h, dj : dj + w] += d[:, :, k]
            k += 1
    return xp[:, :, 1 : 1 + h, 1 : 1 + w]


class CnnTiny(DifferentiableClassifier):
    """One 3x3 conv (same padding) + ReLU + 2x2 average pool + dense head."""

    architecture_id = "cnn-tiny"
    channels = 8

    def __init__(self, input_shape, num_classes, rng: np.random.Generator):
        super().__init__(input_shape, num_classes)
        ci, h, w = self.input_shape
        if h % 2 or w % 2:
            raise ConfigError(f"cnn-tiny needs even spatial dims, got {h}x{w}")
        co = self.channels
        fan_conv = ci * 9
        bound = 1.0 / np.sqrt(fan_conv)
        self.k = rng.uniform(-bound, bound, size=(co, ci * 9)).astype(np.float32)
        self.kb = rng.uniform(-bound, bound, size=(co,)).astype(np.float32)
        fan_fc = co * (h // 2) * (w // 2)
        bound = 1.0 / np.sqrt(fan_fc)
        self.w = rng.uniform(-bound, bound, size=(num_classes, fan_fc)).astype(
            np.float32
        )
        self.b = rng.uniform(-bound, bound, size=(num_classes,)).astype(np.float32)

    def _param_arrays(self):
        return [self.k, self.kb, self.w, self.b]

    def _forward(self, x):
        n = x.shape[0]
        ci, h, w = self.input_shape
        co = self.channels
        kk = self.k.astype(np.float64)
        kb = self.kb.astype(np.float64)
        fw = self.w.astype(np.float64)
        fb = self.b.astype(np.float64)

        cols = _im2col3(x)                                  # (n, ci*9, h*w)
        z = np.einsum("of,nfp->nop", kk, cols) + kb[None, :, None]
        a = np.maximum(z, 0.0)
        am = a.reshape(n, co, h, w)
        pooled = am.reshape(n, co, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        flat = pooled.reshape(n, -1)
        logits = flat @ fw.T + fb
        return logits, (x, cols, z, flat)

    def backward(self, cache, dlogits):
        x, cols, z, flat = cache
        n = x.shape[0]
        ci, h, w = self.input_shape
        co = self.channels
        kk = self.k.astype(np.float64)
        fw = self.w.astype(np.float64)

        dw = dlogits.T @ flat
        db = dlogits.sum(axis=0)
        dflat = dlogits @ fw
        dpooled = dflat.reshape(n, co, h // 2, w // 2)
        # average pool spreads each output gradient evenly over its 2x2 window
        da = np.repeat(np.repeat(dpooled, 2, axis=2), 2, axis=3) / 4.0
        dz = da.reshape(n, co, h * w) * (z > 0)
        dk = np.einsum("nop,nfp->of", dz, cols)
        dkb = dz.sum(axis=(0, 2))
        dcols = np.einsum("of,nop->nfp", kk, dz)
        dx = _col2im3(dcols, (n, ci, h, w))
        return np.concatenate([dk.ravel(), dkb, dw.ravel(), db]), dx


ARCHITECTURES: dict[str, type[DifferentiableClassifier]] = {
    cls.architecture_id: cls for cls in (LinearModel, Mlp2x64, CnnTiny)
}


def build_model(
    architecture_id: str,
    input_shape: tuple[int, ...],
    num_classes: int,
    seed: int = 0,
) -> DifferentiableClassifier:
    """Construct a reference architecture with seeded uniform initialization."""
    if architecture_id not in ARCHITECTURES:
        raise ConfigError(
            f"unknown architecture {architecture_id!r}; "
            f"available: {sorted(ARCHITECTURES)}"
        )
    rng = np.random.default_rng(seed)
    return ARCHITECTURES[architecture_id](input_shape, num_classes, rng)


# -- module-level operations ------------------------------------------------


def forward_logits(model: DifferentiableClassifier, x: np.ndarray) -> np.ndarray:
    """Batch logits; validates shape and finiteness, never mutates the model."""
    return model.forward(x)


def input_gradient(
    model: DifferentiableClassifier,
    x: np.ndarray,
    y: np.ndarray,
    loss_kind: str = "ce",
    **loss_params,
) -> np.ndarray:
    """Gradient of the scalar reduced loss with respect to the input batch."""
    logits, cache = model.forward_cached(x)
    _, dlogits = losses.loss_logit_grad(loss_kind, logits, y, **loss_params)
    _, dx = model.backward(cache, dlogits)
    return dx


def sgd_step(
    state: ModelState,
    grads: np.ndarray,
    cfg: SgdConfig,
    momentum_buffer: np.ndarray,
) -> tuple[ModelState, np.ndarray]:
    """One momentum-SGD update on a flat parameter vector.

    Weight decay is folded into the gradient (g + wd * theta) before the
    momentum accumulation; the buffer is kept in float64 by the caller.
    """
    cfg.validate()
    g = np.asarray(grads, dtype=np.float64).ravel()
    if g.size != state.parameters.size:
        raise ContractViolation(
            f"gradient length {g.size} != parameter count {state.parameters.size}"
        )
    theta = state.parameters.astype(np.float64)
    if cfg.weight_decay:
        g = g + cfg.weight_decay * theta
    buf = cfg.momentum * np.asarray(momentum_buffer, dtype=np.float64) + g
    theta = theta - cfg.learning_rate * buf
    return replace(state, parameters=theta.astype(np.float32)), buf


# -- checkpoint persistence ---------------------------------------------------
#
# Layout: magic "DARDCKPT" | version u16 | arch-id length u16 + utf-8 bytes |
# parameter count u64 | float32 little-endian payload | crc32 u32 over all
# preceding bytes.


def save_checkpoint(state: ModelState, path, metadata: dict | None = None) -> None:
    """Write a ModelState; optional metadata goes to a JSON sidecar."""
    arch = state.architecture_id.encode("utf-8")
    body = (
        CHECKPOINT_MAGIC
        + struct.pack("<H", state.version)
        + struct.pack("<H", len(arch))
        + arch
        + struct.pack("<Q", state.parameters.size)
        + state.parameters.astype("<f4").tobytes()
    )
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(body)
    if metadata is not None:
        Path(str(path) + ".meta.json").write_text(
            json.dumps(metadata, sort_keys=True, indent=2) + "\n"
        )


def load_checkpoint(path) -> ModelState:
    """Read a ModelState; integrity is verified before anything is returned."""
    data = Path(path).read_bytes()
    min_len = len(CHECKPOINT_MAGIC) + 2 + 2 + 8 + 4
    if len(data) < min_len or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"not a checkpoint file: {path}")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise IntegrityError(f"checksum mismatch (corrupt or truncated): {path}")

    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<H", data, off)
    off += 2
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    (arch_len,) = struct.unpack_from("<H", data, off)
    off += 2
    arch = data[off : off + arch_len].decode("utf-8")
    off += arch_len
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    payload = data[off:-4]
    if len(payload) != 4 * count:
        raise IntegrityError(
            f"payload holds {len(payload) // 4} floats, header declares {count}"
        )
    params = np.frombuffer(payload, dtype="<f4").copy()
    return ModelState(params, arch, version)


def load_checkpoint_metadata(path) -> dict | None:
    """Metadata sidecar written next to the checkpoint, if present."""
    sidecar = Path(str(path) + ".meta.json")
    if not sidecar.exists():
        return None
    return json.loads(sidecar.read_text())
