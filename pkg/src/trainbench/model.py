"""A small named-layer CNN with hand-written forward and backward passes.

conv1(3x3, 8) -> relu -> maxpool2 -> conv2(3x3, 16) -> relu -> maxpool2
-> flatten -> dense1(32) -> relu -> head(C)

Tensors are NHWC. Convolutions use 'same' padding so the spatial size only
shrinks at the pools; input height and width must be multiples of 4.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import RngStream

LAYERS = ("conv1", "conv2", "dense1", "head")
SOFTMAX_CE = "softmax_cross_entropy"
SVM_HINGE = "linear_svm_hinge"
HEAD_KINDS = (SOFTMAX_CE, SVM_HINGE)

# freezing boundaries, from fully trainable to fully frozen
FREEZE_ORDER = ("head", "dense1", "conv2", "conv1")


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class Architecture:
    height: int = 32
    width: int = 32
    channels: int = 3
    n_classes: int = 5
    conv1: int = 8
    conv2: int = 16
    dense1: int = 32
    dtype: str = "float64"

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ShapeError("input height and width must be multiples of 4")
        if self.channels not in (1, 3):
            raise ShapeError("channels must be 1 or 3")
        if self.n_classes < 2:
            raise ShapeError("need at least 2 classes")

    @property
    def flat_features(self) -> int:
        return (self.height // 4) * (self.width // 4) * self.conv2

    def shapes(self) -> dict:
        return {
            "conv1": ((self.conv1, self.channels, 3, 3), (self.conv1,)),
            "conv2": ((self.conv2, self.conv1, 3, 3), (self.conv2,)),
            "dense1": ((self.flat_features, self.dense1), (self.dense1,)),
            "head": ((self.dense1, self.n_classes), (self.n_classes,)),
        }

    def with_classes(self, n_classes: int) -> "Architecture":
        return Architecture(**{**asdict(self), "n_classes": n_classes})

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()


class ModelParams:
    """Immutable snapshot of weights and biases keyed by layer name."""

    def __init__(self, arch: Architecture, tensors: dict):
        self.arch = arch
        shapes = arch.shapes()
        if set(tensors) != set(LAYERS):
            raise ShapeError(f"expected layers {LAYERS}, got {sorted(tensors)}")
        frozen = {}
        for name in LAYERS:
            w, b = tensors[name]
            w = np.array(w, dtype=arch.dtype)
            b = np.array(b, dtype=arch.dtype)
            if (w.shape, b.shape) != shapes[name]:
                raise ShapeError(f"{name}: got {w.shape}/{b.shape}, expected {shapes[name]}")
            w.setflags(write=False)
            b.setflags(write=False)
            frozen[name] = (w, b)
        self.tensors = frozen

    def __getitem__(self, name):
        return self.tensors[name]

    def replace(self, updates: dict) -> "ModelParams":
        return ModelParams(self.arch, {**self.tensors, **updates})

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for name in LAYERS for t in self.tensors[name]])

    def equal(self, other: "ModelParams", layers=LAYERS) -> bool:
        return all(
            np.array_equal(a, b)
            for name in layers
            for a, b in zip(self.tensors[name], other.tensors[name])
        )


def init_model(arch: Architecture, rng: RngStream, scheme: str = "kaiming") -> ModelParams:
    """Kaiming-uniform fan-in weights, bound sqrt(6 / fan_in); zero biases."""
    if scheme != "kaiming":
        raise ValueError(f"unknown init scheme {scheme!r}")
    tensors = {}
    for name, (wshape, bshape) in arch.shapes().items():
        fan_in = int(np.prod(wshape[1:])) if name.startswith("conv") else wshape[0]
        bound = np.sqrt(6.0 / fan_in)
        tensors[name] = (rng.uniform(-bound, bound, size=wshape), np.zeros(bshape))
    return ModelParams(arch, tensors)


def reinit_head(params: ModelParams, n_classes: int, rng: RngStream) -> ModelParams:
    """New head for ``n_classes`` outputs; every other layer is kept as-is."""
    arch = params.arch.with_classes(n_classes)
    bound = np.sqrt(6.0 / arch.dense1)
    head = (rng.uniform(-bound, bound, size=(arch.dense1, n_classes)), np.zeros(n_classes))
    return ModelParams(arch, {**params.tensors, "head": head})


# -- layers -----------------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    return win.reshape(b * h * w, c * 9)


def _conv_forward(x, w, bias):
    b, h, wd, _ = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + bias
    return out.reshape(b, h, wd, w.shape[0]), cols


def _conv_backward(dout, cols, w, x_shape, need_dx=True):
    b, h, wd, c = x_shape
    f = w.shape[0]
    dm = dout.reshape(-1, f)
    dw = (dm.T @ cols).reshape(w.shape)
    db = dm.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dm @ w.reshape(f, -1)).reshape(b, h, wd, c, 3, 3)
    dxp = np.zeros((b, h + 2, wd + 2, c), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dcols[..., i, j]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool_forward(x):
    b, h, w, c = x.shape
    win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, x_shape):
    b, h, w, c = x_shape
    dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    return dwin.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)


class ForwardCache:
    def __init__(self, params, batch, store):
        self.params = params
        self.batch = batch
        self.store = store


def _as_batch(params: ModelParams, batch) -> np.ndarray:
    if isinstance(batch, (list, tuple)):
        batch = np.stack([getattr(img, "data", img) for img in batch])
    x = np.asarray(batch, dtype=params.arch.dtype)
    a = params.arch
    if x.ndim != 4 or x.shape[1:] != (a.height, a.width, a.channels):
        raise ShapeError(f"batch shape {x.shape} does not match input {(a.height, a.width, a.channels)}")
    return x


def forward(params: ModelParams, batch, return_cache: bool = False):
    """Logits of shape (B, C) for a batch of images."""
    x = _as_batch(params, batch)
    w1, b1 = params["conv1"]
    w2, b2 = params["conv2"]
    wd, bd = params["dense1"]
    wh, bh = params["head"]
    z1, cols1 = _conv_forward(x, w1, b1)
    a1 = np.maximum(z1, 0.0)
    p1, arg1 = _pool_forward(a1)
    z2, cols2 = _conv_forward(p1, w2, b2)
    a2 = np.maximum(z2, 0.0)
    p2, arg2 = _pool_forward(a2)
    flat = p2.reshape(x.shape[0], -1)
    z3 = flat @ wd + bd
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ wh + bh
    if not return_cache:
        return logits
    store = dict(x=x, cols1=cols1, z1=z1, arg1=arg1, p1=p1, cols2=cols2, z2=z2, arg2=arg2,
                 p2=p2, flat=flat, z3=z3, a3=a3)
    return logits, ForwardCache(params, batch, store)


def features(params: ModelParams, batch) -> np.ndarray:
    """Activations feeding the head (post-relu dense1)."""
    x = _as_batch(params, batch)
    wd, bd = params["dense1"]
    p1, _ = _pool_forward(np.maximum(_conv_forward(x, *params["conv1"])[0], 0.0))
    p2, _ = _pool_forward(np.maximum(_conv_forward(p1, *params["conv2"])[0], 0.0))
    return np.maximum(p2.reshape(x.shape[0], -1) @ wd + bd, 0.0)


def backward(params: ModelParams, cache: ForwardCache, dlogits, layers=LAYERS) -> dict:
    """Gradients for every layer as {name: (dW, db)}.

    ``layers`` limits which gradients are needed; backpropagation stops below
    the lowest requested layer and the skipped layers get zero gradients.
    """
    if cache.params is not params:
        raise StaleCacheError("forward cache was produced with different parameters")
    s = cache.store
    dlogits = np.asarray(dlogits, dtype=params.arch.dtype)
    if dlogits.shape != (s["x"].shape[0], params.arch.n_classes):
        raise ShapeError(f"dlogits shape {dlogits.shape} does not match batch")
    needed = set(layers)
    lowest = min((LAYERS.index(n) for n in needed), default=len(LAYERS))
    grads = {n: (np.zeros_like(params[n][0]), np.zeros_like(params[n][1])) for n in LAYERS}
    wh, _ = params["head"]
    wd, _ = params["dense1"]
    w2, _ = params["conv2"]
    w1, _ = params["conv1"]
    if lowest > LAYERS.index("head"):
        return grads
    grads["head"] = (s["a3"].T @ dlogits, dlogits.sum(axis=0))
    if lowest > LAYERS.index("dense1"):
        return grads
    dz3 = (dlogits @ wh.T) * (s["z3"] > 0)
    grads["dense1"] = (s["flat"].T @ dz3, dz3.sum(axis=0))
    if lowest > LAYERS.index("conv2"):
        return grads
    dp2 = (dz3 @ wd.T).reshape(s["p2"].shape)
    da2 = _pool_backward(dp2, s["arg2"], s["z2"].shape)
    dz2 = da2 * (s["z2"] > 0)
    need_dx = lowest <= LAYERS.index("conv1")
    dp1, dw2, db2 = _conv_backward(dz2, s["cols2"], w2, s["p1"].shape, need_dx=need_dx)
    grads["conv2"] = (dw2, db2)
    if not need_dx:
        return grads
    da1 = _pool_backward(dp1, s["arg1"], s["z1"].shape)
    dz1 = da1 * (s["z1"] > 0)
    _, dw1, db1 = _conv_backward(dz1, s["cols1"], w1, s["x"].shape, need_dx=False)
    grads["conv1"] = (dw1, db1)
    return grads


# -- heads --------------------------------------------------------------------------


def head_loss(kind: str, logits, labels) -> tuple[float, np.ndarray]:
    """Mean batch loss and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    rows = np.arange(b)
    if kind == SOFTMAX_CE:
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        log_p = shifted - log_z[:, None]
        loss = -log_p[rows, labels].mean()
        d = np.exp(log_p)
        d[rows, labels] -= 1.0
        return float(loss), d / b
    if kind == SVM_HINGE:
        margins = logits - logits[rows, labels][:, None] + 1.0
        margins[rows, labels] = 0.0
        # a violation of exactly zero contributes nothing to the subgradient
        active = margins > 0.0
        loss = (margins * active).sum() / b
        d = active.astype(np.float64)
        d[rows, labels] = -active.sum(axis=1)
        return float(loss), d / b
    raise ValueError(f"unknown head kind {kind!r}")


# -- freezing -------------------------------------------------------------------------


class FreezeMask(dict):
    """Per-layer trainable flag; must name every layer exactly once."""

    def __init__(self, trainable: dict):
        if set(trainable) != set(LAYERS):
            raise ValueError(f"freeze mask must cover {LAYERS}, got {sorted(trainable)}")
        super().__init__({n: bool(trainable[n]) for n in LAYERS})

    @classmethod
    def all_trainable(cls) -> "FreezeMask":
        return cls({n: True for n in LAYERS})

    @classmethod
    def all_frozen(cls) -> "FreezeMask":
        return cls({n: False for n in LAYERS})

    @classmethod
    def unfrozen(cls, names) -> "FreezeMask":
        names = set(names)
        unknown = names - set(LAYERS)
        if unknown:
            raise ValueError(f"unknown layers {sorted(unknown)}")
        return cls({n: n in names for n in LAYERS})

    @property
    def trainable_layers(self) -> tuple:
        return tuple(n for n in LAYERS if self[n])

    def label(self) -> str:
        names = self.trainable_layers
        return "+".join(names) if names else "none"


def unfreeze_boundaries() -> list[FreezeMask]:
    """Cumulative unfreeze states from the head downwards, starting all-frozen."""
    return [FreezeMask.unfrozen(FREEZE_ORDER[:i]) for i in range(len(FREEZE_ORDER) + 1)]


def apply_freeze(grads: dict, mask: FreezeMask) -> dict:
    return {
        n: (g if mask[n] else (np.zeros_like(g[0]), np.zeros_like(g[1])))
        for n, g in grads.items()
    }


def pretrain_source(params: ModelParams, source_dataset, config, rng: RngStream,
                    target_classes: int, val_fraction: float = 0.2):
    """Train on a source task, then swap in a fresh head for the target task.

    Returns (params with new head, source-task params, held-out source accuracy).
    """
    from .splitting import SIMPLE, holdout_split
    from .train import evaluate, train_loop

    if params.arch.n_classes != source_dataset.n_classes:
        params = reinit_head(params, source_dataset.n_classes, rng.child("source-head"))
    plan = holdout_split(source_dataset, val_fraction, SIMPLE, rng.child("source-split"))
    best, _ = train_loop(params, source_dataset, plan.rest_indices, plan.test_indices, config,
                         rng.child("source-train"))
    acc, _, _ = evaluate(best, source_dataset, plan.test_indices)
    return reinit_head(best, target_classes, rng.child("target-head")), best, acc


# -- checkpoints ------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TBCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    """Binary checkpoint plus a ``.json`` sidecar describing it (and any ``meta``)."""
    path = Path(path)
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), params.arch.digest(),
             struct.pack("<I", len(LAYERS))]
    for name in LAYERS:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        for t in params[name]:
            parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))
    sidecar = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(params.arch),
        "arch_hash": params.arch.digest().hex(),
        "layers": {n: [list(t.shape) for t in params[n]] for n in LAYERS},
        **(meta or {}),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    buf = path.read_bytes()
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arch = Architecture(**sidecar["arch"])
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if buf[12:44] != arch.digest():
        raise ValueError(f"{path}: architecture hash does not match sidecar")
    (count,) = struct.unpack_from("<I", buf, 44)
    pos = 48
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + ln].decode()
        pos += 2 + ln
        pair = []
        for _ in range(2):
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape)) * 8
            pair.append(np.frombuffer(buf[pos:pos + size], dtype="<f8").reshape(shape))
            pos += size
        tensors[name] = tuple(pair)
    return ModelParams(arch, tensors)
