"""A small convolutional classifier with hand-written backprop.

Architecture: two 5x5 conv blocks (same padding, 2x2 max-pool of stride 2),
a 128-unit dense layer with dropout 0.5, and a softmax output.  Everything is
float64 numpy, so input gradients are exact and cheap to verify against
finite differences.  Training is plain SGD with momentum, fully determined by
the seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..image import GrayImage
from .common import LabeledSample, model_input

CHECKPOINT_MAGIC = b"TCNN"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TinyCnnParams:
    input_side: int
    n_classes: int
    conv1_w: np.ndarray  # (c1, 1, 5, 5)
    conv1_b: np.ndarray
    conv2_w: np.ndarray  # (c2, c1, 5, 5)
    conv2_b: np.ndarray
    fc_w: np.ndarray  # (flat, 128)
    fc_b: np.ndarray
    out_w: np.ndarray  # (128, n_classes)
    out_b: np.ndarray
    dropout_rate: float = 0.5

    def arrays(self) -> list[np.ndarray]:
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
                self.fc_w, self.fc_b, self.out_w, self.out_b]

    def copy(self) -> "TinyCnnParams":
        return TinyCnnParams(self.input_side, self.n_classes,
                             *(a.copy() for a in self.arrays()),
                             dropout_rate=self.dropout_rate)


def init_params(rng: np.random.Generator, input_side: int, n_classes: int,
                c1: int = 8, c2: int = 16, hidden: int = 128,
                dropout_rate: float = 0.5) -> TinyCnnParams:
    if input_side % 4 != 0:
        raise ValueError("input side must be divisible by 4 (two 2x2 pools)")
    flat = c2 * (input_side // 4) ** 2

    def he(shape, fan_in):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    return TinyCnnParams(
        input_side=input_side,
        n_classes=n_classes,
        conv1_w=he((c1, 1, 5, 5), 25),
        conv1_b=np.zeros(c1),
        conv2_w=he((c2, c1, 5, 5), 25 * c1),
        conv2_b=np.zeros(c2),
        fc_w=he((flat, hidden), flat),
        fc_b=np.zeros(hidden),
        out_w=he((hidden, n_classes), hidden),
        out_b=np.zeros(n_classes),
        dropout_rate=dropout_rate,
    )


# -- layers -----------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, c, h, w, k, k), (s[0], s[1], s[2], s[3], s[2], s[3]), writeable=False
    )
    return win.reshape(n, c, h * w, k * k).transpose(0, 2, 1, 3).reshape(n, h * w, c * k * k)


def _col2im(dcols: np.ndarray, shape: tuple, k: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    d = dcols.reshape(n, h * w, c, k, k).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w, k, k)
    for a in range(k):
        for b in range(k):
            xp[:, :, a : a + h, b : b + w] += d[:, :, :, :, a, b]
    return xp[:, :, pad : pad + h, pad : pad + w]


def _conv_forward(x, weight, bias):
    n, _, h, w = x.shape
    f = weight.shape[0]
    cols = _im2col(x, 5, 2)
    out = cols @ weight.reshape(f, -1).T + bias
    return out.transpose(0, 2, 1).reshape(n, f, h, w), cols


def _conv_backward(dout, cols, weight, x_shape):
    n, f, h, w = dout.shape
    dflat = dout.reshape(n, f, h * w).transpose(0, 2, 1)  # (n, hw, f)
    dw = np.einsum("npf,npc->fc", dflat, cols).reshape(weight.shape)
    db = dflat.sum(axis=(0, 1))
    dcols = dflat @ weight.reshape(f, -1)
    dx = _col2im(dcols, x_shape, 5, 2)
    return dx, dw, db


def _pool_forward(x):
    n, c, h, w = x.shape
    r = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    n, c, h, w = x_shape
    d = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(d, idx[..., None], dout[..., None], axis=-1)
    return d.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- forward / backward ------------------------------------------------------

def _forward(params: TinyCnnParams, x: np.ndarray, train: bool = False,
             rng: np.random.Generator | None = None, temperature: float = 1.0):
    """x: (n, side, side) normalized.  Returns (logits, probs, cache)."""
    n = x.shape[0]
    x4 = x.reshape(n, 1, params.input_side, params.input_side)
    c1, cols1 = _conv_forward(x4, params.conv1_w, params.conv1_b)
    r1 = np.maximum(c1, 0.0)
    p1, idx1 = _pool_forward(r1)
    c2, cols2 = _conv_forward(p1, params.conv2_w, params.conv2_b)
    r2 = np.maximum(c2, 0.0)
    p2, idx2 = _pool_forward(r2)
    flat = p2.reshape(n, -1)
    h = flat @ params.fc_w + params.fc_b
    hr = np.maximum(h, 0.0)
    if train and params.dropout_rate > 0.0:
        if rng is None:
            raise TrainingError("dropout needs an rng in training mode")
        mask = (rng.random(hr.shape) >= params.dropout_rate) / (1.0 - params.dropout_rate)
    else:
        mask = np.ones_like(hr)
    hd = hr * mask
    logits = hd @ params.out_w + params.out_b
    probs = _softmax(logits / temperature)
    cache = (x4, cols1, c1, idx1, p1, cols2, c2, idx2, p2, flat, h, mask, hd)
    return logits, probs, cache


def predict_proba(params: TinyCnnParams, images: list | np.ndarray) -> np.ndarray:
    x = _stack(params, images)
    _, probs, _ = _forward(params, x)
    return probs


def predict(params: TinyCnnParams, images: list | np.ndarray) -> np.ndarray:
    return predict_proba(params, images).argmax(axis=1)


def _stack(params: TinyCnnParams, images) -> np.ndarray:
    if isinstance(images, np.ndarray) and images.ndim == 3 and images.shape[1:] == (params.input_side, params.input_side):
        return images.astype(np.float64)
    return np.stack([model_input(im, params.input_side) for im in images])


def _loss_and_grads(params: TinyCnnParams, x: np.ndarray, targets: np.ndarray,
                    train: bool, rng: np.random.Generator | None,
                    temperature: float = 1.0, want_input_grad: bool = False):
    """Mean cross-entropy against ``targets`` (one-hot or soft rows)."""
    n = x.shape[0]
    logits, probs, cache = _forward(params, x, train=train, rng=rng, temperature=temperature)
    (x4, cols1, c1, idx1, p1, cols2, c2, idx2, p2, flat, h, mask, hd) = cache
    eps = 1e-12
    loss = float(-(targets * np.log(probs + eps)).sum() / n)

    dlogits = (probs - targets) / (n * temperature)
    dout_w = hd.T @ dlogits
    dout_b = dlogits.sum(axis=0)
    dhd = dlogits @ params.out_w.T
    dhr = dhd * mask
    dh = dhr * (h > 0)
    dfc_w = flat.T @ dh
    dfc_b = dh.sum(axis=0)
    dflat = dh @ params.fc_w.T
    dp2 = dflat.reshape(p2.shape)
    dr2 = _pool_backward(dp2, idx2, c2.shape)
    dc2 = dr2 * (c2 > 0)
    dp1, dconv2_w, dconv2_b = _conv_backward(dc2, cols2, params.conv2_w, p1.shape)
    dr1 = _pool_backward(dp1, idx1, c1.shape)
    dc1 = dr1 * (c1 > 0)
    dx4, dconv1_w, dconv1_b = _conv_backward(dc1, cols1, params.conv1_w, x4.shape)

    grads = [dconv1_w, dconv1_b, dconv2_w, dconv2_b, dfc_w, dfc_b, dout_w, dout_b]
    dx = dx4.reshape(x.shape) if want_input_grad else None
    return loss, grads, dx


def batch_input_grad(params: TinyCnnParams, x: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """(mean CE loss, gradient w.r.t. normalized model inputs) for a batch.
    ``x`` is (n, side, side) in [0,1]; ``targets`` are (n, classes) rows."""
    loss, _, dx = _loss_and_grads(params, x, targets, train=False, rng=None, want_input_grad=True)
    return loss, dx


def grad_input(params: TinyCnnParams, image: GrayImage | np.ndarray,
               label: int | None = None, target: int | None = None) -> np.ndarray:
    """Gradient of the cross-entropy loss w.r.t. the raw input pixels, at the
    image's own geometry (zeros where a crop discards content).

    ``label`` differentiates the true-class loss; ``target`` the loss toward
    a chosen class.  Exactly one must be given.
    """
    if (label is None) == (target is None):
        raise ValueError("give exactly one of label / target")
    cls = label if label is not None else target
    pixels = image.pixels if isinstance(image, GrayImage) else np.asarray(image)
    x = model_input(pixels, params.input_side)[None, ...]
    onehot = np.zeros((1, params.n_classes))
    onehot[0, cls] = 1.0
    _, _, dx = _loss_and_grads(params, x, onehot, train=False, rng=None, want_input_grad=True)
    # undo normalization and map the model-input gradient back onto the
    # original geometry (pad region -> dropped, crop -> zeros outside)
    g_model = dx[0] / 255.0
    h, w = pixels.shape
    side = params.input_side
    out = np.zeros((h, w))
    if h > side:
        top = (h - side) // 2
        rows_model = slice(0, side)
        rows_img = slice(top, top + side)
    else:
        rows_model = slice(0, h)
        rows_img = slice(0, h)
    if w > side:
        left = (w - side) // 2
        cols_model = slice(0, side)
        cols_img = slice(left, left + side)
    else:
        cols_model = slice(0, w)
        cols_img = slice(0, w)
    out[rows_img, cols_img] = g_model[rows_model, cols_model]
    return out


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9
    input_side: int = 64
    conv1_channels: int = 8
    conv2_channels: int = 16
    hidden: int = 128
    dropout_rate: float = 0.5


@dataclass
class FitReport:
    epochs_run: int = 0
    final_loss: float = float("nan")
    train_accuracy: float = float("nan")
    val_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    reached_target: bool = True
    losses: list = field(default_factory=list)


def _onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def fit(params: TinyCnnParams, x: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
        temperature: float = 1.0,
        stop_fn=None) -> FitReport:
    """SGD-with-momentum training loop, deterministic in cfg.seed.

    ``targets`` are (n, classes) rows (one-hot or soft).  ``stop_fn`` is
    polled after each epoch; truthy return stops early.
    """
    rng = np.random.default_rng(cfg.seed)
    velocity = [np.zeros_like(a) for a in params.arrays()]
    report = FitReport()
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            loss, grads, _ = _loss_and_grads(
                params, x[sel], targets[sel], train=True, rng=rng, temperature=temperature
            )
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {batches}: {loss!r}; "
                    f"lr={cfg.lr} batch={cfg.batch_size}"
                )
            arrays = params.arrays()
            for a, v, g in zip(arrays, velocity, grads):
                v *= cfg.momentum
                v -= cfg.lr * g
                a += v
            epoch_loss += loss
            batches += 1
        report.epochs_run = epoch + 1
        report.final_loss = epoch_loss / max(batches, 1)
        report.losses.append(report.final_loss)
        if stop_fn is not None and stop_fn(params, epoch):
            break
    return report


def train_cnn(data: list[LabeledSample], cfg: TrainConfig,
              splits: tuple[list, list, list] | None = None) -> tuple[TinyCnnParams, FitReport]:
    """Train from scratch on a labeled corpus; returns params and a report
    with train/val/test accuracy."""
    from .common import split_corpus

    labels_all = sorted({s.label for s in data})
    if len(labels_all) < 2:
        raise TrainingError("need at least 2 classes")
    n_classes = max(labels_all) + 1
    train, val, test = splits if splits is not None else split_corpus(data, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(rng, cfg.input_side, n_classes,
                         cfg.conv1_channels, cfg.conv2_channels, cfg.hidden, cfg.dropout_rate)
    x = np.stack([model_input(s.image, cfg.input_side) for s in train])
    y = _onehot(np.array([s.label for s in train]), n_classes)
    report = fit(params, x, y, cfg)
    report.train_accuracy = _subset_accuracy(params, train)
    report.val_accuracy = _subset_accuracy(params, val)
    report.test_accuracy = _subset_accuracy(params, test)
    return params, report


def _subset_accuracy(params: TinyCnnParams, samples: list[LabeledSample]) -> float:
    if not samples:
        return float("nan")
    preds = []
    for start in range(0, len(samples), 256):
        chunk = samples[start : start + 256]
        preds.append(predict(params, [s.image for s in chunk]))
    labels = np.array([s.label for s in samples])
    return float((np.concatenate(preds) == labels).mean())


# -- checkpoint io -----------------------------------------------------------

def save_checkpoint(params: TinyCnnParams, path: str) -> None:
    """Versioned flat binary: magic, version, dims, then float64 arrays."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIIdI", CHECKPOINT_VERSION, params.input_side,
                             params.n_classes, params.dropout_rate, len(params.arrays())))
        for a in params.arrays():
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.astype("<f8").tobytes())


def load_checkpoint(path: str) -> TinyCnnParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a cnn checkpoint")
        version, side, n_classes, dropout, n_arrays = struct.unpack("<IIIdI", fh.read(24))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        arrays = []
        for _ in range(n_arrays):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy())
    return TinyCnnParams(side, n_classes, *arrays, dropout_rate=dropout)
