"""Convolutional autoencoder for deep mouth-ROI features, implemented on
plain numpy with hand-derived gradients.

Encoder: repeated [3x3 conv, stride 2, pad 1, ReLU] stages followed by a
linear dense bottleneck. Decoder mirrors it: dense + ReLU, then per stage
[nearest-neighbor 2x upsample, 3x3 conv, pad 1] with ReLU between stages and
a sigmoid at the pixel output. Loss is mean squared error against the input.
All computation is float64; the on-disk container stores float32.

Every layer exposes forward/backward; gradient correctness is established by
central finite differences in the test suite, so the backward passes here are
the reference implementation, not a wrapper over a framework.
"""

from dataclasses import dataclass

import numpy as np

from . import binio
from .errors import FormatError, TrainingDivergedError

MODEL_MAGIC = b"CAE1"
DEFAULT_CHANNELS = (8, 16, 32)
DEFAULT_BOTTLENECK = 32
DEFAULT_INPUT_HW = (16, 32)


def _im2col(x, stride):
    """3x3 patches with pad 1: (N, C, H, W) -> (N, C*9, OH*OW) plus shape info."""
    n, c, h, w = x.shape
    oh = (h + 2 - 3) // stride + 1
    ow = (w + 2 - 3) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, oh, ow))
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * (oh - 1) + 1:stride,
                                    kj:kj + stride * (ow - 1) + 1:stride]
    return cols.reshape(n, c * 9, oh * ow), (oh, ow)


def _col2im(dcols, x_shape, stride):
    n, c, h, w = x_shape
    oh = (h + 2 - 3) // stride + 1
    ow = (w + 2 - 3) // stride + 1
    dcols = dcols.reshape(n, c, 3, 3, oh, ow)
    dxp = np.zeros((n, c, h + 2, w + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + stride * (oh - 1) + 1:stride,
                kj:kj + stride * (ow - 1) + 1:stride] += dcols[:, :, ki, kj]
    return dxp[:, :, 1:-1, 1:-1]


class Conv2d:
    """3x3 convolution, padding 1, configurable stride."""

    def __init__(self, in_ch, out_ch, stride, rng):
        fan_in = in_ch * 9
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, 3, 3))
        self.b = np.zeros(out_ch)
        self.stride = stride
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cols = None
        self._x_shape = None

    def forward(self, x):
        self._x_shape = x.shape
        cols, (oh, ow) = _im2col(x, self.stride)
        self._cols = cols
        out_ch = self.w.shape[0]
        wmat = self.w.reshape(out_ch, -1)
        out = np.matmul(wmat, cols) + self.b[:, None]
        return out.reshape(x.shape[0], out_ch, oh, ow)

    def backward(self, dout):
        n, out_ch = dout.shape[:2]
        dmat = dout.reshape(n, out_ch, -1)
        self.db = dmat.sum(axis=(0, 2))
        self.dw = np.matmul(dmat, self._cols.transpose(0, 2, 1)).sum(axis=0) \
            .reshape(self.w.shape)
        dcols = np.matmul(self.w.reshape(out_ch, -1).T, dmat)
        return _col2im(dcols, self._x_shape, self.stride)


class Dense:
    def __init__(self, in_dim, out_dim, rng):
        self.w = rng.normal(0.0, np.sqrt(2.0 / in_dim), (out_dim, in_dim))
        self.b = np.zeros(out_dim)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dout):
        self.dw = dout.T @ self._x
        self.db = dout.sum(axis=0)
        return dout @ self.w


class Relu:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Upsample2x:
    """Nearest-neighbor doubling of both spatial axes."""

    def forward(self, x):
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def backward(self, dout):
        return (dout[:, :, ::2, ::2] + dout[:, :, 1::2, ::2]
                + dout[:, :, ::2, 1::2] + dout[:, :, 1::2, 1::2])


class Sigmoid:
    def __init__(self):
        self._out = None

    def forward(self, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, dout):
        return dout * self._out * (1.0 - self._out)


@dataclass
class TrainingLog:
    epoch_losses: list


class ConvAutoencoder:
    """Symmetric conv autoencoder with a linear bottleneck.

    ``channels`` gives the encoder stage widths; the input height and width
    must be divisible by 2**len(channels). Small configurations train fast
    and make exhaustive finite-difference checks practical.
    """

    def __init__(self, channels=DEFAULT_CHANNELS, bottleneck=DEFAULT_BOTTLENECK,
                 input_hw=DEFAULT_INPUT_HW, seed=0):
        h, w = input_hw
        stages = len(channels)
        if stages < 1:
            raise ValueError("need at least one conv stage")
        if h % (2 ** stages) or w % (2 ** stages):
            raise ValueError(f"input {h}x{w} not divisible by 2^{stages}")
        self.channels = tuple(int(c) for c in channels)
        self.bottleneck = int(bottleneck)
        self.input_hw = (int(h), int(w))
        rng = np.random.default_rng(seed)

        self.enc_convs = []
        prev = 1
        for ch in self.channels:
            self.enc_convs.append(Conv2d(prev, ch, stride=2, rng=rng))
            prev = ch
        self._code_hw = (h // 2 ** stages, w // 2 ** stages)
        flat = self.channels[-1] * self._code_hw[0] * self._code_hw[1]
        self.enc_dense = Dense(flat, self.bottleneck, rng)
        self.dec_dense = Dense(self.bottleneck, flat, rng)
        self.dec_convs = []
        widths = list(reversed(self.channels))[1:] + [1]
        prev = self.channels[-1]
        for ch in widths:
            self.dec_convs.append(Conv2d(prev, ch, stride=1, rng=rng))
            prev = ch
        self._enc_relus = [Relu() for _ in self.enc_convs]
        self._dec_relus = [Relu() for _ in self.dec_convs]  # last one unused
        self._dec_dense_relu = Relu()
        self._ups = [Upsample2x() for _ in self.dec_convs]
        self._sigmoid = Sigmoid()

    # ---- forward / backward -------------------------------------------------

    def _as_batch(self, frames):
        x = np.asarray(frames, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[2:] != self.input_hw:
            raise ValueError(f"expected {self.input_hw} images, got {x.shape[2:]}")
        return x

    def forward(self, frames):
        """Returns (reconstruction (N, H, W), codes (N, bottleneck))."""
        x = self._as_batch(frames)
        h = x
        for conv, relu in zip(self.enc_convs, self._enc_relus):
            h = relu.forward(conv.forward(h))
        n = h.shape[0]
        self._pre_flat_shape = h.shape
        code = self.enc_dense.forward(h.reshape(n, -1))
        d = self._dec_dense_relu.forward(self.dec_dense.forward(code))
        d = d.reshape(n, self.channels[-1], *self._code_hw)
        for i, (up, conv) in enumerate(zip(self._ups, self.dec_convs)):
            d = conv.forward(up.forward(d))
            if i < len(self.dec_convs) - 1:
                d = self._dec_relus[i].forward(d)
        recon = self._sigmoid.forward(d)
        return recon[:, 0], code

    def loss_and_grad(self, frames):
        """Mean squared reconstruction error; leaves gradients in the layers."""
        x = self._as_batch(frames)
        recon, code = self.forward(x)
        diff = recon[:, None] - x
        loss = float(np.mean(diff ** 2))
        dout = (2.0 / diff.size) * diff
        d = self._sigmoid.backward(dout)
        for i in range(len(self.dec_convs) - 1, -1, -1):
            if i < len(self.dec_convs) - 1:
                d = self._dec_relus[i].backward(d)
            d = self._ups[i].backward(self.dec_convs[i].backward(d))
        n = d.shape[0]
        d = self._dec_dense_relu.backward(d.reshape(n, -1))
        dcode = self.dec_dense.backward(d)
        d = self.enc_dense.backward(dcode)
        d = d.reshape(self._pre_flat_shape)
        for conv, relu in zip(reversed(self.enc_convs), reversed(self._enc_relus)):
            d = conv.backward(relu.backward(d))
        return loss

    # ---- parameters ---------------------------------------------------------

    def parameter_layers(self):
        return self.enc_convs + [self.enc_dense, self.dec_dense] + self.dec_convs

    def parameter_arrays(self):
        """Flat list of (layer, attribute) pairs in serialization order."""
        out = []
        for layer in self.parameter_layers():
            out.append((layer, "w"))
            out.append((layer, "b"))
        return out

    def encode(self, frames):
        """Bottleneck codes (N, D) without keeping layer caches useful."""
        _, code = self.forward(frames)
        return code

    def reconstruct(self, frames):
        recon, _ = self.forward(frames)
        return recon

    # ---- training -----------------------------------------------------------

    def train(self, frames, epochs=30, lr=1e-3, batch_size=32, momentum=0.9, seed=0):
        """Plain SGD with momentum over shuffled minibatches.

        Returns a TrainingLog with the mean per-epoch loss. Raises
        TrainingDivergedError the moment a non-finite loss or update shows up.
        """
        data = np.asarray(frames, dtype=float)
        if data.ndim != 3:
            raise ValueError("training frames must be (N, H, W)")
        if data.shape[0] == 0:
            raise ValueError("no training frames")
        rng = np.random.default_rng(seed)
        velocity = {id(layer): (np.zeros_like(layer.w), np.zeros_like(layer.b))
                    for layer in self.parameter_layers()}
        losses = []
        for epoch in range(epochs):
            order = rng.permutation(data.shape[0])
            total = 0.0
            count = 0
            for start in range(0, data.shape[0], batch_size):
                batch = data[order[start:start + batch_size]]
                loss = self.loss_and_grad(batch)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch + 1}", epoch=epoch + 1)
                for layer in self.parameter_layers():
                    vw, vb = velocity[id(layer)]
                    if not (np.isfinite(layer.dw).all() and np.isfinite(layer.db).all()):
                        raise TrainingDivergedError(
                            f"non-finite gradient at epoch {epoch + 1}", epoch=epoch + 1)
                    vw *= momentum
                    vw -= lr * layer.dw
                    layer.w += vw
                    vb *= momentum
                    vb -= lr * layer.db
                    layer.b += vb
                total += loss * batch.shape[0]
                count += batch.shape[0]
            losses.append(total / count)
        return TrainingLog(epoch_losses=losses)


# ---------------------------------------------------------------------------
# container

def save_autoencoder(path, model):
    if model.input_hw != DEFAULT_INPUT_HW:
        raise ValueError(f"container stores {DEFAULT_INPUT_HW} models, got {model.input_hw}")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        binio.write_u32(fh, len(model.channels))
        for ch in model.channels:
            binio.write_u32(fh, ch)
        binio.write_u32(fh, model.bottleneck)
        for layer, attr in model.parameter_arrays():
            binio.write_array(fh, getattr(layer, attr), "<f4")


def load_autoencoder(path):
    with open(path, "rb") as fh:
        binio.check_magic(fh, MODEL_MAGIC, path)
        stages = binio.read_u32(fh, path)
        if stages < 1 or stages > 8:
            raise FormatError(f"{path}: implausible stage count {stages}")
        channels = tuple(binio.read_u32(fh, path) for _ in range(stages))
        bottleneck = binio.read_u32(fh, path)
        model = ConvAutoencoder(channels=channels, bottleneck=bottleneck,
                                input_hw=DEFAULT_INPUT_HW, seed=0)
        for layer, attr in model.parameter_arrays():
            shape = getattr(layer, attr).shape
            setattr(layer, attr, binio.read_array(fh, "<f4", shape, path).astype(float))
    return model
