"""Minimal neural-network machinery: layers, Adam, and checkpoints.

Everything here is plain NumPy with hand-written gradients; the nets in
this package are small enough that an autograd framework would be more
code than the derivatives themselves.
"""

import hashlib
import json
import struct

import numpy as np

SDNW_MAGIC = b"SDNW"
SDNW_VERSION = 1


class Adam:
    """Adam with bias correction and stepwise multiplicative lr decay."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 lr_decay=0.98, decay_every=500):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_decay = lr_decay
        self.decay_every = decay_every
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        lr_t = self.lr * self.lr_decay ** (self.t // self.decay_every)
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr_t * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def params_checksum(params):
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype=np.float32).tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------
# dense layers
# ----------------------------------------------------------------------

_ACTS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "softplus": (lambda z: np.logaddexp(0.0, z),
                 lambda a: 1.0 - np.exp(-a)),
    "linear": (lambda z: z, lambda a: np.ones_like(a)),
}


class MLP:
    """Fully connected net; hidden activations per ``activation``, linear out.

    Exposes both reverse-mode gradients for training and a forward-mode
    exact Jacobian (cheap here because the input dimension is tiny).
    """

    def __init__(self, widths, activation="tanh", rng=None):
        if activation not in _ACTS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        rng = rng or np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            scale = np.sqrt(1.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._cache = None

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x, cache=False):
        act, _ = _ACTS[self.activation]
        h = x
        saved = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == len(self.weights) - 1 else act(z)
            saved.append(h)
        if cache:
            self._cache = saved
        return h

    def backward(self, dout):
        """Parameter gradients for the last cached forward pass."""
        if self._cache is None:
            raise RuntimeError("forward(cache=True) must precede backward")
        _, dact = _ACTS[self.activation]
        saved = self._cache
        grads = [None] * (2 * len(self.weights))
        delta = dout
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = saved[i]
            grads[2 * i] = h_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * dact(saved[i])
        return grads

    def jacobian(self, x):
        """d out / d in, shape (batch, out_dim, in_dim), exact."""
        _, dact = _ACTS[self.activation]
        x = np.atleast_2d(x)
        jac = np.broadcast_to(
            np.eye(self.widths[0]), (x.shape[0],) + (self.widths[0],) * 2
        ).copy()
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            jac = np.einsum("io,bif->bof", w, jac)
            if i < len(self.weights) - 1:
                a = _ACTS[self.activation][0](z)
                jac = jac * dact(a)[:, :, None]
                h = a
        return jac


# ----------------------------------------------------------------------
# 3x3 same-padding convolutions via im2col
# ----------------------------------------------------------------------

def im2col3(x):
    """(B, C, H, W) -> (B*H*W, C*9) patch matrix for a same-padded 3x3 conv."""
    b, c, h, w = x.shape
    pad = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    pad[:, :, 1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(2, 3))
    # win: (B, C, H, W, 3, 3) -> (B, H, W, C, 3, 3)
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)
    return np.ascontiguousarray(col)


def conv3(x, weight, bias):
    """Same-padded 3x3 convolution. Returns (out, col) with col cached."""
    b, c, h, w = x.shape
    c_out = weight.shape[0]
    col = im2col3(x)
    out = col @ weight.reshape(c_out, -1).T
    out += bias
    return out.reshape(b, h, w, c_out).transpose(0, 3, 1, 2), col


def conv3_grads(dy, col, weight, x_shape):
    """Gradients of a same-padded 3x3 conv: (dW, db, dx)."""
    b, c, h, w = x_shape
    c_out = weight.shape[0]
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dw = (dy_mat.T @ col).reshape(weight.shape)
    db = dy_mat.sum(axis=0)
    # input gradient is itself a same-conv of dy with the kernel flipped
    # spatially and transposed over channels
    w_flip = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx, _ = conv3(dy, np.ascontiguousarray(w_flip), np.zeros(c, dtype=dy.dtype))
    return dw, db, dx


def silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def time_embedding(t, dim):
    """Sinusoidal embedding of integer schedule indices, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ----------------------------------------------------------------------
# checkpoint container
# ----------------------------------------------------------------------

class CheckpointError(ValueError):
    """Raised when a checkpoint file does not decode."""


def save_checkpoint(path, kind, arch, extra, params):
    """Write a network checkpoint: JSON header + flat float32 parameters."""
    header = {
        "kind": kind,
        "arch": arch,
        "extra": extra,
        "shapes": [list(p.shape) for p in params],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(SDNW_MAGIC)
        f.write(struct.pack("<II", SDNW_VERSION, len(blob)))
        f.write(blob)
        for p in params:
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SDNW_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != SDNW_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[12:12 + blob_len].decode())
    offset = 12 + blob_len
    params = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        chunk = raw[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise CheckpointError(f"{path}: truncated parameter payload")
        params.append(np.frombuffer(chunk, dtype="<f4").reshape(shape).copy())
        offset += 4 * count
    header["params"] = params
    return header
