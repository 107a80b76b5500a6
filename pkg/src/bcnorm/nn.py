"""Minimal trainable blocks for the desk-scale experiments.

Direct (no FFT, no Winograd) stride-1 convolution with 'same' or 'valid'
zero padding, cross-correlation semantics; ReLU; global average pooling;
a dense head; softmax cross-entropy; and SGD with momentum and a
milestone learning-rate schedule.  Every block follows the same protocol
as the normalization layers: ``forward(x, training=True, update_stats=True)``,
``backward(dy) -> dx``, with parameter gradients in ``.grads``.
"""

import numpy as np

from . import norms


class ReLU:
    def __init__(self):
        self.grads = {}
        self._mask = None

    @property
    def params(self):
        return {}

    def forward(self, x, training=True, update_stats=True):
        x = np.asarray(x, dtype=np.float64)
        self._mask = x > 0.0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        if dy.shape != self._mask.shape:
            raise ValueError(f"upstream gradient shape {dy.shape} != {self._mask.shape}")
        return np.where(self._mask, dy, 0.0)

    def state_dict(self, prefix=""):
        return {}

    def load_state_dict(self, state, prefix=""):
        pass


class GlobalAvgPool:
    """Mean over (H, W), output shape (N, C, 1, 1)."""

    def __init__(self):
        self.grads = {}
        self._shape = None

    @property
    def params(self):
        return {}

    def forward(self, x, training=True, update_stats=True):
        x = np.asarray(x, dtype=np.float64)
        self._shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, dy):
        n, c, h, w = self._shape
        dy = np.asarray(dy, dtype=np.float64).reshape(n, c, 1, 1)
        return np.broadcast_to(dy / (h * w), self._shape).copy()

    def state_dict(self, prefix=""):
        return {}

    def load_state_dict(self, state, prefix=""):
        pass


class DenseLayer:
    """Affine map y = x W^T + b, weight (out, in), seeded uniform init."""

    def __init__(self, in_features, out_features, rng=None):
        rng = np.random.default_rng(rng)
        bound = np.sqrt(1.0 / in_features)
        self.weight = rng.uniform(-bound, bound, size=(out_features, in_features))
        self.bias = rng.uniform(-bound, bound, size=out_features)
        self.grads = {}
        self._x = None

    @property
    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, training=True, update_stats=True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(
                f"expected input (N, {self.weight.shape[1]}), got {x.shape}"
            )
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        if dy.shape != (self._x.shape[0], self.weight.shape[0]):
            raise ValueError(f"upstream gradient shape {dy.shape} is wrong")
        self.grads["weight"] = dy.T @ self._x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.weight

    def state_dict(self, prefix=""):
        if prefix and not prefix.endswith("."):
            prefix += "."
        return {prefix + "weight": self.weight.copy(), prefix + "bias": self.bias.copy()}

    def load_state_dict(self, state, prefix=""):
        if prefix and not prefix.endswith("."):
            prefix += "."
        w = np.asarray(state[prefix + "weight"], dtype=np.float64).reshape(self.weight.shape)
        b = np.asarray(state[prefix + "bias"], dtype=np.float64).reshape(self.bias.shape)
        self.weight[...] = w
        self.bias[...] = b


class ConvLayer:
    """Stride-1 2-D convolution (cross-correlation), padding 'same' or 'valid'.

    Kernel shape (out_c, in_c, kh, kw); 'same' requires odd kernel sides so
    the output grid lines up with the input.
    """

    def __init__(self, in_channels, out_channels, kh, kw, padding="same", rng=None):
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        if padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ValueError("same-padding requires odd kernel sides")
        rng = np.random.default_rng(rng)
        bound = np.sqrt(1.0 / (in_channels * kh * kw))
        self.kernel = rng.uniform(-bound, bound, size=(out_channels, in_channels, kh, kw))
        self.bias = rng.uniform(-bound, bound, size=out_channels)
        self.padding = padding
        self.grads = {}
        self._cache = None

    @property
    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def _pad(self):
        _, _, kh, kw = self.kernel.shape
        return (kh // 2, kw // 2) if self.padding == "same" else (0, 0)

    def forward(self, x, training=True, update_stats=True):
        x = np.asarray(x, dtype=np.float64)
        cout, cin, kh, kw = self.kernel.shape
        if x.ndim != 4 or x.shape[1] != cin:
            raise ValueError(f"expected input (N, {cin}, H, W), got {x.shape}")
        n, _, hin, win = x.shape
        ph, pw = self._pad()
        hout = hin + 2 * ph - kh + 1
        wout = win + 2 * pw - kw + 1
        if hout < 1 or wout < 1:
            raise ValueError(f"kernel {kh}x{kw} larger than padded input {x.shape}")
        xp = np.zeros((n, cin, hin + 2 * ph, win + 2 * pw))
        xp[:, :, ph : ph + hin, pw : pw + win] = x

        # gather patches one kernel offset at a time; stays vectorized and
        # keeps the summation order fixed
        cols = np.empty((n, cin, kh, kw, hout, wout))
        for a in range(kh):
            for b in range(kw):
                cols[:, :, a, b] = xp[:, :, a : a + hout, b : b + wout]
        cols2 = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * hout * wout, cin * kh * kw)
        y = cols2 @ self.kernel.reshape(cout, -1).T + self.bias
        y = y.reshape(n, hout, wout, cout).transpose(0, 3, 1, 2)
        self._cache = {"x_shape": x.shape, "cols2": cols2, "hw": (hout, wout)}
        return y

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("backward before forward")
        cout, cin, kh, kw = self.kernel.shape
        n, _, hin, win = self._cache["x_shape"]
        hout, wout = self._cache["hw"]
        dy = np.asarray(dy, dtype=np.float64)
        if dy.shape != (n, cout, hout, wout):
            raise ValueError(f"upstream gradient shape {dy.shape} is wrong")
        dy2 = dy.transpose(0, 2, 3, 1).reshape(n * hout * wout, cout)

        self.grads["bias"] = dy.sum(axis=(0, 2, 3))
        self.grads["kernel"] = (dy2.T @ self._cache["cols2"]).reshape(self.kernel.shape)

        dcols = (dy2 @ self.kernel.reshape(cout, -1)).reshape(n, hout, wout, cin, kh, kw)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # (n, cin, kh, kw, hout, wout)
        ph, pw = self._pad()
        dxp = np.zeros((n, cin, hin + 2 * ph, win + 2 * pw))
        for a in range(kh):
            for b in range(kw):
                dxp[:, :, a : a + hout, b : b + wout] += dcols[:, :, a, b]
        return dxp[:, :, ph : ph + hin, pw : pw + win]

    def state_dict(self, prefix=""):
        if prefix and not prefix.endswith("."):
            prefix += "."
        return {prefix + "kernel": self.kernel.copy(), prefix + "bias": self.bias.copy()}

    def load_state_dict(self, state, prefix=""):
        if prefix and not prefix.endswith("."):
            prefix += "."
        k = np.asarray(state[prefix + "kernel"], dtype=np.float64).reshape(self.kernel.shape)
        b = np.asarray(state[prefix + "bias"], dtype=np.float64).reshape(self.bias.shape)
        self.kernel[...] = k
        self.bias[...] = b


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    Stabilized by max subtraction; dlogits = (softmax - onehot) / N.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -float(logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


class SGD:
    """Momentum SGD: v <- m*v + g; p <- p - lr(epoch)*v.

    ``milestones`` is a list of (epoch, factor) pairs; once the epoch index
    reaches a milestone its factor multiplies the learning rate, cumulatively.
    """

    def __init__(self, params, lr, momentum=0.9, milestones=()):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = dict(params)
        self.base_lr = float(lr)
        self.momentum = float(momentum)
        self.milestones = sorted((int(e), float(f)) for e, f in milestones)
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}

    def lr_at(self, epoch):
        lr = self.base_lr
        for at, factor in self.milestones:
            if epoch >= at:
                lr *= factor
        return lr

    def step(self, grads, epoch):
        lr = self.lr_at(epoch)
        for key, p in self.params.items():
            g = grads[key]
            if g.shape != p.shape:
                raise ValueError(f"{key}: gradient shape {g.shape} != {p.shape}")
            v = self.velocity[key]
            v *= self.momentum
            v += g
            p -= lr * v


_NORM_KINDS = {
    "bn": norms.BatchNorm,
    "ln": norms.LayerNorm,
    "in": norms.InstanceNorm,
    "gn": norms.GroupNorm,
    "bcn": norms.BatchChannelNorm,
    "none": norms.Identity,
}


def make_norm(kind, channels, groups=4, eps=1e-5, alpha=0.9, squash_mix=False):
    if kind not in _NORM_KINDS:
        raise ValueError(f"normalizer must be one of {sorted(_NORM_KINDS)}, got {kind!r}")
    if kind == "gn":
        return norms.GroupNorm(channels, groups, eps=eps)
    if kind == "bn":
        return norms.BatchNorm(channels, eps=eps, alpha=alpha)
    if kind == "bcn":
        return norms.BatchChannelNorm(channels, eps=eps, alpha=alpha, squash_mix=squash_mix)
    if kind == "none":
        return norms.Identity(channels)
    return _NORM_KINDS[kind](channels, eps=eps)


class SmallCNN:
    """conv(in->16) -> norm -> relu -> conv(16->32) -> norm -> relu -> pool -> dense.

    Two normalization sites, 3x3 same-padded convolutions, global average
    pooling into a linear classifier head.
    """

    def __init__(self, classes, in_channels=3, channels=(16, 32), norm="bcn",
                 groups=4, eps=1e-5, alpha=0.9, squash_mix=False, rng=None):
        rng = np.random.default_rng(rng)
        c1, c2 = channels
        self.conv1 = ConvLayer(in_channels, c1, 3, 3, padding="same", rng=rng)
        self.norm1 = make_norm(norm, c1, groups, eps, alpha, squash_mix)
        self.act1 = ReLU()
        self.conv2 = ConvLayer(c1, c2, 3, 3, padding="same", rng=rng)
        self.norm2 = make_norm(norm, c2, groups, eps, alpha, squash_mix)
        self.act2 = ReLU()
        self.pool = GlobalAvgPool()
        self.fc = DenseLayer(c2, classes, rng=rng)
        self.norm_kind = norm
        self._named = [
            ("conv1", self.conv1), ("norm1", self.norm1), ("act1", self.act1),
            ("conv2", self.conv2), ("norm2", self.norm2), ("act2", self.act2),
            ("pool", self.pool), ("fc", self.fc),
        ]

    def forward(self, x, training=True):
        h = x
        for _, layer in self._named[:-1]:
            h = layer.forward(h, training=training)
        n, c = h.shape[0], h.shape[1]
        return self.fc.forward(h.reshape(n, c), training=training)

    def backward(self, dlogits):
        d = self.fc.backward(dlogits)
        d = d.reshape(d.shape[0], d.shape[1], 1, 1)
        for _, layer in reversed(self._named[:-1]):
            d = layer.backward(d)
        return d

    def params(self):
        out = {}
        for name, layer in self._named:
            for pname, p in layer.params.items():
                out[f"{name}.{pname}"] = p
        return out

    def grads(self):
        out = {}
        for name, layer in self._named:
            for pname, g in layer.grads.items():
                out[f"{name}.{pname}"] = g
        return out

    def norm_layers(self):
        return {"norm1": self.norm1, "norm2": self.norm2}

    def state_dict(self):
        state = {}
        for name, layer in self._named:
            state.update(layer.state_dict(prefix=name))
        return state

    def load_state_dict(self, state):
        for name, layer in self._named:
            layer.load_state_dict(state, prefix=name)
