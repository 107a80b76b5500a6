"""Normalization layers over NCHW feature maps.

All five layers follow the same recipe: pool mean and biased variance
over an index set, standardize with an epsilon inside the square root,
then apply a per-channel affine (gamma, beta):

    BatchNorm         stats per channel over (N, H, W); EMA statistics at eval
    LayerNorm         stats per sample over (C, H, W); identical train and eval
    InstanceNorm      stats per (sample, channel) over (H, W)
    GroupNorm         stats per (sample, group) over the group's (C, H, W) block
    BatchChannelNorm  standardizes along BOTH the per-channel batch axes and
                      the per-sample layer axes, then blends the two branches
                      with a learned per-channel mixing coefficient before the
                      affine; EMA statistics for the batch branch only

Training-mode forward caches the standardized values and inverse standard
deviations for backward.  Backward after an eval forward is refused: eval
statistics are constants and the batch-statistic gradient paths do not
exist there.

Running statistics are exponential moving averages of the *biased*
per-batch moments (divisor n).  Frameworks that keep an unbiased running
variance will disagree slightly by design.  EMA buffers are state, not
parameters: no gradient ever flows into them.
"""

import numpy as np

from .tensor_ops import (
    BATCH_SPATIAL,
    CHANNEL_SPATIAL,
    SPATIAL,
    as_tensor4,
    group_spatial,
    reduce_mean,
    reduce_var,
    reduced_count,
)


def ema_update(mean, var, batch_mean, batch_var, alpha):
    """One exponential-moving-average step: new = alpha * old + (1 - alpha) * batch.

    Returns the updated (mean, var) pair; inputs are not modified.
    """
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    batch_mean = np.asarray(batch_mean, dtype=np.float64)
    batch_var = np.asarray(batch_var, dtype=np.float64)
    if not (mean.shape == var.shape == batch_mean.shape == batch_var.shape):
        raise ValueError("running and batch statistics must have matching shapes")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if np.any(batch_var < 0.0):
        raise ValueError("negative batch variance")
    return alpha * mean + (1.0 - alpha) * batch_mean, alpha * var + (1.0 - alpha) * batch_var


def _standardize(x, axes, eps):
    """Center and scale ``x`` over ``axes``: returns (xhat, mean, var, inv_std)."""
    mean = reduce_mean(x, axes)
    var = reduce_var(x, mean, axes)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean) * inv, mean, var, inv


def _standardize_backward(dxhat, xhat, inv, axes):
    """Gradient through ``xhat = (x - mean(x)) * inv_std(x)`` over ``axes``.

    Includes the mean and variance paths:
        dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    where the means run over the same index set the statistics used.
    """
    return inv * (
        dxhat - reduce_mean(dxhat, axes) - xhat * reduce_mean(dxhat * xhat, axes)
    )


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class _NormBase:
    """Shared state and affine handling for the normalization layers."""

    has_running_stats = False

    def __init__(self, channels, eps=1e-5):
        channels = int(channels)
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        if not eps > 0.0:
            raise ValueError(f"eps must be > 0, got {eps}")
        self.channels = channels
        self.eps = float(eps)
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.grads = {}
        self._cache = None

    @property
    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def _check_input(self, x):
        x = as_tensor4(x)
        if x.shape[1] != self.channels:
            raise ValueError(
                f"input has {x.shape[1]} channels, layer expects {self.channels}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite values in input")
        return x

    def _affine(self, xhat):
        return self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]

    def _affine_backward(self, dy, xhat):
        """Fills dgamma/dbeta and returns the gradient w.r.t. ``xhat``."""
        self.grads["beta"] = dy.sum(axis=(0, 2, 3))
        self.grads["gamma"] = (dy * xhat).sum(axis=(0, 2, 3))
        return dy * self.gamma[None, :, None, None]

    def _take_cache(self, dy):
        if self._cache is None:
            raise RuntimeError(
                "backward requires a training-mode forward (eval statistics are "
                "constants; there is no batch path to differentiate)"
            )
        dy = np.asarray(dy, dtype=np.float64)
        if dy.shape != self._cache["shape"]:
            raise ValueError(
                f"upstream gradient shape {dy.shape} does not match "
                f"forward shape {self._cache['shape']}"
            )
        return dy

    # -- serialization --------------------------------------------------

    _scalar_fields = ("eps",)
    _vector_fields = ("gamma", "beta")

    def state_dict(self, prefix=""):
        if prefix and not prefix.endswith("."):
            prefix = prefix + "."
        state = {}
        for name in self._vector_fields:
            state[prefix + name] = getattr(self, name).copy()
        for name in self._scalar_fields:
            state[prefix + name] = np.array([float(getattr(self, name))])
        return state

    def load_state_dict(self, state, prefix=""):
        if prefix and not prefix.endswith("."):
            prefix = prefix + "."
        for name in self._vector_fields:
            value = np.asarray(state[prefix + name], dtype=np.float64).ravel()
            target = getattr(self, name)
            if value.shape != target.shape:
                raise ValueError(
                    f"{prefix}{name}: expected {target.shape}, got {value.shape}"
                )
            target[...] = value
        for name in self._scalar_fields:
            setattr(self, name, float(np.asarray(state[prefix + name]).ravel()[0]))


class _RunningStatsMixin:
    """Per-channel EMA mean/variance shared by the batch-statistic layers."""

    has_running_stats = True

    def _init_running_stats(self, alpha):
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {alpha}")
        self.alpha = float(alpha)
        self.running_mean = np.zeros(self.channels)
        self.running_var = np.ones(self.channels)
        self.num_updates = 0

    def seed_running_stats(self, mean, var):
        """Explicitly install running statistics (marks them usable for eval)."""
        mean = np.asarray(mean, dtype=np.float64).ravel()
        var = np.asarray(var, dtype=np.float64).ravel()
        if mean.shape != (self.channels,) or var.shape != (self.channels,):
            raise ValueError(f"running statistics must have length {self.channels}")
        if np.any(var < 0.0):
            raise ValueError("negative running variance")
        self.running_mean = mean.copy()
        self.running_var = var.copy()
        self.num_updates = 1

    def _update_running_stats(self, batch_mean, batch_var):
        self.running_mean, self.running_var = ema_update(
            self.running_mean, self.running_var, batch_mean, batch_var, self.alpha
        )
        self.num_updates += 1

    def _require_initialized(self):
        if self.num_updates < 1:
            raise RuntimeError(
                "eval-mode forward before any running-statistics update; "
                "train first or seed_running_stats()"
            )

    def eval_fold(self):
        """Per-channel (scale, shift) equivalent of the eval-mode batch branch.

        ``scale * x + shift`` reproduces the standardization against the
        running statistics, so a caller can fuse it (and its affine) into a
        preceding linear op.  Only the batch branch folds this way; a
        sample-dependent branch (layer statistics) cannot be folded because
        its statistics change with every input.
        """
        self._require_initialized()
        scale = 1.0 / np.sqrt(self.running_var + self.eps)
        return scale, -self.running_mean * scale


class BatchNorm(_RunningStatsMixin, _NormBase):
    """Standardize each channel over (N, H, W); eval uses EMA statistics."""

    def __init__(self, channels, eps=1e-5, alpha=0.9):
        super().__init__(channels, eps)
        self._init_running_stats(alpha)

    def forward(self, x, training=True, update_stats=True):
        x = self._check_input(x)
        if training:
            if reduced_count(BATCH_SPATIAL, x.shape) < 2:
                raise ValueError("batch statistics need N*H*W >= 2")
            xhat, mean, var, inv = _standardize(x, BATCH_SPATIAL, self.eps)
            if update_stats:
                self._update_running_stats(mean.ravel(), var.ravel())
            self._cache = {"shape": x.shape, "xhat": xhat, "inv": inv}
        else:
            self._require_initialized()
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None]) * inv[None, :, None, None]
            self._cache = None
        return self._affine(xhat)

    def backward(self, dy):
        dy = self._take_cache(dy)
        cache = self._cache
        dxhat = self._affine_backward(dy, cache["xhat"])
        return _standardize_backward(dxhat, cache["xhat"], cache["inv"], BATCH_SPATIAL)

    _scalar_fields = ("eps", "alpha", "num_updates")
    _vector_fields = ("gamma", "beta", "running_mean", "running_var")

    def load_state_dict(self, state, prefix=""):
        super().load_state_dict(state, prefix)
        self.num_updates = int(self.num_updates)


class LayerNorm(_NormBase):
    """Standardize each sample over (C, H, W); same computation train and eval."""

    def __init__(self, channels, eps=1e-5):
        super().__init__(channels, eps)

    def forward(self, x, training=True, update_stats=True):
        x = self._check_input(x)
        if reduced_count(CHANNEL_SPATIAL, x.shape) < 2:
            raise ValueError("layer statistics need C*H*W >= 2")
        xhat, _, _, inv = _standardize(x, CHANNEL_SPATIAL, self.eps)
        self._cache = {"shape": x.shape, "xhat": xhat, "inv": inv} if training else None
        return self._affine(xhat)

    def backward(self, dy):
        dy = self._take_cache(dy)
        cache = self._cache
        dxhat = self._affine_backward(dy, cache["xhat"])
        return _standardize_backward(dxhat, cache["xhat"], cache["inv"], CHANNEL_SPATIAL)


class InstanceNorm(_NormBase):
    """Standardize every (sample, channel) slice over its spatial locations."""

    def __init__(self, channels, eps=1e-5):
        super().__init__(channels, eps)

    def forward(self, x, training=True, update_stats=True):
        x = self._check_input(x)
        if reduced_count(SPATIAL, x.shape) < 2:
            raise ValueError("instance statistics need H*W >= 2")
        xhat, _, _, inv = _standardize(x, SPATIAL, self.eps)
        self._cache = {"shape": x.shape, "xhat": xhat, "inv": inv} if training else None
        return self._affine(xhat)

    def backward(self, dy):
        dy = self._take_cache(dy)
        cache = self._cache
        dxhat = self._affine_backward(dy, cache["xhat"])
        return _standardize_backward(dxhat, cache["xhat"], cache["inv"], SPATIAL)


class GroupNorm(_NormBase):
    """Standardize per (sample, group) over the group's channels and (H, W)."""

    def __init__(self, channels, groups, eps=1e-5):
        super().__init__(channels, eps)
        groups = int(groups)
        if groups < 1:
            raise ValueError(f"groups must be >= 1, got {groups}")
        if channels % groups:
            raise ValueError(f"{channels} channels are not divisible into {groups} groups")
        self.groups = groups
        self._axes = group_spatial(groups)

    def forward(self, x, training=True, update_stats=True):
        x = self._check_input(x)
        if reduced_count(self._axes, x.shape) < 2:
            raise ValueError("group statistics need (C/groups)*H*W >= 2")
        xhat, _, _, inv = _standardize(x, self._axes, self.eps)
        self._cache = {"shape": x.shape, "xhat": xhat, "inv": inv} if training else None
        return self._affine(xhat)

    def backward(self, dy):
        dy = self._take_cache(dy)
        cache = self._cache
        dxhat = self._affine_backward(dy, cache["xhat"])
        return _standardize_backward(dxhat, cache["xhat"], cache["inv"], self._axes)

    _scalar_fields = ("eps", "groups")
    _vector_fields = ("gamma", "beta")

    def load_state_dict(self, state, prefix=""):
        super().load_state_dict(state, prefix)
        self.groups = int(self.groups)
        self._axes = group_spatial(self.groups)


class BatchChannelNorm(_RunningStatsMixin, _NormBase):
    """Blend of per-channel batch standardization and per-sample layer standardization.

    The input is standardized twice: once per channel over (N, H, W) (the
    batch branch, with EMA statistics at eval) and once per sample over
    (C, H, W) (the layer branch, recomputed at eval exactly as in training).
    A learned per-channel coefficient ``mix`` blends the branches,

        blended = mix * batch_branch + (1 - mix) * layer_branch

    and the usual per-channel affine follows.  ``mix`` starts at 1 per
    channel and is unconstrained; with ``squash_mix=True`` the stored
    parameter is a logit and the effective coefficient is its sigmoid
    (confined to (0, 1); the initial raw value 1.0 then maps to ~0.73).
    """

    def __init__(self, channels, eps=1e-5, alpha=0.9, squash_mix=False):
        super().__init__(channels, eps)
        self._init_running_stats(alpha)
        self.mix = np.ones(channels)
        self.squash_mix = bool(squash_mix)

    @property
    def params(self):
        return {"gamma": self.gamma, "beta": self.beta, "mix": self.mix}

    def effective_mix(self):
        return _sigmoid(self.mix) if self.squash_mix else self.mix.copy()

    def forward(self, x, training=True, update_stats=True):
        x = self._check_input(x)
        if training:
            if reduced_count(BATCH_SPATIAL, x.shape) < 2:
                raise ValueError("batch statistics need N*H*W >= 2")
            if reduced_count(CHANNEL_SPATIAL, x.shape) < 2:
                raise ValueError("layer statistics need C*H*W >= 2")
            x1, mean1, var1, inv1 = _standardize(x, BATCH_SPATIAL, self.eps)
            if update_stats:
                self._update_running_stats(mean1.ravel(), var1.ravel())
        else:
            self._require_initialized()
            inv1 = (1.0 / np.sqrt(self.running_var + self.eps))[None, :, None, None]
            x1 = (x - self.running_mean[None, :, None, None]) * inv1
        x2, _, _, inv2 = _standardize(x, CHANNEL_SPATIAL, self.eps)
        m = self.effective_mix()[None, :, None, None]
        blended = m * x1 + (1.0 - m) * x2
        if training:
            self._cache = {
                "shape": x.shape,
                "x1": x1,
                "x2": x2,
                "inv1": inv1,
                "inv2": inv2,
                "mix": m,
                "blended": blended,
            }
        else:
            self._cache = None
        return self._affine(blended)

    def backward(self, dy):
        """Returns dx; fills grads for gamma, beta and mix.

        The input reaches the output through both branches, so dx is the
        mix-weighted batch-branch backward plus the (1 - mix)-weighted
        layer-branch backward, each with its own mean/variance path.
        """
        dy = self._take_cache(dy)
        cache = self._cache
        dblended = self._affine_backward(dy, cache["blended"])
        dmix = (dblended * (cache["x1"] - cache["x2"])).sum(axis=(0, 2, 3))
        if self.squash_mix:
            m = cache["mix"][0, :, 0, 0]
            dmix = dmix * m * (1.0 - m)
        self.grads["mix"] = dmix
        dx1 = dblended * cache["mix"]
        dx2 = dblended * (1.0 - cache["mix"])
        return _standardize_backward(
            dx1, cache["x1"], cache["inv1"], BATCH_SPATIAL
        ) + _standardize_backward(dx2, cache["x2"], cache["inv2"], CHANNEL_SPATIAL)

    _scalar_fields = ("eps", "alpha", "num_updates")
    _vector_fields = ("gamma", "beta", "mix", "running_mean", "running_var")

    def load_state_dict(self, state, prefix=""):
        super().load_state_dict(state, prefix)
        self.num_updates = int(self.num_updates)


class Identity:
    """No-op stand-in used when a model is configured without normalization."""

    has_running_stats = False

    def __init__(self, channels=None, eps=None):
        self.grads = {}
        self._shape = None

    @property
    def params(self):
        return {}

    def forward(self, x, training=True, update_stats=True):
        x = np.asarray(x, dtype=np.float64)
        self._shape = x.shape
        return x

    def backward(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        if self._shape is not None and dy.shape != self._shape:
            raise ValueError(f"upstream gradient shape {dy.shape} != {self._shape}")
        return dy

    def state_dict(self, prefix=""):
        return {}

    def load_state_dict(self, state, prefix=""):
        pass
