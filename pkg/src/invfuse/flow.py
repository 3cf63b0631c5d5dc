"""Invertible coupling flow that maps an image pair to (fused, latent).

The network stacks the two sources as channels and pushes them through k
affine coupling blocks.  Between consecutive blocks a fixed, seeded channel
permutation mixes the streams; for k >= 3 an invertible 2x2 squeeze drops to
half resolution after block 1 and is undone before the final block, so the
middle blocks see 4x the channels.  The first output channel (optionally
squashed by a sigmoid) is the fused image, the second is the latent.

Coupling math per block, with channel halves (u1, u2) and two small conv
subnets A and B emitting per-pixel log-scales s and shifts t:

    forward:  v1 = u1 * exp(sB(u2)) + tB(u2)
              v2 = u2 * exp(sA(v1)) + tA(v1)
    inverse:  u2 = (v2 - tA(v1)) * exp(-sA(v1))
              u1 = (v1 - tB(u2)) * exp(-sB(u2))

Each subnet is conv -> relu -> conv with the final conv zero-initialized, so
an untrained block is exactly the identity and the whole stack starts as a
(permuted) identity map with a perfect inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, ShapeError

LATENT_KINDS = ("normal", "zeros", "ones", "uniform")


@dataclass
class ModelConfig:
    k: int = 3
    hidden_channels: int = 16
    kernel_size: int = 3
    sigmoid_head: bool = True
    clamp_scale: float = 0.0  # 0 disables the soft arctan clamp on s
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.hidden_channels < 1:
            raise ConfigError(f"hidden_channels must be >= 1, got {self.hidden_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.clamp_scale < 0:
            raise ConfigError(f"clamp_scale must be >= 0, got {self.clamp_scale}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


@dataclass(frozen=True)
class LatentSpec:
    """Which prior the latent image is matched to / sampled from."""

    kind: str = "normal"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in LATENT_KINDS:
            raise ConfigError(f"latent kind must be one of {LATENT_KINDS}, got {self.kind!r}")

    @property
    def is_constant(self):
        return self.kind in ("zeros", "ones")

    @property
    def constant_value(self):
        return {"zeros": 0.0, "ones": 1.0}[self.kind]


def sample_latent(spec, shape, draw_index):
    """Deterministic prior draw: the same (seed, draw_index) always yields
    the same sample, independent of any global RNG state."""
    if spec.kind == "zeros":
        return np.zeros(shape)
    if spec.kind == "ones":
        return np.ones(shape)
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, int(draw_index))))
    if spec.kind == "normal":
        return rng.standard_normal(shape)
    return rng.random(shape)  # uniform in [0, 1)


def resample_plan(k):
    """Resolution plan for the k-1 gaps between blocks: one squeeze right
    after block 1 and one unsqueeze right before block k, only when k >= 3."""
    if k < 3:
        return ["none"] * (k - 1)
    plan = ["none"] * (k - 1)
    plan[0] = "down"
    plan[-1] = "up"
    return plan


def block_channel_counts(k):
    """Channel width seen by each block under the resample plan."""
    plan = resample_plan(k)
    counts = [2]
    for gap in plan:
        c = counts[-1]
        counts.append(c * 4 if gap == "down" else c // 4 if gap == "up" else c)
    return counts


class FlowModel:
    """Owns the numpy parameter arrays, permutations, and config."""

    def __init__(self, config):
        self.config = config
        counts = block_channel_counts(config.k)
        init_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0)))
        self.blocks = []
        for c in counts:
            self.blocks.append({
                "a": _init_subnet(c // 2, config.hidden_channels, config.kernel_size, init_rng),
                "b": _init_subnet(c // 2, config.hidden_channels, config.kernel_size, init_rng),
            })
        perm_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
        plan = resample_plan(config.k)
        self.perms = []
        for gap in range(config.k - 1):
            self.perms.append(perm_rng.permutation(counts[gap]))
        self.plan = plan

    def parameters(self):
        """Stable (name, array) list; ordering is the checkpoint contract."""
        out = []
        for j, block in enumerate(self.blocks):
            for side in ("a", "b"):
                for pname in ("w1", "b1", "w2", "b2"):
                    out.append((f"block{j}.{side}.{pname}", block[side][pname]))
        return out

    def set_parameters(self, named):
        mine = dict(self.parameters())
        for name, arr in named:
            if name not in mine:
                raise ShapeError(f"unknown parameter {name!r}")
            if mine[name].shape != arr.shape:
                raise ShapeError(
                    f"parameter {name!r}: shape {arr.shape} != expected {mine[name].shape}")
            mine[name][...] = arr

    def bind(self, tape=None):
        return BoundFlow(self, tape)


def _init_subnet(half, hidden, ksize, rng):
    """conv1: zero-mean uniform fan-in; conv2 (emitting s,t): zeros, so the
    block starts as the identity."""
    fan_in = half * ksize * ksize
    bound = 1.0 / math.sqrt(fan_in)
    return {
        "w1": rng.uniform(-bound, bound, size=(hidden, half, ksize, ksize)),
        "b1": np.zeros(hidden),
        "w2": np.zeros((2 * half, hidden, ksize, ksize)),
        "b2": np.zeros(2 * half),
    }


def randomize_parameters(model, seed, scale=0.1):
    """Overwrite all parameters with small uniform noise (tests, probes).

    ``scale`` multiplies the fan-in bound; small scales keep the per-block
    log-scales |s| modest so round trips stay well-conditioned.
    """
    rng = np.random.default_rng(seed)
    for name, arr in model.parameters():
        fan_in = arr.shape[1] * arr.shape[2] * arr.shape[3] if arr.ndim == 4 else max(arr.size, 1)
        arr[...] = rng.uniform(-1, 1, size=arr.shape) * (scale / math.sqrt(fan_in))


class BoundFlow:
    """The model's parameters wrapped as Tensors on one tape (or as constants).

    Binding once and reusing the instance for both directions makes the
    forward and inverse passes share leaves, so gradients from a fusion loss
    and a decomposition loss accumulate into the same parameters.
    """

    def __init__(self, model, tape):
        self.model = model
        self.tape = tape
        self.blocks = []
        first_new = len(tape.leaves) if tape is not None else 0
        make = tape.leaf if tape is not None else ad.Tensor
        for block in model.blocks:
            bound_block = {}
            for side in ("a", "b"):
                bound_block[side] = {k: make(v) for k, v in block[side].items()}
            self.blocks.append(bound_block)
        # leaves in the same order as FlowModel.parameters()
        self.leaves = tape.leaves[first_new:] if tape is not None else []

    # -- subnet ---------------------------------------------------------
    def _subnet(self, h, params):
        hid = ad.relu(ad.conv2d(h, params["w1"], params["b1"]))
        st = ad.conv2d(hid, params["w2"], params["b2"])
        half = st.shape[1] // 2
        s = ad.slice_channels(st, 0, half)
        t = ad.slice_channels(st, half, 2 * half)
        c = self.model.config.clamp_scale
        if c > 0:
            s = ad.scalar_mul(ad.arctan(ad.scalar_mul(s, 1.0 / c)), c * 2.0 / math.pi)
        return s, t

    def _couple_forward(self, h, j):
        half = h.shape[1] // 2
        u1 = ad.slice_channels(h, 0, half)
        u2 = ad.slice_channels(h, half, 2 * half)
        s2, t2 = self._subnet(u2, self.blocks[j]["b"])
        v1 = u1 * ad.exp(s2) + t2
        s1, t1 = self._subnet(v1, self.blocks[j]["a"])
        v2 = u2 * ad.exp(s1) + t1
        return ad.concat_channels(v1, v2)

    def _couple_inverse(self, h, j):
        half = h.shape[1] // 2
        v1 = ad.slice_channels(h, 0, half)
        v2 = ad.slice_channels(h, half, 2 * half)
        s1, t1 = self._subnet(v1, self.blocks[j]["a"])
        u2 = (v2 - t1) * ad.exp(ad.scalar_mul(s1, -1.0))
        s2, t2 = self._subnet(u2, self.blocks[j]["b"])
        u1 = (v1 - t2) * ad.exp(ad.scalar_mul(s2, -1.0))
        return ad.concat_channels(u1, u2)

    # -- full passes ------------------------------------------------------
    def forward(self, x1, x2):
        """(x1, x2) -> (fused y, latent z), each Bx1xHxW."""
        x1, x2 = _check_pair(x1, x2, self.model.config)
        h = ad.concat_channels(x1, x2)
        k = self.model.config.k
        for j in range(k):
            try:
                h = self._couple_forward(h, j)
            except NumericError as err:
                raise NumericError(f"block {j}: {err}") from err
            _check_finite(h, j)
            if j < k - 1:
                h = ad.permute_channels(h, self.model.perms[j])
                gap = self.model.plan[j]
                if gap == "down":
                    h = ad.squeeze2x2(h)
                elif gap == "up":
                    h = ad.unsqueeze2x2(h)
        y = ad.slice_channels(h, 0, 1)
        z = ad.slice_channels(h, 1, 2)
        if self.model.config.sigmoid_head:
            y = ad.sigmoid(y)
        return y, z

    def inverse(self, y, z):
        """(fused y, latent z) -> reconstructed (x1, x2)."""
        y, z = _check_pair(y, z, self.model.config)
        if self.model.config.sigmoid_head:
            y = ad.logit(y)
        h = ad.concat_channels(y, z)
        k = self.model.config.k
        for j in range(k - 1, -1, -1):
            if j < k - 1:
                gap = self.model.plan[j]
                if gap == "down":
                    h = ad.unsqueeze2x2(h)
                elif gap == "up":
                    h = ad.squeeze2x2(h)
                h = ad.permute_channels(h, np.argsort(self.model.perms[j]))
            try:
                h = self._couple_inverse(h, j)
            except NumericError as err:
                raise NumericError(f"block {j}: {err}") from err
            _check_finite(h, j)
        return ad.slice_channels(h, 0, 1), ad.slice_channels(h, 1, 2)


def _check_pair(a, b, config):
    a = a if isinstance(a, ad.Tensor) else ad.Tensor(a)
    b = b if isinstance(b, ad.Tensor) else ad.Tensor(b)
    if a.data.ndim != 4 or a.shape[1] != 1:
        raise ShapeError(f"expected Bx1xHxW images, got {a.shape}")
    if a.shape != b.shape:
        raise ShapeError(f"image pair shapes differ: {a.shape} vs {b.shape}")
    if config.k >= 3 and (a.shape[2] % 2 or a.shape[3] % 2):
        raise ShapeError(
            f"spatial dims {a.shape[2:]} must be even for the k>=3 resampling plan")
    return a, b


def _check_finite(h, block_index):
    if not np.all(np.isfinite(h.data)):
        raise NumericError(f"block {block_index}: non-finite activations")


# -- numpy-in / numpy-out conveniences (inference, CLI, metrics) -----------

def _as_batch(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None, None], True
    return img, False


def fuse_pair(model, x1, x2):
    """Fuse numpy images (HxW or Bx1xHxW); returns (y, z) as numpy."""
    x1b, squeeze = _as_batch(x1)
    x2b, _ = _as_batch(x2)
    y, z = model.bind().forward(ad.Tensor(x1b), ad.Tensor(x2b))
    if squeeze:
        return y.data[0, 0], z.data[0, 0]
    return y.data, z.data


def decompose_pair(model, y, z):
    """Invert numpy images (HxW or Bx1xHxW); returns (x1, x2) as numpy."""
    yb, squeeze = _as_batch(y)
    zb, _ = _as_batch(z)
    x1, x2 = model.bind().inverse(ad.Tensor(yb), ad.Tensor(zb))
    if squeeze:
        return x1.data[0, 0], x2.data[0, 0]
    return x1.data, x2.data
