"""Building blocks of the multi-head denoiser and the assembled model.

Layers are plain objects holding parameter tensors; each exposes ``forward``
plus ``params(prefix)`` / ``states(prefix)`` iterators used for optimizer
registration and checkpointing. Construction is deterministic for a fixed
config seed. Forward passes in eval mode are read-only and reproducible
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .rng import SplitMix64
from .tensor import Tensor, apply_op


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``angles`` holds counterclockwise quarter-turn counts per head; the first
    head always receives the unrotated image because the residual subtraction
    is against the 0-degree stream.
    """

    width: int = 128
    heads: int = 3
    angles: tuple = (0, 1, 2)
    use_mpa: bool = True
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        self.angles = tuple(int(a) for a in self.angles)
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if len(self.angles) != self.heads:
            raise ValueError(
                f"heads ({self.heads}) must equal number of angles ({len(self.angles)})"
            )
        if self.angles[0] != 0:
            raise ValueError("the first head must receive the unrotated image (angle 0)")
        if any(a not in (0, 1, 2, 3) for a in self.angles):
            raise ValueError(f"angles must be quarter-turn counts in 0..3, got {self.angles}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "heads": self.heads,
            "angles": list(self.angles),
            "use_mpa": self.use_mpa,
            "in_channels": self.in_channels,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# differentiable primitives that live at the layer level
# ---------------------------------------------------------------------------


# Harness hook: when set, receives (block, stage, pre_activation_array) for
# every kinked activation in a dense block. The gradient-check suite uses it
# to position the check point away from ReLU/PReLU kinks, where central
# differences measure nothing.
_kink_probe = None


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)
    return apply_op(out, [x], lambda needs: lambda g: [g * (xd > 0)], "relu")


def prelu(x: Tensor, alpha: Tensor) -> Tensor:
    """Parametric ReLU with one learnable slope per channel of a (b,c,h,w) input."""
    xd = x.data
    a = alpha.data[None, :, None, None]
    out = np.where(xd > 0, xd, a * xd)

    def factory(needs):
        def pull(g):
            dx = g * np.where(xd > 0, 1.0, a) if needs[0] else None
            da = (g * np.minimum(xd, 0)).sum(axis=(0, 2, 3)) if needs[1] else None
            return [dx, da]

        return pull

    return apply_op(out, [x, alpha], factory, "prelu")


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return apply_op(y, [x], lambda needs: lambda g: [g * y * (1.0 - y)], "sigmoid")


def spatial_mean(x: Tensor) -> Tensor:
    """Global average over the spatial axes: (b,c,h,w) -> (b,c)."""
    xd = x.data
    b, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))

    def factory(needs):
        def pull(g):
            return [np.broadcast_to(g[:, :, None, None] / (h * w), xd.shape)]

        return pull

    return apply_op(out, [x], factory, "spatial_mean")


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale each (b,c) channel slice of x by s[b,c] (dedicated broadcast path)."""
    xd, sd = x.data, s.data
    if sd.shape != xd.shape[:2]:
        raise T.TensorError(f"channel_scale: weights {sd.shape} vs input {xd.shape}")
    out = xd * sd[:, :, None, None]

    def factory(needs):
        def pull(g):
            dx = g * sd[:, :, None, None] if needs[0] else None
            ds = (g * xd).sum(axis=(2, 3)) if needs[1] else None
            return [dx, ds]

        return pull

    return apply_op(out, [x, s], factory, "channel_scale")


def conv1d_channels(x: Tensor, w: Tensor) -> Tensor:
    """1-D cross-correlation along the channel axis of a (b,c) tensor.

    Odd kernel length, zero padding (k-1)/2, no bias: the channel-attention
    descriptor path.
    """
    xd, wd = x.data, w.data
    k = wd.shape[0]
    pad = (k - 1) // 2
    b, c = xd.shape
    xp = np.pad(xd, ((0, 0), (pad, pad)))
    out = np.zeros_like(xd)
    for j in range(k):
        out += wd[j] * xp[:, j:j + c]

    def factory(needs):
        def pull(g):
            dx = dw = None
            if needs[0]:
                gp = np.pad(g, ((0, 0), (pad, pad)))
                dx = np.zeros_like(xd)
                for j in range(k):
                    # adjoint of correlation: correlate with the flipped kernel
                    dx += wd[j] * gp[:, 2 * pad - j:2 * pad - j + c]
            if needs[1]:
                dw = np.array([(g * xp[:, j:j + c]).sum() for j in range(k)], dtype=wd.dtype)
            return [dx, dw]

        return pull

    return apply_op(out, [x, w], factory, "conv1d_channels")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each (dim0, dim1) slice of a rank-4 tensor over its last two axes.

    No learned affine. A constant slice maps to zeros (eps guards the variance).
    """
    xd = x.data
    if xd.ndim != 4:
        raise T.TensorError(f"instance_norm: expected rank 4, got {xd.ndim}")
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    s = np.sqrt(var + eps)
    y = (xd - mu) / s

    def factory(needs):
        def pull(g):
            gm = g.mean(axis=(2, 3), keepdims=True)
            gym = (g * y).mean(axis=(2, 3), keepdims=True)
            return [(g - gm - y * gym) / s]

        return pull

    return apply_op(y, [x], factory, "instance_norm")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _he_weight(rng: SplitMix64, cout: int, cin: int, kh: int, kw: int, dtype) -> np.ndarray:
    fan_in = cin * kh * kw
    std = math.sqrt(2.0 / fan_in)
    return rng.gaussian(cout * cin * kh * kw, 0.0, std).reshape(cout, cin, kh, kw).astype(dtype)


class Conv2d:
    def __init__(self, cin, cout, k, rng, dtype, padding=0, bias=True):
        self.weight = Tensor(_he_weight(rng, cout, cin, k, k, dtype))
        self.bias = Tensor(np.zeros(cout, dtype=dtype)) if bias else None
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)

    def params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias

    def states(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())


class PReLU:
    def __init__(self, channels, dtype):
        self.alpha = Tensor(np.full(channels, 0.25, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return prelu(x, self.alpha)

    def params(self, prefix):
        yield f"{prefix}.alpha", self.alpha

    def states(self, prefix):
        return iter(())


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Training mode normalizes by the batch statistics and updates the running
    estimates (momentum 0.1, unbiased variance); eval mode uses the frozen
    running statistics and is deterministic.
    """

    def __init__(self, channels, dtype, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(channels, dtype=dtype))
        self.beta = Tensor(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor, training: bool) -> Tensor:
        xd = x.data
        gamma, beta = self.gamma, self.beta
        gd = gamma.data[None, :, None, None]
        if training:
            mu = xd.mean(axis=(0, 2, 3))
            var = xd.var(axis=(0, 2, 3))
            n = xd.shape[0] * xd.shape[2] * xd.shape[3]
            m = self.momentum
            unbiased = var * (n / (n - 1)) if n > 1 else var
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(xd.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(xd.dtype)
        else:
            mu = self.running_mean
            var = self.running_var
            n = None
        s = np.sqrt(var + self.eps)
        xhat = (xd - mu[None, :, None, None]) / s[None, :, None, None]
        out = gd * xhat + beta.data[None, :, None, None]

        def factory(needs):
            def pull(g):
                dgamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
                dbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
                dx = None
                if needs[0]:
                    if training:
                        dxhat = g * gd
                        sg = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                        sgx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                        dx = (dxhat - sg / n - xhat * sgx / n) / s[None, :, None, None]
                    else:
                        dx = g * gd / s[None, :, None, None]
                return [dx, dgamma, dbeta]

            return pull

        return apply_op(out, [x, gamma, beta], factory, "batch_norm")

    def params(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def states(self, prefix):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var

    def load_state(self, name, value):
        if name.endswith("running_mean"):
            self.running_mean = value.copy()
        else:
            self.running_var = value.copy()


class DenseBlock:
    """Three conv+PReLU stages with dense connectivity, then conv+BN+ReLU.

    Stage i consumes the concatenation of the block input and all previous
    stage outputs; every stage emits the block width, so the compression
    stage consumes 4x the width and restores it. Spatial size is preserved
    (3x3 kernels, stride 1, padding 1).
    """

    def __init__(self, width, rng, dtype):
        self.width = width
        self.convs = [Conv2d((i + 1) * width, width, 3, rng, dtype, padding=1) for i in range(3)]
        # the compression conv feeds batch norm, whose mean subtraction makes
        # a bias unidentifiable (its training-mode gradient is exactly zero)
        self.convs.append(Conv2d(4 * width, width, 3, rng, dtype, padding=1, bias=False))
        self.prelus = [PReLU(width, dtype) for _ in range(3)]
        self.bn = BatchNorm2d(width, dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[1] != self.width:
            raise T.TensorError(
                f"dense block expects {self.width} channels, got {x.shape[1]}"
            )
        feats = [x]
        for i in range(3):
            h = self.convs[i].forward(T.concat(feats, 1) if i else x)
            if _kink_probe is not None:
                _kink_probe(self, i, h.data)
            feats.append(self.prelus[i].forward(h))
        h = self.bn.forward(self.convs[3].forward(T.concat(feats, 1)), training)
        if _kink_probe is not None:
            _kink_probe(self, 3, h.data)
        return relu(h)

    def params(self, prefix):
        for i, c in enumerate(self.convs):
            yield from c.params(f"{prefix}.conv{i}")
        for i, p in enumerate(self.prelus):
            yield from p.params(f"{prefix}.prelu{i}")
        yield from self.bn.params(f"{prefix}.bn")

    def states(self, prefix):
        yield from self.bn.states(f"{prefix}.bn")


class PathBlock:
    """Per-head feature extractor: a 1x1 channel lift then two dense blocks."""

    def __init__(self, in_channels, width, rng, dtype):
        self.entry = Conv2d(in_channels, width, 1, rng, dtype)
        self.blocks = [DenseBlock(width, rng, dtype) for _ in range(2)]

    def forward(self, image: Tensor, training: bool = False) -> Tensor:
        h = self.entry.forward(image)
        for b in self.blocks:
            h = b.forward(h, training)
        return h

    def params(self, prefix):
        yield from self.entry.params(f"{prefix}.entry")
        for i, b in enumerate(self.blocks):
            yield from b.params(f"{prefix}.block{i}")

    def states(self, prefix):
        for i, b in enumerate(self.blocks):
            yield from b.states(f"{prefix}.block{i}")


class MPABlock:
    """Image-level fusion of the head streams.

    Each stream is processed by its own 1x1 conv. Every rotated stream is
    projected onto the unrotated one through two batched matrix products with
    instance normalization between them; the unrotated flow passes through
    unchanged. The projections and the unrotated flow are concatenated and
    fused by a final 1x1 conv, so the output carries heads x width channels.
    Square spatial input is required: the rotated streams arrive as produced
    by their heads, which only registers when h == w.
    """

    def __init__(self, width, heads, rng, dtype, eps=1e-5):
        self.width = width
        self.heads = heads
        self.eps = eps
        self.stream_convs = [Conv2d(width, width, 1, rng, dtype) for _ in range(heads)]
        self.fusion = Conv2d(heads * width, heads * width, 1, rng, dtype)

    def forward(self, streams: Sequence[Tensor]) -> Tensor:
        if len(streams) != self.heads:
            raise T.TensorError(f"expected {self.heads} streams, got {len(streams)}")
        shape = streams[0].shape
        if any(s.shape != shape for s in streams):
            raise T.TensorError("all streams must share one shape")
        b, c, h, w = shape
        if h != w:
            raise T.TensorError(f"spatial dims must be square, got {h}x{w}")
        a = self.stream_convs[0].forward(streams[0])
        a_cs = T.permute(a, (0, 2, 1, 3))  # (b,s,c,s)
        flows = []
        for i in range(1, self.heads):
            r = self.stream_convs[i].forward(streams[i])
            r_sc = T.permute(r, (0, 2, 3, 1))  # (b,s,s,c)
            m = instance_norm(T.matmul_batched(a_cs, r_sc), self.eps)  # (b,s,c,c)
            p = instance_norm(T.matmul_batched(m, a_cs), self.eps)  # (b,s,c,s)
            flows.append(T.permute(p, (0, 2, 1, 3)))  # (b,c,s,s)
        flows.append(a)
        return self.fusion.forward(T.concat(flows, 1) if len(flows) > 1 else flows[0])

    def params(self, prefix):
        for i, cv in enumerate(self.stream_convs):
            yield from cv.params(f"{prefix}.stream{i}")
        yield from self.fusion.params(f"{prefix}.fusion")

    def states(self, prefix):
        return iter(())


class ConcatFusion:
    """Attention-free replacement for the fusion stage (the ablation variant).

    Rotated streams are rotated back into registration, concatenated with the
    unrotated stream, and fused by the same-shaped 1x1 conv; registration is
    required so the residual subtraction stays spatially aligned.
    """

    def __init__(self, width, heads, angles, rng, dtype):
        self.heads = heads
        self.angles = angles
        self.fusion = Conv2d(heads * width, heads * width, 1, rng, dtype)

    def forward(self, streams: Sequence[Tensor]) -> Tensor:
        flows = [
            T.rotate90k(streams[i], -self.angles[i]) for i in range(1, self.heads)
        ]
        flows.append(streams[0])
        return self.fusion.forward(T.concat(flows, 1) if len(flows) > 1 else flows[0])

    def params(self, prefix):
        yield from self.fusion.params(f"{prefix}.fusion")

    def states(self, prefix):
        return iter(())


def eca_kernel_size(channels: int) -> int:
    """Adaptive 1-D kernel length: nearest odd to log2(C)/2 + 1/2 (384 -> 5)."""
    t = int(abs((math.log2(channels) + 1.0) / 2.0))
    return t if t % 2 else t + 1


class ECALayer:
    """Channel gate: global average pool, 1-D conv across channels, sigmoid scale."""

    def __init__(self, channels, rng, dtype, k: int | None = None):
        self.k = k if k is not None else eca_kernel_size(channels)
        std = math.sqrt(2.0 / self.k)
        self.weight = Tensor(rng.gaussian(self.k, 0.0, std).astype(dtype))

    def forward(self, x: Tensor) -> Tensor:
        pooled = spatial_mean(x)
        gate = sigmoid(conv1d_channels(pooled, self.weight))
        return channel_scale(x, gate)

    def attention(self, x: Tensor) -> np.ndarray:
        """The per-channel gate values, for inspection."""
        with T.no_grad():
            return sigmoid(conv1d_channels(spatial_mean(x), self.weight)).data

    def params(self, prefix):
        yield f"{prefix}.weight", self.weight

    def states(self, prefix):
        return iter(())


class TailBlock:
    """Noise refinement: four dense blocks then a 3x3 conv to the image channels."""

    def __init__(self, channels, out_channels, rng, dtype):
        self.channels = channels
        self.blocks = [DenseBlock(channels, rng, dtype) for _ in range(4)]
        self.final = Conv2d(channels, out_channels, 3, rng, dtype, padding=1)

    def forward(self, noise_maps: Tensor, training: bool = False) -> Tensor:
        if noise_maps.shape[1] != self.channels:
            raise T.TensorError(
                f"tail expects {self.channels} channels, got {noise_maps.shape[1]}"
            )
        h = noise_maps
        for b in self.blocks:
            h = b.forward(h, training)
        return self.final.forward(h)

    def params(self, prefix):
        for i, b in enumerate(self.blocks):
            yield from b.params(f"{prefix}.block{i}")
        yield from self.final.params(f"{prefix}.final")

    def states(self, prefix):
        for i, b in enumerate(self.blocks):
            yield from b.states(f"{prefix}.block{i}")


class MHCNNModel:
    """The assembled denoiser.

    Heads extract features from rotated copies of the input, the fusion stage
    integrates them, and the noise-processing stage (1x1 lift, channel gate,
    tail) turns the residual into the estimated noise that is subtracted from
    the input.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = SplitMix64(config.seed)
        c, w, heads = config.in_channels, config.width, config.heads
        self.paths = [PathBlock(c, w, rng.spawn(i), dtype) for i in range(heads)]
        if config.use_mpa:
            self.fusion = MPABlock(w, heads, rng.spawn(100), dtype)
        else:
            self.fusion = ConcatFusion(w, heads, config.angles, rng.spawn(100), dtype)
        self.lift = Conv2d(c, heads * w, 1, rng.spawn(101), dtype)
        self.eca = ECALayer(heads * w, rng.spawn(102), dtype)
        self.tail = TailBlock(heads * w, c, rng.spawn(103), dtype)

    def forward(self, x: Tensor, training: bool = False, capture: dict | None = None) -> Tensor:
        b, c, h, w = x.shape
        if c != self.config.in_channels:
            raise T.TensorError(
                f"model expects {self.config.in_channels} input channels, got {c}"
            )
        if h != w:
            raise T.TensorError(f"input must be square, got {h}x{w}")
        streams = [self.paths[0].forward(x, training)]
        for i in range(1, self.config.heads):
            rotated = T.rotate90k(x, self.config.angles[i])
            streams.append(self.paths[i].forward(rotated, training))
        if capture is not None:
            for i, s in enumerate(streams):
                capture[f"head{i}"] = s.data
        fused = self.fusion.forward(streams)
        if capture is not None:
            capture["mpa_out"] = fused.data
        lifted = self.lift.forward(x)
        noise_maps = T.sub(lifted, fused)
        estimated = self.tail.forward(self.eca.forward(noise_maps), training)
        return T.sub(x, estimated)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, p in enumerate(self.paths):
            out.update(p.params(f"path{i}"))
        out.update(self.fusion.params("fusion"))
        out.update(self.lift.params("lift"))
        out.update(self.eca.params("eca"))
        out.update(self.tail.params("tail"))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, p in enumerate(self.paths):
            out.update(p.states(f"path{i}"))
        out.update(self.tail.states("tail"))
        return out

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def bind(self, tape: T.Tape):
        """Register every trainable parameter on a fresh tape."""
        for name, t in self.parameters().items():
            tape.parameter(name, t)

    def load_arrays(self, params: dict[str, np.ndarray], states: dict[str, np.ndarray]):
        own = self.parameters()
        for name, t in own.items():
            t.data = np.ascontiguousarray(params[name].astype(self.dtype))
        # route running statistics back to their normalization layers
        holders = self._state_holders()
        for name, value in states.items():
            holders[name].load_state(name, value.astype(self.dtype))

    def _state_holders(self) -> dict[str, BatchNorm2d]:
        out = {}

        def visit(prefix, dense):
            for sname, _ in dense.bn.states(f"{prefix}.bn"):
                out[sname] = dense.bn

        for i, p in enumerate(self.paths):
            for j, blk in enumerate(p.blocks):
                visit(f"path{i}.block{j}", blk)
        for j, blk in enumerate(self.tail.blocks):
            visit(f"tail.block{j}", blk)
        return out


def init_params(config: ModelConfig, dtype=np.float32) -> MHCNNModel:
    """Build a model with He-style Gaussian conv weights, zero biases,
    PReLU slopes 0.25, and unit/zero batch-norm affine, deterministically
    in the config seed."""
    return MHCNNModel(config, dtype=dtype)
