"""Two-branch encoder and plain decoder CNNs for hiding a gray image in an RGB one.

The encoder runs a guest (payload) branch and a host (cover) branch side by
side. At host layers 1, 3, ..., k the host input is concatenated with the
guest activation from two layers earlier (the raw guest image for layer 1).
After layer k a stack of 1x1 convolutions fuses the features down to three
channels. The decoder is a stack of 3x3 Conv+ReLU layers ending in a 1x1
convolution to a single channel.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor_core import (
    ConvKernel,
    ShapeError,
    check_tensor,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    relu_backward,
    relu_forward,
    split_channels,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    merge_depth: int = 7
    branch_filters: int = 16
    fusion_filters: tuple[int, ...] = (16, 8, 3)
    decoder_filters: tuple[int, ...] = (16, 16, 8, 8, 3, 3)
    kernel_size: int = 3
    host_channels: int = 3
    guest_channels: int = 1
    height: int = 300
    width: int = 300

    def __post_init__(self):
        object.__setattr__(self, "fusion_filters", tuple(int(f) for f in self.fusion_filters))
        object.__setattr__(self, "decoder_filters", tuple(int(f) for f in self.decoder_filters))
        self.validate()

    def validate(self) -> None:
        k = self.merge_depth
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"merge_depth must be odd and >= 1, got {k}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.branch_filters < 1:
            raise ConfigError("branch_filters must be >= 1")
        if not self.fusion_filters or self.fusion_filters[-1] != self.host_channels:
            raise ConfigError(
                f"last fusion layer must output {self.host_channels} channels, got {self.fusion_filters}"
            )
        if not self.decoder_filters or min(self.decoder_filters) < 1 or min(self.fusion_filters) < 1:
            raise ConfigError("filter counts must be positive")
        if self.host_channels != 3 or self.guest_channels != 1:
            raise ConfigError("only RGB hosts with single-channel guests are supported")
        if self.height < 1 or self.width < 1:
            raise ConfigError("image dims must be positive")

    @classmethod
    def paper(cls, height: int = 300, width: int = 300) -> "NetworkConfig":
        return cls(height=height, width=width)

    @classmethod
    def desk(cls, merge_depth: int = 3, filters: int = 8, height: int = 32, width: int = 32) -> "NetworkConfig":
        """Shrunken network for laptop-scale experiments.

        Keeps the layer counts of the full network but uses a constant width,
        since 3-channel ReLU layers at this scale tend to die early in training
        and pin the decoder output to a constant.
        """
        return cls(
            merge_depth=merge_depth,
            branch_filters=filters,
            fusion_filters=(filters, filters, 3),
            decoder_filters=(filters,) * 6,
            height=height,
            width=width,
        )

    def merge_layers(self) -> list[int]:
        return list(range(1, self.merge_depth + 1, 2))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def layer_shapes(self) -> dict[str, list[tuple[int, int, int, int]]]:
        """Kernel shapes (out, in, kh, kw) of every layer, grouped by stage."""
        ks, bf = self.kernel_size, self.branch_filters
        guest, host = [], []
        for i in range(1, self.merge_depth + 1):
            guest.append((bf, self.guest_channels if i == 1 else bf, ks, ks))
            host_in = self.host_channels if i == 1 else bf
            if i % 2 == 1:
                host_in += self.guest_channels if i == 1 else bf
            host.append((bf, host_in, ks, ks))
        fusion, prev = [], bf
        for f in self.fusion_filters:
            fusion.append((f, prev, 1, 1))
            prev = f
        decoder, prev = [], self.host_channels
        for f in self.decoder_filters:
            decoder.append((f, prev, ks, ks))
            prev = f
        decoder.append((self.guest_channels, prev, 1, 1))
        return {"guest": guest, "host": host, "fusion": fusion, "decoder": decoder}


@dataclass
class ModelParams:
    """Kernels of both networks. Also used as the container for their gradients."""

    guest: list[ConvKernel]
    host: list[ConvKernel]
    fusion: list[ConvKernel]
    decoder: list[ConvKernel]

    @property
    def encoder_kernels(self) -> list[ConvKernel]:
        return self.guest + self.host + self.fusion

    @property
    def decoder_kernels(self) -> list[ConvKernel]:
        return self.decoder

    def kernels(self) -> list[ConvKernel]:
        return self.encoder_kernels + self.decoder

    def arrays(self) -> list[np.ndarray]:
        """Flat list of weight and bias arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for k in self.kernels():
            out.extend((k.weights, k.bias))
        return out

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "ModelParams":
        return ModelParams(*([k.copy() for k in group] for group in (self.guest, self.host, self.fusion, self.decoder)))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            *(
                [ConvKernel(np.zeros_like(k.weights), np.zeros_like(k.bias)) for k in group]
                for group in (self.guest, self.host, self.fusion, self.decoder)
            )
        )

    @classmethod
    def from_arrays(cls, config: NetworkConfig, arrays: list[np.ndarray]) -> "ModelParams":
        shapes = config.layer_shapes()
        n_layers = sum(len(v) for v in shapes.values())
        if len(arrays) != 2 * n_layers:
            raise ConfigError(f"expected {2 * n_layers} arrays for this config, got {len(arrays)}")
        it = iter(arrays)
        groups = {}
        for name in ("guest", "host", "fusion", "decoder"):
            group = []
            for shape in shapes[name]:
                w, b = next(it), next(it)
                if w.shape != shape:
                    raise ConfigError(f"{name} kernel shape {w.shape} != expected {shape}")
                group.append(ConvKernel(w, b))
            groups[name] = group
        return cls(**groups)


def build_model(config: NetworkConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Xavier-uniform weights, zero biases; deterministic for a given seed."""
    from .training import xavier_init

    config.validate()
    rng = np.random.default_rng(seed)
    groups = {}
    for name, shapes in config.layer_shapes().items():
        group = []
        for out_c, in_c, kh, kw in shapes:
            w = xavier_init(in_c * kh * kw, out_c * kh * kw, out_c * in_c * kh * kw, rng)
            group.append(ConvKernel(w.reshape(out_c, in_c, kh, kw).astype(dtype), np.zeros(out_c, dtype=dtype)))
        groups[name] = group
    return ModelParams(**groups)


@dataclass
class EncoderCache:
    host_inputs: list[np.ndarray] = field(default_factory=list)   # input fed to host conv i
    host_pre: list[np.ndarray] = field(default_factory=list)      # pre-ReLU output of host conv i
    guest_inputs: list[np.ndarray] = field(default_factory=list)
    guest_pre: list[np.ndarray] = field(default_factory=list)
    fusion_inputs: list[np.ndarray] = field(default_factory=list)
    fusion_pre: list[np.ndarray] = field(default_factory=list)
    merge_splits: dict[int, int] = field(default_factory=dict)    # host layer -> host channel count


@dataclass
class DecoderCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def _guest_layers_needed(k: int) -> int:
    # merges consume g0, g2, ..., g_{k-1}; g_k never feeds anything
    return k - 1


def encoder_forward(params: ModelParams, host: np.ndarray, guest: np.ndarray):
    check_tensor(host, "host")
    check_tensor(guest, "guest")
    if host.shape[1] != 3 or guest.shape[1] != 1:
        raise ShapeError(f"expected 3-channel host and 1-channel guest, got {host.shape} and {guest.shape}")
    if (host.shape[0], host.shape[2], host.shape[3]) != (guest.shape[0], guest.shape[2], guest.shape[3]):
        raise ShapeError(f"host {host.shape} and guest {guest.shape} differ in N, H or W")
    k = len(params.host)
    cache = EncoderCache()

    guest_acts = [guest]
    g = guest
    for i in range(_guest_layers_needed(k)):
        cache.guest_inputs.append(g)
        pre = conv2d_forward(g, params.guest[i])
        cache.guest_pre.append(pre)
        g = relu_forward(pre)
        guest_acts.append(g)

    h = host
    for i in range(1, k + 1):
        if i % 2 == 1:
            cache.merge_splits[i] = h.shape[1]
            x = concat_channels(h, guest_acts[i - 1])
        else:
            x = h
        cache.host_inputs.append(x)
        pre = conv2d_forward(x, params.host[i - 1])
        cache.host_pre.append(pre)
        h = relu_forward(pre)

    last = len(params.fusion) - 1
    for j, kern in enumerate(params.fusion):
        cache.fusion_inputs.append(h)
        pre = conv2d_forward(h, kern)
        cache.fusion_pre.append(pre)
        h = pre if j == last else relu_forward(pre)
    return h, cache


def decoder_forward(params: ModelParams, hybrid: np.ndarray):
    check_tensor(hybrid, "hybrid")
    if hybrid.shape[1] != params.decoder[0].in_channels:
        raise ShapeError(f"decoder expects {params.decoder[0].in_channels} channels, got {hybrid.shape[1]}")
    cache = DecoderCache()
    x = hybrid
    last = len(params.decoder) - 1
    for j, kern in enumerate(params.decoder):
        cache.inputs.append(x)
        pre = conv2d_forward(x, kern)
        cache.pre.append(pre)
        x = pre if j == last else relu_forward(pre)
    return x, cache


def decoder_backward(params: ModelParams, cache: DecoderCache, grad_recovered: np.ndarray, grads: ModelParams) -> np.ndarray:
    """Accumulate decoder gradients into ``grads``; returns the gradient w.r.t. the hybrid."""
    if cache is None or not cache.inputs:
        raise ValueError("decoder cache is missing; run decoder_forward first")
    g = grad_recovered
    last = len(params.decoder) - 1
    for j in range(last, -1, -1):
        if j != last:
            g = relu_backward(g, cache.pre[j])
        g, dw, db = conv2d_backward(g, cache.inputs[j], params.decoder[j])
        grads.decoder[j].weights += dw
        grads.decoder[j].bias += db
    return g


def encoder_backward(params: ModelParams, cache: EncoderCache, grad_hybrid: np.ndarray, grads: ModelParams):
    """Accumulate encoder gradients into ``grads``; returns (grad_host, grad_guest)."""
    if cache is None or not cache.host_inputs:
        raise ValueError("encoder cache is missing; run encoder_forward first")
    k = len(params.host)
    g = grad_hybrid
    last = len(params.fusion) - 1
    for j in range(last, -1, -1):
        if j != last:
            g = relu_backward(g, cache.fusion_pre[j])
        g, dw, db = conv2d_backward(g, cache.fusion_inputs[j], params.fusion[j])
        grads.fusion[j].weights += dw
        grads.fusion[j].bias += db

    # gradient flowing into each guest activation g_0 .. g_{k-1} from the merges
    guest_grads: dict[int, np.ndarray] = {}
    for i in range(k, 0, -1):
        g = relu_backward(g, cache.host_pre[i - 1])
        g, dw, db = conv2d_backward(g, cache.host_inputs[i - 1], params.host[i - 1])
        grads.host[i - 1].weights += dw
        grads.host[i - 1].bias += db
        if i in cache.merge_splits:
            g, g_guest = split_channels(g, cache.merge_splits[i])
            guest_grads[i - 1] = g_guest
    grad_host = g

    n_guest = _guest_layers_needed(k)
    acc = guest_grads.get(n_guest)
    for i in range(n_guest, 0, -1):
        # acc is the gradient w.r.t. g_i, the output of guest conv i
        gi = relu_backward(acc, cache.guest_pre[i - 1])
        gin, dw, db = conv2d_backward(gi, cache.guest_inputs[i - 1], params.guest[i - 1])
        grads.guest[i - 1].weights += dw
        grads.guest[i - 1].bias += db
        acc = gin if (i - 1) not in guest_grads else gin + guest_grads[i - 1]
    grad_guest = acc if n_guest > 0 else guest_grads[0]
    return grad_host, grad_guest


def model_backward(params: ModelParams, enc_cache: EncoderCache, dec_cache: DecoderCache,
                   grad_hybrid: np.ndarray, grad_recovered: np.ndarray) -> ModelParams:
    """Joint backward pass: decoder gradients flow through the hybrid into the encoder.

    ``grad_hybrid`` is the direct loss gradient w.r.t. the encoder output; the
    decoder's contribution is added before backpropagating through the encoder.
    """
    if enc_cache is None or dec_cache is None:
        raise ValueError("both encoder and decoder caches are required")
    grads = params.zeros_like()
    through_decoder = decoder_backward(params, dec_cache, grad_recovered, grads)
    encoder_backward(params, enc_cache, grad_hybrid + through_decoder, grads)
    return grads
