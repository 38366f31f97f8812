"""Encoder-decoder generator with skip connections and a conditional patch discriminator.

Both networks hold their parameters in an ordered ``dict[str, ndarray]`` and
expose ``forward`` (returning the output and a cache) and ``backward``
(returning parameter gradients and the input gradient).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import RubikError, ShapeError
from .layers import ConvSpec, activation_grad, layer_backward, layer_forward, leaky_relu, relu, sigmoid

Params = Dict[str, np.ndarray]


def init_layer(spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
    """He-style uniform fan-in initialisation; biases start at zero."""
    bound = np.sqrt(6.0 / spec.fan_in)
    w = rng.uniform(-bound, bound, size=spec.weight_shape).astype(dtype)
    b = np.zeros(spec.out_channels, dtype=dtype)
    return w, b


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 2
    base_channels: int = 8
    kernel: int = 3
    down_stride: int = 2
    up_kernel: int = 4
    skip: bool = True
    final_activation: str = "identity"  # "identity" for restoration, "logits" after a head swap
    residual: bool = False  # output x + f(x); needs out_channels == in_channels

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise RubikError("generator depth and base_channels must be >= 1")
        if self.kernel % 2 != 1:
            raise RubikError("generator conv kernel must be odd")
        if self.final_activation not in ("identity", "logits"):
            raise RubikError(f"unknown final activation {self.final_activation!r}")
        if self.residual and (self.in_channels != self.out_channels or self.final_activation != "identity"):
            raise RubikError("a residual generator needs identity output with in_channels == out_channels")

    def widths(self) -> List[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]

    def layers(self) -> List[Tuple[str, ConvSpec]]:
        """Named layer specs in execution order of the encoder, then decoder, then head."""
        ch = self.widths()
        k, pad = self.kernel, self.kernel // 2
        s = self.down_stride
        up_pad = (self.up_kernel - s) // 2
        out = []
        for i in range(self.depth):
            cin = self.in_channels if i == 0 else ch[i]
            out.append((f"enc{i}", ConvSpec(cin, ch[i], k, 1, pad)))
            out.append((f"down{i}", ConvSpec(ch[i], ch[i + 1], k, s, pad)))
        out.append(("bottleneck", ConvSpec(ch[-1], ch[-1], k, 1, pad)))
        for i in reversed(range(self.depth)):
            out.append((f"up{i}", ConvSpec(ch[i + 1], ch[i], self.up_kernel, s, up_pad, transposed=True)))
            cin = 2 * ch[i] if self.skip else ch[i]
            out.append((f"dec{i}", ConvSpec(cin, ch[i], k, 1, pad)))
        out.append(("head", ConvSpec(ch[0], self.out_channels, 1, 1, 0)))
        return out

    def num_params(self) -> int:
        return sum(spec.num_params for _, spec in self.layers())

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 2  # condition x and candidate, concatenated
    widths: Tuple[int, ...] = (8, 16, 32)
    strides: Tuple[int, ...] = (2, 2, 2, 1)
    kernel: int = 4
    padding: int = 1
    slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.widths) != len(self.strides) - 1 or not self.strides:
            raise RubikError("discriminator needs one stride per layer and one width per hidden layer")

    @property
    def num_layers(self) -> int:
        return len(self.strides)

    def layers(self) -> List[Tuple[str, ConvSpec]]:
        chans = (self.in_channels,) + self.widths + (1,)
        return [
            (f"d{i}", ConvSpec(chans[i], chans[i + 1], self.kernel, s, self.padding))
            for i, s in enumerate(self.strides)
        ]

    def num_params(self) -> int:
        return sum(spec.num_params for _, spec in self.layers())

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        return d


def _init_params(layers, seed: int, dtype) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, spec in layers:
        params[f"{name}.w"], params[f"{name}.b"] = init_layer(spec, rng, dtype)
    return params


def _init_generator(config: "GeneratorConfig", seed: int, dtype) -> Params:
    params = _init_params(config.layers(), seed, dtype)
    if config.residual:
        # start exactly at the identity map
        params["head.w"][:] = 0
    return params


def _check_params(layers, params: Params):
    for name, spec in layers:
        w, b = params.get(f"{name}.w"), params.get(f"{name}.b")
        if w is None or b is None or w.shape != spec.weight_shape or b.shape != (spec.out_channels,):
            raise ShapeError(f"shape error: parameters for layer {name!r} do not match the config")


class Generator:
    def __init__(self, config: GeneratorConfig, params: Optional[Params] = None, seed: int = 0, dtype=np.float32):
        self.config = config
        self.specs = dict(config.layers())
        self.params = params if params is not None else _init_generator(config, seed, dtype)
        _check_params(config.layers(), self.params)

    def astype(self, dtype) -> "Generator":
        return Generator(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Generator":
        return Generator(self.config, {k: v.copy() for k, v in self.params.items()})

    def _apply(self, name, x, cache, act=True):
        spec = self.specs[name]
        pre, cols = layer_forward(x, spec, self.params[f"{name}.w"], self.params[f"{name}.b"])
        cache[name] = (x, pre, cols)
        return relu(pre) if act else pre

    def forward(self, x: np.ndarray):
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"shape error: expected (N, {cfg.in_channels}, D, H, W), got {x.shape}")
        factor = cfg.down_stride ** cfg.depth
        if any(n % factor for n in x.shape[2:]):
            raise ShapeError(f"shape error: spatial dims {x.shape[2:]} not divisible by {factor}")
        cache: dict = {}
        skips = []
        h = x
        for i in range(cfg.depth):
            h = self._apply(f"enc{i}", h, cache)
            skips.append(h)
            h = self._apply(f"down{i}", h, cache)
        h = self._apply("bottleneck", h, cache)
        for i in reversed(range(cfg.depth)):
            h = self._apply(f"up{i}", h, cache)
            if cfg.skip:
                h = np.concatenate([h, skips[i]], axis=1)
            h = self._apply(f"dec{i}", h, cache)
        out = self._apply("head", h, cache, act=False)
        if cfg.residual:
            out = out + x
        return out, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def _back(self, name, gy, cache, grads, act=True):
        spec = self.specs[name]
        x, pre, cols = cache[name]
        if act:
            gy = activation_grad(pre, gy, 0.0)
        gx, gw, gb = layer_backward(x, spec, self.params[f"{name}.w"], self.params[f"{name}.b"], gy, cols)
        grads[f"{name}.w"] = gw
        grads[f"{name}.b"] = gb
        return gx

    def backward(self, cache, gout):
        """Returns ``(grads, grad_input)`` for upstream gradient ``gout``."""
        cfg = self.config
        grads: Params = {}
        g = self._back("head", gout, cache, grads, act=False)
        skip_grads = {}
        for i in range(cfg.depth):
            g = self._back(f"dec{i}", g, cache, grads)
            if cfg.skip:
                c = cfg.widths()[i]
                g, skip_grads[i] = g[:, :c], g[:, c:]
            g = self._back(f"up{i}", g, cache, grads)
        g = self._back("bottleneck", g, cache, grads)
        for i in reversed(range(cfg.depth)):
            g = self._back(f"down{i}", g, cache, grads)
            if cfg.skip:
                g = g + skip_grads[i]
            g = self._back(f"enc{i}", g, cache, grads)
        if cfg.residual:
            g = g + gout
        return {k: grads[k] for k in self.params}, g


class Discriminator:
    def __init__(self, config: DiscriminatorConfig, params: Optional[Params] = None, seed: int = 0, dtype=np.float32):
        self.config = config
        self.specs = dict(config.layers())
        self.params = params if params is not None else _init_params(config.layers(), seed, dtype)
        _check_params(config.layers(), self.params)

    def astype(self, dtype) -> "Discriminator":
        return Discriminator(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Discriminator":
        return Discriminator(self.config, {k: v.copy() for k, v in self.params.items()})

    def forward(self, x: np.ndarray, candidate: np.ndarray):
        """Patch probabilities for the pair ``(x, candidate)``."""
        if x.shape != candidate.shape:
            raise ShapeError(f"shape error: condition {x.shape} vs candidate {candidate.shape}")
        h = np.concatenate([x, candidate], axis=1)
        if h.shape[1] != self.config.in_channels:
            raise ShapeError(f"shape error: discriminator expects {self.config.in_channels} input channels")
        cache = []
        names = list(self.specs)
        for idx, name in enumerate(names):
            pre, cols = layer_forward(h, self.specs[name], self.params[f"{name}.w"], self.params[f"{name}.b"])
            cache.append((h, pre, cols))
            h = leaky_relu(pre, self.config.slope) if idx < len(names) - 1 else sigmoid(pre)
        return h, cache

    def __call__(self, x, candidate):
        return self.forward(x, candidate)[0]

    def backward(self, cache, out, gout):
        """Backpropagate ``d loss / d out``; returns ``(grads, grad_x, grad_candidate)``."""
        grads: Params = {}
        names = list(self.specs)
        g = gout * out * (1 - out)
        for idx in reversed(range(len(names))):
            name = names[idx]
            h, pre, cols = cache[idx]
            if idx < len(names) - 1:
                g = activation_grad(pre, g, self.config.slope)
            g, gw, gb = layer_backward(h, self.specs[name], self.params[f"{name}.w"], self.params[f"{name}.b"], g, cols)
            grads[f"{name}.w"] = gw
            grads[f"{name}.b"] = gb
        c = g.shape[1] // 2
        return {k: grads[k] for k in self.params}, g[:, :c], g[:, c:]


def generator_forward(x, config: GeneratorConfig, params: Params) -> np.ndarray:
    return Generator(config, params)(x)


def discriminator_forward(x, candidate, config: DiscriminatorConfig, params: Params) -> np.ndarray:
    return Discriminator(config, params)(x, candidate)


def replace_head(generator: Generator, num_classes: int, seed: int = 0) -> Generator:
    """Swap the final 1x1x1 layer for a fresh ``num_classes``-logit head.

    Every other parameter is copied unchanged.
    """
    if num_classes < 1:
        raise RubikError("bad head")
    cfg = replace(generator.config, out_channels=num_classes, final_activation="logits", residual=False)
    head_spec = dict(cfg.layers())["head"]
    dtype = generator.params["head.w"].dtype
    params = {k: v.copy() for k, v in generator.params.items() if not k.startswith("head.")}
    params["head.w"], params["head.b"] = init_layer(head_spec, np.random.default_rng(seed), dtype)
    return Generator(cfg, params)
