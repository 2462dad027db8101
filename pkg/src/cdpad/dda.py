"""Domain adaptation subnetworks spliced into the source stream after a pooling tap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import ParamSet
from .errors import ConfigError, ShapeError
from .model import TAPS, BackboneModel, Conv, Layer

SUBNET_TYPES = ("dense", "residual", "none")


@dataclass
class SubnetConfig:
    subnet_type: str = "dense"
    tap: str = "pool3"
    growth: int | None = None
    channels: int | None = None

    def __post_init__(self):
        if self.subnet_type not in SUBNET_TYPES:
            raise ConfigError(f"unknown subnet type {self.subnet_type!r}")
        if self.tap not in TAPS:
            raise ConfigError(f"unknown tap {self.tap!r}")


class BatchNorm(Layer):
    def __init__(self, name: str, channels: int):
        self.name, self.channels = name, channels

    def init(self, ps, rng, dtype):
        ps.add(self.name + ".scale", np.ones(self.channels, dtype=dtype))
        ps.add(self.name + ".shift", np.zeros(self.channels, dtype=dtype))
        ps.add_buffer(self.name + ".running_mean", np.zeros(self.channels, dtype=dtype))
        ps.add_buffer(self.name + ".running_var", np.ones(self.channels, dtype=dtype))

    def param_count(self):
        return 2 * self.channels

    def forward(self, ps, x, train=False):
        sn, hn = self.name + ".scale", self.name + ".shift"
        y, back = core.batchnorm2d_vjp(x, ps[sn], ps[hn], "train" if train else "eval",
                                       ps.buffers[self.name + ".running_mean"],
                                       ps.buffers[self.name + ".running_var"])

        def pullback(dy):
            need = ps.is_trainable(sn) or ps.is_trainable(hn)
            dx, ds, dh = back(dy, need)
            if ps.is_trainable(sn):
                ps.accumulate(sn, ds)
            if ps.is_trainable(hn):
                ps.accumulate(hn, dh)
            return dx

        return y, pullback


class DenseSubnet(Layer):
    """BatchNorm followed by four densely wired 3x3 conv+ReLU layers.

    conv1 reads the normalized input, conv2 reads conv1, conv3 reads
    [conv1, conv2] and conv4 reads [conv1, conv2, conv3]. The output is the
    concatenation of all four conv outputs, so ``4 * growth == channels``.
    """

    def __init__(self, name: str, channels: int, growth: int):
        if 4 * growth != channels:
            raise ShapeError(f"dense subnet needs 4*growth == channels, got growth {growth} for {channels} channels")
        self.name, self.channels, self.growth = name, channels, growth
        g = growth
        self.bn = BatchNorm(name + ".bn", channels)
        self.convs = [Conv(name + ".conv1", 3, channels, g), Conv(name + ".conv2", 3, g, g),
                      Conv(name + ".conv3", 3, 2 * g, g), Conv(name + ".conv4", 3, 3 * g, g)]

    def init(self, ps, rng, dtype):
        self.bn.init(ps, rng, dtype)
        for conv in self.convs:
            conv.init(ps, rng, dtype)

    def param_count(self):
        return self.bn.param_count() + sum(c.param_count() for c in self.convs)

    def layer_counts(self) -> list[tuple[str, int]]:
        return [("bn", self.bn.param_count())] + [(c.name.rsplit(".", 1)[1], c.param_count()) for c in self.convs]

    def out_shape(self, shape):
        if shape[-1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {shape[-1]}")
        return shape

    def forward(self, ps, x, train=False, parts: list | None = None):
        u, bn_back = self.bn.forward(ps, x, train)
        outs, backs = [], []
        inp, cat_back = u, None
        for i, conv in enumerate(self.convs):
            if i >= 2:
                inp, cat_back = core.concat_channels_vjp(outs)
            elif i == 1:
                inp = outs[0]
            z, conv_back = conv.forward(ps, inp, train)
            a, relu_back = core.relu_vjp(z)
            outs.append(a)
            backs.append((conv_back, relu_back, cat_back if i >= 2 else None))
        y, out_back = core.concat_channels_vjp(outs)
        if parts is not None:
            parts.extend(outs)

        def pullback(dy):
            grads = list(out_back(dy))
            du = None
            for i in range(3, -1, -1):
                conv_back, relu_back, cb = backs[i]
                dinp = conv_back(relu_back(grads[i]))
                if i >= 2:
                    for j, gj in enumerate(cb(dinp)):
                        grads[j] = grads[j] + gj
                elif i == 1:
                    grads[0] = grads[0] + dinp
                else:
                    du = dinp
            return bn_back(du)

        return y, pullback


class ResidualSubnet(Layer):
    """u + conv(relu(conv(BN(u)))), channel preserving."""

    def __init__(self, name: str, channels: int):
        self.name, self.channels = name, channels
        self.bn = BatchNorm(name + ".bn", channels)
        self.conv1 = Conv(name + ".conv1", 3, channels, channels)
        self.conv2 = Conv(name + ".conv2", 3, channels, channels)

    def init(self, ps, rng, dtype):
        for layer in (self.bn, self.conv1, self.conv2):
            layer.init(ps, rng, dtype)

    def param_count(self):
        return self.bn.param_count() + self.conv1.param_count() + self.conv2.param_count()

    def out_shape(self, shape):
        if shape[-1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {shape[-1]}")
        return shape

    def forward(self, ps, x, train=False):
        a, b1 = self.bn.forward(ps, x, train)
        a, b2 = self.conv1.forward(ps, a, train)
        a, b3 = core.relu_vjp(a)
        a, b4 = self.conv2.forward(ps, a, train)
        return x + a, lambda dy: dy + b1(b2(b3(b4(dy))))


def build_dda(config: SubnetConfig, channels: int, params: ParamSet, seed: int = 0,
              dtype=np.float32, prefix: str = "subnet") -> Layer | None:
    """Create and initialize the subnet for a tap with ``channels`` channels."""
    if config.channels is not None and config.channels != channels:
        raise ShapeError(f"config says {config.channels} channels at {config.tap}, backbone has {channels}")
    if config.subnet_type == "none":
        return None
    rng = np.random.default_rng(seed)
    if config.subnet_type == "dense":
        growth = config.growth if config.growth is not None else channels // 4
        subnet: Layer = DenseSubnet(prefix, channels, growth)
    else:
        subnet = ResidualSubnet(prefix, channels)
    subnet.init(params, rng, dtype)
    return subnet


def dda_forward(ps: ParamSet, subnet: Layer, tap_activation: np.ndarray, train: bool = False) -> np.ndarray:
    single = tap_activation.ndim == 3
    x = tap_activation[None] if single else tap_activation
    if x.shape[-1] != subnet.channels:
        raise ShapeError(f"subnet expects {subnet.channels} channels, got {x.shape[-1]}")
    y = subnet.forward(ps, x, train)[0]
    return y[0] if single else y


class SourceStream:
    """Backbone with an optional subnet spliced in right after ``tap``.

    With no subnet this is exactly the backbone.
    """

    def __init__(self, backbone: BackboneModel, subnet: Layer | None, tap: str = "pool3"):
        self.backbone = backbone
        self.subnet = subnet
        self.tap = tap
        self.split = backbone.tap_index(tap) + 1
        if subnet is not None:
            shape = backbone.tap_shape(tap)
            if subnet.out_shape(shape) != shape:
                raise ShapeError(f"subnet output {subnet.out_shape(shape)} != tap shape {shape}")

    @property
    def params(self) -> ParamSet:
        return self.backbone.params

    def forward(self, x, train: bool = False):
        """Returns ``(embedding, pullback)``. Layers before the tap get no gradient."""
        bb = self.backbone
        if self.subnet is None:
            return bb.forward(x, train=train)
        h, _ = bb.forward(x, 0, self.split, train=False)
        h, sub_back = self.subnet.forward(bb.params, h, train)
        e, down_back = bb.forward(h, self.split, None, train=train)

        def pullback(de):
            return sub_back(down_back(de))

        return e, pullback

    def embed(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + batch])[0] for i in range(0, len(x), batch)])


def insert_subnet(backbone: BackboneModel, subnet: Layer | None, tap: str = "pool3",
                  subnet_prefix: str = "subnet") -> SourceStream:
    """Splice ``subnet`` after ``tap`` and make only its parameters trainable."""
    stream = SourceStream(backbone, subnet, tap)
    backbone.params.set_trainable([subnet_prefix + "."] if subnet is not None else [])
    return stream
