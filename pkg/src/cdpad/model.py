"""Light-CNN-style backbone with Max-Feature-Map activations and PAD/domain heads.

Layers are small objects that own parameter *names*; values live in a shared
:class:`~cdpad.core.ParamSet`. ``forward`` returns ``(y, pullback)``, and the
pullback accumulates gradients into the ParamSet for trainable entries only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import core
from .core import ParamSet
from .errors import ConfigError, ShapeError

Pullback = Callable[[np.ndarray], np.ndarray]


def _he(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 2.0) -> np.ndarray:
    """Scaled normal init, std = sqrt(gain / fan_in).

    gain 2 preserves activation scale ahead of a ReLU; ahead of an MFM the
    preserving gain is 1, because the max of two symmetric halves keeps the
    second moment.
    """
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


class Layer:
    name: str = ""

    def init(self, ps: ParamSet, rng: np.random.Generator, dtype) -> None:
        pass

    def param_count(self) -> int:
        return 0

    def out_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, ps: ParamSet, x: np.ndarray, train: bool = False) -> tuple[np.ndarray, Pullback]:
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, name: str, k: int, cin: int, cout: int, padding: int | None = None, stride: int = 1,
                 gain: float = 2.0):
        self.name, self.k, self.cin, self.cout, self.stride = name, k, cin, cout, stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.gain = gain

    def init(self, ps, rng, dtype):
        ps.add(self.name + ".w", _he(rng, (self.k, self.k, self.cin, self.cout), self.k * self.k * self.cin, dtype,
                                     self.gain))
        ps.add(self.name + ".b", np.zeros(self.cout, dtype=dtype))

    def param_count(self):
        return self.k * self.k * self.cin * self.cout + self.cout

    def out_shape(self, shape):
        h, w, _ = shape
        return (core.conv_output_size(h, self.k, self.stride, self.padding),
                core.conv_output_size(w, self.k, self.stride, self.padding), self.cout)

    def forward(self, ps, x, train=False):
        wn, bn = self.name + ".w", self.name + ".b"
        y, back = core.conv2d_vjp(x, ps[wn], ps[bn], self.stride, self.padding)

        def pullback(dy):
            need = ps.is_trainable(wn) or ps.is_trainable(bn)
            dx, dw, db = back(dy, need)
            if need:
                if ps.is_trainable(wn):
                    ps.accumulate(wn, dw)
                if ps.is_trainable(bn):
                    ps.accumulate(bn, db)
            return dx

        return y, pullback


class MFM(Layer):
    def __init__(self, name: str):
        self.name = name

    def out_shape(self, shape):
        if shape[-1] % 2:
            raise ShapeError(f"{self.name}: odd channel count {shape[-1]}")
        return shape[:-1] + (shape[-1] // 2,)

    def forward(self, ps, x, train=False):
        return core.mfm_vjp(x)


class Pool(Layer):
    def __init__(self, name: str):
        self.name = name

    def out_shape(self, shape):
        h, w, c = shape
        return (-(-h // 2), -(-w // 2), c)

    def forward(self, ps, x, train=False):
        return core.maxpool2d_ceil_vjp(x, 2, 2)


class Flatten(Layer):
    def __init__(self, name: str = "flatten"):
        self.name = name

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, ps, x, train=False):
        shape = x.shape
        return x.reshape(shape[0], -1), lambda dy: dy.reshape(shape)


class Linear(Layer):
    def __init__(self, name: str, n_in: int, n_out: int, zero: bool = False, gain: float = 2.0):
        self.name, self.n_in, self.n_out, self.zero, self.gain = name, n_in, n_out, zero, gain

    def init(self, ps, rng, dtype):
        if self.zero:
            w = np.zeros((self.n_in, self.n_out), dtype=dtype)
        else:
            w = _he(rng, (self.n_in, self.n_out), self.n_in, dtype, self.gain)
        ps.add(self.name + ".w", w)
        ps.add(self.name + ".b", np.zeros(self.n_out, dtype=dtype))

    def param_count(self):
        return self.n_in * self.n_out + self.n_out

    def out_shape(self, shape):
        if shape != (self.n_in,):
            raise ShapeError(f"{self.name}: expected input ({self.n_in},), got {shape}")
        return (self.n_out,)

    def forward(self, ps, x, train=False):
        wn, bn = self.name + ".w", self.name + ".b"
        y, back = core.linear_vjp(x, ps[wn], ps[bn])

        def pullback(dy):
            need = ps.is_trainable(wn) or ps.is_trainable(bn)
            dx, dw, db = back(dy, need)
            if ps.is_trainable(wn):
                ps.accumulate(wn, dw)
            if ps.is_trainable(bn):
                ps.accumulate(bn, db)
            return dx

        return y, pullback


class Relu(Layer):
    def __init__(self, name: str):
        self.name = name

    def forward(self, ps, x, train=False):
        return core.relu_vjp(x)


class Sequential(Layer):
    """Runs child layers in order; the pullback runs them in reverse."""

    def __init__(self, name: str, layers: list[Layer]):
        self.name, self.layers = name, layers

    def init(self, ps, rng, dtype):
        for layer in self.layers:
            layer.init(ps, rng, dtype)

    def param_count(self):
        return sum(layer.param_count() for layer in self.layers)

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def forward(self, ps, x, train=False):
        backs = []
        for layer in self.layers:
            x, back = layer.forward(ps, x, train)
            backs.append(back)

        def pullback(dy):
            for back in reversed(backs):
                dy = back(dy)
            return dy

        return x, pullback


class ResBlock(Layer):
    """Two (3x3 conv C->2C, MFM) pairs with an identity skip.

    The second conv starts at a quarter of the unit gain so a stack of ten
    blocks does not blow up the activation scale at initialization.
    """

    def __init__(self, name: str, channels: int):
        self.name, self.channels = name, channels
        c = channels
        self.body = Sequential(name, [Conv(name + ".conv_a", 3, c, 2 * c, gain=1.0), MFM(name + ".mfm_a"),
                                      Conv(name + ".conv_b", 3, c, 2 * c, gain=0.25), MFM(name + ".mfm_b")])

    def init(self, ps, rng, dtype):
        self.body.init(ps, rng, dtype)

    def param_count(self):
        return self.body.param_count()

    def out_shape(self, shape):
        if shape[-1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {shape[-1]}")
        return shape

    def forward(self, ps, x, train=False):
        y, back = self.body.forward(ps, x, train)
        return y + x, lambda dy: back(dy) + dy


def resblock_forward(ps: ParamSet, block: ResBlock, x: np.ndarray) -> np.ndarray:
    return block.forward(ps, x)[0]


# --------------------------------------------------------------------------
# configuration


FULL_WIDTHS = {"c1": 48, "c2": 96, "c3": 192, "c4": 128, "c5": 128, "embed": 256}
FULL_BLOCKS = (1, 2, 3, 4)
TAPS = ("pool1", "pool2", "pool3", "pool4")


@dataclass
class BackboneConfig:
    """Backbone geometry. Widths are the post-MFM channel counts of each stage.

    ``preset='full'`` is the 124x118 network with its published widths;
    ``preset='tiny'`` scales every width by ``width_mult`` (default 1/6),
    rounded to a multiple of 4 so a dense subnet with growth C/4 fits at
    every pooling tap.
    """

    preset: str = "tiny"
    height: int | None = None
    width: int | None = None
    width_mult: float | None = None
    blocks: tuple[int, int, int, int] = FULL_BLOCKS
    widths: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in ("full", "tiny"):
            raise ConfigError(f"unknown backbone preset {self.preset!r}")
        full = self.preset == "full"
        if self.height is None:
            self.height = 124 if full else 32
        if self.width is None:
            self.width = 118 if full else 32
        if self.width_mult is None:
            self.width_mult = 1.0 if full else 1.0 / 6.0
        self.blocks = tuple(int(b) for b in self.blocks)
        if len(self.blocks) != 4 or min(self.blocks) < 0:
            raise ConfigError(f"blocks must be four non-negative counts, got {self.blocks}")
        resolved = {}
        for key, base in FULL_WIDTHS.items():
            if key in self.widths:
                resolved[key] = int(self.widths[key])
            elif self.width_mult == 1.0:
                resolved[key] = base
            else:
                resolved[key] = max(4, 4 * int(round(base * self.width_mult / 4)))
        unknown = set(self.widths) - set(FULL_WIDTHS)
        if unknown:
            raise ConfigError(f"unknown width keys {sorted(unknown)}")
        if any(v < 1 for v in resolved.values()):
            raise ConfigError(f"widths must be positive: {resolved}")
        self.widths = resolved


# --------------------------------------------------------------------------
# backbone


class BackboneModel:
    """Ordered Light-CNN layer list with pooling taps.

    ``forward`` can run any contiguous slice of the layer list, which is how
    a subnetwork gets spliced in after a tap.
    """

    def __init__(self, config: BackboneConfig, layers: list[Layer], params: ParamSet, prefix: str):
        self.config = config
        self.layers = layers
        self.params = params
        self.prefix = prefix
        self.index = {layer.name[len(prefix) + 1:]: i for i, layer in enumerate(layers)}

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.config.height, self.config.width, 1)

    @property
    def embed_dim(self) -> int:
        return self.config.widths["embed"]

    def tap_index(self, tap: str) -> int:
        if tap not in TAPS:
            raise ConfigError(f"unknown tap {tap!r}; expected one of {TAPS}")
        return self.index[tap]

    def shapes(self) -> list[tuple[str, tuple]]:
        out, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
            out.append((self.short(layer), shape))
        return out

    def tap_shape(self, tap: str) -> tuple:
        return dict(self.shapes())[tap]

    def short(self, layer: Layer) -> str:
        return layer.name[len(self.prefix) + 1:]

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"backbone expects (N, {self.config.height}, {self.config.width}, 1), got {x.shape}")

    def forward(self, x, start: int = 0, stop: int | None = None, train: bool = False,
                taps: dict | None = None):
        """Run layers ``[start, stop)``; returns ``(y, pullback)``.

        When ``taps`` is a dict it receives the output of every pooling
        layer that runs.
        """
        if start == 0:
            self.check_input(x)
        stop = len(self.layers) if stop is None else stop
        backs = []
        for layer in self.layers[start:stop]:
            x, back = layer.forward(self.params, x, train)
            backs.append(back)
            if taps is not None and isinstance(layer, Pool):
                taps[self.short(layer)] = x

        def pullback(dy):
            for back in reversed(backs):
                dy = back(dy)
            return dy

        return x, pullback


def build_backbone(config: BackboneConfig | None = None, seed: int = 0, dtype=np.float32,
                   params: ParamSet | None = None, prefix: str = "backbone") -> BackboneModel:
    config = config or BackboneConfig()
    w = config.widths
    for key in ("c1", "c2", "c3", "c4", "c5", "embed"):
        if w[key] < 1:
            raise ShapeError(f"width {key} must be positive")
    c1, c2, c3, c4, c5, emb = (w[k] for k in ("c1", "c2", "c3", "c4", "c5", "embed"))
    p = prefix + "."
    b1, b2, b3, b4 = config.blocks
    layers: list[Layer] = [Conv(p + "conv1", 5, 1, 2 * c1, padding=2, gain=1.0), MFM(p + "mfm1"), Pool(p + "pool1")]
    layers += [ResBlock(f"{p}resblock1_{i + 1}", c1) for i in range(b1)]
    layers += [Conv(p + "conv2a", 1, c1, 2 * c1, gain=1.0), MFM(p + "mfm2a"),
               Conv(p + "conv2", 3, c1, 2 * c2, gain=1.0), MFM(p + "mfm2"), Pool(p + "pool2")]
    layers += [ResBlock(f"{p}resblock2_{i + 1}", c2) for i in range(b2)]
    layers += [Conv(p + "conv3a", 1, c2, 2 * c2, gain=1.0), MFM(p + "mfm3a"),
               Conv(p + "conv3", 3, c2, 2 * c3, gain=1.0), MFM(p + "mfm3"), Pool(p + "pool3")]
    layers += [ResBlock(f"{p}resblock3_{i + 1}", c3) for i in range(b3)]
    layers += [Conv(p + "conv4a", 1, c3, 2 * c3, gain=1.0), MFM(p + "mfm4a"),
               Conv(p + "conv4", 3, c3, 2 * c4, gain=1.0), MFM(p + "mfm4")]
    layers += [ResBlock(f"{p}resblock4_{i + 1}", c4) for i in range(b4)]
    layers += [Conv(p + "conv5a", 1, c4, 2 * c4, gain=1.0), MFM(p + "mfm5a"),
               Conv(p + "conv5", 3, c4, 2 * c5, gain=1.0), MFM(p + "mfm5"), Pool(p + "pool4"), Flatten(p + "flatten")]
    shape = (config.height, config.width, 1)
    for layer in layers:
        shape = layer.out_shape(shape)
    layers += [Linear(p + "linear", shape[0], 2 * emb, gain=1.0), MFM(p + "mfm6")]

    ps = params if params is not None else ParamSet()
    rng = np.random.default_rng(seed)
    for layer in layers:
        layer.init(ps, rng, dtype)
    return BackboneModel(config, layers, ps, prefix)


def backbone_forward(model: BackboneModel, image: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Inference pass for one image (H, W, 1) or a batch; returns (embedding, taps)."""
    single = image.ndim == 3
    x = image[None] if single else image
    taps: dict[str, np.ndarray] = {}
    emb, _ = model.forward(x, taps=taps)
    if single:
        return emb[0], {k: v[0] for k, v in taps.items()}
    return emb, taps


@dataclass
class ReportRow:
    name: str
    shape: tuple
    count: int


def param_report(model) -> list[ReportRow]:
    """Per-layer output shape and learnable-parameter count, in forward order."""
    rows = []
    for name, shape in model.shapes():
        layer = model.layers[model.index[name]]
        rows.append(ReportRow(name, shape, layer.param_count()))
    return rows


# --------------------------------------------------------------------------
# heads


class Heads:
    """PAD head (embedding -> 1) and domain head (embedding -> 64 -> 1).

    Both heads emit logits; probabilities are their sigmoid. The PAD output is
    the probability of *bonafide*, the domain output the probability of
    *target domain*.
    """

    def __init__(self, embed_dim: int, params: ParamSet, rng: np.random.Generator, dtype=np.float32,
                 hidden: int = 64):
        self.embed_dim = embed_dim
        self.params = params
        self.pad = Linear("pad_head", embed_dim, 1, gain=1.0)
        self.domain = Sequential("domain_head", [Linear("domain_head.fc1", embed_dim, hidden), Relu("domain_head.relu"),
                                                 Linear("domain_head.fc2", hidden, 1, zero=True)])
        self.pad.init(params, rng, dtype)
        self.domain.init(params, rng, dtype)

    def logits(self, embedding: np.ndarray, which: str):
        if embedding.shape[-1] != self.embed_dim:
            raise ShapeError(f"head expects embedding of size {self.embed_dim}, got {embedding.shape[-1]}")
        single = embedding.ndim == 1
        e = embedding[None] if single else embedding
        head = {"pad": self.pad, "domain": self.domain}.get(which)
        if head is None:
            raise ValueError(f"unknown head {which!r}")
        z, back = head.forward(self.params, e)
        z = z[:, 0]

        def pullback(dz):
            dx = back(np.reshape(dz, (-1, 1)).astype(e.dtype, copy=False))
            return dx[0] if single else dx

        return (z[0] if single else z), pullback


def heads_forward(heads: Heads, embedding: np.ndarray, which: str):
    z, _ = heads.logits(embedding, which)
    return core.pointwise(z, "sigmoid")
