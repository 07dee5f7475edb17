"""SPAN network: FCN encoder, 5x5 conv decoder, row-concatenation collapse.

Two recognizers share the exact same parameter set:

* :class:`SPAN` predicts on the 2D feature grid and flattens its rows
  (top row first) into one long sequence for CTC.
* :class:`PoolLineR` collapses the height axis with a max pool before the
  decoder, the usual way text-line recognizers work. It exists for
  line-level pretraining; its weights load into :class:`SPAN` one-to-one.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CB_STRIDES = ((1, 1), (2, 2), (2, 2), (2, 2), (2, 1), (2, 1))
HEIGHT_REDUCTION = 32
WIDTH_REDUCTION = 8


@dataclass(frozen=True)
class ModelConfig:
    charset_size: int = 100
    cb_channels: tuple[int, ...] = (32, 64, 128, 256, 512, 512)
    dscb_count: int = 4
    dscb_channels: int = 512
    decoder_kernel: tuple[int, int] = (5, 5)
    dropout_elem_p: float = 0.5
    dropout_chan_p: float = 0.25
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "cb_channels", tuple(int(c) for c in self.cb_channels))
        object.__setattr__(self, "decoder_kernel", tuple(int(k) for k in self.decoder_kernel))
        if len(self.cb_channels) != 6:
            raise ValueError(f"need 6 convolution-block widths, got {len(self.cb_channels)}")
        if self.dscb_count < 0:
            raise ValueError("dscb_count must be >= 0")
        if self.dscb_count and self.dscb_channels != self.cb_channels[-1]:
            raise ValueError(
                f"dscb_channels ({self.dscb_channels}) must equal the last CB width "
                f"({self.cb_channels[-1]}) for the residual sums")
        if self.charset_size < 1:
            raise ValueError("charset_size must be >= 1")
        if any(k % 2 == 0 for k in self.decoder_kernel):
            raise ValueError("decoder kernel extents must be odd")

    @property
    def feature_channels(self) -> int:
        return self.dscb_channels if self.dscb_count else self.cb_channels[-1]

    @property
    def num_classes(self) -> int:
        return self.charset_size + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cb_channels"] = list(self.cb_channels)
        d["decoder_kernel"] = list(self.decoder_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def reduced_config(charset_size: int, **overrides) -> ModelConfig:
    """Desk-scale configuration: widths 16..128 and a single DSCB."""
    kw = dict(charset_size=charset_size, cb_channels=(16, 32, 64, 128, 128, 128),
              dscb_count=1, dscb_channels=128)
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def _children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, list):
                yield from (v for v in value if isinstance(v, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Conv(Module):
    def __init__(self, cin, cout, kernel=3, stride=(1, 1), padding=1, rng=None, dtype=np.float32):
        kh, kw = ad._pair(kernel)
        self.stride = ad._pair(stride)
        self.padding = ad._pair(padding)
        self.weight = _uniform(rng, (cout, cin, kh, kw), cin * kh * kw, dtype)
        self.bias = _zeros((cout,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class SeparableConv(Module):
    def __init__(self, cin, cout, stride=(1, 1), rng=None, dtype=np.float32):
        self.stride = ad._pair(stride)
        self.depthwise = _uniform(rng, (cin, 1, 3, 3), 9, dtype)
        self.pointwise = _uniform(rng, (cout, cin, 1, 1), cin, dtype)
        self.bias = _zeros((cout,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.depthwise_separable_conv(x, self.depthwise, self.pointwise, self.bias,
                                           stride=self.stride, padding=(1, 1))


class InstanceNorm(Module):
    def __init__(self, channels, dtype=np.float32):
        self.gamma = _ones((channels,), dtype)
        self.beta = _zeros((channels,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.instance_norm(x, self.gamma, self.beta)


class MixDropout(Module):
    """Diffused mix dropout.

    Each training forward pass through a block picks one of its three
    insertion points uniformly at random, then flips a fair coin between
    element-wise dropout and whole-channel dropout at that point.
    """

    def __init__(self, elem_p: float, chan_p: float, rng: np.random.Generator):
        self.elem_p = elem_p
        self.chan_p = chan_p
        self.rng = rng

    def draw(self) -> tuple[int, bool]:
        """Return (insertion point in 0..2, use_channel_variant)."""
        return int(self.rng.integers(3)), bool(self.rng.random() < 0.5)

    def apply(self, x: Tensor, channelwise: bool) -> Tensor:
        if channelwise:
            return ad.dropout_channel(x, self.chan_p, True, self.rng)
        return ad.dropout_elementwise(x, self.elem_p, True, self.rng)


class ConvBlock(Module):
    """conv-relu, conv-relu, instance norm, strided conv-relu."""

    def __init__(self, index: int, cin: int, cout: int, config: ModelConfig,
                 rng: np.random.Generator, dtype=np.float32):
        if not 1 <= index <= 6:
            raise ValueError(f"convolution block index must be in 1..6, got {index}")
        self.index = index
        self.conv1 = Conv(cin, cout, rng=rng, dtype=dtype)
        self.conv2 = Conv(cout, cout, rng=rng, dtype=dtype)
        self.norm = InstanceNorm(cout, dtype)
        self.conv3 = Conv(cout, cout, stride=CB_STRIDES[index - 1], rng=rng, dtype=dtype)
        self.dropout = MixDropout(config.dropout_elem_p, config.dropout_chan_p, rng)

    def __call__(self, x: Tensor) -> Tensor:
        point, channelwise = self.dropout.draw() if self.training else (-1, False)
        x = ad.relu(self.conv1(x))
        if point == 0:
            x = self.dropout.apply(x, channelwise)
        x = ad.relu(self.conv2(x))
        if point == 1:
            x = self.dropout.apply(x, channelwise)
        x = self.norm(x)
        x = ad.relu(self.conv3(x))
        if point == 2:
            x = self.dropout.apply(x, channelwise)
        return x


class DSCBlock(Module):
    """Separable-conv version of :class:`ConvBlock`, stride 1, with a residual sum."""

    def __init__(self, channels: int, config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.conv1 = SeparableConv(channels, channels, rng=rng, dtype=dtype)
        self.conv2 = SeparableConv(channels, channels, rng=rng, dtype=dtype)
        self.norm = InstanceNorm(channels, dtype)
        self.conv3 = SeparableConv(channels, channels, rng=rng, dtype=dtype)
        self.dropout = MixDropout(config.dropout_elem_p, config.dropout_chan_p, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.norm.gamma.shape[0]:
            raise ValueError(
                f"DSCB expects {self.norm.gamma.shape[0]} channels for its residual sum, "
                f"got {x.shape[1]}")
        point, channelwise = self.dropout.draw() if self.training else (-1, False)
        y = ad.relu(self.conv1(x))
        if point == 0:
            y = self.dropout.apply(y, channelwise)
        y = ad.relu(self.conv2(y))
        if point == 1:
            y = self.dropout.apply(y, channelwise)
        y = self.norm(y)
        y = ad.relu(self.conv3(y))
        if point == 2:
            y = self.dropout.apply(y, channelwise)
        return ad.add(y, x)


def build_cb(index: int, cin: int, cout: int, config: ModelConfig | None = None,
             rng: np.random.Generator | None = None, dtype=np.float32) -> ConvBlock:
    config = config or ModelConfig()
    return ConvBlock(index, cin, cout, config, rng or np.random.default_rng(0), dtype)


def build_dscb(channels: int, config: ModelConfig | None = None,
               rng: np.random.Generator | None = None, dtype=np.float32) -> DSCBlock:
    config = config or ModelConfig()
    return DSCBlock(channels, config, rng or np.random.default_rng(0), dtype)


class Encoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        widths = (config.in_channels,) + config.cb_channels
        self.cbs = [ConvBlock(i + 1, widths[i], widths[i + 1], config, rng, dtype)
                    for i in range(6)]
        self.dscbs = [DSCBlock(config.dscb_channels, config, rng, dtype)
                      for _ in range(config.dscb_count)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ValueError(f"encoder expects (n, c, H, W), got {x.shape}")
        _, _, h, w = x.shape
        if h % HEIGHT_REDUCTION or w % WIDTH_REDUCTION:
            raise ValueError(
                f"input extents {h}x{w} must be multiples of {HEIGHT_REDUCTION}x{WIDTH_REDUCTION}; "
                "the data pipeline should have padded them")
        for block in self.cbs:
            x = block(x)
        for block in self.dscbs:
            x = block(x)
        return x


class Decoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        kh, kw = config.decoder_kernel
        self.conv = Conv(config.feature_channels, config.num_classes, kernel=(kh, kw),
                         padding=(kh // 2, kw // 2), rng=rng, dtype=dtype)

    def __call__(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.conv.weight.shape[1]:
            raise ValueError(f"decoder expects {self.conv.weight.shape[1]} feature channels, "
                             f"got {f.shape[1]}")
        return self.conv(f)


# ---------------------------------------------------------------------------
# lattice and collapse
# ---------------------------------------------------------------------------

def collapse_rows(grid: Tensor) -> Tensor:
    """(n, classes, h, w) -> (n, h*w, classes), rows concatenated top to bottom.

    Flat step ``t`` is grid cell ``(t // w, t % w)``. Pure re-indexing.
    """
    n, c, h, w = grid.shape
    return ad.reshape(ad.permute(grid, (0, 2, 3, 1)), (n, h * w, c))


def uncollapse_rows(flat: Tensor, height: int, width: int) -> Tensor:
    n, t, c = flat.shape
    if t != height * width:
        raise ValueError(f"flat length {t} != {height}*{width}")
    return ad.permute(ad.reshape(flat, (n, height, width, c)), (0, 3, 1, 2))


@dataclass
class PredictionLattice:
    grid: Tensor
    flat: Tensor
    valid_lengths: list[int] = field(default_factory=list)

    @property
    def rows(self) -> int:
        return self.grid.shape[2]

    @property
    def cols(self) -> int:
        return self.grid.shape[3]

    def log_probs(self) -> Tensor:
        return ad.log_softmax_lastdim(self.flat)


class Recognizer(Module):
    kind = "base"

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config, rng, dtype)
        self.decoder = Decoder(config, rng, dtype)
        # dropout masks draw from a stream separate from initialization
        dropout_rng = np.random.default_rng([seed, 1])
        for block in self.encoder.cbs + self.encoder.dscbs:
            block.dropout.rng = dropout_rng
        self.dropout_rng = dropout_rng

    def reseed_dropout(self, seed) -> None:
        self.dropout_rng = np.random.default_rng(seed)
        for block in self.encoder.cbs + self.encoder.dscbs:
            block.dropout.rng = self.dropout_rng

    def __call__(self, x) -> PredictionLattice:
        return self.forward(x)

    def forward(self, x) -> PredictionLattice:
        raise NotImplementedError


class SPAN(Recognizer):
    kind = "span"

    def forward(self, x) -> PredictionLattice:
        x = x if isinstance(x, Tensor) else Tensor(x)
        grid = self.decoder(self.encoder(x))
        flat = collapse_rows(grid)
        return PredictionLattice(grid, flat, [flat.shape[1]] * flat.shape[0])


class PoolLineR(Recognizer):
    kind = "pool_line_r"

    def forward(self, x) -> PredictionLattice:
        x = x if isinstance(x, Tensor) else Tensor(x)
        pooled = ad.adaptive_max_pool_vertical(self.encoder(x))
        grid = self.decoder(pooled)
        flat = collapse_rows(grid)
        return PredictionLattice(grid, flat, [flat.shape[1]] * flat.shape[0])


MODEL_KINDS = {SPAN.kind: SPAN, PoolLineR.kind: PoolLineR}


def build_model(kind: str, config: ModelConfig, seed: int = 0, dtype=np.float32) -> Recognizer:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}")
    return cls(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# static analysis
# ---------------------------------------------------------------------------

def parameter_census(model: Module) -> int:
    return sum(p.size for p in model.parameters())


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter total for ``config``."""
    def conv(cin, cout, k=9):
        return cout * cin * k + cout

    def sep(cin, cout):
        return cin * 9 + cout * cin + cout

    total = 0
    cin = config.in_channels
    for cout in config.cb_channels:
        total += conv(cin, cout) + 2 * conv(cout, cout) + 2 * cout
        cin = cout
    c = config.dscb_channels
    total += config.dscb_count * (3 * sep(c, c) + 2 * c)
    kh, kw = config.decoder_kernel
    total += conv(config.feature_channels, config.num_classes, kh * kw)
    return total


def receptive_field(config: ModelConfig) -> tuple[int, int]:
    """Analytic (vertical, horizontal) receptive field of one lattice cell in input pixels."""
    layers: list[tuple[int, int, int, int]] = []  # kh, kw, sh, sw
    for stride in CB_STRIDES:
        layers += [(3, 3, 1, 1), (3, 3, 1, 1), (3, 3) + stride]
    layers += [(3, 3, 1, 1)] * (3 * config.dscb_count)
    layers.append(tuple(config.decoder_kernel) + (1, 1))
    rf_h = rf_w = 1
    jump_h = jump_w = 1
    for kh, kw, sh, sw in layers:
        rf_h += (kh - 1) * jump_h
        rf_w += (kw - 1) * jump_w
        jump_h *= sh
        jump_w *= sw
    return rf_h, rf_w


@dataclass
class TransferReport:
    copied: list[str]
    fresh: list[str]

    @property
    def fraction_copied(self) -> float:
        total = len(self.copied) + len(self.fresh)
        return len(self.copied) / total if total else 1.0


def transfer_weights(source, target: Recognizer, encoder_only: bool = False,
                     target_charset=None) -> TransferReport:
    """Copy matching parameters from ``source`` into ``target``.

    ``source`` is a :class:`~spanhtr.checkpoint.Checkpoint` or a model. The
    decoders of both recognizers are identical 5x5 convolutions, so a full
    transfer copies every parameter; ``encoder_only`` leaves the decoder at
    its fresh initialization.
    """
    if isinstance(source, Module):
        state = source.state_dict()
        source_charset = None
    else:
        state = source.params
        source_charset = list(source.charset.symbols)
    if target_charset is not None and source_charset is not None \
            and list(target_charset) != source_charset:
        raise ValueError("charset mismatch between source checkpoint and target model "
                         "(affects decoder.conv.weight / decoder.conv.bias)")
    own = dict(target.named_parameters())
    for name in ("decoder.conv.weight", "decoder.conv.bias"):
        if name in state and name in own and np.shape(state[name]) != own[name].shape:
            raise ValueError(
                f"charset size mismatch: {name} has shape {np.shape(state[name])} in the source "
                f"but {own[name].shape} in the target")
    copied, fresh = [], []
    for name, p in own.items():
        if encoder_only and not name.startswith("encoder."):
            fresh.append(name)
            continue
        if name in state and np.shape(state[name]) == p.shape:
            p.data = np.asarray(state[name]).astype(p.dtype, copy=True)
            copied.append(name)
        else:
            fresh.append(name)
    return TransferReport(copied, fresh)
