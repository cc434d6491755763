"""Encoder/decoder F-CNN builders with optional SE recalibration.

Every family has 4 encoder blocks, a bottleneck, 4 decoder blocks and a
1x1 classifier. An SE block follows every encoder block (on its pre-pool
output) and every decoder block; the bottleneck has none.

Families:
    unet: plain conv blocks, nearest upsampling, skip concatenation.
    sdnet: plain conv blocks, max-unpooling with the encoder's pooling
        indices, skip concatenation.
    densenet: densely connected blocks closed by a 1x1 transition conv,
        decoded as unet.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .se import SEParams, SEVariant, apply_se, init_se_params, network_se_overhead
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    concat_channels,
    conv2d,
    glorot_uniform,
    max_pool2d,
    max_unpool2d,
    param_rng,
    relu,
    upsample_nearest,
)

ARCH_KINDS = ("unet", "sdnet", "densenet")
NUM_LEVELS = 4
POOL = 2


class ConfigError(ValueError):
    """Raised for an invalid architecture or run configuration."""


@dataclass(frozen=True)
class ArchSpec:
    arch_kind: str = "unet"
    block_channels: tuple = (8, 16, 32, 64)
    bottleneck_channels: int = 64
    num_classes: int = 4
    se_variant: SEVariant = SEVariant.NONE
    se_reduction: int = 2
    input_channels: int = 1
    conv_kernel: int = 3
    convs_per_block: int = 2
    se_zero_init: bool = False
    preset: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        try:
            object.__setattr__(self, "se_variant", SEVariant.parse(self.se_variant))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.validate()

    def validate(self) -> None:
        if self.arch_kind not in ARCH_KINDS:
            raise ConfigError(f"arch_kind must be one of {ARCH_KINDS}, got {self.arch_kind!r}")
        if len(self.block_channels) != NUM_LEVELS:
            raise ConfigError(f"block_channels needs exactly {NUM_LEVELS} entries, got {list(self.block_channels)}")
        if any(c < 1 for c in self.block_channels) or self.bottleneck_channels < 1:
            raise ConfigError("all channel counts must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be a positive odd integer, got {self.conv_kernel}")
        if self.convs_per_block < 1:
            raise ConfigError(f"convs_per_block must be >= 1, got {self.convs_per_block}")
        if self.se_reduction < 1:
            raise ConfigError(f"se_reduction must be >= 1, got {self.se_reduction}")
        if self.se_variant in (SEVariant.CSE, SEVariant.SCSE):
            for c in self.block_channels:
                if c < self.se_reduction:
                    raise ConfigError(f"block width {c} is smaller than se_reduction {self.se_reduction}")
                if self.se_reduction == 2 and c % 2:
                    raise ConfigError(f"block width {c} must be even for {self.se_variant.value} with reduction 2")

    def se_block_channels(self) -> List[int]:
        """Output widths of the 8 SE sites: encoders 0..3 then decoders 3..0."""
        return list(self.block_channels) + list(reversed(self.block_channels))

    def with_variant(self, variant, zero_init: Optional[bool] = None) -> "ArchSpec":
        zi = self.se_zero_init if zero_init is None else zero_init
        return replace(self, se_variant=SEVariant.parse(variant), se_zero_init=zi)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        d["se_variant"] = self.se_variant.value
        return d


PRESETS: Dict[str, dict] = {
    "desk": dict(
        block_channels=(8, 16, 32, 64),
        bottleneck_channels=64,
        num_classes=4,
        conv_kernel=3,
        convs_per_block=2,
    ),
    # widths reconstructed from the reported SE overhead (8 blocks at C=64)
    "full": dict(
        block_channels=(64, 64, 64, 64),
        bottleneck_channels=64,
        num_classes=28,
        conv_kernel=5,
        convs_per_block=2,
    ),
}


def preset_spec(name: str, arch_kind: str = "unet", se_variant="none", **overrides) -> ArchSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    kw = dict(PRESETS[name], arch_kind=arch_kind, se_variant=se_variant, preset=name)
    kw.update(overrides)
    return ArchSpec(**kw)


@dataclass
class _Conv:
    weight: Tensor
    bias: Tensor
    padding: int


@dataclass
class _Block:
    name: str
    kind: str  # "plain" or "dense"
    convs: List[_Conv]
    transition: Optional[_Conv] = None


@dataclass
class _Level:
    encoder: _Block
    decoder: _Block
    enc_se: Optional[SEParams] = None
    dec_se: Optional[SEParams] = None
    unpool_proj: Optional[_Conv] = None


@dataclass
class Network:
    """Realized parameters and topology of one encoder/decoder network."""

    spec: ArchSpec
    seed: int
    levels: List[_Level]
    bottleneck: _Block
    classifier: _Conv
    params: Dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def se_parameters(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if ".se." in k}

    def parameter_breakdown(self) -> Dict[str, int]:
        """Scalar count per layer (parameter path minus the tensor name)."""
        out: Dict[str, int] = {}
        for name, t in self.params.items():
            layer = name.rsplit(".", 1)[0]
            out[layer] = out.get(layer, 0) + t.size
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in state:
                raise ShapeError(f"checkpoint is missing tensor {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"checkpoint tensor {name!r} has shape {arr.shape}, network expects {t.shape}")
        extra = sorted(set(state) - set(self.params))
        if extra:
            raise ShapeError(f"checkpoint has tensors unknown to this network, first: {extra[0]!r}")
        for name, t in self.params.items():
            t.data[...] = state[name]

    def __call__(self, batch) -> Tensor:
        return forward_segment(self, batch)


class _Builder:
    def __init__(self, spec: ArchSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.params: Dict[str, Tensor] = {}

    def conv(self, name: str, cin: int, cout: int, k: int) -> _Conv:
        rng = param_rng(self.seed, f"{name}.weight")
        w = glorot_uniform((cout, cin, k, k), cin * k * k, cout * k * k, rng)
        weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")
        self.params[weight.name] = weight
        self.params[bias.name] = bias
        return _Conv(weight, bias, k // 2)

    def block(self, name: str, cin: int, cout: int) -> _Block:
        k, n = self.spec.conv_kernel, self.spec.convs_per_block
        if self.spec.arch_kind == "densenet":
            convs = [self.conv(f"{name}.conv{j}", cin + j * cout, cout, k) for j in range(n)]
            transition = self.conv(f"{name}.transition", cin + n * cout, cout, 1)
            return _Block(name, "dense", convs, transition)
        convs = [self.conv(f"{name}.conv{j}", cin if j == 0 else cout, cout, k) for j in range(n)]
        return _Block(name, "plain", convs)

    def se(self, name: str, channels: int) -> Optional[SEParams]:
        p = init_se_params(
            self.spec.se_variant,
            channels,
            self.spec.se_reduction,
            seed=self.seed,
            zero=self.spec.se_zero_init,
            prefix=f"{name}.se",
        )
        if p is not None:
            for t in p.tensors().values():
                self.params[t.name] = t
        return p


def build_network(spec: ArchSpec, seed: int = 0) -> Network:
    """Realize ``spec`` deterministically from ``seed``.

    Each tensor draws from its own generator keyed on (seed, parameter path),
    so networks differing only in SE variant share every other weight.
    """
    spec.validate()
    b = _Builder(spec, seed)
    chans = list(spec.block_channels)

    encoders, enc_se = [], []
    cin = spec.input_channels
    for i, c in enumerate(chans):
        encoders.append(b.block(f"enc{i}", cin, c))
        enc_se.append(b.se(f"enc{i}", c))
        cin = c
    bottleneck = b.block("bottleneck", cin, spec.bottleneck_channels)

    decoders, dec_se, projs = {}, {}, {}
    cin = spec.bottleneck_channels
    for i in reversed(range(NUM_LEVELS)):
        c = chans[i]
        if spec.arch_kind == "sdnet" and cin != c:
            # unpooling needs as many channels as the indices it consumes
            projs[i] = b.conv(f"dec{i}.unpool_proj", cin, c, 1)
            cin = c
        decoders[i] = b.block(f"dec{i}", cin + c, c)
        dec_se[i] = b.se(f"dec{i}", c)
        cin = c
    classifier = b.conv("classifier", cin, spec.num_classes, 1)

    levels = [
        _Level(encoders[i], decoders[i], enc_se[i], dec_se[i], projs.get(i)) for i in range(NUM_LEVELS)
    ]
    net = Network(spec, seed, levels, bottleneck, classifier, b.params)

    expected = network_se_overhead(spec.se_block_channels(), spec.se_variant, spec.se_reduction)
    actual = sum(t.size for t in net.se_parameters().values())
    if actual != expected:
        raise AssertionError(f"SE weight count {actual} disagrees with the overhead formula {expected}")
    return net


def _apply_conv(x: Tensor, conv: _Conv, act: bool = True) -> Tensor:
    y = conv2d(x, conv.weight, conv.bias, stride=1, padding=conv.padding)
    return relu(y) if act else y


def _run_block(x: Tensor, block: _Block) -> Tensor:
    if block.kind == "plain":
        for conv in block.convs:
            x = _apply_conv(x, conv)
        return x
    feats = x
    for conv in block.convs:
        feats = concat_channels(feats, _apply_conv(feats, conv))
    return _apply_conv(feats, block.transition)


def _se_site(u: Tensor, p: Optional[SEParams]) -> Tensor:
    out = apply_se(u, p)
    if out.shape != u.shape:
        raise ShapeError(f"SE block changed feature map shape {u.shape} -> {out.shape}")
    return out


def forward_segment(net: Network, batch) -> Tensor:
    """Per-pixel class logits (N, K, H, W) for an (N, Cin, H, W) batch."""
    x = as_tensor(batch)
    spec = net.spec
    if x.ndim != 4:
        raise ShapeError(f"input batch must be (N, C, H, W), got shape {x.shape}")
    if x.shape[1] != spec.input_channels:
        raise ShapeError(f"network expects {spec.input_channels} input channels, got {x.shape[1]}")
    factor = POOL**NUM_LEVELS
    h, w = x.shape[2:]
    if h % factor or w % factor:
        raise ShapeError(f"spatial extent {h}x{w} must be divisible by {factor} (four 2x poolings)")

    skips, indices = [], []
    for level in net.levels:
        u = _se_site(_run_block(x, level.encoder), level.enc_se)
        skips.append(u)
        x, idx = max_pool2d(u, POOL)
        indices.append(idx)

    x = _run_block(x, net.bottleneck)

    for i in reversed(range(NUM_LEVELS)):
        level = net.levels[i]
        if spec.arch_kind == "sdnet":
            if level.unpool_proj is not None:
                x = _apply_conv(x, level.unpool_proj)
            x = max_unpool2d(x, indices[i], POOL)
        else:
            x = upsample_nearest(x, POOL)
        x = concat_channels(x, skips[i])
        x = _se_site(_run_block(x, level.decoder), level.dec_se)

    return _apply_conv(x, net.classifier, act=False)


def count_parameters(net: Network) -> int:
    return sum(t.size for t in net.params.values())
