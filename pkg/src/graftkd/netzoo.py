"""Block-decomposable classifiers, their boundary signatures, and cost accounting.

Every network in the zoo is an ordered list of blocks; the classifier head is
folded into the last block so that each block (including the last) can be
replaced by a student block of the same index.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import torch
from torch import nn

__all__ = [
    "ArchSpec",
    "BasicResidual",
    "Block",
    "BlockwiseNetwork",
    "BoundarySignature",
    "FLOP_CONVENTION",
    "SignatureError",
    "build_network",
    "count_flops",
    "count_params",
    "decompose",
    "entry_layers",
    "register",
    "registered_archs",
]

FLOP_CONVENTION = (
    "FLOPs = 2 x multiply-accumulates of Conv2d and Linear layers; "
    "normalization, activation, pooling and bias additions are not counted"
)


class SignatureError(ValueError):
    """Raised when consecutive block boundaries do not chain."""


@dataclass(frozen=True)
class BoundarySignature:
    in_channels: int
    out_channels: int
    spatial_stride: int
    input_resolution: tuple[int, int]

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise SignatureError(f"channels must be positive, got {self.in_channels}->{self.out_channels}")
        if self.spatial_stride < 1:
            raise SignatureError(f"spatial_stride must be >= 1, got {self.spatial_stride}")
        h, w = self.input_resolution
        if h < 1 or w < 1:
            raise SignatureError(f"input_resolution must be positive, got {self.input_resolution}")
        if h % self.spatial_stride or w % self.spatial_stride:
            raise SignatureError(
                f"input_resolution {self.input_resolution} not divisible by stride {self.spatial_stride}"
            )

    @property
    def output_resolution(self) -> tuple[int, int]:
        h, w = self.input_resolution
        return h // self.spatial_stride, w // self.spatial_stride


class BasicResidual(nn.Module):
    """Two-conv residual unit; the shortcut is a strided 1x1 projection when shapes change."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, projection: bool | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if projection is None:
            projection = stride != 1 or in_channels != out_channels
        self.downsample = (
            nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
            if projection
            else None
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = x if self.downsample is None else self.downsample(x)
        return torch.relu(out + shortcut)


def entry_layers(module: nn.Module) -> list[nn.Module]:
    """Return the linear layers that read a module's input directly.

    These are the layers an input-side channel map can be absorbed into.
    Raises ``TypeError`` if the input passes through anything non-linear
    (or an identity shortcut) before reaching a convolution or affine map.
    """
    if isinstance(module, (nn.Conv2d, nn.Linear)):
        if isinstance(module, nn.Conv2d) and module.groups != 1:
            raise TypeError("grouped convolutions cannot absorb a channel map")
        return [module]
    if isinstance(module, BasicResidual):
        if module.downsample is None:
            raise TypeError("residual unit with identity shortcut has no linear entry on the skip path")
        return [module.conv1, module.downsample[0]]
    if isinstance(module, (nn.Sequential, Block)):
        children = list(module.children()) if isinstance(module, nn.Sequential) else [module.layers]
        if not children:
            raise TypeError("empty block")
        return entry_layers(children[0])
    raise TypeError(f"first operation is {type(module).__name__}, expected a convolution or affine map")


class Block(nn.Module):
    """One graftable segment of a network: a layer sequence plus its boundary signature."""

    def __init__(self, layers: Iterable[nn.Module], signature: BoundarySignature):
        super().__init__()
        self.layers = nn.Sequential(*layers)
        self.signature = signature
        entry_layers(self.layers)  # every block must start with a conv or affine map

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)

    def extra_repr(self) -> str:
        s = self.signature
        return f"{s.in_channels}->{s.out_channels}, stride={s.spatial_stride}, in_res={s.input_resolution}"


class BlockwiseNetwork(nn.Module):
    """Composite classifier ``blocks[L-1] o ... o blocks[0]`` with an optional head."""

    def __init__(
        self,
        blocks: Sequence[Block],
        num_classes: int,
        arch_name: str = "custom",
        head: nn.Module | None = None,
        spec: "ArchSpec | None" = None,
    ):
        super().__init__()
        if len(blocks) < 2:
            raise SignatureError(f"a blockwise network needs at least 2 blocks, got {len(blocks)}")
        check_chain([b.signature for b in blocks])
        self.blocks = nn.ModuleList(blocks)
        self.head = head
        self.num_classes = num_classes
        self.arch_name = arch_name
        self.spec = spec

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def signatures(self) -> list[BoundarySignature]:
        return [b.signature for b in self.blocks]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        sig = self.blocks[0].signature
        return (sig.in_channels, *sig.input_resolution)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        if self.head is not None:
            x = self.head(x)
        return x


def check_chain(signatures: Sequence[BoundarySignature]) -> None:
    for l in range(1, len(signatures)):
        prev, cur = signatures[l - 1], signatures[l]
        if prev.out_channels != cur.in_channels:
            raise SignatureError(
                f"boundary {l} (block {l} -> block {l + 1}): out_channels {prev.out_channels} "
                f"!= in_channels {cur.in_channels}"
            )
        if prev.output_resolution != cur.input_resolution:
            raise SignatureError(
                f"boundary {l} (block {l} -> block {l + 1}): resolution {prev.output_resolution} "
                f"!= expected {cur.input_resolution}"
            )


def decompose(network: BlockwiseNetwork) -> list[tuple[Block, BoundarySignature]]:
    """The network's blocks in forward order, paired with their signatures.

    The blocks are the network's own modules (not copies), so chaining them
    reproduces the network forward exactly.
    """
    return [(block, block.signature) for block in network.blocks]


# ---------------------------------------------------------------------------
# counting


def count_params(target: nn.Module) -> int:
    """Exact number of scalar parameters (buffers such as BN running stats excluded)."""
    return sum(p.numel() for p in target.parameters())


def count_flops(network: nn.Module, input_shape: Sequence[int]) -> int:
    """FLOPs of one forward pass on a single input of shape ``(C, H, W)``.

    See ``FLOP_CONVENTION``: each multiply-accumulate of a conv or linear
    layer counts as 2 FLOPs, everything else is free.
    """
    input_shape = tuple(input_shape)
    expected = getattr(network, "input_shape", None)
    if expected is None and isinstance(network, Block):
        sig = network.signature
        expected = (sig.in_channels, *sig.input_resolution)
    if expected is not None and tuple(expected) != input_shape:
        raise ValueError(f"input shape {input_shape} does not match network entry {tuple(expected)}")

    macs = 0

    def conv_hook(mod: nn.Conv2d, inp, out):
        nonlocal macs
        kh, kw = mod.kernel_size
        macs += out[0].numel() * (mod.in_channels // mod.groups) * kh * kw

    def linear_hook(mod: nn.Linear, inp, out):
        nonlocal macs
        macs += out[0].numel() * mod.in_features

    handles = []
    for mod in network.modules():
        if isinstance(mod, nn.Conv2d):
            handles.append(mod.register_forward_hook(conv_hook))
        elif isinstance(mod, nn.Linear):
            handles.append(mod.register_forward_hook(linear_hook))
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            param = next(network.parameters(), None)
            device = param.device if param is not None else None
            network(torch.zeros(1, *input_shape, device=device))
    finally:
        for h in handles:
            h.remove()
        network.train(was_training)
    return 2 * macs


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor: registry name plus the knobs a family accepts."""

    name: str
    num_classes: int = 10
    width: int | None = None
    input_resolution: int | None = None
    in_channels: int = 3
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def to_dict(self) -> dict:
        d = {"name": self.name, "num_classes": self.num_classes, "in_channels": self.in_channels}
        if self.width is not None:
            d["width"] = self.width
        if self.input_resolution is not None:
            d["input_resolution"] = self.input_resolution
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            name=d["name"],
            num_classes=int(d.get("num_classes", 10)),
            width=None if d.get("width") is None else int(d["width"]),
            input_resolution=None if d.get("input_resolution") is None else int(d["input_resolution"]),
            in_channels=int(d.get("in_channels", 3)),
        )


_REGISTRY: dict[str, Callable[[ArchSpec], list[Block]]] = {}
_DEFAULTS: dict[str, dict] = {}


def register(name: str, **defaults):
    """Decorator adding a block-list builder to the registry."""

    def deco(fn):
        _REGISTRY[name] = fn
        _DEFAULTS[name] = defaults
        return fn

    return deco


def registered_archs() -> list[str]:
    return sorted(_REGISTRY)


def _resolve(spec: ArchSpec) -> ArchSpec:
    d = _DEFAULTS[spec.name]
    return replace(
        spec,
        width=spec.width if spec.width is not None else d.get("width"),
        input_resolution=spec.input_resolution if spec.input_resolution is not None else d["input_resolution"],
    )


def he_init_(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Kaiming-normal weights (fan_out for convs), unit/zero normalization, zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_network(arch_spec: ArchSpec | str, seed: int = 0, **overrides) -> BlockwiseNetwork:
    """Instantiate a registered architecture with He-initialized parameters.

    ``arch_spec`` may be an :class:`ArchSpec` or a registry name, in which case
    keyword overrides (``num_classes``, ``width``, ...) fill the spec.
    """
    if isinstance(arch_spec, str):
        arch_spec = ArchSpec(arch_spec, **overrides)
    elif overrides:
        arch_spec = replace(arch_spec, **overrides)
    if arch_spec.name not in _REGISTRY:
        raise KeyError(f"unknown architecture {arch_spec.name!r}; registered: {', '.join(registered_archs())}")
    spec = _resolve(arch_spec)
    blocks = _REGISTRY[spec.name](spec)
    net = BlockwiseNetwork(blocks, spec.num_classes, arch_name=spec.name, spec=spec)
    gen = torch.Generator().manual_seed(seed)
    he_init_(net, gen)
    return net


def clone_network(network: BlockwiseNetwork) -> BlockwiseNetwork:
    return copy.deepcopy(network)


def _sig(in_c: int, out_c: int, stride: int, res: int) -> BoundarySignature:
    return BoundarySignature(in_c, out_c, stride, (res, res))


def _conv_bn_relu(in_c: int, out_c: int, stride: int = 1) -> list[nn.Module]:
    return [nn.Conv2d(in_c, out_c, 3, stride, 1, bias=False), nn.BatchNorm2d(out_c), nn.ReLU(inplace=True)]


def _classifier_tail(channels: int, num_classes: int) -> list[nn.Module]:
    return [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(channels, num_classes)]


@register("toy-cnn-4block", width=16, input_resolution=32)
def _toy_cnn(spec: ArchSpec) -> list[Block]:
    """Four plain conv blocks, channel widths w, 2w, 4w, 8w; strides 1, 2, 2, 2."""
    w, res = spec.width, spec.input_resolution
    blocks = []
    in_c = spec.in_channels
    for l, (out_c, stride) in enumerate([(w, 1), (2 * w, 2), (4 * w, 2), (8 * w, 2)]):
        layers = _conv_bn_relu(in_c, out_c, stride) + _conv_bn_relu(out_c, out_c)
        if l == 3:
            layers += _classifier_tail(out_c, spec.num_classes)
            sig = BoundarySignature(in_c, spec.num_classes, stride, (res, res))
        else:
            sig = _sig(in_c, out_c, stride, res)
        blocks.append(Block(layers, sig))
        in_c, res = out_c, res // stride
    return blocks


@register("toy-resnet-4block", width=16, input_resolution=32)
def _toy_resnet(spec: ArchSpec) -> list[Block]:
    """Residual counterpart of toy-cnn-4block with projection shortcuts at block entries."""
    w, res = spec.width, spec.input_resolution
    blocks = [Block(_conv_bn_relu(spec.in_channels, w) + [BasicResidual(w, w)], _sig(spec.in_channels, w, 1, res))]
    in_c = w
    for l, out_c in enumerate([2 * w, 4 * w, 8 * w], start=1):
        res_in = res // (2 ** (l - 1))
        layers: list[nn.Module] = [BasicResidual(in_c, out_c, stride=2)]
        if l == 3:
            layers += _classifier_tail(out_c, spec.num_classes)
            sig = BoundarySignature(in_c, spec.num_classes, 2, (res_in, res_in))
        else:
            sig = _sig(in_c, out_c, 2, res_in)
        blocks.append(Block(layers, sig))
        in_c = out_c
    return blocks


VGG16_CFG = [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512]]


def _vgg_blocks(spec: ArchSpec, scale: float, hidden: int) -> list[Block]:
    # one block per max-pool stage; the pool closes each block so the next block opens with a conv
    res = spec.input_resolution
    in_c = spec.in_channels
    blocks = []
    for l, stage in enumerate(VGG16_CFG):
        layers: list[nn.Module] = []
        c = in_c
        for width in stage:
            out_c = int(width * scale)
            layers += _conv_bn_relu(c, out_c)
            c = out_c
        layers.append(nn.MaxPool2d(2, 2))
        if l == len(VGG16_CFG) - 1:
            feat = c * (res // 2) ** 2
            layers += [
                nn.Flatten(),
                nn.Linear(feat, hidden),
                nn.BatchNorm1d(hidden),
                nn.ReLU(inplace=True),
                nn.Linear(hidden, spec.num_classes),
            ]
            sig = BoundarySignature(in_c, spec.num_classes, 2, (res, res))
        else:
            sig = _sig(in_c, c, 2, res)
        blocks.append(Block(layers, sig))
        in_c, res = c, res // 2
    return blocks


@register("vgg16-cifar", input_resolution=32)
def _vgg16(spec: ArchSpec) -> list[Block]:
    """VGG16 with BN and a 512-512-classes head, split into five blocks at the pools."""
    return _vgg_blocks(spec, 1.0, 512)


@register("vgg16-half-cifar", input_resolution=32)
def _vgg16_half(spec: ArchSpec) -> list[Block]:
    """vgg16-cifar with every conv width (and the hidden head width) halved."""
    return _vgg_blocks(spec, 0.5, 256)


def _resnet_blocks(spec: ArchSpec, layers: Sequence[int]) -> list[Block]:
    res = spec.input_resolution
    stem = [
        nn.Conv2d(spec.in_channels, 64, 7, 2, 3, bias=False),
        nn.BatchNorm2d(64),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(3, 2, 1),
    ]
    blocks = [Block(stem + [BasicResidual(64, 64) for _ in range(layers[0])], _sig(spec.in_channels, 64, 4, res))]
    res //= 4
    in_c = 64
    for l, (out_c, n) in enumerate(zip([128, 256, 512], layers[1:]), start=1):
        units: list[nn.Module] = [BasicResidual(in_c, out_c, stride=2)]
        units += [BasicResidual(out_c, out_c) for _ in range(n - 1)]
        if l == 3:
            units += _classifier_tail(out_c, spec.num_classes)
            sig = BoundarySignature(in_c, spec.num_classes, 2, (res, res))
        else:
            sig = _sig(in_c, out_c, 2, res)
        blocks.append(Block(units, sig))
        in_c, res = out_c, res // 2
    return blocks


@register("resnet18", input_resolution=224)
def _resnet18(spec: ArchSpec) -> list[Block]:
    """ImageNet ResNet18; block 1 is stem + layer1, blocks 2-4 are layer2-layer4 (+ pool/fc)."""
    return _resnet_blocks(spec, [2, 2, 2, 2])


@register("resnet34", input_resolution=224)
def _resnet34(spec: ArchSpec) -> list[Block]:
    return _resnet_blocks(spec, [3, 4, 6, 3])
