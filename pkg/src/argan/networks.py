"""Network construction from compact layer tokens.

Token grammar (filters always last):
    C7-1-32   7x7 conv, stride 1, 32 filters, instance norm + ReLU
    D3-2-64   3x3 down conv, stride 2, instance norm + ReLU
    R3-128    residual block of two 3x3 convs, 128 filters
    U3-64     3x3 fractionally strided conv (stride 1/2), instance norm + ReLU
    P4-2-64   4x4 conv, stride 2, instance norm + LeakyReLU(0.2)

A trailing "!" on a token disables its normalization (the first discriminator
layer runs without instance norm).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

CHECKPOINT_FORMAT = "argan-checkpoint-v1"

_KIND_STRIDES = {"C": 1, "D": 2, "R": 1, "U": Fraction(1, 2), "P": 2}
_VALID_KERNELS = (3, 4, 7)


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerToken:
    kind: str
    kernel: int
    stride: Fraction
    filters: int
    norm: bool = True

    def __post_init__(self):
        if self.kind not in _KIND_STRIDES:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kernel not in _VALID_KERNELS:
            raise SpecError(f"unsupported kernel size {self.kernel}")
        if self.filters <= 0:
            raise SpecError("filters must be positive")

    def __str__(self):
        s = "h" if self.stride == Fraction(1, 2) else str(int(self.stride))
        if self.kind == "R":
            base = f"R{self.kernel}-{self.filters}"
        elif self.kind == "U":
            base = f"U{self.kernel}-{self.filters}"
        else:
            base = f"{self.kind}{self.kernel}-{s}-{self.filters}"
        return base if self.norm else base + "!"


def parse_token(text: str) -> LayerToken:
    text = text.strip()
    norm = True
    if text.endswith("!"):
        norm = False
        text = text[:-1]
    if not text:
        raise SpecError("empty layer token")
    kind = text[0]
    try:
        parts = text[1:].split("-")
        if kind in ("R", "U"):
            kernel = int(parts[0])
            filters = int(parts[1])
            stride = _KIND_STRIDES[kind]
        else:
            kernel = int(parts[0])
            stride = Fraction(1, 2) if parts[1] == "h" else Fraction(int(parts[1]))
            filters = int(parts[2])
    except (IndexError, ValueError) as e:
        raise SpecError(f"malformed layer token {text!r}") from e
    return LayerToken(kind, kernel, stride, filters, norm)


@dataclass(frozen=True)
class ArchSpec:
    tokens: tuple[LayerToken, ...]
    head: str = "none"  # tanh_image | patch_logits | none

    def __post_init__(self):
        if self.head not in ("tanh_image", "patch_logits", "none"):
            raise SpecError(f"unknown head {self.head!r}")

    @classmethod
    def from_strings(cls, tokens: Sequence[str], head: str = "none") -> "ArchSpec":
        return cls(tuple(parse_token(t) for t in tokens), head)

    def token_strings(self) -> list[str]:
        return [str(t) for t in self.tokens]


def generator_spec(n_blocks: int = 9, width: int = 64) -> ArchSpec:
    """Resnet-style translator spec. ``width=64`` lands at ~11.3M parameters."""
    tokens = [f"C7-1-{width}", f"D3-2-{2 * width}", f"D3-2-{4 * width}"]
    tokens += [f"R3-{4 * width}"] * n_blocks
    tokens += [f"U3-{2 * width}", f"U3-{width}", "C7-1-3"]
    return ArchSpec.from_strings(tokens, head="tanh_image")


def discriminator_spec(literal: bool = False) -> ArchSpec:
    """70x70 patch discriminator; ``literal=True`` keeps stride 2 in the last
    block, widening the receptive field to 94."""
    last = "P4-2-512" if literal else "P4-1-512"
    return ArchSpec.from_strings(
        ["P4-2-64!", "P4-2-128", "P4-2-256", last], head="patch_logits"
    )


def feature_extractor_spec() -> ArchSpec:
    """Perceptual-feature network whose residual-block outputs are the taps.

    Runs without normalization ("!" tokens): instance norm would erase global
    colour/intensity shifts per sample, making the taps blind to exactly the
    kind of domain differences the reconstruction loss and the Fréchet-distance
    embedding need to see, and it breaks on the 1x1 deep maps of small inputs.
    """
    return ArchSpec.from_strings(
        ["C7-2-64!", "R3-64!", "R3-128!", "R3-256!", "R3-512!"], head="none"
    )


def classifier_spec_note() -> str:
    return "torchvision resnet50 bottleneck topology (see recognition module)"


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

_IN_EPS = 1e-8


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, eps=_IN_EPS, affine=False, track_running_stats=False)


class ResidualBlock(nn.Module):
    """Two 3x3 convs with reflection padding; channel changes use a stride-2
    first conv and a 1x1 projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int, norm: bool = True):
        super().__init__()
        stride = 1 if in_ch == out_ch else 2
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3)
        self.norm1 = _norm(out_ch) if norm else nn.Identity()
        self.norm2 = _norm(out_ch) if norm else nn.Identity()
        self.pad = nn.ReflectionPad2d(1)
        if stride != 1 or in_ch != out_ch:
            proj: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, 1, stride=stride)]
            if norm:
                proj.append(_norm(out_ch))
            self.shortcut = nn.Sequential(*proj)
        else:
            self.shortcut = nn.Identity()

    def _pad(self, t):
        # reflection needs >= 2 pixels per side; replicate on degenerate maps
        if t.shape[-1] < 2 or t.shape[-2] < 2:
            return nn.functional.pad(t, (1, 1, 1, 1), mode="replicate")
        return self.pad(t)

    def forward(self, x):
        h = torch.relu(self.norm1(self.conv1(self._pad(x))))
        h = self.norm2(self.conv2(self._pad(h)))
        return h + self.shortcut(x)


def _conv_layer(token: LayerToken, in_ch: int) -> nn.Module:
    k, f = token.kernel, token.filters
    layers: list[nn.Module] = []
    if token.kind == "C":
        layers.append(nn.ReflectionPad2d(k // 2))
        layers.append(nn.Conv2d(in_ch, f, k, stride=int(token.stride)))
    elif token.kind == "D":
        layers.append(nn.Conv2d(in_ch, f, k, stride=2, padding=k // 2))
    elif token.kind == "U":
        layers.append(nn.ConvTranspose2d(in_ch, f, k, stride=2, padding=1, output_padding=1))
    elif token.kind == "P":
        layers.append(nn.Conv2d(in_ch, f, k, stride=int(token.stride), padding=1))
    else:
        raise SpecError(f"token {token} is not a plain conv layer")
    if token.norm:
        layers.append(_norm(f))
    layers.append(nn.LeakyReLU(0.2, inplace=False) if token.kind == "P" else nn.ReLU())
    return nn.Sequential(*layers)


class Generator(nn.Module):
    """Fully convolutional translator, tanh output in (-1, 1)."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        if spec.head != "tanh_image":
            raise SpecError("generator spec must carry a tanh_image head")
        if not spec.tokens or spec.tokens[0].kind != "C" or spec.tokens[-1].kind != "C":
            raise SpecError("generator spec must start and end with C tokens")
        self.spec = spec
        body: list[nn.Module] = []
        in_ch = 3
        for token in spec.tokens[:-1]:
            if token.kind == "R":
                body.append(ResidualBlock(in_ch, token.filters, norm=token.norm))
            else:
                body.append(_conv_layer(token, in_ch))
            in_ch = token.filters
        last = spec.tokens[-1]
        body.append(nn.ReflectionPad2d(last.kernel // 2))
        body.append(nn.Conv2d(in_ch, last.filters, last.kernel, stride=int(last.stride)))
        self.body = nn.Sequential(*body)

    def forward(self, x):
        return torch.tanh(self.body(x))


class PatchDiscriminator(nn.Module):
    """Emits a grid of raw patch logits (no sigmoid)."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        if spec.head != "patch_logits":
            raise SpecError("discriminator spec must carry a patch_logits head")
        if any(t.kind != "P" for t in spec.tokens):
            raise SpecError("discriminator spec may contain only P tokens")
        self.spec = spec
        body: list[nn.Module] = []
        in_ch = 3
        for token in spec.tokens:
            body.append(_conv_layer(token, in_ch))
            in_ch = token.filters
        body.append(nn.Conv2d(in_ch, 1, 4, stride=1, padding=1))
        self.body = nn.Sequential(*body)

    def forward(self, x):
        return self.body(x)


class FeatureExtractor(nn.Module):
    """Down conv followed by residual blocks; each block's output is a tap."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        if spec.head != "none":
            raise SpecError("feature extractor spec must carry no head")
        self.spec = spec
        stem_tokens = []
        blocks = []
        in_ch = 3
        for token in spec.tokens:
            if token.kind == "R":
                blocks.append(ResidualBlock(in_ch, token.filters, norm=token.norm))
            else:
                if blocks:
                    raise SpecError("conv tokens must precede residual blocks")
                stem_tokens.append(_conv_layer(token, in_ch))
            in_ch = token.filters
        if not blocks:
            raise SpecError("feature extractor needs at least one residual block")
        self.stem = nn.Sequential(*stem_tokens)
        self.blocks = nn.ModuleList(blocks)

    def taps(self, x) -> list[torch.Tensor]:
        h = self.stem(x)
        out = []
        for block in self.blocks:
            h = block(h)
            out.append(h)
        return out

    def forward(self, x):
        return self.taps(x)[-1]


class IdentityGenerator(nn.Module):
    """Diagnostic stand-in whose output reproduces the input up to the tanh
    range clamp; used only in tests."""

    range_margin = 1e-3

    def forward(self, x):
        return x.clamp(-1.0 + self.range_margin, 1.0 - self.range_margin)


def build_generator(spec: ArchSpec | None = None) -> Generator:
    return Generator(spec if spec is not None else generator_spec())


def build_discriminator(spec: ArchSpec | None = None) -> PatchDiscriminator:
    return PatchDiscriminator(spec if spec is not None else discriminator_spec())


def build_feature_extractor(spec: ArchSpec | None = None) -> FeatureExtractor:
    return FeatureExtractor(spec if spec is not None else feature_extractor_spec())


# ---------------------------------------------------------------------------
# weights and accounting
# ---------------------------------------------------------------------------


def init_weights(net: nn.Module, mean: float = 0.0, std: float = 0.02, seed: int = 0) -> nn.Module:
    """Gaussian conv weights, zero biases; deterministic in seed. In place."""
    if std <= 0:
        raise ValueError("std must be positive")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                noise = torch.randn(module.weight.shape, generator=gen, dtype=torch.float64)
                module.weight.copy_((noise * std + mean).to(module.weight.dtype))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.BatchNorm2d, nn.InstanceNorm2d)) and module.affine:
                module.weight.fill_(1.0)
                module.bias.zero_()
    return net


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def receptive_field(spec: ArchSpec) -> int:
    """Input extent seen by one output unit; head convs are included."""
    layers = [(t.kernel, t.stride) for t in spec.tokens]
    if spec.head == "patch_logits":
        layers.append((4, Fraction(1)))
    rf, jump = 1, 1
    for k, s in layers:
        if s.denominator != 1:
            raise SpecError("receptive_field requires integer strides")
        rf += (k - 1) * jump
        jump *= int(s)
    return rf


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, nets: dict[str, nn.Module], extra: dict | None = None) -> None:
    """Single archive: format tag, per-network arch tokens and parameters,
    plus optional opaque training state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "networks": {
            name: {
                "tokens": net.spec.token_strings() if hasattr(net, "spec") else [],
                "head": net.spec.head if hasattr(net, "spec") else "none",
                "class": type(net).__name__,
            }
            for name, net in nets.items()
        },
    }
    payload = {
        "meta": meta,
        "state": {name: net.state_dict() for name, net in nets.items()},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[dict[str, nn.Module], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    meta = payload.get("meta", {})
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {path}")
    builders = {
        "Generator": Generator,
        "PatchDiscriminator": PatchDiscriminator,
        "FeatureExtractor": FeatureExtractor,
    }
    nets: dict[str, nn.Module] = {}
    for name, info in meta["networks"].items():
        cls = builders.get(info["class"])
        if cls is None:
            raise ValueError(f"cannot rebuild network class {info['class']!r}")
        spec = ArchSpec.from_strings(info["tokens"], head=info["head"])
        net = cls(spec)
        net.load_state_dict(payload["state"][name])
        nets[name] = net
    return nets, payload.get("extra", {})
