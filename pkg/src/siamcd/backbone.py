"""Encoder-decoder network family for bi-temporal change detection.

Four variants share the same building blocks:

``EarlyFusionUNet``
    both images concatenated on the channel axis, single U-Net, change output only.
``SiamDiff``
    shared encoder per image, absolute feature differences feed a change decoder.
``SiamDiffDualTask``
    adds a shared building-segmentation decoder applied to each image.
``SiamDiffDualTaskSSL``
    adds a 1x1 convolution mapping the two building logits to a second change output.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from siamcd.errors import ConfigurationError, ShapeError


class Variant(str, enum.Enum):
    EarlyFusionUNet = "EarlyFusionUNet"
    SiamDiff = "SiamDiff"
    SiamDiffDualTask = "SiamDiffDualTask"
    SiamDiffDualTaskSSL = "SiamDiffDualTaskSSL"

    @property
    def siamese(self) -> bool:
        return self is not Variant.EarlyFusionUNet

    @property
    def dual_task(self) -> bool:
        return self in (Variant.SiamDiffDualTask, Variant.SiamDiffDualTaskSSL)

    @property
    def ssl(self) -> bool:
        return self is Variant.SiamDiffDualTaskSSL


VARIANT_LABELS = {
    Variant.EarlyFusionUNet: "EF U-Net",
    Variant.SiamDiff: "Siam-Diff",
    Variant.SiamDiffDualTask: "Siam-Diff + Dual-Task",
    Variant.SiamDiffDualTaskSSL: "Siam-Diff + Dual-Task + SSL",
}


@dataclass
class NetworkConfig:
    variant: Variant = Variant.SiamDiffDualTaskSSL
    input_channels: int = 3
    base_channels: int = 16
    depth: int = 5
    seed: int = 0
    # signed differences break temporal-swap symmetry; kept for experiments only
    absolute_difference: bool = True
    # "difference" starts the semantic fusion head at l2 - l1; "kaiming" draws it like every other conv
    fusion_init: str = "difference"

    def __post_init__(self):
        try:
            self.variant = Variant(self.variant)
        except ValueError:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}; expected one of {[v.value for v in Variant]}"
            ) from None
        self.validate()

    def validate(self):
        if self.depth < 2:
            raise ConfigurationError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigurationError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_channels < 1:
            raise ConfigurationError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.fusion_init not in ("difference", "kaiming"):
            raise ConfigurationError(f"fusion_init must be 'difference' or 'kaiming', got {self.fusion_init!r}")

    def width(self, level: int) -> int:
        """Channel count at encoder level ``level`` (1-based)."""
        return self.base_channels * 2 ** (level - 1)

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class DualTaskOutputs(NamedTuple):
    """Network outputs as probability rasters of shape (N, H, W); absent ones are None."""

    p_c: torch.Tensor
    p_s_t1: torch.Tensor | None = None
    p_s_t2: torch.Tensor | None = None
    p_cs: torch.Tensor | None = None

    def present(self) -> dict:
        return {k: v for k, v in self._asdict().items() if v is not None}

    def select(self, index: int) -> "DualTaskOutputs":
        """Outputs of a single sample of the batch, keeping a batch axis of one."""
        return DualTaskOutputs(
            *(None if v is None else v[index : index + 1] for v in self)
        )


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch, out_ch):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class Encoder(nn.Module):
    def __init__(self, in_ch, config: NetworkConfig):
        super().__init__()
        self.levels = nn.ModuleList()
        prev = in_ch
        for k in range(1, config.depth + 1):
            self.levels.append(ConvBlock(prev, config.width(k)))
            prev = config.width(k)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for k, block in enumerate(self.levels):
            if k:
                x = self.pool(x)
            x = block(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """U-Net decoder that consumes a feature stack (deepest entry first upsampled)."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        depth = config.depth
        self.up = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for k in range(depth - 1, 0, -1):
            self.up.append(nn.ConvTranspose2d(config.width(k + 1), config.width(k), 2, stride=2))
            self.blocks.append(ConvBlock(2 * config.width(k), config.width(k)))
        self.head = nn.Conv2d(config.width(1), 1, 1)

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        x = feats[-1]
        for up, block, skip in zip(self.up, self.blocks, reversed(feats[:-1])):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)[:, 0]


class ChangeDetectionNetwork(nn.Module):
    """One module for all four variants; submodules exist only where the variant needs them."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        v = config.variant
        in_ch = config.input_channels * (1 if v.siamese else 2)
        self.encoder = Encoder(in_ch, config)
        self.change_decoder = Decoder(config)
        if v.dual_task:
            self.semantic_decoder = Decoder(config)
        if v.ssl:
            self.semantic_fusion = nn.Conv2d(2, 1, 1)

    @property
    def variant(self) -> Variant:
        return self.config.variant

    def _check_image(self, image):
        if image.ndim == 3:
            image = image.unsqueeze(0)
        if image.ndim != 4:
            raise ShapeError(f"expected a C x H x W or N x C x H x W image, got shape {tuple(image.shape)}")
        h, w = image.shape[-2:]
        d = self.config.divisor
        if h % d or w % d:
            raise ShapeError(
                f"spatial dims {h}x{w} must be divisible by {d} (2**(depth-1) for depth={self.config.depth})"
            )
        return image

    def encode(self, image) -> list[torch.Tensor]:
        image = self._check_image(image)
        if image.shape[1] != self.encoder.levels[0][0].in_channels:
            raise ShapeError(
                f"encoder expects {self.encoder.levels[0][0].in_channels} channels, got {image.shape[1]}"
            )
        return self.encoder(image)

    def fuse_differences(self, feats_t1, feats_t2) -> list[torch.Tensor]:
        if len(feats_t1) != len(feats_t2) or len(feats_t1) != self.config.depth:
            raise ShapeError(
                f"feature stacks have depths {len(feats_t1)} and {len(feats_t2)}, expected {self.config.depth}"
            )
        fused = []
        for a, b in zip(feats_t1, feats_t2):
            if a.shape != b.shape:
                raise ShapeError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
            fused.append(torch.abs(a - b) if self.config.absolute_difference else a - b)
        return fused

    def _check_stack(self, feats):
        if len(feats) != self.config.depth:
            raise ShapeError(f"feature stack has {len(feats)} levels, expected {self.config.depth}")
        for k, f in enumerate(feats, start=1):
            if f.shape[1] != self.config.width(k):
                raise ShapeError(f"level {k} has {f.shape[1]} channels, expected {self.config.width(k)}")
            if k > 1 and tuple(f.shape[-2:]) != tuple(s // 2 for s in feats[k - 2].shape[-2:]):
                raise ShapeError(f"level {k} spatial dims {tuple(f.shape[-2:])} are not half of level {k - 1}")

    def decode_semantics(self, feats):
        if not self.variant.dual_task:
            raise ShapeError(f"{self.variant.value} has no semantic decoder")
        self._check_stack(feats)
        logits = self.semantic_decoder(feats)
        return logits, torch.sigmoid(logits)

    def decode_difference(self, feats_t1, feats_t2):
        self._check_stack(feats_t1)
        self._check_stack(feats_t2)
        return torch.sigmoid(self.change_decoder(self.fuse_differences(feats_t1, feats_t2)))

    def fuse_semantic_change(self, logit_t1, logit_t2):
        if not self.variant.ssl:
            raise ShapeError(f"{self.variant.value} has no semantic fusion head")
        if logit_t1.shape != logit_t2.shape:
            raise ShapeError(f"logit shapes differ: {tuple(logit_t1.shape)} vs {tuple(logit_t2.shape)}")
        x = torch.stack([logit_t1, logit_t2], dim=1)
        return torch.sigmoid(self.semantic_fusion(x))[:, 0]

    def forward(self, image_t1, image_t2) -> DualTaskOutputs:
        if image_t1.shape != image_t2.shape:
            raise ShapeError(f"image shapes differ: {tuple(image_t1.shape)} vs {tuple(image_t2.shape)}")
        image_t1 = self._check_image(image_t1)
        image_t2 = self._check_image(image_t2)
        if not self.variant.siamese:
            feats = self.encode(torch.cat([image_t1, image_t2], dim=1))
            return DualTaskOutputs(p_c=torch.sigmoid(self.change_decoder(feats)))
        f1 = self.encode(image_t1)
        f2 = self.encode(image_t2)
        p_c = self.decode_difference(f1, f2)
        if not self.variant.dual_task:
            return DualTaskOutputs(p_c=p_c)
        logit_1, p_s_t1 = self.decode_semantics(f1)
        logit_2, p_s_t2 = self.decode_semantics(f2)
        p_cs = self.fuse_semantic_change(logit_1, logit_2) if self.variant.ssl else None
        return DualTaskOutputs(p_c=p_c, p_s_t1=p_s_t1, p_s_t2=p_s_t2, p_cs=p_cs)


def init_weights(net: nn.Module, seed: int):
    """Kaiming fan-in init for conv kernels, zero biases, unit/zero batch-norm affine."""
    gen = torch.Generator().manual_seed(int(seed))
    for name, module in net.named_modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            mode = "fan_in" if isinstance(module, nn.Conv2d) else "fan_out"
            nn.init.kaiming_normal_(module.weight, mode=mode, nonlinearity="relu", generator=gen)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.BatchNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    fusion = getattr(net, "semantic_fusion", None)
    if fusion is not None and net.config.fusion_init == "difference":
        # a random sign pattern on this 2-weight head can leave p_cs stuck on
        # "building at either date"; the difference start encodes new construction
        with torch.no_grad():
            fusion.weight.copy_(torch.tensor([-1.0, 1.0]).view(1, 2, 1, 1))
            fusion.bias.zero_()


def build_network(config: NetworkConfig) -> ChangeDetectionNetwork:
    config.validate()
    net = ChangeDetectionNetwork(config)
    init_weights(net, config.seed)
    return net
