"""Encoder-decoder segmentation network with an EDAPP context head.

Layout: a four-stage encoder (strides 4/8/16/32), EDAPP on the stride-32 stage,
then three decoder steps that add 1x1-projected encoder features at strides
16, 8 and 4. A 1x1 classifier at stride 4 is upsampled x4 to input size.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .edapp import BN_MOMENTUM, EDAPP, EdappConfig, PreActConv

ENCODER_VARIANTS = ("resnet18", "tiny-test")
STAGES = ("stage1", "stage2", "stage3", "stage4")
STAGE_STRIDES = (4, 8, 16, 32)
OUTPUT_STRIDE = 32


@dataclass
class ModelConfig:
    num_classes: int = 3
    decoder_channels: int = 256
    edapp: EdappConfig = field(default_factory=EdappConfig)
    encoder_variant: str = "resnet18"
    pretrained_encoder: str | None = None

    def __post_init__(self):
        if isinstance(self.edapp, dict):
            self.edapp = EdappConfig(**self.edapp)
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.decoder_channels < 8:
            raise ValueError("decoder_channels must be at least 8")
        if self.encoder_variant not in ENCODER_VARIANTS:
            raise ValueError(f"unknown encoder variant {self.encoder_variant!r}")
        if self.edapp.in_channels != encoder_channels(self.encoder_variant)[-1]:
            raise ValueError(
                f"EDAPP in_channels={self.edapp.in_channels} does not match the "
                f"{self.encoder_variant} bottleneck width {encoder_channels(self.encoder_variant)[-1]}"
            )
        if self.edapp.out_channels != self.decoder_channels:
            raise ValueError("EDAPP out_channels must equal decoder_channels")

    @classmethod
    def resnet18(cls, num_classes=3, **kw) -> "ModelConfig":
        return cls(num_classes=num_classes, **kw)

    @classmethod
    def tiny(cls, num_classes=3, decoder_channels=32, branch_channels=16, **kw) -> "ModelConfig":
        return cls(
            num_classes=num_classes,
            decoder_channels=decoder_channels,
            edapp=EdappConfig(in_channels=128, branch_channels=branch_channels, out_channels=decoder_channels),
            encoder_variant="tiny-test",
            **kw,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["edapp"] = self.edapp.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["edapp"] = EdappConfig(**d.get("edapp", {}))
        return cls(**d)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("pretrained_encoder", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def encoder_channels(variant: str) -> tuple[int, ...]:
    return (64, 128, 256, 512) if variant == "resnet18" else (16, 32, 64, 128)


def _conv_bn_relu(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout, momentum=BN_MOMENTUM),
        nn.ReLU(inplace=True),
    )


class TinyEncoder(nn.Module):
    """Stride-2 stem plus four stages of two 3x3 conv blocks, each stage entered at stride 2."""

    def __init__(self, widths=(16, 32, 64, 128)):
        super().__init__()
        self.stem = _conv_bn_relu(3, widths[0], 2)
        cin = widths[0]
        for name, w in zip(STAGES, widths):
            setattr(self, name, nn.Sequential(_conv_bn_relu(cin, w, 2), _conv_bn_relu(w, w, 1)))
            cin = w

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for name in STAGES:
            x = getattr(self, name)(x)
            feats.append(x)
        return feats


class ResNet18Encoder(nn.Module):
    def __init__(self):
        super().__init__()
        net = torchvision.models.resnet18(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stage1, self.stage2 = net.layer1, net.layer2
        self.stage3, self.stage4 = net.layer3, net.layer4

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for name in STAGES:
            x = getattr(self, name)(x)
            feats.append(x)
        return feats


class DecoderStep(nn.Module):
    """Element-wise sum with a lateral feature, 3x3 conv block, bilinear x2."""

    def __init__(self, channels):
        super().__init__()
        self.conv = PreActConv(channels, channels, 3, padding=1)

    def forward(self, deep, lateral, upsample=True):
        if deep.shape != lateral.shape:
            raise ValueError(f"decoder inputs differ: deep {tuple(deep.shape)} vs lateral {tuple(lateral.shape)}")
        y = self.conv(deep + lateral)
        if upsample:
            y = F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=False)
        return y


class SegNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ResNet18Encoder() if cfg.encoder_variant == "resnet18" else TinyEncoder()
        chans = encoder_channels(cfg.encoder_variant)
        dc = cfg.decoder_channels
        self.laterals = nn.ModuleDict(
            {name: nn.Conv2d(c, dc, 1) for name, c in zip(STAGES[:3], chans[:3])}
        )
        self.edapp = EDAPP(cfg.edapp)
        self.decoder = nn.ModuleList(DecoderStep(dc) for _ in range(3))
        self.classifier = PreActConv(dc, cfg.num_classes, 1, bias=True)

    def lateral_project(self, feature: torch.Tensor, stage: str) -> torch.Tensor:
        if stage not in self.laterals:
            raise KeyError(f"no lateral projection registered for {stage!r}; have {sorted(self.laterals)}")
        return self.laterals[stage](feature)

    def decoder_step(self, idx: int, deep, lateral, upsample=True):
        return self.decoder[idx](deep, lateral, upsample)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise ValueError(
                f"input {h}x{w} is not divisible by {OUTPUT_STRIDE}; pad to "
                f"{-(-h // OUTPUT_STRIDE) * OUTPUT_STRIDE}x{-(-w // OUTPUT_STRIDE) * OUTPUT_STRIDE}"
            )
        s4, s8, s16, s32 = self.encoder(x)
        z = self.edapp(s32)
        z = F.interpolate(z, size=s16.shape[-2:], mode="bilinear", align_corners=False)
        z = self.decoder_step(0, z, self.lateral_project(s16, "stage3"))
        z = self.decoder_step(1, z, self.lateral_project(s8, "stage2"))
        # last step stays at stride 4 where the classifier runs
        z = self.decoder_step(2, z, self.lateral_project(s4, "stage1"), upsample=False)
        logits = self.classifier(z)
        return F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)


def _init_head(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(cfg: ModelConfig, rng_seed: int = 0) -> SegNet:
    """Construct the network with Kaiming-initialized weights under ``rng_seed``.

    The global torch RNG is left untouched. When ``cfg.pretrained_encoder`` names a
    tensor file, encoder weights are loaded from it afterwards.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng_seed)
        model = SegNet(cfg)
        _init_head(model)
    if cfg.pretrained_encoder:
        load_pretrained_encoder(model, cfg.pretrained_encoder)
    return model


_TORCHVISION_STAGE = {"layer1": "stage1", "layer2": "stage2", "layer3": "stage3", "layer4": "stage4"}
_TORCHVISION_STEM = {"conv1": "stem.0", "bn1": "stem.1"}


def _encoder_key(key: str) -> str | None:
    if key.startswith("encoder."):
        return key[len("encoder.") :]
    head, _, rest = key.partition(".")
    if head in _TORCHVISION_STAGE:
        return f"{_TORCHVISION_STAGE[head]}.{rest}"
    if head in _TORCHVISION_STEM:
        return f"{_TORCHVISION_STEM[head]}.{rest}"
    if head in ("stem",) or head in STAGES:
        return key
    return None  # e.g. the ImageNet fc layer


def load_pretrained_encoder(model: SegNet, path) -> None:
    """Load encoder weights from a tensor container or a torchvision-style state dict."""
    from .checkpoint import read_tensors

    if str(path).endswith((".pt", ".pth")):
        tensors = torch.load(path, map_location="cpu", weights_only=True)
    else:
        tensors, _ = read_tensors(path)
    state = model.encoder.state_dict()
    mapped = {}
    for key, value in tensors.items():
        k = _encoder_key(key)
        if k is not None:
            mapped[k] = value
    bad = [
        f"{k}: file {tuple(v.shape)} vs model {tuple(state[k].shape)}"
        for k, v in mapped.items()
        if k in state and tuple(v.shape) != tuple(state[k].shape)
    ]
    unknown = sorted(set(mapped) - set(state))
    missing = sorted(set(state) - set(mapped))
    if bad or unknown or missing:
        lines = bad + [f"{k}: not in encoder" for k in unknown] + [f"{k}: missing from file" for k in missing]
        raise ValueError("pretrained encoder mismatch:\n  " + "\n  ".join(lines))
    model.encoder.load_state_dict({k: v.to(state[k].dtype) for k, v in mapped.items()})


def param_groups(model: SegNet):
    """(encoder parameters, everything else) as two disjoint lists."""
    encoder, head = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (encoder if name.startswith("encoder.") else head).append(p)
    return encoder, head
