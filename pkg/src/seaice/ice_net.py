"""Truncated ResNet18 encoder + ASPP decoder for two-class SAR segmentation.

Encoder module names mirror torchvision's ``resnet18`` (``conv1``, ``bn1``,
``layer1`` ... ``layer4``) so an ImageNet ResNet18 state dict can be loaded
into the encoder directly; see :func:`initialize`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

STAGE_WIDTHS = (64, 128, 256, 512)


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int = 3
    num_classes: int = 2
    encoder_stages: int = 3
    aspp_rates: tuple = (6, 12, 18)
    aspp_channels: int = 128
    include_image_pooling_branch: bool = True

    def __post_init__(self):
        object.__setattr__(self, "aspp_rates", tuple(int(r) for r in self.aspp_rates))
        if self.in_channels != 3:
            raise ValueError("in_channels must be 3 (HH, HV, incidence angle)")
        if not 1 <= self.encoder_stages <= 4:
            raise ValueError(f"encoder_stages must be in 1..4, got {self.encoder_stages}")
        if not self.aspp_rates or any(b <= a for a, b in zip(self.aspp_rates, self.aspp_rates[1:])):
            raise ValueError(f"aspp_rates must be non-empty and strictly increasing, got {self.aspp_rates}")
        if any(r < 1 for r in self.aspp_rates):
            raise ValueError("aspp_rates must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.aspp_channels < 1:
            raise ValueError("aspp_channels must be positive")

    @property
    def output_stride(self) -> int:
        return 2 ** (self.encoder_stages + 1)

    @property
    def encoder_channels(self) -> int:
        return STAGE_WIDTHS[self.encoder_stages - 1]

    def to_json(self) -> dict:
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        return d

    @classmethod
    def from_json(cls, obj) -> "ModelSpec":
        return cls(**obj)


class InitKind(str, Enum):
    RANDOM = "random"
    PRETRAINED_ENCODER = "pretrained"


@dataclass(frozen=True)
class InitStrategy:
    kind: InitKind = InitKind.RANDOM
    seed: int = 0
    pretrained_source: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", InitKind(self.kind))
        if (self.kind is InitKind.PRETRAINED_ENCODER) != (self.pretrained_source is not None):
            raise ValueError("pretrained_source is required for, and only for, PRETRAINED_ENCODER")


# --------------------------------------------------------------------------
# modules


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNet18Encoder(nn.Module):
    """Stem (7x7/2 conv, BN, ReLU, 3x3/2 max-pool) and the first ``stages`` residual stages."""

    def __init__(self, in_channels=3, stages=3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.stages = stages
        in_ch = 64
        for i in range(stages):
            out_ch = STAGE_WIDTHS[i]
            stride = 1 if i == 0 else 2
            self.add_module(f"layer{i + 1}", nn.Sequential(BasicBlock(in_ch, out_ch, stride), BasicBlock(out_ch, out_ch)))
            in_ch = out_ch

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        for i in range(self.stages):
            x = getattr(self, f"layer{i + 1}")(x)
        return x


def _conv_bn_relu(in_ch, out_ch, kernel, dilation=1):
    pad = 0 if kernel == 1 else dilation
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ImagePooling(nn.Module):
    # no normalization layer: a 1x1 pooled map cannot be batch-normalized at batch size 1
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        size = x.shape[-2:]
        y = self.relu(self.conv(F.adaptive_avg_pool2d(x, 1)))
        return y.expand(-1, -1, *size)


class ASPP(nn.Module):
    def __init__(self, in_ch, out_ch, rates, image_pooling=True):
        super().__init__()
        branches = [_conv_bn_relu(in_ch, out_ch, 1)]
        branches += [_conv_bn_relu(in_ch, out_ch, 3, r) for r in rates]
        if image_pooling:
            branches.append(ImagePooling(in_ch, out_ch))
        self.branches = nn.ModuleList(branches)
        self.project = _conv_bn_relu(out_ch * len(branches), out_ch, 1)

    def forward(self, x):
        return self.project(torch.cat([b(x) for b in self.branches], dim=1))


class IceNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.encoder = ResNet18Encoder(spec.in_channels, spec.encoder_stages)
        self.decoder = nn.Sequential()
        self.decoder.add_module(
            "aspp",
            ASPP(spec.encoder_channels, spec.aspp_channels, spec.aspp_rates, spec.include_image_pooling_branch),
        )
        self.decoder.add_module("classifier", nn.Conv2d(spec.aspp_channels, spec.num_classes, 1))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected input (B, {self.spec.in_channels}, H, W), got {tuple(x.shape)}")
        if min(x.shape[-2:]) < 32:
            raise ValueError(f"input must be at least 32x32, got {tuple(x.shape[-2:])}")
        logits = self.decoder(self.encoder(x))
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)

    def parameter_groups(self) -> dict[str, list[str]]:
        groups = {"encoder": [], "decoder": []}
        for name, _ in self.named_parameters():
            groups[name.split(".", 1)[0]].append(name)
        return groups


def build_model(spec: ModelSpec | None = None) -> IceNet:
    return IceNet(spec or ModelSpec())


def forward(model: IceNet, batch: torch.Tensor) -> torch.Tensor:
    return model(batch)


def predict_classes(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over classes; ties resolve to the lower index (water)."""
    # torch.argmax returns the first maximal index
    return logits.argmax(dim=1)


def count_trainable_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# --------------------------------------------------------------------------
# initialization


def load_encoder_weights(path) -> dict[str, torch.Tensor]:
    """Read a tensor dictionary, accepting plain ResNet keys or ``encoder.``-prefixed ones."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state and isinstance(state["state_dict"], dict):
        state = state["state_dict"]
    if any(k.startswith("encoder.") for k in state):
        state = {k[len("encoder.") :]: v for k, v in state.items() if k.startswith("encoder.")}
    return state


def initialize(model: IceNet, strategy: InitStrategy) -> IceNet:
    """Reset every layer to PyTorch's default init under ``strategy.seed``.

    For ``PRETRAINED_ENCODER`` the encoder tensors (weights and BN running
    statistics) are then overwritten verbatim from ``pretrained_source``.
    Nothing is frozen.
    """
    source = None
    if strategy.kind is InitKind.PRETRAINED_ENCODER:
        source = load_encoder_weights(strategy.pretrained_source)
        expected = model.encoder.state_dict()
        missing = [k for k in expected if k not in source]
        if missing:
            raise KeyError(f"pretrained weights lack encoder tensor(s): {', '.join(missing[:5])}")
        for k, v in expected.items():
            if tuple(source[k].shape) != tuple(v.shape):
                raise ValueError(f"pretrained tensor {k!r} has shape {tuple(source[k].shape)}, expected {tuple(v.shape)}")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(strategy.seed)
        for module in model.modules():
            if hasattr(module, "reset_parameters"):
                module.reset_parameters()
            if isinstance(module, nn.modules.batchnorm._BatchNorm):
                module.reset_running_stats()

    if source is not None:
        with torch.no_grad():
            for k, v in model.encoder.state_dict().items():
                v.copy_(source[k])
    for p in model.parameters():
        p.requires_grad_(True)
    return model


def encoder_weight_schema(spec: ModelSpec | None = None) -> dict[str, list[int]]:
    """Expected key -> shape mapping of a pretrained encoder weight file."""
    enc = ResNet18Encoder(3, (spec or ModelSpec()).encoder_stages)
    return {k: list(v.shape) for k, v in enc.state_dict().items()}


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointMeta:
    spec: dict
    strategy: dict
    seed: int
    epoch: int
    val_loss: float
    extra: dict = field(default_factory=dict)


def save_checkpoint(model: IceNet, path, strategy: InitStrategy, seed: int, epoch: int, val_loss: float, **extra):
    path = Path(path)
    torch.save(model.state_dict(), path)
    meta = CheckpointMeta(
        spec=model.spec.to_json(),
        strategy={"kind": strategy.kind.value, "seed": strategy.seed, "pretrained_source": strategy.pretrained_source},
        seed=seed,
        epoch=epoch,
        val_loss=float(val_loss),
        extra=extra,
    )
    path.with_suffix(".json").write_text(json.dumps(asdict(meta), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> tuple[IceNet, CheckpointMeta]:
    """Rebuild a model from a checkpoint and its JSON sidecar, in evaluation mode."""
    path = Path(path)
    meta = CheckpointMeta(**json.loads(path.with_suffix(".json").read_text()))
    spec = ModelSpec.from_json(meta.spec)
    if expected_spec is not None and expected_spec != spec:
        diff = [k for k in spec.to_json() if spec.to_json()[k] != expected_spec.to_json()[k]]
        raise ValueError(f"checkpoint {path.name} spec differs from the configured spec in: {', '.join(diff)}")
    model = build_model(spec)
    state = torch.load(path, map_location="cpu", weights_only=True)
    expected = model.state_dict()
    bad = sorted(set(expected) ^ set(state)) + [
        k for k in expected if k in state and tuple(state[k].shape) != tuple(expected[k].shape)
    ]
    if bad:
        raise ValueError(f"checkpoint {path.name} does not match its spec; mismatched tensors: {', '.join(bad[:5])}")
    model.load_state_dict(state)
    model.eval()
    return model, meta
