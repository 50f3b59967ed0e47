"""Encoders, heads, the UNet-style encoder-decoder and the MoCo momentum pair.

Canonical parameter prefixes are shared by every model so weights move between
stages by name: ``encoder.``, ``decoder.``, ``seg_head.`` and ``head.``.
"""

from __future__ import annotations

import copy
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

logger = logging.getLogger(__name__)

BACKBONES = ("tinyCnn", "denseNet121", "resNet50", "mobileNet", "efficientNet")


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    name: str = "tinyCnn"
    feature_dim: int | None = 64
    pretrained_weights: str | None = None


class MultiTaskOutput(NamedTuple):
    class_logits: torch.Tensor | None
    seg_logits: torch.Tensor


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
    )


class Encoder(nn.Module):
    """Base class: ``forward`` returns feature maps ordered shallow to deep."""

    stage_names: list[str]
    channels: list[int]
    reduction: int
    name: str

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        return self(x)[-1].mean(dim=(2, 3))


class TinyCNN(Encoder):
    """Four conv blocks at strides 1, 2, 4, 8; the desk-scale backbone."""

    def __init__(self, feature_dim: int = 64, in_channels: int = 1):
        super().__init__()
        if feature_dim < 4 or feature_dim > 128:
            raise ConfigError(f"tinyCnn feature_dim must be in [4, 128], got {feature_dim}")
        widths = [max(feature_dim // 4, 1), max(feature_dim // 2, 1), max(3 * feature_dim // 4, 1), feature_dim]
        self.block1 = conv_block(in_channels, widths[0])
        self.block2 = conv_block(widths[0], widths[1])
        self.block3 = conv_block(widths[1], widths[2])
        self.block4 = conv_block(widths[2], widths[3])
        self.stage_names = ["block1", "block2", "block3", "block4"]
        self.channels = widths
        self.reduction = 8
        self.name = "tinyCnn"

    def forward(self, x):
        f1 = self.block1(x)
        f2 = self.block2(F.max_pool2d(f1, 2))
        f3 = self.block3(F.max_pool2d(f2, 2))
        f4 = self.block4(F.max_pool2d(f3, 2))
        return [f1, f2, f3, f4]


class StagedEncoder(Encoder):
    """Torchvision trunk cut into five stages; grayscale input is tiled to RGB."""

    def __init__(self, name: str, stages: list[nn.Module], channels: list[int]):
        super().__init__()
        self.stage_names = [f"stage{i + 1}" for i in range(len(stages))]
        for n, stage in zip(self.stage_names, stages):
            self.add_module(n, stage)
        self.channels = channels
        self.reduction = 32
        self.name = name

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        feats = []
        for n in self.stage_names:
            x = getattr(self, n)(x)
            feats.append(x)
        return feats


def _torchvision_encoder(name: str) -> StagedEncoder:
    if name == "denseNet121":
        f = torchvision.models.densenet121(weights=None).features
        stages = [
            nn.Sequential(f.conv0, f.norm0, f.relu0),
            nn.Sequential(f.pool0, f.denseblock1),
            nn.Sequential(f.transition1, f.denseblock2),
            nn.Sequential(f.transition2, f.denseblock3),
            nn.Sequential(f.transition3, f.denseblock4, f.norm5, nn.ReLU()),
        ]
        channels = [64, 256, 512, 1024, 1024]
    elif name == "resNet50":
        r = torchvision.models.resnet50(weights=None)
        stages = [
            nn.Sequential(r.conv1, r.bn1, r.relu),
            nn.Sequential(r.maxpool, r.layer1),
            r.layer2,
            r.layer3,
            r.layer4,
        ]
        channels = [64, 256, 512, 1024, 2048]
    elif name == "mobileNet":
        f = torchvision.models.mobilenet_v2(weights=None).features
        stages = [f[0:2], f[2:4], f[4:7], f[7:14], f[14:19]]
        channels = [16, 24, 32, 96, 1280]
    elif name == "efficientNet":
        f = torchvision.models.efficientnet_b0(weights=None).features
        stages = [f[0:2], f[2:3], f[3:4], f[4:6], f[6:9]]
        channels = [16, 24, 40, 112, 1280]
    else:  # pragma: no cover - guarded by build_backbone
        raise ConfigError(name)
    return StagedEncoder(name, stages, channels)


def build_backbone(config: BackboneConfig) -> Encoder:
    """Build an encoder; loads ``pretrained_weights`` (a checkpoint path) if set."""
    if config.name == "tinyCnn":
        enc = TinyCNN(config.feature_dim or 64)
    elif config.name in BACKBONES:
        enc = _torchvision_encoder(config.name)
        if config.feature_dim is not None and config.feature_dim != enc.feature_dim:
            raise ConfigError(
                f"{config.name} has feature_dim {enc.feature_dim}, config asks for {config.feature_dim}"
            )
    else:
        raise ConfigError(f"unknown backbone {config.name!r}; expected one of {BACKBONES}")
    if config.pretrained_weights:
        state, _ = load_checkpoint(config.pretrained_weights)
        load_encoder_state(enc, state)
    return enc


class ClassifierHead(nn.Sequential):
    def __init__(self, feature_dim: int, num_classes: int = 4, dropout: float = 0.2):
        super().__init__(nn.Dropout(dropout), nn.Linear(feature_dim, num_classes))


class Classifier(nn.Module):
    """Encoder -> global average pool -> dropout -> linear."""

    def __init__(self, encoder: Encoder, num_classes: int = 4, dropout: float = 0.2):
        super().__init__()
        self.encoder = encoder
        self.head = ClassifierHead(encoder.feature_dim, num_classes, dropout)

    def features(self, x):
        return self.encoder.pooled(x)

    def forward(self, x):
        return self.head(self.features(x))


class UNetDecoder(nn.Module):
    def __init__(self, channels: list[int]):
        super().__init__()
        self.blocks = nn.ModuleList()
        cin = channels[-1]
        for skip in reversed(channels[:-1]):
            self.blocks.append(conv_block(cin + skip, skip))
            cin = skip
        self.out_channels = cin

    def forward(self, feats: list[torch.Tensor], out_size) -> torch.Tensor:
        x = feats[-1]
        for block, skip in zip(self.blocks, reversed(feats[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        if tuple(x.shape[-2:]) != tuple(out_size):
            x = F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
        return x


class EncoderDecoder(nn.Module):
    """UNet with a shared encoder, a 1-channel pixel head and an optional class head.

    The pixel head gives segmentation logits, or the reconstruction when used for
    inpainting (``with_classifier=False``). Inputs whose sides are not multiples
    of the encoder's reduction are zero-padded bottom/right and the pixel output
    is cropped back.
    """

    def __init__(self, encoder: Encoder, num_classes: int = 4, dropout: float = 0.2, with_classifier: bool = True):
        super().__init__()
        self.encoder = encoder
        self.decoder = UNetDecoder(encoder.channels)
        self.seg_head = nn.Conv2d(self.decoder.out_channels, 1, kernel_size=1)
        self.head = ClassifierHead(encoder.feature_dim, num_classes, dropout) if with_classifier else None

    def forward(self, x) -> MultiTaskOutput:
        h, w = x.shape[-2:]
        r = self.encoder.reduction
        ph, pw = (-h) % r, (-w) % r
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        feats = self.encoder(x)
        seg = self.seg_head(self.decoder(feats, x.shape[-2:]))[..., :h, :w]
        logits = None
        if self.head is not None:
            logits = self.head(feats[-1].mean(dim=(2, 3)))
        return MultiTaskOutput(logits, seg)


def class_logits(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    out = model(x)
    if isinstance(out, MultiTaskOutput):
        if out.class_logits is None:
            raise ValueError("model has no classification head")
        return out.class_logits
    return out


# --------------------------------------------------------------------------- MoCo


@torch.no_grad()
def momentum_update_(key: nn.Module, query: nn.Module, m: float) -> None:
    """In place ``theta_k <- m * theta_k + (1 - m) * theta_q`` over matching parameters."""
    for pk, pq in zip(key.parameters(), query.parameters()):
        if pk.shape != pq.shape:
            raise ValueError("query and key parameters are not shape-congruent")
        pk.mul_(m).add_(pq.detach(), alpha=1.0 - m)


class MomentumPair(nn.Module):
    """Query encoder, its momentum copy and a FIFO queue of negative keys.

    Embeddings are L2-normalised pooled features of the last encoder stage,
    optionally passed through a linear projection first.
    """

    def __init__(
        self,
        encoder: Encoder,
        queue_size: int = 4096,
        momentum: float = 0.999,
        temperature: float = 0.2,
        proj_dim: int | None = None,
    ):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {momentum}")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.encoder = encoder
        self.proj = nn.Linear(encoder.feature_dim, proj_dim) if proj_dim else nn.Identity()
        self.key_encoder = copy.deepcopy(encoder)
        self.key_proj = copy.deepcopy(self.proj)
        for p in self.key_parameters():
            p.requires_grad_(False)
        self.momentum = momentum
        self.temperature = temperature
        dim = proj_dim or encoder.feature_dim
        self.register_buffer("queue", F.normalize(torch.randn(queue_size, dim), dim=1))
        self.register_buffer("queue_ptr", torch.zeros((), dtype=torch.long))
        self.register_buffer("queue_filled", torch.zeros((), dtype=torch.long))

    @property
    def queue_size(self) -> int:
        return self.queue.shape[0]

    def query_parameters(self):
        yield from self.encoder.parameters()
        yield from self.proj.parameters()

    def key_parameters(self):
        yield from self.key_encoder.parameters()
        yield from self.key_proj.parameters()

    def embed_query(self, x):
        return F.normalize(self.proj(self.encoder.pooled(x)), dim=1)

    @torch.no_grad()
    def embed_key(self, x):
        return F.normalize(self.key_proj(self.key_encoder.pooled(x)), dim=1)

    @torch.no_grad()
    def momentum_update(self) -> None:
        momentum_update_(self.key_encoder, self.encoder, self.momentum)
        momentum_update_(self.key_proj, self.proj, self.momentum)

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> None:
        """Ring-buffer insert at ``queue_ptr``; the pointer advances mod K."""
        b = keys.shape[0]
        if b > self.queue_size:
            raise ValueError(f"batch of {b} keys exceeds queue size {self.queue_size}")
        norms = keys.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            logger.debug("enqueue: keys not unit-norm, normalising")
            keys = F.normalize(keys, dim=1)
        ptr = int(self.queue_ptr)
        idx = (ptr + torch.arange(b)) % self.queue_size
        self.queue[idx] = keys.detach().to(self.queue.dtype)
        self.queue_ptr.fill_((ptr + b) % self.queue_size)
        self.queue_filled.fill_(min(int(self.queue_filled) + b, self.queue_size))

    def forward(self, view_q, view_k):
        return self.embed_query(view_q), self.embed_key(view_k)


# --------------------------------------------------------------------------- checkpoints


@dataclass
class CheckpointRef:
    path: str
    stage: str
    epoch: int
    config_hash: str
    meta: dict = field(default_factory=dict)


@dataclass
class TransferReport:
    matched: list[str]
    missing: list[str]
    unexpected: list[str]
    shape_mismatch: list[str]


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path: str | Path, state_dict: dict, meta: dict) -> CheckpointRef:
    """Write tensors to ``path`` and ``meta`` to a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in state_dict.items()}
    # saving through a buffer keeps the archive's internal root name fixed,
    # so identical tensors give identical bytes whatever the file is called
    buf = io.BytesIO()
    torch.save(state, buf)
    path.write_bytes(buf.getvalue())
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return CheckpointRef(str(path), meta.get("stage", ""), int(meta.get("epoch", 0)), meta.get("config_hash", ""), meta)


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.is_file() else {}
    return state, meta


def transfer_weights(model: nn.Module, state: dict, prefixes=("encoder.",)) -> TransferReport:
    """Copy tensors whose canonical name and shape match, restricted to ``prefixes``.

    Raises:
        CheckpointError: nothing matched.
    """
    own = model.state_dict()
    wanted = {k for k in own if k.startswith(tuple(prefixes))}
    offered = {k for k in state if k.startswith(tuple(prefixes))}
    matched, mismatch = [], []
    for k in sorted(wanted & offered):
        if own[k].shape == state[k].shape:
            matched.append(k)
        else:
            mismatch.append(f"{k}: {tuple(state[k].shape)} vs {tuple(own[k].shape)}")
    if not matched:
        raise CheckpointError(f"weight transfer matched no parameters for prefixes {list(prefixes)}")
    with torch.no_grad():
        for k in matched:
            own[k].copy_(state[k])
    report = TransferReport(matched, sorted(wanted - offered), sorted(offered - wanted), mismatch)
    if report.missing or report.shape_mismatch:
        logger.info("transfer: %d matched, %d missing, %d shape mismatches",
                    len(matched), len(report.missing), len(mismatch))
    return report


def load_encoder_state(encoder: Encoder, state: dict) -> None:
    """Strictly load ``encoder.*`` tensors into ``encoder``; lists every mismatch."""
    sub = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    own = encoder.state_dict()
    problems = [f"missing {k}" for k in own if k not in sub]
    problems += [f"unexpected {k}" for k in sub if k not in own]
    problems += [
        f"{k}: checkpoint {tuple(sub[k].shape)} vs model {tuple(own[k].shape)}"
        for k in own if k in sub and sub[k].shape != own[k].shape
    ]
    if problems:
        raise CheckpointError("incompatible encoder checkpoint:\n  " + "\n  ".join(problems))
    encoder.load_state_dict(sub)


def backbone_meta(config: BackboneConfig, encoder: Encoder) -> dict:
    meta = asdict(config)
    meta["feature_dim"] = encoder.feature_dim
    return meta
