"""Encoders, decoders, projection heads, weight transfer, and checkpoint I/O.

Every network is assembled from an encoder, an optional U-Net-style decoder,
and a head, exposed as the submodules ``encoder`` / ``decoder`` / ``head`` so
checkpoints can be partitioned into named parameter segments and transferred
segment by segment.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, TransferError, ValidationError


class Arch(str, Enum):
    UNET = "unet"
    RESNET18_UNET = "resnet18_unet"
    RESNET50_UNET = "resnet50_unet"


class HeadKind(str, Enum):
    NONE = "none"
    PROJ_2LAYER = "proj_2layer"
    PROJ_3LAYER_PLUS_PRED = "proj_3layer_plus_pred"


class Method(str, Enum):
    SIMCLR = "simclr"
    MOCO = "moco"
    SIMSIAM = "simsiam"
    NONE = "none"


class TransferScope(str, Enum):
    ENCODER_ONLY = "encoder_only"
    ENCODER_AND_DECODER = "encoder_and_decoder"


HEAD_FOR_METHOD = {
    Method.SIMCLR: HeadKind.PROJ_2LAYER,
    Method.MOCO: HeadKind.PROJ_2LAYER,
    Method.SIMSIAM: HeadKind.PROJ_3LAYER_PLUS_PRED,
}


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description shared by the SSL and segmentation builders."""

    arch: Arch
    input_size: int
    head: HeadKind
    embedding_dim: int = 128
    base_width: int = 64
    depth: int = 4
    pretrain_decoder: bool | None = None  # None: full U-Net for UNET, encoder-only otherwise

    def __post_init__(self):
        if self.embedding_dim <= 0:
            raise ValidationError(f"embedding_dim must be positive, got {self.embedding_dim}")
        if self.input_size < 2**self.depth:
            raise ConfigurationError(
                f"unsupported combination: input size {self.input_size} with depth {self.depth}"
            )

    @property
    def wants_decoder(self) -> bool:
        if self.pretrain_decoder is not None:
            return self.pretrain_decoder
        return self.arch is Arch.UNET


def ssl_spec(arch: Arch, input_size: int, method: Method, **kwargs) -> NetworkSpec:
    """Spec with the head implied by the training method."""
    if method not in HEAD_FOR_METHOD:
        raise ConfigurationError(f"no SSL head defined for method {method}")
    return NetworkSpec(arch=arch, input_size=input_size, head=HEAD_FOR_METHOD[method], **kwargs)


def segmentation_spec(arch: Arch, input_size: int, **kwargs) -> NetworkSpec:
    return NetworkSpec(arch=arch, input_size=input_size, head=HeadKind.NONE, **kwargs)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

class ConvBlock(nn.Module):
    """Two 3x3 conv + BN + ReLU layers."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class UNetEncoder(nn.Module):
    def __init__(self, in_channels: int = 3, width: int = 64, depth: int = 4):
        super().__init__()
        widths = [width * 2**i for i in range(depth)]
        self.stages = nn.ModuleList()
        ch = in_channels
        for w in widths:
            self.stages.append(ConvBlock(ch, w))
            ch = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ConvBlock(ch, ch * 2)
        self.skip_channels = widths
        self.out_channels = ch * 2

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = self.pool(x)
        return skips, self.bottleneck(x)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch: int, planes: int, stride: int = 1):
        super().__init__()
        out_ch = planes * self.expansion
        self.conv1 = nn.Conv2d(in_ch, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, planes: int, stride: int = 1):
        super().__init__()
        out_ch = planes * self.expansion
        self.conv1 = nn.Conv2d(in_ch, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = F.relu(self.bn2(self.conv2(out)), inplace=True)
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity, inplace=True)


class ResNetEncoder(nn.Module):
    """Residual encoder with a small-input stem: 3x3 stride-1 conv, no max-pool."""

    def __init__(self, block, layers: Sequence[int], in_channels: int = 3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 64, 3, padding=1, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
        )
        self.in_ch = 64
        self.layer1 = self._make_layer(block, 64, layers[0], stride=1)
        self.layer2 = self._make_layer(block, 128, layers[1], stride=2)
        self.layer3 = self._make_layer(block, 256, layers[2], stride=2)
        self.layer4 = self._make_layer(block, 512, layers[3], stride=2)
        self.skip_channels = [64 * block.expansion, 128 * block.expansion, 256 * block.expansion]
        self.out_channels = 512 * block.expansion

    def _make_layer(self, block, planes: int, count: int, stride: int):
        blocks = [block(self.in_ch, planes, stride)]
        self.in_ch = planes * block.expansion
        blocks.extend(block(self.in_ch, planes) for _ in range(count - 1))
        return nn.Sequential(*blocks)

    def forward(self, x):
        x = self.stem(x)
        c1 = self.layer1(x)
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        return [c1, c2, c3], c4


class DecoderStage(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.block = ConvBlock(in_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.block(torch.cat([x, skip], dim=1))


class UNetDecoder(nn.Module):
    """Upsample-and-concatenate decoder mirroring the encoder skip pyramid."""

    def __init__(self, bottom_channels: int, skip_channels: Sequence[int], max_width: int | None = None):
        super().__init__()
        stages = []
        ch = bottom_channels
        out_channels = []
        for skip_ch in reversed(skip_channels):
            out_ch = skip_ch if max_width is None else min(skip_ch, max_width)
            stages.append(DecoderStage(ch, skip_ch, out_ch))
            out_channels.append(out_ch)
            ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.out_channels = out_channels[-1]

    def forward(self, bottom, skips):
        x = bottom
        for stage, skip in zip(self.stages, reversed(skips)):
            x = stage(x, skip)
        return x


class Projection2Layer(nn.Module):
    def __init__(self, in_features: int, dim: int):
        super().__init__()
        hidden = max(in_features, dim)
        self.net = nn.Sequential(nn.Linear(in_features, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


class SiameseHead(nn.Module):
    """3-layer projection plus a bottlenecked 2-layer prediction head."""

    def __init__(self, in_features: int, dim: int):
        super().__init__()
        hidden = max(in_features, dim)
        self.project = nn.Sequential(
            nn.Linear(in_features, hidden, bias=False),
            nn.BatchNorm1d(hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden, bias=False),
            nn.BatchNorm1d(hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, dim, bias=False),
            nn.BatchNorm1d(dim),
        )
        bottleneck = max(dim // 4, 1)
        self.predict = nn.Sequential(
            nn.Linear(dim, bottleneck, bias=False),
            nn.BatchNorm1d(bottleneck),
            nn.ReLU(inplace=True),
            nn.Linear(bottleneck, dim),
        )

    def forward(self, x):
        z = self.project(x)
        return z, self.predict(z)


# ---------------------------------------------------------------------------
# Assembled networks
# ---------------------------------------------------------------------------

def _build_encoder(spec: NetworkSpec):
    if spec.arch is Arch.UNET:
        return UNetEncoder(width=spec.base_width, depth=spec.depth)
    if spec.arch is Arch.RESNET18_UNET:
        return ResNetEncoder(BasicBlock, [2, 2, 2, 2])
    if spec.arch is Arch.RESNET50_UNET:
        return ResNetEncoder(Bottleneck, [3, 4, 6, 3])
    raise ConfigurationError(f"unknown architecture {spec.arch}")


def _build_decoder(spec: NetworkSpec, encoder) -> UNetDecoder:
    max_width = None if spec.arch is Arch.UNET else 256
    return UNetDecoder(encoder.out_channels, encoder.skip_channels, max_width=max_width)


class SSLNetwork(nn.Module):
    """Backbone plus projection head producing contrastive embeddings.

    The head pools the final feature map (decoder output when the decoder is
    pre-trained, bottleneck otherwise) and maps it to the embedding space.
    Forward returns ``z`` for 2-layer heads and ``(z, p)`` for the siamese head.
    """

    def __init__(self, spec: NetworkSpec, method: Method):
        super().__init__()
        expected = HEAD_FOR_METHOD.get(method)
        if expected is None or spec.head is not expected:
            raise ConfigurationError(f"head {spec.head} does not match method {method}")
        self.spec = spec
        self.method = method
        self.encoder = _build_encoder(spec)
        self.decoder = _build_decoder(spec, self.encoder) if spec.wants_decoder else None
        in_features = self.decoder.out_channels if self.decoder else self.encoder.out_channels
        if spec.head is HeadKind.PROJ_2LAYER:
            self.head = Projection2Layer(in_features, spec.embedding_dim)
        else:
            self.head = SiameseHead(in_features, spec.embedding_dim)

    def pooled_features(self, x):
        skips, bottom = self.encoder(x)
        feature_map = self.decoder(bottom, skips) if self.decoder else bottom
        return feature_map.mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.pooled_features(x))

    def embed(self, x) -> torch.Tensor:
        """Normalized projection output, for diagnostics and key encoding."""
        out = self.forward(x)
        z = out[0] if isinstance(out, tuple) else out
        return F.normalize(z, dim=1)


class SegmentationNetwork(nn.Module):
    """Encoder-decoder network emitting per-pixel lesion logits [B, S, S]."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        if spec.head is not HeadKind.NONE:
            raise ConfigurationError("segmentation networks take head=NONE")
        self.spec = spec
        self.encoder = _build_encoder(spec)
        self.decoder = _build_decoder(spec, self.encoder)
        self.head = nn.Conv2d(self.decoder.out_channels, 1, 1)

    def forward(self, x):
        skips, bottom = self.encoder(x)
        logits = self.head(self.decoder(bottom, skips))
        return logits.squeeze(1)

    @torch.no_grad()
    def predict_mask(self, x, threshold: float = 0.5) -> torch.Tensor:
        self.eval()
        return (torch.sigmoid(self.forward(x)) >= threshold).to(torch.uint8)


def build_ssl_network(spec: NetworkSpec, method: Method) -> SSLNetwork:
    return SSLNetwork(spec, method)


def build_segmentation_network(spec: NetworkSpec) -> SegmentationNetwork:
    return SegmentationNetwork(spec)


def stack_images(arrays: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack [S, S, C] float arrays into a [B, C, S, S] float32 batch."""
    batch = np.stack([np.ascontiguousarray(a, dtype=np.float32) for a in arrays])
    return torch.from_numpy(batch).permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Checkpoints and weight transfer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainMeta:
    epochs: int
    final_loss: float | None
    seed: int
    extra: dict | None = None


@dataclass
class Checkpoint:
    """Named parameter segments plus the metadata needed to rebuild the network."""

    method: Method
    corpus_name: str
    spec: NetworkSpec
    segments: dict[str, dict[str, torch.Tensor]]
    train_meta: TrainMeta

    @property
    def arch(self) -> Arch:
        return self.spec.arch


def _detached_state(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone().cpu() for k, v in module.state_dict().items()}


def snapshot_segments(network: nn.Module) -> dict[str, dict[str, torch.Tensor]]:
    """Copy the encoder/decoder/head state of an assembled network."""
    segments = {"encoder": _detached_state(network.encoder)}
    if getattr(network, "decoder", None) is not None:
        segments["decoder"] = _detached_state(network.decoder)
    segments["head"] = _detached_state(network.head)
    return segments


def checkpoint_from_network(
    network: nn.Module, method: Method, corpus_name: str, train_meta: TrainMeta
) -> Checkpoint:
    return Checkpoint(
        method=method,
        corpus_name=corpus_name,
        spec=network.spec,
        segments=snapshot_segments(network),
        train_meta=train_meta,
    )


def _segments_checksum(segments: dict[str, dict[str, torch.Tensor]]) -> str:
    digest = hashlib.sha256()
    for seg_name in sorted(segments):
        for name in sorted(segments[seg_name]):
            tensor = segments[seg_name][name]
            digest.update(seg_name.encode())
            digest.update(name.encode())
            digest.update(str(tensor.dtype).encode())
            digest.update(np.ascontiguousarray(tensor.numpy()).tobytes())
    return digest.hexdigest()


def save_checkpoint(checkpoint: Checkpoint, path: Path | str) -> Path:
    """Single-file container with a shape manifest and a content checksum."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec_dict = dataclasses.asdict(checkpoint.spec)
    spec_dict["arch"] = checkpoint.spec.arch.value
    spec_dict["head"] = checkpoint.spec.head.value
    manifest = {
        seg: {name: list(t.shape) for name, t in tensors.items()}
        for seg, tensors in checkpoint.segments.items()
    }
    payload = {
        "method": checkpoint.method.value,
        "corpus_name": checkpoint.corpus_name,
        "spec": spec_dict,
        "segments": checkpoint.segments,
        "train_meta": dataclasses.asdict(checkpoint.train_meta),
        "manifest": manifest,
        "checksum": _segments_checksum(checkpoint.segments),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if _segments_checksum(payload["segments"]) != payload["checksum"]:
        raise ValidationError(f"checkpoint {path}: content checksum mismatch")
    spec_dict = dict(payload["spec"])
    spec_dict["arch"] = Arch(spec_dict["arch"])
    spec_dict["head"] = HeadKind(spec_dict["head"])
    return Checkpoint(
        method=Method(payload["method"]),
        corpus_name=payload["corpus_name"],
        spec=NetworkSpec(**spec_dict),
        segments=payload["segments"],
        train_meta=TrainMeta(**payload["train_meta"]),
    )


def _segment_mismatches(target: nn.Module, state: dict[str, torch.Tensor], seg: str) -> list[str]:
    current = target.state_dict()
    problems = []
    for name, tensor in current.items():
        if name not in state:
            problems.append(f"{seg}.{name} (missing from checkpoint)")
        elif tuple(state[name].shape) != tuple(tensor.shape):
            problems.append(
                f"{seg}.{name} (checkpoint {tuple(state[name].shape)} vs target {tuple(tensor.shape)})"
            )
    for name in state:
        if name not in current:
            problems.append(f"{seg}.{name} (unexpected in checkpoint)")
    return problems


def transfer_weights(
    checkpoint: Checkpoint, target: SegmentationNetwork, scope: TransferScope
) -> SegmentationNetwork:
    """Copy checkpoint encoder (and optionally decoder) weights into ``target``.

    Remaining parameters keep the target's fresh initialization; projection
    and prediction heads are never transferred.
    """
    if scope is TransferScope.ENCODER_AND_DECODER and "decoder" not in checkpoint.segments:
        raise TransferError(
            "scope encoder_and_decoder requires a checkpoint with a decoder segment"
        )
    wanted = ["encoder"] if scope is TransferScope.ENCODER_ONLY else ["encoder", "decoder"]
    problems = []
    for seg in wanted:
        problems.extend(_segment_mismatches(getattr(target, seg), checkpoint.segments[seg], seg))
    if problems:
        raise TransferError("incompatible segments: " + ", ".join(problems))
    for seg in wanted:
        getattr(target, seg).load_state_dict(checkpoint.segments[seg])
    return target


def restore_ssl_network(checkpoint: Checkpoint) -> SSLNetwork:
    """Rebuild a contrastive network with the checkpoint's exact weights."""
    if checkpoint.spec.head is HeadKind.NONE:
        raise TransferError("checkpoint holds a segmentation head, not a contrastive one")
    network = build_ssl_network(checkpoint.spec, checkpoint.method)
    for seg in checkpoint.segments:
        getattr(network, seg).load_state_dict(checkpoint.segments[seg])
    return network


def restore_segmentation_network(checkpoint: Checkpoint) -> SegmentationNetwork:
    """Rebuild a fine-tuned segmentation network from its full checkpoint."""
    if checkpoint.spec.head is not HeadKind.NONE:
        raise TransferError("checkpoint holds a contrastive head, not a segmentation network")
    network = build_segmentation_network(checkpoint.spec)
    problems = []
    for seg in ("encoder", "decoder", "head"):
        if seg not in checkpoint.segments:
            problems.append(f"{seg} (missing segment)")
            continue
        problems.extend(_segment_mismatches(getattr(network, seg), checkpoint.segments[seg], seg))
    if problems:
        raise TransferError("incompatible segments: " + ", ".join(problems))
    for seg in ("encoder", "decoder", "head"):
        getattr(network, seg).load_state_dict(checkpoint.segments[seg])
    return network


def _states_equal(module: nn.Module, state: dict[str, torch.Tensor]) -> bool:
    current = module.state_dict()
    if set(current) != set(state):
        return False
    return all(torch.equal(current[name].cpu(), state[name]) for name in current)


def transfer_audit(checkpoint: Checkpoint, network: nn.Module) -> dict[str, bool | None]:
    """Bit-equality of each named segment between checkpoint and network."""
    audit: dict[str, bool | None] = {
        "encoder_equal": _states_equal(network.encoder, checkpoint.segments["encoder"])
    }
    decoder = getattr(network, "decoder", None)
    if decoder is not None and "decoder" in checkpoint.segments:
        audit["decoder_equal"] = _states_equal(decoder, checkpoint.segments["decoder"])
    else:
        audit["decoder_equal"] = None
    return audit


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
