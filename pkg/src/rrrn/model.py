"""Two-stream region network with attention weighting and graph relation reasoning.

Data path, per sample: the vertical/horizontal flow crops of each region run
through twin CNN streams (shared architecture, independent parameters) and
are channel-concatenated into per-region feature maps. Every region then
passes its own squeeze block (conv -> channel avg/max pooling -> conv) to a
single-channel map; the stacked maps drive a shared two-layer MLP that emits
one sigmoid weight per region. Weighted, spatially pooled region vectors
become the nodes of a cosine-similarity graph with self connections, two
degree-normalized graph-convolution layers mix them, and the residual sum of
relational and weighted features is pooled and concatenated for the
classifier head. A second head shared across regions scores each region
vector alone; its per-region confidences feed the correlation loss.

Everything is deterministic given parameters and inputs (no dropout; batch
norm only in the RESNET18_STYLE backbone, evaluated in eval mode).
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F


class ModelError(Exception):
    pass


class ShapeMismatchError(ModelError):
    pass


class SingularDegreeError(ModelError):
    pass


class CheckpointFormatError(ModelError):
    pass


class BackboneInitError(ModelError):
    pass


class BackboneVariant(enum.Enum):
    TOY_CNN = "TOY_CNN"
    RESNET18_STYLE = "RESNET18_STYLE"


@dataclass(frozen=True)
class BackboneConfig:
    variant: BackboneVariant = BackboneVariant.TOY_CNN
    stream_channels: int = 8  # per-stream output channels (TOY_CNN)
    input_size: int = 32
    pretrained_init: bool = False

    def __post_init__(self):
        if self.stream_channels < 1 or self.input_size < 8:
            raise ValueError("stream_channels >= 1 and input_size >= 8 required")
        if self.feature_size < 1:
            raise ValueError(f"input_size {self.input_size} collapses to empty feature map")

    @property
    def stream_out_channels(self) -> int:
        return 512 if self.variant is BackboneVariant.RESNET18_STYLE else self.stream_channels

    @property
    def feature_channels(self) -> int:
        """Concatenated channel count C (always even: two equal streams)."""
        return 2 * self.stream_out_channels

    @property
    def feature_size(self) -> int:
        s = self.input_size
        if self.variant is BackboneVariant.RESNET18_STYLE:
            return s // 32
        for _ in range(3):  # three stride-2 convolutions
            s = (s + 1) // 2
        return s

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "stream_channels": self.stream_channels,
            "input_size": self.input_size,
            "pretrained_init": self.pretrained_init,
        }

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        return BackboneConfig(
            variant=BackboneVariant(d["variant"]),
            stream_channels=int(d["stream_channels"]),
            input_size=int(d["input_size"]),
            pretrained_init=bool(d["pretrained_init"]),
        )


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_regions: int = 6
    num_classes: int = 5
    reduction_ratio: int = 2

    def __post_init__(self):
        if not (1 <= self.reduction_ratio <= self.num_regions):
            raise ValueError("need 1 <= reduction_ratio <= num_regions")

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "num_regions": self.num_regions,
            "num_classes": self.num_classes,
            "reduction_ratio": self.reduction_ratio,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            backbone=BackboneConfig.from_dict(d["backbone"]),
            num_regions=int(d["num_regions"]),
            num_classes=int(d["num_classes"]),
            reduction_ratio=int(d["reduction_ratio"]),
        )


class ToyStream(nn.Module):
    """Three stride-2 conv+relu blocks; desk-scale stand-in for a deep trunk."""

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, channels, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.downsample = None

    def forward(self, x: Tensor) -> Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class ResNet18Stream(nn.Module):
    """18-layer residual trunk for single-channel flow components, no head."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = self._make_layer(64, 64, stride=1)
        self.layer2 = self._make_layer(64, 128, stride=2)
        self.layer3 = self._make_layer(128, 256, stride=2)
        self.layer4 = self._make_layer(256, 512, stride=2)

    @staticmethod
    def _make_layer(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
        return nn.Sequential(
            BasicBlock(in_ch, out_ch, stride=stride), BasicBlock(out_ch, out_ch)
        )

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.bn1(self.conv1(x)), inplace=True)
        x = self.maxpool(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)


def _make_stream(cfg: BackboneConfig) -> nn.Module:
    if cfg.variant is BackboneVariant.TOY_CNN:
        if cfg.pretrained_init:
            raise BackboneInitError("TOY_CNN has no pretrained weights")
        return ToyStream(cfg.stream_channels)
    stream = ResNet18Stream()
    if cfg.pretrained_init:
        _load_imagenet_weights(stream)
    return stream


def _load_imagenet_weights(stream: ResNet18Stream) -> None:
    try:
        from torchvision.models import ResNet18_Weights, resnet18
    except ImportError as exc:
        raise BackboneInitError("pretrained_init requires torchvision") from exc
    try:
        reference = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise BackboneInitError(f"could not fetch ImageNet weights: {exc}") from exc
    src = reference.state_dict()
    dst = stream.state_dict()
    for name, tensor in dst.items():
        if name == "conv1.weight":
            dst[name] = src[name].sum(dim=1, keepdim=True)  # RGB -> 1 channel
        elif name in src and src[name].shape == tensor.shape:
            dst[name] = src[name]
    stream.load_state_dict(dst)


class TwoStreamBackbone(nn.Module):
    """Twin trunks over the vertical/horizontal crops, channel-concatenated."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.vertical_stream = _make_stream(cfg)
        self.horizontal_stream = _make_stream(cfg)

    def forward(self, vertical: Tensor, horizontal: Tensor) -> Tensor:
        """(B, R, S, S) x 2 -> per-region feature maps (B, R, C, H, W)."""
        if vertical.shape != horizontal.shape or vertical.ndim != 4:
            raise ShapeMismatchError(
                f"expected matching (B, R, S, S) inputs, got "
                f"{tuple(vertical.shape)} / {tuple(horizontal.shape)}"
            )
        b, r, s, _ = vertical.shape
        vert = self.vertical_stream(vertical.reshape(b * r, 1, s, s))
        horz = self.horizontal_stream(horizontal.reshape(b * r, 1, s, s))
        feats = torch.cat([vert, horz], dim=1)
        return feats.reshape(b, r, feats.shape[1], feats.shape[2], feats.shape[3])


class RegionSqueeze(nn.Module):
    """One region's squeeze block: conv, channel avg/max pooling, fusing conv.

    Spatial resolution is preserved; output is a single-channel map.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.pre = nn.Conv2d(channels, channels, 3, padding=1)
        self.post = nn.Conv2d(2, 1, 3, padding=1)

    def forward(self, p: Tensor) -> Tensor:
        t = self.pre(p)
        pooled = torch.cat(
            [t.mean(dim=1, keepdim=True), t.amax(dim=1, keepdim=True)], dim=1
        )
        return self.post(pooled)


class RegionAttention(nn.Module):
    """One sigmoid weight per region from the stacked squeezed maps.

    Spatial average- and max-pooled descriptors go through a shared
    bottleneck MLP and are summed before the sigmoid. The final layer starts
    at zero so training begins with every region at weight 0.5.
    """

    def __init__(self, num_regions: int, reduction_ratio: int):
        super().__init__()
        hidden = -(-num_regions // reduction_ratio)  # ceil division
        self.mlp = nn.Sequential(
            nn.Linear(num_regions, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, num_regions),
        )
        nn.init.zeros_(self.mlp[2].weight)
        nn.init.zeros_(self.mlp[2].bias)

    def forward(self, psi: Tensor) -> Tensor:
        """(B, R, H, W) -> attention weights (B, R), each in (0, 1)."""
        if psi.ndim != 4:
            raise ShapeMismatchError(f"expected (B, R, H, W), got {tuple(psi.shape)}")
        avg = psi.mean(dim=(2, 3))
        mx = psi.amax(dim=(2, 3))
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))


def weight_regions(p: Tensor, alpha: Tensor) -> Tensor:
    """Scale each region map by its weight and average-pool spatially.

    (B, R, C, H, W) x (B, R) -> (B, R, C). Linear in alpha: doubling a weight
    doubles that region's vector.
    """
    if p.ndim != 5 or alpha.shape != p.shape[:2]:
        raise ShapeMismatchError(
            f"feature maps {tuple(p.shape)} do not match weights {tuple(alpha.shape)}"
        )
    return (p * alpha[:, :, None, None, None]).mean(dim=(3, 4))


class GraphResult(NamedTuple):
    similarity: Tensor  # (..., R, R), cosine with unit self-connections
    degree: Tensor  # (..., R) row sums
    degenerate: Tensor  # (..., R) bool, True where a zero vector was substituted


_ZERO_NORM_EPS = 1e-12


def build_graph(f: Tensor) -> GraphResult:
    """Cosine-similarity region graph with self connections.

    Node vectors are L2-normalized for the similarity only; zero vectors
    (fully occluded regions) are replaced by the uniform unit vector and
    flagged. The diagonal is set to exactly 1 and the degree is the row sum.
    """
    if f.ndim < 2:
        raise ShapeMismatchError(f"expected (..., R, C) node features, got {tuple(f.shape)}")
    norm = f.norm(dim=-1, keepdim=True)
    degenerate = norm.squeeze(-1) < _ZERO_NORM_EPS
    uniform = torch.full_like(f, 1.0 / float(f.shape[-1]) ** 0.5)
    unit = torch.where(degenerate.unsqueeze(-1), uniform, f / norm.clamp_min(_ZERO_NORM_EPS))
    cos = unit @ unit.transpose(-1, -2)
    eye = torch.eye(f.shape[-2], dtype=f.dtype, device=f.device)
    similarity = cos * (1.0 - eye) + eye
    return GraphResult(similarity=similarity, degree=similarity.sum(dim=-1), degenerate=degenerate)


def gcn_layer(p: Tensor, similarity: Tensor, degree: Tensor, weight: Tensor) -> Tensor:
    """relu(D^-1 * similarity * P * W) for one propagation layer."""
    if torch.any(degree.abs() < 1e-8):
        raise SingularDegreeError("graph degree matrix is singular")
    mixed = (similarity @ p) / degree.unsqueeze(-1)
    return F.relu(mixed @ weight)


def gcn_forward(
    p0: Tensor, similarity: Tensor, degree: Tensor, w0: Tensor, w1: Tensor
) -> Tensor:
    """Two degree-normalized propagation layers over the region graph."""
    return gcn_layer(gcn_layer(p0, similarity, degree, w0), similarity, degree, w1)


class AggregateFeature(NamedTuple):
    region_component: Tensor  # (B, C) pooled weighted region features
    relation_component: Tensor  # (B, C) pooled residual relational features
    combined: Tensor  # (B, 2C)


def aggregate(f: Tensor, relational: Tensor) -> AggregateFeature:
    """Per-region residual sum, then mean-pool both branches and concatenate."""
    if f.shape != relational.shape:
        raise ShapeMismatchError(
            f"weighted {tuple(f.shape)} vs relational {tuple(relational.shape)}"
        )
    residual = relational + f
    region_component = f.mean(dim=-2)
    relation_component = residual.mean(dim=-2)
    return AggregateFeature(
        region_component=region_component,
        relation_component=relation_component,
        combined=torch.cat([region_component, relation_component], dim=-1),
    )


class ModelOutput(NamedTuple):
    logits: Tensor  # (B, classes) from the aggregated feature
    region_logits: Tensor  # (B, R, classes) from the shared region head
    attention: Tensor  # (B, R)


@dataclass
class NetworkState:
    """Every intermediate of one forward pass, for inspection and tests."""

    features: Tensor  # (B, R, C, H, W)
    squeezed: Tensor  # (B, R, 1, H, W)
    stacked_maps: Tensor  # (B, R, H, W)
    attention: Tensor  # (B, R)
    weighted: Tensor  # (B, R, C)
    similarity: Tensor
    degree: Tensor
    degenerate: Tensor
    hidden_nodes: Tensor  # (B, R, C) after the first propagation layer
    relational: Tensor  # (B, R, C) after the second
    aggregatef: AggregateFeature
    logits: Tensor
    region_logits: Tensor


class RRRN(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        channels = cfg.backbone.feature_channels
        self.backbone = TwoStreamBackbone(cfg.backbone)
        self.squeeze_blocks = nn.ModuleList(
            RegionSqueeze(channels) for _ in range(cfg.num_regions)
        )
        self.attention = RegionAttention(cfg.num_regions, cfg.reduction_ratio)
        self.gcn_w0 = nn.Linear(channels, channels, bias=False)
        self.gcn_w1 = nn.Linear(channels, channels, bias=False)
        self.main_head = nn.Linear(2 * channels, cfg.num_classes)
        self.region_head = nn.Linear(channels, cfg.num_classes)

    def forward_state(self, vertical: Tensor, horizontal: Tensor) -> NetworkState:
        cfg = self.config
        if vertical.shape[1] != cfg.num_regions:
            raise ShapeMismatchError(
                f"model built for {cfg.num_regions} regions, got {vertical.shape[1]}"
            )
        features = self.backbone(vertical, horizontal)
        squeezed = torch.stack(
            [self.squeeze_blocks[k](features[:, k]) for k in range(cfg.num_regions)],
            dim=1,
        )
        stacked = squeezed.squeeze(2)
        attention = self.attention(stacked)
        weighted = weight_regions(features, attention)
        graph = build_graph(weighted)
        hidden = gcn_layer(weighted, graph.similarity, graph.degree, self.gcn_w0.weight.T)
        relational = gcn_layer(hidden, graph.similarity, graph.degree, self.gcn_w1.weight.T)
        agg = aggregate(weighted, relational)
        return NetworkState(
            features=features,
            squeezed=squeezed,
            stacked_maps=stacked,
            attention=attention,
            weighted=weighted,
            similarity=graph.similarity,
            degree=graph.degree,
            degenerate=graph.degenerate,
            hidden_nodes=hidden,
            relational=relational,
            aggregatef=agg,
            logits=self.main_head(agg.combined),
            region_logits=self.region_head(weighted),
        )

    def forward(self, vertical: Tensor, horizontal: Tensor) -> ModelOutput:
        state = self.forward_state(vertical, horizontal)
        return ModelOutput(
            logits=state.logits,
            region_logits=state.region_logits,
            attention=state.attention,
        )


def build_model(config: ModelConfig | None = None, seed: int = 0) -> RRRN:
    """Construct a model with deterministic parameter initialization.

    Convolutions and affine layers keep torch's fan-in uniform init; the
    attention MLP's final layer is zeroed (see RegionAttention).
    """
    torch.manual_seed(seed)
    return RRRN(config)


# ---------------------------------------------------------------------------
# checkpoint container: versioned binary of named tensors + JSON header

_CKPT_MAGIC = b"RRNC"
_CKPT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.int64: "<i8"}
_NP_DTYPES = {"<f4": np.float32, "<i8": np.int64}


def save_checkpoint(
    path: Path | str,
    model: RRRN,
    extra: Optional[dict] = None,
) -> None:
    """Write model parameters plus a JSON training-state header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {"model_config": model.config.to_dict(), "extra": extra or {}},
        sort_keys=True,
    ).encode()
    state = model.state_dict()
    with path.open("wb") as fh:
        fh.write(struct.pack("<4sI", _CKPT_MAGIC, _CKPT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            if tensor.dtype not in _DTYPES:
                raise CheckpointFormatError(f"{name}: unsupported dtype {tensor.dtype}")
            dtype_code = _DTYPES[tensor.dtype].encode()
            name_b = name.encode()
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", len(dtype_code)))
            fh.write(dtype_code)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.detach().cpu().numpy().astype(_NP_DTYPES[_DTYPES[tensor.dtype]]).tobytes())


def load_checkpoint(path: Path | str) -> tuple[RRRN, dict]:
    """Rebuild the model from a checkpoint; returns (model, extra header)."""
    path = Path(path)
    raw = path.read_bytes()
    off = 0

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    magic, version = take("<4sI")
    if magic != _CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != _CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    (header_len,) = take("<I")
    header = json.loads(raw[off : off + header_len].decode())
    off += header_len
    config = ModelConfig.from_dict(header["model_config"])
    (count,) = take("<I")
    state: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = raw[off : off + name_len].decode()
        off += name_len
        (dtype_len,) = take("<B")
        dtype_code = raw[off : off + dtype_len].decode()
        off += dtype_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        np_dtype = _NP_DTYPES.get(dtype_code)
        if np_dtype is None:
            raise CheckpointFormatError(f"{path}: unknown dtype {dtype_code!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dtype).itemsize if ndim else np.dtype(np_dtype).itemsize
        arr = np.frombuffer(raw, dtype=np_dtype, count=max(1, int(np.prod(shape, dtype=np.int64))) if ndim else 1, offset=off)
        off += nbytes
        state[name] = torch.from_numpy(arr.reshape(shape).copy())
    model = RRRN(config)
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, header["extra"]
