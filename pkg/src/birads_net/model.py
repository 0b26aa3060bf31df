"""Multitask network: shared convolutional encoder, BI-RADS descriptor heads,
margin sub-type branch, likelihood regression branch and tumor-class branch."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .lexicon import DESCRIPTOR_ARITY, DESCRIPTOR_NAMES, LEXICON_VERSION, TASK_NAMES

CHECKPOINT_FORMAT_VERSION = 1
ARCHIVE_FORMAT = "birads-net-tensors"

VGG16_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")
MINI_LAYOUT = (8, "M", 16, "M")

# Optional branches; the tumor-class branch is always present.
ALL_BRANCHES = ("shape", "orientation", "margin", "echo", "posterior", "likelihood")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "vgg16_encoder"
    pretrained_weights: Optional[str] = None
    trainable: bool = True
    # channel widths are divided by this; 1 gives the standard VGG-16 encoder
    width_divisor: int = 1

    def __post_init__(self):
        if self.kind not in ("vgg16_encoder", "mini"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.width_divisor < 1:
            raise ValueError("width_divisor must be >= 1")

    @property
    def layout(self) -> tuple:
        base = VGG16_LAYOUT if self.kind == "vgg16_encoder" else MINI_LAYOUT
        return tuple(v if v == "M" else max(1, v // self.width_divisor) for v in base)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    input_size: int = 256
    head_hidden: int = 256
    fusion_hidden: int = 64
    dropout: float = 0.5
    branches: tuple[str, ...] = ALL_BRANCHES

    def __post_init__(self):
        unknown = set(self.branches) - set(ALL_BRANCHES)
        if unknown:
            raise ValueError(f"unknown branches: {sorted(unknown)}")
        # canonical order regardless of how the caller listed them
        object.__setattr__(self, "branches", tuple(b for b in ALL_BRANCHES if b in self.branches))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branches"] = list(self.branches)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["backbone"] = BackboneConfig(**data.get("backbone", {}))
        if "branches" in data:
            data["branches"] = tuple(data["branches"])
        return cls(**data)


@dataclass
class ModelOutputs:
    """Per-task predictions for a batch; absent branches are ``None``."""

    shape: Optional[torch.Tensor]
    orientation: Optional[torch.Tensor]
    margin: Optional[torch.Tensor]
    echo: Optional[torch.Tensor]
    posterior: Optional[torch.Tensor]
    subtypes: Optional[torch.Tensor]  # B x 4, sigmoid
    likelihood: Optional[torch.Tensor]  # B
    tumor: torch.Tensor  # B x 2

    def __len__(self) -> int:
        return self.tumor.shape[0]

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def select(self, index) -> "ModelOutputs":
        return ModelOutputs(**{k: None if v is None else v[index] for k, v in self.as_dict().items()})

    def detach(self) -> "ModelOutputs":
        return ModelOutputs(**{k: None if v is None else v.detach() for k, v in self.as_dict().items()})

    @property
    def malignant_probability(self) -> torch.Tensor:
        return self.tumor[:, 1]


def make_encoder(layout) -> tuple[nn.Sequential, int]:
    """VGG-style conv stack; indices line up with torchvision's ``features``."""
    layers: list[nn.Module] = []
    channels = 3
    for v in layout:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers += [nn.Conv2d(channels, v, 3, padding=1), nn.ReLU(inplace=True)]
            channels = v
    return nn.Sequential(*layers), channels


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.features, self.out_channels = make_encoder(config.layout)
        self.n_pools = sum(1 for v in config.layout if v == "M")
        # same scheme as torchvision's VGG; the default init stalls a 13-layer
        # plain conv stack trained from scratch
        for m in self.features:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


class DescriptorHead(nn.Module):
    def __init__(self, in_features: int, hidden: int, arity: int, dropout: float):
        super().__init__()
        self.hidden = nn.Linear(in_features, hidden)
        self.relu = nn.ReLU()
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(hidden, arity)

    def forward(self, f):
        h = self.dropout(self.relu(self.hidden(f)))
        return F.softmax(self.out(h), dim=1), h


def _fusion(in_features: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_features, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out))


class BiradsNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.backbone)
        feat = self.backbone.out_channels
        self.descriptors = [n for n in DESCRIPTOR_NAMES if n in config.branches]
        arity = dict(zip(DESCRIPTOR_NAMES, DESCRIPTOR_ARITY))
        self.heads = nn.ModuleDict(
            {n: DescriptorHead(feat, config.head_hidden, arity[n], config.dropout) for n in self.descriptors}
        )
        self.subtype_head = nn.Linear(config.head_hidden, 4) if "margin" in self.heads else None
        n_probs = sum(arity[n] for n in self.descriptors)
        self.has_likelihood = "likelihood" in config.branches
        self.likelihood_head = (
            _fusion(feat + n_probs, config.fusion_hidden, 1) if self.has_likelihood else None
        )
        self.tumor_head = _fusion(feat + n_probs + int(self.has_likelihood), config.fusion_hidden, 2)
        if not config.backbone.trainable:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    @property
    def feature_dim(self) -> int:
        return self.backbone.out_channels

    def check_input(self, x: torch.Tensor) -> None:
        size = self.config.input_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, size, size):
            raise ValueError(f"expected input of shape (B, 3, {size}, {size}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> ModelOutputs:
        self.check_input(x)
        f = self.backbone(x).mean(dim=(2, 3))
        out = dict.fromkeys(DESCRIPTOR_NAMES)
        hidden = {}
        for name, head in self.heads.items():
            out[name], hidden[name] = head(f)
        probs = [out[n] for n in self.descriptors]
        subtypes = torch.sigmoid(self.subtype_head(hidden["margin"])) if self.subtype_head is not None else None
        likelihood = None
        fused = torch.cat([f, *probs], dim=1)
        if self.likelihood_head is not None:
            likelihood = torch.sigmoid(self.likelihood_head(fused)).squeeze(1)
            fused = torch.cat([fused, likelihood[:, None]], dim=1)
        tumor = F.softmax(self.tumor_head(fused), dim=1)
        return ModelOutputs(subtypes=subtypes, likelihood=likelihood, tumor=tumor, **out)


def build_model(config: ModelConfig = ModelConfig(), seed: int = 0) -> BiradsNet:
    """Build with deterministic initialization; optional pretrained backbone."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = BiradsNet(config)
    if config.backbone.pretrained_weights:
        load_backbone_weights(model, config.backbone.pretrained_weights)
    model.seed = seed
    return model


# --- tensor archive -----------------------------------------------------------


def write_tensor_archive(tensors: dict, directory: str | os.PathLike, stem: str = "weights") -> None:
    """Write ``<stem>.bin`` (little-endian float32) and ``<stem>.index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    with open(directory / f"{stem}.bin", "wb") as fh:
        for name, tensor in tensors.items():
            data = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
            fh.write(data.tobytes())
            index[name] = {"dtype": "float32", "shape": list(data.shape), "offset": offset}
            offset += data.nbytes
    meta = {"format": ARCHIVE_FORMAT, "byte_order": "little", "total_bytes": offset, "tensors": index}
    (directory / f"{stem}.index.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def read_tensor_archive(directory: str | os.PathLike, stem: str = "weights") -> dict[str, torch.Tensor]:
    directory = Path(directory)
    index_path, bin_path = directory / f"{stem}.index.json", directory / f"{stem}.bin"
    if not index_path.is_file() or not bin_path.is_file():
        raise CheckpointError(f"tensor archive {directory}/{stem}.* not found")
    meta = json.loads(index_path.read_text(encoding="utf-8"))
    if meta.get("format") != ARCHIVE_FORMAT:
        raise CheckpointError(f"{index_path}: unrecognized archive format {meta.get('format')!r}")
    payload = bin_path.read_bytes()
    out = {}
    for name, entry in meta["tensors"].items():
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"tensor {name}: unsupported dtype {entry.get('dtype')!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise CheckpointError(f"tensor {name}: data runs past the end of {bin_path}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out


def _assign(module: nn.Module, tensors: dict, prefix: str = "") -> None:
    """Copy archive tensors into ``module``; raise on the first missing/mismatched one."""
    state = module.state_dict()
    for name, current in state.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"tensor {key} missing from archive")
        if tuple(tensors[key].shape) != tuple(current.shape):
            raise CheckpointError(
                f"tensor {key} has shape {tuple(tensors[key].shape)}, expected {tuple(current.shape)}"
            )
    with torch.no_grad():
        for name, current in state.items():
            current.copy_(tensors[prefix + name].to(current.dtype))


def export_backbone(model: BiradsNet, directory: str | os.PathLike) -> Path:
    """Save the encoder as a pretrained-weights archive (``features.*`` names)."""
    write_tensor_archive(model.backbone.state_dict(), directory)
    return Path(directory)


def convert_torchvision_vgg16(state_dict: dict, directory: str | os.PathLike) -> Path:
    """Turn a torchvision ``vgg16`` state dict into a backbone archive."""
    features = {k: v for k, v in state_dict.items() if k.startswith("features.")}
    write_tensor_archive(features, directory)
    return Path(directory)


def load_backbone_weights(model: BiradsNet, directory: str | os.PathLike) -> None:
    _assign(model.backbone, read_tensor_archive(directory))


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: BiradsNet, path: str | os.PathLike, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    config = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": model.config.to_dict(),
        "seed": getattr(model, "seed", None),
        "task_order": list(TASK_NAMES),
        "lexicon_version": LEXICON_VERSION,
    }
    if extra:
        config["extra"] = extra
    (path / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")
    write_tensor_archive(model.state_dict(), path)
    return path


def load_checkpoint(path: str | os.PathLike) -> BiradsNet:
    path = Path(path)
    config_path = path / "config.json"
    if not config_path.is_file():
        raise CheckpointError(f"no config.json in checkpoint {path}")
    config = json.loads(config_path.read_text(encoding="utf-8"))
    if config.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version {config.get('format_version')} != supported {CHECKPOINT_FORMAT_VERSION}"
        )
    if config.get("task_order") != list(TASK_NAMES):
        raise CheckpointError(f"checkpoint task order {config.get('task_order')} != {list(TASK_NAMES)}")
    if config.get("lexicon_version") != LEXICON_VERSION:
        raise CheckpointError(f"checkpoint lexicon {config.get('lexicon_version')!r} != {LEXICON_VERSION!r}")
    arch = ModelConfig.from_dict(config["architecture"])
    # weights come from the archive, not from the original pretrained file
    arch = replace(arch, backbone=replace(arch.backbone, pretrained_weights=None))
    model = build_model(arch, seed=config.get("seed") or 0)
    model.config = ModelConfig.from_dict(config["architecture"])
    _assign(model, read_tensor_archive(path))
    model.checkpoint_extra = config.get("extra", {})
    model.eval()
    return model
