"""
Encoder f_theta
Residual CNN or MLP backbone with a projection head whose output is
L2-normalised, plus checkpoint persistence (parameter blob + JSON manifest).
"""

import json
import logging
from dataclasses import dataclass, asdict
from enum import Enum
from pathlib import Path
from typing import Tuple, Dict, Any, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet18

from core import ConfigError, ArtifactError, ModelStateError, PrototypeBank, NORM_EPS


logger = logging.getLogger('HSCLEncoder')

CHECKPOINT_BLOB = 'checkpoint.pt'
CHECKPOINT_MANIFEST = 'checkpoint.json'


class EncoderKind(str, Enum):
    RESNET18 = 'RESNET18'
    MLP = 'MLP'


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of the embedding network"""
    kind: EncoderKind = EncoderKind.MLP
    input_shape: Tuple[int, ...] = (32,)
    projection_dim: int = 128
    mlp_hidden: Tuple[int, ...] = (256, 256)

    def __post_init__(self):
        object.__setattr__(self, 'kind', EncoderKind(self.kind))
        object.__setattr__(self, 'input_shape', tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, 'mlp_hidden', tuple(int(h) for h in self.mlp_hidden))
        if self.projection_dim < 1:
            raise ConfigError("projection_dim must be >= 1")
        if self.kind is EncoderKind.RESNET18 and len(self.input_shape) != 3:
            raise ConfigError(f"RESNET18 expects a C x H x W input_shape, got {self.input_shape}")
        if self.kind is EncoderKind.MLP and len(self.input_shape) != 1:
            raise ConfigError(f"MLP expects a 1-D input_shape, got {self.input_shape}")
        if any(h < 1 for h in self.mlp_hidden):
            raise ConfigError("mlp_hidden widths must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['kind'] = self.kind.value
        data['input_shape'] = list(self.input_shape)
        data['mlp_hidden'] = list(self.mlp_hidden)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EncoderSpec':
        return cls(**data)


def _resnet18_backbone(in_channels: int) -> Tuple[nn.Module, int]:
    # CIFAR-style stem: 3x3 stride-1 convolution, no max-pool
    net = resnet18(weights=None)
    net.conv1 = nn.Conv2d(in_channels, 64, kernel_size=3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    width = net.fc.in_features
    net.fc = nn.Identity()
    return net, width


def _mlp_backbone(in_features: int, hidden: Tuple[int, ...]) -> Tuple[nn.Module, int]:
    layers = []
    width = in_features
    for h in hidden:
        layers += [nn.Linear(width, h), nn.ReLU(inplace=True)]
        width = h
    return nn.Sequential(*layers), width


class Encoder(nn.Module):
    """Backbone + projection head producing unit-norm embeddings"""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        if spec.kind is EncoderKind.RESNET18:
            self.backbone, width = _resnet18_backbone(spec.input_shape[0])
        else:
            self.backbone, width = _mlp_backbone(spec.input_shape[0], spec.mlp_hidden)

        if spec.kind is EncoderKind.MLP and not spec.mlp_hidden:
            # Bare MLP: a single linear map onto the embedding space
            self.head = nn.Linear(width, spec.projection_dim)
        else:
            self.head = nn.Sequential(
                nn.Linear(width, width),
                nn.ReLU(inplace=True),
                nn.Linear(width, spec.projection_dim),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.head(self.backbone(x)), dim=1, eps=NORM_EPS)


def encode(model: Encoder, batch_views: torch.Tensor) -> torch.Tensor:
    """
    Embed a batch of views.

    Returns:
        [M, D] tensor of unit-norm embeddings (row i is z_i)
    """
    expected = model.spec.input_shape
    if tuple(batch_views.shape[1:]) != expected:
        raise ConfigError(f"views of shape {tuple(batch_views.shape[1:])} do not match encoder input {expected}")
    return model(batch_views)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def assert_finite_parameters(*modules: nn.Module) -> None:
    for module in modules:
        for name, p in module.named_parameters():
            if not bool(torch.isfinite(p).all()):
                raise ModelStateError(f"non-finite parameter {name}")


# ==================== CHECKPOINTS ====================

def save_checkpoint(directory: Path, model: Encoder, bank: Optional[PrototypeBank],
                    config: Dict[str, Any], epoch: int) -> Path:
    """
    Write checkpoint.pt (state dicts) and checkpoint.json (manifest).

    The manifest echoes the encoder spec, config, epoch and the prototype
    matrix V as nested lists.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save({
        'encoder': model.state_dict(),
        'prototypes': bank.state_dict() if bank is not None else None,
    }, directory / CHECKPOINT_BLOB)
    manifest = {
        'encoder_spec': model.spec.to_dict(),
        'config': config,
        'epoch': epoch,
        'prototypes': bank.V.detach().cpu().tolist() if bank is not None else None,
    }
    with open(directory / CHECKPOINT_MANIFEST, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Checkpoint saved: {directory} (epoch {epoch})")
    return directory


def load_checkpoint(directory: Path) -> Tuple[Encoder, Optional[PrototypeBank], Dict[str, Any]]:
    """
    Restore encoder and prototype bank from a checkpoint directory.

    Returns:
        (encoder in eval mode, prototype bank or None, manifest dict)
    """
    directory = Path(directory)
    blob, manifest_path = directory / CHECKPOINT_BLOB, directory / CHECKPOINT_MANIFEST
    if not blob.exists() or not manifest_path.exists():
        raise ArtifactError(f"no checkpoint in {directory}")
    with open(manifest_path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    state = torch.load(blob, map_location='cpu', weights_only=True)

    model = Encoder(EncoderSpec.from_dict(manifest['encoder_spec']))
    model.load_state_dict(state['encoder'])
    model.eval()
    bank = None
    if state.get('prototypes') is not None:
        bank = PrototypeBank(state['prototypes']['V'])
    return model, bank, manifest
