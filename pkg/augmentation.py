"""
Augmentation - SimCLR views and rotation shifting
Builds AugmentedBatch objects and the positive/negative structure used by
the sample-to-sample contrastive loss.
"""

from dataclasses import dataclass, asdict
from typing import Sequence, Tuple, Dict, Any, Optional

import numpy as np
import torch
from torchvision.transforms import v2 as T

from core import AugmentedBatch, AugmentationError, ConfigError, TrainingSample


ALLOWED_ROTATIONS = (90, 180, 270)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Stochastic view policy plus the shifting rotations"""
    crop_scale: Tuple[float, float] = (0.08, 1.0)
    crop_size: Optional[int] = None  # None keeps the input size
    hflip_prob: float = 0.5
    color_jitter: Tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    color_jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    rotations: Tuple[int, ...] = ALLOWED_ROTATIONS
    views_per_sample: int = 2
    vector_noise_std: float = 0.1

    def __post_init__(self):
        if self.views_per_sample < 2:
            raise ConfigError("views_per_sample must be >= 2 (InfoNCE needs a positive pair)")
        if len(set(self.rotations)) != len(self.rotations):
            raise ConfigError(f"duplicate rotations: {list(self.rotations)}")
        for r in self.rotations:
            if r not in ALLOWED_ROTATIONS:
                raise ConfigError(f"rotation {r} not in {list(ALLOWED_ROTATIONS)}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"invalid crop_scale {self.crop_scale}")
        for name in ('hflip_prob', 'color_jitter_prob', 'grayscale_prob'):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ConfigError(f"{name} must be a probability, got {p}")
        if self.vector_noise_std < 0:
            raise ConfigError("vector_noise_std must be >= 0")

    @classmethod
    def for_vectors(cls, **overrides) -> 'AugmentationPolicy':
        """Shift-free policy for feature-vector data"""
        overrides.setdefault('rotations', ())
        return cls(**overrides)

    @property
    def views_per_origin(self) -> int:
        return self.views_per_sample * (1 + len(self.rotations))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key in ('crop_scale', 'color_jitter', 'rotations'):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AugmentationPolicy':
        data = dict(data)
        for key in ('crop_scale', 'color_jitter', 'rotations'):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def _image_transform(policy: AugmentationPolicy, channels: int, size: int) -> T.Compose:
    steps = [
        T.RandomResizedCrop(policy.crop_size or size, scale=policy.crop_scale, antialias=True),
        T.RandomHorizontalFlip(p=policy.hflip_prob),
    ]
    # Colour transforms are only defined for RGB tensors
    if channels == 3:
        b, c, s, h = policy.color_jitter
        steps.append(T.RandomApply([T.ColorJitter(brightness=b, contrast=c, saturation=s, hue=h)],
                                   p=policy.color_jitter_prob))
        steps.append(T.RandomGrayscale(p=policy.grayscale_prob))
    return T.Compose(steps)


def _sample_seed(base: int, sample_id: int) -> int:
    return int(np.random.SeedSequence([base, sample_id]).generate_state(1)[0])


def augment_batch(batch: Sequence[TrainingSample], policy: AugmentationPolicy,
                  rng: np.random.Generator) -> AugmentedBatch:
    """
    Expand a batch into SimCLR views and their rotated shifts.

    For every sample and every view, the unrotated view (shift_index 0) is
    followed by one copy per rotation (shift_index = rotation / 90).

    Args:
        batch: training samples (images C x H x W or feature vectors)
        policy: augmentation policy
        rng: seeded generator; each sample gets a substream keyed by its id

    Returns:
        AugmentedBatch with |batch| * views_per_sample * (1 + |rotations|) views
    """
    if len(batch) == 0:
        raise AugmentationError("cannot augment an empty batch")

    first = np.asarray(batch[0].datum)
    is_image = first.ndim == 3
    if policy.rotations:
        if not is_image:
            raise AugmentationError("rotations require image data; use a shift-free policy for vectors")
        if first.shape[1] != first.shape[2]:
            raise AugmentationError(f"rotations require square images, got {first.shape[1]}x{first.shape[2]}")
    transform = _image_transform(policy, first.shape[0], first.shape[1]) if is_image else None

    base = int(rng.integers(0, 2**32))
    views, origin, shift, status = [], [], [], []
    for sample in batch:
        x = torch.as_tensor(np.asarray(sample.datum, dtype=np.float32))
        if x.shape != first.shape:
            raise AugmentationError(f"sample {sample.id} has shape {tuple(x.shape)}, expected {first.shape}")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(_sample_seed(base, int(sample.id)))
            for _ in range(policy.views_per_sample):
                if transform is not None:
                    view = transform(x)
                else:
                    view = x + policy.vector_noise_std * torch.randn_like(x)
                views.append(view)
                shift.append(0)
                for r in policy.rotations:
                    views.append(torch.rot90(view, k=r // 90, dims=(-2, -1)))
                    shift.append(r // 90)
        n = policy.views_per_origin
        origin.extend([int(sample.id)] * n)
        status.extend([int(sample.status)] * n)

    out = AugmentedBatch(
        views=torch.stack(views),
        origin_id=torch.tensor(origin, dtype=torch.long),
        shift_index=torch.tensor(shift, dtype=torch.long),
        status=torch.tensor(status, dtype=torch.long),
    )
    out.validate()
    return out


def positive_negative_masks(b: AugmentedBatch) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Positive / negative masks over the views of a batch.

    Two distinct views are positives iff they share origin and shift;
    every other off-diagonal pair is a negative.
    """
    same_origin = b.origin_id.unsqueeze(0) == b.origin_id.unsqueeze(1)
    same_shift = b.shift_index.unsqueeze(0) == b.shift_index.unsqueeze(1)
    off_diag = ~torch.eye(len(b), dtype=torch.bool)
    P = same_origin & same_shift & off_diag
    N = off_diag & ~P
    return P, N
