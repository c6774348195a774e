"""
HSCL Core - Domain Types
Shared value objects, configuration and error hierarchy for the
hierarchical semi-supervised contrastive anomaly detector.

Embedding convention: tensors are stored row-major, one embedding per row
([M, D]); the prototype bank keeps V column-major ([D, K]) so that
``Z @ V`` yields the [M, K] similarity table.
"""

from dataclasses import dataclass, field, asdict, fields
from enum import IntEnum
from typing import Optional, Dict, Any

import numpy as np
import torch
import torch.nn as nn


__version__ = "0.4.0"

NORM_EPS = 1e-12
UNIT_NORM_TOL = 1e-5


# ==================== ERRORS ====================

class HSCLError(Exception):
    """Base error for every failure raised by the package"""
    exit_code = 1


class ConfigError(HSCLError):
    """Invalid or unknown configuration value"""
    exit_code = 1


class ScenarioError(HSCLError):
    """Scenario cannot be built from the available pools"""
    exit_code = 1


class AugmentationError(HSCLError):
    """Batch cannot be augmented under the given policy"""
    exit_code = 1


class NumericalError(HSCLError):
    """Base for numerical failures (exit code 2)"""
    exit_code = 2


class DegenerateEmbeddingError(NumericalError):
    """Zero-norm vector where a direction is required"""


class AnchorWithoutPositivesError(NumericalError):
    """InfoNCE anchor with an empty positive set"""


class ModelStateError(NumericalError):
    """Untrained or non-finite model parameters"""


class LossDivergenceError(NumericalError):
    """Non-finite loss; carries the diagnostics of the failing step"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ArtifactError(HSCLError):
    """Missing, unreadable or protected artifact on disk"""
    exit_code = 3


# ==================== SAMPLES ====================

class SampleStatus(IntEnum):
    """Label status of a training sample"""
    NORMAL_LABELED = 0
    ABNORMAL_LABELED = 1
    UNLABELED = 2


@dataclass(frozen=True)
class GroundTruth:
    """Evaluation-only truth of a sample"""
    label: Optional[int]
    is_abnormal: bool


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """What the training path is allowed to see of a sample"""
    id: int
    datum: np.ndarray
    status: SampleStatus


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """
    A datum with its label status and stable identity.

    The true class is stored but only reachable through ``ground_truth()``;
    the trainer consumes ``for_training()`` views which do not carry it.
    """
    id: int
    datum: np.ndarray
    status: SampleStatus
    _true_label: Optional[int] = field(default=None, repr=False)
    _is_abnormal: bool = field(default=False, repr=False)

    def for_training(self) -> TrainingSample:
        return TrainingSample(id=self.id, datum=self.datum, status=self.status)

    def ground_truth(self) -> GroundTruth:
        """Evaluation accessor for the held-back truth"""
        return GroundTruth(label=self._true_label, is_abnormal=self._is_abnormal)


# ==================== BATCHES ====================

@dataclass(frozen=True, eq=False)
class AugmentedBatch:
    """Augmented views with the metadata needed to build positive/negative sets"""
    views: torch.Tensor
    origin_id: torch.Tensor
    shift_index: torch.Tensor
    status: torch.Tensor

    def __len__(self) -> int:
        return self.views.shape[0]

    def validate(self) -> None:
        m = self.views.shape[0]
        for name in ('origin_id', 'shift_index', 'status'):
            if getattr(self, name).shape != (m,):
                raise AugmentationError(f"{name} must have shape [{m}]")
        if bool(((self.shift_index < 0) | (self.shift_index > 3)).any()):
            raise AugmentationError("shift_index outside {0,1,2,3}")
        _, counts = torch.unique(self.origin_id, return_counts=True)
        if counts.numel() and not bool((counts == counts[0]).all()):
            raise AugmentationError("origin samples contribute unequal view counts")


def check_unit_rows(z: torch.Tensor, tol: float = UNIT_NORM_TOL, what: str = "embedding") -> None:
    """Assert every row of an [M, D] embedding tensor has unit L2 norm"""
    if z.numel() == 0:
        return
    norms = z.detach().norm(dim=1)
    if not bool(((norms - 1.0).abs() <= tol).all()):
        worst = (norms - 1.0).abs().max().item()
        raise DegenerateEmbeddingError(f"{what} rows not unit norm (max deviation {worst:.2e})")


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Cosine similarity of two vectors.

    Raises:
        DegenerateEmbeddingError: if either vector has (near) zero norm
    """
    na = a.norm()
    nb = b.norm()
    if na.item() < NORM_EPS or nb.item() < NORM_EPS:
        raise DegenerateEmbeddingError("degenerate embedding")
    return (a * b).sum() / (na * nb)


# ==================== PROTOTYPES ====================

class PrototypeBank(nn.Module):
    """Learnable D x K matrix of unit-norm normal prototypes"""

    def __init__(self, V: torch.Tensor):
        super().__init__()
        if V.dim() != 2 or V.shape[1] < 1:
            raise ConfigError("prototype matrix must be D x K with K >= 1")
        self.V = nn.Parameter(V.clone())
        self.renormalize_()

    @property
    def K(self) -> int:
        return self.V.shape[1]

    @property
    def D(self) -> int:
        return self.V.shape[0]

    @torch.no_grad()
    def renormalize_(self) -> None:
        """Project every column back onto the unit sphere"""
        norms = self.V.norm(dim=0, keepdim=True)
        if bool((norms < NORM_EPS).any()):
            raise DegenerateEmbeddingError("prototype collapsed to zero")
        self.V.div_(norms)

    def check(self, tol: float = UNIT_NORM_TOL) -> None:
        check_unit_rows(self.V.t(), tol, what="prototype")


def max_similarity(z: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
    """
    max_k z_i^T V_k for every row of z.

    Ties go to the lowest prototype index and only that prototype receives
    the subgradient.
    """
    sims = z @ V
    if sims.shape[0] == 0:
        return sims.new_zeros(0)
    top = sims.max(dim=1, keepdim=True).values.detach()
    hit = sims.detach() == top
    first = hit & (hit.cumsum(dim=1) == 1)
    return (sims * first).sum(dim=1)


# ==================== CONFIG ====================

@dataclass(frozen=True, eq=False)
class WeightVector:
    """Soft weights over normal ∪ unlabeled views plus the sampling threshold"""
    w: torch.Tensor
    w_delta: float = 0.4

    def __len__(self) -> int:
        return self.w.shape[0]

    @property
    def l1(self) -> float:
        return float(self.w.abs().sum())


@dataclass(frozen=True)
class HSCLConfig:
    """Hyperparameters of one training run"""
    tau: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0
    K: int = 1
    D: int = 128
    w_delta: float = 0.4
    batch_size: int = 256
    epochs: int = 250
    lr: float = 1e-3
    warmup_epochs: int = 10
    seed: int = 0

    # Ablation switches
    use_ss: bool = True
    use_sp: bool = True
    use_na: bool = True
    sp_positive_term: bool = True
    sp_negative_term: bool = True

    n_pairs: Optional[int] = None
    knn_k: int = 1
    allow_empty_labeled: bool = False
    checkpoint_every: int = 0
    device: str = 'cpu'

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.D < 1:
            raise ConfigError(f"D must be >= 1, got {self.D}")
        if not 0 < self.w_delta < 1:
            raise ConfigError(f"w_delta must lie in (0, 1), got {self.w_delta}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.n_pairs is not None and self.n_pairs < 1:
            raise ConfigError("n_pairs must be >= 1 when given")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]
