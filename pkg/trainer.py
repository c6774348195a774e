"""
HSCL Trainer
Single-stage joint optimisation of the encoder and the prototype bank under
the hierarchical contrastive objective, with a stratified batch sampler,
linear-warmup + cosine learning rate, metrics CSV and checkpoints.
"""

import json
import math
import time
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Iterable, Iterator, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch.optim import Adam
from torch.optim.lr_scheduler import LambdaLR

from core import (
    HSCLConfig, LabeledSample, TrainingSample, SampleStatus, PrototypeBank, WeightVector,
    ConfigError, LossDivergenceError, NORM_EPS,
)
from augmentation import AugmentationPolicy, augment_batch, positive_negative_masks
from encoder import Encoder, EncoderSpec, encode, save_checkpoint, load_checkpoint
from losses import (
    LossBreakdown, NormalToAbnormalResult, sample_to_sample_loss, soft_weights,
    sample_to_prototype_loss, sampling_distribution, normal_to_abnormal_loss, total_loss,
)
from scenarios import ScenarioSplit


logger = logging.getLogger('HSCLTrainer')

METRICS_FILE = 'metrics.csv'
METRICS_COLUMNS = ['epoch', 'l_ss', 'l_sp', 'l_na', 'total', 'lr', 'skipped_na_count', 'wall_seconds']
DIVERGENCE_FILE = 'divergence.json'
LABELED_SHARE = 8  # each labeled set may take up to batch_size / 8 slots
MAX_PROTOTYPE_DRAWS = 10000


@dataclass
class EpochRecord:
    epoch: int
    l_ss: float
    l_sp: float
    l_na: float
    total: float
    lr: float
    skipped_na_count: int
    wall_seconds: float


@dataclass(eq=False)
class TrainState:
    """Everything the training loop owns between steps"""
    encoder: Encoder
    bank: Optional[PrototypeBank]
    config: HSCLConfig
    policy: AugmentationPolicy
    optimizer: Optional[torch.optim.Optimizer] = None
    scheduler: Optional[LambdaLR] = None
    epoch: int = 0
    step: int = 0
    history: List[EpochRecord] = field(default_factory=list)

    @property
    def device(self) -> torch.device:
        return torch.device(self.config.device)


# ==================== SCHEDULE ====================

def learning_rate(config: HSCLConfig, epoch: int, step_fraction: float = 0.0) -> float:
    """
    Linear warmup (in steps) followed by cosine decay (in epochs).

    Warmup is capped at epochs - 1 so short runs still decay; the final
    epoch runs at base_lr * (1 + cos(pi)) / 2 = 0.
    """
    warmup = min(config.warmup_epochs, config.epochs - 1)
    t = epoch + step_fraction
    if t < warmup:
        return config.lr * t / warmup
    span = config.epochs - 1 - warmup
    if span <= 0:
        return config.lr
    progress = min(1.0, (epoch - warmup) / span)
    return config.lr * (1 + math.cos(math.pi * progress)) / 2


# ==================== PROTOTYPES ====================

def init_prototypes(K: int, D: int, rng: np.random.Generator) -> PrototypeBank:
    """
    K prototypes drawn uniformly on the unit sphere of R^D.

    Candidates whose |cos| with an accepted prototype exceeds 0.9 are rejected.
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    columns: List[np.ndarray] = []
    rejected = 0
    while len(columns) < K:
        v = rng.normal(size=D)
        norm = np.linalg.norm(v)
        if norm < NORM_EPS:
            continue
        v = v / norm
        if all(abs(float(v @ c)) <= 0.9 for c in columns):
            columns.append(v)
            continue
        rejected += 1
        if rejected > MAX_PROTOTYPE_DRAWS:
            raise ConfigError(f"cannot place {K} decorrelated prototypes in {D} dimensions")
    return PrototypeBank(torch.tensor(np.stack(columns, axis=1), dtype=torch.float32))


# ==================== SAMPLING ====================

class StratifiedBatchSampler:
    """
    Batches over X_u ∪ X_n with guaranteed labeled representation.

    Each batch reserves min(|X_a|, B/8) labeled anomalies and up to
    min(|X_n|, B/8) labeled normals not already in the batch; the remaining
    slots walk through a fresh permutation of X_u ∪ X_n, which defines an epoch.
    """

    def __init__(self, split: ScenarioSplit, batch_size: int, rng: np.random.Generator):
        self.pool = list(split.X_u) + list(split.X_n)
        self.X_n = list(split.X_n)
        self.X_a = list(split.X_a)
        self.rng = rng
        self.n_abnormal = min(len(self.X_a), batch_size // LABELED_SHARE)
        self.n_normal = min(len(self.X_n), batch_size // LABELED_SHARE)
        self.chunk = batch_size - self.n_abnormal - self.n_normal
        if not self.pool:
            raise ConfigError("X_u ∪ X_n is empty; nothing to train on")

    def __len__(self) -> int:
        return math.ceil(len(self.pool) / self.chunk)

    def epoch_batches(self) -> Iterator[List[LabeledSample]]:
        order = self.rng.permutation(len(self.pool))
        for start in range(0, len(self.pool), self.chunk):
            batch = [self.pool[i] for i in order[start:start + self.chunk]]
            if self.n_abnormal:
                picks = self.rng.choice(len(self.X_a), self.n_abnormal, replace=False)
                batch += [self.X_a[i] for i in picks]
            if self.n_normal:
                present = {s.id for s in batch}
                candidates = [s for s in self.X_n if s.id not in present]
                take = min(self.n_normal, len(candidates))
                if take:
                    picks = self.rng.choice(len(candidates), take, replace=False)
                    batch += [candidates[i] for i in picks]
            yield batch


# ==================== TRAINING ====================

def _training_view(sample: Union[LabeledSample, TrainingSample]) -> TrainingSample:
    return sample.for_training() if isinstance(sample, LabeledSample) else sample


def _named_tensors(state: TrainState, grads: bool) -> Iterator[Tuple[str, Optional[torch.Tensor]]]:
    modules = [('encoder', state.encoder)] + ([('prototypes', state.bank)] if state.bank is not None else [])
    for prefix, module in modules:
        for name, p in module.named_parameters():
            yield f'{prefix}.{name}', (p.grad if grads else p)


def check_finite(state: TrainState, part: str, tensors: Iterable[Tuple[str, Optional[torch.Tensor]]],
                 losses: Optional[LossBreakdown] = None) -> None:
    """
    Raise LossDivergenceError on the first non-finite tensor.

    ``part`` says what was checked; the diagnostics also carry the step
    position, the current lr and, after the forward pass, the loss parts.
    """
    for name, tensor in tensors:
        if tensor is None or bool(torch.isfinite(tensor).all()):
            continue
        diagnostics = {
            'part': part,
            'tensor': name,
            'epoch': state.epoch + 1,
            'step': state.step,
            'lr': state.optimizer.param_groups[0]['lr'] if state.optimizer else None,
        }
        if losses is not None:
            diagnostics.update(l_ss=losses.l_ss, l_sp=losses.l_sp, l_na=losses.l_na, total=losses.total)
        raise LossDivergenceError(f"loss divergence: non-finite {part} ({name})", diagnostics)


def build_state(config: HSCLConfig, policy: AugmentationPolicy, encoder_spec: EncoderSpec,
                rng: np.random.Generator) -> TrainState:
    """Fresh encoder, prototypes and optimiser (single parameter group)"""
    if encoder_spec.projection_dim != config.D:
        raise ConfigError(f"encoder projection_dim {encoder_spec.projection_dim} != config D {config.D}")
    torch.manual_seed(config.seed)
    device = torch.device(config.device)
    encoder = Encoder(encoder_spec).to(device)
    bank = init_prototypes(config.K, config.D, rng).to(device)
    optimizer = Adam(list(encoder.parameters()) + list(bank.parameters()), lr=config.lr)
    return TrainState(encoder=encoder, bank=bank, config=config, policy=policy, optimizer=optimizer)


def train_step(state: TrainState, batch: Sequence[Union[LabeledSample, TrainingSample]],
               config: HSCLConfig, rng: np.random.Generator) -> Tuple[TrainState, LossBreakdown]:
    """
    One optimisation step on a batch.

    augment -> encode -> masks -> L_SS; gradient-stopped soft weights ->
    L_SP; sampling distribution -> L_NA (or skip); Adam step on encoder and
    prototypes together; prototypes renormalised columnwise.
    """
    encoder, bank = state.encoder, state.bank
    device = state.device
    encoder.train()

    views = augment_batch([_training_view(s) for s in batch], state.policy, rng)
    Z = encode(encoder, views.views.to(device))
    check_finite(state, 'embeddings', [('Z', Z)])
    zero = Z.new_zeros(())

    if config.use_ss:
        P, N = positive_negative_masks(views)
        l_ss = sample_to_sample_loss(Z, P.to(device), N.to(device), config.tau)
    else:
        l_ss = zero

    abnormal = (views.status == SampleStatus.ABNORMAL_LABELED).to(device)
    Z_nu, Z_a = Z[~abnormal], Z[abnormal]
    status_nu = views.status.to(device)[~abnormal]

    if config.use_sp:
        w = soft_weights(Z_nu, status_nu, bank, config.w_delta)
        l_sp = sample_to_prototype_loss(Z_nu, Z_a, w, bank, config.sp_positive_term, config.sp_negative_term)
    else:
        # Without prototypes every normal/unlabeled view counts as normal
        w = WeightVector(w=torch.ones(Z_nu.shape[0], device=device), w_delta=config.w_delta)
        l_sp = zero

    generator = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
    if config.use_na:
        n_pairs = config.n_pairs or max(1, int(abnormal.sum()))
        na = normal_to_abnormal_loss(Z_nu, Z_a, sampling_distribution(w), config.tau, n_pairs, generator)
    else:
        na = NormalToAbnormalResult(zero, 0, True)

    optimizer = state.optimizer
    try:
        breakdown = total_loss(l_ss, l_sp, na.loss, config, na.n_pairs, na.skipped)
    except LossDivergenceError as e:
        e.diagnostics.update(epoch=state.epoch + 1, step=state.step,
                             lr=optimizer.param_groups[0]['lr'] if optimizer else None)
        raise

    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        objective = breakdown.objective
        if objective is not None and objective.requires_grad:
            objective.backward()
            check_finite(state, 'gradients', _named_tensors(state, grads=True), breakdown)
            optimizer.step()
            check_finite(state, 'parameters', _named_tensors(state, grads=False), breakdown)
        if bank is not None:
            bank.renormalize_()
        if state.scheduler is not None:
            state.scheduler.step()
    state.step += 1
    return state, breakdown


def _append_metrics(path: Path, record: EpochRecord) -> None:
    row = pd.DataFrame([asdict(record)], columns=METRICS_COLUMNS)
    row.to_csv(path, mode='a', header=not path.exists(), index=False)


def _write_divergence(run_dir: Path, state: TrainState, error: LossDivergenceError) -> None:
    with open(run_dir / DIVERGENCE_FILE, 'w', encoding='utf-8') as f:
        json.dump({'error': str(error), 'diagnostics': error.diagnostics}, f, indent=2, sort_keys=True)
    save_checkpoint(run_dir / 'divergence', state.encoder, state.bank, state.config.to_dict(), state.epoch)


def fit(split: ScenarioSplit, config: HSCLConfig, policy: AugmentationPolicy, encoder_spec: EncoderSpec,
        run_dir: Optional[Path] = None) -> TrainState:
    """
    Train for config.epochs epochs and return the final state.

    Writes metrics.csv (one row per epoch) and the final checkpoint into
    run_dir when given.

    Raises:
        ConfigError: if X_n is empty and allow_empty_labeled is not set
        LossDivergenceError: on a non-finite loss, embedding or update (divergence.json is written first)
    """
    if not split.X_n and not config.allow_empty_labeled:
        raise ConfigError("X_n is empty; enable allow_empty_labeled for the gamma_l = 0 mode")

    rng = np.random.default_rng(config.seed)
    state = build_state(config, policy, encoder_spec, rng)
    sampler = StratifiedBatchSampler(split, config.batch_size, rng)
    steps = len(sampler)
    state.scheduler = LambdaLR(
        state.optimizer,
        lr_lambda=lambda s: learning_rate(config, s // steps, (s % steps) / steps) / config.lr,
    )

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Training {config.epochs} epochs x {steps} steps "
                f"(|X_n|={len(split.X_n)}, |X_a|={len(split.X_a)}, |X_u|={len(split.X_u)})")

    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = state.optimizer.param_groups[0]['lr']
        sums = np.zeros(4)
        skipped = 0
        for batch in sampler.epoch_batches():
            try:
                _, parts = train_step(state, batch, config, rng)
            except LossDivergenceError as e:
                logger.error(f"Loss divergence at epoch {epoch + 1}, step {state.step}: {e.diagnostics}")
                if run_dir is not None:
                    _write_divergence(run_dir, state, e)
                raise
            sums += (parts.l_ss, parts.l_sp, parts.l_na, parts.total)
            skipped += int(parts.skipped_na)

        means = sums / steps
        record = EpochRecord(epoch + 1, *means.tolist(), lr=lr, skipped_na_count=skipped,
                             wall_seconds=round(time.perf_counter() - started, 3))
        state.history.append(record)
        state.epoch = epoch + 1
        logger.info(f"Epoch {record.epoch}/{config.epochs} total={record.total:.4f} "
                    f"ss={record.l_ss:.4f} sp={record.l_sp:.4f} na={record.l_na:.4f} "
                    f"lr={lr:.2e} skipped_na={skipped}")

        if run_dir is not None:
            _append_metrics(run_dir / METRICS_FILE, record)
            if config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                save_checkpoint(run_dir / f'epoch-{state.epoch:04d}', state.encoder, state.bank,
                                config.to_dict(), state.epoch)

    if run_dir is not None:
        save_checkpoint(run_dir, state.encoder, state.bank, config.to_dict(), state.epoch)
    return state


def restore_state(run_dir: Path, policy: Optional[AugmentationPolicy] = None) -> TrainState:
    """Inference-only state (no optimiser) from a checkpoint directory"""
    encoder, bank, manifest = load_checkpoint(Path(run_dir))
    config = HSCLConfig(**manifest['config'])
    encoder.to(config.device)
    if bank is not None:
        bank.to(config.device)
    return TrainState(encoder=encoder, bank=bank, config=config,
                      policy=policy or AugmentationPolicy.for_vectors(), epoch=manifest['epoch'])
