"""
HSCL Evaluation
Prototype normality score, k-NN fallback score, rank-sum AUROC and
embedding export / scatter rendering.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Sequence, Dict, Any, Optional

import numpy as np
import pandas as pd
import torch
from scipy.stats import rankdata
from sklearn.manifold import TSNE
from sklearn.neighbors import NearestNeighbors

from core import LabeledSample, HSCLError, ModelStateError, max_similarity
from encoder import assert_finite_parameters
from scenarios import ScenarioSplit
from trainer import TrainState


logger = logging.getLogger('HSCLEval')

SCORES_FILE = 'scores.csv'
SUMMARY_FILE = 'summary.json'
TSNE_MIN_SAMPLES = 5


class Reducer(str, Enum):
    NONE = 'none'
    TSNE = 'tsne'


@dataclass(frozen=True)
class ScoredSample:
    id: int
    score: float
    is_abnormal_truth: bool


# ==================== SCORING ====================

def _check_trained(state: TrainState) -> None:
    if state.epoch < 1:
        raise ModelStateError("model is untrained (epoch 0)")
    modules = [state.encoder] + ([state.bank] if state.bank is not None else [])
    assert_finite_parameters(*modules)


@torch.no_grad()
def embed_samples(state: TrainState, samples: Sequence[LabeledSample], batch_size: int = 1024) -> torch.Tensor:
    """Single eval-mode forward pass, no augmentation; rows follow `samples`"""
    encoder = state.encoder
    encoder.eval()
    chunks = []
    for start in range(0, len(samples), batch_size):
        part = samples[start:start + batch_size]
        x = torch.as_tensor(np.stack([np.asarray(s.datum, dtype=np.float32) for s in part]))
        chunks.append(encoder(x.to(state.device)).cpu())
    if not chunks:
        return torch.zeros(0, encoder.spec.projection_dim)
    return torch.cat(chunks)


def normality_score(state: TrainState, samples: Sequence[LabeledSample]) -> List[ScoredSample]:
    """
    s(x) = max_k f(x)^T V_k; higher means more normal.

    Raises:
        ModelStateError: untrained state, missing prototypes or non-finite parameters
    """
    _check_trained(state)
    if state.bank is None:
        raise ModelStateError("state has no prototype bank")
    Z = embed_samples(state, samples)
    scores = max_similarity(Z, state.bank.V.detach().cpu()).tolist()
    return [ScoredSample(s.id, float(v), s.ground_truth().is_abnormal) for s, v in zip(samples, scores)]


def knn_normality_score(state: TrainState, samples: Sequence[LabeledSample],
                        reference: Sequence[LabeledSample], k: int = 1) -> List[ScoredSample]:
    """Mean cosine similarity to the k nearest reference embeddings (no prototypes needed)"""
    _check_trained(state)
    if len(reference) < k:
        raise HSCLError(f"k-NN scoring needs at least {k} reference samples")
    index = NearestNeighbors(n_neighbors=k, metric='cosine').fit(embed_samples(state, reference).numpy())
    distances, _ = index.kneighbors(embed_samples(state, samples).numpy())
    scores = (1.0 - distances).mean(axis=1)
    return [ScoredSample(s.id, float(v), s.ground_truth().is_abnormal) for s, v in zip(samples, scores)]


# ==================== AUROC ====================

def auroc(scored: Sequence[ScoredSample]) -> float:
    """
    Area under the ROC curve with normal as the positive class.

    Mann-Whitney statistic from midranks: P(score_normal > score_abnormal)
    plus half the tie probability.
    """
    scores = np.asarray([s.score for s in scored], dtype=np.float64)
    abnormal = np.asarray([s.is_abnormal_truth for s in scored], dtype=bool)
    n_normal, n_abnormal = int((~abnormal).sum()), int(abnormal.sum())
    if n_normal == 0 or n_abnormal == 0:
        raise HSCLError("AUROC needs at least one normal and one abnormal sample")
    ranks = rankdata(scores, method='average')
    u = ranks[~abnormal].sum() - n_normal * (n_normal + 1) / 2.0
    return float(u / (n_normal * n_abnormal))


def per_class_auroc(scored: Sequence[ScoredSample], samples: Sequence[LabeledSample]) -> Dict[str, float]:
    """One-vs-one AUROC of the normal test samples against each anomalous class"""
    labels = {s.id: s.ground_truth().label for s in samples}
    normals = [s for s in scored if not s.is_abnormal_truth]
    result = {}
    for c in sorted({labels[s.id] for s in scored if s.is_abnormal_truth}):
        members = [s for s in scored if s.is_abnormal_truth and labels[s.id] == c]
        if normals:
            result[str(c)] = auroc(normals + members)
    return result


def summarize(scored: Sequence[ScoredSample], samples: Sequence[LabeledSample],
              scenario: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        'auroc': auroc(scored),
        'n_normal': sum(not s.is_abnormal_truth for s in scored),
        'n_abnormal': sum(s.is_abnormal_truth for s in scored),
        'per_class_auroc': per_class_auroc(scored, samples),
        'scenario': scenario,
    }


def write_scores(path: Path, scored: Sequence[ScoredSample]) -> Path:
    table = pd.DataFrame({
        'id': [s.id for s in scored],
        'score': [s.score for s in scored],
        'truth': [int(s.is_abnormal_truth) for s in scored],
    })
    table.to_csv(path, index=False)
    return Path(path)


def write_summary(path: Path, summary: Dict[str, Any]) -> Path:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write('\n')
    return Path(path)


# ==================== EMBEDDINGS ====================

def export_embeddings(state: TrainState, samples: Sequence[LabeledSample], reducer: Reducer = Reducer.NONE,
                      seed: int = 0, perplexity: float = 30.0, max_iter: int = 1000) -> pd.DataFrame:
    """
    Table of id, truth and coordinates.

    NONE keeps the raw unit-norm embeddings (columns z0..z{D-1}); TSNE maps
    them to two columns x, y with a seeded t-SNE (perplexity capped at n - 1).
    """
    reducer = Reducer(reducer)
    _check_trained(state)
    if reducer is Reducer.TSNE and len(samples) < TSNE_MIN_SAMPLES:
        raise HSCLError(f"t-SNE needs at least {TSNE_MIN_SAMPLES} samples, got {len(samples)}")

    Z = embed_samples(state, samples).numpy().astype(np.float64)
    if reducer is Reducer.TSNE:
        coords = TSNE(n_components=2, perplexity=min(perplexity, len(samples) - 1), max_iter=max_iter,
                      init='pca', random_state=seed).fit_transform(Z)
        columns = ['x', 'y']
    else:
        coords = Z
        columns = [f'z{i}' for i in range(Z.shape[1])]

    table = pd.DataFrame(coords, columns=columns)
    table.insert(0, 'truth', [int(s.ground_truth().is_abnormal) for s in samples])
    table.insert(0, 'id', [s.id for s in samples])
    return table


def render_scatter(table: pd.DataFrame, path: Path, title: str = 'HSCL embeddings') -> Path:
    """Scatter of the first two coordinate columns, normal vs abnormal"""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    coord_cols = [c for c in table.columns if c not in ('id', 'truth')][:2]
    fig, ax = plt.subplots(figsize=(6, 6))
    for flag, color, label in ((0, '#f4a6c1', 'normal'), (1, '#4c72b0', 'abnormal')):
        rows = table[table['truth'] == flag]
        ax.scatter(rows[coord_cols[0]], rows[coord_cols[1]], s=6, c=color, label=label, alpha=0.7)
    ax.set_title(title)
    ax.legend(loc='best')
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info(f"Scatter written to {path}")
    return Path(path)


def score_split(state: TrainState, split: ScenarioSplit) -> List[ScoredSample]:
    """
    Score the test set of a split.

    Runs trained without the sample-to-prototype module have no usable
    prototypes and fall back to k-NN against X_n ∪ X_u.
    """
    if state.config.use_sp:
        return normality_score(state, split.test)
    return knn_normality_score(state, split.test, list(split.X_n) + list(split.X_u), k=state.config.knn_k)
