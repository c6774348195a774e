import math
from dataclasses import replace

import pytest
import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.autograd import gradcheck

from core import SampleStatus, WeightVector
from losses import (
    info_nce_rows, sample_to_prototype_loss, soft_weights, sampling_distribution, normal_to_abnormal_loss,
)
from trainer import fit
from ablation import AblationCell, run_cell
from main import cli


# ==================== RANDOM INSTANCES ====================

def random_masks(rng, n_origins, views):
    origins = torch.tensor(np.repeat(np.arange(n_origins), views))
    off = ~torch.eye(len(origins), dtype=torch.bool)
    P = (origins.unsqueeze(0) == origins.unsqueeze(1)) & off
    return P, off & ~P


def scalar_info_nce(Z, P, N, tau):
    """Loop-over-anchors oracle in plain floats"""
    z = [[float(v) for v in row] for row in F.normalize(Z, dim=1)]
    losses = []
    for a in range(len(z)):
        def e(j):
            return math.exp(sum(x * y for x, y in zip(z[a], z[j])) / tau)
        pos = sum(e(j) for j in range(len(z)) if P[a, j])
        den = pos + sum(e(j) for j in range(len(z)) if N[a, j])
        losses.append(-math.log(pos / den))
    return sum(losses) / len(losses)


def test_info_nce_matches_scalar_oracle():
    """1000 random instances within 1e-6"""
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_origins, views = int(rng.integers(1, 5)), int(rng.integers(2, 4))
        P, N = random_masks(rng, n_origins, views)
        Z = torch.as_tensor(rng.normal(size=(n_origins * views, int(rng.integers(2, 9)))))
        tau = float(rng.uniform(0.1, 1.0))
        fast = float(info_nce_rows(Z, P, N, tau).mean())
        assert fast == pytest.approx(scalar_info_nce(Z, P, N, tau), abs=1e-6)


def test_weighted_form_with_unit_weights():
    """All-ones weights reduce the weighted pull term to the plain mean"""
    rng = np.random.default_rng(1)
    for _ in range(200):
        n, d, k = int(rng.integers(1, 12)), int(rng.integers(2, 8)), int(rng.integers(1, 4))
        Z = F.normalize(torch.as_tensor(rng.normal(size=(n, d))), dim=1)
        V = F.normalize(torch.as_tensor(rng.normal(size=(d, k))), dim=0)
        weighted = sample_to_prototype_loss(Z, Z[:0], WeightVector(torch.ones(n, dtype=torch.float64)), V)
        plain = (1.0 - (Z @ V).max(dim=1).values).pow(2).mean()
        assert float(weighted) == pytest.approx(float(plain), abs=1e-10)


def test_weight_and_sampling_invariants():
    rng = np.random.default_rng(2)
    for _ in range(300):
        n, d, k = int(rng.integers(1, 20)), int(rng.integers(2, 8)), int(rng.integers(1, 4))
        Z = F.normalize(torch.as_tensor(rng.normal(size=(n, d))), dim=1)
        V = F.normalize(torch.as_tensor(rng.normal(size=(d, k))), dim=0)
        status = torch.as_tensor(rng.choice([SampleStatus.NORMAL_LABELED, SampleStatus.UNLABELED], size=n))
        w_delta = float(rng.uniform(0.05, 0.95))
        w = soft_weights(Z, status, V, w_delta)
        assert bool(((w.w >= 0) & (w.w <= 1)).all())
        assert bool((w.w[status == SampleStatus.NORMAL_LABELED] == 1).all())
        p = sampling_distribution(w)
        if p is None:
            assert bool((w.w <= w_delta).all())
            continue
        assert float(p.sum()) == pytest.approx(1.0, abs=1e-12)
        assert bool((p[w.w <= w_delta] == 0).all())


def _instance(rng):
    n_origins, views = int(rng.integers(2, 5)), 2
    d, k = int(rng.integers(2, 9)), int(rng.integers(1, 4))
    M = n_origins * views
    Z = torch.as_tensor(rng.normal(size=(M, d))).requires_grad_(True)
    return Z, random_masks(rng, n_origins, views), d, k


def test_gradients_match_finite_differences():
    """100 random small double-precision instances per loss"""
    rng = np.random.default_rng(3)
    check = dict(eps=1e-5, atol=1e-6, rtol=1e-4)
    for i in range(100):
        Z, (P, N), d, k = _instance(rng)
        assert gradcheck(lambda z: info_nce_rows(z, P, N, 0.5).mean(), (Z,), **check)

        Z_nu = torch.as_tensor(rng.normal(size=(int(rng.integers(2, 9)), d))).requires_grad_(True)
        Z_a = torch.as_tensor(rng.normal(size=(int(rng.integers(1, 5)), d))).requires_grad_(True)
        V = F.normalize(torch.as_tensor(rng.normal(size=(d, k))), dim=0).requires_grad_(True)
        w = WeightVector(torch.as_tensor(rng.uniform(0.1, 1.0, size=Z_nu.shape[0])))
        assert gradcheck(lambda a, b, v: sample_to_prototype_loss(a, b, w, v), (Z_nu, Z_a, V), **check)

        p = torch.full((Z_nu.shape[0],), 1.0 / Z_nu.shape[0], dtype=torch.float64)

        def na(a, b, seed=i):
            return normal_to_abnormal_loss(a, b, p, 0.5, 3, torch.Generator().manual_seed(seed)).loss

        assert gradcheck(na, (Z_nu, Z_a), **check)


# ==================== SYNTHETIC BENCHMARK ====================

SEEDS = (0, 1, 2)


def synthetic_config(gamma_p=0.05, epochs=60):
    """Ten 32-d blobs, class 0 normal, contaminated unlabeled pool"""
    return {
        'hscl': {'D': 64, 'K': 1, 'batch_size': 256, 'epochs': epochs, 'warmup_epochs': 5, 'lr': 1e-3},
        'scenario': {'normal_class': 0, 'scenario': 'S2_CONTAMINATED', 'gamma_l': 0.05, 'gamma_p': gamma_p},
        'source': {'kind': 'blobs', 'n_classes': 10, 'dim': 32, 'separation': 6.0, 'n_per_class': 1000},
        'encoder': {'kind': 'MLP', 'mlp_hidden': [128, 128]},
        'augmentation': {'vector_noise_std': 0.1},
    }


def ablation_config():
    """Unsaturated variant: closest blobs 2.5 apart, 10% contamination, 20 epochs"""
    config = synthetic_config(gamma_p=0.10, epochs=20)
    config['source']['separation'] = 2.5
    return config


def mean_auroc(config, setting='full'):
    return float(np.mean([run_cell(config, None, AblationCell(setting, 0.4, 1, seed))['auroc'] for seed in SEEDS]))


@pytest.mark.slow
def test_loss_descends(split, tiny_config, vector_policy, mlp_spec):
    """Mean total loss at epoch 20 is below epoch 1, for three seeds"""
    for seed in SEEDS:
        state = fit(split, replace(tiny_config, epochs=20, seed=seed), vector_policy, mlp_spec)
        assert state.history[19].total < state.history[0].total


@pytest.mark.slow
def test_synthetic_end_to_end():
    for seed in SEEDS:
        row = run_cell(synthetic_config(), None, AblationCell('full', 0.4, 1, seed))
        assert row['auroc'] >= 0.95, row


@pytest.mark.slow
def test_contamination_resistance():
    clean = mean_auroc(synthetic_config(gamma_p=0.0))
    contaminated = mean_auroc(synthetic_config(gamma_p=0.10))
    assert (clean - contaminated) * 100 <= 3.0


@pytest.mark.slow
def test_full_model_beats_ablations():
    config = ablation_config()
    full = mean_auroc(config)
    for setting in ('wo_ss', 'wo_sp', 'wo_na'):
        ablated = mean_auroc(config, setting)
        assert full >= ablated, (setting, full, ablated)


@pytest.mark.slow
def test_repeat_runs_are_identical(tmp_path, config_file, runner):
    """Same config and seed: same metrics (wall time aside) and same scores"""
    for name in ('a', 'b'):
        run_dir = tmp_path / name
        assert runner.invoke(cli, ['train', str(config_file), '--out', str(run_dir), '--epochs', '3']).exit_code == 0
        assert runner.invoke(cli, ['eval', str(run_dir)]).exit_code == 0

    metrics = [pd.read_csv(tmp_path / name / 'metrics.csv').drop(columns='wall_seconds') for name in ('a', 'b')]
    pd.testing.assert_frame_equal(*metrics)
    assert (tmp_path / 'a' / 'scores.csv').read_bytes() == (tmp_path / 'b' / 'scores.csv').read_bytes()
