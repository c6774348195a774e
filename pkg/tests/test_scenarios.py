import json

import pytest
import numpy as np

from core import ConfigError, ScenarioError, SampleStatus
from datasets import SourceDataset, make_synthetic_blobs
from scenarios import (
    ScenarioSpec, ScenarioKind, TestMode, build_scenario, write_split_manifest, read_split_manifest,
    load_split,
)


def pooled(n_classes=10, n_train=1000, n_test=20, dim=2, seed=0):
    """Dataset with an explicit test part, so the training pools stay whole"""
    rng = np.random.default_rng(seed)
    train_y = np.repeat(np.arange(n_classes), n_train)
    test_y = np.repeat(np.arange(n_classes), n_test)
    return SourceDataset(
        name='pooled',
        train_x=rng.normal(size=(len(train_y), dim)).astype(np.float32),
        train_y=train_y,
        test_x=rng.normal(size=(len(test_y), dim)).astype(np.float32),
        test_y=test_y,
    )


def test_labeled_fractions():
    """1000 normal / 9000 abnormal, gamma_l = 0.01 -> 10 normal and 90 abnormal labels"""
    split = build_scenario(ScenarioSpec(normal_class=0, gamma_l=0.01), pooled())
    assert len(split.X_n) == 10
    assert len(split.X_a) == 90
    per_class = np.bincount([s.ground_truth().label for s in split.X_a], minlength=10)
    assert per_class[0] == 0
    assert set(per_class[1:].tolist()) == {10}


def test_contamination_ratio():
    """S2 with gamma_p = 0.10 -> 900 normal + 100 abnormal in X_u"""
    spec = ScenarioSpec(normal_class=0, scenario=ScenarioKind.S2_CONTAMINATED, gamma_l=0.1, gamma_p=0.1)
    split = build_scenario(spec, pooled())
    counts = split.counts()
    assert counts['X_u'] == 1000
    assert counts['X_u_abnormal'] == 100
    injected = [s.ground_truth().label for s in split.X_u if s.ground_truth().is_abnormal]
    per_class = np.bincount(injected, minlength=10)[1:]
    assert per_class.max() - per_class.min() <= 1


def test_no_labels_when_gamma_l_zero():
    split = build_scenario(ScenarioSpec(normal_class=0, gamma_l=0.0), pooled(n_train=50))
    assert split.X_n == [] and split.X_a == []
    assert len(split.X_u) == 50


def test_sets_are_disjoint_and_pure(split):
    ids = split.ids()
    all_ids = [i for name in ids for i in ids[name]]
    assert len(all_ids) == len(set(all_ids))
    assert all(s.status is SampleStatus.NORMAL_LABELED for s in split.X_n)
    assert all(s.status is SampleStatus.ABNORMAL_LABELED for s in split.X_a)
    assert not any(s.ground_truth().is_abnormal for s in split.X_n)
    assert all(s.ground_truth().is_abnormal for s in split.X_a)


def test_same_spec_same_split(blobs, scenario_spec):
    assert build_scenario(scenario_spec, blobs).ids() == build_scenario(scenario_spec, blobs).ids()


def test_different_seed_same_cardinalities(blobs):
    a = build_scenario(ScenarioSpec(normal_class=0, gamma_l=0.1, seed=1), blobs)
    b = build_scenario(ScenarioSpec(normal_class=0, gamma_l=0.1, seed=2), blobs)
    assert a.counts() == b.counts()
    assert a.ids() != b.ids()


def test_holdout_without_test_part(blobs, split):
    """Sources without a test part hold out 20% of every class"""
    assert not blobs.has_test
    assert len(split.test) == 12 + 12  # normal class + the pairwise anomaly class
    assert len(split.X_n) + len(split.X_u) == 48


def test_pairwise_mode_keeps_one_anomaly_class():
    split = build_scenario(ScenarioSpec(normal_class=3, gamma_l=0.05), pooled(n_train=100))
    assert split.spec.resolved_test_mode is TestMode.PAIRWISE
    labels = {s.ground_truth().label for s in split.test}
    assert labels == {0, 3}


def test_explicit_test_anomaly_class():
    spec = ScenarioSpec(normal_class=0, gamma_l=0.05, test_anomaly_class=4)
    labels = {s.ground_truth().label for s in build_scenario(spec, pooled(n_train=100)).test}
    assert labels == {0, 4}


def test_all_mode_keeps_every_anomaly_class():
    spec = ScenarioSpec(normal_class=0, gamma_l=0.05, test_mode='all')
    labels = {s.ground_truth().label for s in build_scenario(spec, pooled(n_train=100)).test}
    assert labels == set(range(10))


def test_infeasible_contamination_reports_counts():
    ds = SourceDataset('tiny', np.zeros((110, 2), np.float32), np.array([0] * 100 + [1] * 10),
                       np.zeros((4, 2), np.float32), np.array([0, 0, 1, 1]))
    spec = ScenarioSpec(normal_class=0, scenario=ScenarioKind.S2_CONTAMINATED, gamma_l=0.0, gamma_p=0.5)
    with pytest.raises(ScenarioError, match='need 100, have 10'):
        build_scenario(spec, ds)


def test_cross_dataset_scenario():
    source = make_synthetic_blobs(2, 4, 6.0, 50, seed=0)
    external = make_synthetic_blobs(3, 4, 6.0, 30, seed=1)
    spec = ScenarioSpec(normal_class='blobs', scenario=ScenarioKind.S3_CROSS_DATASET, gamma_l=0.1,
                        anomaly_source='external')
    split = build_scenario(spec, source, external)
    assert not any(s.ground_truth().is_abnormal for s in split.X_n + split.X_u)
    assert len(split.X_n) + len(split.X_u) == 80
    assert len(split.X_a) == round(0.1 * 72)
    assert {s.ground_truth().is_abnormal for s in split.test} == {True, False}
    train_ids = {i for name in ('X_n', 'X_a', 'X_u') for i in split.ids()[name]}
    assert not train_ids & set(split.ids()['test'])


def test_cross_dataset_needs_external():
    spec = ScenarioSpec(normal_class='x', scenario=ScenarioKind.S3_CROSS_DATASET, anomaly_source='ext')
    with pytest.raises(ScenarioError):
        build_scenario(spec, make_synthetic_blobs(2, 4, 6.0, 20, seed=0))


@pytest.mark.parametrize('kwargs', [
    {'normal_class': None},
    {'normal_class': 0, 'gamma_l': 0.6},
    {'normal_class': 0, 'gamma_p': 0.1},
    {'normal_class': 0, 'scenario': 'S2_CONTAMINATED', 'gamma_p': 0.7},
    {'normal_class': 'cifar10', 'scenario': 'S1_SEMI'},
    {'normal_class': 0, 'scenario': 'S3_CROSS_DATASET'},
])
def test_spec_invariants(kwargs):
    with pytest.raises(ConfigError):
        ScenarioSpec(**kwargs)


def test_random_specs_hold_invariants():
    """Disjointness, purity and contamination fidelity over 100 random specs"""
    source = pooled(n_train=100, n_test=5)
    rng = np.random.default_rng(123)
    for _ in range(100):
        contaminated = bool(rng.integers(2))
        spec = ScenarioSpec(
            normal_class=int(rng.integers(10)),
            scenario=ScenarioKind.S2_CONTAMINATED if contaminated else ScenarioKind.S1_SEMI,
            gamma_l=float(rng.uniform(0, 0.5)),
            gamma_p=float(rng.uniform(0, 0.5)) if contaminated else 0.0,
            seed=int(rng.integers(1 << 30)),
        )
        split = build_scenario(spec, source)
        split.validate()
        if contaminated and split.X_u:
            counts = split.counts()
            assert abs(counts['X_u_abnormal'] - spec.gamma_p * counts['X_u']) <= 1


def test_manifest_round_trip(tmp_path, blobs, split):
    path = write_split_manifest(tmp_path / 'split.json', split, extra={'source': {'kind': 'blobs'}})
    manifest = read_split_manifest(path)
    assert manifest['counts'] == split.counts()
    assert manifest['source'] == {'kind': 'blobs'}
    assert load_split(manifest, blobs).ids() == split.ids()


def test_manifest_is_byte_identical_on_rebuild(tmp_path, blobs, scenario_spec):
    a = write_split_manifest(tmp_path / 'a.json', build_scenario(scenario_spec, blobs))
    b = write_split_manifest(tmp_path / 'b.json', build_scenario(scenario_spec, blobs))
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())['seed'] == scenario_spec.seed


def test_manifest_against_other_data(tmp_path, split):
    manifest = json.loads(write_split_manifest(tmp_path / 's.json', split).read_text())
    other = make_synthetic_blobs(3, 8, 8.0, 30, seed=0)
    with pytest.raises(ScenarioError):
        load_split(manifest, other)
