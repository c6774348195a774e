"""
Scenario Builder
Deterministic construction of the semi-supervised (S1), contaminated (S2)
and cross-dataset (S3) settings: disjoint X_n, X_a, X_u and a held-out
test set, plus the JSON split manifest used to re-use a split across runs.
"""

import json
import logging
from dataclasses import dataclass, asdict, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union, List, Dict, Any, Tuple

import numpy as np

from core import LabeledSample, SampleStatus, ScenarioError, ConfigError, ArtifactError
from datasets import SourceDataset


logger = logging.getLogger('ScenarioBuilder')

MAX_GAMMA = 0.5


class ScenarioKind(str, Enum):
    S1_SEMI = 'S1_SEMI'
    S2_CONTAMINATED = 'S2_CONTAMINATED'
    S3_CROSS_DATASET = 'S3_CROSS_DATASET'


class TestMode(str, Enum):
    PAIRWISE = 'pairwise'
    ALL = 'all'


@dataclass(frozen=True)
class ScenarioSpec:
    """Declarative description of one experimental split"""
    normal_class: Union[int, str, None] = None
    scenario: ScenarioKind = ScenarioKind.S1_SEMI
    gamma_l: float = 0.05
    gamma_p: float = 0.0
    anomaly_source: str = 'remaining'
    seed: int = 0
    test_mode: Optional[TestMode] = None
    test_anomaly_class: Optional[int] = None
    test_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, 'scenario', ScenarioKind(self.scenario))
        if self.test_mode is not None:
            object.__setattr__(self, 'test_mode', TestMode(self.test_mode))
        if self.normal_class is None:
            raise ConfigError("scenario.normal_class is required")
        for name in ('gamma_l', 'gamma_p'):
            g = getattr(self, name)
            if not 0 <= g <= MAX_GAMMA:
                raise ConfigError(f"{name} must lie in [0, {MAX_GAMMA}], got {g}")
        if self.scenario is not ScenarioKind.S2_CONTAMINATED and self.gamma_p != 0:
            raise ConfigError(f"gamma_p applies to S2 only, got {self.gamma_p} for {self.scenario.value}")
        if self.scenario is ScenarioKind.S3_CROSS_DATASET:
            if self.anomaly_source == 'remaining':
                raise ConfigError("S3 needs an external anomaly_source")
        elif isinstance(self.normal_class, str) or isinstance(self.normal_class, bool):
            raise ConfigError("S1/S2 need an integer normal_class")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")

    @property
    def resolved_test_mode(self) -> TestMode:
        if self.test_mode is not None:
            return self.test_mode
        return TestMode.PAIRWISE if self.scenario is ScenarioKind.S1_SEMI else TestMode.ALL

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['scenario'] = self.scenario.value
        data['test_mode'] = self.test_mode.value if self.test_mode is not None else None
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ScenarioSpec':
        return cls(**data)


@dataclass(eq=False)
class ScenarioSplit:
    """Disjoint labeled/unlabeled training sets and the test set"""
    spec: ScenarioSpec
    X_n: List[LabeledSample] = field(default_factory=list)
    X_a: List[LabeledSample] = field(default_factory=list)
    X_u: List[LabeledSample] = field(default_factory=list)
    test: List[LabeledSample] = field(default_factory=list)
    normal_label: Optional[int] = None

    def ids(self) -> Dict[str, List[int]]:
        return {name: [s.id for s in getattr(self, name)] for name in ('X_n', 'X_a', 'X_u', 'test')}

    def counts(self) -> Dict[str, int]:
        counts = {name: len(ids) for name, ids in self.ids().items()}
        counts['X_u_abnormal'] = sum(s.ground_truth().is_abnormal for s in self.X_u)
        counts['test_abnormal'] = sum(s.ground_truth().is_abnormal for s in self.test)
        return counts

    def validate(self) -> None:
        """Disjointness, labeled-set purity and contamination fidelity"""
        seen = {}
        for name, ids in self.ids().items():
            if len(set(ids)) != len(ids):
                raise ScenarioError(f"duplicate ids inside {name}")
            for i in ids:
                if i in seen:
                    raise ScenarioError(f"id {i} in both {seen[i]} and {name}")
                seen[i] = name
        if any(s.ground_truth().is_abnormal for s in self.X_n):
            raise ScenarioError("abnormal sample in X_n")
        if not all(s.ground_truth().is_abnormal for s in self.X_a):
            raise ScenarioError("normal sample in X_a")
        if self.spec.scenario is ScenarioKind.S2_CONTAMINATED and self.X_u:
            n_abn = self.counts()['X_u_abnormal']
            if abs(n_abn - self.spec.gamma_p * len(self.X_u)) > 1:
                raise ScenarioError(f"contamination {n_abn}/{len(self.X_u)} misses gamma_p={self.spec.gamma_p}")


# ==================== BUILDING ====================

@dataclass
class _Part:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray


def _partition(ds: SourceDataset, offset: int, test_fraction: float,
               rng: np.random.Generator) -> Tuple[_Part, _Part, int]:
    """Split a dataset into train/test parts with globally unique ids"""
    n_train = len(ds.train_y)
    if ds.has_test:
        train = _Part(ds.train_x, ds.train_y, offset + np.arange(n_train))
        test = _Part(ds.test_x, ds.test_y, offset + n_train + np.arange(len(ds.test_y)))
        return train, test, offset + ds.size
    test_idx = []
    for c in np.unique(ds.train_y):
        members = rng.permutation(np.flatnonzero(ds.train_y == c))
        test_idx.extend(members[:int(round(test_fraction * len(members)))])
    test_mask = np.zeros(n_train, dtype=bool)
    test_mask[test_idx] = True
    ids = offset + np.arange(n_train)
    train = _Part(ds.train_x[~test_mask], ds.train_y[~test_mask], ids[~test_mask])
    test = _Part(ds.train_x[test_mask], ds.train_y[test_mask], ids[test_mask])
    return train, test, offset + n_train


def _balanced_quotas(total: int, classes: List[int]) -> Dict[int, int]:
    base, extra = divmod(total, len(classes))
    return {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}


def _draw_per_class(pools: Dict[int, np.ndarray], quotas: Dict[int, int],
                    what: str) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """Take quota[c] leading positions of every class pool; return (taken, leftovers)"""
    short = {c: (quotas[c], len(pools[c])) for c in quotas if quotas[c] > len(pools[c])}
    if short:
        detail = ', '.join(f"class {c}: need {need}, have {have}" for c, (need, have) in short.items())
        raise ScenarioError(f"infeasible {what}: {detail}")
    taken = [pools[c][:quotas[c]] for c in quotas]
    rest = {c: pools[c][quotas[c]:] for c in pools}
    return (np.concatenate(taken) if taken else np.zeros(0, dtype=np.int64)), rest


def _samples(part: _Part, positions: np.ndarray, status: SampleStatus,
             abnormal: np.ndarray) -> List[LabeledSample]:
    out = [
        LabeledSample(
            id=int(part.ids[i]),
            datum=part.x[i],
            status=status,
            _true_label=int(part.y[i]),
            _is_abnormal=bool(abnormal[i]),
        )
        for i in positions
    ]
    return sorted(out, key=lambda s: s.id)


def _class_pools(part: _Part, positions: np.ndarray, rng: np.random.Generator) -> Dict[int, np.ndarray]:
    return {int(c): rng.permutation(positions[part.y[positions] == c]) for c in np.unique(part.y[positions])}


def build_scenario(spec: ScenarioSpec, source: SourceDataset, external: Optional[SourceDataset] = None,
                   test_anomaly: Optional[SourceDataset] = None) -> ScenarioSplit:
    """
    Build X_n, X_a, X_u and the test set.

    X_n takes gamma_l of the normal training pool; X_a takes gamma_l of the
    anomaly pool, balanced over anomalous classes; X_u is the rest of the
    normal pool plus, for S2, anomalies injected in equal proportion from
    every anomalous class until the pollution ratio equals gamma_p.
    Identical spec and source give an identical split.

    Args:
        spec: scenario description
        source: labeled source dataset (the normal dataset for S3)
        external: anomaly dataset for S3
        test_anomaly: S3 test anomalies (defaults to the external test part)
    """
    if spec.scenario is ScenarioKind.S3_CROSS_DATASET:
        split = _build_cross_dataset(spec, source, external, test_anomaly)
    else:
        split = _build_one_class(spec, source)
    split.validate()
    counts = split.counts()
    logger.info(f"Scenario {spec.scenario.value}: |X_n|={counts['X_n']} |X_a|={counts['X_a']} "
                f"|X_u|={counts['X_u']} (abnormal {counts['X_u_abnormal']}) |test|={counts['test']}")
    return split


def _build_one_class(spec: ScenarioSpec, source: SourceDataset) -> ScenarioSplit:
    rng = np.random.default_rng(spec.seed)
    normal = int(spec.normal_class)
    train, test, _ = _partition(source, 0, spec.test_fraction, rng)

    train_abnormal = train.y != normal
    normal_pos = rng.permutation(np.flatnonzero(~train_abnormal))
    if len(normal_pos) == 0:
        raise ScenarioError(f"normal class {normal} has no training samples")
    anomaly_pools = _class_pools(train, np.flatnonzero(train_abnormal), rng)
    if not anomaly_pools:
        raise ScenarioError("source has no anomalous classes")
    classes = sorted(anomaly_pools)

    n_lab = int(round(spec.gamma_l * len(normal_pos)))
    labeled_normal, rest_normal = normal_pos[:n_lab], normal_pos[n_lab:]

    n_anomaly_pool = sum(len(p) for p in anomaly_pools.values())
    quotas = _balanced_quotas(int(round(spec.gamma_l * n_anomaly_pool)), classes)
    labeled_abnormal, leftover = _draw_per_class(anomaly_pools, quotas, "labeled anomaly draw")

    injected = np.zeros(0, dtype=np.int64)
    if spec.scenario is ScenarioKind.S2_CONTAMINATED and spec.gamma_p > 0:
        n_inject = int(round(spec.gamma_p * len(rest_normal) / (1 - spec.gamma_p)))
        injected, _ = _draw_per_class(leftover, _balanced_quotas(n_inject, classes),
                                      f"contamination (gamma_p={spec.gamma_p})")

    test_abnormal = test.y != normal
    keep = ~test_abnormal
    if spec.resolved_test_mode is TestMode.PAIRWISE:
        target = spec.test_anomaly_class if spec.test_anomaly_class is not None else classes[0]
        if target == normal or target not in classes:
            raise ScenarioError(f"test anomaly class {target} is not an anomalous class")
        keep |= test.y == target
    else:
        keep |= test_abnormal

    return ScenarioSplit(
        spec=spec,
        X_n=_samples(train, labeled_normal, SampleStatus.NORMAL_LABELED, train_abnormal),
        X_a=_samples(train, labeled_abnormal, SampleStatus.ABNORMAL_LABELED, train_abnormal),
        X_u=_samples(train, np.concatenate([rest_normal, injected]), SampleStatus.UNLABELED, train_abnormal),
        test=_samples(test, np.flatnonzero(keep), SampleStatus.UNLABELED, test_abnormal),
        normal_label=normal,
    )


def _build_cross_dataset(spec: ScenarioSpec, source: SourceDataset, external: Optional[SourceDataset],
                         test_anomaly: Optional[SourceDataset]) -> ScenarioSplit:
    if external is None:
        raise ScenarioError(f"S3 needs the external anomaly dataset '{spec.anomaly_source}'")
    if external.datum_shape != source.datum_shape:
        raise ScenarioError(f"external datum shape {external.datum_shape} != source {source.datum_shape}")
    rng = np.random.default_rng(spec.seed)
    train, test, offset = _partition(source, 0, spec.test_fraction, rng)
    ext_train, ext_test, offset = _partition(external, offset, spec.test_fraction, rng)
    if test_anomaly is not None:
        _, ext_test, _ = _partition(test_anomaly, offset, spec.test_fraction, rng)

    normal_pos = rng.permutation(len(train.y))
    n_lab = int(round(spec.gamma_l * len(normal_pos)))

    pools = _class_pools(ext_train, np.arange(len(ext_train.y)), rng)
    quotas = _balanced_quotas(int(round(spec.gamma_l * len(ext_train.y))), sorted(pools))
    labeled_abnormal, _ = _draw_per_class(pools, quotas, "external anomaly draw")

    normal_flags = np.zeros(len(train.y), dtype=bool)
    return ScenarioSplit(
        spec=spec,
        X_n=_samples(train, normal_pos[:n_lab], SampleStatus.NORMAL_LABELED, normal_flags),
        X_a=_samples(ext_train, labeled_abnormal, SampleStatus.ABNORMAL_LABELED,
                     np.ones(len(ext_train.y), dtype=bool)),
        X_u=_samples(train, normal_pos[n_lab:], SampleStatus.UNLABELED, normal_flags),
        test=_samples(test, np.arange(len(test.y)), SampleStatus.UNLABELED, np.zeros(len(test.y), dtype=bool))
        + _samples(ext_test, np.arange(len(ext_test.y)), SampleStatus.UNLABELED,
                   np.ones(len(ext_test.y), dtype=bool)),
    )


# ==================== MANIFESTS ====================

def split_to_manifest(split: ScenarioSplit, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """JSON-ready description of a split: spec echo, seed, ids and cardinalities"""
    manifest = {
        'spec': split.spec.to_dict(),
        'seed': split.spec.seed,
        'ids': split.ids(),
        'counts': split.counts(),
    }
    if extra:
        manifest.update(extra)
    return manifest


def write_split_manifest(path: Path, split: ScenarioSplit, extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(split_to_manifest(split, extra), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def read_split_manifest(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"split manifest not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def load_split(manifest: Dict[str, Any], source: SourceDataset, external: Optional[SourceDataset] = None,
               test_anomaly: Optional[SourceDataset] = None) -> ScenarioSplit:
    """Rebuild a split from its manifest and check that the ids match exactly"""
    spec = ScenarioSpec.from_dict(manifest['spec'])
    split = build_scenario(spec, source, external, test_anomaly)
    if split.ids() != manifest['ids']:
        raise ScenarioError("split manifest does not match the dataset it is applied to")
    return split
