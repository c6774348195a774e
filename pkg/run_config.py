"""
Run Configuration
JSON run config with schema validation (unknown keys rejected at every
level), CLI overrides and the RunManifest written at the root of every run.
"""

import os
import json
import typing
from dataclasses import dataclass, field, fields, replace, asdict
from enum import Enum
from pathlib import Path
from typing import Optional, Dict, Any, Union, Tuple

from core import HSCLConfig, ConfigError, ArtifactError, __version__
from augmentation import AugmentationPolicy
from encoder import EncoderSpec, EncoderKind
from scenarios import ScenarioSpec, ScenarioSplit, build_scenario, load_split
from datasets import SourceSpec, SourceDataset, resolve_source


MANIFEST_FILE = 'manifest.json'

SECTIONS = {
    'hscl': HSCLConfig,
    'scenario': ScenarioSpec,
    'augmentation': AugmentationPolicy,
    'encoder': EncoderSpec,
    'source': SourceSpec,
    'external': SourceSpec,
    'test_anomaly': SourceSpec,
}

# CLI flag -> HSCLConfig field
OVERRIDES = {
    'epochs': 'epochs',
    'w_delta': 'w_delta',
    'k': 'K',
    'lambda1': 'lambda1',
    'lambda2': 'lambda2',
    'seed': 'seed',
}


# ==================== SCHEMA ====================

def _type_ok(value: Any, hint: Any) -> bool:
    origin = typing.get_origin(hint)
    if origin is Union:
        return any(_type_ok(value, arm) for arm in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            return False
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return all(_type_ok(v, args[0]) for v in value)
        return len(args) == len(value) and all(_type_ok(v, a) for v, a in zip(value, args))
    if isinstance(hint, type) and issubclass(hint, Enum):
        return isinstance(value, hint) or value in {m.value for m in hint}
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    return True


def parse_section(cls, data: Any, path: str):
    """Validate one config section against its dataclass and build it"""
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{path}.{key}'")
        if not _type_ok(value, hints[key]):
            raise ConfigError(f"bad value for '{path}.{key}': {value!r}")
    builder = getattr(cls, 'from_dict', None)
    try:
        return builder(data) if builder else cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{path}': {e}") from e


def _with_defaults(section: Any, **defaults) -> Any:
    if not isinstance(section, dict):
        return section
    return {**defaults, **section}


# ==================== RUN CONFIG ====================

@dataclass(frozen=True)
class RunConfig:
    """Every section of a run config file, resolved"""
    hscl: HSCLConfig
    scenario: ScenarioSpec
    augmentation: AugmentationPolicy
    encoder: EncoderSpec
    source: SourceSpec
    external: Optional[SourceSpec] = None
    test_anomaly: Optional[SourceSpec] = None
    encoder_shape_given: bool = field(default=False, compare=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config key '{unknown[0]}'")
        if 'scenario' not in data:
            raise ConfigError("missing 'scenario' section (scenario.normal_class is required)")

        hscl_data = _with_defaults(data.get('hscl', {}), device=os.environ.get('HSCL_DEVICE', 'cpu'))
        hscl = parse_section(HSCLConfig, hscl_data, 'hscl')
        scenario_data = _with_defaults(data['scenario'], seed=hscl.seed)
        scenario = parse_section(ScenarioSpec, scenario_data, 'scenario')
        source = parse_section(SourceSpec, data.get('source', {}), 'source')

        encoder_data = _with_defaults(data.get('encoder', {}), projection_dim=hscl.D)
        shape_given = isinstance(encoder_data, dict) and 'input_shape' in encoder_data
        if not shape_given and source.kind == 'blobs':
            encoder_data = _with_defaults(encoder_data, input_shape=[source.dim])
        encoder = parse_section(EncoderSpec, encoder_data, 'encoder')
        if encoder.projection_dim != hscl.D:
            raise ConfigError(f"encoder.projection_dim {encoder.projection_dim} != hscl.D {hscl.D}")

        aug_data = data.get('augmentation', {})
        if encoder.kind is EncoderKind.MLP:
            aug_data = _with_defaults(aug_data, rotations=[])
        augmentation = parse_section(AugmentationPolicy, aug_data, 'augmentation')
        if encoder.kind is EncoderKind.MLP and augmentation.rotations:
            raise ConfigError("rotations need image data; the MLP encoder runs shift-free")

        optional = {
            key: parse_section(SourceSpec, data[key], key) if data.get(key) is not None else None
            for key in ('external', 'test_anomaly')
        }
        return cls(hscl=hscl, scenario=scenario, augmentation=augmentation, encoder=encoder,
                   source=source, encoder_shape_given=shape_given or source.kind == 'blobs', **optional)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'hscl': self.hscl.to_dict(),
            'scenario': self.scenario.to_dict(),
            'augmentation': self.augmentation.to_dict(),
            'encoder': self.encoder.to_dict(),
            'source': self.source.to_dict(),
            'external': self.external.to_dict() if self.external else None,
            'test_anomaly': self.test_anomaly.to_dict() if self.test_anomaly else None,
        }

    def with_overrides(self, **flags) -> 'RunConfig':
        """Apply CLI flags (None means not given); --seed also reseeds the scenario"""
        changes = {OVERRIDES[k]: v for k, v in flags.items() if v is not None}
        if not changes:
            return self
        try:
            hscl = replace(self.hscl, **changes)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        scenario = replace(self.scenario, seed=changes['seed']) if 'seed' in changes else self.scenario
        return replace(self, hscl=hscl, scenario=scenario)

    def encoder_for(self, dataset: SourceDataset) -> EncoderSpec:
        """Encoder spec whose input shape matches the dataset"""
        shape = dataset.datum_shape
        if self.encoder_shape_given and tuple(self.encoder.input_shape) != shape:
            raise ConfigError(f"encoder.input_shape {self.encoder.input_shape} != dataset shape {shape}")
        return replace(self.encoder, input_shape=shape)


def load_run_config(path: Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return RunConfig.from_dict(data)


# ==================== MANIFEST ====================

@dataclass
class RunManifest:
    """Root record of a run directory: config echo, version, seed, artifacts"""
    config: Dict[str, Any]
    seed: int
    code_version: str = __version__
    split_manifest: Optional[str] = None
    artifacts: Dict[str, str] = field(default_factory=dict)

    def write(self, run_dir: Path) -> Path:
        path = Path(run_dir) / MANIFEST_FILE
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write('\n')
        return path

    @classmethod
    def read(cls, run_dir: Path) -> 'RunManifest':
        path = Path(run_dir) / MANIFEST_FILE
        if not path.exists():
            raise ArtifactError(f"no run manifest in {run_dir}")
        with open(path, 'r', encoding='utf-8') as f:
            return cls(**json.load(f))

    def run_config(self) -> RunConfig:
        data = {k: v for k, v in self.config.items() if v is not None}
        return RunConfig.from_dict(data)


# ==================== DATA ====================

def _pinned(spec: Optional[SourceSpec], seed: int) -> Optional[SourceSpec]:
    """Blob sources without their own seed take the run seed, recorded explicitly"""
    if spec is not None and spec.kind == 'blobs' and spec.seed is None:
        return replace(spec, seed=seed)
    return spec


def materialise_split(cfg: RunConfig, manifest: Optional[Dict[str, Any]] = None
                      ) -> Tuple[ScenarioSplit, SourceDataset, Dict[str, Any]]:
    """
    Resolve the datasets and build (or re-load) the split.

    A split manifest pins the sources it was built from, so later runs with a
    different --seed still see the same data.

    Returns:
        (split, source dataset, source sections to store in a split manifest)
    """
    specs = {
        'source': cfg.source,
        'external': cfg.external,
        'test_anomaly': cfg.test_anomaly,
    }
    if manifest is not None:
        for key in specs:
            if manifest.get(key) is not None:
                specs[key] = parse_section(SourceSpec, manifest[key], key)
    specs = {k: _pinned(v, cfg.scenario.seed) for k, v in specs.items()}
    datasets = {k: resolve_source(v) if v is not None else None for k, v in specs.items()}

    if manifest is not None:
        split = load_split(manifest, datasets['source'], datasets['external'], datasets['test_anomaly'])
    else:
        split = build_scenario(cfg.scenario, datasets['source'], datasets['external'], datasets['test_anomaly'])
    recorded = {k: v.to_dict() if v is not None else None for k, v in specs.items()}
    return split, datasets['source'], recorded
