"""
Dataset Sources
In-memory dataset handles: synthetic Gaussian blobs, directory-of-PNG image
folders and the binary record format.

Record file layout (little endian):
    magic      4 bytes  b"HSCR"
    count      uint32
    ndim       uint8
    shape      ndim x uint32   (per-sample shape)
    dtype      8 bytes         numpy dtype string, NUL padded (e.g. "<f4")
    labels     count x int64
    data       count x prod(shape) items of dtype
"""

import os
import struct
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, List, Tuple, Dict, Any

import numpy as np
from PIL import Image
from scipy.spatial.distance import pdist

from core import ScenarioError, ConfigError


logger = logging.getLogger('HSCLDatasets')

RECORD_MAGIC = b'HSCR'
RECORD_EXTENSION = '.hscr'
PNG_SPLITS = ('train', 'test')


@dataclass(eq=False)
class SourceDataset:
    """Labeled source pool; the test part is optional"""
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: Optional[np.ndarray] = None
    test_y: Optional[np.ndarray] = None
    class_names: Optional[List[str]] = None
    means: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.train_y)

    @property
    def has_test(self) -> bool:
        return self.test_x is not None

    @property
    def size(self) -> int:
        """Number of ids this dataset occupies (train + test)"""
        return len(self.train_y) + (len(self.test_y) if self.has_test else 0)

    @property
    def datum_shape(self) -> Tuple[int, ...]:
        return tuple(self.train_x.shape[1:])


# ==================== SYNTHETIC ====================

def make_synthetic_blobs(n_classes: int, dim: int, separation: float, n_per_class: int,
                         seed: int) -> SourceDataset:
    """
    Gaussian clusters with unit covariance.

    Class means are random directions rescaled so that the closest pair is
    exactly `separation` apart. Class 0 is the normal class by convention.
    """
    if n_classes < 2:
        raise ScenarioError(f"need at least 2 classes, got {n_classes}")
    if not separation > 0:
        raise ScenarioError(f"separation must be > 0, got {separation}")
    if dim < 1 or n_per_class < 1:
        raise ScenarioError("dim and n_per_class must be >= 1")

    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_classes, dim))
    means *= separation / pdist(means).min()

    labels = np.repeat(np.arange(n_classes), n_per_class)
    data = means[labels] + rng.normal(size=(len(labels), dim))
    return SourceDataset(
        name=f'blobs-{n_classes}x{dim}',
        train_x=data.astype(np.float32),
        train_y=labels.astype(np.int64),
        class_names=[str(c) for c in range(n_classes)],
        means=means,
    )


# ==================== PNG FOLDERS ====================

def _load_png_split(split_dir: Path, class_names: List[str]) -> Tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for label, name in enumerate(class_names):
        class_dir = split_dir / name
        if not class_dir.is_dir():
            continue
        for path in sorted(class_dir.glob('*.png')):
            with Image.open(path) as img:
                img = img.convert('L') if img.mode in ('L', 'I', 'I;16', '1') else img.convert('RGB')
                arr = np.asarray(img, dtype=np.float32) / 255.0
            arr = arr[None, :, :] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(label)
    if not images:
        raise ScenarioError(f"no PNG images under {split_dir}")
    shapes = {a.shape for a in images}
    if len(shapes) > 1:
        raise ScenarioError(f"mixed image shapes under {split_dir}: {sorted(shapes)}")
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def load_png_directory(root: Path) -> SourceDataset:
    """
    Load root/train/<class>/*.png (and root/test/<class>/*.png when present).

    Class names are sorted and mapped to integer labels.
    """
    root = Path(root)
    train_dir = root / 'train'
    if not train_dir.is_dir():
        raise ScenarioError(f"missing train directory: {train_dir}")
    class_names = sorted(p.name for p in train_dir.iterdir() if p.is_dir())
    train_x, train_y = _load_png_split(train_dir, class_names)
    test_x = test_y = None
    if (root / 'test').is_dir():
        test_x, test_y = _load_png_split(root / 'test', class_names)
    logger.info(f"Loaded PNG dataset {root.name}: {len(train_y)} train images, {len(class_names)} classes")
    return SourceDataset(root.name, train_x, train_y, test_x, test_y, class_names)


# ==================== RECORD FILES ====================

def write_records(path: Path, data: np.ndarray, labels: np.ndarray) -> None:
    """Write samples and labels in the binary record format"""
    data = np.ascontiguousarray(data)
    labels = np.asarray(labels, dtype='<i8')
    if len(data) != len(labels):
        raise ScenarioError("data and labels differ in length")
    dtype = data.dtype.newbyteorder('<') if data.dtype.byteorder == '>' else data.dtype
    dtype_str = dtype.str.encode('ascii')
    if len(dtype_str) > 8:
        raise ScenarioError(f"dtype {dtype.str} not representable")
    shape = data.shape[1:]
    with open(path, 'wb') as f:
        f.write(struct.pack('<4sIB', RECORD_MAGIC, len(data), len(shape)))
        f.write(struct.pack(f'<{len(shape)}I', *shape))
        f.write(dtype_str.ljust(8, b'\0'))
        f.write(labels.tobytes())
        f.write(data.astype(dtype, copy=False).tobytes())


def read_records(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a record file written by write_records"""
    with open(path, 'rb') as f:
        raw = f.read()
    header = struct.calcsize('<4sIB')
    if len(raw) < header:
        raise ScenarioError(f"truncated record file {path}")
    magic, count, ndim = struct.unpack_from('<4sIB', raw, 0)
    if magic != RECORD_MAGIC:
        raise ScenarioError(f"bad magic in {path}: {magic!r}")
    offset = header
    if len(raw) < offset + 4 * ndim + 8:
        raise ScenarioError(f"truncated record file {path}: header cut at {len(raw)} bytes")
    shape = struct.unpack_from(f'<{ndim}I', raw, offset)
    offset += 4 * ndim
    try:
        dtype = np.dtype(raw[offset:offset + 8].rstrip(b'\0').decode('ascii'))
    except (UnicodeDecodeError, TypeError) as e:
        raise ScenarioError(f"bad dtype in {path}: {e}") from e
    offset += 8
    n_items = count * int(np.prod(shape, dtype=np.int64))
    expected = offset + 8 * count + n_items * dtype.itemsize
    if len(raw) < expected:
        raise ScenarioError(f"truncated record file {path}: {len(raw)} < {expected} bytes")
    labels = np.frombuffer(raw, dtype='<i8', count=count, offset=offset).copy()
    offset += 8 * count
    data = np.frombuffer(raw, dtype=dtype, count=n_items, offset=offset).reshape((count, *shape)).copy()
    return data, labels


def load_record_dataset(root: Path) -> SourceDataset:
    """Load root/train.hscr and, if present, root/test.hscr"""
    root = Path(root)
    train_path = root / f'train{RECORD_EXTENSION}'
    if not train_path.exists():
        raise ScenarioError(f"missing record file {train_path}")
    train_x, train_y = read_records(train_path)
    test_x = test_y = None
    test_path = root / f'test{RECORD_EXTENSION}'
    if test_path.exists():
        test_x, test_y = read_records(test_path)
    return SourceDataset(root.name, train_x, train_y, test_x, test_y)


# ==================== SOURCE SPECS ====================

@dataclass(frozen=True)
class SourceSpec:
    """Where a dataset comes from, as written in the run config"""
    kind: str = 'blobs'
    path: Optional[str] = None
    n_classes: int = 10
    dim: int = 32
    separation: float = 6.0
    n_per_class: int = 1000
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ('blobs', 'png', 'records'):
            raise ConfigError(f"unknown source kind '{self.kind}'")
        if self.kind != 'blobs' and not self.path:
            raise ConfigError(f"source kind '{self.kind}' needs a path")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def data_root() -> Path:
    return Path(os.environ.get('HSCL_DATA_DIR', '.'))


def resolve_source(spec: SourceSpec, seed: int = 0) -> SourceDataset:
    """Materialise a dataset from its spec; relative paths hang off HSCL_DATA_DIR"""
    if spec.kind == 'blobs':
        return make_synthetic_blobs(spec.n_classes, spec.dim, spec.separation, spec.n_per_class,
                                    seed if spec.seed is None else spec.seed)
    path = Path(spec.path)
    if not path.is_absolute():
        path = data_root() / path
    if spec.kind == 'png':
        return load_png_directory(path)
    return load_record_dataset(path)
