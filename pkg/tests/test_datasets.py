import pytest
import numpy as np
from PIL import Image
from scipy.spatial.distance import pdist

from core import ScenarioError, ConfigError
from datasets import (
    make_synthetic_blobs, write_records, read_records, load_record_dataset, load_png_directory,
    SourceSpec, resolve_source,
)


def test_blobs_reproducible():
    """(2 classes, dim 2, sep 6, 100 each, seed 7) -> 200 points, same every time"""
    a = make_synthetic_blobs(2, 2, 6.0, 100, seed=7)
    b = make_synthetic_blobs(2, 2, 6.0, 100, seed=7)
    assert a.train_x.shape == (200, 2)
    assert np.array_equal(a.train_x, b.train_x)
    assert np.array_equal(a.train_y, b.train_y)


def test_blobs_separation():
    ds = make_synthetic_blobs(5, 3, 4.0, 10, seed=0)
    assert pdist(ds.means).min() == pytest.approx(4.0)


def test_blobs_empirical_means():
    """Sample means within 3 sigma / sqrt(n) of the configured means"""
    n = 400
    ds = make_synthetic_blobs(3, 4, 6.0, n, seed=1)
    for c in range(3):
        mean = ds.train_x[ds.train_y == c].mean(axis=0)
        assert np.all(np.abs(mean - ds.means[c]) < 3.0 / np.sqrt(n))


@pytest.mark.parametrize('args', [(2, 2, 0.0, 10), (1, 2, 6.0, 10)])
def test_blobs_preconditions(args):
    with pytest.raises(ScenarioError):
        make_synthetic_blobs(*args, seed=0)


def test_records_round_trip(tmp_path):
    data = np.arange(2 * 3 * 4 * 4, dtype=np.float32).reshape(2, 3, 4, 4)
    labels = np.array([5, 7])
    write_records(tmp_path / 'x.hscr', data, labels)
    back, back_labels = read_records(tmp_path / 'x.hscr')
    assert back.dtype == np.float32
    assert np.array_equal(back, data)
    assert back_labels.tolist() == [5, 7]


def test_records_bad_magic(tmp_path):
    path = tmp_path / 'bad.hscr'
    path.write_bytes(b'NOPE' + b'\0' * 32)
    with pytest.raises(ScenarioError, match='bad magic'):
        read_records(path)


def test_records_truncated(tmp_path):
    path = tmp_path / 'cut.hscr'
    write_records(path, np.ones((4, 8), dtype=np.float64), np.zeros(4))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ScenarioError, match='truncated'):
        read_records(path)


@pytest.mark.parametrize('keep', [3, 11, 17])
def test_records_truncated_in_header(tmp_path, keep):
    """Cuts inside the magic, the shape and the dtype fields"""
    path = tmp_path / 'cut.hscr'
    write_records(path, np.ones((4, 8), dtype=np.float64), np.zeros(4))
    path.write_bytes(path.read_bytes()[:keep])
    with pytest.raises(ScenarioError, match='truncated'):
        read_records(path)


def test_records_bad_dtype(tmp_path):
    path = tmp_path / 'dtype.hscr'
    write_records(path, np.ones((2, 3), dtype=np.float32), np.zeros(2))
    raw = bytearray(path.read_bytes())
    raw[13:21] = b'zz'.ljust(8, b'\0')
    path.write_bytes(bytes(raw))
    with pytest.raises(ScenarioError, match='bad dtype'):
        read_records(path)


def test_record_dataset_directory(tmp_path):
    write_records(tmp_path / 'train.hscr', np.zeros((6, 3), np.float32), np.array([0, 0, 1, 1, 2, 2]))
    ds = load_record_dataset(tmp_path)
    assert len(ds) == 6 and not ds.has_test
    assert ds.datum_shape == (3,)


def _png(path, value, size=(4, 4), mode='RGB'):
    path.parent.mkdir(parents=True, exist_ok=True)
    color = (value, value, value) if mode == 'RGB' else value
    Image.new(mode, size, color).save(path)


def test_png_directory(tmp_path):
    for split in ('train', 'test'):
        for name, value in (('cat', 255), ('dog', 0)):
            _png(tmp_path / split / name / '0.png', value)
            _png(tmp_path / split / name / '1.png', value)
    ds = load_png_directory(tmp_path)
    assert ds.class_names == ['cat', 'dog']
    assert ds.train_x.shape == (4, 3, 4, 4)
    assert ds.has_test and len(ds.test_y) == 4
    assert ds.train_x[ds.train_y == 0].max() == pytest.approx(1.0)
    assert ds.train_x[ds.train_y == 1].max() == 0.0


def test_png_grayscale_channel(tmp_path):
    _png(tmp_path / 'train' / 'a' / '0.png', 128, mode='L')
    ds = load_png_directory(tmp_path)
    assert ds.datum_shape == (1, 4, 4)


def test_png_mixed_sizes(tmp_path):
    _png(tmp_path / 'train' / 'a' / '0.png', 1, size=(4, 4))
    _png(tmp_path / 'train' / 'a' / '1.png', 1, size=(5, 5))
    with pytest.raises(ScenarioError, match='mixed image shapes'):
        load_png_directory(tmp_path)


def test_resolve_source_relative_to_data_dir(tmp_path, monkeypatch):
    (tmp_path / 'set').mkdir()
    write_records(tmp_path / 'set' / 'train.hscr', np.zeros((2, 2), np.float32), np.array([0, 1]))
    monkeypatch.setenv('HSCL_DATA_DIR', str(tmp_path))
    ds = resolve_source(SourceSpec(kind='records', path='set'))
    assert len(ds) == 2


def test_resolve_blobs_uses_run_seed_unless_pinned():
    spec = SourceSpec(n_classes=2, dim=2, n_per_class=5)
    assert np.array_equal(resolve_source(spec, 3).train_x, make_synthetic_blobs(2, 2, 6.0, 5, 3).train_x)
    pinned = SourceSpec(n_classes=2, dim=2, n_per_class=5, seed=9)
    assert np.array_equal(resolve_source(pinned, 3).train_x, make_synthetic_blobs(2, 2, 6.0, 5, 9).train_x)


@pytest.mark.parametrize('kwargs', [{'kind': 'zip'}, {'kind': 'png'}])
def test_source_spec_invariants(kwargs):
    with pytest.raises(ConfigError):
        SourceSpec(**kwargs)
