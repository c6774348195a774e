import pytest
import json

from main import cli, create_app
from conftest import tiny_run_config, TINY_DIM

def test_health(client):
    """Test the health endpoint"""
    response = client.get('/api/health')

    assert response.status_code == 200
    assert response.json['status'] == 'healthy'
    assert 'version' in response.json

def test_index(client):
    response = client.get('/')
    assert response.status_code == 200
    assert response.json['endpoints']['score'] == '/api/score'

def test_run_info(client, trained_run):
    """Test the manifest echo of the served run"""
    response = client.get('/api/run')

    assert response.status_code == 200
    assert response.json['success'] is True
    assert response.json['epoch'] == 2
    assert response.json['prototypes'] == 1
    assert response.json['input_shape'] == [TINY_DIM]
    assert response.json['manifest']['seed'] == 0

def test_score_samples(client):
    """Test scoring returns one bounded score per sample, keyed by id"""
    response = client.post('/api/score', json={
        'samples': [[0.0] * TINY_DIM, [8.0] * TINY_DIM],
        'ids': ['a', 'b'],
    })

    assert response.status_code == 200
    assert response.json['success'] is True
    scores = response.json['scores']
    assert [s['id'] for s in scores] == ['a', 'b']
    assert all(-1.0 - 1e-5 <= s['score'] <= 1.0 + 1e-5 for s in scores)

def test_score_default_ids(client):
    response = client.post('/api/score', json={'samples': [[1.0] * TINY_DIM] * 3})
    assert [s['id'] for s in response.json['scores']] == [0, 1, 2]

def test_score_is_repeatable(client):
    body = {'samples': [[0.5] * TINY_DIM]}
    first = client.post('/api/score', json=body).json['scores']
    assert client.post('/api/score', json=body).json['scores'] == first

@pytest.mark.parametrize('body, message', [
    ({}, 'non-empty list'),
    ({'samples': []}, 'non-empty list'),
    ({'samples': [[1.0] * TINY_DIM], 'ids': [1, 2]}, 'as long as samples'),
    ({'samples': [[1.0, 2.0]]}, 'shape'),
    ({'samples': [[1.0] * TINY_DIM, [1.0]]}, 'equal shape'),
    ({'samples': [['x'] * TINY_DIM]}, 'numeric'),
])
def test_score_bad_requests(client, body, message):
    """Test malformed scoring requests are rejected"""
    response = client.post('/api/score', json=body)

    assert response.status_code == 400
    assert response.json['success'] is False
    assert message in response.json['error']

def test_unknown_route(client):
    response = client.get('/api/nothing')
    assert response.status_code == 404
    assert response.json['error'] == 'Resource not found'

def test_score_without_prototypes(tmp_path, runner):
    """Test runs trained without S-P refuse online scoring"""
    config = tmp_path / 'nosp.json'
    config.write_text(json.dumps(tiny_run_config(use_sp=False)))
    run_dir = tmp_path / 'nosp'
    assert runner.invoke(cli, ['train', str(config), '--out', str(run_dir), '--epochs', '1']).exit_code == 0

    client = create_app(run_dir).test_client()
    response = client.post('/api/score', json={'samples': [[0.0] * TINY_DIM]})
    assert response.status_code == 409

def test_app_requires_run_dir(monkeypatch):
    monkeypatch.delenv('HSCL_RUN_DIR', raising=False)
    with pytest.raises(ValueError):
        create_app()
