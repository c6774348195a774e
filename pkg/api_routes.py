"""
API Routes for the HSCL Scoring Service
Flask Blueprint exposing a trained run: health, run manifest and scoring.
"""

import logging
from datetime import datetime, timezone

import numpy as np
from flask import Blueprint, jsonify, request, current_app

from core import HSCLError, LabeledSample, SampleStatus, __version__
from evaluation import normality_score


logger = logging.getLogger('HSCLService')

# Create Blueprint
api = Blueprint('api', __name__, url_prefix='/api')


def _run():
    return current_app.extensions['hscl']


def _error(message: str, status: int):
    return jsonify({'success': False, 'error': message}), status


# ==================== HEALTH ====================

@api.route('/health', methods=['GET'])
def health_check():
    """API health check endpoint"""
    return jsonify({
        'status': 'healthy',
        'timestamp': datetime.now(timezone.utc).isoformat(),
        'version': __version__,
    })


# ==================== RUN ====================

@api.route('/run', methods=['GET'])
def run_info():
    """Manifest echo of the served run"""
    run = _run()
    state = run['state']
    return jsonify({
        'success': True,
        'run_dir': run['run_dir'],
        'epoch': state.epoch,
        'prototypes': state.bank.K if state.bank is not None else 0,
        'input_shape': list(state.encoder.spec.input_shape),
        'manifest': run['manifest'],
    })


# ==================== SCORING ====================

@api.route('/score', methods=['POST'])
def score():
    """
    Normality scores for raw samples; higher means more normal.

    Body: {"samples": [[...], ...], "ids": [...] (optional)}
    """
    state = _run()['state']
    data = request.get_json(silent=True) or {}
    samples = data.get('samples')
    if not isinstance(samples, list) or not samples:
        return _error('samples must be a non-empty list', 400)
    ids = data.get('ids', list(range(len(samples))))
    if not isinstance(ids, list) or len(ids) != len(samples):
        return _error('ids must be a list as long as samples', 400)
    if not state.config.use_sp:
        return _error('run was trained without prototypes; score it offline with k-NN', 409)

    try:
        x = np.asarray(samples, dtype=np.float32)
    except (TypeError, ValueError):
        return _error('samples must be numeric arrays of equal shape', 400)
    expected = tuple(state.encoder.spec.input_shape)
    if x.shape[1:] != expected:
        return _error(f'each sample must have shape {list(expected)}, got {list(x.shape[1:])}', 400)

    batch = [LabeledSample(id=i, datum=datum, status=SampleStatus.UNLABELED) for i, datum in zip(ids, x)]
    try:
        scored = normality_score(state, batch)
    except HSCLError as e:
        logger.error(f"Scoring failed: {e}")
        return _error(str(e), 500)

    return jsonify({
        'success': True,
        'scores': [{'id': s.id, 'score': s.score} for s in scored],
    })
