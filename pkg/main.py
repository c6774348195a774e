"""
HSCL - Command Line and Scoring Service
click command group (make-scenario, train, eval, ablate, plot-embeddings,
serve) and the Flask application factory for the scoring API.
"""

import os
import sys
import shutil
import logging
from functools import wraps
from pathlib import Path

import click
from dotenv import load_dotenv
from flask import Flask, jsonify
from flask_cors import CORS

# Load environment variables from .env file
load_dotenv()

from core import HSCLError, ArtifactError, LossDivergenceError, __version__
from ablation import load_grid, run_grid
from api_routes import api
from evaluation import (
    Reducer, SCORES_FILE, SUMMARY_FILE, score_split, summarize, write_scores, write_summary,
    export_embeddings, render_scatter,
)
from run_config import RunConfig, RunManifest, load_run_config, materialise_split
from scenarios import write_split_manifest, read_split_manifest
from trainer import METRICS_FILE, fit, restore_state
from encoder import CHECKPOINT_BLOB


logger = logging.getLogger('HSCL')

SPLIT_FILE = 'split.json'
EMBEDDINGS_CSV = 'embeddings.csv'
EMBEDDINGS_PNG = 'embeddings.png'
IO_EXIT_CODE = 3


def configure_logging(level: str = None) -> None:
    level = (level or os.environ.get('HSCL_LOG_LEVEL', 'INFO')).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')


# ==================== FLASK APP ====================

def create_app(run_dir=None):
    """Application factory: serves the trained run in run_dir (or HSCL_RUN_DIR)"""
    app = Flask(__name__)

    run_dir = run_dir or os.environ.get('HSCL_RUN_DIR')
    if not run_dir:
        raise ValueError("HSCL_RUN_DIR environment variable is required! Check your .env file.")

    app.config['JSON_SORT_KEYS'] = False
    cors_origins = os.environ.get('CORS_ORIGINS', 'http://localhost:3000,http://127.0.0.1:3000')
    allowed_origins = [origin.strip() for origin in cors_origins.split(',') if origin.strip()]
    CORS(app, resources={r"/api/*": {"origins": allowed_origins}})

    manifest = RunManifest.read(run_dir)
    cfg = manifest.run_config()
    app.extensions['hscl'] = {
        'run_dir': str(run_dir),
        'manifest': {'config': manifest.config, 'seed': manifest.seed,
                     'code_version': manifest.code_version, 'artifacts': manifest.artifacts},
        'state': restore_state(run_dir, cfg.augmentation),
    }
    logger.info(f"Serving run {run_dir} (epoch {app.extensions['hscl']['state'].epoch})")

    app.register_blueprint(api)

    # Error handlers
    @app.errorhandler(404)
    def not_found(error):
        return jsonify({'success': False, 'error': 'Resource not found'}), 404

    @app.errorhandler(500)
    def internal_error(error):
        return jsonify({'success': False, 'error': 'Internal server error'}), 500

    @app.errorhandler(400)
    def bad_request(error):
        return jsonify({'success': False, 'error': 'Bad request'}), 400

    # Root endpoint
    @app.route('/')
    def index():
        return jsonify({
            'name': 'HSCL Scoring API',
            'version': __version__,
            'description': 'Normality scores from a trained hierarchical contrastive encoder',
            'endpoints': {
                'health': '/api/health',
                'run': '/api/run',
                'score': '/api/score',
            }
        })

    return app


# ==================== CLI PLUMBING ====================

class HSCLGroup(click.Group):
    """Usage errors exit 1, the same code as config errors"""

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = 1
            raise


def handle_errors(f):
    """Map library exceptions to exit codes in one place"""
    @wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except LossDivergenceError as e:
            logger.error(f"Training diverged: {e}")
            click.echo(f"Error: {e}", err=True)
            click.echo(f"Diagnostics: {e.diagnostics}", err=True)
            sys.exit(e.exit_code)
        except HSCLError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
        except OSError as e:
            logger.error(f"I/O error: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(IO_EXIT_CODE)
    return wrapper


def _claim_file(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise ArtifactError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _claim_dir(path: Path, force: bool, files=None) -> Path:
    """
    Make sure path is a directory we may write into.

    With `files`, only those names count as conflicts (the directory may hold
    other artifacts); otherwise any existing content does.
    """
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise ArtifactError(f"{path} is not a directory")
    if path.is_dir():
        taken = [path / name for name in files if (path / name).exists()] if files else list(path.iterdir())
        if taken and not force:
            raise ArtifactError(f"{taken[0]} exists; pass --force to overwrite")
        if taken and files is None:
            shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_run(run_dir: Path, split_path=None):
    manifest = RunManifest.read(run_dir)
    cfg = manifest.run_config()
    split_path = Path(split_path) if split_path else Path(run_dir) / SPLIT_FILE
    split, _, _ = materialise_split(cfg, read_split_manifest(split_path))
    state = restore_state(run_dir, cfg.augmentation)
    return cfg, split, state


# ==================== COMMANDS ====================

@click.group(cls=HSCLGroup)
@click.option('--log-level', default=None, help='Logging level (default: HSCL_LOG_LEVEL or INFO)')
@click.version_option(__version__, prog_name='hscl')
def cli(log_level):
    """Hierarchical semi-supervised contrastive anomaly detection"""
    configure_logging(log_level)


@cli.command('make-scenario')
@click.argument('config_path', type=click.Path(dir_okay=False, path_type=Path))
@click.option('--out', type=click.Path(dir_okay=False, path_type=Path), required=True, help='Split manifest path')
@click.option('--seed', type=int, default=None)
@click.option('--force', is_flag=True, help='Overwrite an existing manifest')
@handle_errors
def make_scenario(config_path, out, seed, force):
    """Build the scenario split described by CONFIG_PATH and write its manifest"""
    cfg = load_run_config(config_path).with_overrides(seed=seed)
    _claim_file(out, force)
    split, _, sources = materialise_split(cfg)
    write_split_manifest(out, split, extra=sources)
    for name, count in split.counts().items():
        click.echo(f"{name}: {count}")
    click.echo(f"Split manifest written to {out}")


@cli.command()
@click.argument('config_path', type=click.Path(dir_okay=False, path_type=Path))
@click.option('--split', 'split_path', type=click.Path(dir_okay=False, path_type=Path), default=None,
              help='Split manifest from make-scenario (default: build from the config)')
@click.option('--out', type=click.Path(file_okay=False, path_type=Path), required=True, help='Run directory')
@click.option('--epochs', type=int, default=None)
@click.option('--w-delta', 'w_delta', type=float, default=None)
@click.option('--k', 'k', type=int, default=None, help='Number of prototypes')
@click.option('--lambda1', type=float, default=None)
@click.option('--lambda2', type=float, default=None)
@click.option('--seed', type=int, default=None)
@click.option('--force', is_flag=True, help='Replace an existing run directory')
@handle_errors
def train(config_path, split_path, out, epochs, w_delta, k, lambda1, lambda2, seed, force):
    """Train an encoder and prototypes; writes manifest, metrics and checkpoint into OUT"""
    cfg = load_run_config(config_path).with_overrides(
        epochs=epochs, w_delta=w_delta, k=k, lambda1=lambda1, lambda2=lambda2, seed=seed)
    split_manifest = read_split_manifest(split_path) if split_path else None
    split, source, sources = materialise_split(cfg, split_manifest)
    cfg = RunConfig(hscl=cfg.hscl, scenario=split.spec, augmentation=cfg.augmentation,
                    encoder=cfg.encoder_for(source), source=cfg.source, external=cfg.external,
                    test_anomaly=cfg.test_anomaly, encoder_shape_given=True)

    run_dir = _claim_dir(out, force)
    write_split_manifest(run_dir / SPLIT_FILE, split, extra=sources)
    RunManifest(
        config=cfg.to_dict(),
        seed=cfg.hscl.seed,
        split_manifest=str(split_path) if split_path else SPLIT_FILE,
        artifacts={'checkpoint': CHECKPOINT_BLOB, 'metrics': METRICS_FILE, 'split': SPLIT_FILE,
                   'scores': SCORES_FILE, 'summary': SUMMARY_FILE},
    ).write(run_dir)

    state = fit(split, cfg.hscl, cfg.augmentation, cfg.encoder, run_dir=run_dir)
    last = state.history[-1]
    click.echo(f"Trained {state.epoch} epochs: total loss {last.total:.4f}")
    click.echo(f"Run written to {run_dir}")


@cli.command('eval')
@click.argument('run_dir', type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option('--split', 'split_path', type=click.Path(dir_okay=False, path_type=Path), default=None,
              help='Split manifest (default: the one stored in RUN_DIR)')
@click.option('--out', type=click.Path(file_okay=False, path_type=Path), default=None,
              help='Output directory (default: RUN_DIR)')
@click.option('--force', is_flag=True, help='Overwrite existing scores and summary')
@handle_errors
def evaluate(run_dir, split_path, out, force):
    """Score the test set of a trained run; writes scores.csv and summary.json"""
    out = _claim_dir(out or run_dir, force, files=[SCORES_FILE, SUMMARY_FILE])
    _, split, state = _load_run(run_dir, split_path)
    scored = score_split(state, split)
    summary = summarize(scored, split.test, scenario=split.spec.to_dict())
    write_scores(out / SCORES_FILE, scored)
    write_summary(out / SUMMARY_FILE, summary)
    click.echo(f"AUROC: {summary['auroc']:.4f}")
    click.echo(f"Summary written to {out / SUMMARY_FILE}")


@cli.command()
@click.argument('config_path', type=click.Path(dir_okay=False, path_type=Path))
@click.option('--grid', 'grid_path', type=click.Path(dir_okay=False, path_type=Path), required=True,
              help='JSON grid: settings, w_delta, K, seeds')
@click.option('--split', 'split_path', type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option('--out', type=click.Path(dir_okay=False, path_type=Path), required=True, help='Results CSV')
@click.option('--workers', type=click.IntRange(min=1), default=1, help='Worker processes')
@click.option('--force', is_flag=True, help='Overwrite an existing results file')
@handle_errors
def ablate(config_path, grid_path, split_path, out, workers, force):
    """Train and score every cell of an ablation grid"""
    cfg = load_run_config(config_path)
    grid = load_grid(grid_path, cfg)
    _claim_file(out, force)
    split_manifest = read_split_manifest(split_path) if split_path else None
    results = run_grid(cfg, grid, split_manifest, workers=workers)
    results.to_csv(out, index=False)
    click.echo(results.to_string(index=False))
    click.echo(f"{len(results)} rows written to {out}")


@cli.command('plot-embeddings')
@click.argument('run_dir', type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option('--split', 'split_path', type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option('--out', type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option('--reducer', type=click.Choice([r.value for r in Reducer]), default=Reducer.TSNE.value)
@click.option('--no-image', is_flag=True, help='Only write the CSV')
@click.option('--force', is_flag=True)
@handle_errors
def plot_embeddings(run_dir, split_path, out, reducer, no_image, force):
    """Export test-set embeddings (raw or t-SNE) and a scatter image"""
    out = _claim_dir(out, force, files=[EMBEDDINGS_CSV, EMBEDDINGS_PNG])
    cfg, split, state = _load_run(run_dir, split_path)
    table = export_embeddings(state, split.test, Reducer(reducer), seed=cfg.hscl.seed)
    table.to_csv(out / EMBEDDINGS_CSV, index=False)
    click.echo(f"Embeddings written to {out / EMBEDDINGS_CSV}")
    if not no_image:
        render_scatter(table, out / EMBEDDINGS_PNG)
        click.echo(f"Scatter written to {out / EMBEDDINGS_PNG}")


@cli.command()
@click.argument('run_dir', type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option('--host', default='127.0.0.1')
@click.option('--port', type=int, default=lambda: int(os.environ.get('PORT', 5000)))
@handle_errors
def serve(run_dir, host, port):
    """Serve the scoring API for a trained run (development server)"""
    app = create_app(run_dir)
    app.run(host=host, port=port, debug=os.environ.get('FLASK_DEBUG', 'false').lower() == 'true')


if __name__ == '__main__':
    cli()
