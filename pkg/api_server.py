from flask import Flask, request, jsonify, send_file
from flask_cors import CORS
import os
import sys
from pathlib import Path
import logging
from datetime import datetime
import traceback

from config import ConfigError, RunConfig, apply_overrides
from engine import inspect_scene
from metrics import evaluate
from model import Parameters, init_parameters, load_checkpoint

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

app = Flask(__name__)
CORS(app)  # Enable CORS for all routes

# Configuration
OUTPUT_ROOT = Path(os.environ.get("POINTHEAD_OUTPUT_ROOT", "runs"))
MAX_EVAL_SEQUENCES = 256
ASSIGNERS = ("one2one", "maxiou", "cd", "iv")

# Loaded model
loaded_params = None
loaded_checkpoint = None


@app.route('/health', methods=['GET'])
def health_check():
    """Health check endpoint"""
    return jsonify({
        'status': 'healthy',
        'timestamp': datetime.now().isoformat(),
        'checkpoint_loaded': loaded_params is not None,
        'checkpoint': loaded_checkpoint
    })


@app.route('/assign', methods=['POST'])
def assign():
    """
    Label one synthetic scene

    Expected JSON payload:
    {
        "assigner": "iv",
        "scene_seed": 7,
        "leading": true,
        "spread": "std",
        "top_k": null
    }
    """
    try:
        data = request.get_json(silent=True)

        if not data or 'assigner' not in data or 'scene_seed' not in data:
            return jsonify({'error': 'assigner and scene_seed are required'}), 400
        if data['assigner'] not in ASSIGNERS:
            return jsonify({'error': f"assigner must be one of {', '.join(ASSIGNERS)}"}), 400

        overrides = {
            'strategy': data['assigner'],
            'leading': data.get('leading', False),
            'spread': data.get('spread', 'std'),
            'top_k': data.get('top_k'),
        }
        cfg = apply_overrides(RunConfig(), overrides)
        params = loaded_params
        if params is not None and params.config != cfg.model:
            params = None
        scene_seed = int(data['scene_seed'])

        logger.info(f"Assigning scene {scene_seed} with {data['assigner']}")
        inspection = inspect_scene(cfg, scene_seed, params)
        return jsonify({
            'success': True,
            'scene_seed': scene_seed,
            'trained_model': params is not None,
            **inspection.to_dict(cfg)
        })

    except (ConfigError, ValueError) as e:
        logger.error(f"Invalid assign request: {e}")
        return jsonify({'error': str(e)}), 400
    except Exception as e:
        logger.error(f"Error assigning scene: {e}")
        logger.error(traceback.format_exc())
        return jsonify({'error': f'Failed to assign scene: {str(e)}'}), 500


@app.route('/load_checkpoint', methods=['POST'])
def load_checkpoint_route():
    """Load a checkpoint.json for /evaluate and /assign"""
    global loaded_params, loaded_checkpoint

    try:
        data = request.get_json(silent=True)
        if not data or 'checkpoint' not in data:
            return jsonify({'error': 'checkpoint path is required'}), 400

        path = Path(data['checkpoint'])
        loaded_params, _ = load_checkpoint(path)
        loaded_checkpoint = str(path)
        return jsonify({
            'success': True,
            'message': 'Checkpoint loaded',
            'checkpoint': loaded_checkpoint,
            'parameter_count': loaded_params.count()
        })

    except FileNotFoundError as e:
        logger.error(f"Checkpoint not found: {e}")
        return jsonify({'error': str(e)}), 404
    except Exception as e:
        logger.error(f"Error loading checkpoint: {e}")
        logger.error(traceback.format_exc())
        return jsonify({'error': f'Failed to load checkpoint: {str(e)}'}), 500


@app.route('/evaluate', methods=['POST'])
def evaluate_route():
    """
    Evaluate the loaded model (or a fresh one with "fresh": true)

    Expected JSON payload:
    {
        "sequences": 8,
        "seed": 42,
        "fresh": false
    }
    """
    try:
        data = request.get_json(silent=True) or {}
        sequences = int(data.get('sequences', 8))
        seed = int(data.get('seed', 42))

        if not 1 <= sequences <= MAX_EVAL_SEQUENCES:
            return jsonify({'error': f'sequences must lie in [1, {MAX_EVAL_SEQUENCES}]'}), 400

        if data.get('fresh'):
            params: Parameters = init_parameters(RunConfig().model, seed)
        elif loaded_params is not None:
            params = loaded_params
        else:
            return jsonify({'error': 'No checkpoint loaded; POST /load_checkpoint or pass "fresh": true'}), 400

        logger.info(f"Evaluating {sequences} sequences with seed {seed}")
        report = evaluate(params, sequences, seed)
        return jsonify({'success': True, **report.to_dict()})

    except (TypeError, ValueError) as e:
        logger.error(f"Invalid evaluate request: {e}")
        return jsonify({'error': str(e)}), 400
    except Exception as e:
        logger.error(f"Error evaluating: {e}")
        logger.error(traceback.format_exc())
        return jsonify({'error': f'Failed to evaluate: {str(e)}'}), 500


@app.route('/list_runs', methods=['GET'])
def list_runs():
    """List run directories and their files"""
    try:
        runs = []
        if OUTPUT_ROOT.exists():
            for run_dir in sorted(p for p in OUTPUT_ROOT.iterdir() if p.is_dir()):
                files = sorted(f.name for f in run_dir.iterdir() if f.is_file())
                runs.append({
                    'run': run_dir.name,
                    'files': files,
                    'download_urls': [f"/download/{run_dir.name}/{name}" for name in files]
                })

        return jsonify({
            'success': True,
            'output_root': str(OUTPUT_ROOT),
            'runs': runs
        })

    except Exception as e:
        logger.error(f"Error listing runs: {e}")
        return jsonify({'error': f'Failed to list runs: {str(e)}'}), 500


@app.route('/download/<run>/<filename>', methods=['GET'])
def download(run, filename):
    """Download a run artifact"""
    try:
        root = OUTPUT_ROOT.resolve()
        file_path = (OUTPUT_ROOT / run / filename).resolve()
        if root not in file_path.parents or not file_path.is_file():
            return jsonify({'error': 'File not found'}), 404

        return send_file(
            file_path,
            as_attachment=True,
            download_name=filename
        )

    except Exception as e:
        logger.error(f"Error downloading file: {e}")
        return jsonify({'error': f'Failed to download file: {str(e)}'}), 500


@app.errorhandler(404)
def not_found(error):
    return jsonify({'error': 'Endpoint not found'}), 404


@app.errorhandler(500)
def internal_error(error):
    return jsonify({'error': 'Internal server error'}), 500


def debug_requested(argv) -> bool:
    """The Flask debugger is opt-in: --debug on the command line or POINTHEAD_DEBUG=1"""
    return "--debug" in argv or os.environ.get("POINTHEAD_DEBUG") == "1"


if __name__ == '__main__':
    OUTPUT_ROOT.mkdir(parents=True, exist_ok=True)

    logger.info("Starting tracking head API server...")
    logger.info(f"Output root: {OUTPUT_ROOT}")

    app.run(host='0.0.0.0', port=5000, debug=debug_requested(sys.argv[1:]))
