#!/usr/bin/env python3
"""
Startup script for the tracking head API server.

Validates default_config.json, optionally preloads a checkpoint so /evaluate
works right away, then serves api_server.app.
"""

import argparse
import sys
from pathlib import Path

DEFAULT_CONFIG = Path("default_config.json")


def check_config(path: Path) -> bool:
    """Load the shipped config and print the sizes the server will use"""
    from config import ConfigError, load_config

    try:
        cfg = load_config(path)
    except FileNotFoundError:
        print(f"❌ {path} not found; start the server from the repository root")
        return False
    except ConfigError as e:
        print(f"❌ {path} is invalid: {e}")
        return False

    print(f"✅ Config ok: {cfg.model.search_size}px search, {cfg.model.grid}x{cfg.model.grid} grid, "
          f"assigner {cfg.assigner.strategy.value}")
    return True


def preload_checkpoint(server, checkpoint: str) -> bool:
    try:
        params, _ = server.load_checkpoint(checkpoint)
    except (FileNotFoundError, ValueError, KeyError) as e:
        print(f"❌ Could not load checkpoint {checkpoint}: {e}")
        return False

    server.loaded_params = params
    server.loaded_checkpoint = checkpoint
    print(f"✅ Checkpoint loaded: {checkpoint} ({params.count()} parameters)")
    return True


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Start the tracking head API server")
    parser.add_argument("--host", default="0.0.0.0")
    parser.add_argument("--port", type=int, default=5000)
    parser.add_argument("--checkpoint", default=None, help="checkpoint.json to serve from the start")
    parser.add_argument("--output-root", default=None, help="Run directories listed by /list_runs")
    parser.add_argument("--debug", action="store_true", help="Enable the Flask debugger and reloader")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    print("🚀 Tracking Head API Server")
    print("=" * 40)

    try:
        import api_server
    except ImportError as e:
        print(f"\n❌ Import error: {e}")
        print("Please install dependencies: pip install -r requirements.txt")
        return 1

    if not check_config(DEFAULT_CONFIG):
        return 1
    if args.output_root:
        api_server.OUTPUT_ROOT = Path(args.output_root)
    api_server.OUTPUT_ROOT.mkdir(parents=True, exist_ok=True)
    print(f"✅ Output root: {api_server.OUTPUT_ROOT}")
    if args.checkpoint and not preload_checkpoint(api_server, args.checkpoint):
        return 1

    print(f"\n📋 Serving on http://localhost:{args.port} (health: /health), Ctrl+C to stop")
    print("=" * 40)
    try:
        # the reloader would re-import api_server and drop a preloaded checkpoint
        api_server.app.run(host=args.host, port=args.port, debug=args.debug,
                           use_reloader=args.debug and not args.checkpoint)
    except KeyboardInterrupt:
        print("\n\n🛑 Server stopped by user")
    except OSError as e:
        print(f"\n❌ Error starting server: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
