"""
Command-line entry point: train, eval, ablate, assign and gradcheck.

Exit codes: 0 on success, 2 for usage and configuration errors, 1 for any other failure.
"""

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from config import (ConfigError, RunConfig, apply_overrides, from_flat, load_config, load_variants_file,
                    to_flat, variant_overrides)
from engine import inspect_scene, run_ablation, run_experiment
from gradcheck import run_suite, suite_passed
from loss import build_target_map
from metrics import EVAL_SEED_XOR, evaluate, model_scene_config, write_eval_outputs
from model import load_checkpoint
from report import ExperimentReportGenerator
from scenes import dump_scenes, generate_scene, write_pgm

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DUMP_SCENE_COUNT = 16


class UsageError(Exception):
    """Bad arguments detected after parsing"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointhead", description="Two-stage point-set tracking head: training, "
                                                                "evaluation and assignment ablations")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train one configuration")
    train.add_argument("--config", required=True, help="Flat JSON run config")
    train.add_argument("--out", required=True, help="Output directory")
    train.add_argument("--seed", type=int, default=None, help="Override the config seed")
    train.add_argument("--dump-scenes", default=None, help="Also write the first epoch's first scenes as PGM")

    ev = sub.add_parser("eval", help="Evaluate a checkpoint on held-out sequences")
    ev.add_argument("--checkpoint", required=True, help="checkpoint.json written by train")
    ev.add_argument("--sequences", type=int, default=64, help="Number of sequences")
    ev.add_argument("--seed", type=int, default=42, help="Evaluation seed")
    ev.add_argument("--out", required=True, help="Output directory")
    ev.add_argument("--no-docx", action="store_true", help="Skip eval_report.docx")

    ablate = sub.add_parser("ablate", help="Run assignment variants on the same scene stream")
    ablate.add_argument("--config", required=True, help="Base flat JSON run config")
    ablate.add_argument("--variants", default=None,
                        help="Comma list of one2one, maxiou, cd, iv, each optionally suffixed +lead")
    ablate.add_argument("--variants-file", default=None, help="JSON list of {name, overrides}")
    ablate.add_argument("--out", required=True, help="Output directory")
    ablate.add_argument("--workers", type=int, default=1, help="Parallel variant processes")
    ablate.add_argument("--no-docx", action="store_true", help="Skip ablation_report.docx")

    assign = sub.add_parser("assign", help="Print the refine-stage assignment of one scene")
    assign.add_argument("--assigner", required=True, choices=["one2one", "maxiou", "cd", "iv"])
    assign.add_argument("--scene-seed", type=int, required=True, help="Seed of the scene to label")
    assign.add_argument("--leading", action="store_true", help="Label with the init-stage boxes")
    assign.add_argument("--spread", choices=["std", "var"], default="std")
    assign.add_argument("--top-k", type=int, default=None)
    assign.add_argument("--config", default=None, help="Flat JSON run config for model/scene sizes")
    assign.add_argument("--checkpoint", default=None, help="Use trained boxes and scores")
    assign.add_argument("--dump", default=None, help="Write search, target and score maps as PGM")

    gc = sub.add_parser("gradcheck", help="Finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    return parser


def parse_variants(text: Optional[str], path: Optional[str]) -> List[Tuple[str, Dict]]:
    if bool(text) == bool(path):
        raise UsageError("ablate needs exactly one of --variants or --variants-file")
    if path:
        return load_variants_file(path)
    names = [n.strip() for n in text.split(",") if n.strip()]
    if not names:
        raise UsageError("--variants is empty")
    return [(name, variant_overrides(name)) for name in names]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = apply_overrides(cfg, {"seed": args.seed})
    logger.info(f"Resolved config: {json.dumps(to_flat(cfg), sort_keys=True)}")
    if args.dump_scenes:
        count = min(DUMP_SCENE_COUNT, cfg.scenes_per_epoch)
        dump_scenes(args.dump_scenes, [generate_scene(cfg.seed, i, cfg.scene_config) for i in range(count)])
    result = run_experiment(cfg, args.out)
    final = result.records[-1]
    print(f"final mean_train_iou {final.mean_train_iou:.6f}, loss {final.loss_total:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.sequences < 1:
        raise UsageError(f"--sequences must be >= 1, got {args.sequences}")
    params, trained_with = load_checkpoint(args.checkpoint)
    # sequences follow the training run's scene settings when the checkpoint carries them
    scene_cfg = from_flat(trained_with).scene_config if trained_with else model_scene_config(params)
    eval_config = {
        "checkpoint": str(args.checkpoint),
        "sequences": args.sequences,
        "seed": args.seed,
        "eval_seed": args.seed ^ EVAL_SEED_XOR,
        "search_size": scene_cfg.search_size,
        "template_size": scene_cfg.template_size,
        "sequence_length": scene_cfg.sequence_length,
    }
    logger.info(f"Resolved eval config: {json.dumps(eval_config, sort_keys=True)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval_config.json", "w") as f:
        json.dump(eval_config, f, indent=2)
    report = evaluate(params, args.sequences, args.seed, scene_cfg)
    write_eval_outputs(report, out)
    if not args.no_docx:
        ExperimentReportGenerator(out).create_eval_report(report, args.checkpoint)
    print(json.dumps(report.summary(), indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    variants = parse_variants(args.variants, args.variants_file)
    logger.info(f"Resolved base config: {json.dumps(to_flat(cfg), sort_keys=True)}")
    table = run_ablation(cfg, variants, args.out, workers=max(1, args.workers))
    if not args.no_docx:
        ExperimentReportGenerator(args.out).create_ablation_report(table, cfg, variants)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_assign(args) -> int:
    cfg = load_config(args.config) if args.config else None
    overrides = {"strategy": args.assigner, "leading": args.leading, "spread": args.spread, "top_k": args.top_k}
    cfg = apply_overrides(cfg, overrides) if cfg else apply_overrides(RunConfig(), overrides)

    params = None
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
        if params.config != cfg.model:
            cfg = apply_overrides(cfg, {k: getattr(params.config, k) for k in vars(params.config)})
    inspection = inspect_scene(cfg, args.scene_seed, params)
    scene, out, assignment = inspection.scene, inspection.output, inspection.assignment
    payload = {"scene_seed": args.scene_seed, **inspection.to_dict(cfg)}
    print(json.dumps(payload, indent=2))

    if args.dump:
        dump_dir = Path(args.dump)
        dump_dir.mkdir(parents=True, exist_ok=True)
        write_pgm(dump_dir / "search.pgm", scene.search)
        write_pgm(dump_dir / "target_map.pgm", build_target_map(assignment, scene.gt, cfg.model.stride).targets)
        if args.checkpoint:
            write_pgm(dump_dir / "score_map.pgm", out.score_map.data)
            best = out.best_bin()
            with open(dump_dir / "points.json", "w") as f:
                json.dump({"bin": best,
                           "init_points": out.init_points.data[best].tolist(),
                           "refine_points": out.refine_points.data[best].tolist(),
                           "box": out.predicted_box().to_list()}, f, indent=2)
        logger.info(f"Assignment dump written to {dump_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed)
    for r in results:
        print(f"{r.name:<20} {r.max_rel_error:.3e}  tol {r.tolerance:g}  {'ok' if r.passed else 'FAILED'}")
    return EXIT_OK if suite_passed(results) else EXIT_FAILURE


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "assign": cmd_assign,
    "gradcheck": cmd_gradcheck,
}


def parse_and_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse has already printed usage
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        logger.error(f"{args.command}: {e}")
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        logger.error(f"Traceback: {traceback.format_exc()}")
        return EXIT_FAILURE


def main() -> int:
    return parse_and_dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
