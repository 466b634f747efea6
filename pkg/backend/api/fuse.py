# api/fuse.py
import argparse
import logging
from pathlib import Path

from core.pipeline import run_pipeline
from db import crud, database
from db.models import FusionConfig, PipelineMode, RansacConfig

logger = logging.getLogger(__name__)

ALL_MODES = "all"


def register(subparsers) -> None:
    parser = subparsers.add_parser("fuse", help="Estimate poses for every frame of a bundle")
    parser.add_argument("--bundle", type=Path, required=True)
    parser.add_argument("--mode", default=PipelineMode.FUSION.value,
                        choices=[m.value for m in PipelineMode] + [ALL_MODES])
    parser.add_argument("--seed", type=int, default=database.DEFAULT_SEED)
    parser.add_argument("--ransac-iters", type=int, default=database.RANSAC_ITERS)
    parser.add_argument("--reproj-px", type=float, default=database.REPROJ_PX)
    parser.add_argument("--confidence", type=float, default=0.999,
                        help="Adaptive RANSAC stopping confidence; 1 runs every iteration")
    parser.add_argument("--alpha", type=float, default=0.2, help="CMKD threshold fraction of the box diagonal")
    parser.add_argument("--u-aggregate", choices=["mean", "median"], default="mean")
    parser.add_argument("--seed-score-min", type=float, default=None,
                        help="Defer detection smoothing until a detection reaches this score")
    parser.add_argument("--threaded", action="store_true", help="Replay through the producer/consumer engine")
    parser.add_argument("--out", type=Path, default=None, help="Run root (default: $FUSEPOSE_DATA_DIR/runs)")
    parser.set_defaults(handler=run_fuse)


def run_fuse(args: argparse.Namespace) -> int:
    """
    Runs the pose pipeline on a bundle.
    - One run directory per mode: <out>/<sequence>/<mode>/errors.csv and results.jsonl.
    - `--mode all` runs the four variants on the same seed.
    """
    bundle = crud.read_bundle(args.bundle)
    cfg = RansacConfig(
        iterations=args.ransac_iters, reproj_threshold=args.reproj_px, seed=args.seed,
        confidence=None if args.confidence >= 1.0 else args.confidence,
    )
    fusion_cfg = FusionConfig(alpha=args.alpha, u_aggregate=args.u_aggregate)
    modes = list(PipelineMode) if args.mode == ALL_MODES else [PipelineMode(args.mode)]
    out = args.out or database.DATA_DIR / "runs"
    for mode in modes:
        run = run_pipeline(bundle, mode, cfg, fusion_cfg, args.seed_score_min, args.threaded, progress=not args.quiet)
        print(crud.write_run(run, bundle.meta, out))
    return 0
