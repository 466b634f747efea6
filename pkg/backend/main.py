# main.py
import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from api import accumulate, align, evaluate, fuse, plot, simulate
from core.errors import FuseposeError
from db import database

logger = logging.getLogger(__name__)

# --- Subcommands ---
ROUTERS = [simulate, fuse, evaluate, align, accumulate, plot]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusepose",
        description="Event + RGB keypoint fusion for spacecraft pose estimation.",
    )
    parser.add_argument("--log-level", default=database.LOG_LEVEL, help="Default: $FUSEPOSE_LOG_LEVEL or INFO")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for router in ROUTERS:
        router.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        return args.handler(args)
    except (FuseposeError, ValidationError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


if __name__ == "__main__":
    # Active .venv and run `python backend/main.py <command> ...`
    sys.exit(main())
