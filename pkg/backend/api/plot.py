import argparse
import logging
from pathlib import Path

from core.report import save_plots
from db import crud
from db.models import SequenceMeta, SuccessConfig

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("plot", help="Render per-frame errors (svg, png or pdf by suffix)")
    parser.add_argument("--errors", type=Path, required=True)
    parser.add_argument("--meta", type=Path, required=True)
    parser.add_argument("--rho-m", type=float, default=0.010)
    parser.add_argument("--sigma-deg", type=float, default=10.0)
    parser.add_argument("--out", type=Path, required=True)
    parser.set_defaults(handler=run_plot)


def run_plot(args: argparse.Namespace) -> int:
    meta = crud.read_model(args.meta, SequenceMeta)
    success = SuccessConfig(rho=args.rho_m, sigma=args.sigma_deg)
    save_plots(crud.read_errors(args.errors), meta, args.out, success)
    logger.info(f"plot written to {args.out}")
    return 0
