# api/align.py
import argparse
import logging
from pathlib import Path

from core.geometry import fit_alignment
from db import crud

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("align", help="Fit the event-to-RGB pixel warp")
    parser.add_argument("--correspondences", type=Path, required=True, help="CSV x_event,y_event,x_rgb,y_rgb")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--full-affine", action="store_true", help="Fit the off-diagonal terms as well")
    parser.set_defaults(handler=run_align)


def run_align(args: argparse.Namespace) -> int:
    """
    Fits the warp by least squares and writes it as JSON.
    - The residual RMS is logged and printed.
    """
    src, dst = crud.read_correspondences(args.correspondences)
    fit = fit_alignment(src, dst, full_affine=args.full_affine)
    crud.write_model(fit.warp, args.out)
    print(f"residual_rms_px={fit.residual_rms:.6f}")
    return 0
