# api/accumulate.py
import argparse
import logging
import math
from pathlib import Path

from tqdm import tqdm

from core.errors import InvalidInputError
from core.event_core import accumulate_frame, ignore_polarity, overlay, slice_window
from db import crud

logger = logging.getLogger(__name__)

FRAMES_FILE = "frames.npz"
OVERLAY_DIR = "overlays"


def register(subparsers) -> None:
    parser = subparsers.add_parser("accumulate", help="Turn an event file into per-frame histograms")
    parser.add_argument("--events", type=Path, required=True, help=".bin records or t_us,x,y,p CSV")
    parser.add_argument("--fps", type=float, default=30.0)
    parser.add_argument("--width", type=int, default=800)
    parser.add_argument("--height", type=int, default=720)
    parser.add_argument("--t0", type=int, default=0, help="Stream origin in microseconds")
    parser.add_argument("--n-frames", type=int, default=None, help="Default: enough windows to cover the stream")
    parser.add_argument("--polarity", choices=["count", "signed"], default="count")
    parser.add_argument("--ignore-polarity", action="store_true")
    parser.add_argument("--overlay", type=Path, default=None,
                        help="Grayscale image (.npy or png) to blend each frame onto; writes overlays/frame_NNNNNN.png")
    parser.add_argument("--overlay-weight", type=float, default=0.5, help="Weight of the event frame in the blend")
    parser.add_argument("--out", type=Path, required=True, help="Output directory")
    parser.set_defaults(handler=run_accumulate)


def write_overlays(frames, image_path: Path, weight: float, out: Path) -> Path:
    """One PNG per frame, the event frame blended onto the given image."""
    image = crud.read_image(image_path)
    directory = Path(out) / OVERLAY_DIR
    for n, frame in enumerate(frames, start=1):
        crud.write_image(overlay(image, frame, weight), directory / f"frame_{n:06d}.png")
    return directory


def run_accumulate(args: argparse.Namespace) -> int:
    """
    Accumulates windows (t0 + (n-1)/fps, t0 + n/fps] into frames.npz.
    - With --overlay, also writes the frames blended onto a reference image.
    """
    if args.fps <= 0:
        raise InvalidInputError(f"fps must be positive, got {args.fps}")
    events = crud.read_events(args.events)
    n_frames = args.n_frames
    if n_frames is None:
        last = int(events["t"][-1]) if len(events) else args.t0
        n_frames = max(1, math.ceil((last - args.t0) * args.fps / 1e6))
    frames = []
    for n in tqdm(range(1, n_frames + 1), desc="accumulate", disable=args.quiet):
        t0 = args.t0 + int(round((n - 1) * 1e6 / args.fps))
        t1 = args.t0 + int(round(n * 1e6 / args.fps))
        frame = accumulate_frame(slice_window(events, t0, t1), args.width, args.height, args.polarity, t0, t1)
        frames.append(ignore_polarity(frame) if args.ignore_polarity else frame)
    path = crud.write_frames(frames, Path(args.out) / FRAMES_FILE)
    logger.info(f"{len(frames)} frames from {len(events)} events written to {path}")
    if args.overlay is not None:
        directory = write_overlays(frames, args.overlay, args.overlay_weight, args.out)
        logger.info(f"overlays written to {directory}")
    print(path)
    return 0
