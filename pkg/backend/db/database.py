# database.py
import logging
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv(".env")

logger = logging.getLogger(__name__)

# --- Configuration ---
DEFAULT_SEED = int(os.getenv("FUSEPOSE_SEED", 0))
LOG_LEVEL = os.getenv("FUSEPOSE_LOG_LEVEL", "INFO")
DATA_DIR = Path(os.getenv("FUSEPOSE_DATA_DIR", "./data"))
RANSAC_ITERS = int(os.getenv("FUSEPOSE_RANSAC_ITERS", 10000))
REPROJ_PX = float(os.getenv("FUSEPOSE_REPROJ_PX", 20.0))

# Fixed float format so identical runs produce byte-identical CSVs
FLOAT_FORMAT = "%.9g"

# --- Bundle Layout ---
META_FILE = "meta.json"
INTRINSICS_FILE = "intrinsics.json"
WARP_FILE = "warp.json"
LANDMARKS_FILE = "landmarks.json"
LABELS_FILE = "labels.jsonl"
EVENTS_FILE = "events.bin"
DETECTIONS_FILE = "detections.csv"
PREDICTIONS_DIR = "predictions"

# --- Run Layout ---
ERRORS_FILE = "errors.csv"
RESULTS_FILE = "results.jsonl"

ERRORS_COLUMNS = ["frame", "omega_m", "theta_deg", "degenerate", "mode", "cmkd", "u_rgb", "u_event"]
DETECTIONS_COLUMNS = ["frame", "x_min", "y_min", "x_max", "y_max", "score"]
EVENTS_CSV_COLUMNS = ["t_us", "x", "y", "p"]


def predictions_path(bundle_dir: Path, channel: str) -> Path:
    return Path(bundle_dir) / PREDICTIONS_DIR / f"{channel}.npz"


def run_dir(out_dir: Path, sequence: str, method: str) -> Path:
    """<out>/<sequence>/<method>/"""
    return Path(out_dir) / sequence / method


def ensure_dir(path: Path) -> Path:
    """Creates the directory if it doesn't exist."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    logger.debug(f"using directory {path}")
    return path
