# crud.py
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Type, TypeVar

import matplotlib.image as mpimg
import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from core.detection import BoundingBox, Detection
from core.errors import BundleFormatError, InvalidInputError
from core.event_core import EVENT_DTYPE, EventFrame, make_events
from core.geometry import LandmarkSet
from core.metrics import FrameError
from core.pipeline import PipelineRun
from core.replay import PredictionStream, SequenceBundle
from db import database
from db.models import AffineWarp, CameraIntrinsics, Channel, FrameLabel, FusionRecord, SequenceMeta

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


# --- JSON Models ---

def write_model(model: BaseModel, path: Path) -> Path:
    """Writes a pydantic model as indented JSON."""
    path = Path(path)
    path.write_text(model.model_dump_json(indent=2) + "\n")
    return path


def read_model(path: Path, model_cls: Type[ModelT]) -> ModelT:
    """Reads and validates a JSON file against a pydantic model."""
    path = Path(path)
    if not path.exists():
        raise BundleFormatError(f"missing file {path}")
    return model_cls.model_validate_json(path.read_text())


def write_jsonl(models: Sequence[BaseModel], path: Path) -> Path:
    path = Path(path)
    with path.open("w") as f:
        for model in models:
            f.write(model.model_dump_json() + "\n")
    return path


def read_jsonl(path: Path, model_cls: Type[ModelT]) -> List[ModelT]:
    path = Path(path)
    if not path.exists():
        raise BundleFormatError(f"missing file {path}")
    with path.open() as f:
        return [model_cls.model_validate_json(line) for line in f if line.strip()]


# --- Events ---

def write_events(events: np.ndarray, path: Path) -> Path:
    """Binary records for .bin paths, `t_us,x,y,p` CSV otherwise."""
    path = Path(path)
    events = np.asarray(events, dtype=EVENT_DTYPE)
    if path.suffix == ".csv":
        frame = pd.DataFrame({"t_us": events["t"], "x": events["x"], "y": events["y"], "p": events["p"]})
        frame.to_csv(path, index=False)
    else:
        events.tofile(path)
    logger.debug(f"wrote {len(events)} events to {path}")
    return path


def read_events(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise BundleFormatError(f"missing event file {path}")
    if path.suffix == ".csv":
        frame = pd.read_csv(path)
        if list(frame.columns) != database.EVENTS_CSV_COLUMNS:
            raise BundleFormatError(f"{path}: expected columns {database.EVENTS_CSV_COLUMNS}, got {list(frame.columns)}")
        return make_events(frame["t_us"].to_numpy(), frame["x"].to_numpy(), frame["y"].to_numpy(), frame["p"].to_numpy())
    size = path.stat().st_size
    if size % EVENT_DTYPE.itemsize:
        raise BundleFormatError(f"{path}: size {size} is not a multiple of {EVENT_DTYPE.itemsize}-byte records")
    return np.fromfile(path, dtype=EVENT_DTYPE)


# --- Detections ---

def write_detections(detections: Sequence[Optional[Detection]], path: Path) -> Path:
    rows = [
        (n, *det.box.as_tuple(), det.score)
        for n, det in enumerate(detections, start=1) if det is not None
    ]
    frame = pd.DataFrame(rows, columns=database.DETECTIONS_COLUMNS)
    frame.to_csv(path, index=False, float_format=database.FLOAT_FORMAT)
    return Path(path)


def read_detections(path: Path, n_frames: int) -> List[Optional[Detection]]:
    """Frames without a row come back as None."""
    frame = pd.read_csv(path)
    if list(frame.columns) != database.DETECTIONS_COLUMNS:
        raise BundleFormatError(f"{path}: expected columns {database.DETECTIONS_COLUMNS}")
    detections: List[Optional[Detection]] = [None] * n_frames
    for row in frame.itertuples(index=False):
        if not 1 <= row.frame <= n_frames:
            raise BundleFormatError(f"{path}: detection for frame {row.frame} outside [1, {n_frames}]")
        box = BoundingBox(float(row.x_min), float(row.y_min), float(row.x_max), float(row.y_max))
        detections[int(row.frame) - 1] = Detection(box, float(row.score))
    return detections


# --- Predictions ---

def write_predictions(stream: PredictionStream, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        np.savez(f, keypoints=stream.keypoints, valid=stream.valid, mc_samples=stream.mc_samples, present=stream.present)
    return path


def read_predictions(path: Path, channel: Channel) -> PredictionStream:
    with np.load(path) as data:
        missing = {"keypoints", "valid", "mc_samples", "present"} - set(data.files)
        if missing:
            raise BundleFormatError(f"{path}: missing arrays {sorted(missing)}")
        return PredictionStream(channel, data["keypoints"], data["valid"], data["mc_samples"], data["present"])


# --- Sequence Bundles ---

def write_bundle(bundle: SequenceBundle, bundle_dir: Path) -> Path:
    """Writes every part of a bundle into one directory."""
    bundle_dir = database.ensure_dir(bundle_dir)
    write_model(bundle.meta, bundle_dir / database.META_FILE)
    write_model(bundle.intrinsics, bundle_dir / database.INTRINSICS_FILE)
    write_model(bundle.warp, bundle_dir / database.WARP_FILE)
    (bundle_dir / database.LANDMARKS_FILE).write_text(json.dumps({"points": bundle.landmarks.points.tolist()}) + "\n")
    write_jsonl(bundle.labels, bundle_dir / database.LABELS_FILE)
    write_events(bundle.events, bundle_dir / database.EVENTS_FILE)
    if bundle.detections is not None:
        write_detections(bundle.detections, bundle_dir / database.DETECTIONS_FILE)
    for channel, stream in bundle.predictions.items():
        write_predictions(stream, database.predictions_path(bundle_dir, channel.value))
    logger.info(f"bundle {bundle.meta.name} written to {bundle_dir}")
    return bundle_dir


def read_bundle(bundle_dir: Path) -> SequenceBundle:
    """Loads a bundle directory; detections and predictions are optional."""
    bundle_dir = Path(bundle_dir)
    if not bundle_dir.is_dir():
        raise BundleFormatError(f"bundle directory {bundle_dir} does not exist")
    try:
        meta = read_model(bundle_dir / database.META_FILE, SequenceMeta)
        intrinsics = read_model(bundle_dir / database.INTRINSICS_FILE, CameraIntrinsics)
        warp = read_model(bundle_dir / database.WARP_FILE, AffineWarp)
        labels = read_jsonl(bundle_dir / database.LABELS_FILE, FrameLabel)
    except ValidationError as e:
        raise BundleFormatError(f"invalid bundle metadata in {bundle_dir}: {e}") from e

    landmarks_path = bundle_dir / database.LANDMARKS_FILE
    if not landmarks_path.exists():
        raise BundleFormatError(f"missing file {landmarks_path}")
    landmarks = LandmarkSet(np.array(json.loads(landmarks_path.read_text())["points"], dtype=float))
    if landmarks.Z != meta.Z:
        raise BundleFormatError(f"{landmarks.Z} landmarks but meta declares Z={meta.Z}")

    events = read_events(bundle_dir / database.EVENTS_FILE)
    detections = None
    if (bundle_dir / database.DETECTIONS_FILE).exists():
        detections = read_detections(bundle_dir / database.DETECTIONS_FILE, meta.n_frames)
    predictions: Dict[Channel, PredictionStream] = {}
    for channel in Channel:
        path = database.predictions_path(bundle_dir, channel.value)
        if path.exists():
            predictions[channel] = read_predictions(path, channel)
        else:
            logger.warning(f"no {channel.value} predictions in {bundle_dir}")

    try:
        bundle = SequenceBundle(meta, intrinsics, warp, landmarks, labels, events, detections, predictions)
    except InvalidInputError as e:
        raise BundleFormatError(str(e)) from e
    logger.info(f"loaded bundle {meta.name}: {meta.n_frames} frames, {len(events)} events")
    return bundle


# --- Runs ---

def errors_frame(run: PipelineRun) -> pd.DataFrame:
    rows = []
    for record, error in zip(run.records, run.errors):
        rows.append({
            "frame": record.frame, "omega_m": error.omega, "theta_deg": error.theta,
            "degenerate": int(error.degenerate), "mode": record.mode.value,
            "cmkd": record.cmkd, "u_rgb": record.u_rgb, "u_event": record.u_event,
        })
    return pd.DataFrame(rows, columns=database.ERRORS_COLUMNS)


def write_run(run: PipelineRun, meta: SequenceMeta, out_dir: Path) -> Path:
    """Writes errors.csv, results.jsonl and a meta.json copy under <out>/<sequence>/<method>/."""
    target = database.ensure_dir(database.run_dir(out_dir, run.sequence, run.mode.value))
    errors_frame(run).to_csv(target / database.ERRORS_FILE, index=False, float_format=database.FLOAT_FORMAT)
    write_jsonl(run.records, target / database.RESULTS_FILE)
    write_model(meta, target / database.META_FILE)
    logger.info(f"run {run.mode.value} on {run.sequence} written to {target}")
    return target


def read_errors(path: Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise BundleFormatError(f"missing errors file {path}")
    frame = pd.read_csv(path)
    missing = set(database.ERRORS_COLUMNS) - set(frame.columns)
    if missing:
        raise BundleFormatError(f"{path}: missing columns {sorted(missing)}")
    return frame


def frame_errors(frame: pd.DataFrame) -> List[FrameError]:
    return [
        FrameError(int(row.frame), float(row.omega_m), float(row.theta_deg), bool(row.degenerate))
        for row in frame.itertuples(index=False)
    ]


def read_results(path: Path) -> List[FusionRecord]:
    return read_jsonl(path, FusionRecord)


def write_table(table: pd.DataFrame, path: Path) -> Path:
    """Success-rate cells with 4 decimals; empty markers are kept as they are."""
    def fmt(value):
        return f"{value:.4f}" if isinstance(value, (float, np.floating)) else value

    table.apply(lambda column: column.map(fmt)).to_csv(path)
    return Path(path)


# --- Alignment & Frames ---

def read_correspondences(path: Path):
    """CSV with x_event,y_event,x_rgb,y_rgb columns; returns (event_points, rgb_points)."""
    frame = pd.read_csv(path)
    expected = ["x_event", "y_event", "x_rgb", "y_rgb"]
    if not set(expected) <= set(frame.columns):
        raise BundleFormatError(f"{path}: expected columns {expected}")
    return frame[["x_event", "y_event"]].to_numpy(float), frame[["x_rgb", "y_rgb"]].to_numpy(float)


def write_frames(frames: Sequence[EventFrame], path: Path) -> Path:
    """Stacks accumulated frames into one npz: values, window bounds, empty flags and polarity modes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if frames:
        values = np.stack([f.values for f in frames])
    else:
        values = np.zeros((0, 0, 0))
    with path.open("wb") as f:
        np.savez_compressed(
            f, values=values,
            window_start=np.array([fr.window_start for fr in frames], dtype=np.int64),
            window_end=np.array([fr.window_end for fr in frames], dtype=np.int64),
            empty=np.array([fr.empty for fr in frames], dtype=bool),
            polarity_mode=np.array([fr.polarity_mode for fr in frames], dtype=str),
        )
    return path


def read_frames(path: Path) -> List[EventFrame]:
    with np.load(path) as data:
        values = data["values"]
        n = values.shape[0]
        # files written before the mode was stored hold count frames
        modes = data["polarity_mode"] if "polarity_mode" in data.files else ["count"] * n
        return [
            EventFrame(values[i], values.shape[2], values.shape[1], int(data["window_start"][i]),
                       int(data["window_end"][i]), bool(data["empty"][i]), str(modes[i]))
            for i in range(n)
        ]


# --- Images ---

def read_image(path: Path) -> np.ndarray:
    """Grayscale image with values in [0, 1]; .npy arrays are read as stored."""
    path = Path(path)
    if not path.exists():
        raise BundleFormatError(f"missing image {path}")
    image = np.load(path) if path.suffix == ".npy" else mpimg.imread(path)
    if np.issubdtype(image.dtype, np.integer):
        image = image / float(np.iinfo(image.dtype).max)
    image = np.asarray(image, dtype=float)
    if image.ndim == 3:
        image = image[..., :3].mean(axis=2)
    if image.ndim != 2:
        raise BundleFormatError(f"{path}: expected a 2D image, got shape {image.shape}")
    return image


def write_image(values: np.ndarray, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mpimg.imsave(path, np.clip(values, 0.0, 1.0), cmap="gray", vmin=0.0, vmax=1.0)
    return path
