# api/simulate.py
import argparse
import json
import logging
from pathlib import Path

from pydantic import ValidationError

from core.errors import InvalidInputError
from core.simkit import simulate_sequence
from db import crud, database
from db.models import ScenarioConfig

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("simulate", help="Generate a synthetic sequence bundle")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--config", type=Path, help="ScenarioConfig JSON file")
    source.add_argument("--preset", help="Preset name <object>-<trajectory_index>-<distance>, e.g. cassini-1-close")
    parser.add_argument("--out", type=Path, default=None, help="Bundle directory (default: $FUSEPOSE_DATA_DIR/<name>)")
    parser.add_argument("--seed", type=int, default=None, help="Overrides the scenario seed")
    parser.add_argument("--n-frames", type=int, default=None)
    parser.add_argument("--no-events", action="store_true", help="Skip rendering and event synthesis")
    parser.set_defaults(handler=run_simulate)


def load_scenario(args: argparse.Namespace) -> ScenarioConfig:
    """
    Builds the scenario from a JSON file, a preset name or the defaults.
    - Command-line overrides win over file values.
    """
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.n_frames is not None:
        overrides["n_frames"] = args.n_frames
    if args.no_events:
        overrides["render_events"] = False

    if args.preset:
        try:
            object_id, trajectory_index, distance = args.preset.split("-")
            n_frames = overrides.pop("n_frames", 300)
            return ScenarioConfig.preset(object_id, int(trajectory_index), distance, n_frames=n_frames, **overrides)
        except ValidationError:
            raise
        except ValueError as e:
            raise InvalidInputError(f"bad preset '{args.preset}': {e}") from e
    params = json.loads(args.config.read_text()) if args.config else {}
    params.update(overrides)
    return ScenarioConfig(**params)


def run_simulate(args: argparse.Namespace) -> int:
    """
    Generates a sequence and writes it in the bundle format.
    - Labels, rgb/event predictions, scripted detections and events.
    """
    scenario = load_scenario(args)
    out = args.out or database.DATA_DIR / scenario.name
    bundle = simulate_sequence(scenario, progress=not args.quiet)
    crud.write_bundle(bundle, out)
    print(out)
    return 0
