# api/evaluate.py
import argparse
import logging
from pathlib import Path
from typing import Dict, List

from core.metrics import aggregate_table, sequence_scores
from db import crud, database
from db.models import PipelineMode, SequenceMeta, SuccessConfig

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("evaluate", help="Aggregate run directories into a success-rate table")
    parser.add_argument("--runs", type=Path, nargs="+", required=True,
                        help="Run directories; searched recursively for errors.csv")
    parser.add_argument("--rho-m", type=float, default=0.010)
    parser.add_argument("--sigma-deg", type=float, default=10.0)
    parser.add_argument("--out", type=Path, required=True)
    parser.set_defaults(handler=run_evaluate)


def find_errors_files(roots: List[Path]) -> List[Path]:
    files = []
    for root in roots:
        root = Path(root)
        if root.is_file():
            files.append(root)
        else:
            files.extend(sorted(root.rglob(database.ERRORS_FILE)))
    return files


def collect_scores(paths: List[Path], success: SuccessConfig) -> Dict[str, Dict[str, tuple]]:
    """
    Scores every errors.csv found.
    - The method is the parent directory name, the sequence comes from the meta.json copy.
    - Adverse frames (harsh or low-motion) define the Psi subset.
    """
    scores: Dict[str, Dict[str, tuple]] = {}
    for path in paths:
        meta = crud.read_model(path.parent / database.META_FILE, SequenceMeta)
        errors = crud.frame_errors(crud.read_errors(path))
        scores.setdefault(meta.name, {})[path.parent.name] = sequence_scores(errors, meta.adverse_frames(), success)
    return scores


def run_evaluate(args: argparse.Namespace) -> int:
    """
    Writes the per-sequence table with the unweighted average row.
    """
    success = SuccessConfig(rho=args.rho_m, sigma=args.sigma_deg)
    paths = find_errors_files(args.runs)
    if not paths:
        logger.error(f"no {database.ERRORS_FILE} found under {', '.join(map(str, args.runs))}")
        return 2
    scores = collect_scores(paths, success)
    found = {method for row in scores.values() for method in row}
    methods = [m.value for m in PipelineMode if m.value in found] + sorted(found - {m.value for m in PipelineMode})
    table = aggregate_table(scores, methods)
    crud.write_table(table, args.out)
    logger.info(f"table with {len(table) - 1} sequences written to {args.out}")
    print(table.to_string())
    return 0
