"""Pose errors, success rates and the per-sequence results table."""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.errors import InvalidInputError
from core.geometry import Pose, quat_angle
from db.models import SuccessConfig

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("Omega", "Omega_Psi", "Theta", "Theta_Psi")
EMPTY_CELL = "-"
AVERAGE_ROW = "Avg"


@dataclass(frozen=True)
class FrameError:
    frame_index: int
    omega: float
    theta: float
    degenerate: bool = False


def frame_error(gt: Pose, pred: Optional[Pose], frame_index: int = 0, degenerate: bool = False) -> FrameError:
    """Translation error (m) and geodesic rotation error (deg).

    Missing or degenerate predictions are scored as the zero pose.
    """
    if pred is None or degenerate:
        pred, degenerate = Pose.zero(), True
    omega = float(np.linalg.norm(gt.t - pred.t))
    theta = quat_angle(gt.q, pred.q)
    return FrameError(frame_index, omega, theta, degenerate)


def success_rates(errors: Sequence[FrameError], cfg: Optional[SuccessConfig] = None,
                  subset: Optional[Iterable[int]] = None) -> Tuple[float, float]:
    """Share of frames with omega < rho and with theta < sigma."""
    cfg = cfg or SuccessConfig()
    if subset is not None:
        subset = set(subset)
        errors = [e for e in errors if e.frame_index in subset]
    if not errors:
        raise InvalidInputError("no frames selected for success rates")
    omega = np.array([e.omega for e in errors])
    theta = np.array([e.theta for e in errors])
    return float(np.mean(omega < cfg.rho)), float(np.mean(theta < cfg.sigma))


def sequence_scores(errors: Sequence[FrameError], adverse: Iterable[int],
                    cfg: Optional[SuccessConfig] = None) -> Tuple[float, ...]:
    """(Omega, Omega_Psi, Theta, Theta_Psi) for one sequence; Psi cells are NaN without adverse frames."""
    omega, theta = success_rates(errors, cfg)
    adverse = set(adverse) & {e.frame_index for e in errors}
    if adverse:
        omega_psi, theta_psi = success_rates(errors, cfg, adverse)
    else:
        omega_psi = theta_psi = math.nan
    return omega, omega_psi, theta, theta_psi


def aggregate_table(per_sequence: Mapping[str, Mapping[str, Sequence[Optional[float]]]],
                    methods: Optional[List[str]] = None) -> pd.DataFrame:
    """One row per sequence plus the unweighted average row.

    Columns are "<method> <metric>" in method order, metrics ordered as
    TABLE_COLUMNS. Missing cells hold EMPTY_CELL.
    """
    if methods is None:
        methods = []
        for row in per_sequence.values():
            methods.extend(m for m in row if m not in methods)
    columns = [f"{method} {metric}" for method in methods for metric in TABLE_COLUMNS]

    records: Dict[str, Dict[str, float]] = {}
    for sequence, row in per_sequence.items():
        record = {}
        for method in methods:
            values = row.get(method)
            if values is not None and len(values) != len(TABLE_COLUMNS):
                raise InvalidInputError(f"{sequence}/{method}: expected {len(TABLE_COLUMNS)} values, got {len(values)}")
            for i, metric in enumerate(TABLE_COLUMNS):
                value = None if values is None else values[i]
                record[f"{method} {metric}"] = np.nan if value is None else float(value)
        records[sequence] = record

    table = pd.DataFrame.from_dict(records, orient="index", columns=columns)
    table.index.name = "sequence"
    table.loc[AVERAGE_ROW] = table.mean(axis=0, skipna=True)
    return table.astype(object).where(table.notna(), EMPTY_CELL)
