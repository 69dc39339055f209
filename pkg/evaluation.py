"""Detection-to-truth matching and the FP/FN/TP/ALE summary tables."""

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from rich.table import Table
from scipy.spatial.distance import cdist

from av_geometry import ScenePoint
from config import DEFAULT_TAU_LOC


@dataclass
class IntervalScore:
    loc_fp: int = 0
    loc_fn: int = 0
    loc_tp: int = 0
    loc_errors: List[float] = field(default_factory=list)
    audio_fp: int = 0
    audio_fn: int = 0
    audio_tp: int = 0


@dataclass
class SummaryTable:
    """Summed counts of a sequence; rates are over FN + TP, in percent."""

    loc_fp: int = 0
    loc_fn: int = 0
    loc_tp: int = 0
    ale: float = 0.0
    audio_fp: int = 0
    audio_fn: int = 0
    audio_tp: int = 0

    @staticmethod
    def _rate(part: int, other: int) -> float:
        total = part + other
        return 100.0 * part / total if total else 0.0

    @property
    def loc_fn_rate(self) -> float:
        return self._rate(self.loc_fn, self.loc_tp)

    @property
    def loc_tp_rate(self) -> float:
        return self._rate(self.loc_tp, self.loc_fn)

    @property
    def audio_fn_rate(self) -> float:
        return self._rate(self.audio_fn, self.audio_tp)

    @property
    def audio_tp_rate(self) -> float:
        return self._rate(self.audio_tp, self.audio_fn)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.update(
            loc_fn_rate=round(self.loc_fn_rate, 1),
            loc_tp_rate=round(self.loc_tp_rate, 1),
            audio_fn_rate=round(self.audio_fn_rate, 1),
            audio_tp_rate=round(self.audio_tp_rate, 1),
        )
        return data


def match_clusters(
    detected: Sequence,
    truth: Sequence[Tuple[ScenePoint, bool]],
    tau_loc: float = DEFAULT_TAU_LOC,
) -> IntervalScore:
    """Score one interval's detections against the visible ground truth.

    Each detection is assigned to its nearest truth if closer than tau_loc,
    otherwise it is a false positive. A truth with no assignee is a false
    negative; among several assignees the closest is the true positive and
    the others are false positives. Speaking state is scored on true
    positives only: audible-when-silent is FP, silent-when-audible is FN.
    """
    score = IntervalScore()
    if not detected:
        score.loc_fn = len(truth)
        return score
    if not truth:
        score.loc_fp = len(detected)
        return score

    det_xyz = np.array([d.position.as_array() for d in detected])
    truth_xyz = np.array([p.as_array() for p, _ in truth])
    distances = cdist(det_xyz, truth_xyz)

    nearest = np.argmin(distances, axis=1)
    assigned = {}
    for j, i in enumerate(nearest):
        if distances[j, i] < tau_loc:
            assigned.setdefault(int(i), []).append(j)
        else:
            score.loc_fp += 1

    for i, (_, truth_speaking) in enumerate(truth):
        claimants = assigned.get(i, [])
        if not claimants:
            score.loc_fn += 1
            continue
        best = min(claimants, key=lambda j: distances[j, i])
        score.loc_tp += 1
        score.loc_fp += len(claimants) - 1
        score.loc_errors.append(float(distances[best, i]))

        detected_speaking = bool(detected[best].speaking)
        if detected_speaking and not truth_speaking:
            score.audio_fp += 1
        elif truth_speaking and not detected_speaking:
            score.audio_fn += 1
        else:
            score.audio_tp += 1
    return score


def aggregate(scores: Sequence[IntervalScore]) -> SummaryTable:
    """Sum the counts and average the localisation errors."""
    table = SummaryTable()
    errors = []
    for s in scores:
        table.loc_fp += s.loc_fp
        table.loc_fn += s.loc_fn
        table.loc_tp += s.loc_tp
        table.audio_fp += s.audio_fp
        table.audio_fn += s.audio_fn
        table.audio_tp += s.audio_tp
        errors.extend(s.loc_errors)
    table.ale = float(np.mean(errors)) if errors else 0.0
    return table


def summary_frame(tables: Dict[str, SummaryTable]) -> pd.DataFrame:
    """One row per sequence with the localisation and audio columns."""
    rows = []
    for name, t in tables.items():
        rows.append(
            {
                "seq": name,
                "loc_fp": t.loc_fp,
                "loc_fn": t.loc_fn,
                "loc_fn_pct": round(t.loc_fn_rate, 1),
                "loc_tp": t.loc_tp,
                "loc_tp_pct": round(t.loc_tp_rate, 1),
                "ale_m": round(t.ale, 4),
                "audio_fp": t.audio_fp,
                "audio_fn": t.audio_fn,
                "audio_fn_pct": round(t.audio_fn_rate, 1),
                "audio_tp": t.audio_tp,
                "audio_tp_pct": round(t.audio_tp_rate, 1),
            }
        )
    return pd.DataFrame(rows)


def scores_frame(scores: Sequence[IntervalScore]) -> pd.DataFrame:
    """Per-interval counts for plotting"""
    rows = []
    for index, s in enumerate(scores):
        row = asdict(s)
        row["interval"] = index
        row["loc_errors"] = ";".join(f"{e:.6f}" for e in s.loc_errors)
        rows.append(row)
    return pd.DataFrame(rows)


def write_summary(tables: Dict[str, SummaryTable], csv_path, json_path):
    """Write the machine-readable summary as CSV and JSON"""
    summary_frame(tables).to_csv(csv_path, index=False)
    with open(json_path, "w") as f:
        json.dump({name: t.to_dict() for name, t in tables.items()}, f, indent=2)


def render_summary(tables: Dict[str, SummaryTable]) -> Table:
    """Aligned console table with the FP / FN / TP / ALE columns."""
    table = Table(title="Localisation and speaking-state evaluation")
    for column in ("Seq.", "FP", "FN", "TP", "ALE [m]", "Audio FP", "Audio FN", "Audio TP"):
        table.add_column(column, justify="left" if column == "Seq." else "right")
    for name, t in tables.items():
        table.add_row(
            name,
            str(t.loc_fp),
            f"{t.loc_fn} ({t.loc_fn_rate:.1f}%)",
            f"{t.loc_tp} ({t.loc_tp_rate:.1f}%)",
            f"{t.ale:.2f}",
            str(t.audio_fp),
            f"{t.audio_fn} ({t.audio_fn_rate:.1f}%)",
            f"{t.audio_tp} ({t.audio_tp_rate:.1f}%)",
        )
    return table
