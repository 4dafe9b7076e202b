"""Count evaluation statistics over paired predicted/ground-truth counts.

MAE, RMSE, and R^2 are computed on the raw real-valued predictions; the
difference-in-count family (DiC, |DiC|, percentage agreement, MSE) is only
meaningful for whole objects and uses predictions rounded with the same
rule as ``density.integer_count``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from adacount.density import round_count


@dataclass(frozen=True)
class MetricReport:
    """The seven evaluation statistics plus spread of the DiC family.

    Parenthesized spreads in the literature are reported as standard
    deviations here; that reading is an assumption, which the serialized
    record labels explicitly.
    """

    mae: float
    rmse: float
    r2: float  # NaN when undefined (constant ground truth)
    r2_defined: bool
    dic: float
    dic_std: float
    abs_dic: float
    abs_dic_std: float
    agreement_pct: float
    mse: float
    n: int

    def to_text(self) -> str:
        """Flat key-value record, one statistic per line."""
        lines = [
            f"n: {self.n}",
            f"mae: {self.mae:.6g}",
            f"rmse: {self.rmse:.6g}",
            f"r2: {'undefined' if not self.r2_defined else format(self.r2, '.6g')}",
            f"dic: {self.dic:.6g}",
            f"dic_std: {self.dic_std:.6g}",
            f"abs_dic: {self.abs_dic:.6g}",
            f"abs_dic_std: {self.abs_dic_std:.6g}",
            f"agreement_pct: {self.agreement_pct:.6g}",
            f"mse: {self.mse:.6g}",
            "std_semantics: std (assumed)",
        ]
        return "\n".join(lines)

    def to_row(self) -> dict:
        row = asdict(self)
        if not self.r2_defined:
            row["r2"] = None
        row["std_semantics"] = "std (assumed)"
        return row


def compute_metrics(pred: Sequence[float], truth: Sequence[int]) -> MetricReport:
    """Evaluate predictions against integer ground-truth counts."""
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if len(pred) == 0:
        raise ValueError("empty prediction/truth lists")
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)

    err = p - t
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err**2)))

    ss_tot = float(np.sum((t - t.mean()) ** 2))
    ss_res = float(np.sum(err**2))
    if ss_tot == 0.0:
        r2, r2_defined = float("nan"), False
    else:
        r2, r2_defined = 1.0 - ss_res / ss_tot, True

    rounded = np.array([round_count(x) for x in p], dtype=np.float64)
    d = rounded - t
    dic = float(np.mean(d))
    dic_std = float(np.std(d))
    abs_d = np.abs(d)
    abs_dic = float(np.mean(abs_d))
    abs_dic_std = float(np.std(abs_d))
    agreement = 100.0 * float(np.mean(d == 0))
    mse = float(np.mean(d**2))

    return MetricReport(
        mae=mae,
        rmse=rmse,
        r2=r2,
        r2_defined=r2_defined,
        dic=dic,
        dic_std=dic_std,
        abs_dic=abs_dic,
        abs_dic_std=abs_dic_std,
        agreement_pct=agreement,
        mse=mse,
        n=len(pred),
    )


def append_to_ledger(report: MetricReport, path: Path, context: dict | None = None) -> None:
    """Append one machine-readable evaluation row to a ledger file."""
    row = report.to_row()
    if context:
        row.update(context)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(row) + "\n")
