"""Evaluation metrics over a held-out index set.

MAPE skips entries whose ground truth is exactly zero (the excluded count is
reported), since the definition divides by |Y| and flow-style data contains
zeros. The R2 denominator uses the squared deviation from the label mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError


@dataclass
class MetricsReport:
    mae: float
    mape: float
    mre: float
    rmse: float
    r2: float
    n_points: int
    n_mape_excluded: int

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "mape": self.mape,
            "mre": self.mre,
            "rmse": self.rmse,
            "r2": self.r2,
            "n_points": self.n_points,
            "n_mape_excluded": self.n_mape_excluded,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def evaluate(y, y_hat, omega=None) -> MetricsReport:
    """MAE/MAPE/MRE/RMSE/R2 restricted to the index set omega.

    omega may be a boolean mask or an integer index tuple/array over y;
    None means every entry. y and y_hat must have identical shapes.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ContractError(f"label shape {y.shape} != estimate shape {y_hat.shape}")
    if omega is None:
        labels = y.ravel()
        estimates = y_hat.ravel()
    else:
        labels = y[omega].ravel()
        estimates = y_hat[omega].ravel()
    if labels.size == 0:
        raise ContractError("empty evaluation index set")

    err = labels - estimates
    abs_err = np.abs(err)
    mae = float(abs_err.mean())
    rmse = float(np.sqrt((err**2).mean()))

    abs_labels = np.abs(labels)
    label_sum = float(abs_labels.sum())
    if label_sum == 0.0:
        raise DataError("all labels are zero; MAPE/MRE are undefined")
    mre = float(abs_err.sum() / label_sum)

    nonzero = abs_labels > 0.0
    n_excluded = int((~nonzero).sum())
    mape = float((abs_err[nonzero] / abs_labels[nonzero]).mean())

    ss_res = float((err**2).sum())
    ss_tot = float(((labels - labels.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot

    return MetricsReport(
        mae=mae,
        mape=mape,
        mre=mre,
        rmse=rmse,
        r2=r2,
        n_points=int(labels.size),
        n_mape_excluded=n_excluded,
    )
