"""Absolute position error and match-rate statistics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class EvalReport:
    ape_mean: float
    ape_std: float  # population std
    match_rate: float
    n_frames: int
    threshold: float
    seconds_per_frame: float | None = None
    ape_median: float | None = None
    ape_std_sample: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self, verbose: bool = False) -> str:
        rows = [("frames", f"{self.n_frames}"),
                ("APE mean (m)", f"{self.ape_mean:.3f}"),
                ("APE std (m)", f"{self.ape_std:.3f}"),
                (f"match rate (<{self.threshold:g} m)", f"{100 * self.match_rate:.2f}%")]
        if verbose:
            if self.ape_std_sample is not None:
                rows.append(("APE std, sample (m)", f"{self.ape_std_sample:.3f}"))
            if self.ape_median is not None:
                rows.append(("APE median (m)", f"{self.ape_median:.3f}"))
        if self.seconds_per_frame is not None:
            rows.append(("seconds / frame", f"{self.seconds_per_frame:.4f}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def ape_series(preds, gts) -> np.ndarray:
    """Per-frame Euclidean distance between (N, 2) predicted and ground-truth positions."""
    preds = np.asarray(preds, dtype=float)
    gts = np.asarray(gts, dtype=float)
    if preds.shape != gts.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {gts.shape}")
    if preds.size == 0:
        raise ValueError("empty series")
    return np.hypot(*(preds - gts).T)


def match_rate(d, threshold: float = 10.0) -> float:
    d = np.asarray(d, dtype=float)
    return float(np.mean(d < threshold))


def summarize(d, threshold: float = 10.0, seconds_per_frame: float | None = None) -> EvalReport:
    d = np.asarray(d, dtype=float)
    if d.size == 0:
        raise ValueError("empty series")
    return EvalReport(ape_mean=float(d.mean()), ape_std=float(d.std()), match_rate=match_rate(d, threshold),
                      n_frames=int(d.size), threshold=float(threshold), seconds_per_frame=seconds_per_frame,
                      ape_median=float(np.median(d)),
                      ape_std_sample=float(d.std(ddof=1)) if d.size > 1 else 0.0)


def evaluate_files(pred_csv, poses_csv, threshold: float = 10.0) -> EvalReport:
    """Align a predictions CSV with poses.csv by timestamp and summarize."""
    from .dataset import read_poses
    from .registration import read_predictions

    ts, e, n, _, _ = read_predictions(pred_csv)
    gt = {round(t, 3): p for t, p in read_poses(poses_csv)}
    try:
        gts = np.array([[gt[round(t, 3)].easting, gt[round(t, 3)].northing] for t in ts])
    except KeyError as exc:
        raise ValueError(f"prediction timestamp {exc.args[0]} missing from ground truth") from exc
    return summarize(ape_series(np.column_stack([e, n]), gts.reshape(-1, 2)), threshold)
