"""Desk-scale evaluation metrics: audio/mouth sync, identity drift, seam smoothness."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..windower import WindowPlan
from ..world import MOUTH_BASE, MOUTH_GAIN, SceneSpec, mouth_series

DEGENERATE_VAR = 1e-12


@dataclass(frozen=True)
class SyncResult:
    correlation: float
    degenerate: bool


def pearson(a: np.ndarray, b: np.ndarray) -> SyncResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"series lengths differ: {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    if da.var() < DEGENERATE_VAR or db.var() < DEGENERATE_VAR:
        return SyncResult(0.0, True)
    r = float((da * db).sum() / math.sqrt((da * da).sum() * (db * db).sum()))
    return SyncResult(min(1.0, max(-1.0, r)), False)


def _check_region(spec: SceneSpec, video: np.ndarray) -> None:
    h, w = video.shape[-2:]
    m = spec.mouth
    if m.top < 0 or m.left < 0 or m.top + m.height > h or m.left + m.width > w:
        raise ValueError("mouth region lies outside the frame")


def sync_proxy(generated: np.ndarray, spec: SceneSpec, track: np.ndarray) -> SyncResult:
    """Correlation of the generated mouth intensity with ``0.5 + 0.4 * a_t``."""
    generated = np.asarray(generated, dtype=np.float64)
    track = np.asarray(track, dtype=np.float64)
    if generated.shape[0] != track.shape[0]:
        raise ValueError("video and audio lengths differ")
    _check_region(spec, generated)
    return pearson(mouth_series(generated, spec), MOUTH_BASE + MOUTH_GAIN * track)


def background_mask(spec: SceneSpec) -> np.ndarray:
    """Pixels of frame 0 outside the mouth and the secondary object."""
    keep = np.ones((spec.height, spec.width), dtype=bool)
    for rect in (spec.mouth, spec.object_at(0)):
        ys, xs = rect.slices()
        keep[ys, xs] = False
    return keep


def identity_error(generated: np.ndarray, portrait: np.ndarray, spec: SceneSpec) -> float:
    """Mean absolute error of frame 0 against the portrait on background pixels."""
    frame = np.asarray(generated, dtype=np.float64)
    frame = frame[0, 0] if frame.ndim == 4 else frame
    portrait = np.asarray(portrait, dtype=np.float64)
    if frame.shape != portrait.shape:
        raise ValueError(f"shape mismatch: {frame.shape} vs {portrait.shape}")
    keep = background_mask(spec)
    return float(np.abs(frame - portrait)[keep].mean())


@dataclass(frozen=True)
class Smoothness:
    interior: float
    seam: float
    ratio: float
    flagged: bool


def seam_transitions(plan: WindowPlan) -> list[int]:
    """Frame ``m`` such that the transition ``(m - 1, m)`` is the seam of each window.

    The seam sits at the middle of the overlap a window shares with its
    predecessor, where the blend hands over from old to new.
    """
    seams = []
    for (s, _), width in zip(plan.spans[1:], plan.overlaps[1:]):
        seams.append(s + math.ceil(width / 2))
    return seams


def smoothness(generated: np.ndarray, plan: WindowPlan) -> Smoothness:
    video = np.asarray(generated, dtype=np.float64)
    t = video.shape[0]
    if t < 2:
        raise ValueError("need at least two frames")
    diffs = np.abs(np.diff(video, axis=0)).reshape(t - 1, -1).mean(axis=1)
    seams = sorted(set(seam_transitions(plan)))
    seam_idx = [m - 1 for m in seams if 1 <= m < t]
    interior_idx = [i for i in range(t - 1) if i not in seam_idx]
    interior = float(diffs[interior_idx].mean()) if interior_idx else 0.0
    if not seam_idx:
        return Smoothness(interior, 0.0, 1.0, True)
    seam = float(diffs[seam_idx].mean())
    if interior <= 0.0:
        return Smoothness(interior, seam, 1.0, True)
    return Smoothness(interior, seam, seam / interior, False)


# report ----------------------------------------------------------------------

ROW_FIELDS = ["index", "sync_proxy", "sync_degenerate", "identity_error",
              "seam_mean", "interior_mean", "smooth_ratio", "smooth_flagged"]


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, index: int, sync: SyncResult, ident: float, smooth: Smoothness) -> None:
        if ident < 0:
            raise ValueError("identity error must be non-negative")
        self.rows.append({
            "index": index, "sync_proxy": sync.correlation, "sync_degenerate": int(sync.degenerate),
            "identity_error": ident, "seam_mean": smooth.seam, "interior_mean": smooth.interior,
            "smooth_ratio": smooth.ratio, "smooth_flagged": int(smooth.flagged),
        })

    def aggregate(self) -> dict:
        if not self.rows:
            return {}
        out = {"count": len(self.rows)}
        for key in ("sync_proxy", "identity_error", "smooth_ratio"):
            out[key] = float(np.mean([r[key] for r in self.rows]))
        out["sync_degenerate"] = int(sum(r["sync_degenerate"] for r in self.rows))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "aggregate": self.aggregate()}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(rows=json.loads(text)["rows"])

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = []
        for raw in csv.DictReader(io.StringIO(text)):
            row = {}
            for k, v in raw.items():
                row[k] = int(v) if k in ("index", "sync_degenerate", "smooth_flagged") else float(v)
            rows.append(row)
        return cls(rows=rows)


__all__ = ["EvalReport", "Smoothness", "SyncResult", "background_mask", "identity_error",
           "pearson", "seam_transitions", "smoothness", "sync_proxy"]
