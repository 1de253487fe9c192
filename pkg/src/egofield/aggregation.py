"""Multi-view instance feature aggregation with MAD outlier rejection.

For each tracked instance the per-view features are compared against their
component-wise median; views deviating by more than ``k`` MADs are dropped
and the rest averaged into one view-consistent feature. Each view's training
target is then a blend of its own feature and the consistent one.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from egofield import storage
from egofield.perception import FeatureBank, SegmentSet

MAD_FLOOR = 1e-6
RULES = ("component", "norm")


class AggregationError(ValueError):
    pass


@dataclass
class AggregationResult:
    median: np.ndarray  # (d,)
    mad: np.ndarray  # (d,) for the component rule, (1,) for the norm rule
    inliers: np.ndarray  # (N,) bool; invalid frames are never inliers
    deviation: np.ndarray  # (N,) deviation in units of (MAD + floor); nan for invalid frames
    mean_inlier: np.ndarray  # (d,) plain inlier average, before renormalisation
    consistent: np.ndarray  # (d,) unit-norm view-consistent feature
    final: np.ndarray  # (N, d) per-view training targets; zero rows for invalid frames

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def _valid_rows(features: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if valid is None:
        valid = np.ones(len(features), dtype=bool)
    rows = features[np.asarray(valid, dtype=bool)]
    if len(rows) == 0:
        raise AggregationError("no observations")
    return rows


def _median_rows(rows: np.ndarray) -> np.ndarray:
    s = np.sort(rows, axis=0)
    n = len(s)
    if n % 2:
        return s[n // 2].copy()
    return (s[n // 2 - 1] + s[n // 2]) / 2.0


def median_feature(features: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Component-wise median over valid frames (even counts average the middle pair)."""
    return _median_rows(_valid_rows(features, valid))


def mad(features: np.ndarray, valid: np.ndarray | None = None, median: np.ndarray | None = None) -> np.ndarray:
    """Component-wise median absolute deviation from ``median``."""
    rows = _valid_rows(features, valid)
    if median is None:
        median = _median_rows(rows)
    return _median_rows(np.abs(rows - median))


def aggregate(features: np.ndarray, valid: np.ndarray | None = None, k: float = 3.0,
              rule: str = "component", weight: float = 0.5) -> AggregationResult:
    """Robust view-consistent feature for one instance.

    ``rule="component"`` rejects a view if any component deviates by more
    than k * (MAD + floor) in that component. ``rule="norm"`` compares the
    L2 deviation against k * (median L2 deviation + floor). ``weight`` is the
    share of the view-specific feature in each per-view target.
    """
    if k <= 0:
        raise AggregationError("k must be positive")
    if rule not in RULES:
        raise AggregationError(f"unknown deviation rule {rule!r}")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    n, d = features.shape
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    rows = _valid_rows(features, valid)
    med = _median_rows(rows)

    dev = np.abs(features - med)
    if rule == "component":
        spread = _median_rows(np.abs(rows - med))
        ok = np.all(dev <= k * (spread + MAD_FLOOR), axis=1)
        score = np.max(dev / (spread + MAD_FLOOR), axis=1)
    else:
        dist = np.sqrt(np.sum((features - med) ** 2, axis=1))
        spread = np.array([_median_rows(dist[valid][:, None])[0]])
        ok = dist <= k * (spread[0] + MAD_FLOOR)
        score = dist / (spread[0] + MAD_FLOOR)
    inliers = ok & valid

    if inliers.any():
        total = np.zeros(d)
        for row in features[inliers]:
            total += row
        mean_in = total / inliers.sum()
    else:
        mean_in = med.copy()
    consistent = _unit(mean_in)

    final = np.zeros((n, d))
    for j in np.flatnonzero(valid):
        final[j] = _unit(weight * features[j] + (1.0 - weight) * consistent)
    return AggregationResult(
        median=med, mad=spread, inliers=inliers, deviation=np.where(valid, score, np.nan),
        mean_inlier=mean_in, consistent=consistent, final=final,
    )


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(v * v))
    return v / norm if norm > 0 else v


def aggregate_bank(bank: FeatureBank, k: float = 3.0, rule: str = "component",
                   weight: float = 0.5) -> dict[int, AggregationResult]:
    out = {}
    for inst in bank.instance_ids:
        feats, valid = bank.series(inst)
        if valid.any():
            out[inst] = aggregate(feats, valid, k, rule, weight)
    return out


def target_features(bank: FeatureBank, results: dict[int, AggregationResult] | None) -> np.ndarray:
    """(I, F, d) per-view training targets; raw per-view features when ``results`` is None."""
    if results is None:
        return bank.features.copy()
    out = np.zeros_like(bank.features)
    for k, inst in enumerate(bank.instance_ids):
        if inst in results:
            out[k] = results[inst].final
    return out


def build_feature_maps(segments: SegmentSet, instance_ids: Sequence[int], targets: np.ndarray,
                       background: np.ndarray) -> np.ndarray:
    """Per-frame ground-truth feature maps, (F, H, W, d).

    ``targets[k, pos]`` is the feature painted on the pixels of segment
    ``instance_ids[k]`` in frame position ``pos``; other pixels get ``background``.
    """
    n_frames, h, w = segments.id_maps.shape
    d = len(background)
    maps = np.broadcast_to(np.asarray(background, dtype=np.float64), (n_frames, h, w, d)).copy()
    lookup = {int(i): k for k, i in enumerate(instance_ids)}
    for pos in range(n_frames):
        ids = segments.id_maps[pos]
        for inst in np.unique(ids):
            if inst == 0 or int(inst) not in lookup:
                continue
            maps[pos][ids == inst] = targets[lookup[int(inst)], pos]
    return maps


def check_disjoint(masks: Sequence[np.ndarray]) -> None:
    """Segments painted into one frame must not overlap."""
    if not masks:
        return
    counts = np.sum([np.asarray(m, dtype=np.int32) for m in masks], axis=0)
    if counts.max() > 1:
        raise AggregationError("overlapping segments in one frame")


def feature_maps_from_masks(masks: Sequence[np.ndarray], features: Sequence[np.ndarray],
                            background: np.ndarray) -> np.ndarray:
    """Single-frame variant taking explicit masks; rejects overlapping masks."""
    check_disjoint(masks)
    h, w = np.asarray(masks[0]).shape if masks else (0, 0)
    out = np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w, len(background))).copy()
    for m, f in zip(masks, features):
        out[np.asarray(m, dtype=bool)] = f
    return out


def pca_compress(features: np.ndarray, dims: int = 3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project rows onto their top principal directions. Returns (codes, mean, basis)."""
    x = np.asarray(features, dtype=np.float64)
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    basis = vt[:dims]
    return (x - mean) @ basis.T, mean, basis


def write_results(directory: str | Path, bank: FeatureBank, results: dict[int, AggregationResult]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = [i for i in bank.instance_ids if i in results]
    if ids:
        storage.write_tensor(directory / "median.estf", np.array([results[i].median for i in ids]))
        storage.write_tensor(directory / "mad.estf", np.array([results[i].mad for i in ids]))
        storage.write_tensor(directory / "consistent.estf", np.array([results[i].consistent for i in ids]))
        storage.write_tensor(directory / "inliers.estf", np.array([results[i].inliers for i in ids]).astype(np.uint8))
        storage.write_tensor(directory / "instances.estf", np.array(ids, dtype=np.uint32))
    storage.write_tensor(directory / "targets.estf", target_features(bank, results))
    rows = []
    for i in ids:
        r = results[i]
        for pos, frame in enumerate(bank.frame_indices):
            if bank.series(i)[1][pos]:
                rows.append((i, frame, float(r.deviation[pos]), bool(r.inliers[pos])))
    storage.write_csv(directory / "inliers.csv", ["instance", "frame", "deviation", "inlier"], rows)
