"""Open-vocabulary querying on rendered feature maps, and the benchmark harness."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from egofield import storage


class QueryError(ValueError):
    pass


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise QueryError(f"zero {what} vector")
    return x / norms


def relevancy(feature: np.ndarray, query: np.ndarray, canonicals: np.ndarray) -> float:
    """min over canonicals of the two-way softmax of query vs canonical cosine similarity."""
    f = _unit_rows(feature, "feature")
    q = _unit_rows(query, "query")
    c = _unit_rows(np.atleast_2d(canonicals), "canonical")
    if len(c) == 0:
        raise QueryError("no canonical vectors")
    s_q = float(f @ q)
    best = 1.0
    for s_c in c @ f:
        r = 1.0 / (1.0 + np.exp(float(s_c) - s_q))
        best = min(best, r)
    return best


def relevancy_map(features: np.ndarray, query: np.ndarray, canonicals: np.ndarray) -> np.ndarray:
    """Vectorised relevancy over an (H, W, d) feature map.

    exp(a) / (exp(a) + exp(b)) is decreasing in b, so the minimum over
    canonicals is attained at the most similar one.
    """
    f = _unit_rows(features, "feature")
    q = _unit_rows(query, "query")
    c = _unit_rows(np.atleast_2d(canonicals), "canonical")
    s_q = f @ q
    s_c = (f @ c.T).max(axis=-1)
    return 1.0 / (1.0 + np.exp(s_c - s_q))


def localize(rel: np.ndarray) -> tuple[int, int]:
    """(row, col) of the maximum; the first in row-major order wins ties."""
    rel = np.asarray(rel)
    if rel.size == 0:
        raise QueryError("empty relevancy map")
    flat = int(np.argmax(rel))
    return divmod(flat, rel.shape[1])


def segment(rel: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise QueryError("threshold must lie in (0, 1)")
    return np.asarray(rel) >= threshold


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


# -------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class EvalRecord:
    frame: int
    query: str
    dynamic: bool
    hit: bool
    iou: float


@dataclass
class EvalSummary:
    records: list[EvalRecord]

    def split(self, which: str) -> list[EvalRecord]:
        if which == "static":
            return [r for r in self.records if not r.dynamic]
        if which == "dynamic":
            return [r for r in self.records if r.dynamic]
        if which == "all":
            return list(self.records)
        raise ValueError(f"unknown split {which!r}")

    def accuracy(self, which: str = "all") -> float:
        rs = self.split(which)
        return float(np.mean([r.hit for r in rs])) if rs else float("nan")

    def miou(self, which: str = "all") -> float:
        rs = self.split(which)
        return float(np.mean([r.iou for r in rs])) if rs else float("nan")

    def table(self) -> dict[str, tuple[float, float, int]]:
        return {w: (self.accuracy(w), self.miou(w), len(self.split(w))) for w in ("static", "dynamic", "all")}


def evaluate_predictions(frame_indices: Sequence[int], predictions: Sequence[dict[str, tuple[tuple[int, int], np.ndarray]]],
                         gt_masks: Sequence[dict[str, np.ndarray]], dynamic: set[str]) -> EvalSummary:
    """Score (point, mask) predictions per query against GT masks.

    Queries whose GT mask is empty in a frame are not scored for that frame.
    """
    recs = []
    for frame, preds, gts in zip(frame_indices, predictions, gt_masks):
        for label in sorted(gts):
            gt = gts[label]
            if not gt.any():
                continue
            (r, c), mask = preds[label]
            recs.append(EvalRecord(int(frame), label, label in dynamic, bool(gt[r, c]), mask_iou(mask, gt)))
    return EvalSummary(recs)


def gt_category_masks(instance_map: np.ndarray, categories: dict[int, str]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for inst, cat in categories.items():
        m = instance_map == inst
        out[cat] = out[cat] | m if cat in out else m
    return out


def evaluate(feature_maps: Sequence[np.ndarray], frame_indices: Sequence[int], instance_maps: Sequence[np.ndarray],
             queries: Sequence[str], table, categories: dict[int, str], dynamic: set[str],
             threshold: float = 0.5) -> tuple[EvalSummary, list[dict[str, np.ndarray]]]:
    """Query rendered feature maps; returns the summary and per-frame relevancy maps."""
    for q in queries:
        if q not in table.vectors:
            raise QueryError(f"query category {q!r} not in embedding table")
    preds, gts, rels = [], [], []
    for fmap, inst_map in zip(feature_maps, instance_maps):
        gt_all = gt_category_masks(inst_map, categories)
        gts.append({q: gt_all.get(q, np.zeros(inst_map.shape, dtype=bool)) for q in queries})
        frame_preds, frame_rels = {}, {}
        for q in queries:
            rel = relevancy_map(fmap, table.encode(q), table.canonicals)
            frame_rels[q] = rel
            frame_preds[q] = (localize(rel), segment(rel, threshold))
        preds.append(frame_preds)
        rels.append(frame_rels)
    return evaluate_predictions(frame_indices, preds, gts, dynamic), rels


def format_table(rows: dict[str, EvalSummary]) -> str:
    """Aligned text: one row per configuration, Acc/mIoU per split."""
    head = ["config", "acc_static", "miou_static", "acc_dynamic", "miou_dynamic", "acc_all", "miou_all"]
    body = []
    for name, s in rows.items():
        t = s.table()
        body.append([name] + [f"{v:.4f}" for w in ("static", "dynamic", "all") for v in t[w][:2]])
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [head] + body]
    return "\n".join(lines) + "\n"


def write_eval(directory: str | Path, summary: EvalSummary, name: str = "eval") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    storage.write_csv(
        directory / f"{name}_records.csv", ["frame", "query", "dynamic", "hit", "iou"],
        [(r.frame, r.query, r.dynamic, r.hit, r.iou) for r in summary.records],
    )
    (directory / f"{name}_table.txt").write_text(format_table({name: summary}), encoding="utf-8")


def write_relevancy(directory: str | Path, frame: int, label: str, rel: np.ndarray,
                    heat: Optional[bool] = True) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"frame_{frame:04d}_{label}"
    storage.write_map(directory / f"{stem}.estf", rel)
    if heat:
        storage.write_ppm(directory / f"{stem}.ppm", np.repeat(rel[..., None], 3, axis=-1))
