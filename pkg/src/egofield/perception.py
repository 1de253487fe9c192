"""Ground-truth-driven stand-ins for video segmentation and image-text features.

Segments come from the ray-cast instance maps (optionally with seeded id
switches), and per-view features are category embeddings blended with the
embeddings of whatever occludes the instance, plus seeded noise. Everything
downstream only sees masks and per-view vectors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from egofield import storage
from egofield.scene import GroundTruthFrame, SceneSpec, occluders, visibility

log = logging.getLogger(__name__)

BACKGROUND = "background"


class PerceptionError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    """Unit vectors per category label, plus canonical vectors for relevancy."""

    vectors: dict[str, np.ndarray]
    canonicals: np.ndarray  # (C, d)

    @property
    def dim(self) -> int:
        return self.canonicals.shape[1]

    def encode(self, label: str) -> np.ndarray:
        try:
            return self.vectors[label]
        except KeyError:
            raise KeyError(f"category {label!r} not in embedding table") from None

    @property
    def background(self) -> np.ndarray:
        return self.vectors[BACKGROUND]

    @classmethod
    def build(cls, categories: Sequence[str], dim: int = 16, n_canonical: int = 4, seed: int = 0,
              generic_weight: float = 0.5, canonical_spread: float = 0.3) -> "EmbeddingTable":
        """Categories share a common "generic" direction; canonicals lean on it harder.

        That puts sim(category, canonical) above sim(category_a, category_b),
        so a pixel only scores above 0.5 relevancy for its own category.
        """
        labels = list(dict.fromkeys([*categories, BACKGROUND]))
        if len(labels) + 1 > dim:
            raise PerceptionError(f"dim {dim} too small for {len(labels)} categories")
        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.standard_normal((dim, len(labels) + 1)))
        generic = basis[:, 0]
        vectors = {}
        for k, label in enumerate(labels):
            v = generic_weight * generic + basis[:, k + 1]
            vectors[label] = v / np.linalg.norm(v)
        canon = []
        for _ in range(n_canonical):
            u = rng.standard_normal(dim)
            u -= (u @ generic) * generic
            u /= np.linalg.norm(u)
            c = generic + canonical_spread * u
            canon.append(c / np.linalg.norm(c))
        table = cls(vectors, np.array(canon))
        table.validate()
        return table

    def validate(self) -> None:
        vs = np.array(list(self.vectors.values()))
        if not np.allclose(np.linalg.norm(vs, axis=1), 1.0) or not np.allclose(np.linalg.norm(self.canonicals, axis=1), 1.0):
            raise PerceptionError("embedding vectors must be unit-norm")
        gram = vs @ vs.T - np.eye(len(vs)) * 2
        if gram.max() >= 0.9:
            raise PerceptionError("two categories are too similar (cosine >= 0.9)")

    def write(self, path: str | Path) -> None:
        lines = []
        for label, v in self.vectors.items():
            lines.append("\t".join(["category", label, *(repr(float(x)) for x in v)]))
        for k, v in enumerate(self.canonicals):
            lines.append("\t".join(["canonical", f"c{k}", *(repr(float(x)) for x in v)]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "EmbeddingTable":
        vectors, canon = {}, []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            kind, label, *vals = line.split("\t")
            v = np.array([float(x) for x in vals])
            if kind == "category":
                vectors[label] = v
            elif kind == "canonical":
                canon.append(v)
            else:
                raise PerceptionError(f"unknown embedding row kind {kind!r}")
        return cls(vectors, np.array(canon))


@dataclass
class CorruptionConfig:
    feature_noise: float = 0.05  # per-component std before normalisation
    occlusion_strength: float = 1.0  # 1 = blend linearly in visibility, 0 = ignore occlusion
    id_switch_prob: float = 0.0
    candidate_shift: int = 1  # max pixel shift of perturbed candidate masks
    candidate_copies: int = 3
    min_predicted_iou: float = 0.8
    min_stability: float = 0.8
    overlap_threshold: float = 0.7

    def __post_init__(self) -> None:
        if self.feature_noise < 0:
            raise PerceptionError("feature_noise must be >= 0")
        for name in ("id_switch_prob", "occlusion_strength", "min_predicted_iou", "min_stability", "overlap_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PerceptionError(f"{name} must be in [0, 1], got {v}")

    @classmethod
    def clean(cls) -> "CorruptionConfig":
        return cls(feature_noise=0.0, id_switch_prob=0.0)


# ------------------------------------------------------------------ masks

@dataclass
class MaskCandidate:
    mask: np.ndarray
    predicted_iou: float
    stability: float

    @property
    def score(self) -> float:
        return self.predicted_iou * self.stability


def overlap_rate(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over the smaller area."""
    small = min(int(a.sum()), int(b.sum()))
    if small == 0:
        return 0.0
    return float(np.count_nonzero(a & b)) / small


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return float(np.count_nonzero(a & b)) / union if union else 0.0


def dedup_masks(candidates: Sequence[MaskCandidate], overlap_threshold: float = 0.7,
                min_predicted_iou: float = 0.8, min_stability: float = 0.8) -> list[np.ndarray]:
    """Drop low-quality candidates, then greedily keep the best of each overlapping group."""
    pool = [
        (k, c) for k, c in enumerate(candidates)
        if c.predicted_iou >= min_predicted_iou and c.stability >= min_stability and c.mask.any()
    ]
    pool.sort(key=lambda kc: (-kc[1].score, kc[0]))
    kept: list[np.ndarray] = []
    for _, cand in pool:
        m = cand.mask.astype(bool)
        if all(overlap_rate(m, other) <= overlap_threshold for other in kept):
            kept.append(m)
    return kept


def perturb_mask(mask: np.ndarray, shift: int, rng: np.random.Generator) -> np.ndarray:
    dy, dx = rng.integers(-shift, shift + 1, size=2)
    shifted = np.roll(mask, (int(dy), int(dx)), axis=(0, 1))
    return shifted | mask if rng.random() < 0.5 else shifted & mask


def propose_candidates(frame: GroundTruthFrame, cfg: CorruptionConfig, rng: np.random.Generator) -> list[MaskCandidate]:
    """Point-prompt output substitute: each GT mask plus perturbed duplicates."""
    out = []
    for inst in np.unique(frame.instance_id):
        if inst == 0:
            continue
        gt = frame.instance_id == inst
        out.append(MaskCandidate(gt, float(rng.uniform(0.85, 1.0)), float(rng.uniform(0.85, 1.0))))
        for _ in range(cfg.candidate_copies):
            out.append(MaskCandidate(
                perturb_mask(gt, cfg.candidate_shift, rng),
                float(rng.uniform(0.6, 0.95)), float(rng.uniform(0.6, 0.95)),
            ))
    return out


def prompt_instances(frames: Sequence[GroundTruthFrame], cfg: CorruptionConfig, seed: int) -> list[int]:
    """Ids of instances recovered from deduplicated candidates, in first-seen order."""
    rng = np.random.default_rng([seed, 0x5E6])
    found: list[int] = []
    for fr in frames:
        kept = dedup_masks(propose_candidates(fr, cfg, rng), cfg.overlap_threshold,
                           cfg.min_predicted_iou, cfg.min_stability)
        for m in kept:
            ids, counts = np.unique(fr.instance_id[m], return_counts=True)
            best = int(ids[np.argmax(counts)])
            if best != 0 and best not in found and iou(m, fr.instance_id == best) > 0.5:
                found.append(best)
    return found


# --------------------------------------------------------------- tracking

@dataclass
class SegmentSet:
    """Tracked instance masks S_i^j stored as one id map per frame (disjoint by construction)."""

    frame_indices: list[int]
    id_maps: np.ndarray  # (F, H, W) uint32, 0 = untracked
    instance_ids: list[int]
    switches: list[tuple[int, int, int]] = field(default_factory=list)  # (frame, id_a, id_b)

    def mask(self, instance_id: int, position: int) -> np.ndarray:
        return self.id_maps[position] == instance_id

    def area(self, instance_id: int) -> np.ndarray:
        return np.array([(m == instance_id).sum() for m in self.id_maps])

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        storage.write_tensor(directory / "id_maps.estf", self.id_maps.astype(np.uint32))
        storage.write_tensor(directory / "frames.estf", np.array(self.frame_indices, dtype=np.uint32))
        storage.write_tensor(directory / "instances.estf", np.array(self.instance_ids or [0], dtype=np.uint32))
        storage.write_csv(directory / "switches.csv", ["frame", "id_a", "id_b"], self.switches)

    @classmethod
    def read(cls, directory: str | Path) -> "SegmentSet":
        directory = Path(directory)
        if not (directory / "id_maps.estf").exists():
            raise FileNotFoundError(f"missing segments under {directory}")
        ids = [int(i) for i in storage.read_tensor(directory / "instances.estf") if i != 0]
        switches = [(int(r["frame"]), int(r["id_a"]), int(r["id_b"])) for r in storage.read_csv(directory / "switches.csv")]
        return cls(
            [int(i) for i in storage.read_tensor(directory / "frames.estf")],
            storage.read_tensor(directory / "id_maps.estf"),
            ids,
            switches,
        )


def track(frames: Sequence[GroundTruthFrame], cfg: CorruptionConfig, seed: int,
          instance_ids: Optional[Sequence[int]] = None) -> SegmentSet:
    """Propagate instance identities through the sequence.

    From frame 1 on, with probability ``id_switch_prob`` per frame two
    tracked ids trade places (and stay traded until switched again).
    """
    if not frames:
        raise PerceptionError("no frames to track")
    if instance_ids is None:
        instance_ids = sorted({int(i) for fr in frames for i in np.unique(fr.instance_id) if i != 0})
    ids = list(instance_ids)
    rng = np.random.default_rng([seed, 0x7AC])
    label = {i: i for i in ids}  # true id -> reported id
    switches = []
    maps = np.zeros((len(frames),) + frames[0].instance_id.shape, dtype=np.uint32)
    for pos, fr in enumerate(frames):
        if pos > 0 and len(ids) >= 2 and rng.random() < cfg.id_switch_prob:
            a, b = (ids[k] for k in sorted(rng.choice(len(ids), size=2, replace=False)))
            label[a], label[b] = label[b], label[a]
            switches.append((fr.index, a, b))
        for true_id, reported in label.items():
            maps[pos][fr.instance_id == true_id] = reported
    return SegmentSet([fr.index for fr in frames], maps, ids, switches)


# --------------------------------------------------------------- features

def blend_feature(visible: float, e_category: np.ndarray, e_occluder: np.ndarray, noise: np.ndarray) -> np.ndarray:
    v = visible * e_category + (1.0 - visible) * e_occluder + noise
    return v / np.linalg.norm(v)


def extract_feature(mask: np.ndarray, frame: GroundTruthFrame, spec: SceneSpec, table: EmbeddingTable,
                    cfg: CorruptionConfig, seed: int, instance_id: int) -> np.ndarray:
    """Per-view feature for one segment (the masked-crop encoder substitute)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise PerceptionError("empty segment")
    under = frame.instance_id[mask]
    ids, counts = np.unique(under, return_counts=True)
    true_id = int(ids[np.argmax(counts)])
    rng = np.random.default_rng([seed, int(instance_id), int(frame.index)])
    noise = cfg.feature_noise * rng.standard_normal(table.dim)
    if true_id == 0:
        return blend_feature(1.0, table.background, table.background, noise)
    e_cat = table.encode(spec.object(true_id).category)
    vis = visibility(frame, true_id, spec).fraction
    vis = 1.0 - cfg.occlusion_strength * (1.0 - vis)
    occ = occluders(frame, true_id, spec)
    if occ:
        total = sum(occ.values())
        e_occ = sum(cnt * table.encode(spec.object(oid).category) for oid, cnt in occ.items()) / total
    else:
        e_occ = table.background
    return blend_feature(vis, e_cat, e_occ, noise)


@dataclass
class FeatureBank:
    """Per-(instance, frame) features F_i^j with a validity mask."""

    instance_ids: list[int]
    frame_indices: list[int]
    features: np.ndarray  # (I, F, d)
    valid: np.ndarray  # (I, F) bool

    def series(self, instance_id: int) -> tuple[np.ndarray, np.ndarray]:
        k = self.instance_ids.index(instance_id)
        return self.features[k], self.valid[k]

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        storage.write_tensor(directory / "features.estf", self.features)
        storage.write_tensor(directory / "valid.estf", self.valid.astype(np.uint8))
        storage.write_tensor(directory / "instances.estf", np.array(self.instance_ids, dtype=np.uint32))
        storage.write_tensor(directory / "frames.estf", np.array(self.frame_indices, dtype=np.uint32))

    @classmethod
    def read(cls, directory: str | Path) -> "FeatureBank":
        directory = Path(directory)
        if not (directory / "features.estf").exists():
            raise FileNotFoundError(f"missing features under {directory}")
        return cls(
            [int(i) for i in storage.read_tensor(directory / "instances.estf")],
            [int(i) for i in storage.read_tensor(directory / "frames.estf")],
            storage.read_tensor(directory / "features.estf").astype(np.float64),
            storage.read_tensor(directory / "valid.estf").astype(bool),
        )


def extract_all(segments: SegmentSet, frames: Sequence[GroundTruthFrame], spec: SceneSpec,
                table: EmbeddingTable, cfg: CorruptionConfig, seed: int) -> FeatureBank:
    n_i, n_f = len(segments.instance_ids), len(frames)
    feats = np.zeros((n_i, n_f, table.dim))
    valid = np.zeros((n_i, n_f), dtype=bool)
    for k, inst in enumerate(segments.instance_ids):
        for pos, fr in enumerate(frames):
            m = segments.mask(inst, pos)
            if m.any():
                feats[k, pos] = extract_feature(m, fr, spec, table, cfg, seed, inst)
                valid[k, pos] = True
    return FeatureBank(list(segments.instance_ids), [fr.index for fr in frames], feats, valid)
