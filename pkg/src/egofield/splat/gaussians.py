from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from egofield import storage

PARAM_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits", "color_logits", "features")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianSet:
    """Structure-of-arrays parameter store for N Gaussians.

    Parameters are kept raw (pre-activation): scales are ``exp(log_scales)``,
    opacities and colours pass through a logistic, rotations are quaternions
    (w, x, y, z) normalised on use. Features are used as-is.
    """

    positions: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    opacity_logits: np.ndarray  # (N,)
    color_logits: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, d)

    def __post_init__(self) -> None:
        for f in fields(self):
            setattr(self, f.name, np.ascontiguousarray(getattr(self, f.name), dtype=np.float64))
        n = len(self.positions)
        if self.features.ndim == 1:
            self.features = self.features.reshape(n, -1)
        for f in fields(self):
            if len(getattr(self, f.name)) != n:
                raise ValueError(f"{f.name} has {len(getattr(self, f.name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.color_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @classmethod
    def create(cls, positions, scales, colors, opacities, features=None, rotations=None, feature_dim: int = 16):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if features is None:
            features = np.zeros((n, feature_dim))
        features = np.asarray(features, dtype=np.float64)
        features = features.reshape(n, features.shape[-1] if features.ndim > 1 else -1)
        opac = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
        col = np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3))
        return cls(positions, np.log(scales), rotations, logit(opac), logit(col), features)

    def copy(self) -> "GaussianSet":
        return replace(self, **{g: getattr(self, g).copy() for g in PARAM_GROUPS})

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(**{g: getattr(self, g)[idx] for g in PARAM_GROUPS})

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        return GaussianSet(**{g: np.concatenate([getattr(self, g), getattr(other, g)]) for g in PARAM_GROUPS})

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def params(self) -> dict[str, np.ndarray]:
        return {g: getattr(self, g) for g in PARAM_GROUPS}


def save_checkpoint(directory: str | Path, gaussians: GaussianSet, iteration: int = 0, **extra) -> None:
    """One ESTF per parameter group plus ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = len(gaussians)
    for g in PARAM_GROUPS:
        arr = getattr(gaussians, g)
        if n == 0 or arr.size == 0:
            continue
        storage.write_tensor(directory / f"{g}.estf", arr)
    storage.write_manifest(
        directory / "manifest.txt",
        {"N": n, "d": gaussians.feature_dim, "iteration": iteration, **extra},
    )


def load_checkpoint(directory: str | Path) -> tuple[GaussianSet, dict[str, str]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint: {directory}")
    manifest = storage.read_manifest(manifest_path)
    n, d = int(manifest["N"]), int(manifest["d"])
    widths = {"positions": 3, "log_scales": 3, "rotations": 4, "opacity_logits": None, "color_logits": 3, "features": d}
    arrays = {}
    for g in PARAM_GROUPS:
        path = directory / f"{g}.estf"
        if path.exists():
            arrays[g] = storage.read_tensor(path).astype(np.float64)
        else:
            shape = (n,) if widths[g] is None else (n, widths[g])
            arrays[g] = np.zeros(shape)
    if arrays["features"].ndim == 1:
        arrays["features"] = arrays["features"].reshape(n, d)
    return GaussianSet(**arrays), manifest
