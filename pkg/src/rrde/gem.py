"""Group emotion models: combine per-face estimates or features into one group value."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GEMS = ("mean_estimation", "mean_encoding", "weighted_mean_estimation", "weighted_mean_encoding")
ENCODING_GEMS = ("mean_encoding", "weighted_mean_encoding")


class DegenerateGeometryError(ValueError):
    pass


@dataclass(eq=False)
class FaceRecord:
    """What a GEM needs to know about one face.

    ``estimate`` is the face-level happiness prediction, ``feature`` the
    aggregated face descriptor, ``bbox_area_px`` and ``centroid`` its box.
    """

    estimate: float = 0.0
    feature: np.ndarray | None = None
    bbox_area_px: float = 1.0
    centroid: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.bbox_area_px > 0:
            raise ValueError(f"bbox_area_px must be positive, got {self.bbox_area_px}")


@dataclass(frozen=True)
class GroupPrediction:
    value: float
    model: str


def _nonempty(faces):
    faces = list(faces)
    if not faces:
        raise ValueError("a group needs at least one face")
    return faces


def _features(faces):
    lengths = {np.shape(f.feature) for f in faces}
    if len(lengths) != 1:
        raise ValueError(f"face features have mismatched shapes {sorted(lengths)}")
    return np.stack([np.asarray(f.feature, dtype=np.float64) for f in faces])


def mean_estimation(faces) -> float:
    faces = _nonempty(faces)
    return float(sum(f.estimate for f in faces) / len(faces))


def mean_encoding(faces) -> np.ndarray:
    return _features(_nonempty(faces)).mean(axis=0)


def significance(faces) -> np.ndarray:
    """Box area divided by the summed distance to every face's centroid.

    A lone face gets weight 1.  Coincident centroids in a multi-face group
    leave the weight undefined and raise :class:`DegenerateGeometryError`.
    """
    faces = _nonempty(faces)
    if len(faces) == 1:
        return np.ones(1)
    c = np.array([f.centroid for f in faces], dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("centroids must be finite")
    delta = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1).sum(axis=1)
    if np.any(delta == 0):
        raise DegenerateGeometryError(f"all centroids coincide at {tuple(c[0])}; significance undefined")
    theta = np.array([f.bbox_area_px for f in faces], dtype=np.float64)
    return theta / delta


def weighted_mean_estimation(faces) -> float:
    faces = _nonempty(faces)
    s = significance(faces)
    f = np.array([r.estimate for r in faces], dtype=np.float64)
    return float(s @ f / s.sum())


def weighted_mean_encoding(faces) -> np.ndarray:
    faces = _nonempty(faces)
    s = significance(faces)
    return s @ _features(faces) / s.sum()


def group_representation(gem: str, faces):
    """Dispatch by GEM name: a float for estimation GEMs, a vector for encodings."""
    try:
        fn = {"mean_estimation": mean_estimation, "mean_encoding": mean_encoding,
              "weighted_mean_estimation": weighted_mean_estimation,
              "weighted_mean_encoding": weighted_mean_encoding}[gem]
    except KeyError:
        raise ValueError(f"unknown GEM {gem!r}; choose from {GEMS}") from None
    return fn(faces)
