"""Face/group samples, class balancing, bootstrap replicas, augmentation, and
a procedural group-photo generator used in place of the real challenge data.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_CLASSES = 6
INPUT_SIZE = 32
MANIFEST_COLUMNS = ("group_id", "path", "label", "bbox_x", "bbox_y", "bbox_w", "bbox_h", "group_label")


@dataclass(eq=False)
class FaceSample:
    """One face patch. ``image`` is (3, H, W) uint8; bbox is (x, y, w, h) on the group canvas."""

    image: np.ndarray
    label: int
    group_id: str
    bbox: tuple
    path: str = ""

    def __post_init__(self):
        if not 0 <= self.label < NUM_CLASSES:
            raise ValueError(f"label must be in [0, 5], got {self.label}")
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"bbox must have positive area, got {self.bbox}")

    @property
    def bbox_area_px(self) -> float:
        return float(self.bbox[2] * self.bbox[3])

    @property
    def centroid(self) -> tuple:
        x, y, w, h = self.bbox
        return (x + w / 2.0, y + h / 2.0)


@dataclass(eq=False)
class GroupSample:
    group_id: str
    faces: list
    group_label: int

    def __post_init__(self):
        if not self.faces:
            raise ValueError(f"group {self.group_id} has no faces")
        for f in self.faces:
            if f.group_id != self.group_id:
                raise ValueError(f"face tagged {f.group_id!r} inside group {self.group_id!r}")


@dataclass(eq=False)
class DatasetManifest:
    split: str
    groups: list
    per_class_counts: tuple = field(default=())

    def __post_init__(self):
        counts = class_counts(self.faces())
        if self.per_class_counts and tuple(self.per_class_counts) != counts:
            raise ValueError(f"per_class_counts {self.per_class_counts} disagree with faces {counts}")
        self.per_class_counts = counts

    def faces(self) -> list:
        return [f for g in self.groups for f in g.faces]


def class_counts(faces) -> tuple:
    counts = [0] * NUM_CLASSES
    for f in faces:
        counts[f.label] += 1
    return tuple(counts)


# --------------------------------------------------------------------------
# sampling

def balance_subset(faces, per_class: int, seed: int = 0) -> list:
    """Pick ``per_class`` faces of every label uniformly without replacement, then shuffle."""
    rng = np.random.default_rng(seed)
    by_class = _by_class(faces)
    chosen = []
    for c in range(NUM_CLASSES):
        pool = by_class[c]
        if not pool:
            raise ValueError(f"class {c} has no samples")
        if per_class > len(pool):
            raise ValueError(f"class {c} has {len(pool)} samples, fewer than per_class={per_class}")
        idx = rng.choice(len(pool), size=per_class, replace=False)
        chosen.extend(pool[i] for i in sorted(idx))
    order = rng.permutation(len(chosen))
    return [chosen[i] for i in order]


def bootstrap_sample(balanced, seed: int) -> list:
    """Stratified bootstrap replica.

    Every position keeps its class and is refilled with a uniform draw (with
    replacement) from that class, so class counts are preserved exactly.
    """
    rng = np.random.default_rng(seed)
    by_class = _by_class(balanced)
    out = list(balanced)
    positions = [[] for _ in range(NUM_CLASSES)]
    for i, f in enumerate(balanced):
        positions[f.label].append(i)
    for c in range(NUM_CLASSES):
        pool = by_class[c]
        if not pool:
            continue
        draws = rng.integers(0, len(pool), size=len(pool))
        for pos, d in zip(positions[c], draws):
            out[pos] = pool[d]
    return out


def _by_class(faces):
    by_class = [[] for _ in range(NUM_CLASSES)]
    for f in faces:
        by_class[f.label].append(f)
    return by_class


# --------------------------------------------------------------------------
# image ops

def resize_bilinear(image, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) array with half-pixel centres."""
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    ys = np.clip((np.arange(height) + 0.5) * (h / height) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * (w / width) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentParams:
    brightness: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0

    @classmethod
    def draw(cls, rng) -> "AugmentParams":
        return cls(brightness=float(rng.uniform(-32.0, 32.0)),
                   contrast=float(rng.uniform(0.8, 1.25)),
                   saturation=float(rng.uniform(0.8, 1.25)))


def augment(image, rng=None, params: AugmentParams | None = None) -> np.ndarray:
    """Resize to 32x32, then jitter brightness, contrast, saturation; clamp to [0, 255].

    Pass ``params`` to fix the jitter; otherwise it is drawn from ``rng``.
    """
    if params is None:
        if rng is None:
            raise ValueError("augment needs an rng or explicit params")
        params = AugmentParams.draw(rng)
    x = resize_bilinear(image, INPUT_SIZE, INPUT_SIZE)
    x = x + params.brightness
    mean = x.mean()
    x = (x - mean) * params.contrast + mean
    luma = np.tensordot(LUMA, x, axes=(0, 0))[None]
    x = luma + (x - luma) * params.saturation
    return np.clip(x, 0.0, 255.0)


def normalize(image):
    """Map pixel values in [0, 255] to [-1, 1]."""
    return 2.0 * (np.asarray(image, dtype=np.float64) / 255.0) - 1.0


def denormalize(x):
    return (np.asarray(x, dtype=np.float64) + 1.0) * 255.0 / 2.0


def prepare(image) -> np.ndarray:
    """Evaluation-time input: resize to 32x32 and normalize (no jitter)."""
    return normalize(resize_bilinear(image, INPUT_SIZE, INPUT_SIZE))


def prepare_batch(faces) -> np.ndarray:
    return np.stack([prepare(f.image) for f in faces])


# --------------------------------------------------------------------------
# synthetic group photos

@dataclass(frozen=True)
class SynthSpec:
    """Knobs for :func:`synth_generate`.

    ``image_size`` is the nominal face patch side in pixels; patches shrink
    from 1.25x to 0.75x of it towards the edge of the group.  Expression
    noise is ``label_noise`` bins at the group centre and grows by a factor
    ``1 + peripheral_noise * spread**2`` towards the edge.
    """

    n_groups: int = 150
    faces_per_group_range: tuple = (2, 6)
    image_size: int = 32
    seed: int = 0
    split: str = "train"
    canvas: tuple = (320, 240)
    label_noise: float = 0.12
    peripheral_noise: float = 16.0
    mood_coherence: float = 0.9

    def __post_init__(self):
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        lo, hi = self.faces_per_group_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad faces_per_group_range {self.faces_per_group_range}")


class _BalancedStream:
    """Endless sequence of labels in shuffled blocks of 0..5."""

    def __init__(self, rng):
        self.rng = rng
        self.buf = []

    def next(self) -> int:
        if not self.buf:
            self.buf = list(self.rng.permutation(NUM_CLASSES))
        return int(self.buf.pop())


def _render_face(label: int, size: int, clutter: float, noise: float, rng) -> np.ndarray:
    """Draw a cartoon face whose smile and eye opening grow with ``label``.

    ``clutter`` in [0, 1] scales pixel noise and the chance of an occluding
    block; peripheral (small) faces get more of it.
    """
    s = size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    u = (xx + 0.5) / s * 2 - 1
    v = (yy + 0.5) / s * 2 - 1

    bg = rng.uniform(40, 200, size=3)
    skin = np.array([rng.uniform(150, 235), rng.uniform(110, 190), rng.uniform(80, 160)])
    img = np.empty((3, s, s))
    img[:] = bg[:, None, None]
    head = (u / 0.85) ** 2 + (v / 0.95) ** 2 <= 1
    img[:, head] = skin[:, None]

    level = label / (NUM_CLASSES - 1)
    step = 2.0 / (NUM_CLASSES - 1)
    smile = (2 * level - 1) + rng.normal(0, noise * step)
    eye_open = 0.05 + 0.13 * level + rng.normal(0, 0.025)
    dark = np.array([30.0, 20.0, 20.0])

    for ex in (-0.35, 0.35):
        eye = ((u - ex) / 0.16) ** 2 + ((v + 0.25) / max(eye_open, 0.02)) ** 2 <= 1
        img[:, eye] = dark[:, None]

    # positive smile lifts the corners above the centre
    mouth_w = 0.45
    curve = 0.45 + smile * 0.12 * (1 - 2 * (u / mouth_w) ** 2)
    thick = 0.06 + 0.05 * max(level - 0.5, 0)
    mouth = (np.abs(u) <= mouth_w) & (np.abs(v - curve) <= thick)
    img[:, mouth] = np.array([150.0, 30.0, 40.0])[:, None]

    if rng.random() < 0.6 * clutter:
        bw, bh = rng.integers(s // 4, s // 2 + 1, size=2)
        bx, by = rng.integers(0, s - bw + 1), rng.integers(0, s - bh + 1)
        img[:, by:by + bh, bx:bx + bw] = rng.uniform(0, 255, size=3)[:, None, None]

    img += rng.normal(0, 8 + 40 * clutter, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_generate(spec: SynthSpec) -> DatasetManifest:
    """Generate a seeded set of labelled group photos.

    Each group has a mood drawn from a balanced label stream; every face
    takes the mood with probability ``mood_coherence`` and an independent
    balanced draw otherwise, so face-label marginals stay uniform.  Faces
    are scattered around a group centre; those farther out are drawn
    smaller and noisier.  The group label is the rounded mean face label.
    """
    rng = np.random.default_rng([spec.seed, _split_salt(spec.split)])
    moods = _BalancedStream(rng)
    others = _BalancedStream(rng)
    cw, ch = spec.canvas
    lo, hi = spec.faces_per_group_range
    groups = []
    for g in range(spec.n_groups):
        gid = f"{spec.split[:1]}{g:05d}"
        mood = moods.next()
        k = int(rng.integers(lo, hi + 1))
        center = np.array([rng.uniform(0.35, 0.65) * cw, rng.uniform(0.35, 0.65) * ch])
        faces = []
        for i in range(k):
            label = mood if rng.random() < spec.mood_coherence else others.next()
            offset = rng.normal(0, 1, size=2) * np.array([cw, ch]) * 0.18
            spread = float(np.linalg.norm(offset / np.array([cw, ch])) / 0.45)
            spread = min(spread, 1.0)
            size = int(round(spec.image_size * (1.25 - 0.5 * spread) * rng.uniform(0.9, 1.1)))
            size = max(size, 8)
            c = center + offset
            x = float(np.clip(c[0] - size / 2, 0, cw - size))
            y = float(np.clip(c[1] - size / 2, 0, ch - size))
            noise = spec.label_noise * (1 + spec.peripheral_noise * spread ** 2)
            img = _render_face(label, size, spread, noise, rng)
            faces.append(FaceSample(img, label, gid, (round(x, 2), round(y, 2), size, size),
                                    path=f"faces/{gid}_{i:02d}.png"))
        mean = sum(f.label for f in faces) / len(faces)
        groups.append(GroupSample(gid, faces, int(math.floor(mean + 0.5))))
    return DatasetManifest(spec.split, groups)


def _split_salt(split: str) -> int:
    return sum(ord(ch) * 31 ** i for i, ch in enumerate(split)) % (2 ** 31)


# --------------------------------------------------------------------------
# on-disk layout

def manifest_text(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    counts = ",".join(str(c) for c in manifest.per_class_counts)
    n_faces = sum(manifest.per_class_counts)
    buf.write(f"# rrde-manifest split={manifest.split} groups={len(manifest.groups)} "
              f"faces={n_faces} counts={counts}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for g in manifest.groups:
        for f in g.faces:
            x, y, bw, bh = f.bbox
            w.writerow([g.group_id, f.path, f.label, _num(x), _num(y), _num(bw), _num(bh), g.group_label])
    return buf.getvalue()


def _num(v) -> str:
    return repr(float(v)) if not float(v).is_integer() else str(int(v))


def write_manifest(manifest: DatasetManifest, root) -> Path:
    """Write ``manifest.csv`` plus one PNG per face under ``root``."""
    from PIL import Image

    root = Path(root)
    for g in manifest.groups:
        for f in g.faces:
            p = root / f.path
            p.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.ascontiguousarray(f.image.transpose(1, 2, 0))).save(p, format="PNG")
    path = root / "manifest.csv"
    path.write_text(manifest_text(manifest))
    return path


def read_manifest(path) -> DatasetManifest:
    from PIL import Image

    path = Path(path)
    lines = path.read_text().splitlines()
    header = dict(tok.split("=", 1) for tok in lines[0].lstrip("# ").split()[1:])
    rows = list(csv.DictReader(lines[1:]))
    groups: dict = {}
    labels: dict = {}
    for r in rows:
        img = np.asarray(Image.open(path.parent / r["path"]).convert("RGB")).transpose(2, 0, 1).copy()
        bbox = tuple(float(r[k]) for k in ("bbox_x", "bbox_y", "bbox_w", "bbox_h"))
        face = FaceSample(img, int(r["label"]), r["group_id"], bbox, path=r["path"])
        groups.setdefault(r["group_id"], []).append(face)
        labels[r["group_id"]] = int(r["group_label"])
    counts = tuple(int(c) for c in header["counts"].split(","))
    return DatasetManifest(header["split"], [GroupSample(g, fs, labels[g]) for g, fs in groups.items()],
                           counts)
